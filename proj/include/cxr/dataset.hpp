#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cxr/errors.hpp"

namespace cxr {

inline constexpr int kNumLabels = 15;
inline constexpr int kNoFindingIndex = 14;
inline constexpr float kMaxPlausibleAge = 120.0f;

/// Canonical pathology order (index 14 is "No Finding"); fixed across runs.
const std::array<std::string, kNumLabels>& label_names();
int label_index(const std::string& name); // throws ValueError on unknown token

using LabelVector = std::array<std::uint8_t, kNumLabels>;

/// Pipe-separated findings string -> 15-bit vector. "No Finding" is exclusive
/// with every pathology bit.
LabelVector encode_labels(const std::string& findings);
std::string decode_labels(const LabelVector& labels);

/// One dataset example. gender: M=1/F=0; view: AP=1/PA=0.
struct Record {
    std::string image_ref;
    LabelVector labels{};
    std::string patient_id;
    float age_years = 0.0f;
    int gender = 0;
    int view = 0;
    int follow_up = 0;
    bool age_clamped = false;
};

/// Parses the published entry CSV layout (header row with at least
/// Image Index, Finding Labels, Follow-up #, Patient ID, Patient Age,
/// Patient Gender, View Position; extra columns ignored).
std::vector<Record> parse_entry_csv(const std::filesystem::path& path);
std::vector<Record> parse_entry_csv(std::istream& in, const std::string& origin);

struct DatasetStats {
    std::size_t records = 0;
    std::size_t patients = 0;
    std::array<std::size_t, kNumLabels> positives{};
    std::size_t female = 0, male = 0;
    std::size_t pa = 0, ap = 0;
    double age_mean = 0.0, age_std = 0.0; // population std, pre-scaling years
    std::size_t ages_clamped = 0;

    double gender_ratio() const; // majority count / minority count
    double view_ratio() const;
    double prevalence(int label) const;
};

DatasetStats compute_stats(std::span<const Record> records);
std::string format_stats(const DatasetStats& stats);

// ---- Patient-disjoint re-sampling splits --------------------------------

enum class Subset { kTrain, kVal, kTest };
const char* to_string(Subset s);
Subset subset_from_string(const std::string& s);

inline constexpr double kSplitFractions[3] = {0.7, 0.1, 0.2};

/// Five deterministic patient-disjoint assignments targeting 70/10/20 image
/// quotas.
struct SplitPlan {
    std::uint64_t seed = 0;
    double tolerance_pp = 1.5;
    std::vector<std::map<std::string, Subset>> resamples;

    int num_resamples() const { return static_cast<int>(resamples.size()); }
    Subset subset_of(int resample, const std::string& patient_id) const;

    void save(const std::filesystem::path& path) const;
    static SplitPlan load(const std::filesystem::path& path);
};

/// Greedy randomized assignment by image-count deficit. Throws ValueError if
/// any subset's image share misses its target by more than `tolerance_pp`
/// percentage points (suggesting a looser tolerance for degenerate datasets).
SplitPlan make_splits(std::span<const Record> records, std::uint64_t seed,
                      int num_resamples = 5, double tolerance_pp = 1.5);

struct SplitCounts {
    std::array<std::size_t, 3> images{};
    std::array<std::size_t, 3> patients{};
};
SplitCounts count_split(std::span<const Record> records, const SplitPlan& plan, int resample);

// ---- Age scaling ----------------------------------------------------------

/// Affine [min,max] -> [0,1] fitted on the training portion only; clamps
/// out-of-range ages.
struct AgeScaler {
    float min_age = 0.0f;
    float max_age = 0.0f;
    bool fitted = false;

    void fit(std::span<const float> ages);
    void fit(std::span<const Record> records, const SplitPlan& plan, int resample);
    float scale(float age) const; // throws StateError if unfitted
};

} // namespace cxr

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "cxr/data_source.hpp"
#include "cxr/dataset.hpp"
#include "cxr/image.hpp"

namespace cxr {

/// Bright disc planted when `label` is positive; location recorded for
/// Grad-CAM localization checks.
struct SynthMotif {
    int label = 0;
    float radius_frac = 0.15f; // of the image side
    float intensity = 0.9f;
};

/// Ties a label to a non-image feature so meta fusion is separable by
/// construction.
struct SynthMetaRule {
    enum class Source { kView, kGender, kAgeAbove };
    int label = 0;
    Source source = Source::kView;
    float age_threshold = 50.0f; // kAgeAbove only
};

struct SynthSpec {
    int num_patients = 16;
    int min_images_per_patient = 1;
    int max_images_per_patient = 1;
    /// >1 skews the per-patient image count toward the minimum with a heavy
    /// tail toward the maximum.
    double size_skew = 1.0;
    int image_size = 64;
    float noise = 0.15f;     // uniform background noise amplitude
    float base_level = 0.3f; // background brightness
    /// Base brightness tracks age linearly (planted signal for the age probe).
    bool age_brightness = false;
    std::vector<SynthMotif> motifs;
    std::vector<SynthMetaRule> meta_rules;
    std::array<float, 14> pathology_priors{}; // Bernoulli per pathology label
};

struct MotifBox {
    int label = 0;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0; // inclusive bounds
    bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

struct SynthExample {
    Record record;
    ImageU8 image;
    std::vector<MotifBox> motif_boxes;
};

/// Deterministic desk-scale corpus with known label/pixel/meta dependencies.
class SyntheticCorpus {
public:
    SyntheticCorpus(const SynthSpec& spec, std::uint64_t seed);

    const SynthSpec& spec() const { return spec_; }
    const std::vector<SynthExample>& examples() const { return examples_; }
    std::vector<Record> records() const;

    /// Materializes the official on-disk layout: images/<name>.png +
    /// Data_Entry.csv (+ motif_boxes.csv for localization ground truth).
    void write(const std::filesystem::path& dir) const;

private:
    SynthSpec spec_;
    std::vector<SynthExample> examples_;
};

/// In-memory SampleSource over a synthetic corpus. Images are used as-is
/// (no augmentation) so overfitting checks see a fixed input set.
class SyntheticSource final : public SampleSource {
public:
    SyntheticSource(const SyntheticCorpus& corpus, std::vector<std::size_t> indices,
                    const AgeScaler& scaler);

    std::size_t size() const override { return indices_.size(); }
    Sample get(std::size_t index, std::uint64_t epoch_seed, bool train_mode) const override;
    const SynthExample& example(std::size_t index) const;

private:
    const SyntheticCorpus* corpus_;
    std::vector<std::size_t> indices_;
    AgeScaler scaler_;
};

/// Identity index list covering the whole corpus.
std::vector<std::size_t> all_indices(const SyntheticCorpus& corpus);

} // namespace cxr

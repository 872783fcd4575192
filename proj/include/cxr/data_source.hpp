#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cxr/dataset.hpp"
#include "cxr/model.hpp"
#include "cxr/tensor.hpp"

namespace cxr {

struct Sample {
    std::string id;
    Tensor image; // [C,S,S]
    MetaFeatures meta;
    float age_years = 0.0f; // unscaled; regression target of the age probe
    std::array<float, kNumLabels> labels{};
};

/// Order-deterministic sample provider. `get` must be pure given
/// (index, epoch_seed, train_mode) so batches replay identically.
class SampleSource {
public:
    virtual ~SampleSource() = default;
    virtual std::size_t size() const = 0;
    virtual Sample get(std::size_t index, std::uint64_t epoch_seed, bool train_mode) const = 0;
};

/// Streams records from a ChestX-ray14-layout directory: PNGs under
/// `images_dir`, augmentation in train mode, squash-resize + center crop in
/// eval mode. Ages are scaled with the provided (train-subset-fitted) scaler.
class DiskSource final : public SampleSource {
public:
    DiskSource(std::vector<Record> records, std::filesystem::path images_dir, int input_size,
               int input_channels, AgeScaler scaler);

    std::size_t size() const override { return records_.size(); }
    Sample get(std::size_t index, std::uint64_t epoch_seed, bool train_mode) const override;
    const std::vector<Record>& records() const { return records_; }

private:
    std::vector<Record> records_;
    std::filesystem::path images_dir_;
    int input_size_;
    int input_channels_;
    AgeScaler scaler_;
};

/// Fully materialized in-memory source (synthetic corpora, tests).
class MemorySource final : public SampleSource {
public:
    explicit MemorySource(std::vector<Sample> samples) : samples_(std::move(samples)) {}
    std::size_t size() const override { return samples_.size(); }
    Sample get(std::size_t index, std::uint64_t, bool) const override {
        return samples_.at(index);
    }

private:
    std::vector<Sample> samples_;
};

/// Filters another source down to the records of one split subset.
std::vector<Record> records_for_subset(std::span<const Record> records, const SplitPlan& plan,
                                       int resample, Subset subset);

} // namespace cxr

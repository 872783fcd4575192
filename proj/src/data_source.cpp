#include "cxr/data_source.hpp"

#include "cxr/augment.hpp"
#include "cxr/image.hpp"
#include "cxr/rng.hpp"

namespace cxr {

DiskSource::DiskSource(std::vector<Record> records, std::filesystem::path images_dir,
                       int input_size, int input_channels, AgeScaler scaler)
    : records_(std::move(records)),
      images_dir_(std::move(images_dir)),
      input_size_(input_size),
      input_channels_(input_channels),
      scaler_(std::move(scaler)) {}

Sample DiskSource::get(std::size_t index, std::uint64_t epoch_seed, bool train_mode) const {
    const Record& r = records_.at(index);
    const ImageU8 img = read_png_gray(images_dir_ / r.image_ref);
    Sample s;
    s.id = r.image_ref;
    if (train_mode) {
        Rng rng(Rng::mix(epoch_seed, static_cast<std::uint64_t>(index)));
        s.image = augment_train(img, rng, input_size_);
    } else {
        s.image = preprocess_eval(img, input_size_);
    }
    if (input_channels_ != 1) s.image = replicate_channels(s.image, input_channels_);
    s.meta.age_scaled = scaler_.scale(r.age_years);
    s.meta.gender = static_cast<float>(r.gender);
    s.meta.view = static_cast<float>(r.view);
    s.age_years = r.age_years;
    for (int i = 0; i < kNumLabels; ++i)
        s.labels[static_cast<std::size_t>(i)] = static_cast<float>(r.labels[static_cast<std::size_t>(i)]);
    return s;
}

std::vector<Record> records_for_subset(std::span<const Record> records, const SplitPlan& plan,
                                       int resample, Subset subset) {
    std::vector<Record> out;
    for (const Record& r : records)
        if (plan.subset_of(resample, r.patient_id) == subset) out.push_back(r);
    return out;
}

} // namespace cxr

#include "cxr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "cxr/rng.hpp"

namespace cxr {

SyntheticCorpus::SyntheticCorpus(const SynthSpec& spec, std::uint64_t seed) : spec_(spec) {
    if (spec.num_patients < 1) throw ValueError("SynthSpec: need at least one patient");
    if (spec.min_images_per_patient < 1 ||
        spec.max_images_per_patient < spec.min_images_per_patient)
        throw ValueError("SynthSpec: bad images-per-patient range");
    for (const auto& m : spec.motifs)
        if (m.label < 0 || m.label >= kNoFindingIndex)
            throw ValueError("SynthSpec: motif label out of pathology range");

    Rng rng(Rng::mix(seed, "synth"));
    const int s = spec.image_size;
    int image_counter = 0;
    for (int p = 0; p < spec.num_patients; ++p) {
        char pid[16];
        std::snprintf(pid, sizeof(pid), "P%05d", p + 1);

        int n_images = spec.min_images_per_patient;
        if (spec.max_images_per_patient > spec.min_images_per_patient) {
            const double u = std::pow(rng.uniform(), spec.size_skew);
            n_images = spec.min_images_per_patient +
                       static_cast<int>(u * (spec.max_images_per_patient -
                                             spec.min_images_per_patient + 1));
            n_images = std::min(n_images, spec.max_images_per_patient);
        }

        const float age = rng.uniform_f(18.0f, 90.0f);
        const int gender = rng.bernoulli(0.5) ? 1 : 0;

        for (int k = 0; k < n_images; ++k) {
            SynthExample ex;
            ex.record.patient_id = pid;
            ex.record.age_years = age;
            ex.record.gender = gender;
            ex.record.view = rng.bernoulli(0.5) ? 1 : 0;
            ex.record.follow_up = k;
            char name[32];
            std::snprintf(name, sizeof(name), "S%06d.png", ++image_counter);
            ex.record.image_ref = name;

            LabelVector labels{};
            for (int l = 0; l < kNoFindingIndex; ++l)
                if (spec.pathology_priors[static_cast<std::size_t>(l)] > 0.0f &&
                    rng.bernoulli(spec.pathology_priors[static_cast<std::size_t>(l)]))
                    labels[static_cast<std::size_t>(l)] = 1;
            for (const auto& rule : spec.meta_rules) {
                bool on = false;
                switch (rule.source) {
                case SynthMetaRule::Source::kView: on = ex.record.view == 1; break;
                case SynthMetaRule::Source::kGender: on = ex.record.gender == 1; break;
                case SynthMetaRule::Source::kAgeAbove: on = age > rule.age_threshold; break;
                }
                labels[static_cast<std::size_t>(rule.label)] = on ? 1 : 0;
            }
            bool any = false;
            for (int l = 0; l < kNoFindingIndex; ++l)
                if (labels[static_cast<std::size_t>(l)]) any = true;
            labels[kNoFindingIndex] = any ? 0 : 1;
            ex.record.labels = labels;

            // Background: flat (or age-coded) level plus uniform noise.
            ImageF img;
            img.width = img.height = s;
            img.pixels.resize(static_cast<std::size_t>(s) * s);
            float level = spec.base_level;
            if (spec.age_brightness) level = 0.15f + 0.7f * (age - 18.0f) / (90.0f - 18.0f);
            for (auto& v : img.pixels)
                v = level + rng.uniform_f(-spec.noise, spec.noise);

            for (const auto& motif : spec.motifs) {
                if (!labels[static_cast<std::size_t>(motif.label)]) continue;
                const int radius = std::max(2, static_cast<int>(motif.radius_frac * s));
                const int margin = radius + 2;
                const int cx = static_cast<int>(rng.uniform_int(margin, s - 1 - margin));
                const int cy = static_cast<int>(rng.uniform_int(margin, s - 1 - margin));
                for (int y = cy - radius; y <= cy + radius; ++y)
                    for (int x = cx - radius; x <= cx + radius; ++x) {
                        const int dx = x - cx, dy = y - cy;
                        if (dx * dx + dy * dy <= radius * radius)
                            img.pixels[static_cast<std::size_t>(y) * s + x] = motif.intensity;
                    }
                ex.motif_boxes.push_back(
                    {motif.label, cx - radius, cy - radius, cx + radius, cy + radius});
            }
            ex.image = to_u8(img);
            examples_.push_back(std::move(ex));
        }
    }
}

std::vector<Record> SyntheticCorpus::records() const {
    std::vector<Record> out;
    out.reserve(examples_.size());
    for (const auto& ex : examples_) out.push_back(ex.record);
    return out;
}

void SyntheticCorpus::write(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir / "images");
    std::ofstream csv(dir / "Data_Entry.csv");
    if (!csv) throw IoError("cannot write synthetic corpus CSV in '" + dir.string() + "'");
    csv << "Image Index,Finding Labels,Follow-up #,Patient ID,Patient Age,Patient Gender,"
           "View Position\n";
    std::ofstream boxes(dir / "motif_boxes.csv");
    boxes << "image_id,label,x0,y0,x1,y1\n";
    for (const auto& ex : examples_) {
        write_png_gray(dir / "images" / ex.record.image_ref, ex.image);
        csv << ex.record.image_ref << "," << decode_labels(ex.record.labels) << ","
            << ex.record.follow_up << "," << ex.record.patient_id << ","
            << static_cast<int>(std::lround(ex.record.age_years)) << ","
            << (ex.record.gender == 1 ? "M" : "F") << "," << (ex.record.view == 1 ? "AP" : "PA")
            << "\n";
        for (const auto& b : ex.motif_boxes)
            boxes << ex.record.image_ref << "," << b.label << "," << b.x0 << "," << b.y0 << ","
                  << b.x1 << "," << b.y1 << "\n";
    }
}

SyntheticSource::SyntheticSource(const SyntheticCorpus& corpus, std::vector<std::size_t> indices,
                                 const AgeScaler& scaler)
    : corpus_(&corpus), indices_(std::move(indices)), scaler_(scaler) {}

const SynthExample& SyntheticSource::example(std::size_t index) const {
    return corpus_->examples().at(indices_.at(index));
}

Sample SyntheticSource::get(std::size_t index, std::uint64_t, bool) const {
    const SynthExample& ex = example(index);
    Sample s;
    s.id = ex.record.image_ref;
    const int size = ex.image.width;
    std::vector<float> pixels(ex.image.pixels.size());
    for (std::size_t i = 0; i < pixels.size(); ++i)
        pixels[i] = static_cast<float>(ex.image.pixels[i]) / 255.0f;
    s.image = Tensor::from({1, size, size}, std::move(pixels));
    s.meta.age_scaled = scaler_.scale(ex.record.age_years);
    s.meta.gender = static_cast<float>(ex.record.gender);
    s.meta.view = static_cast<float>(ex.record.view);
    s.age_years = ex.record.age_years;
    for (int i = 0; i < kNumLabels; ++i)
        s.labels[static_cast<std::size_t>(i)] = static_cast<float>(ex.record.labels[static_cast<std::size_t>(i)]);
    return s;
}

std::vector<std::size_t> all_indices(const SyntheticCorpus& corpus) {
    std::vector<std::size_t> idx(corpus.examples().size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
}

} // namespace cxr

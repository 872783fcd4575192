// cxr: multi-label chest X-ray classification toolkit.
//
// Subcommands: synth, split, train, eval, compare, probe, gradcam.
// Exit codes: 0 success, 2 input/config error, 3 numeric failure.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cxr/augment.hpp"
#include "cxr/checkpoint.hpp"
#include "cxr/dataset.hpp"
#include "cxr/data_source.hpp"
#include "cxr/gradcam.hpp"
#include "cxr/image.hpp"
#include "cxr/loss.hpp"
#include "cxr/metrics.hpp"
#include "cxr/model.hpp"
#include "cxr/report.hpp"
#include "cxr/rng.hpp"
#include "cxr/synth.hpp"
#include "cxr/train.hpp"

namespace fs = std::filesystem;
using namespace cxr;

namespace {

constexpr const char* kEnvPrefix = "CXR_";

// ---- Experiment configuration ---------------------------------------------

/// Flat key=value configuration with CXR_* environment overrides
/// (key "model.depth" -> CXR_MODEL_DEPTH).
class KeyValueConfig {
public:
    void load_file(const fs::path& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file '" + path.string() + "'");
        std::string line;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const auto trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw ValueError(path.string() + ":" + std::to_string(line_no) +
                                 ": expected key = value");
            const std::string key = trim(trimmed.substr(0, eq));
            const std::string value = trim(trimmed.substr(eq + 1));
            if (!known_keys().count(key))
                throw ValueError(path.string() + ":" + std::to_string(line_no) +
                                 ": unknown config key '" + key + "'");
            values_[key] = value;
        }
    }

    void apply_env_overrides() {
        for (const auto& key : known_keys()) {
            std::string env = kEnvPrefix;
            for (const char c : key)
                env.push_back(c == '.' ? '_' : static_cast<char>(std::toupper(c)));
            if (const char* v = std::getenv(env.c_str())) values_[key] = v;
        }
    }

    std::optional<std::string> get(const std::string& key) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return std::nullopt;
        return it->second;
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        return get(key).value_or(fallback);
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static const std::set<std::string>& known_keys() {
        static const std::set<std::string> keys = {
            "data.csv",       "data.images",      "model.kind",     "model.depth",
            "model.channels", "model.input_size", "model.extra_pool", "model.meta",
            "model.width_div", "model.freeze",    "model.pretrained", "train.batch",
            "train.lr",       "train.patience",   "train.max_epochs", "seed",
            "out.dir",        "run.tag"};
        return keys;
    }

    std::map<std::string, std::string> values_;
};

struct ExperimentConfig {
    fs::path data_csv;
    fs::path data_images;
    std::string model_kind = "resnet"; // resnet | meta_mlp
    ModelConfig model;
    fs::path pretrained; // optional checkpoint dir
    TrainPlan plan;
    std::uint64_t seed = 0;
    fs::path out_dir = "runs";
    std::string run_tag = "run";
};

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ValueError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

ExperimentConfig load_experiment_config(const fs::path& path, std::optional<std::uint64_t> seed_flag) {
    KeyValueConfig kv;
    kv.load_file(path);
    kv.apply_env_overrides();

    ExperimentConfig cfg;
    if (const auto v = kv.get("data.csv")) cfg.data_csv = *v;
    if (const auto v = kv.get("data.images")) cfg.data_images = *v;
    cfg.model_kind = kv.get_or("model.kind", "resnet");
    if (cfg.model_kind != "resnet" && cfg.model_kind != "meta_mlp")
        throw ValueError("model.kind must be resnet or meta_mlp");
    cfg.model.depth = std::stoi(kv.get_or("model.depth", "50"));
    cfg.model.input_channels = std::stoi(kv.get_or("model.channels", "1"));
    cfg.model.input_size = std::stoi(kv.get_or("model.input_size", "224"));
    const std::string extra_pool = kv.get_or("model.extra_pool", "auto");
    cfg.model.extra_pool_after_conv2 =
        extra_pool == "auto" ? cfg.model.input_size == 448 : parse_bool("model.extra_pool", extra_pool);
    cfg.model.use_meta = parse_bool("model.meta", kv.get_or("model.meta", "false"));
    cfg.model.width_div = std::stoi(kv.get_or("model.width_div", "1"));
    cfg.model.freeze = freeze_from_string(kv.get_or("model.freeze", "none"));
    if (const auto v = kv.get("model.pretrained")) cfg.pretrained = *v;
    cfg.plan.batch_size = std::stoi(kv.get_or("train.batch", "16"));
    cfg.plan.lr = std::stof(kv.get_or("train.lr", "0.001"));
    cfg.plan.patience = std::stoi(kv.get_or("train.patience", "1"));
    cfg.plan.max_epochs = std::stoi(kv.get_or("train.max_epochs", "50"));
    cfg.seed = std::stoull(kv.get_or("seed", "0"));
    cfg.out_dir = kv.get_or("out.dir", "runs");
    cfg.run_tag = kv.get_or("run.tag", "run");
    if (seed_flag) cfg.seed = *seed_flag;
    if (cfg.model_kind == "resnet") cfg.model.validate();
    return cfg;
}

void require_dataset(const ExperimentConfig& cfg) {
    if (cfg.data_csv.empty())
        throw ValueError("config is missing data.csv");
    if (!fs::exists(cfg.data_csv))
        throw IoError("dataset CSV '" + cfg.data_csv.string() + "' does not exist");
    if (cfg.data_images.empty() || !fs::exists(cfg.data_images))
        throw IoError("image directory '" + cfg.data_images.string() + "' does not exist");
}

// ---- Official split lists ---------------------------------------------------

struct OfficialSplit {
    std::map<std::string, Subset> by_image;
};

OfficialSplit load_official_lists(const std::string& arg) {
    std::vector<std::string> files;
    std::stringstream ss(arg);
    std::string item;
    while (std::getline(ss, item, ',')) files.push_back(item);
    if (files.size() != 3)
        throw ValueError("--official-split-list expects train.txt,val.txt,test.txt");
    OfficialSplit split;
    const Subset subsets[3] = {Subset::kTrain, Subset::kVal, Subset::kTest};
    for (int i = 0; i < 3; ++i) {
        std::ifstream in(files[static_cast<std::size_t>(i)]);
        if (!in) throw IoError("cannot open split list '" + files[static_cast<std::size_t>(i)] + "'");
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (!split.by_image.emplace(line, subsets[i]).second)
                throw ValueError("image '" + line + "' appears in more than one official list");
        }
    }
    return split;
}

std::vector<Record> filter_by_official(std::span<const Record> records, const OfficialSplit& split,
                                       Subset subset) {
    std::vector<Record> out;
    for (const Record& r : records) {
        const auto it = split.by_image.find(r.image_ref);
        if (it != split.by_image.end() && it->second == subset) out.push_back(r);
    }
    return out;
}

// ---- Shared pipeline helpers ------------------------------------------------

struct FoldData {
    DiskSource train;
    DiskSource val;
    DiskSource test;
};

AgeScaler fit_scaler(std::span<const Record> train_records) {
    std::vector<float> ages;
    ages.reserve(train_records.size());
    for (const Record& r : train_records) ages.push_back(r.age_years);
    AgeScaler scaler;
    scaler.fit(ages);
    return scaler;
}

FoldData make_fold_data(const ExperimentConfig& cfg, std::span<const Record> records,
                        const SplitPlan& plan, int resample) {
    auto train_records = records_for_subset(records, plan, resample, Subset::kTrain);
    auto val_records = records_for_subset(records, plan, resample, Subset::kVal);
    auto test_records = records_for_subset(records, plan, resample, Subset::kTest);
    const AgeScaler scaler = fit_scaler(train_records);
    const int s = cfg.model.input_size;
    const int c = cfg.model.input_channels;
    return FoldData{DiskSource(std::move(train_records), cfg.data_images, s, c, scaler),
                    DiskSource(std::move(val_records), cfg.data_images, s, c, scaler),
                    DiskSource(std::move(test_records), cfg.data_images, s, c, scaler)};
}

FoldData make_official_fold_data(const ExperimentConfig& cfg, std::span<const Record> records,
                                 const OfficialSplit& split) {
    auto train_records = filter_by_official(records, split, Subset::kTrain);
    auto val_records = filter_by_official(records, split, Subset::kVal);
    auto test_records = filter_by_official(records, split, Subset::kTest);
    const AgeScaler scaler = fit_scaler(train_records);
    const int s = cfg.model.input_size;
    const int c = cfg.model.input_channels;
    return FoldData{DiskSource(std::move(train_records), cfg.data_images, s, c, scaler),
                    DiskSource(std::move(val_records), cfg.data_images, s, c, scaler),
                    DiskSource(std::move(test_records), cfg.data_images, s, c, scaler)};
}

Model build_from_config(const ExperimentConfig& cfg) {
    const std::uint64_t model_seed = Rng::mix(cfg.seed, "model");
    Model model = cfg.model_kind == "meta_mlp" ? build_meta_mlp(model_seed)
                                               : build_model(cfg.model, model_seed);
    if (!cfg.pretrained.empty()) import_pretrained(model, cfg.pretrained);
    return model;
}

FoldScores score_test_set(const Model& model, const DiskSource& test, const std::string& tag,
                          int fold, int batch_size) {
    const auto rows = predict(model, test, batch_size);
    FoldScores fscores;
    fscores.model_tag = tag;
    fscores.fold = fold;
    for (std::size_t i = 0; i < test.records().size(); ++i) {
        fscores.ids.push_back(test.records()[i].image_ref);
        std::array<float, kNumLabels> row{};
        for (int l = 0; l < kNumLabels && l < static_cast<int>(rows[i].size()); ++l)
            row[static_cast<std::size_t>(l)] = rows[i][static_cast<std::size_t>(l)];
        fscores.scores.push_back(row);
    }
    return fscores;
}

std::vector<std::array<std::uint8_t, kNumLabels>> truths_of(const DiskSource& test) {
    std::vector<std::array<std::uint8_t, kNumLabels>> t;
    t.reserve(test.records().size());
    for (const Record& r : test.records()) t.push_back(r.labels);
    return t;
}

// ---- Subcommands -------------------------------------------------------------

int cmd_split(const fs::path& config_path, std::optional<std::uint64_t> seed_flag,
              const fs::path& out_path, double tolerance_pp) {
    const ExperimentConfig cfg = load_experiment_config(config_path, seed_flag);
    if (cfg.data_csv.empty() || !fs::exists(cfg.data_csv))
        throw IoError("dataset CSV '" + cfg.data_csv.string() + "' does not exist");
    const auto records = parse_entry_csv(cfg.data_csv);
    const SplitPlan plan = make_splits(records, Rng::mix(cfg.seed, "split"), 5, tolerance_pp);
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    plan.save(out_path);

    std::printf("split plan: %d re-samples over %zu records -> %s\n", plan.num_resamples(),
                records.size(), out_path.string().c_str());
    for (int r = 0; r < plan.num_resamples(); ++r) {
        const SplitCounts c = count_split(records, plan, r);
        std::printf("  resample %d: train %zu/%zu val %zu/%zu test %zu/%zu (patients/images)\n", r,
                    c.patients[0], c.images[0], c.patients[1], c.images[1], c.patients[2],
                    c.images[2]);
    }
    return 0;
}

int cmd_train(const fs::path& config_path, std::optional<std::uint64_t> seed_flag,
              const fs::path& split_path, int resample, const std::string& official_lists) {
    ExperimentConfig cfg = load_experiment_config(config_path, seed_flag);
    require_dataset(cfg);
    const auto records = parse_entry_csv(cfg.data_csv);

    std::optional<FoldData> data;
    if (!official_lists.empty()) {
        data.emplace(make_official_fold_data(cfg, records, load_official_lists(official_lists)));
    } else {
        if (!fs::exists(split_path))
            throw IoError("split plan '" + split_path.string() + "' does not exist (run `cxr split`)");
        const SplitPlan plan = SplitPlan::load(split_path);
        if (resample < 0 || resample >= plan.num_resamples())
            throw ValueError("--resample out of range");
        data.emplace(make_fold_data(cfg, records, plan, resample));
    }

    Model model = build_from_config(cfg);
    cfg.plan.seed = Rng::mix(Rng::mix(cfg.seed, "train"), static_cast<std::uint64_t>(resample));
    const fs::path run_dir = cfg.out_dir / cfg.run_tag / ("resample" + std::to_string(resample));
    fs::create_directories(run_dir);

    const TrainResult result = train(model, cfg.plan, data->train, data->val);
    write_history_csv(run_dir / "history.csv", result.history);
    if (result.best_epoch > 0) save_checkpoint(model, run_dir / "checkpoint");

    if (result.diverged) {
        std::fprintf(stderr, "training diverged after %zu epochs; last good checkpoint %s\n",
                     result.history.size(),
                     result.best_epoch > 0 ? (run_dir / "checkpoint").string().c_str() : "(none)");
        return 3;
    }
    std::printf("trained %s: best epoch %d val loss %.6f -> %s\n", cfg.run_tag.c_str(),
                result.best_epoch, static_cast<double>(result.best_val_loss),
                run_dir.string().c_str());
    return 0;
}

struct ModelArg {
    std::string tag;
    std::vector<fs::path> checkpoints; // one, or one per fold
};

ModelArg parse_model_arg(const std::string& arg) {
    const auto eq = arg.find('=');
    if (eq == std::string::npos)
        throw ValueError("--model expects tag=checkpoint[,checkpoint...], got '" + arg + "'");
    ModelArg m;
    m.tag = arg.substr(0, eq);
    std::stringstream ss(arg.substr(eq + 1));
    std::string item;
    while (std::getline(ss, item, ',')) m.checkpoints.emplace_back(item);
    if (m.tag.empty() || m.checkpoints.empty())
        throw ValueError("--model expects tag=checkpoint[,checkpoint...]");
    return m;
}

int cmd_eval(const fs::path& config_path, std::optional<std::uint64_t> seed_flag,
             const fs::path& split_path, const std::vector<std::string>& model_args,
             std::vector<int> folds, const std::string& official_lists, const fs::path& out_dir) {
    ExperimentConfig cfg = load_experiment_config(config_path, seed_flag);
    require_dataset(cfg);
    const auto records = parse_entry_csv(cfg.data_csv);
    fs::create_directories(out_dir);

    std::optional<SplitPlan> plan;
    std::optional<OfficialSplit> official;
    if (!official_lists.empty()) {
        official = load_official_lists(official_lists);
        folds = {0};
    } else {
        plan = SplitPlan::load(split_path);
        if (folds.empty())
            for (int f = 0; f < plan->num_resamples(); ++f) folds.push_back(f);
    }

    std::vector<std::string> tags;
    std::vector<EvalReport> reports;
    std::vector<FoldAucs> official_aucs;
    std::vector<FoldScores> all_scores;

    for (const std::string& arg : model_args) {
        const ModelArg marg = parse_model_arg(arg);
        if (marg.checkpoints.size() != 1 && marg.checkpoints.size() != folds.size())
            throw ValueError("--model " + marg.tag + ": expected 1 or " +
                             std::to_string(folds.size()) + " checkpoints");
        std::vector<FoldAucs> per_fold;
        for (std::size_t fi = 0; fi < folds.size(); ++fi) {
            const int fold = folds[fi];
            const fs::path ckpt =
                marg.checkpoints.size() == 1 ? marg.checkpoints[0] : marg.checkpoints[fi];
            Model model = load_checkpoint(ckpt);
            FoldData data = official ? make_official_fold_data(cfg, records, *official)
                                     : make_fold_data(cfg, records, *plan, fold);
            const FoldScores scores =
                score_test_set(model, data.test, marg.tag, fold, cfg.plan.batch_size);
            const auto truths = truths_of(data.test);
            FoldAucs aucs = fold_aucs(scores, truths);
            for (int l = 0; l < kNumLabels; ++l)
                if (!aucs[static_cast<std::size_t>(l)])
                    std::fprintf(stderr,
                                 "warning: %s fold %d: single-class pathology '%s', AUC marked missing\n",
                                 marg.tag.c_str(), fold,
                                 label_names()[static_cast<std::size_t>(l)].c_str());
            per_fold.push_back(aucs);
            all_scores.push_back(scores);
        }
        tags.push_back(marg.tag);
        if (per_fold.size() >= 2)
            reports.push_back(aggregate_folds(per_fold));
        else
            official_aucs.push_back(per_fold[0]);
    }

    save_scores_csv(out_dir / "scores.csv", all_scores);
    if (!reports.empty()) {
        write_auc_csv(out_dir / "report.csv", tags, reports);
        const std::string table = render_auc_table(tags, reports);
        std::ofstream(out_dir / "report.txt") << table;
        std::fputs(table.c_str(), stdout);
    }
    if (!official_aucs.empty()) {
        write_official_csv(out_dir / "official_report.csv", tags, official_aucs);
        const std::string table = render_official_table(tags, official_aucs);
        std::ofstream(out_dir / "official_report.txt") << table;
        std::fputs(table.c_str(), stdout);
    }
    return 0;
}

int cmd_compare(const std::vector<fs::path>& score_files, bool per_label, const fs::path& out_dir) {
    std::vector<FoldScores> sets;
    for (const auto& file : score_files) {
        auto loaded = load_scores_csv(file);
        sets.insert(sets.end(), loaded.begin(), loaded.end());
    }
    if (sets.empty()) throw ValueError("no score sets loaded");

    std::map<std::string, std::vector<FoldScores>> by_tag;
    for (auto& set : sets) by_tag[set.model_tag].push_back(std::move(set));
    std::vector<std::string> tags;
    std::vector<std::vector<FoldScores>> models;
    for (auto& [tag, folds] : by_tag) {
        std::sort(folds.begin(), folds.end(),
                  [](const FoldScores& a, const FoldScores& b) { return a.fold < b.fold; });
        tags.push_back(tag);
        models.push_back(std::move(folds));
    }

    const auto matrix = spearman_matrix(
        models, per_label ? SpearmanPooling::kPerLabelMean : SpearmanPooling::kFlattened);
    fs::create_directories(out_dir);
    write_correlation_csv(out_dir / "correlation.csv", tags, matrix);
    const std::string table = render_correlation_table(tags, matrix);
    std::ofstream(out_dir / "correlation.txt") << table;
    std::fputs(table.c_str(), stdout);
    return 0;
}

int cmd_probe(const fs::path& config_path, std::optional<std::uint64_t> seed_flag,
              const fs::path& split_path, int resample, const fs::path& base_checkpoint,
              const std::string& target_str, const fs::path& out_dir) {
    ExperimentConfig cfg = load_experiment_config(config_path, seed_flag);
    require_dataset(cfg);
    const ProbeTarget target = probe_target_from_string(target_str);
    const auto records = parse_entry_csv(cfg.data_csv);
    const SplitPlan plan = SplitPlan::load(split_path);

    Model base = load_checkpoint(base_checkpoint);
    cfg.model = base.config(); // sources must feed the base's input geometry
    Model probe = build_probe(base, target, Rng::mix(cfg.seed, "probe"));

    FoldData data = make_fold_data(cfg, records, plan, resample);
    cfg.plan.seed = Rng::mix(Rng::mix(cfg.seed, "probe-train"), static_cast<std::uint64_t>(resample));
    const TrainResult result = train(probe, cfg.plan, data.train, data.val);
    if (result.diverged) {
        std::fprintf(stderr, "probe training diverged after %zu epochs\n", result.history.size());
        return 3;
    }

    const auto rows = predict(probe, data.test, cfg.plan.batch_size);
    fs::create_directories(out_dir);
    std::ofstream out(out_dir / ("probe_" + target_str + ".csv"));
    out << "metric,value\n";

    if (target == ProbeTarget::kAge) {
        std::vector<double> preds, truths;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            preds.push_back(rows[i][0]);
            truths.push_back(data.test.records()[i].age_years);
        }
        const MaeResult r = mae(preds, truths);
        std::printf("age probe: MAE %.2f +- %.2f years\n", r.mae, r.stddev);
        out << "mae," << r.mae << "\nmae_std," << r.stddev << "\n";
    } else {
        std::vector<double> scores;
        std::vector<std::uint8_t> truths;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            scores.push_back(rows[i][0]);
            const Record& r = data.test.records()[i];
            truths.push_back(static_cast<std::uint8_t>(target == ProbeTarget::kGender ? r.gender : r.view));
        }
        const auto auc = roc_auc(scores, truths);
        if (!auc) throw ValueError("probe test subset has a single class; AUC undefined");
        const YoudenPoint yp = youden_operating_point(scores, truths);
        std::printf("%s probe: AUC %.4f, Youden threshold %.4f, sens %.1f%%, spec %.1f%%\n",
                    target_str.c_str(), *auc, yp.threshold, 100.0 * yp.sensitivity,
                    100.0 * yp.specificity);
        out << "auc," << *auc << "\nthreshold," << yp.threshold << "\nsensitivity,"
            << yp.sensitivity << "\nspecificity," << yp.specificity << "\n";
    }
    return 0;
}

int cmd_gradcam(const fs::path& checkpoint, const std::vector<fs::path>& images, int label,
                const std::vector<float>& meta_values, const fs::path& out_dir) {
    Model model = load_checkpoint(checkpoint);
    if (label < 0 || label >= kNumLabels)
        throw ValueError("--label must be in [0,15)");
    Tensor meta;
    if (model.config().use_meta) {
        if (meta_values.size() != 3)
            throw ValueError("model fuses non-image features: pass --meta age_scaled,gender,view");
        MetaFeatures mf{meta_values[0], meta_values[1], meta_values[2]};
        meta = make_meta_tensor(std::span<const MetaFeatures>(&mf, 1));
    } else if (!meta_values.empty()) {
        throw ValueError("--meta given but the model does not take non-image features");
    }

    fs::create_directories(out_dir);
    const int s = model.config().input_size;
    for (const fs::path& path : images) {
        const ImageU8 raw = read_png_gray(path);
        Tensor input = preprocess_eval(raw, s);
        if (model.config().input_channels != 1)
            input = replicate_channels(input, model.config().input_channels);
        const Heatmap map = grad_cam(model, input, meta, label, path.filename().string());

        const std::string stem = path.stem().string() + "_label" + std::to_string(label);
        save_heatmap_csv(out_dir / (stem + ".csv"), map);
        save_heatmap_png(out_dir / (stem + ".png"), map);
        // Overlay over the eval-preprocessed frame the network actually saw.
        ImageF shown;
        shown.width = shown.height = s;
        shown.pixels.assign(input.values().begin(),
                            input.values().begin() + static_cast<std::ptrdiff_t>(s) * s);
        save_overlay_png(out_dir / (stem + "_overlay.png"), map, to_u8(shown));
        std::printf("%s: grid %dx%d argmax (%d,%d) -> %s\n", path.filename().string().c_str(),
                    map.grid_w, map.grid_h, map.argmax().first, map.argmax().second,
                    (out_dir / (stem + ".png")).string().c_str());
    }
    return 0;
}

int cmd_synth(const SynthSpec& spec, std::uint64_t seed, const fs::path& out_dir) {
    SyntheticCorpus corpus(spec, seed);
    corpus.write(out_dir);
    const auto records = corpus.records();
    std::printf("synthetic corpus: %zu images -> %s\n", records.size(), out_dir.string().c_str());
    std::fputs(format_stats(compute_stats(records)).c_str(), stdout);
    return 0;
}

int dispatch_errors(const std::function<int()>& fn) {
    try {
        return fn();
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-label chest X-ray classification toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed_flag;
    std::string split_path = "split.json";
    int resample = 0;
    std::string out;
    std::string official_lists;

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic desk-scale corpus");
    SynthSpec synth_spec;
    std::uint64_t synth_seed = 1;
    std::vector<std::string> motif_args, rule_args, prior_args;
    synth->add_option("--patients", synth_spec.num_patients, "number of patients");
    synth->add_option("--min-images", synth_spec.min_images_per_patient, "min images per patient");
    synth->add_option("--max-images", synth_spec.max_images_per_patient, "max images per patient");
    synth->add_option("--skew", synth_spec.size_skew, "patient size skew (>1 favors small)");
    synth->add_option("--size", synth_spec.image_size, "image side length");
    synth->add_option("--noise", synth_spec.noise, "background noise amplitude");
    synth->add_flag("--age-brightness", synth_spec.age_brightness,
                    "encode age in the background brightness");
    synth->add_option("--motif", motif_args, "planted disc: label:radius_frac:intensity");
    synth->add_option("--meta-rule", rule_args, "label tied to meta: label:view|gender");
    synth->add_option("--prior", prior_args, "pathology prior: label:probability");
    synth->add_option("--seed", synth_seed, "corpus seed");
    std::string synth_out = "synth";
    synth->add_option("--out", synth_out, "output directory")->required();

    // split
    auto* split = app.add_subcommand("split", "write a patient-disjoint 5x re-sampling plan");
    split->add_option("--config", config_path, "experiment config file")->required();
    split->add_option("--seed", seed_flag, "override the configured seed");
    std::string split_out = "split.json";
    split->add_option("--out", split_out, "output split plan path");
    double split_tolerance = 1.5;
    split->add_option("--tolerance", split_tolerance,
                      "allowed deviation from 70/10/20 in percentage points");

    // train
    auto* train_cmd = app.add_subcommand("train", "train one model on one re-sample");
    train_cmd->add_option("--config", config_path, "experiment config file")->required();
    train_cmd->add_option("--seed", seed_flag, "override the configured seed");
    train_cmd->add_option("--split", split_path, "split plan path");
    train_cmd->add_option("--resample", resample, "re-sample index (0-4)");
    train_cmd->add_option("--official-split-list", official_lists,
                          "train.txt,val.txt,test.txt image lists");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "score test folds and build AUC reports");
    std::vector<std::string> model_args;
    std::vector<int> fold_args;
    eval_cmd->add_option("--config", config_path, "experiment config file")->required();
    eval_cmd->add_option("--seed", seed_flag, "override the configured seed");
    eval_cmd->add_option("--split", split_path, "split plan path");
    eval_cmd->add_option("--model", model_args, "tag=checkpoint[,ckpt-per-fold...]")->required();
    eval_cmd->add_option("--folds", fold_args, "fold subset (default: all)");
    eval_cmd->add_option("--official-split-list", official_lists,
                         "train.txt,val.txt,test.txt image lists");
    eval_cmd->add_option("--out", out, "output directory")->required();

    // compare
    auto* compare = app.add_subcommand("compare", "pairwise rank-correlation of score sets");
    std::vector<std::string> score_files;
    bool per_label = false;
    compare->add_option("--scores", score_files, "score-set CSV files")->required();
    compare->add_flag("--per-label", per_label, "correlate per label, then average");
    compare->add_option("--out", out, "output directory")->required();

    // probe
    auto* probe = app.add_subcommand("probe", "train a frozen-base non-image-feature probe");
    std::string probe_target = "view";
    std::string base_checkpoint;
    probe->add_option("--config", config_path, "experiment config file")->required();
    probe->add_option("--seed", seed_flag, "override the configured seed");
    probe->add_option("--split", split_path, "split plan path");
    probe->add_option("--resample", resample, "re-sample index");
    probe->add_option("--base", base_checkpoint, "feature-extractor checkpoint")->required();
    probe->add_option("--target", probe_target, "age | gender | view")->required();
    probe->add_option("--out", out, "output directory")->required();

    // gradcam
    auto* gradcam = app.add_subcommand("gradcam", "export activation heatmaps for one label");
    std::string ckpt_path;
    std::vector<std::string> image_args;
    int label = 0;
    std::vector<float> meta_values;
    gradcam->add_option("--checkpoint", ckpt_path, "model checkpoint directory")->required();
    gradcam->add_option("--image", image_args, "input PNG path(s)")->required();
    gradcam->add_option("--label", label, "target label index")->required();
    gradcam->add_option("--meta", meta_values, "age_scaled,gender,view for meta models");
    gradcam->add_option("--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (synth->parsed()) {
        return dispatch_errors([&] {
            for (const auto& m : motif_args) {
                SynthMotif motif;
                if (std::sscanf(m.c_str(), "%d:%f:%f", &motif.label, &motif.radius_frac,
                                &motif.intensity) != 3)
                    throw ValueError("--motif expects label:radius_frac:intensity");
                synth_spec.motifs.push_back(motif);
            }
            for (const auto& r : rule_args) {
                const auto colon = r.find(':');
                if (colon == std::string::npos) throw ValueError("--meta-rule expects label:source");
                SynthMetaRule rule;
                rule.label = std::stoi(r.substr(0, colon));
                const std::string source = r.substr(colon + 1);
                if (source == "view")
                    rule.source = SynthMetaRule::Source::kView;
                else if (source == "gender")
                    rule.source = SynthMetaRule::Source::kGender;
                else
                    throw ValueError("--meta-rule source must be view or gender");
                synth_spec.meta_rules.push_back(rule);
            }
            for (const auto& p : prior_args) {
                int lbl = 0;
                float prob = 0.0f;
                if (std::sscanf(p.c_str(), "%d:%f", &lbl, &prob) != 2 || lbl < 0 ||
                    lbl >= kNoFindingIndex)
                    throw ValueError("--prior expects label:probability");
                synth_spec.pathology_priors[static_cast<std::size_t>(lbl)] = prob;
            }
            return cmd_synth(synth_spec, synth_seed, synth_out);
        });
    }
    if (split->parsed())
        return dispatch_errors(
            [&] { return cmd_split(config_path, seed_flag, split_out, split_tolerance); });
    if (train_cmd->parsed())
        return dispatch_errors(
            [&] { return cmd_train(config_path, seed_flag, split_path, resample, official_lists); });
    if (eval_cmd->parsed())
        return dispatch_errors([&] {
            return cmd_eval(config_path, seed_flag, split_path, model_args, fold_args,
                            official_lists, out);
        });
    if (compare->parsed())
        return dispatch_errors([&] {
            std::vector<fs::path> files(score_files.begin(), score_files.end());
            return cmd_compare(files, per_label, out);
        });
    if (probe->parsed())
        return dispatch_errors([&] {
            return cmd_probe(config_path, seed_flag, split_path, resample, base_checkpoint,
                             probe_target, out);
        });
    if (gradcam->parsed())
        return dispatch_errors([&] {
            std::vector<fs::path> images(image_args.begin(), image_args.end());
            return cmd_gradcam(ckpt_path, images, label, meta_values, out);
        });
    return 2;
}

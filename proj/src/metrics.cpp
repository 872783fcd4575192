#include "cxr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>

#include "cxr/csv.hpp"

namespace cxr {

namespace {

/// 1-based ranks with average ranks for ties.
std::vector<double> average_ranks(std::span<const double> values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

} // namespace

std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> truths) {
    if (scores.size() != truths.size()) throw ShapeError("roc_auc: size mismatch");
    std::size_t pos = 0;
    for (const auto t : truths) {
        if (t != 0 && t != 1) throw ValueError("roc_auc: truths must be binary");
        pos += t;
    }
    const std::size_t neg = truths.size() - pos;
    if (pos == 0 || neg == 0) return std::nullopt;

    const std::vector<double> ranks = average_ranks(scores);
    double rank_sum_pos = 0.0;
    for (std::size_t i = 0; i < truths.size(); ++i)
        if (truths[i]) rank_sum_pos += ranks[i];
    const double p = static_cast<double>(pos);
    return (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

std::optional<double> roc_auc_f(std::span<const float> scores, std::span<const std::uint8_t> truths) {
    std::vector<double> s(scores.begin(), scores.end());
    return roc_auc(s, truths);
}

double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("spearman: size mismatch");
    if (a.size() < 2) throw ValueError("spearman: need at least 2 observations");
    const std::vector<double> ra = average_ranks(a);
    const std::vector<double> rb = average_ranks(b);
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = ra[i] - ma;
        const double db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0)
        throw ValueError("spearman: rank correlation undefined for constant scores");
    return cov / std::sqrt(va * vb);
}

YoudenPoint youden_operating_point(std::span<const double> scores,
                                   std::span<const std::uint8_t> truths) {
    if (scores.size() != truths.size()) throw ShapeError("youden: size mismatch");
    std::size_t pos = 0;
    for (const auto t : truths) pos += t;
    const std::size_t neg = truths.size() - pos;
    if (pos == 0 || neg == 0)
        throw ValueError("youden: both classes must be present");

    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    YoudenPoint best;
    double best_j = -std::numeric_limits<double>::infinity();
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    // Sweep candidate thresholds from high to low; >= comparison makes ties
    // resolve toward the lowest threshold.
    while (i < idx.size()) {
        const double threshold = scores[idx[i]];
        while (i < idx.size() && scores[idx[i]] == threshold) {
            if (truths[idx[i]])
                ++tp;
            else
                ++fp;
            ++i;
        }
        const double sens = static_cast<double>(tp) / static_cast<double>(pos);
        const double spec = static_cast<double>(neg - fp) / static_cast<double>(neg);
        const double j = sens + spec - 1.0;
        if (j >= best_j) {
            best_j = j;
            best = {threshold, sens, spec};
        }
    }
    return best;
}

MaeResult mae(std::span<const double> predictions, std::span<const double> truths) {
    if (predictions.size() != truths.size()) throw ShapeError("mae: size mismatch");
    if (predictions.empty()) throw ValueError("mae: empty input");
    std::vector<double> abs_err(predictions.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        abs_err[i] = std::abs(predictions[i] - truths[i]);
        sum += abs_err[i];
    }
    MaeResult r;
    r.mae = sum / static_cast<double>(predictions.size());
    if (predictions.size() > 1) {
        double var = 0.0;
        for (const double e : abs_err) var += (e - r.mae) * (e - r.mae);
        r.stddev = std::sqrt(var / static_cast<double>(predictions.size() - 1));
    }
    return r;
}

namespace {

EvalRow aggregate_one(const std::string& label, std::span<const std::optional<double>> folds) {
    EvalRow row;
    row.label = label;
    std::vector<double> present;
    for (const auto& f : folds)
        if (f) present.push_back(*f);
    row.folds_used = static_cast<int>(present.size());
    if (present.empty()) return row;
    double mean = 0.0;
    for (const double v : present) mean += v;
    mean /= static_cast<double>(present.size());
    row.mean = mean;
    if (present.size() > 1) {
        double var = 0.0;
        for (const double v : present) var += (v - mean) * (v - mean);
        row.stddev = std::sqrt(var / static_cast<double>(present.size() - 1));
    } else {
        row.stddev = 0.0;
    }
    return row;
}

} // namespace

EvalReport aggregate_folds(std::span<const FoldAucs> folds) {
    if (folds.size() < 2) throw ValueError("aggregate_folds: need at least 2 folds");
    EvalReport report;
    for (int label = 0; label < kNumLabels; ++label) {
        std::vector<std::optional<double>> per_fold;
        for (const FoldAucs& f : folds) per_fold.push_back(f[static_cast<std::size_t>(label)]);
        EvalRow row = aggregate_one(label_names()[static_cast<std::size_t>(label)], per_fold);
        if (label == kNoFindingIndex)
            report.no_finding = std::move(row);
        else
            report.pathologies.push_back(std::move(row));
    }
    // Macro average per fold over the 14 pathologies present in that fold.
    std::vector<std::optional<double>> macro;
    for (const FoldAucs& f : folds) {
        double sum = 0.0;
        int n = 0;
        for (int label = 0; label < kNoFindingIndex; ++label)
            if (f[static_cast<std::size_t>(label)]) {
                sum += *f[static_cast<std::size_t>(label)];
                ++n;
            }
        macro.push_back(n > 0 ? std::optional<double>(sum / n) : std::nullopt);
    }
    report.average = aggregate_one("Average", macro);
    return report;
}

void save_scores_csv(const std::filesystem::path& path, std::span<const FoldScores> sets) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write scores CSV '" + path.string() + "'");
    out << "image_id,fold,model";
    for (const auto& name : label_names()) {
        std::string col = name;
        std::replace(col.begin(), col.end(), ' ', '_');
        out << ",score_" << col;
    }
    out << "\n";
    char buf[32];
    for (const FoldScores& set : sets) {
        for (std::size_t i = 0; i < set.ids.size(); ++i) {
            out << set.ids[i] << "," << set.fold << "," << set.model_tag;
            for (const float s : set.scores[i]) {
                std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(s));
                out << buf;
            }
            out << "\n";
        }
    }
}

std::vector<FoldScores> load_scores_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scores CSV '" + path.string() + "'");
    std::vector<std::string> header;
    if (!read_csv_line(in, header) || header.size() != 3 + kNumLabels)
        throw ValueError("scores CSV '" + path.string() + "' has an unexpected header");

    std::vector<FoldScores> sets;
    std::map<std::pair<std::string, int>, std::size_t> index;
    std::vector<std::string> fields;
    while (read_csv_line(in, fields)) {
        if (fields.size() == 1 && fields[0].empty()) continue;
        if (fields.size() != 3 + kNumLabels)
            throw ValueError("scores CSV '" + path.string() + "' has a malformed row");
        const std::string& id = fields[0];
        const int fold = std::stoi(fields[1]);
        const std::string& model = fields[2];
        const auto key = std::make_pair(model, fold);
        auto it = index.find(key);
        if (it == index.end()) {
            FoldScores fs;
            fs.model_tag = model;
            fs.fold = fold;
            sets.push_back(std::move(fs));
            it = index.emplace(key, sets.size() - 1).first;
        }
        FoldScores& fs = sets[it->second];
        fs.ids.push_back(id);
        std::array<float, kNumLabels> row{};
        for (int i = 0; i < kNumLabels; ++i)
            row[static_cast<std::size_t>(i)] = std::stof(fields[static_cast<std::size_t>(3 + i)]);
        fs.scores.push_back(row);
    }
    return sets;
}

std::vector<double> spearman_matrix(std::span<const std::vector<FoldScores>> models,
                                    SpearmanPooling pooling) {
    const std::size_t k = models.size();
    if (k == 0) throw ValueError("spearman_matrix: no models");
    const std::size_t num_folds = models[0].size();
    for (const auto& folds : models)
        if (folds.size() != num_folds)
            throw ValueError("spearman_matrix: models cover different fold counts");

    // Alignment: identical example id sequences per fold across models.
    for (std::size_t f = 0; f < num_folds; ++f)
        for (std::size_t m = 1; m < k; ++m)
            if (models[m][f].ids != models[0][f].ids)
                throw ValueError("spearman_matrix: model '" + models[m][f].model_tag +
                                 "' fold " + std::to_string(models[m][f].fold) +
                                 " scores a different example set");

    std::vector<double> matrix(k * k, 0.0);
    for (std::size_t f = 0; f < num_folds; ++f) {
        for (std::size_t a = 0; a < k; ++a) {
            for (std::size_t b = a; b < k; ++b) {
                double rho;
                if (a == b) {
                    rho = 1.0;
                } else if (pooling == SpearmanPooling::kFlattened) {
                    std::vector<double> xs, ys;
                    xs.reserve(models[a][f].scores.size() * kNumLabels);
                    ys.reserve(xs.capacity());
                    for (std::size_t i = 0; i < models[a][f].scores.size(); ++i)
                        for (int l = 0; l < kNumLabels; ++l) {
                            xs.push_back(models[a][f].scores[i][static_cast<std::size_t>(l)]);
                            ys.push_back(models[b][f].scores[i][static_cast<std::size_t>(l)]);
                        }
                    rho = spearman(xs, ys);
                } else {
                    double acc = 0.0;
                    for (int l = 0; l < kNumLabels; ++l) {
                        std::vector<double> xs, ys;
                        for (std::size_t i = 0; i < models[a][f].scores.size(); ++i) {
                            xs.push_back(models[a][f].scores[i][static_cast<std::size_t>(l)]);
                            ys.push_back(models[b][f].scores[i][static_cast<std::size_t>(l)]);
                        }
                        acc += spearman(xs, ys);
                    }
                    rho = acc / kNumLabels;
                }
                matrix[a * k + b] += rho;
                matrix[b * k + a] += a == b ? 0.0 : rho;
            }
        }
    }
    for (auto& v : matrix) v /= static_cast<double>(num_folds);
    return matrix;
}

FoldAucs fold_aucs(const FoldScores& scores,
                   std::span<const std::array<std::uint8_t, kNumLabels>> truths) {
    if (truths.size() != scores.scores.size())
        throw ShapeError("fold_aucs: truth/score count mismatch");
    FoldAucs out;
    for (int l = 0; l < kNumLabels; ++l) {
        std::vector<double> s(scores.scores.size());
        std::vector<std::uint8_t> t(scores.scores.size());
        for (std::size_t i = 0; i < scores.scores.size(); ++i) {
            s[i] = scores.scores[i][static_cast<std::size_t>(l)];
            t[i] = truths[i][static_cast<std::size_t>(l)];
        }
        out[static_cast<std::size_t>(l)] = roc_auc(s, t);
    }
    return out;
}

} // namespace cxr

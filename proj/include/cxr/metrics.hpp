#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cxr/dataset.hpp"

namespace cxr {

/// Rank-statistic AUC (Mann-Whitney, average ranks on ties); equals the
/// trapezoidal ROC integral. Returns nullopt when only one class is present
/// (reported as missing, never as 0).
std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> truths);
std::optional<double> roc_auc_f(std::span<const float> scores, std::span<const std::uint8_t> truths);

/// Spearman's pairwise rank correlation (average ranks on ties).
/// Throws ValueError when either vector is constant.
double spearman(std::span<const double> a, std::span<const double> b);

struct YoudenPoint {
    double threshold = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
};

/// Threshold maximizing sensitivity + specificity - 1 under the rule
/// "positive iff score >= threshold"; ties resolved toward the lowest
/// threshold. Throws ValueError when only one class is present.
YoudenPoint youden_operating_point(std::span<const double> scores,
                                   std::span<const std::uint8_t> truths);

struct MaeResult {
    double mae = 0.0;
    double stddev = 0.0; // sample std (n-1) of the absolute errors
};
MaeResult mae(std::span<const double> predictions, std::span<const double> truths);

// ---- Cross-fold aggregation ------------------------------------------------

struct EvalRow {
    std::string label;
    std::optional<double> mean;
    std::optional<double> stddev;
    int folds_used = 0;
};

/// Per-pathology AUC mean +- sample std over folds; the Average row is the
/// per-fold macro average over the 14 pathologies ("No Finding" excluded),
/// aggregated the same way. Missing fold entries are excluded with the count
/// noted.
struct EvalReport {
    std::vector<EvalRow> pathologies; // 14 rows, schema order
    EvalRow average;
    EvalRow no_finding;
};

using FoldAucs = std::array<std::optional<double>, kNumLabels>;

EvalReport aggregate_folds(std::span<const FoldAucs> folds); // requires >= 2 folds

// ---- Score sets -------------------------------------------------------------

/// Scores of one model on one fold's test set, aligned with `ids`.
struct FoldScores {
    std::string model_tag;
    int fold = 0;
    std::vector<std::string> ids;
    std::vector<std::array<float, kNumLabels>> scores;
};

void save_scores_csv(const std::filesystem::path& path, std::span<const FoldScores> sets);
std::vector<FoldScores> load_scores_csv(const std::filesystem::path& path);

enum class SpearmanPooling { kFlattened, kPerLabelMean };

/// K x K rank-correlation matrix: per fold, scores of each model pair are
/// correlated over the flattened (example,label) axis (or per label, then
/// averaged); fold matrices are averaged coefficient-wise. Models must score
/// identical example sets per fold.
std::vector<double> spearman_matrix(std::span<const std::vector<FoldScores>> models,
                                    SpearmanPooling pooling = SpearmanPooling::kFlattened);

/// Per-pathology AUCs of one fold given aligned truths; single-class
/// pathologies come back missing.
FoldAucs fold_aucs(const FoldScores& scores,
                   std::span<const std::array<std::uint8_t, kNumLabels>> truths);

} // namespace cxr

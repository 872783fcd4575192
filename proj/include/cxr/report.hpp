#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cxr/metrics.hpp"

namespace cxr {

/// Cross-fold AUC table: one "mean +- std" column per model tag, values
/// scaled by 100, rows = 14 pathologies, Average, No Findings.
std::string render_auc_table(std::span<const std::string> tags,
                             std::span<const EvalReport> reports);
void write_auc_csv(const std::filesystem::path& path, std::span<const std::string> tags,
                   std::span<const EvalReport> reports);

/// Pairwise rank-correlation matrix, 2 decimals, diagonal masked as "-".
std::string render_correlation_table(std::span<const std::string> tags,
                                     std::span<const double> matrix);
void write_correlation_csv(const std::filesystem::path& path, std::span<const std::string> tags,
                           std::span<const double> matrix);

/// Single-split comparison table (the official-split protocol): plain AUC
/// with 3 decimals per model, Average and No Findings rows.
std::string render_official_table(std::span<const std::string> tags,
                                  std::span<const FoldAucs> per_model);
void write_official_csv(const std::filesystem::path& path, std::span<const std::string> tags,
                        std::span<const FoldAucs> per_model);

} // namespace cxr

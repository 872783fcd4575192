#include "cxr/report.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace cxr {

namespace {

std::string pad(const std::string& s, std::size_t width) {
    return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string mean_std_cell(const EvalRow& row) {
    if (!row.mean) return "--";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.1f +- %.1f", *row.mean * 100.0,
                  row.stddev ? *row.stddev * 100.0 : 0.0);
    std::string cell(buf);
    if (row.folds_used < 5) cell += " (" + std::to_string(row.folds_used) + "f)";
    return cell;
}

const EvalRow& report_row(const EvalReport& r, int index) {
    // 0..13 pathologies, 14 Average, 15 No Findings
    if (index < kNoFindingIndex) return r.pathologies[static_cast<std::size_t>(index)];
    if (index == kNoFindingIndex) return r.average;
    return r.no_finding;
}

std::string row_label(int index) {
    if (index < kNoFindingIndex) return label_names()[static_cast<std::size_t>(index)];
    if (index == kNoFindingIndex) return "Average";
    return "No Findings";
}

} // namespace

std::string render_auc_table(std::span<const std::string> tags,
                             std::span<const EvalReport> reports) {
    if (tags.size() != reports.size()) throw ValueError("render_auc_table: tag/report mismatch");
    constexpr std::size_t kLabelWidth = 20;
    const std::size_t col = 18;
    std::ostringstream os;
    os << pad("Pathology", kLabelWidth);
    for (const auto& t : tags) os << pad(t, col);
    os << "\n" << std::string(kLabelWidth + col * tags.size(), '-') << "\n";
    for (int i = 0; i < kNumLabels + 1; ++i) {
        if (i == kNoFindingIndex) os << std::string(kLabelWidth + col * tags.size(), '-') << "\n";
        os << pad(row_label(i), kLabelWidth);
        for (const auto& r : reports) os << pad(mean_std_cell(report_row(r, i)), col);
        os << "\n";
    }
    return os.str();
}

void write_auc_csv(const std::filesystem::path& path, std::span<const std::string> tags,
                   std::span<const EvalReport> reports) {
    if (tags.size() != reports.size()) throw ValueError("write_auc_csv: tag/report mismatch");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write report CSV '" + path.string() + "'");
    out << "label";
    for (const auto& t : tags) out << "," << t << "_mean," << t << "_std," << t << "_folds";
    out << "\n";
    char buf[64];
    for (int i = 0; i < kNumLabels + 1; ++i) {
        out << row_label(i);
        for (const auto& r : reports) {
            const EvalRow& row = report_row(r, i);
            if (row.mean) {
                std::snprintf(buf, sizeof(buf), ",%.6f,%.6f,%d", *row.mean,
                              row.stddev ? *row.stddev : 0.0, row.folds_used);
                out << buf;
            } else {
                out << ",,," << row.folds_used;
            }
        }
        out << "\n";
    }
}

std::string render_correlation_table(std::span<const std::string> tags,
                                     std::span<const double> matrix) {
    const std::size_t k = tags.size();
    if (matrix.size() != k * k) throw ValueError("render_correlation_table: matrix size mismatch");
    std::size_t label_w = 8;
    for (const auto& t : tags) label_w = std::max(label_w, t.size() + 2);
    std::ostringstream os;
    os << pad("", label_w);
    for (const auto& t : tags) os << pad(t, label_w);
    os << "\n";
    char buf[32];
    for (std::size_t i = 0; i < k; ++i) {
        os << pad(tags[i], label_w);
        for (std::size_t j = 0; j < k; ++j) {
            if (i == j) {
                os << pad("-", label_w);
            } else {
                std::snprintf(buf, sizeof(buf), "%.2f", matrix[i * k + j]);
                os << pad(buf, label_w);
            }
        }
        os << "\n";
    }
    return os.str();
}

void write_correlation_csv(const std::filesystem::path& path, std::span<const std::string> tags,
                           std::span<const double> matrix) {
    const std::size_t k = tags.size();
    if (matrix.size() != k * k) throw ValueError("write_correlation_csv: matrix size mismatch");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write correlation CSV '" + path.string() + "'");
    out << "model";
    for (const auto& t : tags) out << "," << t;
    out << "\n";
    char buf[32];
    for (std::size_t i = 0; i < k; ++i) {
        out << tags[i];
        for (std::size_t j = 0; j < k; ++j) {
            std::snprintf(buf, sizeof(buf), ",%.6f", matrix[i * k + j]);
            out << buf;
        }
        out << "\n";
    }
}

namespace {

std::string official_cell(const std::optional<double>& v) {
    if (!v) return "--";
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.3f", *v);
    return buf;
}

std::optional<double> official_average(const FoldAucs& aucs) {
    double sum = 0.0;
    int n = 0;
    for (int l = 0; l < kNoFindingIndex; ++l)
        if (aucs[static_cast<std::size_t>(l)]) {
            sum += *aucs[static_cast<std::size_t>(l)];
            ++n;
        }
    if (n == 0) return std::nullopt;
    return sum / n;
}

} // namespace

std::string render_official_table(std::span<const std::string> tags,
                                  std::span<const FoldAucs> per_model) {
    if (tags.size() != per_model.size())
        throw ValueError("render_official_table: tag/auc mismatch");
    constexpr std::size_t kLabelWidth = 20;
    std::size_t col = 10;
    for (const auto& t : tags) col = std::max(col, t.size() + 2);
    std::ostringstream os;
    os << pad("Pathology", kLabelWidth);
    for (const auto& t : tags) os << pad(t, col);
    os << "\n" << std::string(kLabelWidth + col * tags.size(), '-') << "\n";
    for (int l = 0; l < kNoFindingIndex; ++l) {
        os << pad(label_names()[static_cast<std::size_t>(l)], kLabelWidth);
        for (const auto& m : per_model) os << pad(official_cell(m[static_cast<std::size_t>(l)]), col);
        os << "\n";
    }
    os << std::string(kLabelWidth + col * tags.size(), '-') << "\n";
    os << pad("Average", kLabelWidth);
    for (const auto& m : per_model) os << pad(official_cell(official_average(m)), col);
    os << "\n" << pad("No Findings", kLabelWidth);
    for (const auto& m : per_model) os << pad(official_cell(m[kNoFindingIndex]), col);
    os << "\n";
    return os.str();
}

void write_official_csv(const std::filesystem::path& path, std::span<const std::string> tags,
                        std::span<const FoldAucs> per_model) {
    if (tags.size() != per_model.size()) throw ValueError("write_official_csv: tag/auc mismatch");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write official comparison CSV '" + path.string() + "'");
    out << "label";
    for (const auto& t : tags) out << "," << t;
    out << "\n";
    auto emit_row = [&](const std::string& label, auto getter) {
        out << label;
        for (const auto& m : per_model) {
            const auto v = getter(m);
            if (v)
                out << "," << official_cell(v);
            else
                out << ",";
        }
        out << "\n";
    };
    for (int l = 0; l < kNoFindingIndex; ++l)
        emit_row(label_names()[static_cast<std::size_t>(l)],
                 [l](const FoldAucs& m) { return m[static_cast<std::size_t>(l)]; });
    emit_row("Average", [](const FoldAucs& m) { return official_average(m); });
    emit_row("No Findings", [](const FoldAucs& m) { return m[kNoFindingIndex]; });
}

} // namespace cxr

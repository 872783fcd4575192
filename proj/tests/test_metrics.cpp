#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "cxr/metrics.hpp"
#include "cxr/report.hpp"
#include "cxr/rng.hpp"
#include "testutil.hpp"

using namespace cxr;
using testutil::TempDir;

namespace {

/// Brute-force AUC over all positive/negative pairs (ties count 1/2).
double auc_bruteforce(std::span<const double> scores, std::span<const std::uint8_t> truths) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!truths[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (truths[j]) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

/// Direct Spearman: Pearson correlation of average ranks.
double spearman_direct(std::span<const double> a, std::span<const double> b) {
    auto ranks = [](std::span<const double> v) {
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            double less = 0.0, equal = 0.0;
            for (std::size_t j = 0; j < v.size(); ++j) {
                if (v[j] < v[i]) ++less;
                if (v[j] == v[i]) ++equal;
            }
            r[i] = less + (equal + 1.0) / 2.0;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
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
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma) * (ra[i] - ma);
        vb += (rb[i] - mb) * (rb[i] - mb);
    }
    return cov / std::sqrt(va * vb);
}

} // namespace

TEST_CASE("roc_auc basics") {
    std::vector<double> sep = {0.9, 0.8, 0.1, 0.2};
    std::vector<std::uint8_t> t = {1, 1, 0, 0};
    CHECK(*roc_auc(sep, t) == 1.0);

    std::vector<double> flat = {0.5, 0.5, 0.5, 0.5};
    CHECK(*roc_auc(flat, t) == 0.5);

    // Frozen from the pairwise count: 3 of 4 pairs won.
    std::vector<double> s = {0.9, 0.8, 0.7, 0.1};
    std::vector<std::uint8_t> y = {1, 0, 1, 0};
    CHECK(*roc_auc(s, y) == 0.75);
    CHECK(auc_bruteforce(s, y) == 0.75);

    std::vector<std::uint8_t> single(4, 1);
    CHECK_FALSE(roc_auc(s, single).has_value());
}

TEST_CASE("roc_auc equals brute force on 200 random score/label sets") {
    Rng rng(2);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 60));
        std::vector<double> s(n);
        std::vector<std::uint8_t> t(n);
        bool has_pos = false, has_neg = false;
        for (std::size_t i = 0; i < n; ++i) {
            // Coarse lattice scores so ties actually occur.
            s[i] = static_cast<double>(rng.uniform_int(0, 9)) / 9.0;
            t[i] = rng.bernoulli(0.4) ? 1 : 0;
            (t[i] ? has_pos : has_neg) = true;
        }
        if (!has_pos || !has_neg) {
            CHECK_FALSE(roc_auc(s, t).has_value());
            continue;
        }
        const auto fast = roc_auc(s, t);
        REQUIRE(fast.has_value());
        CHECK(std::abs(*fast - auc_bruteforce(s, t)) <= 1e-12);
    }
}

TEST_CASE("roc_auc is invariant under strictly increasing transforms") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 10 + static_cast<std::size_t>(rng.uniform_int(0, 30));
        std::vector<double> s(n);
        std::vector<std::uint8_t> t(n);
        t[0] = 1;
        t[1] = 0;
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = rng.uniform();
            if (i > 1) t[i] = rng.bernoulli(0.5) ? 1 : 0;
        }
        std::vector<double> warped(n);
        for (std::size_t i = 0; i < n; ++i) warped[i] = std::exp(3.0 * s[i]) + 7.0;
        CHECK(*roc_auc(s, t) == doctest::Approx(*roc_auc(warped, t)).epsilon(1e-12));

        // Complement property for tie-free scores.
        std::vector<double> negated(n);
        for (std::size_t i = 0; i < n; ++i) negated[i] = -s[i];
        CHECK(*roc_auc(s, t) + *roc_auc(negated, t) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("spearman matches the direct rank formula, including ties") {
    std::vector<double> a = {1, 2, 3};
    std::vector<double> b = {3, 1, 2};
    CHECK(spearman(a, b) == doctest::Approx(-0.5).epsilon(1e-12));

    std::vector<double> self = {0.3, 0.9, 0.2, 0.5};
    CHECK(spearman(self, self) == doctest::Approx(1.0).epsilon(1e-12));
    std::vector<double> monotone(self);
    for (auto& v : monotone) v = std::log(v + 1.0) * 4.0;
    CHECK(spearman(self, monotone) == doctest::Approx(1.0).epsilon(1e-12));

    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 3 + static_cast<std::size_t>(rng.uniform_int(0, 40));
        std::vector<double> x(n), y(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = static_cast<double>(rng.uniform_int(0, 6)); // tie-heavy
            y[i] = static_cast<double>(rng.uniform_int(0, 6));
        }
        const bool xconst = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
        const bool yconst = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
        if (xconst || yconst) {
            CHECK_THROWS_AS(spearman(x, y), ValueError);
            continue;
        }
        CHECK(std::abs(spearman(x, y) - spearman_direct(x, y)) <= 1e-12);
    }
}

TEST_CASE("youden operating point maximizes J and matches recomputed counts") {
    SUBCASE("perfect separation") {
        std::vector<double> s = {0.9, 0.8, 0.2, 0.1};
        std::vector<std::uint8_t> t = {1, 1, 0, 0};
        const YoudenPoint p = youden_operating_point(s, t);
        CHECK(p.sensitivity == 1.0);
        CHECK(p.specificity == 1.0);
    }
    SUBCASE("threshold lands in (0.55, 0.6] for the worked slice") {
        std::vector<double> s = {0.9, 0.6, 0.55, 0.1};
        std::vector<std::uint8_t> t = {1, 1, 0, 0};
        const YoudenPoint p = youden_operating_point(s, t);
        CHECK(p.threshold > 0.55);
        CHECK(p.threshold <= 0.6);
        CHECK(p.sensitivity == 1.0);
        CHECK(p.specificity == 1.0);
    }
    SUBCASE("anti-correlated scores still return a valid triple") {
        std::vector<double> s = {0.1, 0.2, 0.8, 0.9};
        std::vector<std::uint8_t> t = {1, 1, 0, 0};
        const YoudenPoint p = youden_operating_point(s, t);
        CHECK(p.sensitivity >= 0.0);
        CHECK(p.specificity >= 0.0);
        CHECK(p.sensitivity + p.specificity - 1.0 >= -1.0);
    }
    SUBCASE("sens/spec agree with confusion counts at the returned threshold") {
        Rng rng(5);
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n = 4 + static_cast<std::size_t>(rng.uniform_int(0, 40));
            std::vector<double> s(n);
            std::vector<std::uint8_t> t(n);
            t[0] = 1;
            t[1] = 0;
            for (std::size_t i = 0; i < n; ++i) {
                s[i] = static_cast<double>(rng.uniform_int(0, 12)) / 12.0;
                if (i > 1) t[i] = rng.bernoulli(0.5) ? 1 : 0;
            }
            const YoudenPoint p = youden_operating_point(s, t);
            std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const bool pred = s[i] >= p.threshold;
                if (t[i] && pred) ++tp;
                if (t[i] && !pred) ++fn;
                if (!t[i] && pred) ++fp;
                if (!t[i] && !pred) ++tn;
            }
            CHECK(p.sensitivity == static_cast<double>(tp) / static_cast<double>(tp + fn));
            CHECK(p.specificity == static_cast<double>(tn) / static_cast<double>(tn + fp));
        }
    }
    SUBCASE("single-class input is rejected") {
        std::vector<double> s = {0.4, 0.6};
        std::vector<std::uint8_t> t = {1, 1};
        CHECK_THROWS_AS(youden_operating_point(s, t), ValueError);
    }
}

TEST_CASE("mae: basics and the direct loop oracle") {
    std::vector<double> t = {10, 20, 30};
    CHECK(mae(t, t).mae == 0.0);

    std::vector<double> shifted = {13, 23, 33};
    const MaeResult r = mae(shifted, t);
    CHECK(r.mae == 3.0);
    CHECK(r.stddev == 0.0);

    Rng rng(6);
    std::vector<double> p(31), q(31);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = rng.uniform(0, 90);
        q[i] = rng.uniform(0, 90);
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
    CHECK(mae(p, q).mae == acc / 31.0);
}

TEST_CASE("aggregate_folds: mean and sample std per pathology") {
    std::vector<FoldAucs> folds(2);
    for (int l = 0; l < kNumLabels; ++l) {
        folds[0][static_cast<std::size_t>(l)] = 0.8;
        folds[1][static_cast<std::size_t>(l)] = 0.9;
    }
    const EvalReport report = aggregate_folds(folds);
    REQUIRE(report.pathologies.size() == 14);
    CHECK(*report.pathologies[0].mean == doctest::Approx(0.85).epsilon(1e-12));
    CHECK(*report.pathologies[0].stddev == doctest::Approx(0.070710678).epsilon(1e-6));
    CHECK(*report.average.mean == doctest::Approx(0.85).epsilon(1e-12));
    CHECK(*report.no_finding.mean == doctest::Approx(0.85).epsilon(1e-12));

    // Identical folds collapse the std to zero.
    folds[1] = folds[0];
    const EvalReport flat = aggregate_folds(folds);
    CHECK(*flat.pathologies[3].stddev == 0.0);

    std::vector<FoldAucs> one(1);
    CHECK_THROWS_AS(aggregate_folds(one), ValueError);
}

TEST_CASE("aggregate_folds: missing entries are excluded with the count noted") {
    std::vector<FoldAucs> folds(3);
    for (int f = 0; f < 3; ++f)
        for (int l = 0; l < kNumLabels; ++l) folds[static_cast<std::size_t>(f)][static_cast<std::size_t>(l)] = 0.7;
    folds[1][3] = std::nullopt; // Hernia missing in fold 1
    const EvalReport report = aggregate_folds(folds);
    CHECK(report.pathologies[3].folds_used == 2);
    CHECK(report.pathologies[0].folds_used == 3);
    CHECK(*report.pathologies[3].mean == doctest::Approx(0.7));
}

TEST_CASE("aggregate_folds agrees with an independent streaming computation") {
    Rng rng(7);
    std::vector<FoldAucs> folds(5);
    for (auto& f : folds)
        for (int l = 0; l < kNumLabels; ++l) f[static_cast<std::size_t>(l)] = rng.uniform(0.5, 1.0);
    const EvalReport report = aggregate_folds(folds);
    for (int l = 0; l < kNoFindingIndex; ++l) {
        // Welford streaming mean/variance oracle.
        double mean = 0.0, m2 = 0.0;
        int n = 0;
        for (const auto& f : folds) {
            ++n;
            const double x = *f[static_cast<std::size_t>(l)];
            const double d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        const double stddev = std::sqrt(m2 / (n - 1));
        CHECK(std::abs(*report.pathologies[static_cast<std::size_t>(l)].mean - mean) <= 1e-12);
        CHECK(std::abs(*report.pathologies[static_cast<std::size_t>(l)].stddev - stddev) <= 1e-12);
    }
}

namespace {

FoldScores make_fold(const std::string& tag, int fold, std::size_t n, Rng& rng) {
    FoldScores fs;
    fs.model_tag = tag;
    fs.fold = fold;
    for (std::size_t i = 0; i < n; ++i) {
        fs.ids.push_back("img" + std::to_string(i) + ".png");
        std::array<float, kNumLabels> row{};
        for (auto& v : row) v = rng.uniform_f(0.0f, 1.0f);
        fs.scores.push_back(row);
    }
    return fs;
}

} // namespace

TEST_CASE("spearman_matrix: self-correlation 1, monotone invariance, symmetry") {
    Rng rng(8);
    std::vector<std::vector<FoldScores>> models;
    models.push_back({make_fold("a", 0, 20, rng), make_fold("a", 1, 20, rng)});

    // Model b: a monotone transform of model a -> rank-identical.
    std::vector<FoldScores> b_folds = models[0];
    for (auto& f : b_folds) {
        f.model_tag = "b";
        for (auto& row : f.scores)
            for (auto& v : row) v = 0.1f + 0.5f * v * v + v;
    }
    models.push_back(b_folds);
    models.push_back({make_fold("c", 0, 20, rng), make_fold("c", 1, 20, rng)});

    const auto matrix = spearman_matrix(models);
    const std::size_t k = 3;
    CHECK(matrix[0 * k + 0] == 1.0);
    CHECK(matrix[0 * k + 1] == doctest::Approx(1.0).epsilon(1e-12)); // rank invariance
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            CHECK(matrix[i * k + j] == matrix[j * k + i]);
            CHECK(matrix[i * k + j] >= -1.0 - 1e-12);
            CHECK(matrix[i * k + j] <= 1.0 + 1e-12);
        }

    // Misaligned example sets are rejected.
    auto broken = models;
    broken[2][1].ids[0] = "other.png";
    CHECK_THROWS_AS(spearman_matrix(broken), ValueError);
}

TEST_CASE("score sets persist to CSV and reload identically") {
    TempDir tmp("cxr-scores");
    Rng rng(9);
    std::vector<FoldScores> sets = {make_fold("m1", 0, 7, rng), make_fold("m1", 1, 5, rng),
                                    make_fold("m2", 0, 7, rng)};
    save_scores_csv(tmp.path() / "scores.csv", sets);
    const auto loaded = load_scores_csv(tmp.path() / "scores.csv");
    REQUIRE(loaded.size() == 3);
    for (std::size_t i = 0; i < sets.size(); ++i) {
        CHECK(loaded[i].model_tag == sets[i].model_tag);
        CHECK(loaded[i].fold == sets[i].fold);
        CHECK(loaded[i].ids == sets[i].ids);
        REQUIRE(loaded[i].scores.size() == sets[i].scores.size());
        for (std::size_t j = 0; j < sets[i].scores.size(); ++j)
            for (int l = 0; l < kNumLabels; ++l)
                CHECK(loaded[i].scores[j][static_cast<std::size_t>(l)] ==
                      sets[i].scores[j][static_cast<std::size_t>(l)]);
    }
}

TEST_CASE("report renderers produce the three table layouts") {
    Rng rng(10);
    std::vector<FoldAucs> folds(5);
    for (auto& f : folds)
        for (int l = 0; l < kNumLabels; ++l) f[static_cast<std::size_t>(l)] = rng.uniform(0.6, 0.95);
    const EvalReport report = aggregate_folds(folds);

    const std::vector<std::string> tags = {"ots", "ft", "1channel", "large"};
    const std::vector<EvalReport> reports(4, report);
    const std::string table = render_auc_table(tags, reports);
    CHECK(table.find("Cardiomegaly") != std::string::npos);
    CHECK(table.find("Infiltration") != std::string::npos);
    CHECK(table.find("Average") != std::string::npos);
    CHECK(table.find("No Findings") != std::string::npos);
    CHECK(table.find("+-") != std::string::npos);

    TempDir tmp("cxr-report");
    write_auc_csv(tmp.path() / "report.csv", tags, reports);
    CHECK(std::filesystem::exists(tmp.path() / "report.csv"));

    const std::vector<std::string> pair = {"a", "b"};
    const std::vector<double> matrix = {1.0, 0.93, 0.93, 1.0};
    const std::string corr = render_correlation_table(pair, matrix);
    CHECK(corr.find("0.93") != std::string::npos);
    CHECK(corr.find("-") != std::string::npos);

    std::vector<FoldAucs> officials = {folds[0], folds[1], folds[2]};
    const std::vector<std::string> depth_tags = {"resnet38", "resnet50", "resnet101"};
    const std::string official = render_official_table(depth_tags, officials);
    CHECK(official.find("resnet38") != std::string::npos);
    CHECK(official.find("Average") != std::string::npos);
    CHECK(official.find("No Findings") != std::string::npos);
}

TEST_CASE("per-label pooling mode agrees on rank-identical models") {
    Rng rng(11);
    std::vector<std::vector<FoldScores>> models;
    models.push_back({make_fold("x", 0, 15, rng)});
    std::vector<FoldScores> clone = models[0];
    for (auto& f : clone) {
        f.model_tag = "y";
        for (auto& row : f.scores)
            for (auto& v : row) v = 2.0f * v + 1.0f; // monotone
    }
    models.push_back(clone);
    const auto matrix = spearman_matrix(models, SpearmanPooling::kPerLabelMean);
    CHECK(matrix[1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(matrix[2] == matrix[1]);
}

TEST_CASE("youden ties resolve to the lowest threshold") {
    // Enumeration oracle: J = 0.5 at both t=0.9 and t=0.7; the lower wins.
    std::vector<double> s = {0.9, 0.8, 0.7, 0.1};
    std::vector<std::uint8_t> t = {1, 0, 1, 0};
    const YoudenPoint p = youden_operating_point(s, t);
    CHECK(p.threshold == 0.7);
    CHECK(p.sensitivity == 1.0);
    CHECK(p.specificity == 0.5);
}

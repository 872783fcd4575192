#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cxr/checkpoint.hpp"
#include "cxr/csv.hpp"
#include "cxr/dataset.hpp"
#include "cxr/metrics.hpp"
#include "testutil.hpp"

using namespace cxr;
using testutil::TempDir;

namespace {

std::string binary() {
    const char* bin = std::getenv("CXR_BIN");
    REQUIRE_MESSAGE(bin != nullptr, "CXR_BIN must point at the cxr binary");
    return bin;
}

int run(const std::string& args) {
    const std::string cmd = binary() + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(status != -1);
    return WEXITSTATUS(status);
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "missing file: ", path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// One shared pipeline run: synth -> split -> train; reused across cases.
struct Pipeline {
    TempDir tmp{"cxr-cli"};
    std::filesystem::path dir = tmp.path();

    Pipeline() {
        REQUIRE(run("synth --patients 24 --size 32 --motif 0:0.2:0.95 --prior 0:0.5 "
                    "--meta-rule 3:view --seed 9 --out " +
                    (dir / "corpus").string()) == 0);
        std::ofstream conf(dir / "exp.conf");
        conf << "data.csv = " << (dir / "corpus" / "Data_Entry.csv").string() << "\n"
             << "data.images = " << (dir / "corpus" / "images").string() << "\n"
             << "model.depth = 38\n"
             << "model.input_size = 32\n"
             << "model.width_div = 16\n"
             << "train.batch = 8\n"
             << "train.lr = 0.002\n"
             << "train.max_epochs = 3\n"
             << "seed = 11\n"
             << "out.dir = " << (dir / "runs").string() << "\n"
             << "run.tag = smoke\n";
        conf.close();
        REQUIRE(run("split --config " + (dir / "exp.conf").string() + " --tolerance 10 --out " +
                    (dir / "split.json").string()) == 0);
        REQUIRE(run("train --config " + (dir / "exp.conf").string() + " --split " +
                    (dir / "split.json").string() + " --resample 0") == 0);
    }

    std::filesystem::path checkpoint() const {
        return dir / "runs" / "smoke" / "resample0" / "checkpoint";
    }
};

Pipeline& pipeline() {
    static Pipeline p;
    return p;
}

} // namespace

TEST_CASE("synth is deterministic across invocations") {
    Pipeline& p = pipeline();
    REQUIRE(run("synth --patients 24 --size 32 --motif 0:0.2:0.95 --prior 0:0.5 "
                "--meta-rule 3:view --seed 9 --out " +
                (p.dir / "corpus2").string()) == 0);
    CHECK(slurp(p.dir / "corpus" / "Data_Entry.csv") == slurp(p.dir / "corpus2" / "Data_Entry.csv"));
    CHECK(slurp(p.dir / "corpus" / "images" / "S000001.png") ==
          slurp(p.dir / "corpus2" / "images" / "S000001.png"));
}

TEST_CASE("split writes byte-identical plans for identical config and seed") {
    Pipeline& p = pipeline();
    REQUIRE(run("split --config " + (p.dir / "exp.conf").string() + " --tolerance 10 --out " +
                (p.dir / "split2.json").string()) == 0);
    CHECK(slurp(p.dir / "split.json") == slurp(p.dir / "split2.json"));

    const SplitPlan plan = SplitPlan::load(p.dir / "split.json");
    CHECK(plan.num_resamples() == 5);
}

TEST_CASE("split on an unreadable dataset exits 2") {
    Pipeline& p = pipeline();
    std::ofstream conf(p.dir / "broken.conf");
    conf << "data.csv = /does/not/exist.csv\n";
    conf.close();
    CHECK(run("split --config " + (p.dir / "broken.conf").string() + " --out " +
              (p.dir / "x.json").string()) == 2);
    CHECK(run("split --config " + (p.dir / "missing.conf").string() + " --out " +
              (p.dir / "x.json").string()) == 2);
}

TEST_CASE("train produces a checkpoint and a deterministic history") {
    Pipeline& p = pipeline();
    CHECK(std::filesystem::exists(p.checkpoint() / "manifest.json"));
    CHECK(std::filesystem::exists(p.checkpoint() / "weights.bin"));
    const std::string history = slurp(p.dir / "runs" / "smoke" / "resample0" / "history.csv");

    // Re-running the identical command reproduces every byte.
    const std::string weights = slurp(p.checkpoint() / "weights.bin");
    REQUIRE(run("train --config " + (p.dir / "exp.conf").string() + " --split " +
                (p.dir / "split.json").string() + " --resample 0") == 0);
    CHECK(slurp(p.dir / "runs" / "smoke" / "resample0" / "history.csv") == history);
    CHECK(slurp(p.checkpoint() / "weights.bin") == weights);
}

TEST_CASE("train without a split plan exits 2; divergence exits 3") {
    Pipeline& p = pipeline();
    CHECK(run("train --config " + (p.dir / "exp.conf").string() + " --split " +
              (p.dir / "nope.json").string() + " --resample 0") == 2);

    // A learning rate beyond float range overflows the first update and the
    // next forward pass goes NaN.
    std::ofstream conf(p.dir / "diverge.conf");
    conf << slurp(p.dir / "exp.conf") << "train.lr = 3e38\nrun.tag = diverge\n";
    conf.close();
    CHECK(run("train --config " + (p.dir / "diverge.conf").string() + " --split " +
              (p.dir / "split.json").string() + " --resample 0") == 3);
}

TEST_CASE("eval emits score sets plus report files that match recomputation") {
    Pipeline& p = pipeline();
    REQUIRE(run("eval --config " + (p.dir / "exp.conf").string() + " --split " +
                (p.dir / "split.json").string() + " --model smoke=" + p.checkpoint().string() +
                " --folds 0 1 --out " + (p.dir / "evalout").string()) == 0);
    CHECK(std::filesystem::exists(p.dir / "evalout" / "scores.csv"));
    CHECK(std::filesystem::exists(p.dir / "evalout" / "report.txt"));

    // Recomputation oracle: rebuild the per-fold AUCs from the persisted
    // scores and the corpus labels, then compare with the report CSV.
    const auto sets = load_scores_csv(p.dir / "evalout" / "scores.csv");
    REQUIRE(sets.size() == 2);
    const auto records = parse_entry_csv(p.dir / "corpus" / "Data_Entry.csv");
    std::map<std::string, LabelVector> labels_by_id;
    for (const Record& r : records) labels_by_id[r.image_ref] = r.labels;

    std::vector<FoldAucs> per_fold;
    for (const FoldScores& fold : sets) {
        std::vector<std::array<std::uint8_t, kNumLabels>> truths;
        for (const auto& id : fold.ids) truths.push_back(labels_by_id.at(id));
        per_fold.push_back(fold_aucs(fold, truths));
    }
    const EvalReport expected = aggregate_folds(per_fold);

    std::ifstream report(p.dir / "evalout" / "report.csv");
    std::string line;
    std::getline(report, line); // header
    std::getline(report, line); // Cardiomegaly row
    const auto fields = split_csv_line(line);
    REQUIRE(fields.size() == 4);
    CHECK(fields[0] == "Cardiomegaly");
    REQUIRE(expected.pathologies[0].mean.has_value());
    CHECK(std::stod(fields[1]) == doctest::Approx(*expected.pathologies[0].mean).epsilon(1e-5));
}

TEST_CASE("compare: identical score sets under two tags correlate at 1.0") {
    Pipeline& p = pipeline();
    REQUIRE(run("eval --config " + (p.dir / "exp.conf").string() + " --split " +
                (p.dir / "split.json").string() + " --model a=" + p.checkpoint().string() +
                " --model b=" + p.checkpoint().string() + " --folds 0 --out " +
                (p.dir / "evalpair").string()) == 0);
    REQUIRE(run("compare --scores " + (p.dir / "evalpair" / "scores.csv").string() + " --out " +
                (p.dir / "cmp").string()) == 0);

    std::ifstream corr(p.dir / "cmp" / "correlation.csv");
    std::string line;
    std::getline(corr, line);
    CHECK(line == "model,a,b");
    std::getline(corr, line);
    auto fields = split_csv_line(line);
    REQUIRE(fields.size() == 3);
    CHECK(std::stod(fields[2]) == doctest::Approx(1.0).epsilon(1e-9)); // identical scores
    CHECK(run("compare --scores " + (p.dir / "missing.csv").string() + " --out " +
              (p.dir / "cmp2").string()) == 2);
}

TEST_CASE("probe trains against the frozen checkpoint and reports its metric") {
    Pipeline& p = pipeline();
    REQUIRE(run("probe --config " + (p.dir / "exp.conf").string() + " --split " +
                (p.dir / "split.json").string() + " --resample 0 --base " +
                p.checkpoint().string() + " --target view --out " +
                (p.dir / "probeout").string()) == 0);
    const std::string csv = slurp(p.dir / "probeout" / "probe_view.csv");
    CHECK(csv.find("auc,") != std::string::npos);
    CHECK(csv.find("sensitivity,") != std::string::npos);
}

TEST_CASE("gradcam exports deterministic CSV + PNG artifacts; bad label exits 2") {
    Pipeline& p = pipeline();
    const std::string image = (p.dir / "corpus" / "images" / "S000001.png").string();
    REQUIRE(run("gradcam --checkpoint " + p.checkpoint().string() + " --image " + image +
                " --label 0 --out " + (p.dir / "cams").string()) == 0);
    CHECK(std::filesystem::exists(p.dir / "cams" / "S000001_label0.csv"));
    CHECK(std::filesystem::exists(p.dir / "cams" / "S000001_label0.png"));
    CHECK(std::filesystem::exists(p.dir / "cams" / "S000001_label0_overlay.png"));

    const std::string grid = slurp(p.dir / "cams" / "S000001_label0.csv");
    REQUIRE(run("gradcam --checkpoint " + p.checkpoint().string() + " --image " + image +
                " --label 0 --out " + (p.dir / "cams2").string()) == 0);
    CHECK(slurp(p.dir / "cams2" / "S000001_label0.csv") == grid);

    CHECK(run("gradcam --checkpoint " + p.checkpoint().string() + " --image " + image +
              " --label 99 --out " + (p.dir / "cams3").string()) == 2);
}

TEST_CASE("official-split lists drive a single-fold Table-4 style evaluation") {
    Pipeline& p = pipeline();
    const auto records = parse_entry_csv(p.dir / "corpus" / "Data_Entry.csv");
    std::ofstream train_list(p.dir / "official_train.txt");
    std::ofstream val_list(p.dir / "official_val.txt");
    std::ofstream test_list(p.dir / "official_test.txt");
    for (std::size_t i = 0; i < records.size(); ++i)
        (i % 4 == 0 ? test_list : i % 4 == 1 ? val_list : train_list)
            << records[i].image_ref << "\n";
    train_list.close();
    val_list.close();
    test_list.close();

    const std::string lists = (p.dir / "official_train.txt").string() + "," +
                              (p.dir / "official_val.txt").string() + "," +
                              (p.dir / "official_test.txt").string();
    std::ofstream conf(p.dir / "official.conf");
    conf << slurp(p.dir / "exp.conf") << "run.tag = official\n";
    conf.close();
    REQUIRE(run("train --config " + (p.dir / "official.conf").string() +
                " --official-split-list " + lists) == 0);
    const auto ckpt = p.dir / "runs" / "official" / "resample0" / "checkpoint";
    REQUIRE(run("eval --config " + (p.dir / "official.conf").string() +
                " --official-split-list " + lists + " --model official=" + ckpt.string() +
                " --out " + (p.dir / "officialeval").string()) == 0);
    const std::string table = slurp(p.dir / "officialeval" / "official_report.txt");
    CHECK(table.find("Average") != std::string::npos);
    CHECK(table.find("No Findings") != std::string::npos);
    CHECK(std::filesystem::exists(p.dir / "officialeval" / "official_report.csv"));
}

TEST_CASE("meta-fusion model trains and explains through the CLI") {
    Pipeline& p = pipeline();
    std::ofstream conf(p.dir / "meta.conf");
    conf << slurp(p.dir / "exp.conf") << "model.meta = true\nrun.tag = meta\n";
    conf.close();
    REQUIRE(run("train --config " + (p.dir / "meta.conf").string() + " --split " +
                (p.dir / "split.json").string() + " --resample 0") == 0);
    const auto ckpt = p.dir / "runs" / "meta" / "resample0" / "checkpoint";
    const std::string image = (p.dir / "corpus" / "images" / "S000002.png").string();
    CHECK(run("gradcam --checkpoint " + ckpt.string() + " --image " + image +
              " --label 3 --meta 0.5 1 0 --out " + (p.dir / "metacams").string()) == 0);
    // Meta models refuse to run without the non-image features.
    CHECK(run("gradcam --checkpoint " + ckpt.string() + " --image " + image + " --label 3 --out " +
              (p.dir / "metacams2").string()) == 2);
}

TEST_CASE("off-the-shelf training via config reuses a pretrained trunk") {
    Pipeline& p = pipeline();
    std::ofstream conf(p.dir / "ots.conf");
    conf << slurp(p.dir / "exp.conf") << "model.freeze = off_the_shelf\nmodel.pretrained = "
         << p.checkpoint().string() << "\nrun.tag = ots\n";
    conf.close();
    REQUIRE(run("train --config " + (p.dir / "ots.conf").string() + " --split " +
                (p.dir / "split.json").string() + " --resample 0") == 0);

    // The frozen trunk must be bitwise identical to the pretrained source.
    const Model src = load_checkpoint(p.checkpoint());
    const Model ots = load_checkpoint(p.dir / "runs" / "ots" / "resample0" / "checkpoint");
    const auto pa = src.all_params();
    const auto pb = ots.all_params();
    REQUIRE(pa.size() == pb.size());
    bool head_differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].first.starts_with("head.")) {
            for (std::int64_t j = 0; j < pa[i].second.numel(); ++j)
                if (pa[i].second.values()[static_cast<std::size_t>(j)] !=
                    pb[i].second.values()[static_cast<std::size_t>(j)])
                    head_differs = true;
        } else {
            for (std::int64_t j = 0; j < pa[i].second.numel(); ++j)
                CHECK(pa[i].second.values()[static_cast<std::size_t>(j)] ==
                      pb[i].second.values()[static_cast<std::size_t>(j)]);
        }
    }
    CHECK(head_differs);
}

TEST_CASE("environment variables override config keys") {
    Pipeline& p = pipeline();
    const std::string cmd = "CXR_RUN_TAG=envtag " + binary() + " train --config " +
                            (p.dir / "exp.conf").string() + " --split " +
                            (p.dir / "split.json").string() + " --resample 0 > /dev/null 2>&1";
    REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
    CHECK(std::filesystem::exists(p.dir / "runs" / "envtag" / "resample0" / "checkpoint"));
}

TEST_CASE("eval accepts one checkpoint per fold and aggregates across them") {
    Pipeline& p = pipeline();
    // Second fold's model: same config, trained on resample 1.
    REQUIRE(run("train --config " + (p.dir / "exp.conf").string() + " --split " +
                (p.dir / "split.json").string() + " --resample 1") == 0);
    const auto ckpt1 = p.dir / "runs" / "smoke" / "resample1" / "checkpoint";
    REQUIRE(std::filesystem::exists(ckpt1 / "manifest.json"));

    REQUIRE(run("eval --config " + (p.dir / "exp.conf").string() + " --split " +
                (p.dir / "split.json").string() + " --model smoke=" + p.checkpoint().string() +
                "," + ckpt1.string() + " --folds 0 1 --out " + (p.dir / "evalperfold").string()) ==
            0);
    const auto sets = load_scores_csv(p.dir / "evalperfold" / "scores.csv");
    REQUIRE(sets.size() == 2);
    CHECK(sets[0].fold == 0);
    CHECK(sets[1].fold == 1);

    // Checkpoint-count mismatch is a config error.
    CHECK(run("eval --config " + (p.dir / "exp.conf").string() + " --split " +
              (p.dir / "split.json").string() + " --model smoke=" + p.checkpoint().string() + "," +
              ckpt1.string() + " --folds 0 1 2 --out " + (p.dir / "evalbad").string()) == 2);
}

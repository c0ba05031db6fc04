#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "treeloss/experiment.hpp"

using namespace treeloss;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("treeloss_exp_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

json small_config(std::uint64_t seed = 7)
{
    json j = json::parse(R"({
      "synth": {"tree_leaves": 8, "tree_depth": 2, "subjects": 4, "height": 16, "width": 16, "regions": 16, "rho": 0.3},
      "folds": {"subject_folds": 2},
      "train": {"epochs": 3, "learning_rate": 0.05, "batch_images": 1},
      "methods": [{"name": "ce", "loss": {"alpha": 0, "beta": 1}},
                  {"name": "wass", "loss": {"semantic": "wass", "scheme": "hier", "kappa": 10}}]
    })");
    j["seed"] = seed;
    return j;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

int run_cli(const std::string& args)
{
    const std::string cmd = std::string(TREELOSS_CLI) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

} // namespace

TEST(Experiment, TauZeroLeafReportMatchesDirectEvaluation)
{
    json j = small_config();
    j["folds"]["max_folds"] = 1;
    j["threshold"] = {{"level", "leaf"}, {"tau", 0.0}};
    j["eval"] = {{"levels", {"leaf"}}};
    const ExperimentConfig cfg = ExperimentConfig::from_json(j);
    const fs::path out = scratch("direct");
    const ExperimentResult r = run_experiment(cfg, out);
    const ExperimentContext ctx = prepare(cfg, 1);
    ASSERT_EQ(ctx.folds.size(), 1u);

    for (const MethodResult& m : r.methods) {
        const FoldOutcome& f = m.folds[0];
        std::vector<Label> pred, truth;
        for (std::size_t s : ctx.folds[0].val_subjects) {
            const Subject& sub = ctx.corpus.subjects[s];
            const LeafField p = predict(f.model, sub.features);
            for (std::size_t i = 0; i < sub.pixels(); ++i) {
                std::size_t best = 0;
                for (std::size_t l = 1; l < p.cols(); ++l)
                    if (p(i, l) > p(i, best)) best = l;
                pred.push_back(Label(best));
                truth.push_back(sub.mask.annotated(i) ? sub.truth[i] : -1);
            }
        }
        const auto d = dice(pred, truth, ctx.corpus.tree.leaf_count());
        const json& per = m.report["summary"]["tau0"]["leaf"]["per_class"];
        const auto names = ctx.corpus.tree.leaf_names();
        for (std::size_t k = 0; k < names.size(); ++k) {
            if (!d[k]) continue;
            EXPECT_NEAR(per[names[k]]["dice"].get<double>(), *d[k], 1e-12) << m.name << " " << names[k];
        }
        EXPECT_EQ(m.report["folds"][0]["tau_m"].get<double>(), 0.0);
    }
    fs::remove_all(out);
}

TEST(Experiment, ManifestIsByteIdenticalAcrossRunsAndJobs)
{
    const ExperimentConfig cfg = ExperimentConfig::from_json(small_config());
    const fs::path a = scratch("det_a"), b = scratch("det_b"), c = scratch("det_c");
    run_experiment(cfg, a, 1);
    run_experiment(cfg, b, 1);
    run_experiment(cfg, c, 3);
    const std::string ma = slurp(a / "manifest.json");
    EXPECT_FALSE(ma.empty());
    EXPECT_EQ(ma, slurp(b / "manifest.json"));
    EXPECT_EQ(ma, slurp(c / "manifest.json"));
    EXPECT_EQ(slurp(a / "wass" / "report.json"), slurp(c / "wass" / "report.json"));
    for (const fs::path& p : {a, b, c}) fs::remove_all(p);
}

TEST(Experiment, OutputLayout)
{
    const fs::path out = scratch("layout");
    const ExperimentResult r = run_experiment(ExperimentConfig::from_json(small_config()), out);
    for (const char* f : {"hierarchy.json", "folds.json", "manifest.json", "comparison.csv", "comparison.txt", "ce/report.json", "ce/report.txt",
                          "ce/confusion_tau0.csv", "ce/confusion_taum.csv", "wass/fold_00/tau_curve.csv", "wass/fold_01/model.bin"})
        EXPECT_TRUE(fs::exists(out / f)) << f;
    EXPECT_TRUE(std::is_sorted(r.files.begin(), r.files.end()));
    const json manifest = json::parse(slurp(out / "manifest.json"));
    EXPECT_EQ(manifest["files"].size(), r.files.size());
    const json rep = json::parse(slurp(out / "wass" / "report.json"));
    for (const char* key : {"method", "loss", "train", "seed", "leaves", "levels", "threshold_level", "folds", "summary"})
        EXPECT_TRUE(rep.contains(key)) << key;
    EXPECT_TRUE(rep["summary"]["semantic_errors"].contains("mean_error_distance"));
    fs::remove_all(out);
}

TEST(Experiment, UnannotatedPixelsDoNotChangeReports)
{
    // Corpus on disk, then a copy whose unannotated pixels carry other
    // features and other truth labels.
    const fs::path base = scratch("pos_only");
    SynthConfig sc = ExperimentConfig::from_json(small_config()).synth;
    auto rng = substream(3, "tree");
    const LabelTree tree = make_random_tree(8, 2, rng);
    sc.seed = 3;
    Corpus corpus = generate(tree, sc);
    io::write_corpus(base / "orig", corpus, sc);
    std::mt19937_64 alt(99);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Subject& s : corpus.subjects)
        for (std::size_t i = 0; i < s.pixels(); ++i) {
            if (s.mask.annotated(i)) continue;
            for (double& v : s.features.row(i)) v = u(alt);
            s.truth[i] = Label(alt() % tree.leaf_count());
        }
    io::write_corpus(base / "alt", corpus, sc);

    json j = small_config();
    j.erase("synth");
    j["folds"]["label_folds"] = 2;
    j["train"]["augment"] = true;
    j["corpus"] = "orig";
    run_experiment(ExperimentConfig::from_json(j, base), base / "out_orig");
    j["corpus"] = "alt";
    run_experiment(ExperimentConfig::from_json(j, base), base / "out_alt");
    for (const char* f : {"ce/report.json", "wass/report.json", "comparison.csv", "wass/confusion_taum.csv"})
        EXPECT_EQ(slurp(base / "out_orig" / f), slurp(base / "out_alt" / f)) << f;
    fs::remove_all(base);
}

TEST(Compare, SelfComparisonHasZeroDeltas)
{
    const fs::path out = scratch("cmp_self");
    const ExperimentResult r = run_experiment(ExperimentConfig::from_json(small_config()), out);
    const json& rep = r.methods[1].report;
    const auto rows = compare({rep, rep});
    ASSERT_FALSE(rows.empty());
    for (const auto& row : rows) EXPECT_EQ(row.values[0], row.values[1]) << row.metric;
    const std::string csv = comparison_csv(rows, {"a", "b"});
    EXPECT_NE(csv.find("delta_b"), std::string::npos);
    EXPECT_NE(csv.find("semantic_errors/mean_error_distance"), std::string::npos);
    fs::remove_all(out);
}

TEST(Compare, PermutationAndHandDeltas)
{
    const fs::path out = scratch("cmp_perm");
    const ExperimentResult r = run_experiment(ExperimentConfig::from_json(small_config()), out);
    const json& a = r.methods[0].report;
    const json& b = r.methods[1].report;
    const auto ab = compare({a, b});
    const auto ba = compare({b, a});
    ASSERT_EQ(ab.size(), ba.size());
    for (std::size_t k = 0; k < ab.size(); ++k) {
        EXPECT_EQ(ab[k].metric, ba[k].metric);
        EXPECT_EQ(ab[k].values[0], ba[k].values[1]);
        EXPECT_EQ(ab[k].values[1], ba[k].values[0]);
    }
    // Hand-computed row: leaf accuracy straight from the summaries.
    const double acc_a = a["summary"]["semantic_errors"]["leaf_accuracy"];
    const double acc_b = b["summary"]["semantic_errors"]["leaf_accuracy"];
    for (const auto& row : ab)
        if (row.metric == "semantic_errors/leaf_accuracy") {
            EXPECT_EQ(*row.values[0], acc_a);
            EXPECT_EQ(*row.values[1], acc_b);
        }
    // Recomputed means agree with per-class values.
    const json& per = a["summary"]["tau0"]["leaf"]["per_class"];
    double s = 0.0;
    int n = 0;
    for (const auto& [name, c] : per.items()) {
        (void)name;
        if (c["dice"].is_number()) {
            s += c["dice"].get<double>();
            ++n;
        }
    }
    for (const auto& row : ab)
        if (row.metric == "tau0/leaf/dice") EXPECT_NEAR(*row.values[0], s / n, 1e-12);
    fs::remove_all(out);
}

TEST(Compare, MismatchedFoldsAreConfigError)
{
    const fs::path out = scratch("cmp_mismatch");
    const ExperimentResult r = run_experiment(ExperimentConfig::from_json(small_config()), out);
    json other = r.methods[1].report;
    other["folds"][0]["validation"] = json::array({0});
    EXPECT_THROW(compare({r.methods[0].report, other}), ConfigError);
    EXPECT_THROW(compare({r.methods[0].report}), ConfigError);
    fs::remove_all(out);
}

TEST(ExperimentConfig, StrictKeysAndBadValues)
{
    json j = small_config();
    j["trian"] = json::object();
    EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
    j = small_config();
    j["methods"][1]["name"] = "ce";
    EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
    j = small_config();
    j["train"]["lr"] = 0.1;
    EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
    j = small_config();
    j.erase("methods");
    EXPECT_THROW(ExperimentConfig::from_json(j), ConfigError);
}

TEST(Cli, ExitCodes)
{
    const fs::path dir = scratch("cli");
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli("tree check " + std::string(TREELOSS_DATA_DIR) + "/hierarchies/surgical_hsi.json"), 0);
    EXPECT_EQ(run_cli("tree check " + (dir / "missing.json").string()), 2);
    {
        std::ofstream(dir / "bad.json") << R"({"name":"r","children":[{"name":"a"},{"name":"a"}]})";
    }
    EXPECT_EQ(run_cli("tree check " + (dir / "bad.json").string()), 1);
    {
        std::ofstream(dir / "cfg.json") << R"({"loss":{"alpha":0.5},"train":{"lr":0.1}})";
    }
    EXPECT_EQ(run_cli("run --config " + (dir / "cfg.json").string() + " --out " + (dir / "o").string()), 1);
    EXPECT_EQ(run_cli("no-such-command"), 1);
    EXPECT_EQ(run_cli("tree distmat " + std::string(TREELOSS_DATA_DIR) + "/hierarchies/surgical_hsi.json --scheme hier --kappa 10 --out " +
                      (dir / "m.csv").string()),
              0);
    EXPECT_TRUE(fs::exists(dir / "m.csv"));
    fs::remove_all(dir);
}

TEST(Cli, SynthTrainGateEvalPipeline)
{
    const fs::path dir = scratch("pipeline");
    {
        std::ofstream(dir / "exp.json") << R"({
          "seed": 5, "corpus": "corpus",
          "folds": {"subject_folds": 2},
          "train": {"epochs": 2, "learning_rate": 0.05},
          "loss": {"alpha": 0.5, "beta": 0.5}})";
        std::ofstream(dir / "synth.json") << R"({"synth": {"tree_leaves": 6, "tree_depth": 2, "subjects": 4, "height": 12,
          "width": 12, "regions": 12, "rho": 0.5}})";
    }
    const std::string d = dir.string();
    ASSERT_EQ(run_cli("synth --config " + d + "/synth.json --subject-folds 2 --seed 5 --out " + d + "/corpus"), 0);
    ASSERT_TRUE(fs::exists(dir / "corpus" / "folds.json"));
    ASSERT_EQ(run_cli("train --config " + d + "/exp.json --fold 0 --out " + d + "/model.bin"), 0);
    ASSERT_EQ(run_cli("sweep --model " + d + "/model.bin --corpus " + d + "/corpus --folds " + d + "/corpus/folds.json --fold 0 --out " + d +
                      "/sweep"),
              0);
    ASSERT_EQ(run_cli("gate --model " + d + "/model.bin --corpus " + d + "/corpus --tau 0 --folds " + d + "/corpus/folds.json --fold 0 --out " +
                      d + "/pred"),
              0);
    ASSERT_EQ(run_cli("eval --pred " + d + "/pred --corpus " + d + "/corpus --level leaf --out " + d + "/eval"), 0);
    EXPECT_TRUE(fs::exists(dir / "eval" / "report.json"));
    EXPECT_EQ(run_cli("gate --model " + d + "/model.bin --corpus " + d + "/corpus --tau 1.5 --out " + d + "/pred2"), 1);
    fs::remove_all(dir);
}

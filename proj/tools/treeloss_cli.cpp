// treeloss command-line front end.
//
// Exit codes: 0 success, 1 validation error (bad input or config),
// 2 runtime error (I/O failure, divergence).

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "treeloss/corpus_io.hpp"
#include "treeloss/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace treeloss;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    unsigned jobs = 1;
    std::string out;
};

fs::path out_or(const Globals& g, const std::string& fallback)
{
    return g.out.empty() ? fs::path(fallback) : fs::path(g.out);
}

ExperimentConfig load_experiment(const std::string& path, const Globals& g)
{
    const fs::path p(path);
    ExperimentConfig cfg = ExperimentConfig::from_json(io::read_json(p), p.parent_path());
    if (g.seed) cfg.seed = *g.seed;
    return cfg;
}

// Subject indices present as subject_NNN directories holding `file`.
std::vector<std::size_t> subjects_with(const fs::path& dir, const std::string& file)
{
    std::vector<std::size_t> out;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("subject_", 0) != 0 || !fs::exists(e.path() / file)) continue;
        const std::string digits = name.substr(8);
        if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) continue;
        out.push_back(std::stoul(digits));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::size_t> select_subjects(const Corpus& corpus, const std::string& folds_path, int fold)
{
    if (fold < 0) {
        std::vector<std::size_t> all(corpus.subjects.size());
        for (std::size_t s = 0; s < all.size(); ++s) all[s] = s;
        return all;
    }
    const auto folds = io::read_folds(folds_path);
    if (static_cast<std::size_t>(fold) >= folds.size()) throw ConfigError("fold index out of range");
    return folds[static_cast<std::size_t>(fold)].val_subjects;
}

std::vector<Label> read_prediction(const fs::path& file, const Subject& sub, std::size_t leaves)
{
    auto [h, codes] = io::read_ints(file);
    if (h.height != sub.height || h.width != sub.width) throw ShapeError("prediction shape differs from truth in " + file.string());
    return io::from_file_codes(codes, leaves, file);
}

int cmd_tree_check(const std::string& file)
{
    const LabelTree t = io::read_tree(file);
    std::printf("ok: %zu nodes, %zu leaves, %d levels\n", t.node_count(), t.leaf_count(), t.num_levels());
    for (int k = t.num_levels() - 1; k >= 0; --k)
        std::printf("  level %d: %zu nodes\n", k, t.level_nodes(k).size());
    return 0;
}

int cmd_tree_distmat(const std::string& file, const std::string& scheme, double kappa, const Globals& g)
{
    const LabelTree t = assign_weights(io::read_tree(file), EdgeWeightScheme::parse(scheme, kappa));
    const std::string csv = io::distance_csv(distance_matrix(t), t.leaf_names());
    if (g.out.empty()) std::fputs(csv.c_str(), stdout);
    else io::write_file(g.out, csv);
    return 0;
}

int cmd_synth(const std::string& config, const std::string& hierarchy, std::size_t subject_folds, std::size_t label_folds,
              const Globals& g)
{
    SynthConfig sc;
    if (!config.empty()) {
        const json j = io::read_json(config);
        sc = SynthConfig::from_json(j.contains("synth") ? j["synth"] : j);
    }
    if (g.seed) sc.seed = *g.seed;
    LabelTree tree;
    if (!hierarchy.empty()) {
        tree = io::read_tree(hierarchy);
    } else {
        auto rng = substream(sc.seed, "tree");
        tree = make_random_tree(sc.tree_leaves, sc.tree_depth, rng, sc.tree_branching);
    }
    const Corpus c = generate(tree, sc, g.jobs);
    const fs::path out = out_or(g, "corpus");
    io::write_corpus(out, c, sc);
    io::write_folds(out / "folds.json", make_folds(c.subjects.size(), tree.leaf_count(), subject_folds, label_folds,
                                                   substream(sc.seed, "folds")()));
    std::printf("wrote %zu subjects (%zu leaves) to %s\n", c.subjects.size(), tree.leaf_count(), out.string().c_str());
    return 0;
}

int cmd_train(const std::string& config, const std::string& method, int fold, const Globals& g)
{
    const ExperimentConfig cfg = load_experiment(config, g);
    const ExperimentContext ctx = prepare(cfg, g.jobs);
    const MethodConfig* m = &cfg.methods.front();
    if (!method.empty()) {
        m = nullptr;
        for (const auto& c : cfg.methods)
            if (c.name == method) m = &c;
        if (!m) throw ConfigError("no method named '" + method + "'");
    }
    const LossSpec spec = LossSpec::build(m->loss, ctx.corpus.tree);
    std::vector<ImageRef> images;
    TrainConfig tc = cfg.train;
    if (fold >= 0) {
        if (static_cast<std::size_t>(fold) >= ctx.folds.size()) throw ConfigError("fold index out of range");
        const FoldSpec& f = ctx.folds[static_cast<std::size_t>(fold)];
        for (std::size_t s : f.train_subjects) {
            const Subject& sub = ctx.corpus.subjects[s];
            images.push_back({&sub.features, fold_mask(sub.mask, f.held_out), sub.height, sub.width});
        }
        tc.seed = substream(cfg.seed, "train", static_cast<std::uint64_t>(fold))();
    } else {
        for (const auto& sub : ctx.corpus.subjects) images.push_back({&sub.features, sub.mask, sub.height, sub.width});
        tc.seed = substream(cfg.seed, "train")();
    }
    const TrainResult r = train(images, spec, tc);
    const fs::path out = out_or(g, "model.bin");
    io::write_file(out, encode_model(r.model));
    std::printf("trained %s on %zu images; final loss %.6f; wrote %s\n", m->name.c_str(), images.size(),
                r.loss_trace.empty() ? 0.0 : r.loss_trace.back(), out.string().c_str());
    return 0;
}

int cmd_gate(const std::string& model_path, const std::string& corpus_dir, const std::string& level_arg, double tau,
             const std::string& folds_path, int fold, const Globals& g)
{
    const Corpus corpus = io::read_corpus(corpus_dir);
    const ModelParams model = decode_model(io::read_file(model_path));
    const int level = parse_level(json(level_arg), corpus.tree);
    const fs::path out = out_or(g, "predictions");
    std::size_t bg = 0, n = 0;
    for (std::size_t s : select_subjects(corpus, folds_path, fold)) {
        const Subject& sub = corpus.subjects[s];
        const PredictionField p = gate(corpus.tree, predict(model, sub.features), {level, tau});
        io::write_file(out / io::subject_dir_name(s) / "pred.bin", io::encode_ints({sub.height, sub.width, 1}, io::to_file_codes(p.leaf)));
        bg += p.background_count();
        n += p.leaf.size();
    }
    std::printf("gated %zu pixels at level %d, tau %.4f: %zu background\n", n, level, tau, bg);
    return 0;
}

int cmd_sweep(const std::string& model_path, const std::string& corpus_dir, const std::string& level_arg, double step,
              const std::string& folds_path, int fold, const Globals& g)
{
    const Corpus corpus = io::read_corpus(corpus_dir);
    const ModelParams model = decode_model(io::read_file(model_path));
    const int level = parse_level(json(level_arg), corpus.tree);
    std::vector<FoldSpec> folds;
    if (fold >= 0) folds = io::read_folds(folds_path);
    std::vector<LeafField> probs;
    std::vector<SparseMask> masks;
    for (std::size_t s : select_subjects(corpus, folds_path, fold)) {
        const Subject& sub = corpus.subjects[s];
        probs.push_back(predict(model, sub.features));
        masks.push_back(fold >= 0 ? fold_mask(sub.mask, folds[static_cast<std::size_t>(fold)].held_out) : sub.mask);
    }
    const SweepResult r = sweep_tau(corpus.tree, probs, masks, level, tau_grid(step));
    const fs::path out = out_or(g, ".");
    io::write_file(out / "tau_curve.csv", tau_curve_csv(r));
    std::printf("tau_m = %s\n", io::fmt_real(r.tau_m).c_str());
    return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& corpus_dir, const std::string& level_arg, double tolerance,
             const Globals& g)
{
    const Corpus corpus = io::read_corpus(corpus_dir);
    const int level = parse_level(json(level_arg), corpus.tree);
    const auto ids = subjects_with(pred_dir, "pred.bin");
    if (ids.empty()) throw EmptyEvalError("no subject_NNN/pred.bin files under " + pred_dir);
    std::vector<std::vector<Label>> preds;
    for (std::size_t s : ids) {
        if (s >= corpus.subjects.size()) throw ConfigError("prediction for unknown subject " + std::to_string(s));
        preds.push_back(read_prediction(fs::path(pred_dir) / io::subject_dir_name(s) / "pred.bin", corpus.subjects[s],
                                        corpus.tree.leaf_count()));
    }
    std::vector<EvalImage> ims;
    FoldLabels fl;
    for (std::size_t k = 0; k < ids.size(); ++k) {
        const Subject& sub = corpus.subjects[ids[k]];
        ims.push_back({&preds[k], &sub.truth, &sub.mask, GridShape{1, sub.height, sub.width}});
        const auto t = map_to_level(corpus.tree, sub.truth, level);
        const auto p = map_to_level(corpus.tree, preds[k], level);
        for (std::size_t i = 0; i < t.size(); ++i) {
            fl.truth.push_back(sub.mask.annotated(i) ? t[i] : -1);
            fl.pred.push_back(p[i]);
        }
    }
    const LevelEval e = evaluate_level(corpus.tree, ims, level, tolerance);
    json rep = level_eval_json(e);
    rep["level_name"] = level_name(level, corpus.tree);
    rep["tolerance"] = tolerance;
    rep["subjects"] = ids;
    const fs::path out = out_or(g, ".");
    io::write_json(out / "report.json", rep);
    const ConfusionTensor ct = confusion({fl}, e.class_names.size(), true);
    io::write_file(out / "confusion.csv", confusion_csv(ct.averaged, e.class_names, true));
    const json& m = rep["mean"];
    auto f = [](const json& v) { return v.is_number() ? v.get<double>() : std::nan(""); };
    std::printf("level %s: dice %.4f  nsd %.4f  tpr %.4f  bacc %.4f  f1 %.4f\n", rep["level_name"].get<std::string>().c_str(),
                f(m["dice"]), f(m["nsd"]), f(m["tpr"]), f(m["bacc"]), f(m["f1"]));
    return 0;
}

int cmd_confusion(const std::vector<std::string>& pred_dirs, const std::string& corpus_dir, const std::string& level_arg,
                  const Globals& g)
{
    const Corpus corpus = io::read_corpus(corpus_dir);
    const int level = parse_level(json(level_arg), corpus.tree);
    std::vector<FoldLabels> folds;
    for (const auto& dir : pred_dirs) {
        FoldLabels fl;
        const auto ids = subjects_with(dir, "pred.bin");
        if (ids.empty()) throw EmptyEvalError("no subject_NNN/pred.bin files under " + dir);
        for (std::size_t s : ids) {
            if (s >= corpus.subjects.size()) throw ConfigError("prediction for unknown subject " + std::to_string(s));
            const Subject& sub = corpus.subjects[s];
            const auto p = map_to_level(corpus.tree,
                                        read_prediction(fs::path(dir) / io::subject_dir_name(s) / "pred.bin", sub, corpus.tree.leaf_count()),
                                        level);
            const auto t = map_to_level(corpus.tree, sub.truth, level);
            for (std::size_t i = 0; i < t.size(); ++i) {
                fl.truth.push_back(sub.mask.annotated(i) ? t[i] : -1);
                fl.pred.push_back(p[i]);
            }
        }
        folds.push_back(std::move(fl));
    }
    std::vector<std::string> names;
    for (NodeId v : corpus.tree.level_nodes(level)) names.push_back(corpus.tree.node(v).name);
    const ConfusionTensor ct = confusion(folds, names.size(), true);
    const std::string csv = confusion_csv(ct.averaged, names, true);
    if (g.out.empty()) std::fputs(csv.c_str(), stdout);
    else io::write_file(g.out, csv);
    return 0;
}

int cmd_run(const std::string& config, const Globals& g)
{
    const ExperimentConfig cfg = load_experiment(config, g);
    const fs::path out = out_or(g, "experiment");
    const ExperimentResult r = run_experiment(cfg, out, g.jobs);
    for (const auto& m : r.methods) std::fputs(report_text(m.report).c_str(), stdout);
    if (r.methods.size() >= 2) std::fputs(io::read_file(out / "comparison.txt").c_str(), stdout);
    std::printf("wrote %zu files to %s\n", r.files.size() + 1, out.string().c_str());
    return 0;
}

int cmd_compare(const std::vector<std::string>& paths, const Globals& g)
{
    std::vector<json> reports;
    for (const auto& p : paths) reports.push_back(io::read_json(p));
    const auto rows = compare(reports);
    const auto names = report_names(reports);
    const std::string text = comparison_text(rows, names);
    std::fputs(text.c_str(), stdout);
    if (!g.out.empty()) {
        io::write_file(fs::path(g.out) / "comparison.csv", comparison_csv(rows, names));
        io::write_file(fs::path(g.out) / "comparison.txt", text);
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Tree-based semantic losses, background gating and hierarchical evaluation"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Top-level random seed");
    app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--out", g.out, "Output file or directory");
    app.fallthrough();

    std::function<int()> action;

    auto* tree = app.add_subcommand("tree", "Hierarchy utilities");
    tree->require_subcommand(1);
    std::string tree_file;
    auto* check = tree->add_subcommand("check", "Validate a hierarchy file");
    check->add_option("file", tree_file)->required();
    check->callback([&] { action = [&] { return cmd_tree_check(tree_file); }; });
    std::string scheme = "hier";
    double kappa = 10.0;
    auto* distmat = tree->add_subcommand("distmat", "Export the leaf ground-distance matrix as CSV");
    distmat->add_option("file", tree_file)->required();
    distmat->add_option("--scheme", scheme)->check(CLI::IsMember({"top", "leaf", "equal", "hier"}));
    distmat->add_option("--kappa", kappa);
    distmat->callback([&] { action = [&] { return cmd_tree_distmat(tree_file, scheme, kappa, g); }; });

    std::string config, hierarchy;
    std::size_t subject_folds = 4, label_folds = 1;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
    synth->add_option("--config", config, "JSON file with a synth block");
    synth->add_option("--hierarchy", hierarchy, "Hierarchy file (default: random tree)");
    synth->add_option("--subject-folds", subject_folds);
    synth->add_option("--label-folds", label_folds);
    synth->callback([&] { action = [&] { return cmd_synth(config, hierarchy, subject_folds, label_folds, g); }; });

    std::string method;
    int fold = -1;
    auto* train_cmd = app.add_subcommand("train", "Train one model from an experiment config");
    train_cmd->add_option("--config", config)->required();
    train_cmd->add_option("--method", method, "Method name (default: first)");
    train_cmd->add_option("--fold", fold, "Train on this fold's training subjects (default: all)");
    train_cmd->callback([&] { action = [&] { return cmd_train(config, method, fold, g); }; });

    std::string model, corpus_dir, level = "topmost", folds_path;
    double tau = 0.0, grid_step = 0.01, tolerance = 1.0;
    auto* gate_cmd = app.add_subcommand("gate", "Write gated leaf predictions");
    gate_cmd->add_option("--model", model)->required();
    gate_cmd->add_option("--corpus", corpus_dir)->required();
    gate_cmd->add_option("--level", level);
    gate_cmd->add_option("--tau", tau);
    gate_cmd->add_option("--folds", folds_path);
    gate_cmd->add_option("--fold", fold, "Only this fold's validation subjects");
    gate_cmd->callback([&] { action = [&] { return cmd_gate(model, corpus_dir, level, tau, folds_path, fold, g); }; });

    auto* sweep_cmd = app.add_subcommand("sweep", "Sweep tau on validation data");
    sweep_cmd->add_option("--model", model)->required();
    sweep_cmd->add_option("--corpus", corpus_dir)->required();
    sweep_cmd->add_option("--level", level);
    sweep_cmd->add_option("--grid-step", grid_step);
    sweep_cmd->add_option("--folds", folds_path);
    sweep_cmd->add_option("--fold", fold, "Only this fold's validation subjects");
    sweep_cmd->callback([&] { action = [&] { return cmd_sweep(model, corpus_dir, level, grid_step, folds_path, fold, g); }; });

    std::string pred_dir;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate predictions at one hierarchy level");
    eval_cmd->add_option("--pred", pred_dir)->required();
    eval_cmd->add_option("--corpus", corpus_dir)->required();
    eval_cmd->add_option("--level", level);
    eval_cmd->add_option("--tolerance", tolerance);
    eval_cmd->callback([&] { action = [&] { return cmd_eval(pred_dir, corpus_dir, level, tolerance, g); }; });

    std::vector<std::string> pred_dirs;
    auto* conf_cmd = app.add_subcommand("confusion", "Fold-averaged confusion matrix, one prediction dir per fold");
    conf_cmd->add_option("--pred", pred_dirs)->required();
    conf_cmd->add_option("--corpus", corpus_dir)->required();
    conf_cmd->add_option("--level", level);
    conf_cmd->callback([&] { action = [&] { return cmd_confusion(pred_dirs, corpus_dir, level, g); }; });

    auto* run_cmd = app.add_subcommand("run", "Run a full experiment");
    run_cmd->add_option("--config", config)->required();
    run_cmd->callback([&] { action = [&] { return cmd_run(config, g); }; });

    std::vector<std::string> reports;
    auto* cmp = app.add_subcommand("compare", "Compare two or more report.json files");
    cmp->add_option("reports", reports)->required()->expected(2, -1);
    cmp->callback([&] { action = [&] { return cmd_compare(reports, g); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    if (seed_opt->count() > 0) g.seed = seed;

    try {
        return action ? action() : 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.kind() == ErrorKind::Validation ? 1 : 2;
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "error: malformed config: %s\n", e.what());
        return 1;
    } catch (const std::filesystem::filesystem_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

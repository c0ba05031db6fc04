#pragma once

// End-to-end experiments: train per fold, choose tau on validation, gate,
// evaluate at several hierarchy levels, and merge per-fold results. Every
// (method, fold) task is independent and seeded from named substreams, so the
// number of worker threads never changes the output.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "corpus_io.hpp"
#include "json_keys.hpp"
#include "errors.hpp"
#include "ground_metric.hpp"
#include "label_tree.hpp"
#include "metrics.hpp"
#include "ood_gate.hpp"
#include "rng.hpp"
#include "semantic_losses.hpp"
#include "synth_bench.hpp"
#include "trainer.hpp"

namespace treeloss {

namespace fs = std::filesystem;
using json = nlohmann::json;

// "leaf" -> 0, "topmost" -> K-1, otherwise an integer level.
inline int parse_level(const json& j, const LabelTree& tree)
{
    int k = 0;
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "leaf") k = 0;
        else if (s == "topmost") k = tree.num_levels() - 1;
        else {
            try {
                std::size_t used = 0;
                k = std::stoi(s, &used);
                if (used != s.size()) throw ConfigError("bad level '" + s + "'");
            } catch (const std::logic_error&) {
                throw ConfigError("bad level '" + s + "' (expected leaf|topmost|<k>)");
            }
        }
    } else if (j.is_number_integer()) {
        k = j.get<int>();
    } else {
        throw ConfigError("level must be leaf, topmost, or an integer");
    }
    tree.check_level(k);
    return k;
}

inline std::string level_name(int k, const LabelTree& tree)
{
    if (k == 0) return "leaf";
    if (k == tree.num_levels() - 1) return "topmost";
    return "level_" + std::to_string(k);
}

struct MethodConfig {
    std::string name;
    LossConfig loss;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::optional<fs::path> hierarchy;
    std::optional<fs::path> corpus;
    SynthConfig synth;
    std::size_t subject_folds = 4;
    std::size_t label_folds = 1;
    std::optional<std::size_t> max_folds;
    TrainConfig train;
    std::vector<MethodConfig> methods;
    json threshold_level = "topmost";
    std::optional<double> fixed_tau; // unset -> sweep
    double grid_step = 0.01;
    std::vector<json> eval_levels{"leaf", "topmost"};
    double tolerance = 1.0;
    EdgeWeightScheme error_scheme = EdgeWeightScheme::hierarchical(10.0);

    static ExperimentConfig from_json(const json& j, const fs::path& base = {})
    {
        check_keys(j, {"seed", "hierarchy", "corpus", "synth", "folds", "train", "methods", "loss", "threshold", "eval",
                       "error_distance"},
                   "experiment");
        ExperimentConfig c;
        c.seed = j.value("seed", c.seed);
        auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base.empty() ? fs::path(p) : base / p; };
        if (j.contains("hierarchy")) c.hierarchy = resolve(j["hierarchy"].get<std::string>());
        if (j.contains("corpus")) c.corpus = resolve(j["corpus"].get<std::string>());
        if (j.contains("synth")) c.synth = SynthConfig::from_json(j["synth"]);
        if (j.contains("folds")) {
            check_keys(j["folds"], {"subject_folds", "label_folds", "max_folds"}, "folds");
            c.subject_folds = j["folds"].value("subject_folds", c.subject_folds);
            c.label_folds = j["folds"].value("label_folds", c.label_folds);
            if (j["folds"].contains("max_folds")) c.max_folds = j["folds"]["max_folds"].get<std::size_t>();
        }
        if (j.contains("train")) c.train = TrainConfig::from_json(j["train"]);
        if (j.contains("methods")) {
            for (const auto& m : j["methods"]) {
                check_keys(m, {"name", "loss"}, "method");
                c.methods.push_back({m.at("name").get<std::string>(), LossConfig::from_json(m.at("loss"))});
            }
        } else if (j.contains("loss")) {
            c.methods.push_back({"method", LossConfig::from_json(j["loss"])});
        }
        if (c.methods.empty()) throw ConfigError("experiment config defines no loss / methods");
        std::set<std::string> names;
        for (const auto& m : c.methods) {
            if (m.name.empty() || m.name.find_first_of("/\\") != std::string::npos) throw ConfigError("bad method name '" + m.name + "'");
            if (!names.insert(m.name).second) throw ConfigError("duplicate method name '" + m.name + "'");
        }
        if (j.contains("threshold")) {
            const auto& t = j["threshold"];
            check_keys(t, {"level", "tau", "grid_step"}, "threshold");
            if (t.contains("level")) c.threshold_level = t["level"];
            if (t.contains("tau")) c.fixed_tau = t["tau"].get<double>();
            c.grid_step = t.value("grid_step", c.grid_step);
        }
        if (j.contains("eval")) {
            check_keys(j["eval"], {"levels", "tolerance"}, "eval");
            if (j["eval"].contains("levels")) c.eval_levels = j["eval"]["levels"].get<std::vector<json>>();
            c.tolerance = j["eval"].value("tolerance", c.tolerance);
        }
        if (j.contains("error_distance")) {
            check_keys(j["error_distance"], {"scheme", "kappa"}, "error_distance");
            c.error_scheme = EdgeWeightScheme::parse(j["error_distance"].value("scheme", std::string("hier")),
                                                     j["error_distance"].value("kappa", 10.0));
        }
        return c;
    }
};

// Metrics of one hierarchy level on a set of validation images.
struct LevelEval {
    int level = 0;
    std::vector<std::string> class_names;
    std::vector<std::optional<double>> dice;
    std::vector<std::optional<double>> nsd;
    OvrReport ovr;
};

struct EvalImage {
    const std::vector<Label>* pred = nullptr;  // leaf ids or kBackground
    const std::vector<Label>* truth = nullptr; // dense leaf ids
    const SparseMask* domain = nullptr;        // annotated pixels define the domain
    GridShape shape;
};

inline LevelEval evaluate_level(const LabelTree& tree, const std::vector<EvalImage>& images, int level, double tolerance)
{
    LevelEval e;
    e.level = level;
    const auto band = tree.level_nodes(level);
    for (NodeId v : band) e.class_names.push_back(tree.node(v).name);
    std::vector<Label> pred_all;
    std::vector<Label> truth_all;
    std::vector<std::vector<std::optional<double>>> nsd_per_image;
    for (const auto& im : images) {
        const auto p = map_to_level(tree, *im.pred, level);
        const auto t = map_to_level(tree, *im.truth, level);
        for (std::size_t i = 0; i < p.size(); ++i) {
            pred_all.push_back(p[i]);
            truth_all.push_back(im.domain->annotated(i) ? t[i] : -1);
        }
        if (im.domain->dense()) nsd_per_image.push_back(nsd(p, t, im.shape, band.size(), tolerance));
    }
    e.dice = dice(pred_all, truth_all, band.size());
    e.ovr = ovr_metrics(pred_all, truth_all, band.size());
    e.nsd.assign(band.size(), std::nullopt);
    if (!nsd_per_image.empty()) {
        for (std::size_t k = 0; k < band.size(); ++k) {
            std::vector<std::optional<double>> vals;
            for (const auto& v : nsd_per_image) vals.push_back(v[k]);
            e.nsd[k] = mean_of(vals);
        }
    }
    return e;
}

inline json level_eval_json(const LevelEval& e)
{
    json j;
    j["level"] = e.level;
    json per = json::object();
    for (std::size_t k = 0; k < e.class_names.size(); ++k) {
        const auto& o = e.ovr.per_class[k];
        json c;
        c["dice"] = e.dice[k] ? json(*e.dice[k]) : json(nullptr);
        c["nsd"] = e.nsd[k] ? json(*e.nsd[k]) : json(nullptr);
        c["present"] = o.present;
        c["tpr"] = o.present ? json(o.tpr) : json(nullptr);
        c["bacc"] = o.present ? json(o.bacc) : json(nullptr);
        c["f1"] = o.present ? json(o.f1) : json(nullptr);
        c["counts"] = {{"tp", o.tp}, {"fp", o.fp}, {"fn", o.fn}, {"tn", o.tn}};
        per[e.class_names[k]] = c;
    }
    j["per_class"] = per;
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    j["mean"] = {{"dice", opt(mean_of(e.dice))}, {"nsd", opt(mean_of(e.nsd))}, {"tpr", e.ovr.mean_tpr},
                 {"bacc", e.ovr.mean_bacc},      {"f1", e.ovr.mean_f1}};
    return j;
}

struct SemanticErrors {
    std::size_t pixels = 0;
    std::size_t errors = 0;
    double leaf_accuracy = 0.0;
    double mean_error_distance = 0.0; // mean M[pred, truth] over misclassified pixels
    double mean_distance = 0.0;       // mean M[pred, truth] over all pixels
};

// Misclassification geometry of ungated leaf predictions on the domain.
inline SemanticErrors semantic_errors(const DistanceMatrix& m, const std::vector<EvalImage>& images)
{
    SemanticErrors s;
    double err_sum = 0.0;
    for (const auto& im : images) {
        for (std::size_t i = 0; i < im.truth->size(); ++i) {
            if (!im.domain->annotated(i)) continue;
            const Label p = (*im.pred)[i];
            const Label t = (*im.truth)[i];
            ++s.pixels;
            if (p == t) continue;
            ++s.errors;
            if (p >= 0) err_sum += m(static_cast<std::size_t>(p), static_cast<std::size_t>(t));
        }
    }
    if (s.pixels > 0) {
        s.leaf_accuracy = 1.0 - static_cast<double>(s.errors) / static_cast<double>(s.pixels);
        s.mean_distance = err_sum / static_cast<double>(s.pixels);
    }
    if (s.errors > 0) s.mean_error_distance = err_sum / static_cast<double>(s.errors);
    return s;
}

inline std::string tau_curve_csv(const SweepResult& r)
{
    std::string out = "tau,tpr,bacc,f1\n";
    for (const auto& p : r.curve)
        out += io::fmt_real(p.tau) + "," + io::fmt_real(p.tpr) + "," + io::fmt_real(p.bacc) + "," + io::fmt_real(p.f1) + "\n";
    return out;
}

inline std::string confusion_csv(const Matrix& m, const std::vector<std::string>& names, bool background)
{
    std::string out = "truth\\pred";
    for (const auto& n : names) out += "," + io::csv_escape(n);
    if (background) out += ",background";
    out += "\n";
    for (std::size_t r = 0; r < m.rows(); ++r) {
        out += io::csv_escape(names[r]);
        for (std::size_t c = 0; c < m.cols(); ++c) out += "," + io::fmt_real(m(r, c));
        out += "\n";
    }
    return out;
}

struct FoldOutcome {
    FoldSpec fold;
    ModelParams model;
    std::vector<double> loss_trace;
    SweepResult sweep;
    double tau_m = 0.0;
    std::map<int, LevelEval> tau0;
    std::map<int, LevelEval> taum;
    SemanticErrors errors;
    std::optional<double> heldout_background_rate;
    FoldLabels confusion_tau0;
    FoldLabels confusion_taum;
};

struct ExperimentContext {
    Corpus corpus;
    std::vector<FoldSpec> folds;
    DistanceMatrix error_distances;
    int threshold_level = 0;
    std::vector<int> eval_levels;
};

inline std::string with_context(const std::string& where, const std::exception& e) { return where + ": " + e.what(); }

inline FoldOutcome run_fold(const ExperimentConfig& cfg, const ExperimentContext& ctx, const MethodConfig& method,
                            std::size_t fold_index)
{
    const FoldSpec& fold = ctx.folds[fold_index];
    const LabelTree& tree = ctx.corpus.tree;
    const std::string where = "method '" + method.name + "' fold " + std::to_string(fold_index);
    auto stage = [&](const char* name, auto&& fn) {
        try {
            return fn();
        } catch (const Error& e) {
            throw Error(e.kind(), with_context(where + " " + name, e));
        }
    };

    FoldOutcome out;
    out.fold = fold;

    const LossSpec spec = stage("loss", [&] { return LossSpec::build(method.loss, tree); });
    std::vector<ImageRef> train_images;
    for (std::size_t s : fold.train_subjects) {
        const Subject& sub = ctx.corpus.subjects[s];
        train_images.push_back({&sub.features, fold_mask(sub.mask, fold.held_out), sub.height, sub.width});
    }
    TrainConfig tc = cfg.train;
    tc.seed = substream(cfg.seed, "train", fold_index)();
    const TrainResult tr = stage("train", [&] { return train(train_images, spec, tc); });
    out.model = tr.model;
    out.loss_trace = tr.loss_trace;

    std::vector<LeafField> probs;
    std::vector<SparseMask> val_masks;
    for (std::size_t s : fold.val_subjects) {
        const Subject& sub = ctx.corpus.subjects[s];
        probs.push_back(stage("predict", [&] { return predict(tr.model, sub.features); }));
        val_masks.push_back(fold_mask(sub.mask, fold.held_out));
    }

    if (cfg.fixed_tau) {
        out.tau_m = *cfg.fixed_tau;
        out.sweep = stage("sweep", [&] { return sweep_tau(tree, probs, val_masks, ctx.threshold_level, {*cfg.fixed_tau}); });
    } else {
        out.sweep = stage("sweep", [&] { return sweep_tau(tree, probs, val_masks, ctx.threshold_level, tau_grid(cfg.grid_step)); });
        out.tau_m = out.sweep.tau_m;
    }

    std::vector<std::vector<Label>> pred0, predm;
    for (std::size_t k = 0; k < probs.size(); ++k) {
        pred0.push_back(gate(tree, probs[k], {ctx.threshold_level, 0.0}).leaf);
        predm.push_back(gate(tree, probs[k], {ctx.threshold_level, out.tau_m}).leaf);
    }
    auto images_for = [&](const std::vector<std::vector<Label>>& pred) {
        std::vector<EvalImage> ims;
        for (std::size_t k = 0; k < fold.val_subjects.size(); ++k) {
            const Subject& sub = ctx.corpus.subjects[fold.val_subjects[k]];
            ims.push_back({&pred[k], &sub.truth, &val_masks[k], GridShape{1, sub.height, sub.width}});
        }
        return ims;
    };
    const auto ims0 = images_for(pred0);
    const auto imsm = images_for(predm);
    for (int level : ctx.eval_levels) {
        out.tau0[level] = stage("eval", [&] { return evaluate_level(tree, ims0, level, cfg.tolerance); });
        out.taum[level] = stage("eval", [&] { return evaluate_level(tree, imsm, level, cfg.tolerance); });
    }
    out.errors = semantic_errors(ctx.error_distances, ims0);

    if (!fold.held_out.empty()) {
        std::size_t n = 0, bg = 0;
        for (std::size_t k = 0; k < fold.val_subjects.size(); ++k) {
            const Subject& sub = ctx.corpus.subjects[fold.val_subjects[k]];
            // Pixels annotated in the corpus with a label this fold hides.
            for (std::size_t i = 0; i < sub.mask.size(); ++i) {
                if (!sub.mask.annotated(i)) continue;
                if (std::find(fold.held_out.begin(), fold.held_out.end(), sub.mask[i]) == fold.held_out.end()) continue;
                ++n;
                bg += predm[k][i] == kBackground;
            }
        }
        if (n > 0) out.heldout_background_rate = static_cast<double>(bg) / static_cast<double>(n);
    }

    for (std::size_t k = 0; k < fold.val_subjects.size(); ++k) {
        const Subject& sub = ctx.corpus.subjects[fold.val_subjects[k]];
        const auto t = map_to_level(tree, sub.truth, ctx.threshold_level);
        const auto p0 = map_to_level(tree, pred0[k], ctx.threshold_level);
        const auto pm = map_to_level(tree, predm[k], ctx.threshold_level);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const Label tt = val_masks[k].annotated(i) ? t[i] : -1;
            out.confusion_tau0.truth.push_back(tt);
            out.confusion_tau0.pred.push_back(p0[i]);
            out.confusion_taum.truth.push_back(tt);
            out.confusion_taum.pred.push_back(pm[i]);
        }
    }
    return out;
}

inline ExperimentContext prepare(const ExperimentConfig& cfg, unsigned jobs)
{
    ExperimentContext ctx;
    if (cfg.corpus) {
        ctx.corpus = io::read_corpus(*cfg.corpus);
        if (cfg.hierarchy) {
            const LabelTree h = io::read_tree(*cfg.hierarchy);
            if (h.leaf_count() != ctx.corpus.tree.leaf_count())
                throw ConfigError("hierarchy has " + std::to_string(h.leaf_count()) + " leaves but the corpus uses " +
                                  std::to_string(ctx.corpus.tree.leaf_count()));
            ctx.corpus.tree = h;
        }
    } else {
        SynthConfig sc = cfg.synth;
        sc.seed = substream(cfg.seed, "synth")();
        LabelTree tree;
        if (cfg.hierarchy) {
            tree = io::read_tree(*cfg.hierarchy);
        } else {
            auto rng = substream(cfg.seed, "tree");
            tree = make_random_tree(sc.tree_leaves, sc.tree_depth, rng, sc.tree_branching);
        }
        ctx.corpus = generate(tree, sc, jobs);
    }
    const LabelTree& tree = ctx.corpus.tree;
    ctx.folds = make_folds(ctx.corpus.subjects.size(), tree.leaf_count(), cfg.subject_folds, cfg.label_folds,
                           substream(cfg.seed, "folds")());
    if (cfg.max_folds && *cfg.max_folds < ctx.folds.size()) ctx.folds.resize(*cfg.max_folds);
    ctx.error_distances = distance_matrix(assign_weights(tree, cfg.error_scheme));
    ctx.threshold_level = parse_level(cfg.threshold_level, tree);
    for (const auto& l : cfg.eval_levels) {
        const int k = parse_level(l, tree);
        if (std::find(ctx.eval_levels.begin(), ctx.eval_levels.end(), k) == ctx.eval_levels.end()) ctx.eval_levels.push_back(k);
    }
    if (cfg.fixed_tau && !(*cfg.fixed_tau >= 0.0 && *cfg.fixed_tau <= 1.0)) throw RangeError("fixed tau must lie in [0, 1]");
    return ctx;
}

// Fold-mean of per-class metric values; classes missing in every fold are null.
inline json summarize_levels(const std::vector<FoldOutcome>& folds, bool gated, int level, const LabelTree& tree)
{
    const auto band = tree.level_nodes(level);
    const std::size_t m = band.size();
    json per = json::object();
    std::vector<std::optional<double>> dice_c(m), nsd_c(m), tpr_c(m), bacc_c(m), f1_c(m);
    for (std::size_t k = 0; k < m; ++k) {
        std::vector<std::optional<double>> d, n, t, b, f;
        for (const auto& fo : folds) {
            const LevelEval& e = (gated ? fo.taum : fo.tau0).at(level);
            d.push_back(e.dice[k]);
            n.push_back(e.nsd[k]);
            const auto& o = e.ovr.per_class[k];
            t.push_back(o.present ? std::optional<double>(o.tpr) : std::nullopt);
            b.push_back(o.present ? std::optional<double>(o.bacc) : std::nullopt);
            f.push_back(o.present ? std::optional<double>(o.f1) : std::nullopt);
        }
        dice_c[k] = mean_of(d);
        nsd_c[k] = mean_of(n);
        tpr_c[k] = mean_of(t);
        bacc_c[k] = mean_of(b);
        f1_c[k] = mean_of(f);
        auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
        per[tree.node(band[k]).name] = {{"dice", opt(dice_c[k])}, {"nsd", opt(nsd_c[k])}, {"tpr", opt(tpr_c[k])},
                                        {"bacc", opt(bacc_c[k])}, {"f1", opt(f1_c[k])}};
    }
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return {{"level", level},
            {"per_class", per},
            {"mean",
             {{"dice", opt(mean_of(dice_c))},
              {"nsd", opt(mean_of(nsd_c))},
              {"tpr", opt(mean_of(tpr_c))},
              {"bacc", opt(mean_of(bacc_c))},
              {"f1", opt(mean_of(f1_c))}}}};
}

struct MethodResult {
    std::string name;
    json report;
    ConfusionTensor confusion_tau0;
    ConfusionTensor confusion_taum;
    std::vector<FoldOutcome> folds;
};

inline MethodResult assemble(const ExperimentConfig& cfg, const ExperimentContext& ctx, const MethodConfig& method,
                             std::vector<FoldOutcome> folds)
{
    const LabelTree& tree = ctx.corpus.tree;
    MethodResult r;
    r.name = method.name;
    json rep;
    rep["method"] = method.name;
    rep["loss"] = method.loss.to_json();
    rep["train"] = cfg.train.to_json();
    rep["seed"] = cfg.seed;
    rep["leaves"] = tree.leaf_count();
    rep["levels"] = tree.num_levels();
    rep["threshold_level"] = level_name(ctx.threshold_level, tree);
    rep["error_distance_scheme"] = {{"scheme", cfg.error_scheme.name()}, {"kappa", cfg.error_scheme.kappa}};
    json fj = json::array();
    double tau_sum = 0.0;
    SemanticErrors agg;
    double err_sum = 0.0;
    std::vector<double> heldout;
    for (const auto& fo : folds) {
        json f = fo.fold.to_json();
        f["tau_m"] = fo.tau_m;
        f["loss_trace"] = fo.loss_trace;
        json t0 = json::object(), tm = json::object();
        for (int level : ctx.eval_levels) {
            t0[level_name(level, tree)] = level_eval_json(fo.tau0.at(level));
            tm[level_name(level, tree)] = level_eval_json(fo.taum.at(level));
        }
        f["tau0"] = t0;
        f["tau_m_metrics"] = tm;
        f["semantic_errors"] = {{"pixels", fo.errors.pixels},
                                {"errors", fo.errors.errors},
                                {"leaf_accuracy", fo.errors.leaf_accuracy},
                                {"mean_error_distance", fo.errors.mean_error_distance},
                                {"mean_distance", fo.errors.mean_distance}};
        f["heldout_background_rate"] = fo.heldout_background_rate ? json(*fo.heldout_background_rate) : json(nullptr);
        fj.push_back(f);
        tau_sum += fo.tau_m;
        agg.pixels += fo.errors.pixels;
        agg.errors += fo.errors.errors;
        err_sum += fo.errors.mean_error_distance * static_cast<double>(fo.errors.errors);
        if (fo.heldout_background_rate) heldout.push_back(*fo.heldout_background_rate);
    }
    rep["folds"] = fj;

    json summary;
    summary["tau_m_mean"] = folds.empty() ? 0.0 : tau_sum / static_cast<double>(folds.size());
    json s0 = json::object(), sm = json::object();
    for (int level : ctx.eval_levels) {
        s0[level_name(level, tree)] = summarize_levels(folds, false, level, tree);
        sm[level_name(level, tree)] = summarize_levels(folds, true, level, tree);
    }
    summary["tau0"] = s0;
    summary["tau_m"] = sm;
    summary["semantic_errors"] = {
        {"pixels", agg.pixels},
        {"errors", agg.errors},
        {"leaf_accuracy", agg.pixels ? 1.0 - static_cast<double>(agg.errors) / static_cast<double>(agg.pixels) : 0.0},
        {"mean_error_distance", agg.errors ? err_sum / static_cast<double>(agg.errors) : 0.0}};
    if (!heldout.empty()) {
        double s = 0.0;
        for (double v : heldout) s += v;
        summary["heldout_background_rate"] = s / static_cast<double>(heldout.size());
    }
    rep["summary"] = summary;
    r.report = rep;

    std::vector<FoldLabels> c0, cm;
    for (const auto& fo : folds) {
        c0.push_back(fo.confusion_tau0);
        cm.push_back(fo.confusion_taum);
    }
    const std::size_t m = tree.level_nodes(ctx.threshold_level).size();
    r.confusion_tau0 = confusion(c0, m, true);
    r.confusion_taum = confusion(cm, m, true);
    r.folds = std::move(folds);
    return r;
}

// ---------------------------------------------------------------------------
// Comparison of reports

struct ComparisonRow {
    std::string metric;
    std::vector<std::optional<double>> values; // one per report
};

inline std::optional<double> mean_from_per_class(const json& per_class, const std::string& key)
{
    std::vector<std::optional<double>> v;
    for (const auto& [name, c] : per_class.items()) {
        (void)name;
        if (c.contains(key) && c[key].is_number()) v.push_back(c[key].get<double>());
    }
    return mean_of(v);
}

inline json fold_structure(const json& report)
{
    json s = json::array();
    for (const auto& f : report.at("folds")) s.push_back({f.at("validation"), f.at("held_out")});
    return s;
}

// Side-by-side table; means are recomputed from per-class values.
inline std::vector<ComparisonRow> compare(const std::vector<json>& reports)
{
    if (reports.size() < 2) throw ConfigError("compare needs at least two reports");
    const json structure = fold_structure(reports[0]);
    for (std::size_t r = 1; r < reports.size(); ++r)
        if (fold_structure(reports[r]) != structure) throw ConfigError("reports have different fold structures");

    std::vector<ComparisonRow> rows;
    const json& first = reports[0].at("summary");
    for (const char* block : {"tau0", "tau_m"}) {
        for (const auto& [level, body] : first.at(block).items()) {
            (void)body;
            for (const char* metric : {"dice", "nsd", "tpr", "bacc", "f1"}) {
                ComparisonRow row{std::string(block) + "/" + level + "/" + metric, {}};
                for (const auto& rep : reports) {
                    const json& s = rep.at("summary").at(block);
                    row.values.push_back(s.contains(level) ? mean_from_per_class(s[level].at("per_class"), metric) : std::nullopt);
                }
                rows.push_back(std::move(row));
            }
        }
    }
    for (const char* metric : {"leaf_accuracy", "mean_error_distance"}) {
        ComparisonRow row{std::string("semantic_errors/") + metric, {}};
        for (const auto& rep : reports) row.values.push_back(rep.at("summary").at("semantic_errors").at(metric).get<double>());
        rows.push_back(std::move(row));
    }
    ComparisonRow tau{"tau_m_mean", {}};
    for (const auto& rep : reports) tau.values.push_back(rep.at("summary").at("tau_m_mean").get<double>());
    rows.push_back(std::move(tau));
    return rows;
}

inline std::vector<std::string> report_names(const std::vector<json>& reports)
{
    std::vector<std::string> names;
    for (const auto& r : reports) names.push_back(r.value("method", std::string("report")));
    return names;
}

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows, const std::vector<std::string>& names)
{
    std::string out = "metric";
    for (const auto& n : names) out += "," + io::csv_escape(n);
    for (std::size_t k = 1; k < names.size(); ++k) out += "," + io::csv_escape("delta_" + names[k]);
    out += "\n";
    auto cell = [](const std::optional<double>& v) { return v ? io::fmt_real(*v) : std::string(); };
    for (const auto& r : rows) {
        out += r.metric;
        for (const auto& v : r.values) out += "," + cell(v);
        for (std::size_t k = 1; k < r.values.size(); ++k) {
            std::optional<double> d;
            if (r.values[k] && r.values[0]) d = *r.values[k] - *r.values[0];
            out += "," + cell(d);
        }
        out += "\n";
    }
    return out;
}

inline std::string comparison_text(const std::vector<ComparisonRow>& rows, const std::vector<std::string>& names)
{
    std::size_t w0 = 6;
    for (const auto& r : rows) w0 = std::max(w0, r.metric.size());
    std::vector<std::string> heads = names;
    for (std::size_t k = 1; k < names.size(); ++k) heads.push_back("d(" + names[k] + ")");
    std::size_t w = 10;
    for (const auto& h : heads) w = std::max(w, h.size());
    std::ostringstream os;
    auto pad = [](const std::string& s, std::size_t width) { return s + std::string(width > s.size() ? width - s.size() : 0, ' '); };
    os << pad("metric", w0);
    for (const auto& h : heads) os << "  " << pad(h, w);
    os << "\n";
    auto num = [](const std::optional<double>& v) {
        if (!v) return std::string("-");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%+.4f", *v);
        return std::string(buf[0] == '+' ? buf + 1 : buf);
    };
    for (const auto& r : rows) {
        os << pad(r.metric, w0);
        for (const auto& v : r.values) os << "  " << pad(num(v), w);
        for (std::size_t k = 1; k < r.values.size(); ++k) {
            std::optional<double> d;
            if (r.values[k] && r.values[0]) d = *r.values[k] - *r.values[0];
            std::string s = "-";
            if (d) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%+.4f", *d);
                s = buf;
            }
            os << "  " << pad(s, w);
        }
        os << "\n";
    }
    return os.str();
}

inline std::string report_text(const json& rep)
{
    std::ostringstream os;
    os << "method " << rep.at("method").get<std::string>() << "  (" << rep.at("loss").dump() << ")\n";
    const json& s = rep.at("summary");
    char buf[160];
    std::snprintf(buf, sizeof buf, "tau_m (mean over folds): %.2f\n", s.at("tau_m_mean").get<double>());
    os << buf;
    for (const char* block : {"tau0", "tau_m"}) {
        for (const auto& [level, body] : s.at(block).items()) {
            const json& m = body.at("mean");
            auto f = [](const json& v) { return v.is_number() ? v.get<double>() : std::nan(""); };
            std::snprintf(buf, sizeof buf, "%-6s %-10s dice %.4f  nsd %.4f  tpr %.4f  bacc %.4f  f1 %.4f\n", block, level.c_str(),
                          f(m["dice"]), f(m["nsd"]), f(m["tpr"]), f(m["bacc"]), f(m["f1"]));
            os << buf;
        }
    }
    const json& e = s.at("semantic_errors");
    std::snprintf(buf, sizeof buf, "leaf accuracy %.4f  mean tree distance of errors %.4f\n", e.at("leaf_accuracy").get<double>(),
                  e.at("mean_error_distance").get<double>());
    os << buf;
    return os.str();
}

struct ExperimentResult {
    std::vector<MethodResult> methods;
    std::vector<std::string> files; // relative to the output directory, sorted
};

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// Writes manifest.json listing every other file under `dir` with its size
// and FNV-1a 64 content hash.
inline std::vector<std::string> write_manifest(const fs::path& dir)
{
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string rel = fs::relative(e.path(), dir).generic_string();
        if (rel == "manifest.json") continue;
        files.push_back(rel);
    }
    std::sort(files.begin(), files.end());
    json m = json::array();
    for (const auto& f : files) {
        const std::string content = io::read_file(dir / f);
        m.push_back({{"path", f}, {"bytes", content.size()}, {"fnv1a64", hex64(fnv1a64(content))}});
    }
    io::write_json(dir / "manifest.json", {{"files", m}});
    return files;
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir, unsigned jobs = 1)
{
    const ExperimentContext ctx = prepare(cfg, jobs);
    const std::size_t nf = ctx.folds.size();
    const std::size_t tasks = cfg.methods.size() * nf;
    std::vector<std::optional<FoldOutcome>> slots(tasks);
    std::vector<std::exception_ptr> errors(tasks);
    const unsigned workers = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(tasks)));
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t t = w; t < tasks; t += workers) {
                try {
                    slots[t] = run_fold(cfg, ctx, cfg.methods[t / nf], t % nf);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    ExperimentResult result;
    fs::create_directories(out_dir);
    const LabelTree& tree = ctx.corpus.tree;
    const auto band = tree.level_nodes(ctx.threshold_level);
    std::vector<std::string> band_names;
    for (NodeId v : band) band_names.push_back(tree.node(v).name);

    io::write_json(out_dir / "hierarchy.json", serialize_tree(tree));
    io::write_folds(out_dir / "folds.json", ctx.folds);
    for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
        std::vector<FoldOutcome> folds;
        for (std::size_t f = 0; f < nf; ++f) folds.push_back(std::move(*slots[mi * nf + f]));
        MethodResult mr = assemble(cfg, ctx, cfg.methods[mi], std::move(folds));
        const fs::path md = out_dir / mr.name;
        io::write_json(md / "report.json", mr.report);
        io::write_file(md / "report.txt", report_text(mr.report));
        io::write_file(md / "confusion_tau0.csv", confusion_csv(mr.confusion_tau0.averaged, band_names, true));
        io::write_file(md / "confusion_taum.csv", confusion_csv(mr.confusion_taum.averaged, band_names, true));
        for (std::size_t f = 0; f < nf; ++f) {
            char name[32];
            std::snprintf(name, sizeof name, "fold_%02zu", f);
            io::write_file(md / name / "tau_curve.csv", tau_curve_csv(mr.folds[f].sweep));
            io::write_file(md / name / "model.bin", encode_model(mr.folds[f].model));
        }
        result.methods.push_back(std::move(mr));
    }
    if (result.methods.size() >= 2) {
        std::vector<json> reports;
        for (const auto& m : result.methods) reports.push_back(m.report);
        const auto rows = compare(reports);
        const auto names = report_names(reports);
        io::write_file(out_dir / "comparison.csv", comparison_csv(rows, names));
        io::write_file(out_dir / "comparison.txt", comparison_text(rows, names));
    }
    result.files = write_manifest(out_dir);
    return result;
}

} // namespace treeloss

#pragma once

// Background detection for models trained on positive classes only. Leaf
// probabilities are aggregated to a chosen hierarchy level; a pixel is
// background when its best level score does not exceed tau.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "errors.hpp"
#include "label_tree.hpp"
#include "matrix.hpp"
#include "semantic_losses.hpp"

namespace treeloss {

inline constexpr Label kBackground = -1;

struct LevelScores {
    int level = 0;
    std::vector<NodeId> nodes; // band nodes, column order of `scores`
    Matrix scores;             // pixels x nodes.size()
};

struct ThresholdPolicy {
    int level = 0;
    double tau = 0.0;

    void validate(const LabelTree& tree) const
    {
        tree.check_level(level);
        if (!(tau >= 0.0 && tau <= 1.0)) throw RangeError("tau must lie in [0, 1]");
    }
};

// ŷ per pixel. `leaf` holds a leaf id or kBackground; `level_class` holds the
// column index of the winning band node or kBackground.
struct PredictionField {
    std::vector<Label> leaf;
    std::vector<Label> level_class;

    std::size_t background_count() const
    {
        return static_cast<std::size_t>(std::count(leaf.begin(), leaf.end(), kBackground));
    }
};

inline LevelScores score_at_level(const LabelTree& tree, const LeafField& probs, int level)
{
    tree.check_level(level);
    if (probs.cols() != tree.leaf_count()) throw ShapeError("probability field does not match leaf count");
    LevelScores s;
    s.level = level;
    s.nodes = tree.level_nodes(level);
    s.scores = Matrix(probs.rows(), s.nodes.size());
    std::vector<double> node(tree.node_count());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        aggregate_row(tree, probs.row(i), node);
        for (std::size_t k = 0; k < s.nodes.size(); ++k) s.scores(i, k) = node[static_cast<std::size_t>(s.nodes[k])];
    }
    return s;
}

// Argmax over the row; first index wins ties.
inline std::size_t argmax(std::span<const double> v)
{
    std::size_t best = 0;
    for (std::size_t k = 1; k < v.size(); ++k)
        if (v[k] > v[best]) best = k;
    return best;
}

inline PredictionField gate_from_scores(const LabelTree& tree, const LevelScores& scores, const LeafField& probs, double tau)
{
    if (scores.scores.rows() != probs.rows()) throw ShapeError("score and probability fields differ in pixel count");
    PredictionField out;
    out.leaf.assign(probs.rows(), kBackground);
    out.level_class.assign(probs.rows(), kBackground);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        const auto row = scores.scores.row(i);
        const std::size_t k = argmax(row);
        if (!(row[k] > tau)) continue;
        const NodeId v = scores.nodes[k];
        NodeId best = tree.first_leaf(v);
        for (NodeId l = best + 1; l < tree.last_leaf(v); ++l)
            if (probs(i, static_cast<std::size_t>(l)) > probs(i, static_cast<std::size_t>(best))) best = l;
        out.level_class[i] = static_cast<Label>(k);
        out.leaf[i] = best;
    }
    return out;
}

inline PredictionField gate(const LabelTree& tree, const LeafField& probs, const ThresholdPolicy& policy)
{
    policy.validate(tree);
    return gate_from_scores(tree, score_at_level(tree, probs, policy.level), probs, policy.tau);
}

// {0, step, 2*step, ...} strictly below 1.
inline std::vector<double> tau_grid(double step = 0.01)
{
    if (!(step > 0.0) || step > 1.0) throw ConfigError("grid step must lie in (0, 1]");
    const auto n = static_cast<std::size_t>(std::llround(1.0 / step));
    std::vector<double> g;
    for (std::size_t i = 0; i < n; ++i) g.push_back(static_cast<double>(i) / static_cast<double>(n));
    return g;
}

struct TauPoint {
    double tau = 0.0;
    double tpr = 0.0;
    double bacc = 0.0;
    double f1 = 0.0;
};

struct SweepResult {
    double tau_m = 0.0;
    std::vector<TauPoint> curve;
};

// One-vs-rest counts at the level of band classes. `pred` < 0 is background
// and counts as negative for every class.
struct OvrCounts {
    std::vector<std::size_t> tp, fp, fn, tn;
};

inline OvrCounts count_ovr(std::span<const Label> pred, std::span<const Label> truth, std::size_t classes)
{
    OvrCounts c;
    c.tp.assign(classes, 0);
    c.fp.assign(classes, 0);
    c.fn.assign(classes, 0);
    c.tn.assign(classes, 0);
    std::size_t domain = 0;
    std::vector<std::size_t> pos(classes, 0);
    std::vector<std::size_t> predicted(classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const Label t = truth[i];
        if (t < 0) continue;
        ++domain;
        ++pos[static_cast<std::size_t>(t)];
        const Label p = pred[i];
        if (p >= 0) {
            ++predicted[static_cast<std::size_t>(p)];
            if (p == t) ++c.tp[static_cast<std::size_t>(t)];
        }
    }
    for (std::size_t k = 0; k < classes; ++k) {
        c.fn[k] = pos[k] - c.tp[k];
        c.fp[k] = predicted[k] - c.tp[k];
        c.tn[k] = domain - pos[k] - c.fp[k];
    }
    return c;
}

// Mean TPR / BACC / F1 over classes with at least one positive.
inline TauPoint ovr_means(const OvrCounts& c)
{
    TauPoint t;
    std::size_t present = 0;
    for (std::size_t k = 0; k < c.tp.size(); ++k) {
        const std::size_t positives = c.tp[k] + c.fn[k];
        if (positives == 0) continue;
        ++present;
        const double tpr = static_cast<double>(c.tp[k]) / static_cast<double>(positives);
        const std::size_t negatives = c.tn[k] + c.fp[k];
        const double tnr = negatives == 0 ? tpr : static_cast<double>(c.tn[k]) / static_cast<double>(negatives);
        const double f1 = 2.0 * static_cast<double>(c.tp[k]) / static_cast<double>(2 * c.tp[k] + c.fp[k] + c.fn[k]);
        t.tpr += tpr;
        t.bacc += 0.5 * (tpr + tnr);
        t.f1 += f1;
    }
    if (present > 0) {
        t.tpr /= static_cast<double>(present);
        t.bacc /= static_cast<double>(present);
        t.f1 /= static_cast<double>(present);
    }
    return t;
}

// Picks the tau that maximizes mean one-vs-rest F1 over band classes on the
// annotated validation pixels. Ties go to the largest tau.
inline SweepResult sweep_tau(const LabelTree& tree, const std::vector<LeafField>& probs, const std::vector<SparseMask>& masks,
                             int level, const std::vector<double>& grid)
{
    if (grid.empty()) throw ConfigError("tau grid is empty");
    if (probs.size() != masks.size()) throw ShapeError("probability and mask lists differ in length");
    tree.check_level(level);
    const std::vector<NodeId> band = tree.level_nodes(level);

    // Per annotated pixel: best score, its band index, and the true band index.
    std::vector<double> best_score;
    std::vector<Label> best_class;
    std::vector<Label> truth;
    for (std::size_t s = 0; s < probs.size(); ++s) {
        const LevelScores sc = score_at_level(tree, probs[s], level);
        if (masks[s].size() != probs[s].rows()) throw ShapeError("mask does not match probability field");
        for (std::size_t i = 0; i < masks[s].size(); ++i) {
            if (!masks[s].annotated(i)) continue;
            const std::size_t k = argmax(sc.scores.row(i));
            best_score.push_back(sc.scores(i, k));
            best_class.push_back(static_cast<Label>(k));
            const NodeId anc = tree.band_ancestor(masks[s][i], level);
            truth.push_back(static_cast<Label>(std::find(band.begin(), band.end(), anc) - band.begin()));
        }
    }
    if (truth.empty()) throw ConfigError("validation set has no annotated pixels");

    SweepResult r;
    double best_f1 = -1.0;
    std::vector<Label> pred(truth.size());
    for (double tau : grid) {
        for (std::size_t i = 0; i < truth.size(); ++i) pred[i] = best_score[i] > tau ? best_class[i] : kBackground;
        TauPoint pt = ovr_means(count_ovr(pred, truth, band.size()));
        pt.tau = tau;
        r.curve.push_back(pt);
        if (pt.f1 > best_f1 || (pt.f1 == best_f1 && tau > r.tau_m)) {
            best_f1 = pt.f1;
            r.tau_m = tau;
        }
    }
    return r;
}

} // namespace treeloss

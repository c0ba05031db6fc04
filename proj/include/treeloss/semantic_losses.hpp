#pragma once

// Loss values and analytic gradients with respect to per-pixel logits.
//
// Every loss is the arithmetic mean over annotated pixels (soft Dice is the
// mean over classes of a batch-level ratio). Pixels are visited in index
// order so values are bit-reproducible. Gradients of unannotated pixels are 0.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "ground_metric.hpp"
#include "json_keys.hpp"
#include "label_tree.hpp"
#include "matrix.hpp"

namespace treeloss {

struct LossResult {
    double value = 0.0;
    GradField grad;
};

inline constexpr double kLogGuard = 1e-12;
inline constexpr double kDiceSmooth = 1e-5;

inline void softmax_row(std::span<const double> z, std::span<double> p)
{
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
        p[j] = std::exp(z[j] - mx);
        s += p[j];
    }
    for (double& v : p) v /= s;
}

inline LeafField softmax(const Matrix& logits)
{
    LeafField p(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) softmax_row(logits.row(i), p.row(i));
    return p;
}

// Pulls a gradient w.r.t. probabilities back through the softmax:
// dz_j = p_j * (dp_j - sum_l p_l dp_l).
inline void softmax_backward_row(std::span<const double> p, std::span<const double> dp, std::span<double> dz)
{
    double dot = 0.0;
    for (std::size_t l = 0; l < p.size(); ++l) dot += p[l] * dp[l];
    for (std::size_t j = 0; j < p.size(); ++j) dz[j] = p[j] * (dp[j] - dot);
}

inline void check_mask_labels(const SparseMask& mask, std::size_t classes)
{
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const Label y = mask[i];
        if (y != kUnlabeled && (y < 0 || static_cast<std::size_t>(y) >= classes))
            throw LabelError("pixel " + std::to_string(i) + " carries out-of-range class " + std::to_string(y));
    }
}

// Returns the number of annotated pixels; throws on malformed masks.
inline std::size_t check_mask(const SparseMask& mask, std::size_t pixels, std::size_t classes)
{
    if (mask.size() != pixels) throw ShapeError("mask size does not match the number of pixels");
    std::size_t n = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const Label y = mask[i];
        if (y == kUnlabeled) continue;
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw LabelError("pixel " + std::to_string(i) + " carries out-of-range class " + std::to_string(y));
        ++n;
    }
    if (n == 0) throw EmptyMaskError("no annotated pixels");
    return n;
}

// Mean over annotated pixels of p^T M g for crisp g, on probabilities.
inline double wasserstein_crisp_value(const DistanceMatrix& m, const LeafField& probs, const SparseMask& mask)
{
    const std::size_t c = probs.cols();
    if (m.rows() != c || m.cols() != c) throw ShapeError("distance matrix does not match class count");
    const std::size_t n = check_mask(mask, probs.rows(), c);
    double total = 0.0;
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        if (!mask.annotated(i)) continue;
        const auto y = static_cast<std::size_t>(mask[i]);
        double li = 0.0;
        for (std::size_t l = 0; l < c; ++l) li += m(l, y) * probs(i, l);
        total += li;
    }
    return total / static_cast<double>(n);
}

inline LossResult wasserstein_crisp(const DistanceMatrix& m, const Matrix& logits, const SparseMask& mask)
{
    const std::size_t c = logits.cols();
    if (m.rows() != c || m.cols() != c) throw ShapeError("distance matrix does not match class count");
    const std::size_t n = check_mask(mask, logits.rows(), c);
    const double scale = 1.0 / static_cast<double>(n);
    LossResult r{0.0, GradField(logits.rows(), c)};
    std::vector<double> p(c);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (!mask.annotated(i)) continue;
        const auto y = static_cast<std::size_t>(mask[i]);
        softmax_row(logits.row(i), p);
        double li = 0.0;
        for (std::size_t l = 0; l < c; ++l) li += m(l, y) * p[l];
        r.value += li;
        for (std::size_t j = 0; j < c; ++j) r.grad(i, j) = scale * p[j] * (m(j, y) - li);
    }
    r.value *= scale;
    return r;
}

// Node probabilities: leaf entries copied, internal nodes hold the sum of
// their children. One ascending sweep suffices because parent ids exceed
// child ids.
inline void aggregate_row(const LabelTree& tree, std::span<const double> leaf, std::span<double> node)
{
    std::fill(node.begin(), node.end(), 0.0);
    std::copy(leaf.begin(), leaf.end(), node.begin());
    for (std::size_t v = 0; v + 1 < node.size(); ++v) node[static_cast<std::size_t>(tree.parent(static_cast<NodeId>(v)))] += node[v];
}

inline Matrix aggregate(const LabelTree& tree, const LeafField& probs)
{
    if (probs.cols() != tree.leaf_count()) throw ShapeError("probability field does not match leaf count");
    Matrix out(probs.rows(), tree.node_count());
    for (std::size_t i = 0; i < probs.rows(); ++i) aggregate_row(tree, probs.row(i), out.row(i));
    return out;
}

// -sum_v w_v g+_v log p+_v with weights taken from the tree's edge weights.
// g+ is 1 exactly on the true leaf's ancestor chain (root excluded; its
// probability is always 1).
inline LossResult tree_weighted_ce(const LabelTree& tree, const Matrix& logits, const SparseMask& mask)
{
    const std::size_t c = tree.leaf_count();
    if (logits.cols() != c) throw ShapeError("logit field does not match leaf count");
    const std::size_t n = check_mask(mask, logits.rows(), c);
    const double scale = 1.0 / static_cast<double>(n);
    LossResult r{0.0, GradField(logits.rows(), c)};
    std::vector<double> p(c);
    std::vector<double> node(tree.node_count());
    std::vector<double> dp(c);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (!mask.annotated(i)) continue;
        softmax_row(logits.row(i), p);
        aggregate_row(tree, p, node);
        std::fill(dp.begin(), dp.end(), 0.0);
        double li = 0.0;
        for (NodeId v = mask[i]; v != tree.root(); v = tree.parent(v)) {
            const double w = tree.edge_weight(v);
            if (w == 0.0) continue;
            const double pv = node[static_cast<std::size_t>(v)];
            li -= w * std::log(std::max(pv, kLogGuard));
            if (pv > kLogGuard) {
                for (NodeId l = tree.first_leaf(v); l < tree.last_leaf(v); ++l) dp[static_cast<std::size_t>(l)] -= w / pv;
            }
        }
        r.value += li;
        auto g = r.grad.row(i);
        softmax_backward_row(p, dp, g);
        for (double& x : g) x *= scale;
    }
    r.value *= scale;
    return r;
}

// Standard softmax cross-entropy, mean over annotated pixels.
inline LossResult seg_loss_ce(const Matrix& logits, const SparseMask& mask)
{
    const std::size_t c = logits.cols();
    const std::size_t n = check_mask(mask, logits.rows(), c);
    const double scale = 1.0 / static_cast<double>(n);
    LossResult r{0.0, GradField(logits.rows(), c)};
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (!mask.annotated(i)) continue;
        const auto y = static_cast<std::size_t>(mask[i]);
        const auto z = logits.row(i);
        double mx = z[0];
        for (double v : z) mx = std::max(mx, v);
        double s = 0.0;
        for (double v : z) s += std::exp(v - mx);
        const double lse = mx + std::log(s);
        r.value += lse - z[y];
        for (std::size_t j = 0; j < c; ++j) r.grad(i, j) = scale * (std::exp(z[j] - lse) - (j == y ? 1.0 : 0.0));
    }
    r.value *= scale;
    return r;
}

// Soft Dice on probabilities; gradient is w.r.t. the probabilities.
// Requires a dense mask: every pixel must carry a class.
inline LossResult soft_dice_probs(const LeafField& probs, const SparseMask& mask, double eps = kDiceSmooth)
{
    const std::size_t c = probs.cols();
    check_mask(mask, probs.rows(), c);
    if (!mask.dense()) throw ConfigError("soft Dice requires a dense annotation mask");
    std::vector<double> inter(c, 0.0);
    std::vector<double> psum(c, 0.0);
    std::vector<double> gsum(c, 0.0);
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        const auto y = static_cast<std::size_t>(mask[i]);
        for (std::size_t l = 0; l < c; ++l) psum[l] += probs(i, l);
        inter[y] += probs(i, y);
        gsum[y] += 1.0;
    }
    LossResult r{0.0, GradField(probs.rows(), c)};
    const double inv_c = 1.0 / static_cast<double>(c);
    std::vector<double> dg0(c);
    std::vector<double> dg1(c);
    for (std::size_t l = 0; l < c; ++l) {
        const double num = 2.0 * inter[l] + eps;
        const double den = psum[l] + gsum[l] + eps;
        r.value += 1.0 - num / den;
        // d(1 - num/den)/dp = -(2 g den - num) / den^2
        dg0[l] = -inv_c * (-num) / (den * den);
        dg1[l] = -inv_c * (2.0 * den - num) / (den * den);
    }
    r.value *= inv_c;
    for (std::size_t i = 0; i < probs.rows(); ++i) {
        const auto y = static_cast<std::size_t>(mask[i]);
        for (std::size_t l = 0; l < c; ++l) r.grad(i, l) = l == y ? dg1[l] : dg0[l];
    }
    return r;
}

inline LossResult seg_loss_dice(const Matrix& logits, const SparseMask& mask, double eps = kDiceSmooth)
{
    const LeafField p = softmax(logits);
    LossResult d = soft_dice_probs(p, mask, eps);
    GradField gz(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.rows(); ++i) softmax_backward_row(p.row(i), d.grad.row(i), gz.row(i));
    d.grad = std::move(gz);
    return d;
}

enum class SemanticLoss { Wasserstein, TreeCE };
enum class SegLoss { CE, DiceCE, None };

inline SegLoss parse_seg_loss(std::string_view s)
{
    if (s == "ce") return SegLoss::CE;
    if (s == "dice_ce") return SegLoss::DiceCE;
    if (s == "none") return SegLoss::None;
    throw ConfigError("unknown seg loss '" + std::string(s) + "' (expected ce|dice_ce|none)");
}

inline std::string seg_loss_name(SegLoss s)
{
    switch (s) {
    case SegLoss::CE: return "ce";
    case SegLoss::DiceCE: return "dice_ce";
    case SegLoss::None: return "none";
    }
    return "?";
}

// Serializable loss configuration block:
//   {semantic: wass|twce, scheme: top|leaf|equal|hier, kappa, alpha, beta, seg: ce|dice_ce|none}
struct LossConfig {
    SemanticLoss semantic = SemanticLoss::Wasserstein;
    EdgeWeightScheme scheme = EdgeWeightScheme::hierarchical(10.0);
    double alpha = 0.5;
    double beta = 0.5;
    SegLoss seg = SegLoss::CE;

    static LossConfig from_json(const nlohmann::json& j)
    {
        check_keys(j, {"semantic", "scheme", "kappa", "alpha", "beta", "seg"}, "loss");
        LossConfig c;
        const std::string sem = j.value("semantic", std::string("wass"));
        if (sem == "wass") c.semantic = SemanticLoss::Wasserstein;
        else if (sem == "twce") c.semantic = SemanticLoss::TreeCE;
        else throw ConfigError("unknown semantic loss '" + sem + "' (expected wass|twce)");
        c.scheme = EdgeWeightScheme::parse(j.value("scheme", std::string("hier")), j.value("kappa", 10.0));
        c.alpha = j.value("alpha", 0.5);
        c.beta = j.value("beta", 0.5);
        c.seg = parse_seg_loss(j.value("seg", std::string("ce")));
        return c;
    }

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["semantic"] = semantic == SemanticLoss::Wasserstein ? "wass" : "twce";
        j["scheme"] = scheme.name();
        j["kappa"] = scheme.kappa;
        j["alpha"] = alpha;
        j["beta"] = beta;
        j["seg"] = seg_loss_name(seg);
        return j;
    }
};

// Ready-to-evaluate compound loss: alpha * semantic + beta * seg.
struct LossSpec {
    SemanticLoss semantic = SemanticLoss::Wasserstein;
    SegLoss seg = SegLoss::CE;
    double alpha = 0.5;
    double beta = 0.5;
    LabelTree tree;           // carries the scheme's edge weights
    DistanceMatrix distances; // filled for Wasserstein

    static LossSpec build(const LossConfig& cfg, const LabelTree& base)
    {
        LossSpec s;
        s.semantic = cfg.semantic;
        s.seg = cfg.seg;
        s.alpha = cfg.alpha;
        s.beta = cfg.beta;
        s.tree = assign_weights(base, cfg.scheme);
        if (s.semantic == SemanticLoss::Wasserstein) s.distances = distance_matrix(s.tree);
        s.validate();
        return s;
    }

    void validate() const
    {
        if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("loss weights alpha and beta must be >= 0");
        if (seg == SegLoss::None && semantic != SemanticLoss::TreeCE)
            throw ConfigError("seg=none is only permitted with the tree-weighted CE loss");
    }
};

inline LossResult seg_loss(SegLoss seg, const Matrix& logits, const SparseMask& mask)
{
    switch (seg) {
    case SegLoss::CE: return seg_loss_ce(logits, mask);
    case SegLoss::DiceCE: {
        LossResult ce = seg_loss_ce(logits, mask);
        LossResult dice = seg_loss_dice(logits, mask);
        ce.value += dice.value;
        for (std::size_t k = 0; k < ce.grad.data().size(); ++k) ce.grad.data()[k] += dice.grad.data()[k];
        return ce;
    }
    case SegLoss::None: break;
    }
    throw ConfigError("no segmentation loss configured");
}

inline LossResult semantic_term(const LossSpec& spec, const Matrix& logits, const SparseMask& mask)
{
    if (spec.semantic == SemanticLoss::Wasserstein) return wasserstein_crisp(spec.distances, logits, mask);
    return tree_weighted_ce(spec.tree, logits, mask);
}

inline LossResult combine(double alpha, const LossResult& a, double beta, const LossResult& b)
{
    LossResult r{alpha * a.value + beta * b.value, GradField(a.grad.rows(), a.grad.cols())};
    for (std::size_t k = 0; k < r.grad.data().size(); ++k) r.grad.data()[k] = alpha * a.grad.data()[k] + beta * b.grad.data()[k];
    return r;
}

inline void check_compound(const LossSpec& spec, SemanticLoss expected, const SparseMask& mask)
{
    spec.validate();
    if (spec.semantic != expected) throw ConfigError("loss spec has the wrong semantic term for this call");
    if (spec.seg == SegLoss::DiceCE && !mask.dense())
        throw ConfigError("Dice+CE requires dense annotations; use seg=ce for sparse masks");
}

inline LossResult compound_wass(const LossSpec& spec, const Matrix& logits, const SparseMask& mask)
{
    check_compound(spec, SemanticLoss::Wasserstein, mask);
    return combine(spec.alpha, wasserstein_crisp(spec.distances, logits, mask), spec.beta, seg_loss(spec.seg, logits, mask));
}

inline LossResult compound_twce(const LossSpec& spec, const Matrix& logits, const SparseMask& mask)
{
    check_compound(spec, SemanticLoss::TreeCE, mask);
    LossResult sem = tree_weighted_ce(spec.tree, logits, mask);
    if (spec.seg == SegLoss::None) {
        for (double& g : sem.grad.data()) g *= spec.alpha;
        sem.value *= spec.alpha;
        return sem;
    }
    return combine(spec.alpha, sem, spec.beta, seg_loss(spec.seg, logits, mask));
}

inline LossResult compound_loss(const LossSpec& spec, const Matrix& logits, const SparseMask& mask)
{
    return spec.semantic == SemanticLoss::Wasserstein ? compound_wass(spec, logits, mask) : compound_twce(spec, logits, mask);
}

} // namespace treeloss

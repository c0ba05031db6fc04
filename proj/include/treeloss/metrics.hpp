#pragma once

// Hierarchical evaluation on integer label maps.
//
// Label conventions: class codes are 0..m-1. In predictions a negative code
// means background. In truth a negative code means "outside the evaluation
// domain" (unannotated), so sparse evaluation is restricted to annotated
// pixels by construction.

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "label_tree.hpp"
#include "matrix.hpp"
#include "ood_gate.hpp"

namespace treeloss {

// Maps leaf-coded labels to band indices at `level`. Negative codes pass through.
inline std::vector<Label> map_to_level(const LabelTree& tree, std::span<const Label> leaf_labels, int level)
{
    const std::vector<NodeId> band = tree.level_nodes(level);
    std::vector<Label> leaf_to_band(tree.leaf_count());
    for (std::size_t k = 0; k < band.size(); ++k)
        for (NodeId l = tree.first_leaf(band[k]); l < tree.last_leaf(band[k]); ++l) leaf_to_band[static_cast<std::size_t>(l)] = static_cast<Label>(k);
    std::vector<Label> out(leaf_labels.size());
    for (std::size_t i = 0; i < leaf_labels.size(); ++i)
        out[i] = leaf_labels[i] < 0 ? leaf_labels[i] : leaf_to_band[static_cast<std::size_t>(leaf_labels[i])];
    return out;
}

inline std::size_t domain_size(std::span<const Label> truth)
{
    std::size_t n = 0;
    for (Label t : truth) n += t >= 0;
    return n;
}

// Per-class Dice 2|P∩G| / (|P| + |G|) over the evaluation domain. Classes
// absent from both prediction and truth are reported as nullopt.
inline std::vector<std::optional<double>> dice(std::span<const Label> pred, std::span<const Label> truth, std::size_t classes)
{
    if (pred.size() != truth.size()) throw ShapeError("prediction and truth differ in size");
    if (domain_size(truth) == 0) throw EmptyEvalError("evaluation domain is empty");
    std::vector<std::size_t> inter(classes, 0), psize(classes, 0), gsize(classes, 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0) continue;
        ++gsize[static_cast<std::size_t>(truth[i])];
        if (pred[i] >= 0) {
            ++psize[static_cast<std::size_t>(pred[i])];
            if (pred[i] == truth[i]) ++inter[static_cast<std::size_t>(truth[i])];
        }
    }
    std::vector<std::optional<double>> out(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        if (psize[k] + gsize[k] == 0) continue;
        out[k] = 2.0 * static_cast<double>(inter[k]) / static_cast<double>(psize[k] + gsize[k]);
    }
    return out;
}

inline std::optional<double> mean_of(const std::vector<std::optional<double>>& v)
{
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& x : v) {
        if (!x) continue;
        s += *x;
        ++n;
    }
    if (n == 0) return std::nullopt;
    return s / static_cast<double>(n);
}

// Grid extent; 2D fields use depth = 1.
struct GridShape {
    std::size_t depth = 1;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t size() const noexcept { return depth * height * width; }
};

namespace detail {

// Exact 1D squared Euclidean distance transform of sampled function f with
// sample spacing^2 = a (lower envelope of parabolas).
inline void edt_1d(std::span<double> f, double a, std::vector<double>& d, std::vector<std::size_t>& v, std::vector<double>& z)
{
    const std::size_t n = f.size();
    constexpr double inf = std::numeric_limits<double>::infinity();
    d.resize(n);
    v.resize(n);
    z.resize(n + 1);
    std::size_t first = 0;
    while (first < n && f[first] == inf) ++first;
    if (first == n) return; // no sites on this line
    std::size_t k = 0;
    v[0] = first;
    z[0] = -inf;
    z[1] = inf;
    for (std::size_t q = first + 1; q < n; ++q) {
        if (f[q] == inf) continue;
        const auto qd = static_cast<double>(q);
        for (;;) {
            const auto p = static_cast<double>(v[k]);
            const double s = ((f[q] + a * qd * qd) - (f[v[k]] + a * p * p)) / (2.0 * a * (qd - p));
            if (s <= z[k]) {
                if (k == 0) {
                    v[0] = q;
                    z[1] = inf;
                    break;
                }
                --k;
                continue;
            }
            ++k;
            v[k] = q;
            z[k] = s;
            z[k + 1] = inf;
            break;
        }
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double dq = static_cast<double>(q) - static_cast<double>(v[k]);
        d[q] = a * dq * dq + f[v[k]];
    }
    std::copy(d.begin(), d.end(), f.begin());
}

} // namespace detail

// Squared Euclidean distance from every voxel to the nearest site (sites[i] != 0).
inline std::vector<double> squared_distance_transform(const std::vector<char>& sites, GridShape shape,
                                                      std::array<double, 3> spacing = {1.0, 1.0, 1.0})
{
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> f(shape.size());
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = sites[i] ? 0.0 : inf;
    const std::array<std::size_t, 3> dims{shape.depth, shape.height, shape.width};
    const std::array<std::size_t, 3> strides{shape.height * shape.width, shape.width, 1};
    std::vector<double> line, d, z;
    std::vector<std::size_t> v;
    for (std::size_t axis = 0; axis < 3; ++axis) {
        if (dims[axis] <= 1) continue;
        const double a = spacing[axis] * spacing[axis];
        line.resize(dims[axis]);
        for (std::size_t base = 0; base < f.size(); ++base) {
            // `base` must be the first element of a line along `axis`.
            if ((base / strides[axis]) % dims[axis] != 0) continue;
            for (std::size_t t = 0; t < dims[axis]; ++t) line[t] = f[base + t * strides[axis]];
            detail::edt_1d(line, a, d, v, z);
            for (std::size_t t = 0; t < dims[axis]; ++t) f[base + t * strides[axis]] = line[t];
        }
    }
    return f;
}

// Boundary voxels of {labels == cls}: members with a face neighbour outside
// the class. Neighbours beyond the grid edge are ignored.
inline std::vector<char> class_boundary(std::span<const Label> labels, GridShape shape, Label cls)
{
    std::vector<char> b(shape.size(), 0);
    const auto at = [&](std::size_t z, std::size_t y, std::size_t x) { return labels[(z * shape.height + y) * shape.width + x]; };
    for (std::size_t z = 0; z < shape.depth; ++z)
        for (std::size_t y = 0; y < shape.height; ++y)
            for (std::size_t x = 0; x < shape.width; ++x) {
                if (at(z, y, x) != cls) continue;
                bool edge = false;
                if (x > 0 && at(z, y, x - 1) != cls) edge = true;
                if (x + 1 < shape.width && at(z, y, x + 1) != cls) edge = true;
                if (y > 0 && at(z, y - 1, x) != cls) edge = true;
                if (y + 1 < shape.height && at(z, y + 1, x) != cls) edge = true;
                if (z > 0 && at(z - 1, y, x) != cls) edge = true;
                if (z + 1 < shape.depth && at(z + 1, y, x) != cls) edge = true;
                b[(z * shape.height + y) * shape.width + x] = edge;
            }
    return b;
}

// Normalised surface Dice per class on dense label fields:
// (|S_P within tol of S_G| + |S_G within tol of S_P|) / (|S_P| + |S_G|).
// Classes with both surfaces empty are nullopt.
inline std::vector<std::optional<double>> nsd(std::span<const Label> pred, std::span<const Label> truth, GridShape shape,
                                              std::size_t classes, double tolerance,
                                              std::array<double, 3> spacing = {1.0, 1.0, 1.0})
{
    if (pred.size() != shape.size() || truth.size() != shape.size()) throw ShapeError("label fields do not match grid shape");
    if (!(tolerance >= 0.0)) throw RangeError("NSD tolerance must be >= 0");
    const double tol2 = tolerance * tolerance;
    std::vector<std::optional<double>> out(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        const auto cls = static_cast<Label>(k);
        const std::vector<char> sp = class_boundary(pred, shape, cls);
        const std::vector<char> sg = class_boundary(truth, shape, cls);
        std::size_t np = 0, ng = 0;
        for (std::size_t i = 0; i < sp.size(); ++i) {
            np += sp[i] != 0;
            ng += sg[i] != 0;
        }
        if (np + ng == 0) continue;
        std::size_t close = 0;
        if (np > 0 && ng > 0) {
            const std::vector<double> to_g = squared_distance_transform(sg, shape, spacing);
            const std::vector<double> to_p = squared_distance_transform(sp, shape, spacing);
            for (std::size_t i = 0; i < sp.size(); ++i) {
                if (sp[i] && to_g[i] <= tol2) ++close;
                if (sg[i] && to_p[i] <= tol2) ++close;
            }
        }
        out[k] = static_cast<double>(close) / static_cast<double>(np + ng);
    }
    return out;
}

struct ClassOvr {
    bool present = false;
    double tpr = 0.0;
    double tnr = 0.0;
    double bacc = 0.0;
    double f1 = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct OvrReport {
    std::vector<ClassOvr> per_class;
    double mean_tpr = 0.0;
    double mean_bacc = 0.0;
    double mean_f1 = 0.0;
    std::size_t present = 0;
};

// One-vs-rest TPR / BACC / F1 per class; means over classes with positives.
// When a class has no negatives in the domain, TNR is undefined and BACC = TPR.
inline OvrReport ovr_metrics(std::span<const Label> pred, std::span<const Label> truth, std::size_t classes)
{
    if (pred.size() != truth.size()) throw ShapeError("prediction and truth differ in size");
    if (domain_size(truth) == 0) throw EmptyEvalError("evaluation domain is empty");
    const OvrCounts c = count_ovr(pred, truth, classes);
    OvrReport r;
    r.per_class.resize(classes);
    for (std::size_t k = 0; k < classes; ++k) {
        ClassOvr& o = r.per_class[k];
        o.tp = c.tp[k];
        o.fp = c.fp[k];
        o.fn = c.fn[k];
        o.tn = c.tn[k];
        const std::size_t positives = o.tp + o.fn;
        if (positives == 0) continue;
        o.present = true;
        o.tpr = static_cast<double>(o.tp) / static_cast<double>(positives);
        const std::size_t negatives = o.tn + o.fp;
        o.tnr = negatives == 0 ? o.tpr : static_cast<double>(o.tn) / static_cast<double>(negatives);
        o.bacc = 0.5 * (o.tpr + o.tnr);
        o.f1 = 2.0 * static_cast<double>(o.tp) / static_cast<double>(2 * o.tp + o.fp + o.fn);
    }
    const TauPoint means = ovr_means(c);
    r.mean_tpr = means.tpr;
    r.mean_bacc = means.bacc;
    r.mean_f1 = means.f1;
    for (const auto& o : r.per_class) r.present += o.present;
    return r;
}

// Per-fold count matrices over level classes plus a fold-averaged matrix of
// row-normalized rows. With background enabled, the last column counts
// pixels predicted as background.
struct ConfusionTensor {
    std::size_t classes = 0;
    bool background = false;
    std::vector<Matrix> fold_counts;
    Matrix averaged;
    std::vector<std::size_t> row_folds; // folds contributing to each averaged row
};

struct FoldLabels {
    std::vector<Label> pred;
    std::vector<Label> truth;
};

inline ConfusionTensor confusion(const std::vector<FoldLabels>& folds, std::size_t classes, bool background)
{
    ConfusionTensor t;
    t.classes = classes;
    t.background = background;
    const std::size_t cols = classes + (background ? 1 : 0);
    t.averaged = Matrix(classes, cols);
    t.row_folds.assign(classes, 0);
    for (const FoldLabels& f : folds) {
        if (f.pred.size() != f.truth.size()) throw ShapeError("prediction and truth differ in size");
        Matrix counts(classes, cols);
        for (std::size_t i = 0; i < f.truth.size(); ++i) {
            if (f.truth[i] < 0) continue;
            std::size_t col;
            if (f.pred[i] >= 0) col = static_cast<std::size_t>(f.pred[i]);
            else if (background) col = classes;
            else throw LabelError("background prediction in a confusion matrix without a background column");
            counts(static_cast<std::size_t>(f.truth[i]), col) += 1.0;
        }
        for (std::size_t r = 0; r < classes; ++r) {
            double s = 0.0;
            for (double v : counts.row(r)) s += v;
            if (s == 0.0) continue;
            ++t.row_folds[r];
            for (std::size_t c = 0; c < cols; ++c) t.averaged(r, c) += counts(r, c) / s;
        }
        t.fold_counts.push_back(std::move(counts));
    }
    for (std::size_t r = 0; r < classes; ++r) {
        if (t.row_folds[r] == 0) continue;
        for (double& v : t.averaged.row(r)) v /= static_cast<double>(t.row_folds[r]);
    }
    return t;
}

struct HardClassReport {
    double threshold = 0.7;
    std::vector<std::size_t> classes;
    // One entry per input report: mean of its values over the subset.
    std::vector<std::optional<double>> subset_means;
    std::string note;
};

// Selects classes whose baseline score falls below `threshold` and averages
// every report over that subset.
inline HardClassReport hard_class_report(const std::vector<std::optional<double>>& baseline,
                                         const std::vector<std::vector<std::optional<double>>>& reports,
                                         double threshold = 0.7)
{
    HardClassReport h;
    h.threshold = threshold;
    for (std::size_t k = 0; k < baseline.size(); ++k)
        if (baseline[k] && *baseline[k] < threshold) h.classes.push_back(k);
    if (h.classes.empty()) h.note = "no class falls below the threshold";
    for (const auto& rep : reports) {
        std::vector<std::optional<double>> sub;
        for (std::size_t k : h.classes) sub.push_back(k < rep.size() ? rep[k] : std::nullopt);
        h.subset_means.push_back(mean_of(sub));
    }
    return h;
}

inline nlohmann::json optional_list_json(const std::vector<std::optional<double>>& v)
{
    nlohmann::json j = nlohmann::json::array();
    for (const auto& x : v) j.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
    return j;
}

} // namespace treeloss

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "errors.hpp"
#include "label_tree.hpp"
#include "matrix.hpp"

namespace treeloss {

// M[l, l'] = sum of edge weights on the unique path between leaves l and l'.
// Each entry is summed along its own path (no shared prefix sums), so the
// result does not depend on evaluation order.
inline DistanceMatrix distance_matrix(const LabelTree& tree)
{
    const std::size_t c = tree.leaf_count();
    DistanceMatrix m(c, c);
    for (std::size_t a = 0; a < c; ++a) {
        for (std::size_t b = a + 1; b < c; ++b) {
            auto u = static_cast<NodeId>(a);
            auto v = static_cast<NodeId>(b);
            double up = 0.0;
            double down = 0.0;
            while (tree.depth(u) > tree.depth(v)) { up += tree.edge_weight(u); u = tree.parent(u); }
            while (tree.depth(v) > tree.depth(u)) { down += tree.edge_weight(v); v = tree.parent(v); }
            while (u != v) {
                up += tree.edge_weight(u);
                down += tree.edge_weight(v);
                u = tree.parent(u);
                v = tree.parent(v);
            }
            m(a, b) = m(b, a) = up + down;
        }
    }
    return m;
}

inline void check_distribution(std::span<const double> p, const char* what)
{
    double s = 0.0;
    for (double x : p) {
        if (!(x >= 0.0) || !std::isfinite(x)) throw NormalizationError(std::string(what) + " has a negative or non-finite entry");
        s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) throw NormalizationError(std::string(what) + " does not sum to 1");
}

struct TransportSolution {
    double cost = 0.0;
    Matrix plan;
};

// Exact optimal transport between p and q under ground distances m.
//
// Successive shortest paths on the bipartite transport network: each round
// finds a cheapest residual path (Bellman-Ford, since reverse arcs carry
// negative cost) from a source with leftover supply to a sink with leftover
// demand and pushes the bottleneck amount along it. Every intermediate flow is
// cost-optimal for its value, so the final flow solves the LP exactly.
// Intended for validation at label-space scale (C <= 64).
inline TransportSolution solve_transport_lp(const DistanceMatrix& m, std::span<const double> p, std::span<const double> q)
{
    const std::size_t c = p.size();
    if (q.size() != c || m.rows() != c || m.cols() != c) throw ShapeError("transport problem dimensions disagree");
    check_distribution(p, "source distribution");
    check_distribution(q, "target distribution");

    constexpr double kMassEps = 1e-15;
    constexpr double kInf = std::numeric_limits<double>::infinity();
    std::vector<double> supply(p.begin(), p.end());
    std::vector<double> demand(q.begin(), q.end());
    Matrix flow(c, c);

    // Node layout: sources 0..c-1, sinks c..2c-1.
    const std::size_t n = 2 * c;
    std::vector<double> dist(n);
    std::vector<std::size_t> pred(n);
    std::vector<std::size_t> origin(n);
    constexpr std::size_t kNone = static_cast<std::size_t>(-1);

    double scale = 0.0;
    for (double v : m.data()) scale = std::max(scale, std::abs(v));
    // Relaxations must improve by more than rounding noise, otherwise ulp-level
    // negative cycles among equal-cost paths leave a cyclic predecessor chain.
    const double tol = 1e-12 * (1.0 + scale);

    const std::size_t max_rounds = 64 * c * c + 64;
    for (std::size_t round = 0; round < max_rounds; ++round) {
        std::fill(dist.begin(), dist.end(), kInf);
        std::fill(pred.begin(), pred.end(), kNone);
        bool any_supply = false;
        for (std::size_t i = 0; i < c; ++i) {
            if (supply[i] > kMassEps) {
                dist[i] = 0.0;
                origin[i] = i;
                any_supply = true;
            }
        }
        if (!any_supply) break;

        for (std::size_t iter = 0; iter < n; ++iter) {
            bool changed = false;
            for (std::size_t i = 0; i < c; ++i) {
                if (dist[i] == kInf) continue;
                for (std::size_t j = 0; j < c; ++j) {
                    const double d = dist[i] + m(i, j);
                    if (d < dist[c + j] - tol) {
                        dist[c + j] = d;
                        pred[c + j] = i;
                        origin[c + j] = origin[i];
                        changed = true;
                    }
                }
            }
            for (std::size_t j = 0; j < c; ++j) {
                if (dist[c + j] == kInf) continue;
                for (std::size_t i = 0; i < c; ++i) {
                    if (flow(i, j) <= kMassEps) continue;
                    const double d = dist[c + j] - m(i, j);
                    if (d < dist[i] - tol) {
                        dist[i] = d;
                        pred[i] = c + j;
                        origin[i] = origin[c + j];
                        changed = true;
                    }
                }
            }
            if (!changed) break;
        }

        std::size_t sink = kNone;
        for (std::size_t j = 0; j < c; ++j) {
            if (demand[j] > kMassEps && dist[c + j] < kInf && (sink == kNone || dist[c + j] < dist[c + sink])) sink = j;
        }
        if (sink == kNone) break;

        double amount = std::min(demand[sink], supply[origin[c + sink]]);
        for (std::size_t v = c + sink; pred[v] != kNone; v = pred[v]) {
            if (v < c) amount = std::min(amount, flow(v, pred[v] - c));
        }
        for (std::size_t v = c + sink; pred[v] != kNone; v = pred[v]) {
            if (v >= c) flow(pred[v], v - c) += amount;
            else flow(v, pred[v] - c) -= amount;
        }
        supply[origin[c + sink]] -= amount;
        demand[sink] -= amount;
    }

    TransportSolution out;
    out.plan = std::move(flow);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) out.cost += out.plan(i, j) * m(i, j);
    return out;
}

// Wasserstein distance under the tree metric: sum over edges of the edge
// weight times the absolute difference of subtree masses.
inline double tree_wasserstein(const LabelTree& tree, std::span<const double> p, std::span<const double> q)
{
    if (p.size() != tree.leaf_count() || q.size() != tree.leaf_count())
        throw ShapeError("distribution size does not match leaf count");
    check_distribution(p, "source distribution");
    check_distribution(q, "target distribution");
    std::vector<double> diff(tree.node_count(), 0.0);
    for (std::size_t l = 0; l < tree.leaf_count(); ++l) diff[l] = p[l] - q[l];
    double w = 0.0;
    for (std::size_t v = 0; v + 1 < tree.node_count(); ++v) {
        const auto id = static_cast<NodeId>(v);
        if (id == tree.root()) continue;
        w += tree.edge_weight(id) * std::abs(diff[v]);
        diff[static_cast<std::size_t>(tree.parent(id))] += diff[v];
    }
    return w;
}

} // namespace treeloss

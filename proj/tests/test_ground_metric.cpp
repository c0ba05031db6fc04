#include <gtest/gtest.h>

#include "oracles.hpp"
#include "treeloss/ground_metric.hpp"

using namespace treeloss;

namespace {

LabelTree two_leaves() { return parse_tree(R"({"name":"r","children":[{"name":"a"},{"name":"b"}]})"); }

const std::vector<EdgeWeightScheme> kSchemes{EdgeWeightScheme::top_only(), EdgeWeightScheme::leaf_only(), EdgeWeightScheme::equal(),
                                             EdgeWeightScheme::hierarchical(10.0)};

} // namespace

TEST(DistanceMatrix, TwoLeavesEqualWeights)
{
    const DistanceMatrix m = distance_matrix(assign_weights(two_leaves(), EdgeWeightScheme::equal()));
    EXPECT_EQ(m(0, 0), 0.0);
    EXPECT_EQ(m(0, 1), 2.0);
    EXPECT_EQ(m(1, 0), 2.0);
    EXPECT_EQ(m(1, 1), 0.0);
}

TEST(DistanceMatrix, HierarchicalKappa10OnBalancedTree)
{
    const LabelTree t = assign_weights(make_balanced_tree({2, 2}), EdgeWeightScheme::hierarchical(10.0));
    const DistanceMatrix m = distance_matrix(t);
    // Hand path sums: siblings 1 + 1; cousins 1 + 10 + 10 + 1.
    EXPECT_DOUBLE_EQ(m(0, 1), 2.0);
    EXPECT_DOUBLE_EQ(m(2, 3), 2.0);
    EXPECT_DOUBLE_EQ(m(0, 2), 22.0);
    EXPECT_DOUBLE_EQ(m(1, 3), 22.0);
}

TEST(DistanceMatrix, LeafOnlyGivesTwoEverywhere)
{
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto rng = oracle::rng_for(seed);
        const DistanceMatrix m = distance_matrix(assign_weights(oracle::random_tree(rng, 25), EdgeWeightScheme::leaf_only()));
        for (std::size_t a = 0; a < m.rows(); ++a)
            for (std::size_t b = 0; b < m.cols(); ++b) EXPECT_EQ(m(a, b), a == b ? 0.0 : 2.0);
    }
}

TEST(DistanceMatrix, MatchesGraphShortestPaths)
{
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        auto rng = oracle::rng_for(seed);
        const LabelTree t = oracle::random_tree(rng, 30);
        const DistanceMatrix m = distance_matrix(t);
        const Matrix g = oracle::graph_distances(t);
        for (std::size_t i = 0; i < m.data().size(); ++i) EXPECT_NEAR(m.data()[i], g.data()[i], 1e-12);
    }
}

TEST(DistanceMatrix, TreeMetricAxiomsAndFourPointCondition)
{
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto rng = oracle::rng_for(seed);
        const DistanceMatrix m = distance_matrix(oracle::random_tree(rng, 30));
        const std::size_t c = m.rows();
        std::uniform_int_distribution<std::size_t> pick(0, c - 1);
        for (std::size_t a = 0; a < c; ++a) {
            EXPECT_EQ(m(a, a), 0.0);
            for (std::size_t b = 0; b < c; ++b) EXPECT_EQ(m(a, b), m(b, a));
        }
        for (int s = 0; s < 1000; ++s) {
            const std::size_t x = pick(rng), y = pick(rng), z = pick(rng), w = pick(rng);
            EXPECT_LE(m(x, z), m(x, y) + m(y, z) + 1e-12);
            const double s1 = m(x, y) + m(z, w), s2 = m(x, z) + m(y, w), s3 = m(x, w) + m(y, z);
            // The two largest of the three pair sums are equal.
            std::array<double, 3> v{s1, s2, s3};
            std::sort(v.begin(), v.end());
            EXPECT_NEAR(v[1], v[2], 1e-9);
        }
    }
}

TEST(DistanceMatrix, ScalingWeightsScalesDistances)
{
    auto rng = oracle::rng_for(3);
    const LabelTree t = oracle::random_tree(rng, 20);
    std::vector<double> w = t.edge_weights();
    for (double& x : w) x *= 4.0; // power of two keeps the comparison exact
    const DistanceMatrix a = distance_matrix(t);
    const DistanceMatrix b = distance_matrix(t.with_weights(w));
    for (std::size_t i = 0; i < a.data().size(); ++i) EXPECT_EQ(b.data()[i], 4.0 * a.data()[i]);
}

TEST(TransportLp, IdenticalMarginalsCostZeroDiagonalPlan)
{
    auto rng = oracle::rng_for(11);
    const LabelTree t = oracle::random_tree_with_leaves(rng, 6);
    const auto p = oracle::random_simplex(rng, 6);
    const TransportSolution s = solve_transport_lp(distance_matrix(t), p, p);
    EXPECT_NEAR(s.cost, 0.0, 1e-15);
    for (std::size_t a = 0; a < 6; ++a)
        for (std::size_t b = 0; b < 6; ++b) EXPECT_NEAR(s.plan(a, b), a == b ? p[a] : 0.0, 1e-15);
}

TEST(TransportLp, AllMassMoves)
{
    const DistanceMatrix m = distance_matrix(assign_weights(two_leaves(), EdgeWeightScheme::equal()));
    const std::vector<double> p{1.0, 0.0}, q{0.0, 1.0};
    const TransportSolution s = solve_transport_lp(m, p, q);
    EXPECT_DOUBLE_EQ(s.cost, 2.0);
    EXPECT_DOUBLE_EQ(s.plan(0, 1), 1.0);
}

TEST(TransportLp, CrispTargetMatchesClosedForm)
{
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto rng = oracle::rng_for(seed);
        const LabelTree t = oracle::random_tree_with_leaves(rng, 6);
        const DistanceMatrix m = distance_matrix(t);
        const auto p = oracle::random_simplex(rng, 6);
        const std::size_t y = seed % 6;
        std::vector<double> g(6, 0.0);
        g[y] = 1.0;
        double closed = 0.0;
        for (std::size_t l = 0; l < 6; ++l) closed += m(l, y) * p[l];
        EXPECT_NEAR(solve_transport_lp(m, p, g).cost, closed, 1e-12);
    }
}

TEST(TransportLp, MatchesIndependentSimplexAndMarginals)
{
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        auto rng = oracle::rng_for(seed);
        const std::size_t c = 2 + seed % 9;
        const LabelTree t = oracle::random_tree_with_leaves(rng, c);
        const DistanceMatrix m = distance_matrix(t);
        const auto p = oracle::random_simplex(rng, c, 0.2);
        const auto q = oracle::random_simplex(rng, c, 0.2);
        const TransportSolution s = solve_transport_lp(m, p, q);
        EXPECT_NEAR(s.cost, oracle::transport_simplex(m, p, q), 1e-10) << "seed " << seed;
        double plan_cost = 0.0;
        for (std::size_t a = 0; a < c; ++a) {
            double row = 0.0, col = 0.0;
            for (std::size_t b = 0; b < c; ++b) {
                EXPECT_GE(s.plan(a, b), 0.0);
                row += s.plan(a, b);
                col += s.plan(b, a);
                plan_cost += s.plan(a, b) * m(a, b);
            }
            EXPECT_NEAR(row, p[a], 1e-9);
            EXPECT_NEAR(col, q[a], 1e-9);
        }
        EXPECT_NEAR(plan_cost, s.cost, 1e-12);
    }
}

TEST(TransportLp, NonNormalizedInputIsNormalizationError)
{
    const DistanceMatrix m = distance_matrix(assign_weights(two_leaves(), EdgeWeightScheme::equal()));
    const std::vector<double> ok{0.5, 0.5};
    EXPECT_THROW(solve_transport_lp(m, std::vector<double>{0.5, 0.6}, ok), NormalizationError);
    EXPECT_THROW(solve_transport_lp(m, ok, std::vector<double>{1.2, -0.2}), NormalizationError);
    EXPECT_THROW(tree_wasserstein(two_leaves(), std::vector<double>{0.3, 0.3}, ok), NormalizationError);
    // Within 1e-9 is accepted.
    EXPECT_NO_THROW(solve_transport_lp(m, std::vector<double>{0.5 + 4e-10, 0.5}, ok));
}

TEST(TreeWasserstein, Examples)
{
    const LabelTree t = assign_weights(parse_tree(R"({"name":"r","children":[
      {"name":"A","children":[{"name":"a1"},{"name":"a2"}]},{"name":"b"}]})"),
                                       EdgeWeightScheme::equal());
    const std::vector<double> u{1.0 / 3, 1.0 / 3, 1.0 / 3};
    EXPECT_NEAR(tree_wasserstein(t, u, u), 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(tree_wasserstein(t, std::vector<double>{1, 0, 0}, std::vector<double>{0, 1, 0}), 2.0);
}

TEST(TreeWasserstein, MatchesLpOnRandomTenLeafTrees)
{
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        auto rng = oracle::rng_for(1000 + seed);
        const LabelTree t = oracle::random_tree_with_leaves(rng, 10);
        const auto p = oracle::random_simplex(rng, 10, 0.3);
        const auto q = oracle::random_simplex(rng, 10, 0.3);
        EXPECT_NEAR(tree_wasserstein(t, p, q), solve_transport_lp(distance_matrix(t), p, q).cost, 1e-9);
        EXPECT_NEAR(tree_wasserstein(t, p, q), oracle::transport_simplex(distance_matrix(t), p, q), 1e-9);
    }
}

TEST(TreeWasserstein, MetricProperties)
{
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        auto rng = oracle::rng_for(seed);
        const LabelTree t = oracle::random_tree(rng, 25);
        const std::size_t c = t.leaf_count();
        const auto p = oracle::random_simplex(rng, c), q = oracle::random_simplex(rng, c), r = oracle::random_simplex(rng, c);
        EXPECT_NEAR(tree_wasserstein(t, p, q), tree_wasserstein(t, q, p), 1e-12);
        EXPECT_NEAR(tree_wasserstein(t, p, p), 0.0, 1e-12);
        EXPECT_LE(tree_wasserstein(t, p, r), tree_wasserstein(t, p, q) + tree_wasserstein(t, q, r) + 1e-12);
        std::vector<double> w = t.edge_weights();
        for (double& x : w) x *= 8.0;
        EXPECT_NEAR(tree_wasserstein(t.with_weights(w), p, q), 8.0 * tree_wasserstein(t, p, q), 1e-9);
    }
}

TEST(TransportLp, EverySchemeAgreesWithClosedForm)
{
    for (const auto& scheme : kSchemes) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            auto rng = oracle::rng_for(seed);
            const LabelTree t = assign_weights(oracle::random_tree_with_leaves(rng, 2 + seed % 11), scheme);
            const DistanceMatrix m = distance_matrix(t);
            const std::size_t c = t.leaf_count();
            const auto p = oracle::random_simplex(rng, c);
            const std::size_t y = seed % c;
            std::vector<double> g(c, 0.0);
            g[y] = 1.0;
            double closed = 0.0;
            for (std::size_t l = 0; l < c; ++l) closed += p[l] * m(l, y);
            EXPECT_NEAR(solve_transport_lp(m, p, g).cost, closed, 1e-9);
        }
    }
}

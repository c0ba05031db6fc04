#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "treeloss/corpus_io.hpp"
#include "treeloss/ground_metric.hpp"
#include "treeloss/rng.hpp"
#include "treeloss/synth_bench.hpp"

using namespace treeloss;
namespace fs = std::filesystem;

namespace {

SynthConfig small_config(std::uint64_t seed)
{
    SynthConfig c;
    c.subjects = 4;
    c.height = 12;
    c.width = 10;
    c.channels = 6;
    c.regions = 24;
    c.seed = seed;
    return c;
}

LabelTree tree_for(std::uint64_t seed)
{
    auto rng = substream(seed, "tree");
    return make_random_tree(20, 3, rng);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b)
{
    const double n = double(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

fs::path scratch_dir(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("treeloss_synth_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

} // namespace

TEST(Generate, FullDensityMaskEqualsTruth)
{
    const LabelTree t = tree_for(1);
    const Corpus c = generate(t, small_config(1));
    ASSERT_EQ(c.subjects.size(), 4u);
    for (const Subject& s : c.subjects) EXPECT_EQ(s.mask.labels(), s.truth);
}

TEST(Generate, InvalidConfigsAreConfigErrors)
{
    const LabelTree t = tree_for(1);
    SynthConfig c = small_config(1);
    c.rho = 0.0;
    EXPECT_THROW(generate(t, c), ConfigError);
    c = small_config(1);
    c.regions = 5;
    EXPECT_THROW(generate(t, c), ConfigError);
    c = small_config(1);
    c.sigma_within = 0.0;
    EXPECT_THROW(generate(t, c), ConfigError);
    c = small_config(1);
    c.held_out = {"no-such-leaf"};
    EXPECT_THROW(generate(t, c), ConfigError);
    EXPECT_THROW(SynthConfig::from_json(nlohmann::json::parse(R"({"chanels":4})")), ConfigError);
}

TEST(Generate, SparseMaskIsSubsetOfTruthAndDropsHeldOut)
{
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const LabelTree t = tree_for(seed);
        SynthConfig cfg = small_config(seed);
        cfg.rho = 0.3;
        cfg.held_out = {t.node(0).name, t.node(3).name};
        const Corpus c = generate(t, cfg);
        for (const Subject& s : c.subjects) {
            std::size_t annotated = 0;
            for (std::size_t i = 0; i < s.pixels(); ++i) {
                ASSERT_GE(s.truth[i], 0);
                ASSERT_LT(std::size_t(s.truth[i]), t.leaf_count());
                if (!s.mask.annotated(i)) continue;
                ++annotated;
                EXPECT_EQ(s.mask[i], s.truth[i]);
                EXPECT_NE(s.mask[i], 0);
                EXPECT_NE(s.mask[i], 3);
            }
            EXPECT_GT(annotated, 0u);
            EXPECT_LT(annotated, s.pixels());
        }
    }
}

TEST(Generate, EveryClassAppearsInEverySubject)
{
    const LabelTree t = tree_for(2);
    const Corpus c = generate(t, small_config(2));
    for (const Subject& s : c.subjects) {
        std::vector<char> seen(t.leaf_count(), 0);
        for (Label y : s.truth) seen[std::size_t(y)] = 1;
        // Tiny images may lose a Voronoi cell to its neighbours; most classes survive.
        EXPECT_GE(std::count(seen.begin(), seen.end(), 1), 15);
    }
}

TEST(Generate, DeterministicAndIndependentOfJobs)
{
    const LabelTree t = tree_for(3);
    SynthConfig cfg = small_config(3);
    cfg.rho = 0.5;
    const Corpus a = generate(t, cfg, 1);
    const Corpus b = generate(t, cfg, 1);
    const Corpus c = generate(t, cfg, 3);
    for (std::size_t s = 0; s < a.subjects.size(); ++s) {
        EXPECT_EQ(a.subjects[s].features.data(), b.subjects[s].features.data());
        EXPECT_EQ(a.subjects[s].features.data(), c.subjects[s].features.data());
        EXPECT_EQ(a.subjects[s].truth, c.subjects[s].truth);
        EXPECT_EQ(a.subjects[s].mask, c.subjects[s].mask);
    }
    cfg.seed = 4;
    EXPECT_NE(generate(t, cfg).subjects[0].features.data(), a.subjects[0].features.data());
}

TEST(Generate, MeanDistanceCorrelatesWithTreeDistance)
{
    double total = 0.0;
    const int seeds = 20;
    for (int seed = 0; seed < seeds; ++seed) {
        const LabelTree t = tree_for(std::uint64_t(seed));
        const SynthConfig cfg = [&] {
            SynthConfig c;
            c.seed = std::uint64_t(seed);
            return c;
        }();
        const DistanceMatrix d = distance_matrix(assign_weights(t, EdgeWeightScheme::equal()));
        const Matrix means = node_means(t, cfg);
        std::vector<double> td, fd;
        for (std::size_t a = 0; a < t.leaf_count(); ++a)
            for (std::size_t b = a + 1; b < t.leaf_count(); ++b) {
                double s = 0.0;
                for (std::size_t ch = 0; ch < cfg.channels; ++ch) s += (means(a, ch) - means(b, ch)) * (means(a, ch) - means(b, ch));
                td.push_back(d(a, b));
                fd.push_back(std::sqrt(s));
            }
        total += pearson(td, fd);
    }
    EXPECT_GT(total / seeds, 0.5);
}

TEST(L1Normalize, HandAndProperties)
{
    Matrix m(3, 2);
    m(0, 0) = 2.0;
    m(0, 1) = 2.0;
    m(1, 0) = 0.25;
    m(1, 1) = 0.75;
    const Matrix n = l1_normalize(m);
    EXPECT_EQ(n(0, 0), 0.5);
    EXPECT_EQ(n(0, 1), 0.5);
    EXPECT_EQ(n(1, 0), 0.25);
    EXPECT_EQ(n(1, 1), 0.75);
    EXPECT_EQ(n(2, 0), 0.0);
    EXPECT_EQ(n(2, 1), 0.0);

    auto rng = oracle::rng_for(8);
    std::uniform_real_distribution<double> u(0.0, 5.0);
    Matrix r(50, 7);
    for (double& v : r.data()) v = u(rng);
    const Matrix once = l1_normalize(r);
    for (std::size_t i = 0; i < once.rows(); ++i) {
        double s = 0.0;
        for (double v : once.row(i)) s += std::abs(v);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    const Matrix twice = l1_normalize(once);
    for (std::size_t k = 0; k < once.data().size(); ++k) EXPECT_NEAR(twice.data()[k], once.data()[k], 1e-15);
}

TEST(MakeFolds, TwoByTwoOverFourSubjects)
{
    const auto folds = make_folds(4, 6, 2, 2, 11);
    ASSERT_EQ(folds.size(), 4u);
    for (const FoldSpec& f : folds) {
        EXPECT_EQ(f.val_subjects.size(), 2u);
        EXPECT_EQ(f.train_subjects.size(), 2u);
        for (std::size_t s : f.val_subjects)
            EXPECT_EQ(std::count(f.train_subjects.begin(), f.train_subjects.end(), s), 0);
        EXPECT_EQ(f.held_out.size(), 3u);
    }
    // Validation subjects are disjoint across subject folds and cover everyone.
    std::vector<std::size_t> all(folds[0].val_subjects);
    all.insert(all.end(), folds[2].val_subjects.begin(), folds[2].val_subjects.end());
    std::sort(all.begin(), all.end());
    EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3}));
    // Held-out groups partition the leaves.
    std::vector<Label> held(folds[0].held_out);
    held.insert(held.end(), folds[1].held_out.begin(), folds[1].held_out.end());
    std::sort(held.begin(), held.end());
    EXPECT_EQ(held, (std::vector<Label>{0, 1, 2, 3, 4, 5}));
    EXPECT_EQ(folds[0].held_out, folds[2].held_out);
}

TEST(MakeFolds, SingleLabelFoldIsPlainKFold)
{
    const auto folds = make_folds(10, 5, 5, 1, 0);
    ASSERT_EQ(folds.size(), 5u);
    for (const FoldSpec& f : folds) {
        EXPECT_TRUE(f.held_out.empty());
        EXPECT_EQ(f.val_subjects.size(), 2u);
        EXPECT_EQ(f.train_subjects.size(), 8u);
    }
    EXPECT_THROW(make_folds(1, 5, 1, 1, 0), ConfigError);
    EXPECT_THROW(make_folds(3, 5, 4, 1, 0), ConfigError);
    EXPECT_THROW(make_folds(4, 3, 2, 4, 0), ConfigError);
}

TEST(MakeFolds, HeldOutLabelsNeverReachTrainingMasks)
{
    const LabelTree t = tree_for(5);
    SynthConfig cfg = small_config(5);
    cfg.rho = 0.4;
    const Corpus c = generate(t, cfg);
    for (const FoldSpec& f : make_folds(c.subjects.size(), t.leaf_count(), 2, 3, 5)) {
        for (std::size_t s : f.train_subjects) {
            const SparseMask m = fold_mask(c.subjects[s].mask, f.held_out);
            for (std::size_t i = 0; i < m.size(); ++i)
                if (m.annotated(i)) EXPECT_EQ(std::count(f.held_out.begin(), f.held_out.end(), m[i]), 0);
        }
    }
}

TEST(CorpusIo, RoundTrip)
{
    const fs::path dir = scratch_dir("roundtrip");
    const LabelTree t = tree_for(6);
    SynthConfig cfg = small_config(6);
    cfg.rho = 0.5;
    const Corpus c = generate(t, cfg);
    io::write_corpus(dir, c, cfg);
    const Corpus r = io::read_corpus(dir);
    EXPECT_EQ(serialize_tree(r.tree), serialize_tree(t));
    ASSERT_EQ(r.subjects.size(), c.subjects.size());
    for (std::size_t s = 0; s < c.subjects.size(); ++s) {
        EXPECT_EQ(r.subjects[s].features.data(), c.subjects[s].features.data());
        EXPECT_EQ(r.subjects[s].truth, c.subjects[s].truth);
        EXPECT_EQ(r.subjects[s].mask, c.subjects[s].mask);
    }
    const auto folds = make_folds(4, t.leaf_count(), 2, 2, 6);
    io::write_folds(dir / "folds.json", folds);
    const auto back = io::read_folds(dir / "folds.json");
    ASSERT_EQ(back.size(), folds.size());
    for (std::size_t k = 0; k < folds.size(); ++k) EXPECT_EQ(back[k].to_json(), folds[k].to_json());
    fs::remove_all(dir);
}

TEST(CorpusIo, MissingFileIsIoError)
{
    EXPECT_THROW(io::read_corpus("/nonexistent/treeloss/corpus"), IoError);
}

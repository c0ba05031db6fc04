#pragma once

// Desk-scale per-pixel classifier trained on annotated pixels only.
//
// Model: standardized features -> (optional tanh hidden layer) -> C logits.
// Objective: any LossSpec, evaluated per mini-batch of whole images.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "corpus_io.hpp"
#include "json_keys.hpp"
#include "errors.hpp"
#include "matrix.hpp"
#include "rng.hpp"
#include "semantic_losses.hpp"
#include "synth_bench.hpp"

namespace treeloss {

enum class ModelKind : std::uint32_t { Linear = 0, Mlp = 1 };
enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
    ModelKind model = ModelKind::Linear;
    std::size_t hidden = 32;
    double learning_rate = 1e-3;
    double gamma = 0.999; // per-epoch learning-rate decay
    std::size_t batch_images = 5;
    std::size_t epochs = 50;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double momentum = 0.9;
    bool augment = false; // random horizontal / vertical flips
    std::uint64_t seed = 0;

    void validate() const
    {
        if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
        if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("learning-rate decay gamma must lie in (0, 1]");
        if (batch_images == 0) throw ConfigError("batch size must be positive");
        if (model == ModelKind::Mlp && hidden == 0) throw ConfigError("mlp needs a positive hidden width");
    }

    static TrainConfig from_json(const nlohmann::json& j)
    {
        check_keys(j, {"model", "hidden", "learning_rate", "gamma", "batch_images", "epochs", "optimizer", "beta1", "beta2",
                       "momentum", "augment", "seed"},
                   "train");
        TrainConfig c;
        const std::string model = j.value("model", std::string("linear"));
        if (model == "linear") c.model = ModelKind::Linear;
        else if (model == "mlp") c.model = ModelKind::Mlp;
        else throw ConfigError("unknown model '" + model + "' (expected linear|mlp)");
        c.hidden = j.value("hidden", c.hidden);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.gamma = j.value("gamma", c.gamma);
        c.batch_images = j.value("batch_images", c.batch_images);
        c.epochs = j.value("epochs", c.epochs);
        const std::string opt = j.value("optimizer", std::string("adam"));
        if (opt == "adam") c.optimizer = OptimizerKind::Adam;
        else if (opt == "sgd") c.optimizer = OptimizerKind::Sgd;
        else throw ConfigError("unknown optimizer '" + opt + "' (expected adam|sgd)");
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.momentum = j.value("momentum", c.momentum);
        c.augment = j.value("augment", c.augment);
        c.seed = j.value("seed", c.seed);
        c.validate();
        return c;
    }

    nlohmann::json to_json() const
    {
        return {{"model", model == ModelKind::Linear ? "linear" : "mlp"},
                {"hidden", hidden},
                {"learning_rate", learning_rate},
                {"gamma", gamma},
                {"batch_images", batch_images},
                {"epochs", epochs},
                {"optimizer", optimizer == OptimizerKind::Adam ? "adam" : "sgd"},
                {"beta1", beta1},
                {"beta2", beta2},
                {"momentum", momentum},
                {"augment", augment},
                {"seed", seed}};
    }
};

// Parameter layout in `values`:
//   linear: W (d x C), b (C)
//   mlp:    W1 (d x h), b1 (h), W2 (h x C), b2 (C)
// Features are standardized with `offset` / `scale` before the first layer.
struct ModelParams {
    ModelKind kind = ModelKind::Linear;
    std::size_t channels = 0;
    std::size_t classes = 0;
    std::size_t hidden = 0;
    std::vector<double> offset;
    std::vector<double> scale;
    std::vector<double> values;

    static std::size_t count(ModelKind kind, std::size_t d, std::size_t c, std::size_t h)
    {
        return kind == ModelKind::Linear ? d * c + c : d * h + h + h * c + c;
    }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

struct ImageRef {
    const Matrix* features = nullptr;
    SparseMask mask;
    std::size_t height = 0;
    std::size_t width = 0;
};

struct ForwardCache {
    Matrix input;  // standardized features
    Matrix hidden; // tanh activations (mlp only)
    Matrix logits;
};

inline ForwardCache forward(const ModelParams& m, const Matrix& features)
{
    if (features.cols() != m.channels)
        throw ShapeError("feature image has " + std::to_string(features.cols()) + " channels, model expects " + std::to_string(m.channels));
    ForwardCache f;
    const std::size_t n = features.rows();
    const std::size_t d = m.channels;
    const std::size_t c = m.classes;
    f.input = Matrix(n, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k) f.input(i, k) = (features(i, k) - m.offset[k]) * m.scale[k];

    auto dense = [](const Matrix& x, const double* w, const double* b, std::size_t in, std::size_t out) {
        Matrix y(x.rows(), out);
        for (std::size_t i = 0; i < x.rows(); ++i) {
            auto yr = y.row(i);
            for (std::size_t o = 0; o < out; ++o) yr[o] = b[o];
            for (std::size_t k = 0; k < in; ++k) {
                const double xv = x(i, k);
                const double* wr = w + k * out;
                for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wr[o];
            }
        }
        return y;
    };

    const double* p = m.values.data();
    if (m.kind == ModelKind::Linear) {
        f.logits = dense(f.input, p, p + d * c, d, c);
    } else {
        const std::size_t h = m.hidden;
        f.hidden = dense(f.input, p, p + d * h, d, h);
        for (double& v : f.hidden.data()) v = std::tanh(v);
        const double* p2 = p + d * h + h;
        f.logits = dense(f.hidden, p2, p2 + h * c, h, c);
    }
    return f;
}

// d(loss)/d(params) given d(loss)/d(logits).
inline std::vector<double> backward(const ModelParams& m, const ForwardCache& f, const GradField& dlogits)
{
    std::vector<double> g(m.values.size(), 0.0);
    const std::size_t d = m.channels;
    const std::size_t c = m.classes;
    auto accumulate = [](const Matrix& x, const Matrix& dy, double* gw, double* gb) {
        for (std::size_t i = 0; i < x.rows(); ++i) {
            const auto dyr = dy.row(i);
            for (std::size_t o = 0; o < dy.cols(); ++o) gb[o] += dyr[o];
            for (std::size_t k = 0; k < x.cols(); ++k) {
                const double xv = x(i, k);
                double* gr = gw + k * dy.cols();
                for (std::size_t o = 0; o < dy.cols(); ++o) gr[o] += xv * dyr[o];
            }
        }
    };
    if (m.kind == ModelKind::Linear) {
        accumulate(f.input, dlogits, g.data(), g.data() + d * c);
        return g;
    }
    const std::size_t h = m.hidden;
    const double* w2 = m.values.data() + d * h + h;
    double* g2 = g.data() + d * h + h;
    accumulate(f.hidden, dlogits, g2, g2 + h * c);
    Matrix dpre(f.hidden.rows(), h);
    for (std::size_t i = 0; i < f.hidden.rows(); ++i) {
        for (std::size_t k = 0; k < h; ++k) {
            double s = 0.0;
            for (std::size_t o = 0; o < c; ++o) s += dlogits(i, o) * w2[k * c + o];
            const double a = f.hidden(i, k);
            dpre(i, k) = s * (1.0 - a * a);
        }
    }
    accumulate(f.input, dpre, g.data(), g.data() + d * h);
    return g;
}

inline ModelParams init_model(const TrainConfig& cfg, std::size_t channels, std::size_t classes, std::span<const double> offset,
                              std::span<const double> scale)
{
    ModelParams m;
    m.kind = cfg.model;
    m.channels = channels;
    m.classes = classes;
    m.hidden = cfg.model == ModelKind::Mlp ? cfg.hidden : 0;
    m.offset.assign(offset.begin(), offset.end());
    m.scale.assign(scale.begin(), scale.end());
    m.values.assign(ModelParams::count(m.kind, channels, classes, m.hidden), 0.0);
    auto rng = substream(cfg.seed, "init");
    std::normal_distribution<double> gauss(0.0, 1.0);
    auto fill = [&](std::size_t from, std::size_t in, std::size_t out) {
        const double sd = std::sqrt(2.0 / static_cast<double>(in + out));
        for (std::size_t k = 0; k < in * out; ++k) m.values[from + k] = sd * gauss(rng);
    };
    if (m.kind == ModelKind::Linear) {
        fill(0, channels, classes);
    } else {
        fill(0, channels, m.hidden);
        fill(channels * m.hidden + m.hidden, m.hidden, classes);
    }
    return m;
}

inline LeafField predict(const ModelParams& m, const Matrix& features) { return softmax(forward(m, features).logits); }

// Annotated pixels of a set of images, gathered in image then pixel order.
struct Batch {
    Matrix features;
    SparseMask mask;
};

inline std::vector<std::size_t> flip_order(std::size_t h, std::size_t w, bool flip_y, bool flip_x)
{
    std::vector<std::size_t> order(h * w);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) order[y * w + x] = (flip_y ? h - 1 - y : y) * w + (flip_x ? w - 1 - x : x);
    return order;
}

inline Batch gather(const std::vector<ImageRef>& images, std::span<const std::size_t> which,
                    const std::vector<std::vector<std::size_t>>* orders = nullptr)
{
    std::size_t n = 0;
    std::size_t d = 0;
    for (std::size_t idx : which) {
        n += images[idx].mask.annotated_count();
        d = images[idx].features->cols();
    }
    Batch b{Matrix(n, d), SparseMask()};
    std::vector<Label> labels;
    labels.reserve(n);
    std::size_t row = 0;
    for (std::size_t t = 0; t < which.size(); ++t) {
        const ImageRef& im = images[which[t]];
        const std::size_t pixels = im.mask.size();
        for (std::size_t q = 0; q < pixels; ++q) {
            const std::size_t i = orders ? (*orders)[t][q] : q;
            if (!im.mask.annotated(i)) continue;
            const auto src = im.features->row(i);
            std::copy(src.begin(), src.end(), b.features.row(row).begin());
            labels.push_back(im.mask[i]);
            ++row;
        }
    }
    b.mask = SparseMask(std::move(labels));
    return b;
}

struct ParamGradient {
    double loss = 0.0;
    std::vector<double> grad;
};

inline ParamGradient parameter_gradient(const ModelParams& m, const Batch& batch, const LossSpec& spec)
{
    const ForwardCache f = forward(m, batch.features);
    const LossResult r = compound_loss(spec, f.logits, batch.mask);
    return {r.value, backward(m, f, r.grad)};
}

struct TrainResult {
    ModelParams model;
    std::vector<double> loss_trace; // mean batch loss per epoch
};

// Per-channel standardization fitted on annotated training pixels.
inline void fit_standardization(const std::vector<ImageRef>& images, std::size_t d, std::vector<double>& offset, std::vector<double>& scale)
{
    offset.assign(d, 0.0);
    scale.assign(d, 1.0);
    std::vector<double> sq(d, 0.0);
    double n = 0.0;
    for (const auto& im : images) {
        for (std::size_t i = 0; i < im.mask.size(); ++i) {
            if (!im.mask.annotated(i)) continue;
            n += 1.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double v = (*im.features)(i, k);
                offset[k] += v;
                sq[k] += v * v;
            }
        }
    }
    if (n == 0.0) return;
    for (std::size_t k = 0; k < d; ++k) {
        offset[k] /= n;
        const double var = sq[k] / n - offset[k] * offset[k];
        scale[k] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
    }
}

inline TrainResult train(const std::vector<ImageRef>& images, const LossSpec& spec, const TrainConfig& cfg)
{
    cfg.validate();
    spec.validate();
    if (images.empty()) throw ConfigError("no training images");
    const std::size_t d = images.front().features->cols();
    const std::size_t c = spec.tree.leaf_count();
    std::size_t annotated = 0;
    for (const auto& im : images) {
        if (im.features->cols() != d) throw ShapeError("training images differ in channel count");
        if (im.mask.size() != im.features->rows()) throw ShapeError("mask does not match feature image");
        check_mask_labels(im.mask, c);
        annotated += im.mask.annotated_count();
        if (spec.seg == SegLoss::DiceCE && !im.mask.dense())
            throw ConfigError("Dice+CE requires dense annotations; use seg=ce for sparse masks");
    }
    if (annotated == 0) throw EmptyMaskError("training fold has no annotated pixels");

    std::vector<double> offset, scale;
    fit_standardization(images, d, offset, scale);
    TrainResult result;
    result.model = init_model(cfg, d, c, offset, scale);
    ModelParams& m = result.model;

    const std::size_t np = m.values.size();
    std::vector<double> m1(np, 0.0), m2(np, 0.0), vel(np, 0.0);
    std::size_t step = 0;
    std::vector<std::size_t> order(images.size());

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto batch_rng = substream(cfg.seed, "batches", epoch);
        std::shuffle(order.begin(), order.end(), batch_rng);
        auto aug_rng = substream(cfg.seed, "augment", epoch);
        const double lr = cfg.learning_rate * std::pow(cfg.gamma, static_cast<double>(epoch));

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_images) {
            const std::size_t stop = std::min(order.size(), start + cfg.batch_images);
            std::span<const std::size_t> which(order.data() + start, stop - start);
            std::vector<std::vector<std::size_t>> flips;
            if (cfg.augment) {
                for (std::size_t idx : which) {
                    const bool fy = (aug_rng() & 1U) != 0;
                    const bool fx = (aug_rng() & 1U) != 0;
                    flips.push_back(flip_order(images[idx].height, images[idx].width, fy, fx));
                }
            }
            const Batch batch = gather(images, which, cfg.augment ? &flips : nullptr);
            if (batch.mask.size() == 0) continue;
            const ParamGradient pg = parameter_gradient(m, batch, spec);
            if (!std::isfinite(pg.loss)) throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));
            epoch_loss += pg.loss;
            ++batches;
            ++step;
            if (cfg.optimizer == OptimizerKind::Adam) {
                const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
                const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
                for (std::size_t k = 0; k < np; ++k) {
                    m1[k] = cfg.beta1 * m1[k] + (1.0 - cfg.beta1) * pg.grad[k];
                    m2[k] = cfg.beta2 * m2[k] + (1.0 - cfg.beta2) * pg.grad[k] * pg.grad[k];
                    m.values[k] -= lr * (m1[k] / c1) / (std::sqrt(m2[k] / c2) + cfg.adam_eps);
                }
            } else {
                for (std::size_t k = 0; k < np; ++k) {
                    vel[k] = cfg.momentum * vel[k] + pg.grad[k];
                    m.values[k] -= lr * vel[k];
                }
            }
        }
        const double mean = batches ? epoch_loss / static_cast<double>(batches) : 0.0;
        if (!std::isfinite(mean)) throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch));
        result.loss_trace.push_back(mean);
    }
    for (double v : m.values)
        if (!std::isfinite(v)) throw DivergenceError("non-finite parameters after training");
    return result;
}

// Full-data objective over all annotated pixels of `images`.
inline double objective(const ModelParams& m, const std::vector<ImageRef>& images, const LossSpec& spec)
{
    std::vector<std::size_t> all(images.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const Batch b = gather(images, all);
    return compound_loss(spec, forward(m, b.features).logits, b.mask).value;
}

// Model file: magic "TLMODEL1", then u32 kind, d, C, hidden, and
// little-endian float64 offset[d], scale[d], params[...].
inline std::string encode_model(const ModelParams& m)
{
    std::string out = "TLMODEL1";
    io::detail::put_le(out, static_cast<std::uint32_t>(m.kind));
    io::detail::put_le(out, static_cast<std::uint32_t>(m.channels));
    io::detail::put_le(out, static_cast<std::uint32_t>(m.classes));
    io::detail::put_le(out, static_cast<std::uint32_t>(m.hidden));
    for (const auto* v : {&m.offset, &m.scale, &m.values})
        for (double x : *v) io::detail::put_le(out, std::bit_cast<std::uint64_t>(x));
    return out;
}

inline ModelParams decode_model(const std::string& blob)
{
    if (blob.size() < 24 || blob.compare(0, 8, "TLMODEL1") != 0) throw IoError("not a model file");
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());
    ModelParams m;
    const auto kind = io::detail::get_le<std::uint32_t>(p + 8);
    if (kind > 1) throw IoError("unknown model kind in model file");
    m.kind = static_cast<ModelKind>(kind);
    m.channels = io::detail::get_le<std::uint32_t>(p + 12);
    m.classes = io::detail::get_le<std::uint32_t>(p + 16);
    m.hidden = io::detail::get_le<std::uint32_t>(p + 20);
    const std::size_t np = ModelParams::count(m.kind, m.channels, m.classes, m.hidden);
    const std::size_t expect = 24 + 8 * (2 * m.channels + np);
    if (blob.size() != expect) throw IoError("model file size does not match its header");
    std::size_t at = 24;
    auto take = [&](std::vector<double>& v, std::size_t n) {
        v.resize(n);
        for (std::size_t k = 0; k < n; ++k, at += 8) v[k] = std::bit_cast<double>(io::detail::get_le<std::uint64_t>(p + at));
    };
    take(m.offset, m.channels);
    take(m.scale, m.channels);
    take(m.values, np);
    return m;
}

} // namespace treeloss

#pragma once

// Finite-difference gradient suite in double precision.
//
// For every op a random scalar loss L = <r, f(inputs)> is formed; each
// analytic gradient entry g is compared against the central difference
// n = (L(x + h) - L(x - h)) / 2h via |g - n| / max(|g|, |n|, 1e-3).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcf/clip.hpp"
#include "dcf/encoder.hpp"
#include "dcf/eval.hpp"
#include "dcf/layers/activation.hpp"
#include "dcf/layers/conv.hpp"
#include "dcf/layers/decomposed.hpp"
#include "dcf/layers/linear.hpp"
#include "dcf/layers/norm.hpp"
#include "dcf/layers/pool.hpp"

namespace dcf::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kFloor = 1e-3;
inline constexpr double kLayerTol = 1e-6;
inline constexpr double kComposedTol = 1e-5;
inline constexpr std::size_t kMaxEntries = 48;  // per tensor

using TensorD = Tensor<double>;
using Loss = std::function<double()>;

struct OpResult {
    std::string op;
    double max_rel_err = 0;
    double tolerance = kLayerTol;
    std::size_t entries = 0;
    bool passed() const { return max_rel_err < tolerance; }
};

struct Options {
    std::uint64_t seed = 0;
    std::string fault_op;  // corrupt this op's analytic gradient (negative control)
};

class Checker {
public:
    Checker(std::string op, double tol, const Options& opt)
        : rng_(derive_seed(opt.seed, fnv1a64(op))), corrupt_(opt.fault_op == op) {
        res_.op = std::move(op);
        res_.tolerance = tol;
    }

    Rng& rng() { return rng_; }

    /// Compares `analytic` with central differences of `loss` wrt `x`.
    void check(TensorD& x, TensorD analytic, const Loss& loss) {
        if (corrupt_) analytic[0] += 0.01 * (std::fabs(analytic[0]) + 1.0);
        std::vector<std::size_t> idx(x.numel());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (idx.size() > kMaxEntries) {
            for (std::size_t i = 0; i < kMaxEntries; ++i) std::swap(idx[i], idx[i + rng_.below(idx.size() - i)]);
            idx.resize(kMaxEntries);
            idx.push_back(0);  // always include the first entry
        }
        for (std::size_t i : idx) {
            const double orig = x[i];
            x[i] = orig + kStep;
            const double lp = loss();
            x[i] = orig - kStep;
            const double lm = loss();
            x[i] = orig;
            const double num = (lp - lm) / (2 * kStep);
            const double denom = std::max({std::fabs(analytic[i]), std::fabs(num), kFloor});
            res_.max_rel_err = std::max(res_.max_rel_err, std::fabs(analytic[i] - num) / denom);
            ++res_.entries;
        }
    }

    void check_params(const ParamList<double>& params, const Loss& loss) {
        for (const auto& p : params) {
            if (!p.is_buffer()) check(*p.value, *p.grad, loss);
        }
    }

    OpResult result() const { return res_; }

private:
    Rng rng_;
    bool corrupt_;
    OpResult res_;
};

inline double dot(const TensorD& r, const TensorD& y) {
    double acc = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += r[i] * y[i];
    return acc;
}

// --- individual ops ----------------------------------------------------------

inline OpResult axis_conv(const Options& o) {
    Checker c("axis_conv", kLayerTol, o);
    for (Axis axis : kBranchAxes) {
        for (std::size_t stride : {1u, 2u}) {
            for (bool dense : {false, true}) {
                TensorD x = TensorD::randn({2, 2, 5, 4, 5}, c.rng());
                TensorD w = dense ? TensorD::randn({3, 2, 3}, c.rng()) : TensorD::randn({2, 3}, c.rng());
                TensorD b = TensorD::randn({dense ? 3u : 2u}, c.rng());
                const ConvSpec spec{3, stride, axis};
                AxisConvCache<double> cache;
                const TensorD y = dwconv1d_axis_forward(x, w, &b, spec, cache);
                const TensorD r = TensorD::randn(y.shape(), c.rng());
                const auto g = dwconv1d_axis_backward(r, cache);
                const Loss loss = [&] { return dot(r, dwconv1d_axis_forward(x, w, &b, spec)); };
                c.check(x, g.grad_x, loss);
                c.check(w, g.grad_weight, loss);
                c.check(b, g.grad_bias, loss);
            }
        }
    }
    return c.result();
}

inline OpResult decomposed(const std::string& name, BranchMixing mixing, const Options& o) {
    Checker c(name, kLayerTol, o);
    for (std::size_t stride : {1u, 2u}) {
        DecompConvOptions opt{2, mixing == BranchMixing::Dense ? 3u : 2u, 3, stride, mixing, true, true};
        DecomposedConv3d<double> conv(opt);
        conv.init(c.rng());
        TensorD x = TensorD::randn({2, 2, 4, 5, 4}, c.rng());
        const TensorD y = conv.forward(x, NormMode::Train, true);
        const TensorD r = TensorD::randn(y.shape(), c.rng());
        ParamList<double> params;
        conv.collect("", params);
        zero_grads(params);
        const TensorD gx = conv.backward(r);
        const Loss loss = [&] { return dot(r, conv.forward(x, NormMode::Train, false)); };
        c.check(x, gx, loss);
        c.check_params(params, loss);
    }
    return c.result();
}

inline OpResult dense_conv(const Options& o) {
    Checker c("dense_conv", kLayerTol, o);
    for (std::size_t k : {1u, 3u}) {
        DenseConv3d<double> conv(2, 3, k, k == 1 ? 1 : 2);
        conv.init(c.rng(), 0.5);
        conv.bias().value = TensorD::randn({3}, c.rng());
        TensorD x = TensorD::randn({2, 2, 4, 5, 3}, c.rng());
        const TensorD y = conv.forward(x, true);
        const TensorD r = TensorD::randn(y.shape(), c.rng());
        ParamList<double> params;
        conv.collect("", params);
        zero_grads(params);
        const TensorD gx = conv.backward(r);
        const Loss loss = [&] { return dot(r, conv.forward(x, false)); };
        c.check(x, gx, loss);
        c.check_params(params, loss);
    }
    return c.result();
}

inline OpResult batchnorm(const Options& o) {
    Checker c("batchnorm", kLayerTol, o);
    for (NormMode mode : {NormMode::Train, NormMode::Eval}) {
        BatchNorm3d<double> bn(3);
        ParamList<double> params;
        bn.collect("", params);
        for (auto& p : params) *p.value = TensorD::uniform(p.value->shape(), c.rng(), 0.5, 1.5);
        TensorD x = TensorD::randn({2, 3, 3, 2, 3}, c.rng());
        const TensorD y = bn.forward(x, mode, true);
        const TensorD r = TensorD::randn(y.shape(), c.rng());
        zero_grads(params);
        const TensorD gx = bn.backward(r);
        // Running statistics are restored after each probe so eval mode sees fixed values.
        std::vector<TensorD> saved;
        for (auto& p : params) saved.push_back(*p.value);
        const Loss loss = [&] {
            const double l = dot(r, bn.forward(x, mode, false));
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (params[i].is_buffer()) *params[i].value = saved[i];
            }
            return l;
        };
        c.check(x, gx, loss);
        c.check_params(params, loss);
    }
    return c.result();
}

inline OpResult gelu(const Options& o) {
    Checker c("gelu", kLayerTol, o);
    Gelu<double> act;
    TensorD x = TensorD::randn({4, 3, 2, 2, 2}, c.rng(), 2.0);
    const TensorD r = TensorD::randn(x.shape(), c.rng());
    act.forward(x, true);
    const TensorD gx = act.backward(r);
    c.check(x, gx, [&] { return dot(r, act.forward(x, false)); });
    return c.result();
}

inline OpResult maxpool(const Options& o) {
    Checker c("maxpool", kLayerTol, o);
    MaxPool3d<double> pool(3, 2, 1);
    // Distinct, well separated values keep every argmax stable under +-h.
    TensorD x({2, 2, 5, 4, 5});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = 0.01 * static_cast<double>(i);
    for (std::size_t i = x.numel(); i > 1; --i) std::swap(x[i - 1], x[c.rng().below(i)]);
    const TensorD y = pool.forward(x, true);
    const TensorD r = TensorD::randn(y.shape(), c.rng());
    const TensorD gx = pool.backward(r);
    c.check(x, gx, [&] { return dot(r, pool.forward(x, false)); });
    return c.result();
}

inline OpResult global_avg_pool(const Options& o) {
    Checker c("global_avg_pool", kLayerTol, o);
    TensorD x = TensorD::randn({2, 3, 3, 2, 4}, c.rng());
    const TensorD r = TensorD::randn({2, 3}, c.rng());
    const TensorD gx = global_avg_pool_backward(r, x.shape());
    c.check(x, gx, [&] { return dot(r, dcf::global_avg_pool(x)); });
    return c.result();
}

inline OpResult linear(const Options& o) {
    Checker c("linear", kLayerTol, o);
    Linear<double> lin(5, 4);
    lin.init(c.rng(), 0.5);
    lin.bias().value = TensorD::randn({4}, c.rng());
    TensorD x = TensorD::randn({3, 5}, c.rng());
    const TensorD r = TensorD::randn({3, 4}, c.rng());
    ParamList<double> params;
    lin.collect("", params);
    zero_grads(params);
    lin.forward(x, true);
    const TensorD gx = lin.backward(r);
    const Loss loss = [&] { return dot(r, lin.forward(x, false)); };
    c.check(x, gx, loss);
    c.check_params(params, loss);
    return c.result();
}

inline OpResult channel_mlp(const Options& o) {
    Checker c("channel_mlp", kLayerTol, o);
    ChannelMlp<double> mlp(3, 2);
    mlp.init(c.rng(), 0.5);
    TensorD x = TensorD::randn({2, 3, 3, 2, 3}, c.rng());
    const TensorD y = mlp.forward(x, NormMode::Train, true);
    const TensorD r = TensorD::randn(y.shape(), c.rng());
    ParamList<double> params;
    mlp.collect("", params);
    zero_grads(params);
    const TensorD gx = mlp.backward(r);
    const Loss loss = [&] { return dot(r, mlp.forward(x, NormMode::Train, false)); };
    c.check(x, gx, loss);
    c.check_params(params, loss);
    return c.result();
}

inline OpResult downsample(const Options& o) {
    Checker c("downsample", kLayerTol, o);
    Downsample<double> down(2, 3);
    down.init(c.rng());
    down.proj().weight().value = TensorD::randn(down.proj().weight().value.shape(), c.rng());
    TensorD x({2, 2, 4, 5, 4});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = 0.01 * static_cast<double>(i);
    for (std::size_t i = x.numel(); i > 1; --i) std::swap(x[i - 1], x[c.rng().below(i)]);
    const TensorD y = down.forward(x, true);
    const TensorD r = TensorD::randn(y.shape(), c.rng());
    ParamList<double> params;
    down.collect("", params);
    zero_grads(params);
    const TensorD gx = down.backward(r);
    const Loss loss = [&] { return dot(r, down.forward(x, false)); };
    c.check(x, gx, loss);
    c.check_params(params, loss);
    return c.result();
}

inline OpResult dcformer_block(const Options& o) {
    Checker c("dcformer_block", kComposedTol, o);
    DCFormerBlock<double> block(3, 3, 2);
    block.init(c.rng());
    ParamList<double> params;
    block.collect("", params);
    for (auto& p : params) {
        if (!p.is_buffer() && p.path.find("bn") == std::string::npos) {
            *p.value = TensorD::randn(p.value->shape(), c.rng(), 0.5);
        }
    }
    TensorD x = TensorD::randn({2, 3, 4, 3, 4}, c.rng());
    const TensorD y = block.forward(x, NormMode::Train, true);
    const TensorD r = TensorD::randn(y.shape(), c.rng());
    zero_grads(params);
    const TensorD gx = block.backward(r);
    const Loss loss = [&] { return dot(r, block.forward(x, NormMode::Train, false)); };
    c.check(x, gx, loss);
    c.check_params(params, loss);
    return c.result();
}

inline OpResult l2_normalize(const Options& o) {
    Checker c("l2_normalize", kLayerTol, o);
    TensorD x = TensorD::randn({4, 6}, c.rng());
    const TensorD r = TensorD::randn({4, 6}, c.rng());
    const TensorD gx = l2_normalize_rows_backward(x, r);
    c.check(x, gx, [&] { return dot(r, l2_normalize_rows(x)); });
    return c.result();
}

inline OpResult projection(const std::string& name, std::size_t in, const Options& o) {
    Checker c(name, kLayerTol, o);
    ProjectionHead<double> head(in, 8);
    head.init(c.rng(), 0.5);
    head.linear().bias().value = TensorD::randn({8}, c.rng(), 0.3);
    TensorD x = TensorD::randn({3, in}, c.rng());
    const TensorD r = TensorD::randn({3, 8}, c.rng());
    ParamList<double> params;
    head.collect("", params);
    zero_grads(params);
    head.forward(x, true);
    const TensorD gx = head.backward(r);
    const Loss loss = [&] { return dot(r, head.forward(x, false)); };
    c.check(x, gx, loss);
    c.check_params(params, loss);
    return c.result();
}

inline OpResult clip(const Options& o) {
    Checker c("clip_loss", kLayerTol, o);
    for (double tau : {1.0, 0.1}) {
        TensorD zt = l2_normalize_rows(TensorD::randn({5, 6}, c.rng()));
        TensorD zv = l2_normalize_rows(TensorD::randn({5, 6}, c.rng()));
        const auto res = clip_loss(zt, zv, tau);
        const Loss loss = [&] { return static_cast<double>(clip_loss(zt, zv, tau).loss); };
        c.check(zt, res.grad_zt, loss);
        c.check(zv, res.grad_zv, loss);
    }
    return c.result();
}

inline OpResult bce(const Options& o) {
    Checker c("bce", kLayerTol, o);
    TensorD x = TensorD::randn({4, 3}, c.rng(), 2.0);
    TensorD y({4, 3});
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = static_cast<double>(c.rng().below(2));
    const TensorD g = bce_with_logits_backward(x, y);
    c.check(x, g, [&] { return bce_with_logits(x, y); });
    return c.result();
}

// --- suite -----------------------------------------------------------------

struct Entry {
    std::string name;
    std::function<OpResult(const Options&)> run;
};

inline const std::vector<Entry>& registry() {
    static const std::vector<Entry> r{
        {"axis_conv", axis_conv},
        {"decomposed_conv", [](const Options& o) { return decomposed("decomposed_conv", BranchMixing::Depthwise, o); }},
        {"decomposed_dense", [](const Options& o) { return decomposed("decomposed_dense", BranchMixing::Dense, o); }},
        {"dense_conv", dense_conv},
        {"batchnorm", batchnorm},
        {"gelu", gelu},
        {"maxpool", maxpool},
        {"global_avg_pool", global_avg_pool},
        {"linear", linear},
        {"channel_mlp", channel_mlp},
        {"downsample", downsample},
        {"dcformer_block", dcformer_block},
        {"l2_normalize", l2_normalize},
        {"image_projection", [](const Options& o) { return projection("image_projection", 6, o); }},
        {"text_projection", [](const Options& o) { return projection("text_projection", 16, o); }},
        {"clip_loss", clip},
        {"bce", bce},
    };
    return r;
}

inline std::vector<std::string> op_names() {
    std::vector<std::string> n;
    for (const auto& e : registry()) n.push_back(e.name);
    return n;
}

/// Runs one op by name (or all when `op` is empty).
inline std::vector<OpResult> run(const std::string& op, const Options& opt) {
    std::vector<OpResult> out;
    for (const auto& e : registry()) {
        if (op.empty() || e.name == op) out.push_back(e.run(opt));
    }
    if (out.empty()) throw std::invalid_argument("unknown gradcheck op '" + op + "'");
    return out;
}

inline nlohmann::json to_json(const std::vector<OpResult>& results) {
    nlohmann::json ops = nlohmann::json::array();
    bool all = true;
    for (const auto& r : results) {
        ops.push_back({{"op", r.op},
                       {"max_rel_err", r.max_rel_err},
                       {"tolerance", r.tolerance},
                       {"entries", r.entries},
                       {"passed", r.passed()}});
        all = all && r.passed();
    }
    return {{"step", kStep}, {"ops", ops}, {"passed", all}};
}

}  // namespace dcf::gradcheck

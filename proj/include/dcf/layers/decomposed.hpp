#pragma once

// Decomposed 3D convolution: three parallel 1D convolutions along H, W and D,
// each followed by its own normalization, fused by elementwise sum and an
// optional activation after the sum.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include "dcf/layers/activation.hpp"
#include "dcf/layers/conv.hpp"
#include "dcf/layers/norm.hpp"
#include "dcf/layers/param.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

inline constexpr std::array<Axis, 3> kBranchAxes{Axis::H, Axis::W, Axis::D};

/// Per-axis kernels of a decomposed convolution, each [C,k] (depthwise) or
/// [Cout,Cin,k] (dense).
template <typename T>
struct DecompWeights {
    Tensor<T> h;
    Tensor<T> w;
    Tensor<T> d;

    const Tensor<T>& operator[](std::size_t i) const { return i == 0 ? h : (i == 1 ? w : d); }
};

/// Un-normalized, activation-free decomposed convolution:
///   y = conv_h(x) + conv_w(x) + conv_d(x)
template <typename T>
Tensor<T> decomp_conv3d_forward(const Tensor<T>& x, const DecompWeights<T>& weights, std::size_t stride = 1) {
    const std::size_t k = weights.h.shape().back();
    if (weights.w.shape() != weights.h.shape() || weights.d.shape() != weights.h.shape()) {
        throw ShapeError("decomp_conv3d_forward: branch kernels differ: " + shape_str(weights.h.shape()) + ", " +
                         shape_str(weights.w.shape()) + ", " + shape_str(weights.d.shape()));
    }
    Tensor<T> y = dwconv1d_axis_forward(x, weights.h, nullptr, ConvSpec{k, stride, Axis::H});
    for (std::size_t i = 1; i < 3; ++i) {
        Tensor<T> branch = dwconv1d_axis_forward(x, weights[i], nullptr, ConvSpec{k, stride, kBranchAxes[i]});
        if (branch.shape() != y.shape()) {
            throw ShapeError("decomp_conv3d_forward: branch shapes disagree: " + shape_str(y.shape()) + " vs " +
                             shape_str(branch.shape()));
        }
        add_inplace(y, branch);
    }
    return y;
}

enum class BranchMixing {
    Depthwise,  // one k-vector per channel, Cin == Cout
    Dense,      // full Cin -> Cout mixing per branch
};

struct DecompConvOptions {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t kernel = 7;
    std::size_t stride = 1;
    BranchMixing mixing = BranchMixing::Depthwise;
    bool norm = true;
    bool activation = false;
};

/// Learnable decomposed convolution. Branches carry no bias; the per-branch
/// batch norm shift covers it.
template <typename T>
class DecomposedConv3d {
public:
    DecomposedConv3d() = default;
    explicit DecomposedConv3d(const DecompConvOptions& opt) : opt_(opt) {
        ConvSpec{opt.kernel, opt.stride, Axis::H}.validate();
        if (opt.mixing == BranchMixing::Depthwise && opt.in_channels != opt.out_channels) {
            throw std::invalid_argument("depthwise decomposed convolution must preserve channels");
        }
        for (std::size_t i = 0; i < 3; ++i) {
            branch_[i].weight.reset(Tensor<T>::zeros(weight_shape()));
            if (opt.norm) {
                branch_[i].norm = BatchNorm3d<T>(opt.out_channels);
            }
        }
    }

    /// Depthwise kernels ~ N(0, 1/k); dense kernels ~ N(0, 1/(k Cin)).
    void init(Rng& rng) {
        const double fan_in =
            static_cast<double>(opt_.kernel) * (opt_.mixing == BranchMixing::Dense ? opt_.in_channels : 1);
        for (auto& br : branch_) {
            br.weight.reset(Tensor<T>::randn(weight_shape(), rng, 1.0 / std::sqrt(fan_in)));
        }
    }

    Tensor<T> forward(const Tensor<T>& x, NormMode mode, bool keep_cache) {
        const VolumeDims in = volume_dims(x, "decomposed_conv3d");
        if (in.c != opt_.in_channels) {
            throw ShapeError("decomposed_conv3d: input " + shape_str(x.shape()) + " vs in_channels " +
                             std::to_string(opt_.in_channels));
        }
        Tensor<T> y;
        for (std::size_t i = 0; i < 3; ++i) {
            Branch& br = branch_[i];
            Tensor<T> z = dwconv1d_axis_forward(x, br.weight.value, nullptr, spec(i));
            if (br.norm) {
                z = br.norm->forward(z, mode, keep_cache);
            }
            if (i == 0) {
                y = std::move(z);
            } else {
                if (z.shape() != y.shape()) {
                    throw ShapeError("decomposed_conv3d: branch shapes disagree");
                }
                add_inplace(y, z);
            }
        }
        if (opt_.activation) {
            y = act_.forward(y, keep_cache);
        }
        if (keep_cache) {
            cache_ = x;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        if (!cache_) {
            throw StaleCacheError("decomposed_conv3d");
        }
        const Tensor<T> g = opt_.activation ? act_.backward(gy) : gy;
        Tensor<T> gx = zeros_like(*cache_);
        const VolumeDims in = volume_dims(*cache_, "decomposed_conv3d backward");
        for (std::size_t i = 0; i < 3; ++i) {
            Branch& br = branch_[i];
            const Tensor<T> gz = br.norm ? br.norm->backward(g) : g;
            const detail::ConvGeom geom = detail::axis_weight_geom(br.weight.value, in.c, spec(i), "decomposed_conv3d");
            detail::conv_backward(*cache_, br.weight.value.ptr(), gz, geom, &gx, br.weight.grad.ptr(),
                                  static_cast<T*>(nullptr));
        }
        cache_.reset();
        return gx;
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        for (std::size_t i = 0; i < 3; ++i) {
            const std::string p = join_path(prefix, axis_name(kBranchAxes[i]));
            branch_[i].weight.register_in(join_path(p, "weight"), out);
            if (branch_[i].norm) {
                branch_[i].norm->collect(join_path(p, "bn"), out);
            }
        }
    }

    Param<T>& weight(Axis a) { return branch_[index(a)].weight; }
    BatchNorm3d<T>* norm(Axis a) {
        auto& n = branch_[index(a)].norm;
        return n ? &*n : nullptr;
    }
    const DecompConvOptions& options() const { return opt_; }

    DecompWeights<T> weights() const { return {branch_[0].weight.value, branch_[1].weight.value, branch_[2].weight.value}; }

private:
    struct Branch {
        Param<T> weight;
        std::optional<BatchNorm3d<T>> norm;
    };

    static std::size_t index(Axis a) {
        switch (a) {
            case Axis::H: return 0;
            case Axis::W: return 1;
            case Axis::D: return 2;
            default: throw std::invalid_argument("decomposed_conv3d: no branch for axis 'all'");
        }
    }

    Shape weight_shape() const {
        if (opt_.mixing == BranchMixing::Depthwise) {
            return {opt_.out_channels, opt_.kernel};
        }
        return {opt_.out_channels, opt_.in_channels, opt_.kernel};
    }

    ConvSpec spec(std::size_t i) const { return {opt_.kernel, opt_.stride, kBranchAxes[i]}; }

    DecompConvOptions opt_;
    std::array<Branch, 3> branch_;
    Gelu<T> act_;
    std::optional<Tensor<T>> cache_;
};

}  // namespace dcf

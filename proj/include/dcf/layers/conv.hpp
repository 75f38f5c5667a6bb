#pragma once

// Convolutions over [B, C, H, W, D] volumes. Cross-correlation convention
// (no kernel flip). A scalar stride applies to all three spatial axes.

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "dcf/layers/param.hpp"
#include "dcf/parallel.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

enum class Axis { H, W, D, All };

inline const char* axis_name(Axis a) {
    switch (a) {
        case Axis::H: return "h";
        case Axis::W: return "w";
        case Axis::D: return "d";
        case Axis::All: return "all";
    }
    return "?";
}

/// Kernel size, stride and convolved axis. Padding is kernel/2 on the
/// convolved axis and 0 on singleton-kernel axes.
struct ConvSpec {
    std::size_t kernel = 3;
    std::size_t stride = 1;
    Axis axis = Axis::All;

    std::size_t pad() const noexcept { return kernel / 2; }

    void validate() const {
        if (kernel == 0 || kernel % 2 == 0) {
            throw std::invalid_argument("kernel size must be odd and positive, got " + std::to_string(kernel));
        }
        if (stride < 1) {
            throw std::invalid_argument("stride must be >= 1");
        }
    }
};

/// floor((x + 2p - k) / s) + 1
inline std::size_t conv_out_extent(std::size_t extent, std::size_t kernel, std::size_t pad, std::size_t stride) {
    if (extent + 2 * pad < kernel) {
        throw ShapeError("extent " + std::to_string(extent) + " too small for kernel " + std::to_string(kernel));
    }
    return (extent + 2 * pad - kernel) / stride + 1;
}

/// Spatial dims of a rank-5 volume.
struct VolumeDims {
    std::size_t b, c, h, w, d;

    std::size_t spatial() const noexcept { return h * w * d; }
    Shape shape() const { return {b, c, h, w, d}; }
};

template <typename T>
VolumeDims volume_dims(const Tensor<T>& x, const char* who) {
    if (x.rank() != 5) {
        throw ShapeError(std::string(who) + ": expected rank-5 [B,C,H,W,D] input, got " + shape_str(x.shape()));
    }
    const auto& s = x.shape();
    return {s[0], s[1], s[2], s[3], s[4]};
}

namespace detail {

/// Anisotropic grouped 3D convolution geometry. groups is 1 (dense) or
/// cin == cout (depthwise). Weight layout [cout, cin/groups, kh, kw, kd].
struct ConvGeom {
    std::size_t cin = 1, cout = 1, groups = 1;
    std::size_t kh = 1, kw = 1, kd = 1;
    std::size_t ph = 0, pw = 0, pd = 0;
    std::size_t stride = 1;

    std::size_t cin_per_group() const noexcept { return cin / groups; }
    std::size_t cout_per_group() const noexcept { return cout / groups; }
    std::size_t taps() const noexcept { return kh * kw * kd; }
    std::size_t weight_numel() const noexcept { return cout * cin_per_group() * taps(); }

    VolumeDims out_dims(const VolumeDims& in) const {
        return {in.b, cout, conv_out_extent(in.h, kh, ph, stride), conv_out_extent(in.w, kw, pw, stride),
                conv_out_extent(in.d, kd, pd, stride)};
    }
};

/// Index range [lo, hi) of outputs o with 0 <= o*s + shift < extent.
inline std::pair<std::size_t, std::size_t> valid_range(std::ptrdiff_t shift, std::size_t stride, std::size_t extent,
                                                       std::size_t out_extent) {
    const auto s = static_cast<std::ptrdiff_t>(stride);
    std::ptrdiff_t lo = 0;
    if (shift < 0) {
        lo = (-shift + s - 1) / s;
    }
    const std::ptrdiff_t last_in = static_cast<std::ptrdiff_t>(extent) - 1 - shift;
    if (last_in < 0) {
        return {0, 0};
    }
    std::ptrdiff_t hi = last_in / s + 1;
    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_extent));
    if (hi <= lo) {
        return {0, 0};
    }
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

/// Calls f(out_offset, in_offset, count, d_shift) for every contiguous
/// output run touched by tap (a, b, e). The output run covers
/// [out_offset, out_offset + count) along D; the matching input elements
/// start at in_offset and advance by `stride`.
template <typename F>
void for_each_tap_line(const ConvGeom& g, const VolumeDims& in, const VolumeDims& out, std::size_t a, std::size_t bb,
                       std::size_t e, F&& f) {
    const auto sh = static_cast<std::ptrdiff_t>(a) - static_cast<std::ptrdiff_t>(g.ph);
    const auto sw = static_cast<std::ptrdiff_t>(bb) - static_cast<std::ptrdiff_t>(g.pw);
    const auto sd = static_cast<std::ptrdiff_t>(e) - static_cast<std::ptrdiff_t>(g.pd);
    const auto [h_lo, h_hi] = valid_range(sh, g.stride, in.h, out.h);
    const auto [w_lo, w_hi] = valid_range(sw, g.stride, in.w, out.w);
    const auto [d_lo, d_hi] = valid_range(sd, g.stride, in.d, out.d);
    if (d_hi <= d_lo) {
        return;
    }
    const std::size_t count = d_hi - d_lo;
    for (std::size_t ho = h_lo; ho < h_hi; ++ho) {
        const std::size_t hi = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(ho * g.stride) + sh);
        for (std::size_t wo = w_lo; wo < w_hi; ++wo) {
            const std::size_t wi = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(wo * g.stride) + sw);
            const std::size_t di = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(d_lo * g.stride) + sd);
            f((ho * out.w + wo) * out.d + d_lo, (hi * in.w + wi) * in.d + di, count);
        }
    }
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const T* weight, const T* bias, const ConvGeom& g) {
    const VolumeDims in = volume_dims(x, "conv");
    if (in.c != g.cin) {
        throw ShapeError("conv: input has " + std::to_string(in.c) + " channels, layer expects " +
                         std::to_string(g.cin));
    }
    const VolumeDims out = g.out_dims(in);
    Tensor<T> y(out.shape());
    const std::size_t in_sp = in.spatial();
    const std::size_t out_sp = out.spatial();
    const std::size_t cin_g = g.cin_per_group();
    const std::size_t cout_g = g.cout_per_group();
    const std::size_t taps = g.taps();
    const bool pointwise = taps == 1 && g.stride == 1;

    parallel::for_each_index(in.b * g.cout, [&](std::size_t job) {
        const std::size_t b = job / g.cout;
        const std::size_t co = job % g.cout;
        T* dst = y.ptr() + job * out_sp;
        if (bias != nullptr) {
            for (std::size_t i = 0; i < out_sp; ++i) {
                dst[i] = bias[co];
            }
        }
        const std::size_t group = co / cout_g;
        for (std::size_t cl = 0; cl < cin_g; ++cl) {
            const std::size_t ci = group * cin_g + cl;
            const T* src = x.ptr() + (b * in.c + ci) * in_sp;
            const T* wk = weight + (co * cin_g + cl) * taps;
            if (pointwise) {
                const T wv = wk[0];
                for (std::size_t i = 0; i < out_sp; ++i) {
                    dst[i] += wv * src[i];
                }
                continue;
            }
            for (std::size_t a = 0; a < g.kh; ++a) {
                for (std::size_t bb = 0; bb < g.kw; ++bb) {
                    for (std::size_t e = 0; e < g.kd; ++e) {
                        const T wv = wk[(a * g.kw + bb) * g.kd + e];
                        const std::size_t s = g.stride;
                        for_each_tap_line(g, in, out, a, bb, e, [&](std::size_t oo, std::size_t io, std::size_t n) {
                            T* o = dst + oo;
                            const T* p = src + io;
                            if (s == 1) {
                                for (std::size_t i = 0; i < n; ++i) {
                                    o[i] += wv * p[i];
                                }
                            } else {
                                for (std::size_t i = 0; i < n; ++i) {
                                    o[i] += wv * p[i * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    return y;
}

/// Accumulates input/weight/bias gradients. Any of gx, gw, gb may be null.
template <typename T>
void conv_backward(const Tensor<T>& x, const T* weight, const Tensor<T>& gy, const ConvGeom& g, Tensor<T>* gx, T* gw,
                   T* gb) {
    const VolumeDims in = volume_dims(x, "conv backward");
    const VolumeDims out = g.out_dims(in);
    if (gy.shape() != out.shape()) {
        throw ShapeError("conv backward: grad shape " + shape_str(gy.shape()) + " vs expected " +
                         shape_str(out.shape()));
    }
    const std::size_t in_sp = in.spatial();
    const std::size_t out_sp = out.spatial();
    const std::size_t cin_g = g.cin_per_group();
    const std::size_t cout_g = g.cout_per_group();
    const std::size_t taps = g.taps();
    const std::size_t s = g.stride;
    const bool pointwise = taps == 1 && s == 1;

    if (gx != nullptr) {
        if (gx->shape() != x.shape()) {
            *gx = zeros_like(x);
        }
        // Each job owns one input channel plane.
        parallel::for_each_index(in.b * g.cin, [&](std::size_t job) {
            const std::size_t b = job / g.cin;
            const std::size_t ci = job % g.cin;
            const std::size_t group = ci / cin_g;
            const std::size_t cl = ci % cin_g;
            T* dst = gx->ptr() + job * in_sp;
            for (std::size_t oc = 0; oc < cout_g; ++oc) {
                const std::size_t co = group * cout_g + oc;
                const T* src = gy.ptr() + (b * g.cout + co) * out_sp;
                const T* wk = weight + (co * cin_g + cl) * taps;
                if (pointwise) {
                    const T wv = wk[0];
                    for (std::size_t i = 0; i < in_sp; ++i) {
                        dst[i] += wv * src[i];
                    }
                    continue;
                }
                for (std::size_t a = 0; a < g.kh; ++a) {
                    for (std::size_t bb = 0; bb < g.kw; ++bb) {
                        for (std::size_t e = 0; e < g.kd; ++e) {
                            const T wv = wk[(a * g.kw + bb) * g.kd + e];
                            for_each_tap_line(g, in, out, a, bb, e,
                                              [&](std::size_t oo, std::size_t io, std::size_t n) {
                                                  const T* q = src + oo;
                                                  T* p = dst + io;
                                                  if (s == 1) {
                                                      for (std::size_t i = 0; i < n; ++i) {
                                                          p[i] += wv * q[i];
                                                      }
                                                  } else {
                                                      for (std::size_t i = 0; i < n; ++i) {
                                                          p[i * s] += wv * q[i];
                                                      }
                                                  }
                                              });
                        }
                    }
                }
            }
        });
    }

    if (gw != nullptr || gb != nullptr) {
        // Each job owns one output channel's weights and bias.
        parallel::for_each_index(g.cout, [&](std::size_t co) {
            const std::size_t group = co / cout_g;
            for (std::size_t b = 0; b < in.b; ++b) {
                const T* q = gy.ptr() + (b * g.cout + co) * out_sp;
                if (gb != nullptr) {
                    T acc = 0;
                    for (std::size_t i = 0; i < out_sp; ++i) {
                        acc += q[i];
                    }
                    gb[co] += acc;
                }
                if (gw == nullptr) {
                    continue;
                }
                for (std::size_t cl = 0; cl < cin_g; ++cl) {
                    const std::size_t ci = group * cin_g + cl;
                    const T* src = x.ptr() + (b * in.c + ci) * in_sp;
                    T* wk = gw + (co * cin_g + cl) * taps;
                    if (pointwise) {
                        T acc = 0;
                        for (std::size_t i = 0; i < out_sp; ++i) {
                            acc += q[i] * src[i];
                        }
                        wk[0] += acc;
                        continue;
                    }
                    for (std::size_t a = 0; a < g.kh; ++a) {
                        for (std::size_t bb = 0; bb < g.kw; ++bb) {
                            for (std::size_t e = 0; e < g.kd; ++e) {
                                T acc = 0;
                                for_each_tap_line(g, in, out, a, bb, e,
                                                  [&](std::size_t oo, std::size_t io, std::size_t n) {
                                                      const T* qq = q + oo;
                                                      const T* p = src + io;
                                                      for (std::size_t i = 0; i < n; ++i) {
                                                          acc += qq[i] * p[i * s];
                                                      }
                                                  });
                                wk[(a * g.kw + bb) * g.kd + e] += acc;
                            }
                        }
                    }
                }
            }
        });
    }
}

inline ConvGeom axis_geom(std::size_t cin, std::size_t cout, std::size_t groups, const ConvSpec& spec) {
    ConvGeom g;
    g.cin = cin;
    g.cout = cout;
    g.groups = groups;
    g.stride = spec.stride;
    switch (spec.axis) {
        case Axis::H: g.kh = spec.kernel; g.ph = spec.pad(); break;
        case Axis::W: g.kw = spec.kernel; g.pw = spec.pad(); break;
        case Axis::D: g.kd = spec.kernel; g.pd = spec.pad(); break;
        case Axis::All:
            g.kh = g.kw = g.kd = spec.kernel;
            g.ph = g.pw = g.pd = spec.pad();
            break;
    }
    return g;
}

/// Geometry for a 1D axis convolution whose weight is either [C, k]
/// (depthwise) or [Cout, Cin, k] (dense, full channel mixing).
template <typename T>
ConvGeom axis_weight_geom(const Tensor<T>& weight, std::size_t cin, const ConvSpec& spec, const char* who) {
    spec.validate();
    if (spec.axis == Axis::All) {
        throw std::invalid_argument(std::string(who) + ": axis must be one of H, W, D");
    }
    if (weight.rank() == 2) {
        if (weight.dim(0) != cin || weight.dim(1) != spec.kernel) {
            throw ShapeError(std::string(who) + ": depthwise weight " + shape_str(weight.shape()) +
                             " does not match C=" + std::to_string(cin) + ", k=" + std::to_string(spec.kernel));
        }
        return axis_geom(cin, cin, cin, spec);
    }
    if (weight.rank() == 3) {
        if (weight.dim(1) != cin || weight.dim(2) != spec.kernel) {
            throw ShapeError(std::string(who) + ": dense weight " + shape_str(weight.shape()) +
                             " does not match Cin=" + std::to_string(cin) + ", k=" + std::to_string(spec.kernel));
        }
        return axis_geom(cin, weight.dim(0), 1, spec);
    }
    throw ShapeError(std::string(who) + ": weight must be [C,k] or [Cout,Cin,k], got " + shape_str(weight.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Axis-wise 1D convolution (depthwise [C,k] or dense [Cout,Cin,k] weights).

template <typename T>
Tensor<T> dwconv1d_axis_forward(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                                const ConvSpec& spec) {
    const VolumeDims in = volume_dims(x, "dwconv1d_axis_forward");
    const detail::ConvGeom g = detail::axis_weight_geom(weight, in.c, spec, "dwconv1d_axis_forward");
    if (bias != nullptr && bias->numel() != g.cout) {
        throw ShapeError("dwconv1d_axis_forward: bias " + shape_str(bias->shape()) + " vs Cout=" +
                         std::to_string(g.cout));
    }
    return detail::conv_forward(x, weight.ptr(), bias ? bias->ptr() : nullptr, g);
}

template <typename T>
struct AxisConvGrads {
    Tensor<T> grad_x;
    Tensor<T> grad_weight;
    Tensor<T> grad_bias;  // empty when the forward had no bias
};

/// Cached forward state for dwconv1d_axis_backward.
template <typename T>
struct AxisConvCache {
    Tensor<T> x;
    Tensor<T> weight;
    bool has_bias = false;
    ConvSpec spec;
    bool valid = false;
};

template <typename T>
Tensor<T> dwconv1d_axis_forward(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                                const ConvSpec& spec, AxisConvCache<T>& cache) {
    Tensor<T> y = dwconv1d_axis_forward(x, weight, bias, spec);
    cache = {x, weight, bias != nullptr, spec, true};
    return y;
}

template <typename T>
AxisConvGrads<T> dwconv1d_axis_backward(const Tensor<T>& grad_out, AxisConvCache<T>& cache) {
    if (!cache.valid) {
        throw StaleCacheError("dwconv1d_axis");
    }
    const VolumeDims in = volume_dims(cache.x, "dwconv1d_axis_backward");
    const detail::ConvGeom g = detail::axis_weight_geom(cache.weight, in.c, cache.spec, "dwconv1d_axis_backward");
    AxisConvGrads<T> out;
    out.grad_x = zeros_like(cache.x);
    out.grad_weight = zeros_like(cache.weight);
    if (cache.has_bias) {
        out.grad_bias = Tensor<T>::zeros({g.cout});
    }
    detail::conv_backward(cache.x, cache.weight.ptr(), grad_out, g, &out.grad_x, out.grad_weight.ptr(),
                          cache.has_bias ? out.grad_bias.ptr() : nullptr);
    cache.valid = false;
    return out;
}

// ---------------------------------------------------------------------------
// Dense 3D convolution, padding k/2 on every axis. k = 1 is a pointwise
// channel projection.

template <typename T>
Tensor<T> dense_conv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, const std::type_identity_t<Tensor<T>>* bias,
                               std::size_t stride = 1) {
    const VolumeDims in = volume_dims(x, "dense_conv3d_forward");
    if (weight.rank() != 5 || weight.dim(2) != weight.dim(3) || weight.dim(3) != weight.dim(4)) {
        throw ShapeError("dense_conv3d_forward: weight must be [Cout,Cin,k,k,k], got " + shape_str(weight.shape()));
    }
    if (weight.dim(1) != in.c) {
        throw ShapeError("dense_conv3d_forward: channel mismatch, input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
    }
    const ConvSpec spec{weight.dim(2), stride, Axis::All};
    spec.validate();
    const detail::ConvGeom g = detail::axis_geom(in.c, weight.dim(0), 1, spec);
    if (bias != nullptr && bias->numel() != g.cout) {
        throw ShapeError("dense_conv3d_forward: bias " + shape_str(bias->shape()) + " vs Cout=" +
                         std::to_string(g.cout));
    }
    return detail::conv_forward(x, weight.ptr(), bias ? bias->ptr() : nullptr, g);
}

/// Dense 3D convolution layer with bias (patch embedding / projection).
template <typename T>
class DenseConv3d {
public:
    DenseConv3d() = default;
    DenseConv3d(std::size_t cin, std::size_t cout, std::size_t kernel, std::size_t stride = 1)
        : cin_(cin), cout_(cout), kernel_(kernel), stride_(stride) {
        ConvSpec{kernel, stride, Axis::All}.validate();
        weight_.reset(Tensor<T>::zeros({cout, cin, kernel, kernel, kernel}));
        bias_.reset(Tensor<T>::zeros({cout}));
    }

    void init(Rng& rng, double stddev = 0.02) {
        weight_.reset(Tensor<T>::trunc_normal(weight_.value.shape(), rng, stddev));
        bias_.reset(Tensor<T>::zeros({cout_}));
    }

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache) {
        Tensor<T> y = dense_conv3d_forward(x, weight_.value, &bias_.value, stride_);
        if (keep_cache) {
            cache_ = x;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        if (!cache_) {
            throw StaleCacheError("dense_conv3d");
        }
        Tensor<T> gx = zeros_like(*cache_);
        detail::conv_backward(*cache_, weight_.value.ptr(), gy, geom(), &gx, weight_.grad.ptr(), bias_.grad.ptr());
        cache_.reset();
        return gx;
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        weight_.register_in(join_path(prefix, "weight"), out);
        bias_.register_in(join_path(prefix, "bias"), out);
    }

    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }
    std::size_t in_channels() const { return cin_; }
    std::size_t out_channels() const { return cout_; }

private:
    detail::ConvGeom geom() const { return detail::axis_geom(cin_, cout_, 1, ConvSpec{kernel_, stride_, Axis::All}); }

    std::size_t cin_ = 0, cout_ = 0, kernel_ = 1, stride_ = 1;
    Param<T> weight_;
    Param<T> bias_;
    std::optional<Tensor<T>> cache_;
};

// ---------------------------------------------------------------------------
// Reference depthwise 3D convolution. Kept as a plain nested loop so it
// stays independent of the line kernels above.

template <typename T>
Tensor<T> dwconv3d_forward(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride = 1) {
    const VolumeDims in = volume_dims(x, "dwconv3d_forward");
    if (weight.rank() != 4 || weight.dim(0) != in.c || weight.dim(1) != weight.dim(2) ||
        weight.dim(2) != weight.dim(3)) {
        throw ShapeError("dwconv3d_forward: weight must be [C,k,k,k] with C=" + std::to_string(in.c) + ", got " +
                         shape_str(weight.shape()));
    }
    const std::size_t k = weight.dim(1);
    ConvSpec{k, stride, Axis::All}.validate();
    const auto p = static_cast<std::ptrdiff_t>(k / 2);
    const std::size_t ho_n = conv_out_extent(in.h, k, k / 2, stride);
    const std::size_t wo_n = conv_out_extent(in.w, k, k / 2, stride);
    const std::size_t do_n = conv_out_extent(in.d, k, k / 2, stride);
    Tensor<T> y({in.b, in.c, ho_n, wo_n, do_n});
    const auto inside = [](std::ptrdiff_t i, std::size_t n) { return i >= 0 && i < static_cast<std::ptrdiff_t>(n); };
    for (std::size_t b = 0; b < in.b; ++b) {
        for (std::size_t c = 0; c < in.c; ++c) {
            for (std::size_t ho = 0; ho < ho_n; ++ho) {
                for (std::size_t wo = 0; wo < wo_n; ++wo) {
                    for (std::size_t dd = 0; dd < do_n; ++dd) {
                        T acc = 0;
                        for (std::size_t a = 0; a < k; ++a) {
                            for (std::size_t bb = 0; bb < k; ++bb) {
                                for (std::size_t e = 0; e < k; ++e) {
                                    const auto hi = static_cast<std::ptrdiff_t>(ho * stride + a) - p;
                                    const auto wi = static_cast<std::ptrdiff_t>(wo * stride + bb) - p;
                                    const auto di = static_cast<std::ptrdiff_t>(dd * stride + e) - p;
                                    if (inside(hi, in.h) && inside(wi, in.w) && inside(di, in.d)) {
                                        acc += weight(c, a, bb, e) * x(b, c, hi, wi, di);
                                    }
                                }
                            }
                        }
                        y(b, c, ho, wo, dd) = acc;
                    }
                }
            }
        }
    }
    return y;
}

/// Embeds three per-axis depthwise kernels [C,k] into the k^3 "axis cross"
/// kernel that makes a dense depthwise 3D convolution equal the decomposed one.
template <typename T>
Tensor<T> axis_cross_kernel(const Tensor<T>& wh, const Tensor<T>& ww, const Tensor<T>& wd) {
    if (wh.rank() != 2 || wh.shape() != ww.shape() || wh.shape() != wd.shape()) {
        throw ShapeError("axis_cross_kernel: branch kernels must share a [C,k] shape");
    }
    const std::size_t c_n = wh.dim(0);
    const std::size_t k = wh.dim(1);
    const std::size_t m = k / 2;
    Tensor<T> w3({c_n, k, k, k});
    for (std::size_t c = 0; c < c_n; ++c) {
        for (std::size_t i = 0; i < k; ++i) {
            w3(c, i, m, m) += wh(c, i);
            w3(c, m, i, m) += ww(c, i);
            w3(c, m, m, i) += wd(c, i);
        }
    }
    return w3;
}

}  // namespace dcf

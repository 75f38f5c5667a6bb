#pragma once

// Test-only reference implementations. Written as direct nested loops over
// output coordinates so they share no code with the library kernels.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "dcf/layers/conv.hpp"
#include "dcf/rng.hpp"
#include "dcf/tensor.hpp"

namespace oracle {

using TensorD = dcf::Tensor<double>;

inline bool inside(long i, std::size_t n) { return i >= 0 && i < static_cast<long>(n); }

/// Depthwise 1D convolution along one axis; weight [C,k]; stride on all axes.
inline TensorD axis_conv(const TensorD& x, const TensorD& w, dcf::Axis axis, std::size_t stride) {
    const auto& s = x.shape();
    const std::size_t k = w.dim(1);
    const long p = static_cast<long>(k / 2);
    const std::size_t kh = axis == dcf::Axis::H ? k : 1;
    const std::size_t kw = axis == dcf::Axis::W ? k : 1;
    const std::size_t kd = axis == dcf::Axis::D ? k : 1;
    const long ph = axis == dcf::Axis::H ? p : 0;
    const long pw = axis == dcf::Axis::W ? p : 0;
    const long pd = axis == dcf::Axis::D ? p : 0;
    const std::size_t ho_n = (s[2] + 2 * ph - kh) / stride + 1;
    const std::size_t wo_n = (s[3] + 2 * pw - kw) / stride + 1;
    const std::size_t do_n = (s[4] + 2 * pd - kd) / stride + 1;
    TensorD y({s[0], s[1], ho_n, wo_n, do_n});
    for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t c = 0; c < s[1]; ++c)
            for (std::size_t ho = 0; ho < ho_n; ++ho)
                for (std::size_t wo = 0; wo < wo_n; ++wo)
                    for (std::size_t d = 0; d < do_n; ++d) {
                        double acc = 0;
                        for (std::size_t t = 0; t < k; ++t) {
                            long hi = static_cast<long>(ho * stride);
                            long wi = static_cast<long>(wo * stride);
                            long di = static_cast<long>(d * stride);
                            if (axis == dcf::Axis::H) hi += static_cast<long>(t) - p;
                            if (axis == dcf::Axis::W) wi += static_cast<long>(t) - p;
                            if (axis == dcf::Axis::D) di += static_cast<long>(t) - p;
                            if (inside(hi, s[2]) && inside(wi, s[3]) && inside(di, s[4])) {
                                acc += w(c, t) * x(b, c, hi, wi, di);
                            }
                        }
                        y(b, c, ho, wo, d) = acc;
                    }
    return y;
}

/// Dense 3D convolution with weight [Cout,Cin,k,k,k], bias [Cout], pad k/2.
inline TensorD dense_conv(const TensorD& x, const TensorD& w, const TensorD& bias, std::size_t stride) {
    const auto& s = x.shape();
    const std::size_t cout = w.dim(0), cin = w.dim(1), k = w.dim(2);
    const long p = static_cast<long>(k / 2);
    const std::size_t ho_n = (s[2] + 2 * p - k) / stride + 1;
    const std::size_t wo_n = (s[3] + 2 * p - k) / stride + 1;
    const std::size_t do_n = (s[4] + 2 * p - k) / stride + 1;
    TensorD y({s[0], cout, ho_n, wo_n, do_n});
    for (std::size_t b = 0; b < s[0]; ++b)
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ho = 0; ho < ho_n; ++ho)
                for (std::size_t wo = 0; wo < wo_n; ++wo)
                    for (std::size_t d = 0; d < do_n; ++d) {
                        double acc = bias[co];
                        for (std::size_t ci = 0; ci < cin; ++ci)
                            for (std::size_t a = 0; a < k; ++a)
                                for (std::size_t bb = 0; bb < k; ++bb)
                                    for (std::size_t e = 0; e < k; ++e) {
                                        const long hi = static_cast<long>(ho * stride + a) - p;
                                        const long wi = static_cast<long>(wo * stride + bb) - p;
                                        const long di = static_cast<long>(d * stride + e) - p;
                                        if (inside(hi, s[2]) && inside(wi, s[3]) && inside(di, s[4])) {
                                            acc += w(co, ci, a, bb, e) * x(b, ci, hi, wi, di);
                                        }
                                    }
                        y(b, co, ho, wo, d) = acc;
                    }
    return y;
}

/// Central finite-difference check of `analytic` = dL/dparam at the given
/// flat indices, perturbing `param` in place. Returns the max relative error,
/// with the magnitude floor `floor` in the denominator.
inline double fd_max_rel_err_at(TensorD& param, const TensorD& analytic, const std::function<double()>& loss,
                                const std::vector<std::size_t>& indices, double h = 1e-5, double floor = 1e-3) {
    double worst = 0;
    for (std::size_t i : indices) {
        const double orig = param[i];
        param[i] = orig + h;
        const double lp = loss();
        param[i] = orig - h;
        const double lm = loss();
        param[i] = orig;
        const double num = (lp - lm) / (2 * h);
        const double a = analytic[i];
        const double denom = std::max({std::fabs(a), std::fabs(num), floor});
        worst = std::max(worst, std::fabs(a - num) / denom);
    }
    return worst;
}

inline double fd_max_rel_err(TensorD& param, const TensorD& analytic, const std::function<double()>& loss,
                             double h = 1e-5, double floor = 1e-3) {
    std::vector<std::size_t> all(param.numel());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return fd_max_rel_err_at(param, analytic, loss, all, h, floor);
}

/// `count` distinct indices in [0, n), drawn deterministically.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count, dcf::Rng& rng) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    if (count >= n) return all;
    for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.below(n - i)]);
    all.resize(count);
    return all;
}

/// Weighted sum <r, y>: scalar loss whose gradient wrt y is r.
inline double dot(const TensorD& r, const TensorD& y) {
    double acc = 0;
    for (std::size_t i = 0; i < y.numel(); ++i) acc += r[i] * y[i];
    return acc;
}

}  // namespace oracle

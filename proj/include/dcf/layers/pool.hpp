#pragma once

#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "dcf/layers/conv.hpp"
#include "dcf/layers/param.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

/// 3D max pooling with implicit -inf padding. Ties go to the lowest linear
/// input index inside the window.
template <typename T>
class MaxPool3d {
public:
    explicit MaxPool3d(std::size_t kernel = 3, std::size_t stride = 2, std::size_t pad = 1)
        : kernel_(kernel), stride_(stride), pad_(pad) {}

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache) {
        const VolumeDims in = volume_dims(x, "maxpool3d");
        const VolumeDims out{in.b, in.c, conv_out_extent(in.h, kernel_, pad_, stride_),
                             conv_out_extent(in.w, kernel_, pad_, stride_),
                             conv_out_extent(in.d, kernel_, pad_, stride_)};
        Tensor<T> y(out.shape());
        std::vector<std::size_t> argmax(y.numel());
        const auto p = static_cast<std::ptrdiff_t>(pad_);
        const std::size_t in_sp = in.spatial();
        std::size_t o = 0;
        for (std::size_t bc = 0; bc < in.b * in.c; ++bc) {
            const T* src = x.ptr() + bc * in_sp;
            for (std::size_t ho = 0; ho < out.h; ++ho) {
                for (std::size_t wo = 0; wo < out.w; ++wo) {
                    for (std::size_t dd = 0; dd < out.d; ++dd, ++o) {
                        T best = -std::numeric_limits<T>::infinity();
                        std::size_t best_idx = 0;
                        bool found = false;
                        for (std::size_t a = 0; a < kernel_; ++a) {
                            const auto hi = static_cast<std::ptrdiff_t>(ho * stride_ + a) - p;
                            if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(in.h)) continue;
                            for (std::size_t b = 0; b < kernel_; ++b) {
                                const auto wi = static_cast<std::ptrdiff_t>(wo * stride_ + b) - p;
                                if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(in.w)) continue;
                                for (std::size_t e = 0; e < kernel_; ++e) {
                                    const auto di = static_cast<std::ptrdiff_t>(dd * stride_ + e) - p;
                                    if (di < 0 || di >= static_cast<std::ptrdiff_t>(in.d)) continue;
                                    const std::size_t idx =
                                        (static_cast<std::size_t>(hi) * in.w + static_cast<std::size_t>(wi)) * in.d +
                                        static_cast<std::size_t>(di);
                                    if (!found || src[idx] > best) {
                                        best = src[idx];
                                        best_idx = idx;
                                        found = true;
                                    }
                                }
                            }
                        }
                        y[o] = best;
                        argmax[o] = bc * in_sp + best_idx;
                    }
                }
            }
        }
        if (keep_cache) {
            cache_ = Cache{x.shape(), std::move(argmax)};
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        if (!cache_) {
            throw StaleCacheError("maxpool3d");
        }
        if (gy.numel() != cache_->argmax.size()) {
            throw ShapeError("maxpool3d backward: grad " + shape_str(gy.shape()) + " does not match forward output");
        }
        Tensor<T> gx(cache_->in_shape);
        for (std::size_t i = 0; i < gy.numel(); ++i) {
            gx[cache_->argmax[i]] += gy[i];
        }
        cache_.reset();
        return gx;
    }

private:
    struct Cache {
        Shape in_shape;
        std::vector<std::size_t> argmax;
    };

    std::size_t kernel_, stride_, pad_;
    std::optional<Cache> cache_;
};

/// [B,C,H,W,D] -> [B,C] spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    const VolumeDims in = volume_dims(x, "global_avg_pool");
    const std::size_t sp = in.spatial();
    Tensor<T> y({in.b, in.c});
    for (std::size_t bc = 0; bc < in.b * in.c; ++bc) {
        const T* p = x.ptr() + bc * sp;
        T acc = 0;
        for (std::size_t i = 0; i < sp; ++i) {
            acc += p[i];
        }
        y[bc] = acc / static_cast<T>(sp);
    }
    return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const Tensor<T>& gy, const Shape& in_shape) {
    Tensor<T> gx(in_shape);
    const VolumeDims in = volume_dims(gx, "global_avg_pool_backward");
    if (gy.shape() != Shape{in.b, in.c}) {
        throw ShapeError("global_avg_pool_backward: grad " + shape_str(gy.shape()) + " vs input " +
                         shape_str(in_shape));
    }
    const std::size_t sp = in.spatial();
    for (std::size_t bc = 0; bc < in.b * in.c; ++bc) {
        const T g = gy[bc] / static_cast<T>(sp);
        T* p = gx.ptr() + bc * sp;
        for (std::size_t i = 0; i < sp; ++i) {
            p[i] = g;
        }
    }
    return gx;
}

}  // namespace dcf

#pragma once

#include <cmath>
#include <numbers>
#include <optional>

#include "dcf/layers/param.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

/// Exact GELU: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

/// d/dx GELU = Phi(x) + x phi(x).
template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

template <typename T>
class Gelu {
public:
    Tensor<T> forward(const Tensor<T>& x, bool keep_cache) {
        Tensor<T> y(x.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) {
            y[i] = gelu(x[i]);
        }
        if (keep_cache) {
            cache_ = x;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        if (!cache_) {
            throw StaleCacheError("gelu");
        }
        if (gy.shape() != cache_->shape()) {
            throw ShapeError("gelu backward: grad " + shape_str(gy.shape()) + " vs input " +
                             shape_str(cache_->shape()));
        }
        Tensor<T> gx(gy.shape());
        for (std::size_t i = 0; i < gy.numel(); ++i) {
            gx[i] = gy[i] * gelu_grad((*cache_)[i]);
        }
        cache_.reset();
        return gx;
    }

private:
    std::optional<Tensor<T>> cache_;
};

}  // namespace dcf

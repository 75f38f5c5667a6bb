#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>

#include "dcf/layers/param.hpp"
#include "dcf/parallel.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

enum class NormMode { Train, Eval };

/// Per-channel batch normalization over every axis except axis 1.
/// Running variance is tracked with the unbiased estimator; normalization in
/// train mode uses the biased batch variance.
template <typename T>
class BatchNorm3d {
public:
    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.1;

    BatchNorm3d() = default;
    explicit BatchNorm3d(std::size_t channels, double eps = kEps, double momentum = kMomentum)
        : channels_(channels), eps_(eps), momentum_(momentum) {
        gamma_.reset(Tensor<T>::ones({channels}));
        beta_.reset(Tensor<T>::zeros({channels}));
        running_mean_ = Tensor<T>::zeros({channels});
        running_var_ = Tensor<T>::ones({channels});
    }

    Tensor<T> forward(const Tensor<T>& x, NormMode mode, bool keep_cache) {
        const auto [outer, inner] = split(x);
        const std::size_t n = outer * inner;
        Tensor<T> y(x.shape());
        std::vector<T> inv_std(channels_);
        std::vector<T> mean(channels_);
        parallel::for_each_index(channels_, [&](std::size_t c) {
            T mu;
            T var;
            if (mode == NormMode::Train) {
                T acc = 0;
                for (std::size_t b = 0; b < outer; ++b) {
                    const T* p = x.ptr() + (b * channels_ + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        acc += p[i];
                    }
                }
                mu = acc / static_cast<T>(n);
                T sq = 0;
                for (std::size_t b = 0; b < outer; ++b) {
                    const T* p = x.ptr() + (b * channels_ + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        const T dv = p[i] - mu;
                        sq += dv * dv;
                    }
                }
                var = sq / static_cast<T>(n);
                const T unbiased = n > 1 ? sq / static_cast<T>(n - 1) : var;
                const T m = static_cast<T>(momentum_);
                running_mean_[c] = (T(1) - m) * running_mean_[c] + m * mu;
                running_var_[c] = (T(1) - m) * running_var_[c] + m * unbiased;
            } else {
                mu = running_mean_[c];
                var = running_var_[c];
            }
            const T is = T(1) / std::sqrt(var + static_cast<T>(eps_));
            mean[c] = mu;
            inv_std[c] = is;
            const T g = gamma_.value[c];
            const T bt = beta_.value[c];
            for (std::size_t b = 0; b < outer; ++b) {
                const std::size_t off = (b * channels_ + c) * inner;
                const T* p = x.ptr() + off;
                T* q = y.ptr() + off;
                for (std::size_t i = 0; i < inner; ++i) {
                    q[i] = (p[i] - mu) * is * g + bt;
                }
            }
        });
        if (keep_cache) {
            Tensor<T> xhat(x.shape());
            for (std::size_t b = 0; b < outer; ++b) {
                for (std::size_t c = 0; c < channels_; ++c) {
                    const std::size_t off = (b * channels_ + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) {
                        xhat[off + i] = (x[off + i] - mean[c]) * inv_std[c];
                    }
                }
            }
            cache_ = Cache{std::move(xhat), std::move(inv_std), mode};
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        if (!cache_) {
            throw StaleCacheError("batchnorm3d");
        }
        const Cache& cache = *cache_;
        if (gy.shape() != cache.xhat.shape()) {
            throw ShapeError("batchnorm3d backward: grad " + shape_str(gy.shape()) + " vs input " +
                             shape_str(cache.xhat.shape()));
        }
        const auto [outer, inner] = split(gy);
        const T n = static_cast<T>(outer * inner);
        Tensor<T> gx(gy.shape());
        parallel::for_each_index(channels_, [&](std::size_t c) {
            T sum_g = 0;
            T sum_gx = 0;
            for (std::size_t b = 0; b < outer; ++b) {
                const std::size_t off = (b * channels_ + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    sum_g += gy[off + i];
                    sum_gx += gy[off + i] * cache.xhat[off + i];
                }
            }
            gamma_.grad[c] += sum_gx;
            beta_.grad[c] += sum_g;
            const T scale_c = gamma_.value[c] * cache.inv_std[c];
            for (std::size_t b = 0; b < outer; ++b) {
                const std::size_t off = (b * channels_ + c) * inner;
                for (std::size_t i = 0; i < inner; ++i) {
                    if (cache.mode == NormMode::Train) {
                        gx[off + i] = scale_c * (gy[off + i] - sum_g / n - cache.xhat[off + i] * sum_gx / n);
                    } else {
                        gx[off + i] = scale_c * gy[off + i];
                    }
                }
            }
        });
        cache_.reset();
        return gx;
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        gamma_.register_in(join_path(prefix, "gamma"), out);
        beta_.register_in(join_path(prefix, "beta"), out);
        out.push_back({join_path(prefix, "running_mean"), &running_mean_, nullptr});
        out.push_back({join_path(prefix, "running_var"), &running_var_, nullptr});
    }

    std::size_t channels() const { return channels_; }
    Param<T>& gamma() { return gamma_; }
    Param<T>& beta() { return beta_; }
    Tensor<T>& running_mean() { return running_mean_; }
    Tensor<T>& running_var() { return running_var_; }

private:
    struct Cache {
        Tensor<T> xhat;
        std::vector<T> inv_std;
        NormMode mode;
    };

    std::pair<std::size_t, std::size_t> split(const Tensor<T>& x) const {
        if (x.rank() < 2 || x.dim(1) != channels_) {
            throw ShapeError("batchnorm3d: expected [B," + std::to_string(channels_) + ",...], got " +
                             shape_str(x.shape()));
        }
        return {x.dim(0), x.numel() / (x.dim(0) * channels_)};
    }

    std::size_t channels_ = 0;
    double eps_ = kEps;
    double momentum_ = kMomentum;
    Param<T> gamma_;
    Param<T> beta_;
    Tensor<T> running_mean_;
    Tensor<T> running_var_;
    std::optional<Cache> cache_;
};

}  // namespace dcf

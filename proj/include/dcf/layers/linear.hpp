#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "dcf/layers/activation.hpp"
#include "dcf/layers/norm.hpp"
#include "dcf/layers/param.hpp"
#include "dcf/parallel.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

/// y = x W + b with x [N, in], W [in, out], b [out].
template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out) : in_(in), out_(out) {
        weight_.reset(Tensor<T>::zeros({in, out}));
        bias_.reset(Tensor<T>::zeros({out}));
    }

    void init(Rng& rng, double stddev = 0.02) {
        weight_.reset(Tensor<T>::trunc_normal({in_, out_}, rng, stddev));
        bias_.reset(Tensor<T>::zeros({out_}));
    }

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache) {
        check(x);
        const std::size_t n = x.dim(0);
        Tensor<T> y({n, out_});
        for (std::size_t r = 0; r < n; ++r) {
            T* row = y.ptr() + r * out_;
            for (std::size_t j = 0; j < out_; ++j) {
                row[j] = bias_.value[j];
            }
            for (std::size_t i = 0; i < in_; ++i) {
                const T xv = x[r * in_ + i];
                if (xv == T(0)) {
                    continue;
                }
                const T* w = weight_.value.ptr() + i * out_;
                for (std::size_t j = 0; j < out_; ++j) {
                    row[j] += xv * w[j];
                }
            }
        }
        if (keep_cache) {
            cache_ = x;
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        if (!cache_) {
            throw StaleCacheError("linear");
        }
        const Tensor<T>& x = *cache_;
        const std::size_t n = x.dim(0);
        if (gy.shape() != Shape{n, out_}) {
            throw ShapeError("linear backward: grad " + shape_str(gy.shape()) + " vs [" + std::to_string(n) + "," +
                             std::to_string(out_) + "]");
        }
        Tensor<T> gx({n, in_});
        for (std::size_t r = 0; r < n; ++r) {
            const T* g = gy.ptr() + r * out_;
            for (std::size_t j = 0; j < out_; ++j) {
                bias_.grad[j] += g[j];
            }
            for (std::size_t i = 0; i < in_; ++i) {
                const T* w = weight_.value.ptr() + i * out_;
                T acc = 0;
                for (std::size_t j = 0; j < out_; ++j) {
                    acc += g[j] * w[j];
                }
                gx[r * in_ + i] = acc;
                const T xv = x[r * in_ + i];
                if (xv == T(0)) {
                    continue;
                }
                T* gw = weight_.grad.ptr() + i * out_;
                for (std::size_t j = 0; j < out_; ++j) {
                    gw[j] += xv * g[j];
                }
            }
        }
        cache_.reset();
        return gx;
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        weight_.register_in(join_path(prefix, "weight"), out);
        bias_.register_in(join_path(prefix, "bias"), out);
    }

    std::size_t in_features() const { return in_; }
    std::size_t out_features() const { return out_; }
    Param<T>& weight() { return weight_; }
    Param<T>& bias() { return bias_; }

private:
    void check(const Tensor<T>& x) const {
        if (x.rank() != 2 || x.dim(1) != in_) {
            throw ShapeError("linear: expected [N," + std::to_string(in_) + "], got " + shape_str(x.shape()));
        }
    }

    std::size_t in_ = 0, out_ = 0;
    Param<T> weight_;
    Param<T> bias_;
    std::optional<Tensor<T>> cache_;
};

namespace detail {

/// y[b,j,s] = sum_c x[b,c,s] W[c,j] + bias[j] over the channel axis of a
/// [B,C,...] tensor.
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    const std::size_t b_n = x.dim(0);
    const std::size_t cin = x.dim(1);
    if (w.rank() != 2 || w.dim(0) != cin || bias.numel() != w.dim(1)) {
        throw ShapeError("channel matmul: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    }
    const std::size_t cout = w.dim(1);
    const std::size_t sp = x.numel() / (b_n * cin);
    Shape out_shape = x.shape();
    out_shape[1] = cout;
    Tensor<T> y(out_shape);
    parallel::for_each_index(b_n * cout, [&](std::size_t job) {
        const std::size_t b = job / cout;
        const std::size_t j = job % cout;
        T* dst = y.ptr() + job * sp;
        for (std::size_t i = 0; i < sp; ++i) {
            dst[i] = bias[j];
        }
        for (std::size_t c = 0; c < cin; ++c) {
            const T wv = w[c * cout + j];
            const T* src = x.ptr() + (b * cin + c) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                dst[i] += wv * src[i];
            }
        }
    });
    return y;
}

/// Returns grad wrt x; accumulates into gw, gb.
template <typename T>
Tensor<T> channel_affine_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>& gw,
                                  Tensor<T>& gb) {
    const std::size_t b_n = x.dim(0);
    const std::size_t cin = x.dim(1);
    const std::size_t cout = w.dim(1);
    const std::size_t sp = x.numel() / (b_n * cin);
    Tensor<T> gx(x.shape());
    parallel::for_each_index(b_n * cin, [&](std::size_t job) {
        const std::size_t b = job / cin;
        const std::size_t c = job % cin;
        T* dst = gx.ptr() + job * sp;
        for (std::size_t j = 0; j < cout; ++j) {
            const T wv = w[c * cout + j];
            const T* g = gy.ptr() + (b * cout + j) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                dst[i] += wv * g[i];
            }
        }
    });
    parallel::for_each_index(cin, [&](std::size_t c) {
        for (std::size_t j = 0; j < cout; ++j) {
            T acc = 0;
            for (std::size_t b = 0; b < b_n; ++b) {
                const T* src = x.ptr() + (b * cin + c) * sp;
                const T* g = gy.ptr() + (b * cout + j) * sp;
                for (std::size_t i = 0; i < sp; ++i) {
                    acc += src[i] * g[i];
                }
            }
            gw[c * cout + j] += acc;
        }
    });
    for (std::size_t j = 0; j < cout; ++j) {
        T acc = 0;
        for (std::size_t b = 0; b < b_n; ++b) {
            const T* g = gy.ptr() + (b * cout + j) * sp;
            for (std::size_t i = 0; i < sp; ++i) {
                acc += g[i];
            }
        }
        gb[j] += acc;
    }
    return gx;
}

}  // namespace detail

/// Channel MLP with pre-normalization and residual:
///   out = x + GELU(BN(x) W1 + b1) W2 + b2
/// applied independently at every spatial location.
template <typename T>
class ChannelMlp {
public:
    ChannelMlp() = default;
    ChannelMlp(std::size_t channels, std::size_t ratio) : channels_(channels), hidden_(channels * ratio), norm_(channels) {
        w1_.reset(Tensor<T>::zeros({channels_, hidden_}));
        b1_.reset(Tensor<T>::zeros({hidden_}));
        w2_.reset(Tensor<T>::zeros({hidden_, channels_}));
        b2_.reset(Tensor<T>::zeros({channels_}));
    }

    void init(Rng& rng, double stddev = 0.02) {
        w1_.reset(Tensor<T>::trunc_normal({channels_, hidden_}, rng, stddev));
        w2_.reset(Tensor<T>::trunc_normal({hidden_, channels_}, rng, stddev));
    }

    Tensor<T> forward(const Tensor<T>& x, NormMode mode, bool keep_cache) {
        if (x.rank() < 2 || x.dim(1) != channels_) {
            throw ShapeError("channel_mlp: expected " + std::to_string(channels_) + " channels, got " +
                             shape_str(x.shape()));
        }
        Tensor<T> n = norm_.forward(x, mode, keep_cache);
        Tensor<T> h = detail::channel_affine(n, w1_.value, b1_.value);
        Tensor<T> a = act_.forward(h, keep_cache);
        Tensor<T> y = detail::channel_affine(a, w2_.value, b2_.value);
        add_inplace(y, x);
        if (keep_cache) {
            cache_ = Cache{std::move(n), std::move(a)};
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        if (!cache_) {
            throw StaleCacheError("channel_mlp");
        }
        Tensor<T> ga = detail::channel_affine_backward(cache_->a, w2_.value, gy, w2_.grad, b2_.grad);
        Tensor<T> gh = act_.backward(ga);
        Tensor<T> gn = detail::channel_affine_backward(cache_->n, w1_.value, gh, w1_.grad, b1_.grad);
        Tensor<T> gx = norm_.backward(gn);
        add_inplace(gx, gy);
        cache_.reset();
        return gx;
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        norm_.collect(join_path(prefix, "bn"), out);
        w1_.register_in(join_path(prefix, "W1"), out);
        b1_.register_in(join_path(prefix, "b1"), out);
        w2_.register_in(join_path(prefix, "W2"), out);
        b2_.register_in(join_path(prefix, "b2"), out);
    }

    Param<T>& w1() { return w1_; }
    Param<T>& w2() { return w2_; }
    BatchNorm3d<T>& norm() { return norm_; }
    std::size_t hidden() const { return hidden_; }

private:
    struct Cache {
        Tensor<T> n;
        Tensor<T> a;
    };

    std::size_t channels_ = 0, hidden_ = 0;
    BatchNorm3d<T> norm_;
    Gelu<T> act_;
    Param<T> w1_, b1_, w2_, b2_;
    std::optional<Cache> cache_;
};

}  // namespace dcf

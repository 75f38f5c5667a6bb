#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "dcf/layers/param.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

struct AdamWConfig {
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay and bias-corrected moments:
///   theta <- theta - lr * wd * theta
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// Moments are keyed by parameter path; buffers are skipped.
template <typename T>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {
        if (!(cfg.lr >= 0) || cfg.beta1 < 0 || cfg.beta1 >= 1 || cfg.beta2 < 0 || cfg.beta2 >= 1 || !(cfg.eps > 0)) {
            throw std::invalid_argument("adamw: invalid hyperparameters");
        }
    }

    void step(const ParamList<T>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (const auto& p : params) {
            if (p.is_buffer()) continue;
            auto [it, fresh] = moments_.try_emplace(p.path);
            if (fresh) {
                it->second.m = zeros_like(*p.value);
                it->second.v = zeros_like(*p.value);
            }
            Moments& mo = it->second;
            if (mo.m.shape() != p.value->shape()) {
                throw ShapeError("adamw: moment shape changed for " + p.path);
            }
            T* w = p.value->ptr();
            const T* g = p.grad->ptr();
            T* m = mo.m.ptr();
            T* v = mo.v.ptr();
            for (std::size_t i = 0; i < p.value->numel(); ++i) {
                const double gi = static_cast<double>(g[i]);
                double wi = static_cast<double>(w[i]);
                wi -= cfg_.lr * cfg_.weight_decay * wi;
                const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * gi;
                const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * gi * gi;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                wi -= cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
                w[i] = static_cast<T>(wi);
            }
        }
    }

    std::uint64_t steps() const { return t_; }
    void set_steps(std::uint64_t t) { t_ = t; }
    const AdamWConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    /// Moment tensors as (path, tensor) pairs: "adam.m.<path>", "adam.v.<path>".
    ParamList<T> state() {
        ParamList<T> out;
        for (auto& [path, mo] : moments_) {
            out.push_back({"adam.m." + path, &mo.m, nullptr});
            out.push_back({"adam.v." + path, &mo.v, nullptr});
        }
        return out;
    }

    void load_moments(const std::string& path, Tensor<T> m, Tensor<T> v) {
        if (m.shape() != v.shape()) throw ShapeError("adamw: moment shapes disagree for " + path);
        moments_[path] = Moments{std::move(m), std::move(v)};
    }

private:
    struct Moments {
        Tensor<T> m;
        Tensor<T> v;
    };

    AdamWConfig cfg_;
    std::uint64_t t_ = 0;
    std::map<std::string, Moments> moments_;
};

}  // namespace dcf

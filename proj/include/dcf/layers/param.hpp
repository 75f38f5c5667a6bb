#pragma once

// Parameter registry shared by every layer: a flat, ordered list of
// (path, value, grad) references. Layers own their tensors; the registry
// is rebuilt on demand and must not outlive the model it points into.

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcf/tensor.hpp"

namespace dcf {

template <typename T>
struct ParamRef {
    std::string path;
    Tensor<T>* value = nullptr;
    Tensor<T>* grad = nullptr;  // null for buffers (running statistics)

    bool is_buffer() const noexcept { return grad == nullptr; }
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

/// A trainable tensor together with its gradient accumulator.
template <typename T>
struct Param {
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    explicit Param(Tensor<T> v) : value(std::move(v)), grad(zeros_like(value)) {}

    void reset(Tensor<T> v) {
        value = std::move(v);
        grad = zeros_like(value);
    }
    void zero_grad() { grad.fill(T(0)); }
    void register_in(const std::string& path, ParamList<T>& out) { out.push_back({path, &value, &grad}); }
};

inline std::string join_path(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
std::size_t count_parameters(const ParamList<T>& list) {
    std::size_t n = 0;
    for (const auto& p : list) {
        if (!p.is_buffer()) {
            n += p.value->numel();
        }
    }
    return n;
}

template <typename T>
void zero_grads(const ParamList<T>& list) {
    for (const auto& p : list) {
        if (!p.is_buffer()) {
            p.grad->fill(T(0));
        }
    }
}

template <typename T>
const ParamRef<T>& find_param(const ParamList<T>& list, const std::string& path) {
    auto it = std::find_if(list.begin(), list.end(), [&](const ParamRef<T>& p) { return p.path == path; });
    if (it == list.end()) {
        throw std::out_of_range("no parameter at path '" + path + "'");
    }
    return *it;
}

/// Thrown when backward runs without a matching forward.
class StaleCacheError : public std::logic_error {
public:
    explicit StaleCacheError(const std::string& layer)
        : std::logic_error(layer + ": backward called without a matching forward") {}
};

}  // namespace dcf

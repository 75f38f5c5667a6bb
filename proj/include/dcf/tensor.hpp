#pragma once

// Dense row-major N-d tensor. Volumes use the 5-axis layout [B, C, H, W, D].
// No broadcasting beyond scalars; reductions run in ascending linear order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "dcf/rng.hpp"

namespace dcf {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline void validate_shape(const Shape& shape) {
    if (shape.empty()) {
        throw ShapeError("tensor rank must be >= 1");
    }
    for (std::size_t e : shape) {
        if (e == 0) {
            throw ShapeError("zero extent in shape " + shape_str(shape));
        }
    }
}

template <typename T>
constexpr std::string_view dtype_name() {
    if constexpr (std::is_same_v<T, float>) {
        return "f32";
    } else {
        static_assert(std::is_same_v<T, double>, "dcf tensors are f32 or f64");
        return "f64";
    }
}

template <typename T>
class Tensor {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);

public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
        validate_shape(shape_);
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape(shape_);
        if (data_.size() != shape_numel(shape_)) {
            throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
    static Tensor full(Shape shape, T value) { return Tensor(std::move(shape), value); }

    /// i.i.d. N(0, stddev^2) via Box-Muller on the fixed generator.
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        if (!(stddev > 0.0)) {
            throw std::invalid_argument("randn: stddev must be > 0");
        }
        Tensor t(std::move(shape));
        for (auto& v : t.data_) {
            v = static_cast<T>(rng.normal() * stddev);
        }
        return t;
    }

    /// N(0, stddev^2) truncated at two standard deviations.
    static Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) {
            v = static_cast<T>(rng.truncated_normal() * stddev);
        }
        return t;
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) {
            v = static_cast<T>(rng.uniform(lo, hi));
        }
        return t;
    }

    bool empty() const noexcept { return data_.empty(); }
    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const {
        if (axis >= shape_.size()) {
            throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
        }
        return shape_[axis];
    }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }
    const std::vector<T>& vec() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    template <typename... I>
    T& operator()(I... idx) {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }
    template <typename... I>
    const T& operator()(I... idx) const {
        return data_[offset({static_cast<std::size_t>(idx)...})];
    }

    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) {
            throw ShapeError("index rank " + std::to_string(idx.size()) + " vs tensor " + shape_str(shape_));
        }
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[axis]) {
                throw std::out_of_range("index " + std::to_string(i) + " out of range on axis " +
                                        std::to_string(axis) + " of " + shape_str(shape_));
            }
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    Tensor reshape(Shape shape) const {
        validate_shape(shape);
        if (shape_numel(shape) != numel()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        return Tensor(std::move(shape), data_);
    }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<T> data_;
};

template <typename T>
Tensor<T> zeros_like(const Tensor<T>& x) {
    return Tensor<T>::zeros(x.shape());
}

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, std::string_view op) {
    if (a.shape() != b.shape()) {
        throw ShapeError("shape mismatch in " + std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

template <typename T, typename F>
Tensor<T> zip(const Tensor<T>& a, const Tensor<T>& b, std::string_view op, F f) {
    require_same_shape(a, b, op);
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
        out[i] = f(a[i], b[i]);
    }
    return out;
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& a, F f) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) {
        out[i] = f(a[i]);
    }
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::zip(a, b, "add", [](T x, T y) { return x + y; });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::zip(a, b, "sub", [](T x, T y) { return x - y; });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::zip(a, b, "mul", [](T x, T y) { return x * y; });
}
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return detail::map(a, [s](T x) { return x * s; });
}
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
    return detail::map(a, [s](T x) { return x + s; });
}

/// In-place a += b.
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add_inplace");
    T* pa = a.ptr();
    const T* pb = b.ptr();
    for (std::size_t i = 0; i < a.numel(); ++i) {
        pa[i] += pb[i];
    }
}

template <typename T>
T sum_all(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.data()) {
        acc += v;
    }
    return acc;
}

template <typename T>
T mean_all(const Tensor<T>& x) {
    return sum_all(x) / static_cast<T>(x.numel());
}

/// Sum over one axis; the axis is removed (a rank-1 input yields shape [1]).
template <typename T>
Tensor<T> sum(const Tensor<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) {
        throw ShapeError("sum: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    }
    std::size_t outer = 1;
    std::size_t inner = 1;
    for (std::size_t i = 0; i < axis; ++i) {
        outer *= s[i];
    }
    for (std::size_t i = axis + 1; i < s.size(); ++i) {
        inner *= s[i];
    }
    const std::size_t n = s[axis];
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i != axis) {
            out_shape.push_back(s[i]);
        }
    }
    if (out_shape.empty()) {
        out_shape.push_back(1);
    }
    Tensor<T> out(out_shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
            const T* src = x.ptr() + (o * n + k) * inner;
            T* dst = out.ptr() + o * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                dst[i] += src[i];
            }
        }
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
    Tensor<T> s = sum(x, axis);
    return scale(s, T(1) / static_cast<T>(x.dim(axis)));
}

/// General axis permutation: out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const Shape& s = x.shape();
    if (perm.size() != s.size()) {
        throw ShapeError("permute: permutation rank does not match " + shape_str(s));
    }
    std::vector<bool> seen(s.size(), false);
    Shape out_shape(s.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= s.size() || seen[perm[i]]) {
            throw ShapeError("permute: invalid permutation for " + shape_str(s));
        }
        seen[perm[i]] = true;
        out_shape[i] = s[perm[i]];
    }
    std::vector<std::size_t> in_strides(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) {
        in_strides[i - 1] = in_strides[i] * s[i];
    }
    Tensor<T> out(out_shape);
    std::vector<std::size_t> idx(s.size(), 0);
    for (std::size_t lin = 0; lin < out.numel(); ++lin) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            src += idx[i] * in_strides[perm[i]];
        }
        out[lin] = x[src];
        for (std::size_t i = idx.size(); i-- > 0;) {
            if (++idx[i] < out_shape[i]) {
                break;
            }
            idx[i] = 0;
        }
    }
    return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) {
        throw ShapeError("transpose expects rank 2, got " + shape_str(x.shape()));
    }
    return permute(x, {1, 0});
}

/// [M,K] x [K,N] -> [M,N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    Tensor<T> out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        T* row = out.ptr() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* brow = b.ptr() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                row[j] += av * brow[j];
            }
        }
    }
    return out;
}

/// Largest absolute elementwise difference; shapes must match.
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        m = std::max(m, std::fabs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

template <typename T>
bool all_finite(const Tensor<T>& x) {
    return std::all_of(x.data().begin(), x.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace dcf

#pragma once

// Image/text alignment: a hashed bag-of-n-grams text encoder, linear
// projection heads into a shared space, row L2 normalization, cosine
// similarity and the symmetric contrastive loss
//
//   L = -(1/B) sum_i [ log softmax_j(S_ij / tau)[i] + log softmax_j(S_ji / tau)[i] ]
//
// with S_ij = <zt_i, zv_j> for unit rows.

#include <cctype>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dcf/layers/linear.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

inline constexpr std::size_t kTextBuckets = 4096;
inline constexpr std::size_t kEmbedDim = 512;
inline constexpr std::size_t kMaxNgram = 3;
inline constexpr double kNormFloor = 1e-12;

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

/// Lowercased ASCII alphanumeric runs, grouped by sentence ('.', '!', '?',
/// ';' and newlines end a sentence).
inline std::vector<std::vector<std::string>> tokenize_sentences(std::string_view text) {
    std::vector<std::vector<std::string>> out(1);
    std::string tok;
    auto flush = [&] {
        if (!tok.empty()) {
            out.back().push_back(tok);
            tok.clear();
        }
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (c < 0x80 && std::isalnum(c)) {
            tok.push_back(static_cast<char>(std::tolower(c)));
            continue;
        }
        flush();
        if (c == '.' || c == '!' || c == '?' || c == ';' || c == '\n') {
            if (!out.back().empty()) out.emplace_back();
        }
    }
    flush();
    if (out.back().empty() && out.size() > 1) out.pop_back();
    return out;
}

inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> all;
    for (auto& s : tokenize_sentences(text)) {
        for (auto& t : s) all.push_back(std::move(t));
    }
    return all;
}

/// Hashed text features: every word n-gram (n = 1..3) inside a sentence adds
/// one count to bucket fnv1a64(tokens joined by ' ') mod 4096; the vector is
/// scaled by 1/sqrt(number of words, at least 1). N-grams let negation bind
/// to the word it follows ("x is not present" vs "x is present"), which a
/// plain unigram bag cannot express.
template <typename T>
Tensor<T> text_features(std::string_view text) {
    Tensor<T> f = Tensor<T>::zeros({kTextBuckets});
    std::size_t words = 0;
    for (const auto& sent : tokenize_sentences(text)) {
        words += sent.size();
        for (std::size_t i = 0; i < sent.size(); ++i) {
            std::string gram;
            for (std::size_t n = 0; n < kMaxNgram && i + n < sent.size(); ++n) {
                if (n > 0) gram.push_back(' ');
                gram += sent[i + n];
                f[fnv1a64(gram) % kTextBuckets] += T(1);
            }
        }
    }
    const T s = T(1) / static_cast<T>(std::sqrt(static_cast<double>(std::max<std::size_t>(words, 1))));
    for (auto& v : f.data()) v *= s;
    return f;
}

template <typename T>
Tensor<T> text_features_batch(const std::vector<std::string>& texts) {
    if (texts.empty()) throw std::invalid_argument("text batch is empty");
    Tensor<T> out({texts.size(), kTextBuckets});
    for (std::size_t i = 0; i < texts.size(); ++i) {
        const Tensor<T> f = text_features<T>(texts[i]);
        std::copy(f.data().begin(), f.data().end(), out.data().begin() + i * kTextBuckets);
    }
    return out;
}

/// Row-wise y = x / max(|x|, floor) on a [B, D] tensor.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("l2_normalize_rows: expected [B,D], got " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), d = x.dim(1);
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < b; ++i) {
        T ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += x[i * d + j] * x[i * d + j];
        const T n = std::max(static_cast<T>(std::sqrt(ss)), static_cast<T>(kNormFloor));
        for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] / n;
    }
    return y;
}

/// Gradient of l2_normalize_rows wrt x given the upstream gradient gy.
template <typename T>
Tensor<T> l2_normalize_rows_backward(const Tensor<T>& x, const Tensor<T>& gy) {
    if (gy.shape() != x.shape()) throw ShapeError("l2_normalize_rows_backward: " + shape_str(gy.shape()) + " vs " + shape_str(x.shape()));
    const std::size_t b = x.dim(0), d = x.dim(1);
    Tensor<T> gx(x.shape());
    for (std::size_t i = 0; i < b; ++i) {
        T ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += x[i * d + j] * x[i * d + j];
        const T n = static_cast<T>(std::sqrt(ss));
        if (n <= static_cast<T>(kNormFloor)) {
            for (std::size_t j = 0; j < d; ++j) gx[i * d + j] = gy[i * d + j] / static_cast<T>(kNormFloor);
            continue;
        }
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += x[i * d + j] * gy[i * d + j];
        for (std::size_t j = 0; j < d; ++j) {
            gx[i * d + j] = (gy[i * d + j] - x[i * d + j] * dot / (n * n)) / n;
        }
    }
    return gx;
}

/// S_ij = cos(a_i, b_j) for a [Na, D], b [Nb, D].
template <typename T>
Tensor<T> cosine_sim_matrix(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw ShapeError("cosine_sim_matrix: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

template <typename T>
struct ClipLossResult {
    T loss = 0;
    Tensor<T> logits;          // [B,B] = S / tau
    Tensor<T> grad_logits_row;  // text->image term, per row sums to 0
    Tensor<T> grad_logits_col;  // image->text term, per column sums to 0
    Tensor<T> grad_zt;          // [B,D]
    Tensor<T> grad_zv;          // [B,D]
};

/// Symmetric contrastive loss over unit-norm rows zt, zv [B, D]. Row i of
/// both sets is a matched pair.
template <typename T>
ClipLossResult<T> clip_loss(const Tensor<T>& zt, const Tensor<T>& zv, double tau = 1.0) {
    if (zt.rank() != 2 || zt.shape() != zv.shape()) {
        throw ShapeError("clip_loss: " + shape_str(zt.shape()) + " vs " + shape_str(zv.shape()));
    }
    if (!(tau > 0)) throw std::invalid_argument("clip_loss: temperature must be positive");
    const std::size_t b = zt.dim(0);
    if (b == 0) throw std::invalid_argument("clip_loss: empty batch");
    ClipLossResult<T> r;
    r.logits = scale(matmul(zt, transpose(zv)), static_cast<T>(1.0 / tau));
    r.grad_logits_row = Tensor<T>::zeros({b, b});
    r.grad_logits_col = Tensor<T>::zeros({b, b});
    const T inv_b = T(1) / static_cast<T>(b);
    double total = 0;
    // Rows: text i against every image.
    for (std::size_t i = 0; i < b; ++i) {
        T mx = r.logits(i, 0);
        for (std::size_t j = 1; j < b; ++j) mx = std::max(mx, r.logits(i, j));
        T z = 0;
        for (std::size_t j = 0; j < b; ++j) z += std::exp(r.logits(i, j) - mx);
        const T lse = mx + std::log(z);
        total += static_cast<double>(lse - r.logits(i, i));
        for (std::size_t j = 0; j < b; ++j) {
            const T p = std::exp(r.logits(i, j) - lse);
            r.grad_logits_row(i, j) = inv_b * (p - (i == j ? T(1) : T(0)));
        }
    }
    // Columns: image j against every text.
    for (std::size_t j = 0; j < b; ++j) {
        T mx = r.logits(0, j);
        for (std::size_t i = 1; i < b; ++i) mx = std::max(mx, r.logits(i, j));
        T z = 0;
        for (std::size_t i = 0; i < b; ++i) z += std::exp(r.logits(i, j) - mx);
        const T lse = mx + std::log(z);
        total += static_cast<double>(lse - r.logits(j, j));
        for (std::size_t i = 0; i < b; ++i) {
            const T p = std::exp(r.logits(i, j) - lse);
            r.grad_logits_col(i, j) = inv_b * (p - (i == j ? T(1) : T(0)));
        }
    }
    r.loss = static_cast<T>(total / static_cast<double>(b));
    // dL/dS = (row + col) / tau; S = zt zv^T.
    const Tensor<T> gs = scale(add(r.grad_logits_row, r.grad_logits_col), static_cast<T>(1.0 / tau));
    r.grad_zt = matmul(gs, zv);
    r.grad_zv = matmul(transpose(gs), zt);
    return r;
}

/// Linear projection into the shared space followed by row normalization.
template <typename T>
class ProjectionHead {
public:
    ProjectionHead() = default;
    ProjectionHead(std::size_t in, std::size_t out = kEmbedDim) : linear_(in, out) {}

    void init(Rng& rng, double stddev = 0.02) { linear_.init(rng, stddev); }

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache) {
        Tensor<T> h = linear_.forward(x, keep_cache);
        Tensor<T> z = l2_normalize_rows(h);
        if (keep_cache) pre_norm_ = std::move(h);
        return z;
    }

    Tensor<T> backward(const Tensor<T>& gz) {
        if (!pre_norm_) throw StaleCacheError("projection_head");
        Tensor<T> gh = l2_normalize_rows_backward(*pre_norm_, gz);
        pre_norm_.reset();
        return linear_.backward(gh);
    }

    void collect(const std::string& prefix, ParamList<T>& out) { linear_.collect(prefix, out); }
    Linear<T>& linear() { return linear_; }

private:
    Linear<T> linear_;
    std::optional<Tensor<T>> pre_norm_;
};

/// Text side: hashed features -> projection -> unit rows.
template <typename T>
class TextStub {
public:
    TextStub() : head_(kTextBuckets, kEmbedDim) {}

    void init(Rng& rng, double stddev = 0.02) { head_.init(rng, stddev); }

    Tensor<T> forward(const std::vector<std::string>& texts, bool keep_cache) {
        return head_.forward(text_features_batch<T>(texts), keep_cache);
    }
    /// Single report -> [512].
    Tensor<T> encode(const std::string& text) { return forward({text}, false).reshape({kEmbedDim}); }

    void backward(const Tensor<T>& gz) { (void)head_.backward(gz); }
    void collect(const std::string& prefix, ParamList<T>& out) { head_.collect(prefix, out); }
    ProjectionHead<T>& head() { return head_; }

private:
    ProjectionHead<T> head_;
};

}  // namespace dcf

#pragma once

// Evaluation protocols: zero-shot prompt scoring, binary metrics, BCE,
// Recall@k retrieval and a linear probe trained on frozen features.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcf/clip.hpp"
#include "dcf/layers/linear.hpp"
#include "dcf/optim.hpp"
#include "dcf/rng.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

inline constexpr double kDecisionThreshold = 0.5;

// ---------------------------------------------------------------------------
// Zero-shot.

/// Positive component of softmax(sim_pos / tau, sim_neg / tau).
inline double zero_shot_probability(double sim_pos, double sim_neg, double tau = 1.0) {
    if (!(tau > 0)) throw std::invalid_argument("zero-shot: temperature must be positive");
    return 1.0 / (1.0 + std::exp(-(sim_pos - sim_neg) / tau));
}

/// Per-image, per-pathology probabilities. `images` [N, D] need not be
/// normalized; `pos`/`neg` [L, D] are the prompt embeddings.
template <typename T>
std::vector<std::vector<double>> zero_shot_classify(const Tensor<T>& images, const Tensor<T>& pos,
                                                    const Tensor<T>& neg, double tau = 1.0) {
    if (pos.rank() != 2 || pos.shape() != neg.shape()) {
        throw ShapeError("zero-shot: prompt embeddings " + shape_str(pos.shape()) + " vs " + shape_str(neg.shape()));
    }
    const Tensor<T> sp = cosine_sim_matrix(images, pos);
    const Tensor<T> sn = cosine_sim_matrix(images, neg);
    const std::size_t n = images.dim(0), l = pos.dim(0);
    std::vector<std::vector<double>> out(n, std::vector<double>(l));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < l; ++j) {
            out[i][j] = zero_shot_probability(static_cast<double>(sp(i, j)), static_cast<double>(sn(i, j)), tau);
        }
    }
    return out;
}

inline std::vector<std::vector<int>> threshold(const std::vector<std::vector<double>>& probs,
                                               double t = kDecisionThreshold) {
    std::vector<std::vector<int>> out;
    out.reserve(probs.size());
    for (const auto& row : probs) {
        std::vector<int> r;
        for (double p : row) r.push_back(p >= t ? 1 : 0);
        out.push_back(std::move(r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Binary metrics.

struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

    void add(int pred, int label) {
        if (pred && label) ++tp;
        else if (pred) ++fp;
        else if (label) ++fn;
        else ++tn;
    }
    Confusion& operator+=(const Confusion& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    std::size_t total() const { return tp + fp + fn + tn; }
};

/// A ratio whose denominator was zero is reported as 0 with `undefined` set.
struct BinaryMetrics {
    double accuracy = 0, precision = 0, recall = 0, f1 = 0;
    bool precision_undefined = false, recall_undefined = false, f1_undefined = false;

    nlohmann::json to_json() const {
        nlohmann::json j{{"accuracy", accuracy}, {"precision", precision}, {"recall", recall}, {"f1", f1}};
        nlohmann::json flags = nlohmann::json::array();
        if (precision_undefined) flags.push_back("precision_zero_division");
        if (recall_undefined) flags.push_back("recall_zero_division");
        if (f1_undefined) flags.push_back("f1_zero_division");
        j["flags"] = flags;
        return j;
    }
};

inline BinaryMetrics metrics_from_confusion(const Confusion& c) {
    BinaryMetrics m;
    const auto d = [](std::size_t v) { return static_cast<double>(v); };
    m.accuracy = c.total() ? d(c.tp + c.tn) / d(c.total()) : 0.0;
    if (c.tp + c.fp) m.precision = d(c.tp) / d(c.tp + c.fp);
    else m.precision_undefined = true;
    if (c.tp + c.fn) m.recall = d(c.tp) / d(c.tp + c.fn);
    else m.recall_undefined = true;
    if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
    else m.f1_undefined = true;
    return m;
}

inline void check_label_grid(const std::vector<std::vector<int>>& preds, const std::vector<std::vector<int>>& labels) {
    if (preds.size() != labels.size() || preds.empty()) {
        throw std::invalid_argument("metrics: prediction/label counts differ or are empty");
    }
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (preds[i].size() != labels[i].size() || preds[i].size() != labels[0].size()) {
            throw std::invalid_argument("metrics: label length mismatch at sample " + std::to_string(i));
        }
    }
}

inline std::vector<Confusion> per_label_confusion(const std::vector<std::vector<int>>& preds,
                                                  const std::vector<std::vector<int>>& labels) {
    check_label_grid(preds, labels);
    std::vector<Confusion> c(labels[0].size());
    for (std::size_t i = 0; i < preds.size(); ++i) {
        for (std::size_t j = 0; j < c.size(); ++j) c[j].add(preds[i][j], labels[i][j]);
    }
    return c;
}

/// Pooled over every (sample, label) pair.
inline BinaryMetrics micro_metrics(const std::vector<std::vector<int>>& preds,
                                   const std::vector<std::vector<int>>& labels) {
    Confusion all;
    for (const auto& c : per_label_confusion(preds, labels)) all += c;
    return metrics_from_confusion(all);
}

/// Unweighted mean of per-label metrics; a flag is set if any label's was.
inline BinaryMetrics macro_metrics(const std::vector<std::vector<int>>& preds,
                                   const std::vector<std::vector<int>>& labels) {
    const auto per = per_label_confusion(preds, labels);
    BinaryMetrics m;
    for (const auto& c : per) {
        const BinaryMetrics x = metrics_from_confusion(c);
        m.accuracy += x.accuracy;
        m.precision += x.precision;
        m.recall += x.recall;
        m.f1 += x.f1;
        m.precision_undefined |= x.precision_undefined;
        m.recall_undefined |= x.recall_undefined;
        m.f1_undefined |= x.f1_undefined;
    }
    const double n = static_cast<double>(per.size());
    m.accuracy /= n;
    m.precision /= n;
    m.recall /= n;
    m.f1 /= n;
    return m;
}

/// Micro-F1 of predicting every label positive.
inline double all_positive_f1(const std::vector<std::vector<int>>& labels) {
    std::vector<std::vector<int>> ones;
    for (const auto& r : labels) ones.emplace_back(r.size(), 1);
    return micro_metrics(ones, labels).f1;
}

/// {"micro", "macro", "per_pathology": {name: metrics}}.
inline nlohmann::json classification_report(const std::vector<std::vector<int>>& preds,
                                            const std::vector<std::vector<int>>& labels,
                                            const std::vector<std::string>& names) {
    const auto per = per_label_confusion(preds, labels);
    if (names.size() != per.size()) throw std::invalid_argument("metrics: names/labels length mismatch");
    nlohmann::json pp = nlohmann::json::object();
    for (std::size_t j = 0; j < per.size(); ++j) {
        nlohmann::json e = metrics_from_confusion(per[j]).to_json();
        e["support"] = per[j].tp + per[j].fn;
        pp[names[j]] = e;
    }
    return {{"micro", micro_metrics(preds, labels).to_json()},
            {"macro", macro_metrics(preds, labels).to_json()},
            {"per_pathology", pp}};
}

// ---------------------------------------------------------------------------
// Binary cross-entropy on logits.

/// Mean over all entries of softplus(x) - y x, evaluated stably.
template <typename T>
double bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
    if (logits.shape() != targets.shape()) {
        throw ShapeError("bce: " + shape_str(logits.shape()) + " vs " + shape_str(targets.shape()));
    }
    double acc = 0;
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const double x = static_cast<double>(logits[i]);
        const double y = static_cast<double>(targets[i]);
        acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
    }
    return acc / static_cast<double>(logits.numel());
}

template <typename T>
Tensor<T> bce_with_logits_backward(const Tensor<T>& logits, const Tensor<T>& targets) {
    Tensor<T> g(logits.shape());
    const double inv = 1.0 / static_cast<double>(logits.numel());
    for (std::size_t i = 0; i < logits.numel(); ++i) {
        const double x = static_cast<double>(logits[i]);
        const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        g[i] = static_cast<T>((s - static_cast<double>(targets[i])) * inv);
    }
    return g;
}

// ---------------------------------------------------------------------------
// Retrieval.

/// 1-based rank of candidate q for every query q in a [Q, C] score matrix
/// (higher is better; ties go to the lower candidate index).
template <typename T>
std::vector<std::size_t> retrieval_ranks(const Tensor<T>& scores) {
    if (scores.rank() != 2 || scores.dim(1) < scores.dim(0)) {
        throw ShapeError("retrieval: need a [Q, C] matrix with C >= Q, got " + shape_str(scores.shape()));
    }
    const std::size_t q = scores.dim(0), c = scores.dim(1);
    std::vector<std::size_t> ranks(q);
    for (std::size_t i = 0; i < q; ++i) {
        const T s = scores(i, i);
        std::size_t r = 1;
        for (std::size_t j = 0; j < c; ++j) {
            if (scores(i, j) > s || (scores(i, j) == s && j < i)) ++r;
        }
        ranks[i] = r;
    }
    return ranks;
}

inline double recall_at_k(const std::vector<std::size_t>& ranks, std::size_t k) {
    if (ranks.empty()) throw std::invalid_argument("recall@k: no queries");
    std::size_t hit = 0;
    for (std::size_t r : ranks) hit += r <= k;
    return static_cast<double>(hit) / static_cast<double>(ranks.size());
}

/// Recall@k for queries zq against candidates zc (row i matches row i).
template <typename T>
nlohmann::json retrieve(const Tensor<T>& zq, const Tensor<T>& zc, const std::vector<std::size_t>& ks) {
    const auto ranks = retrieval_ranks(cosine_sim_matrix(zq, zc));
    nlohmann::json r = nlohmann::json::object();
    for (std::size_t k : ks) {
        if (k == 0) throw std::invalid_argument("recall@k: k must be >= 1");
        r["R@" + std::to_string(k)] = recall_at_k(ranks, k);
    }
    double mean_rank = 0;
    for (std::size_t x : ranks) mean_rank += static_cast<double>(x);
    return {{"recall", r}, {"mean_rank", mean_rank / static_cast<double>(ranks.size())}, {"queries", ranks.size()}};
}

// ---------------------------------------------------------------------------
// Linear probe on frozen features.

struct FinetuneConfig {
    std::size_t epochs = 100;
    std::size_t batch_size = 32;
    double lr = 1e-2;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;
};

/// Logistic-regression head over precomputed pooled features. Only the head
/// is touched; features come from an encoder run in eval mode.
template <typename T>
class LinearProbe {
public:
    LinearProbe(std::size_t in, std::size_t labels) : linear_(in, labels) {}

    void init(Rng& rng) { linear_.init(rng); }

    Tensor<T> logits(const Tensor<T>& features) { return linear_.forward(features, false); }

    /// Returns the mean training BCE after each epoch.
    std::vector<double> train(const Tensor<T>& features, const Tensor<T>& targets, const FinetuneConfig& cfg) {
        if (features.rank() != 2 || targets.rank() != 2 || features.dim(0) != targets.dim(0)) {
            throw ShapeError("probe: features " + shape_str(features.shape()) + " vs targets " +
                             shape_str(targets.shape()));
        }
        if (targets.dim(1) != linear_.out_features()) {
            throw std::invalid_argument("probe: label length " + std::to_string(targets.dim(1)) + " but head has " +
                                        std::to_string(linear_.out_features()) + " outputs");
        }
        ParamList<T> params;
        linear_.collect("head", params);
        AdamW<T> opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
        const std::size_t n = features.dim(0), f = features.dim(1), l = targets.dim(1);
        const std::size_t bs = std::max<std::size_t>(1, std::min(cfg.batch_size, n));
        std::vector<std::size_t> order(n);
        std::vector<double> history;
        for (std::size_t e = 0; e < cfg.epochs; ++e) {
            for (std::size_t i = 0; i < n; ++i) order[i] = i;
            Rng rng(derive_seed(cfg.seed, e));
            for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
            for (std::size_t s = 0; s < n; s += bs) {
                const std::size_t m = std::min(bs, n - s);
                Tensor<T> xb({m, f}), yb({m, l});
                for (std::size_t r = 0; r < m; ++r) {
                    std::copy_n(features.ptr() + order[s + r] * f, f, xb.ptr() + r * f);
                    std::copy_n(targets.ptr() + order[s + r] * l, l, yb.ptr() + r * l);
                }
                zero_grads(params);
                const Tensor<T> z = linear_.forward(xb, true);
                linear_.backward(bce_with_logits_backward(z, yb));
                opt.step(params);
            }
            history.push_back(bce_with_logits(logits(features), targets));
        }
        return history;
    }

    void collect(const std::string& prefix, ParamList<T>& out) { linear_.collect(prefix, out); }
    Linear<T>& linear() { return linear_; }

private:
    Linear<T> linear_;
};

}  // namespace dcf

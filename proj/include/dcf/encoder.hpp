#pragma once

// Hierarchical DCFormer encoder: a decomposed-convolution stem (H/4) and four
// stages, each opened by max-pool downsampling plus a pointwise channel
// projection and followed by DCFormer blocks:
//
//   x'  = x + BN_h(conv_h x) + BN_w(conv_w x) + BN_d(conv_d x)
//   out = x' + GELU(BN(x') W1 + b1) W2 + b2
//
// Parameter paths:
//   stem.{0..3}.{h,w,d}.weight, stem.{i}.{h,w,d}.bn.{gamma,beta}
//   stage{1..4}.down.proj.{weight,bias}
//   stage{s}.block{j}.mixer.{h,w,d}.weight / .bn.*
//   stage{s}.block{j}.mlp.{bn.*,W1,b1,W2,b2}

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcf/layers/conv.hpp"
#include "dcf/layers/decomposed.hpp"
#include "dcf/layers/linear.hpp"
#include "dcf/layers/norm.hpp"
#include "dcf/layers/pool.hpp"
#include "dcf/rng.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

inline constexpr std::size_t kNumStages = 4;
inline constexpr std::size_t kStemBlocks = 4;

struct StageConfig {
    std::size_t depth = 1;
    std::size_t dim = 32;
    std::size_t kernel = 7;
    std::size_t mlp_ratio = 4;
};

struct StemConfig {
    std::size_t dim = 32;
    std::size_t first_kernel = 7;
    std::size_t first_stride = 4;
    std::size_t kernel = 3;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
    std::string name = "custom";
    std::size_t in_channels = 1;
    StemConfig stem;
    std::array<StageConfig, kNumStages> stages;

    std::size_t embed_dim() const { return stages.back().dim; }

    std::size_t block_count() const {
        std::size_t n = 0;
        for (const auto& s : stages) {
            n += s.depth;
        }
        return n;
    }

    void validate() const {
        auto odd = [](std::size_t k) { return k > 0 && k % 2 == 1; };
        if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
        if (stem.dim < 1) throw ConfigError("stem dim must be >= 1");
        if (!odd(stem.first_kernel) || !odd(stem.kernel)) throw ConfigError("stem kernels must be odd");
        if (stem.first_stride < 1) throw ConfigError("stem stride must be >= 1");
        for (std::size_t i = 0; i < kNumStages; ++i) {
            const auto& s = stages[i];
            const std::string tag = "stage" + std::to_string(i + 1);
            if (s.depth < 1) throw ConfigError(tag + ": depth must be >= 1");
            if (s.dim < 1) throw ConfigError(tag + ": dim must be >= 1");
            if (!odd(s.kernel)) throw ConfigError(tag + ": kernel_size must be odd, got " + std::to_string(s.kernel));
            if (s.mlp_ratio < 1) throw ConfigError(tag + ": mlp_ratio must be >= 1");
        }
    }

    static ModelConfig make(std::string name, std::size_t stem_dim, std::array<std::size_t, 4> dims,
                            std::array<std::size_t, 4> depths, std::size_t kernel = 7, std::size_t mlp_ratio = 4) {
        ModelConfig c;
        c.name = std::move(name);
        c.stem.dim = stem_dim;
        for (std::size_t i = 0; i < kNumStages; ++i) {
            c.stages[i] = {depths[i], dims[i], kernel, mlp_ratio};
        }
        return c;
    }

    static ModelConfig nano() { return make("nano", 32, {32, 64, 128, 256}, {1, 1, 1, 1}); }
    static ModelConfig naive() { return make("naive", 32, {64, 128, 256, 512}, {2, 2, 2, 2}); }
    static ModelConfig tiny() { return make("tiny", 64, {96, 192, 384, 768}, {2, 3, 3, 2}); }
    /// Desk-scale configuration used for end-to-end training runs.
    static ModelConfig micro() { return make("micro", 16, {16, 32, 64, 128}, {1, 1, 1, 1}); }

    static ModelConfig by_name(const std::string& n) {
        if (n == "nano") return nano();
        if (n == "naive") return naive();
        if (n == "tiny") return tiny();
        if (n == "micro") return micro();
        throw ConfigError("unknown variant '" + n + "' (expected nano, naive, tiny or micro)");
    }

    nlohmann::json to_json() const {
        nlohmann::json dims = nlohmann::json::array();
        nlohmann::json depths = nlohmann::json::array();
        nlohmann::json kernels = nlohmann::json::array();
        nlohmann::json ratios = nlohmann::json::array();
        for (const auto& s : stages) {
            dims.push_back(s.dim);
            depths.push_back(s.depth);
            kernels.push_back(s.kernel);
            ratios.push_back(s.mlp_ratio);
        }
        return {{"name", name},     {"in_channels", in_channels}, {"stem_dim", stem.dim},
                {"dims", dims},     {"depths", depths},           {"kernel_size", kernels},
                {"mlp_ratio", ratios}, {"stem_first_kernel", stem.first_kernel},
                {"stem_first_stride", stem.first_stride}, {"stem_kernel", stem.kernel}};
    }

    /// Accepts {name, in_channels?, stem_dim, dims[4], depths[4],
    /// kernel_size (int or [4])?, mlp_ratio (int or [4])?, stem_first_kernel?,
    /// stem_first_stride?, stem_kernel?}. Unknown keys are rejected.
    static ModelConfig from_json(const nlohmann::json& j) {
        static const std::array<std::string, 10> known{"name",        "in_channels",       "stem_dim",
                                                       "dims",        "depths",            "kernel_size",
                                                       "mlp_ratio",   "stem_first_kernel", "stem_first_stride",
                                                       "stem_kernel"};
        if (!j.is_object()) throw ConfigError("model config must be a JSON object");
        for (const auto& [key, _] : j.items()) {
            if (std::find(known.begin(), known.end(), key) == known.end()) {
                throw ConfigError("unknown model config key '" + key + "'");
            }
        }
        auto need = [&](const char* key) -> const nlohmann::json& {
            if (!j.contains(key)) throw ConfigError(std::string("model config missing '") + key + "'");
            return j.at(key);
        };
        auto positive = [](const nlohmann::json& v, const std::string& what) -> std::size_t {
            if (!v.is_number_integer() || v.get<long long>() < 1) {
                throw ConfigError(what + " must be a positive integer");
            }
            return v.get<std::size_t>();
        };
        auto four = [&](const nlohmann::json& v, const std::string& what) {
            std::array<std::size_t, 4> out{};
            if (v.is_number_integer()) {
                out.fill(positive(v, what));
                return out;
            }
            if (!v.is_array() || v.size() != kNumStages) {
                throw ConfigError(what + " must list exactly 4 stages");
            }
            for (std::size_t i = 0; i < kNumStages; ++i) out[i] = positive(v[i], what);
            return out;
        };
        ModelConfig c;
        c.name = j.value("name", std::string("custom"));
        c.in_channels = j.contains("in_channels") ? positive(j.at("in_channels"), "in_channels") : 1;
        c.stem.dim = positive(need("stem_dim"), "stem_dim");
        if (j.contains("stem_first_kernel")) c.stem.first_kernel = positive(j.at("stem_first_kernel"), "stem_first_kernel");
        if (j.contains("stem_first_stride")) c.stem.first_stride = positive(j.at("stem_first_stride"), "stem_first_stride");
        if (j.contains("stem_kernel")) c.stem.kernel = positive(j.at("stem_kernel"), "stem_kernel");
        if (!need("dims").is_array() || !need("depths").is_array()) {
            throw ConfigError("dims and depths must be arrays of 4");
        }
        const auto dims = four(j.at("dims"), "dims");
        const auto depths = four(j.at("depths"), "depths");
        const auto kernels = j.contains("kernel_size") ? four(j.at("kernel_size"), "kernel_size")
                                                       : std::array<std::size_t, 4>{7, 7, 7, 7};
        const auto ratios = j.contains("mlp_ratio") ? four(j.at("mlp_ratio"), "mlp_ratio")
                                                    : std::array<std::size_t, 4>{4, 4, 4, 4};
        for (std::size_t i = 0; i < kNumStages; ++i) {
            c.stages[i] = {depths[i], dims[i], kernels[i], ratios[i]};
        }
        c.validate();
        return c;
    }
};

/// Spatial extents [H, W, D] after the stem and after every stage, computed
/// from the stride/pool formulas alone. Throws when an input is too small to
/// survive the four downsampling steps.
struct StageExtents {
    std::array<std::size_t, 3> stem{};
    std::array<std::array<std::size_t, 3>, kNumStages> stages{};
};

inline StageExtents stage_extents(const ModelConfig& cfg, std::array<std::size_t, 3> input) {
    StageExtents out;
    for (std::size_t a = 0; a < 3; ++a) {
        if (input[a] == 0) {
            throw ShapeError("input extents must be positive");
        }
        out.stem[a] = conv_out_extent(input[a], cfg.stem.first_kernel, cfg.stem.first_kernel / 2, cfg.stem.first_stride);
    }
    auto prev = out.stem;
    for (std::size_t s = 0; s < kNumStages; ++s) {
        for (std::size_t a = 0; a < 3; ++a) {
            if (prev[a] < 2) {
                throw ShapeError("input " + std::to_string(input[0]) + "x" + std::to_string(input[1]) + "x" +
                                 std::to_string(input[2]) + " too small: stage" + std::to_string(s + 1) +
                                 " downsampling receives extent " + std::to_string(prev[a]) + " on axis " +
                                 "HWD"[a]);
            }
            out.stages[s][a] = conv_out_extent(prev[a], 3, 1, 2);
        }
        prev = out.stages[s];
    }
    return out;
}

/// One DCFormer block (token mixer + channel MLP, both residual).
template <typename T>
class DCFormerBlock {
public:
    DCFormerBlock() = default;
    DCFormerBlock(std::size_t dim, std::size_t kernel, std::size_t mlp_ratio)
        : dim_(dim),
          mixer_(DecompConvOptions{dim, dim, kernel, 1, BranchMixing::Depthwise, true, false}),
          mlp_(dim, mlp_ratio) {}

    void init(Rng& rng) {
        mixer_.init(rng);
        mlp_.init(rng);
    }

    Tensor<T> forward(const Tensor<T>& x, NormMode mode, bool keep_cache) {
        const VolumeDims in = volume_dims(x, "dcformer_block");
        if (in.c != dim_) {
            throw ShapeError("dcformer_block: input " + shape_str(x.shape()) + " vs block dim " + std::to_string(dim_));
        }
        Tensor<T> mixed = mixer_.forward(x, mode, keep_cache);
        add_inplace(mixed, x);
        return mlp_.forward(mixed, mode, keep_cache);
    }

    Tensor<T> backward(const Tensor<T>& gy) {
        Tensor<T> g_mid = mlp_.backward(gy);
        Tensor<T> gx = mixer_.backward(g_mid);
        add_inplace(gx, g_mid);
        return gx;
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        mixer_.collect(join_path(prefix, "mixer"), out);
        mlp_.collect(join_path(prefix, "mlp"), out);
    }

    DecomposedConv3d<T>& mixer() { return mixer_; }
    ChannelMlp<T>& mlp() { return mlp_; }

private:
    std::size_t dim_ = 0;
    DecomposedConv3d<T> mixer_;
    ChannelMlp<T> mlp_;
};

/// Stage entry: 3x3x3/2 max pooling followed by a pointwise projection.
template <typename T>
class Downsample {
public:
    Downsample() = default;
    Downsample(std::size_t cin, std::size_t cout) : pool_(3, 2, 1), proj_(cin, cout, 1, 1) {}

    void init(Rng& rng) { proj_.init(rng); }

    Tensor<T> forward(const Tensor<T>& x, bool keep_cache) {
        return proj_.forward(pool_.forward(x, keep_cache), keep_cache);
    }

    Tensor<T> backward(const Tensor<T>& gy) { return pool_.backward(proj_.backward(gy)); }

    void collect(const std::string& prefix, ParamList<T>& out) { proj_.collect(join_path(prefix, "proj"), out); }

    DenseConv3d<T>& proj() { return proj_; }

private:
    MaxPool3d<T> pool_;
    DenseConv3d<T> proj_;
};

template <typename T>
struct FeaturePyramid {
    Tensor<T> stem;
    std::array<Tensor<T>, kNumStages> stages;
    Tensor<T> pooled;  // [B, embed_dim]
};

template <typename T>
class Encoder {
public:
    Encoder(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        const std::size_t sd = cfg_.stem.dim;
        stem_.emplace_back(DecompConvOptions{cfg_.in_channels, sd, cfg_.stem.first_kernel, cfg_.stem.first_stride,
                                             BranchMixing::Dense, true, true});
        for (std::size_t i = 1; i < kStemBlocks; ++i) {
            stem_.emplace_back(DecompConvOptions{sd, sd, cfg_.stem.kernel, 1, BranchMixing::Dense, true, true});
        }
        std::size_t prev = sd;
        for (std::size_t s = 0; s < kNumStages; ++s) {
            const StageConfig& sc = cfg_.stages[s];
            Stage st;
            st.down = Downsample<T>(prev, sc.dim);
            for (std::size_t b = 0; b < sc.depth; ++b) {
                st.blocks.emplace_back(sc.dim, sc.kernel, sc.mlp_ratio);
            }
            stages_.push_back(std::move(st));
            prev = sc.dim;
        }
        Rng rng(seed);
        for (auto& b : stem_) {
            b.init(rng);
        }
        for (auto& st : stages_) {
            st.down.init(rng);
            for (auto& b : st.blocks) {
                b.init(rng);
            }
        }
    }

    const ModelConfig& config() const { return cfg_; }

    FeaturePyramid<T> forward(const Tensor<T>& x, NormMode mode, bool keep_cache = false) {
        const VolumeDims in = volume_dims(x, "encoder");
        if (in.c != cfg_.in_channels) {
            throw ShapeError("encoder: input " + shape_str(x.shape()) + " must have " +
                             std::to_string(cfg_.in_channels) + " channel(s)");
        }
        stage_extents(cfg_, {in.h, in.w, in.d});
        FeaturePyramid<T> out;
        Tensor<T> h = x;
        for (auto& b : stem_) {
            h = b.forward(h, mode, keep_cache);
        }
        out.stem = h;
        for (std::size_t s = 0; s < kNumStages; ++s) {
            h = stages_[s].down.forward(h, keep_cache);
            for (auto& b : stages_[s].blocks) {
                h = b.forward(h, mode, keep_cache);
            }
            out.stages[s] = h;
        }
        input_shape_ = out.stages.back().shape();
        out.pooled = global_avg_pool(out.stages.back());
        return out;
    }

    /// Pooled embedding only; eval mode, nothing cached.
    Tensor<T> embed(const Tensor<T>& x) { return forward(x, NormMode::Eval, false).pooled; }

    /// Backpropagates a gradient on the pooled embedding; returns grad wrt input.
    Tensor<T> backward(const Tensor<T>& grad_pooled) {
        Tensor<T> g = global_avg_pool_backward(grad_pooled, input_shape_);
        for (std::size_t s = kNumStages; s-- > 0;) {
            auto& blocks = stages_[s].blocks;
            for (std::size_t b = blocks.size(); b-- > 0;) {
                g = blocks[b].backward(g);
            }
            g = stages_[s].down.backward(g);
        }
        for (std::size_t b = stem_.size(); b-- > 0;) {
            g = stem_[b].backward(g);
        }
        return g;
    }

    ParamList<T> parameters() {
        ParamList<T> out;
        for (std::size_t i = 0; i < stem_.size(); ++i) {
            stem_[i].collect("stem." + std::to_string(i), out);
        }
        for (std::size_t s = 0; s < kNumStages; ++s) {
            const std::string p = "stage" + std::to_string(s + 1);
            stages_[s].down.collect(p + ".down", out);
            for (std::size_t b = 0; b < stages_[s].blocks.size(); ++b) {
                stages_[s].blocks[b].collect(p + ".block" + std::to_string(b), out);
            }
        }
        return out;
    }

    std::size_t parameter_count() { return count_parameters(parameters()); }

    DecomposedConv3d<T>& stem_block(std::size_t i) { return stem_.at(i); }
    DCFormerBlock<T>& block(std::size_t stage, std::size_t i) { return stages_.at(stage).blocks.at(i); }
    Downsample<T>& downsample(std::size_t stage) { return stages_.at(stage).down; }

private:
    struct Stage {
        Downsample<T> down;
        std::vector<DCFormerBlock<T>> blocks;
    };

    ModelConfig cfg_;
    std::vector<DecomposedConv3d<T>> stem_;
    std::vector<Stage> stages_;
    Shape input_shape_;
};

template <typename T>
Encoder<T> build_encoder(const ModelConfig& cfg, std::uint64_t seed) {
    return Encoder<T>(cfg, seed);
}

}  // namespace dcf

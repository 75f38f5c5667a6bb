#pragma once

// Contrastive training and the checkpoint-driven evaluation commands.
//
// Run outputs (all under RunConfig::output):
//   checkpoint.dcf   model parameters, BN statistics and AdamW moments
//   loss.csv         "step,clip_loss" per optimizer step
//   train_summary.json

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcf/checkpoint.hpp"
#include "dcf/clip.hpp"
#include "dcf/encoder.hpp"
#include "dcf/eval.hpp"
#include "dcf/optim.hpp"
#include "dcf/parallel.hpp"
#include "dcf/synth.hpp"

namespace dcf {

inline constexpr const char* kCheckpointFile = "checkpoint.dcf";
inline constexpr const char* kLossFile = "loss.csv";

// ---------------------------------------------------------------------------
// Run configuration.

struct RunConfig {
    ModelConfig model = ModelConfig::micro();
    std::uint64_t seed = 42;
    std::string dataset;
    std::size_t epochs = 15;
    std::size_t batch_size = 8;
    double lr = 1e-5;
    double weight_decay = 0.01;
    double tau = 1.0;
    std::string output;
    std::string dtype = "f32";
    bool strict_determinism = false;
    bool resume = false;
    std::size_t max_steps = 0;  // 0: no cap

    /// Field order and defaults, as printed by --help.
    static const char* schema() {
        return "{\n"
               "  \"variant\": \"micro\",          nano | naive | tiny | micro (or \"model\": {custom config})\n"
               "  \"seed\": 42,\n"
               "  \"dataset\": <dir, required>,    output of gen-data\n"
               "  \"epochs\": 15,\n"
               "  \"batch_size\": 8,\n"
               "  \"lr\": 1e-5,                    AdamW learning rate\n"
               "  \"weight_decay\": 0.01,\n"
               "  \"tau\": 1.0,                    contrastive temperature\n"
               "  \"output\": <dir, required>,\n"
               "  \"dtype\": \"f32\",                f32 | f64\n"
               "  \"strict_determinism\": false,   single-threaded, bit-reproducible\n"
               "  \"resume\": false,               continue from <output>/checkpoint.dcf\n"
               "  \"max_steps\": 0                 stop after this many total steps (0: no cap)\n"
               "}";
    }

    nlohmann::json to_json() const {
        return {{"model", model.to_json()},
                {"seed", seed},
                {"dataset", dataset},
                {"epochs", epochs},
                {"batch_size", batch_size},
                {"lr", lr},
                {"weight_decay", weight_decay},
                {"tau", tau},
                {"output", output},
                {"dtype", dtype},
                {"strict_determinism", strict_determinism},
                {"resume", resume},
                {"max_steps", max_steps}};
    }

    static RunConfig from_json(const nlohmann::json& j) {
        static const std::vector<std::string> known{"variant", "model", "seed",   "dataset", "epochs",
                                                    "batch_size", "lr", "weight_decay", "tau", "output",
                                                    "dtype", "strict_determinism", "resume", "max_steps"};
        if (!j.is_object()) throw ConfigError("run config must be a JSON object");
        for (const auto& [k, _] : j.items()) {
            if (std::find(known.begin(), known.end(), k) == known.end()) {
                throw ConfigError("unknown run config key '" + k + "'");
            }
        }
        RunConfig r;
        try {
            if (j.contains("variant") && j.contains("model")) {
                throw ConfigError("run config: give either 'variant' or 'model', not both");
            }
            if (j.contains("variant")) r.model = ModelConfig::by_name(j.at("variant").get<std::string>());
            if (j.contains("model")) r.model = ModelConfig::from_json(j.at("model"));
            r.seed = j.value("seed", r.seed);
            r.dataset = j.value("dataset", r.dataset);
            r.epochs = j.value("epochs", r.epochs);
            r.batch_size = j.value("batch_size", r.batch_size);
            r.lr = j.value("lr", r.lr);
            r.weight_decay = j.value("weight_decay", r.weight_decay);
            r.tau = j.value("tau", r.tau);
            r.output = j.value("output", r.output);
            r.dtype = j.value("dtype", r.dtype);
            r.strict_determinism = j.value("strict_determinism", r.strict_determinism);
            r.resume = j.value("resume", r.resume);
            r.max_steps = j.value("max_steps", r.max_steps);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("run config: ") + e.what());
        }
        r.validate();
        return r;
    }

    void validate() const {
        model.validate();
        if (dataset.empty()) throw ConfigError("run config: 'dataset' is required");
        if (output.empty()) throw ConfigError("run config: 'output' is required");
        if (batch_size < 2) throw ConfigError("run config: batch_size must be >= 2");
        if (!(lr >= 0)) throw ConfigError("run config: lr must be >= 0");
        if (!(tau > 0)) throw ConfigError("run config: tau must be positive");
        if (dtype != "f32" && dtype != "f64") throw ConfigError("run config: dtype must be f32 or f64");
    }
};

// ---------------------------------------------------------------------------
// Model.

/// Image encoder + image projection + hashed text encoder.
/// Paths: encoder paths as-is, "image_proj.*", "text_proj.*".
template <typename T>
class ClipModel {
public:
    ClipModel(const ModelConfig& cfg, std::uint64_t seed)
        : encoder_(cfg, derive_seed(seed, 1)), image_proj_(cfg.embed_dim(), kEmbedDim) {
        Rng rng(derive_seed(seed, 2));
        image_proj_.init(rng);
        text_.init(rng);
    }

    ParamList<T> parameters() {
        ParamList<T> out = encoder_.parameters();
        image_proj_.collect("image_proj", out);
        text_.collect("text_proj", out);
        return out;
    }

    /// One contrastive forward/backward; gradients accumulate into params.
    ClipLossResult<T> forward_backward(const Tensor<T>& volumes, const std::vector<std::string>& reports,
                                       double tau) {
        const auto pyr = encoder_.forward(volumes, NormMode::Train, true);
        const Tensor<T> zv = image_proj_.forward(pyr.pooled, true);
        const Tensor<T> zt = text_.forward(reports, true);
        auto r = clip_loss(zt, zv, tau);
        encoder_.backward(image_proj_.backward(r.grad_zv));
        text_.backward(r.grad_zt);
        return r;
    }

    /// Unit image embeddings [B, 512] in eval mode.
    Tensor<T> embed_images(const Tensor<T>& volumes) { return image_proj_.forward(encoder_.embed(volumes), false); }
    Tensor<T> embed_texts(const std::vector<std::string>& texts) { return text_.forward(texts, false); }

    Encoder<T>& encoder() { return encoder_; }
    ProjectionHead<T>& image_proj() { return image_proj_; }
    TextStub<T>& text() { return text_; }

private:
    Encoder<T> encoder_;
    ProjectionHead<T> image_proj_;
    TextStub<T> text_;
};

// ---------------------------------------------------------------------------
// Data batches.

/// Stacks [1,H,W,D] volumes into [B,1,H,W,D] in the requested precision.
template <typename T>
Tensor<T> load_batch(const Dataset& ds, const std::vector<std::size_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("empty batch");
    Tensor<T> out;
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const Tensor<float> v = ds.volume(idx[b]);
        if (b == 0) {
            Shape s = v.shape();
            s.insert(s.begin(), idx.size());
            out = Tensor<T>(s);
        } else if (v.numel() * idx.size() != out.numel()) {
            throw FormatError("volume " + ds.entries[idx[b]].volume_path + " has shape " + shape_str(v.shape()) +
                              ", expected the batch's common shape");
        }
        std::transform(v.ptr(), v.ptr() + v.numel(), out.ptr() + b * v.numel(),
                       [](float x) { return static_cast<T>(x); });
    }
    return out;
}

template <typename T>
Tensor<T> embed_dataset_images(ClipModel<T>& model, const Dataset& ds, const std::vector<std::size_t>& idx,
                               std::size_t batch = 8) {
    Tensor<T> out({idx.size(), kEmbedDim});
    for (std::size_t s = 0; s < idx.size(); s += batch) {
        const std::vector<std::size_t> part(idx.begin() + s, idx.begin() + std::min(idx.size(), s + batch));
        const Tensor<T> z = model.embed_images(load_batch<T>(ds, part));
        std::copy(z.ptr(), z.ptr() + z.numel(), out.ptr() + s * kEmbedDim);
    }
    return out;
}

template <typename T>
Tensor<T> encoder_features(Encoder<T>& enc, const Dataset& ds, const std::vector<std::size_t>& idx,
                           std::size_t batch = 8) {
    const std::size_t d = enc.config().embed_dim();
    Tensor<T> out({idx.size(), d});
    for (std::size_t s = 0; s < idx.size(); s += batch) {
        const std::vector<std::size_t> part(idx.begin() + s, idx.begin() + std::min(idx.size(), s + batch));
        const Tensor<T> f = enc.embed(load_batch<T>(ds, part));
        std::copy(f.ptr(), f.ptr() + f.numel(), out.ptr() + s * d);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints.

/// `epoch` and `batch` locate the next batch to run, so an interrupted run
/// resumes exactly where it stopped.
template <typename T>
nlohmann::json checkpoint_meta(const RunConfig& run, std::uint64_t step, std::size_t epoch, std::size_t batch) {
    // Invocation details (output dir, resume, step cap) stay out so that equivalent
    // runs produce byte-identical files.
    nlohmann::json r = run.to_json();
    r.erase("output");
    r.erase("resume");
    r.erase("max_steps");
    return {{"model", run.model.to_json()}, {"run", r}, {"step", step},
            {"epoch", epoch},               {"batch", batch},       {"tau", run.tau},
            {"dtype", std::string(dtype_name<T>())},
            {"text", {{"buckets", kTextBuckets}, {"max_ngram", kMaxNgram}}}};
}

/// Checkpoint payload: model tensors then optimizer moments.
template <typename T>
void save_run_checkpoint(const std::string& path, const RunConfig& run, ClipModel<T>& model, AdamW<T>& opt,
                         std::size_t epoch, std::size_t batch) {
    ParamList<T> all = model.parameters();
    for (const auto& p : opt.state()) all.push_back(p);
    save_checkpoint(path, checkpoint_meta<T>(run, opt.steps(), epoch, batch), all);
}

struct LoadedModelInfo {
    nlohmann::json meta;
    ModelConfig model;
    double tau = 1.0;
};

/// Rebuilds a ClipModel from a checkpoint file.
template <typename T>
ClipModel<T> load_clip_model(const std::string& path, LoadedModelInfo* info = nullptr) {
    const auto ck = load_checkpoint<T>(path);
    ModelConfig cfg;
    try {
        cfg = ModelConfig::from_json(ck.meta.at("model"));
    } catch (const std::exception& e) {
        throw FormatError("checkpoint '" + path + "' has no usable model config: " + e.what());
    }
    ClipModel<T> model(cfg, 0);
    restore_parameters(ck, model.parameters());
    if (info) {
        info->meta = ck.meta;
        info->model = cfg;
        info->tau = ck.meta.value("tau", 1.0);
    }
    return model;
}

/// dtype recorded in a checkpoint's manifest meta.
inline std::string checkpoint_dtype(const std::string& path) {
    const auto ck = load_checkpoint<float>(path);
    return ck.meta.value("dtype", std::string("f32"));
}

// ---------------------------------------------------------------------------
// Training.

struct TrainResult {
    std::vector<double> losses;  // every step of this invocation
    double initial_loss = 0;     // step-0 loss of the run (from loss.csv on resume)
    double final_epoch_loss = 0;  // mean over the last completed epoch
    std::uint64_t steps = 0;     // total optimizer steps, including resumed ones
    std::size_t epochs_done = 0;
    double seconds = 0;

    nlohmann::json to_json() const {
        return {{"initial_loss", initial_loss}, {"final_epoch_loss", final_epoch_loss}, {"steps", steps},
                {"epochs", epochs_done},        {"seconds", seconds}};
    }
};

namespace detail {

inline std::vector<std::pair<std::uint64_t, double>> read_loss_csv(const std::string& path) {
    std::vector<std::pair<std::uint64_t, double>> rows;
    std::istringstream in(io::read_file(path));
    std::string line;
    std::getline(in, line);
    if (line != "step,clip_loss") throw FormatError(path + ": unexpected header '" + line + "'");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw FormatError(path + ": malformed row '" + line + "'");
        rows.emplace_back(std::stoull(line.substr(0, comma)), std::stod(line.substr(comma + 1)));
    }
    return rows;
}

inline std::string format_loss(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

/// Epoch e visits the training split in the order fixed by derive_seed(seed, 1000 + e);
/// the trailing partial batch is kept when it has at least two samples.
inline std::vector<std::vector<std::size_t>> epoch_batches(const std::vector<std::size_t>& train, std::size_t bs,
                                                           std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order = train;
    Rng rng(derive_seed(seed, 1000 + epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < order.size(); s += bs) {
        const std::size_t e = std::min(order.size(), s + bs);
        if (e - s >= 2) out.emplace_back(order.begin() + s, order.begin() + e);
    }
    return out;
}

template <typename T>
TrainResult train_clip(const RunConfig& run, std::ostream* log = nullptr) {
    run.validate();
    const auto t0 = std::chrono::steady_clock::now();
    parallel::set_strict(run.strict_determinism);
    const Dataset ds = load_dataset(run.dataset);
    const auto train_idx = ds.indices("train");
    if (train_idx.size() < 2) throw FormatError("dataset has fewer than two training samples");

    const std::filesystem::path out(run.output);
    std::filesystem::create_directories(out);
    const std::string ck_path = (out / kCheckpointFile).string();
    const std::string loss_path = (out / kLossFile).string();

    ClipModel<T> model(run.model, run.seed);
    AdamW<T> opt({run.lr, 0.9, 0.999, 1e-8, run.weight_decay});
    std::size_t start_epoch = 0, start_batch = 0;
    std::string loss_csv = "step,clip_loss\n";
    TrainResult res;

    if (run.resume) {
        const auto ck = load_checkpoint<T>(ck_path);
        if (ck.meta.value("model", nlohmann::json()) != run.model.to_json()) {
            throw ConfigError("resume: checkpoint model config differs from the run config");
        }
        restore_parameters(ck, model.parameters());
        for (const auto& p : model.parameters()) {
            if (p.is_buffer()) continue;
            const std::string m = "adam.m." + p.path, v = "adam.v." + p.path;
            if (ck.has(m) && ck.has(v)) opt.load_moments(p.path, ck.at(m), ck.at(v));
        }
        opt.set_steps(ck.meta.at("step").template get<std::uint64_t>());
        start_epoch = ck.meta.at("epoch").template get<std::size_t>();
        start_batch = ck.meta.value("batch", std::size_t{0});
        // Keep the log consistent with the checkpoint: drop rows past its step.
        for (const auto& [s, l] : detail::read_loss_csv(loss_path)) {
            if (s >= opt.steps()) break;
            if (s == 0) res.initial_loss = l;
            loss_csv += std::to_string(s) + "," + detail::format_loss(l) + "\n";
        }
    }

    ParamList<T> params = model.parameters();
    std::size_t epoch = start_epoch, next_batch = start_batch;
    bool capped = false;
    for (; epoch < run.epochs; ++epoch, next_batch = 0) {
        const auto batches = epoch_batches(train_idx, run.batch_size, run.seed, epoch);
        double epoch_sum = 0;
        std::size_t epoch_n = 0;
        for (; next_batch < batches.size(); ++next_batch) {
            if (run.max_steps && opt.steps() >= run.max_steps) {
                capped = true;
                break;
            }
            const auto& batch = batches[next_batch];
            std::vector<std::string> reports;
            for (std::size_t i : batch) reports.push_back(ds.entries[i].report);
            const Tensor<T> x = load_batch<T>(ds, batch);
            zero_grads(params);
            const double loss = static_cast<double>(model.forward_backward(x, reports, run.tau).loss);
            if (!std::isfinite(loss)) throw std::runtime_error("training diverged (non-finite loss)");
            if (opt.steps() == 0) res.initial_loss = loss;
            loss_csv += std::to_string(opt.steps()) + "," + detail::format_loss(loss) + "\n";
            opt.step(params);
            res.losses.push_back(loss);
            epoch_sum += loss;
            ++epoch_n;
        }
        if (capped) break;
        res.epochs_done = epoch + 1;
        if (epoch_n > 0 && next_batch == epoch_n) {
            res.final_epoch_loss = epoch_sum / static_cast<double>(epoch_n);
        }
        if (log) {
            *log << "epoch " << epoch + 1 << "/" << run.epochs << "  mean clip_loss "
                 << epoch_sum / static_cast<double>(std::max<std::size_t>(epoch_n, 1)) << "  steps " << opt.steps()
                 << "\n";
            log->flush();
        }
        io::write_file(loss_path, loss_csv);
        save_run_checkpoint(ck_path, run, model, opt, epoch + 1, 0);
    }
    if (!capped) next_batch = 0;
    if (res.epochs_done == 0) res.epochs_done = epoch;
    io::write_file(loss_path, loss_csv);
    save_run_checkpoint(ck_path, run, model, opt, epoch, next_batch);
    res.steps = opt.steps();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    io::write_file((out / "train_summary.json").string(), res.to_json().dump(2) + "\n");
    return res;
}

inline TrainResult train_clip_any(const RunConfig& run, std::ostream* log = nullptr) {
    return run.dtype == "f64" ? train_clip<double>(run, log) : train_clip<float>(run, log);
}

// ---------------------------------------------------------------------------
// Evaluation commands. Results carry no timing so reruns are byte-identical.

template <typename T>
nlohmann::json eval_zeroshot(const std::string& ckpt, const std::string& data_dir, const std::string& split = "val") {
    LoadedModelInfo info;
    ClipModel<T> model = load_clip_model<T>(ckpt, &info);
    const Dataset ds = load_dataset(data_dir);
    const auto idx = ds.indices(split);
    if (idx.empty()) throw FormatError("dataset split '" + split + "' is empty");
    std::vector<std::string> pos, neg;
    for (const auto& n : ds.names) {
        pos.push_back(positive_prompt(n));
        neg.push_back(negative_prompt(n));
    }
    const Tensor<T> zi = embed_dataset_images(model, ds, idx);
    const auto probs = zero_shot_classify(zi, model.embed_texts(pos), model.embed_texts(neg), info.tau);
    const auto preds = threshold(probs);
    std::vector<std::vector<int>> labels;
    for (std::size_t i : idx) labels.push_back(ds.entries[i].labels);
    nlohmann::json prompts = nlohmann::json::array();
    for (std::size_t j = 0; j < ds.names.size(); ++j) {
        prompts.push_back({{"pathology", ds.names[j]}, {"positive", pos[j]}, {"negative", neg[j]}});
    }
    return {{"task", "zero-shot"},
            {"variant", info.model.name},
            {"split", split},
            {"samples", idx.size()},
            {"tau", info.tau},
            {"threshold", kDecisionThreshold},
            {"prompts", prompts},
            {"metrics", classification_report(preds, labels, ds.names)},
            {"baseline_all_positive_f1", all_positive_f1(labels)}};
}

template <typename T>
nlohmann::json eval_retrieval(const std::string& ckpt, const std::string& data_dir, const std::vector<std::size_t>& ks,
                              const std::string& split = "val") {
    LoadedModelInfo info;
    ClipModel<T> model = load_clip_model<T>(ckpt, &info);
    const Dataset ds = load_dataset(data_dir);
    const auto idx = ds.indices(split);
    if (idx.empty()) throw FormatError("dataset split '" + split + "' is empty");
    std::vector<std::string> reports;
    for (std::size_t i : idx) reports.push_back(ds.entries[i].report);
    const Tensor<T> zi = embed_dataset_images(model, ds, idx);
    const Tensor<T> zt = model.embed_texts(reports);
    return {{"task", "retrieval"},
            {"variant", info.model.name},
            {"split", split},
            {"samples", idx.size()},
            {"text_to_image", retrieve(zt, zi, ks)},
            {"image_to_text", retrieve(zi, zt, ks)}};
}

template <typename T>
nlohmann::json eval_finetune(const std::string& ckpt, const std::string& data_dir, const FinetuneConfig& cfg,
                             const std::string& head_out = "") {
    LoadedModelInfo info;
    ClipModel<T> model = load_clip_model<T>(ckpt, &info);
    const Dataset ds = load_dataset(data_dir);
    const auto tr = ds.indices("train");
    const auto va = ds.indices("val");
    if (tr.empty()) throw FormatError("dataset has no training samples");
    const ParamList<T> enc_params = model.encoder().parameters();
    const std::uint64_t before = parameter_checksum(enc_params);

    auto targets = [&](const std::vector<std::size_t>& idx) {
        Tensor<T> y({idx.size(), ds.names.size()});
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t c = 0; c < ds.names.size(); ++c) y(r, c) = static_cast<T>(ds.entries[idx[r]].labels[c]);
        return y;
    };
    const Tensor<T> ftr = encoder_features(model.encoder(), ds, tr);
    const Tensor<T> ytr = targets(tr);
    LinearProbe<T> probe(ftr.dim(1), ds.names.size());
    Rng rng(derive_seed(cfg.seed, 7));
    probe.init(rng);
    const double bce0 = bce_with_logits(probe.logits(ftr), ytr);
    const auto history = probe.train(ftr, ytr, cfg);
    const std::uint64_t after = parameter_checksum(enc_params);

    auto probs_of = [&](const Tensor<T>& logits) {
        std::vector<std::vector<double>> p(logits.dim(0), std::vector<double>(logits.dim(1)));
        for (std::size_t r = 0; r < logits.dim(0); ++r)
            for (std::size_t c = 0; c < logits.dim(1); ++c) p[r][c] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits(r, c))));
        return p;
    };
    auto label_rows = [&](const std::vector<std::size_t>& idx) {
        std::vector<std::vector<int>> l;
        for (std::size_t i : idx) l.push_back(ds.entries[i].labels);
        return l;
    };
    char hex[17];
    auto to_hex = [&](std::uint64_t v) {
        std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(v));
        return std::string(hex);
    };
    nlohmann::json j{{"task", "finetune"},
                     {"variant", info.model.name},
                     {"epochs", cfg.epochs},
                     {"lr", cfg.lr},
                     {"encoder_checksum_before", to_hex(before)},
                     {"encoder_checksum_after", to_hex(after)},
                     {"encoder_unchanged", before == after},
                     {"train_bce_initial", bce0},
                     {"train_bce", history.back()},
                     {"baseline_bce", std::log(2.0)},
                     {"train_bce_history", history},
                     {"train_metrics", classification_report(threshold(probs_of(probe.logits(ftr))), label_rows(tr),
                                                             ds.names)}};
    if (!va.empty()) {
        const Tensor<T> fva = encoder_features(model.encoder(), ds, va);
        j["val_bce"] = bce_with_logits(probe.logits(fva), targets(va));
        j["metrics"] = classification_report(threshold(probs_of(probe.logits(fva))), label_rows(va), ds.names);
    }
    if (!head_out.empty()) {
        ParamList<T> hp;
        probe.collect("head", hp);
        save_checkpoint(head_out, {{"task", "finetune"}, {"labels", ds.names}, {"dtype", std::string(dtype_name<T>())}},
                        hp);
    }
    return j;
}

}  // namespace dcf

#pragma once

// Procedural paired (volume, report, labels) datasets.
//
// Each sample draws every abnormality independently with its prevalence,
// renders the present ones as intensity offsets (HU) on a noisy background,
// maps HU to [-1, 1] and writes:
//   <out>/volumes/<split>_<index>.rvl   "RVL1" | u32 LE C,H,W,D | f32 LE payload
//   <out>/manifest.jsonl                {volume_path, report, labels, split}
//   <out>/summary.json                  counts and empirical prevalences

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcf/checkpoint.hpp"
#include "dcf/parallel.hpp"
#include "dcf/rng.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

// ---------------------------------------------------------------------------
// Volume files.

inline std::string encode_volume(const Tensor<float>& v) {
    Shape s = v.shape();
    if (s.size() == 5 && s[0] == 1) s.erase(s.begin());
    if (s.size() != 4) throw ShapeError("volume must be [C,H,W,D] (or [1,C,H,W,D]), got " + shape_str(v.shape()));
    std::string out = "RVL1";
    for (std::size_t e : s) {
        if (e > 0xFFFFFFFFULL) throw ShapeError("volume extent exceeds 32 bits");
        io::put_u32(out, static_cast<std::uint32_t>(e));
    }
    io::put_scalars(out, v.ptr(), v.numel());
    return out;
}

/// Returns [C,H,W,D].
inline Tensor<float> decode_volume(const std::string& bytes, const std::string& what = "volume") {
    if (bytes.size() < 20 || bytes.compare(0, 4, "RVL1") != 0) {
        throw FormatError(what + ": bad magic (expected RVL1)");
    }
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    Shape s(4);
    for (std::size_t i = 0; i < 4; ++i) {
        s[i] = io::get_u32(p + 4 + 4 * i);
        if (s[i] == 0) throw FormatError(what + ": zero extent in header");
    }
    const std::size_t n = shape_numel(s);
    if (bytes.size() - 20 != 4 * n) {
        throw FormatError(what + ": payload is " + std::to_string(bytes.size() - 20) + " bytes, header implies " +
                          std::to_string(4 * n));
    }
    Tensor<float> v(s);
    io::get_scalars(p + 20, v.ptr(), n);
    return v;
}

inline void write_volume(const std::string& path, const Tensor<float>& v) { io::write_file(path, encode_volume(v)); }

inline Tensor<float> read_volume(const std::string& path) { return decode_volume(io::read_file(path), path); }

// ---------------------------------------------------------------------------
// Intensity mapping.

/// Clips to [lo, hi] and maps affinely onto [-1, 1].
template <typename T>
T normalize_hu(T raw, double lo = -1000.0, double hi = 1000.0) {
    if (!(hi > lo)) throw std::invalid_argument("normalize_hu: hi must exceed lo");
    const double c = std::clamp(static_cast<double>(raw), lo, hi);
    return static_cast<T>(2.0 * (c - lo) / (hi - lo) - 1.0);
}

template <typename T>
Tensor<T> normalize_hu(const Tensor<T>& raw, double lo = -1000.0, double hi = 1000.0) {
    Tensor<T> out(raw.shape());
    for (std::size_t i = 0; i < raw.numel(); ++i) out[i] = normalize_hu(raw[i], lo, hi);
    return out;
}

// ---------------------------------------------------------------------------
// Reports and prompts.

inline std::string positive_prompt(const std::string& name) { return name + " is present."; }
inline std::string negative_prompt(const std::string& name) { return name + " is not present."; }

inline const std::vector<std::string>& filler_sentences() {
    static const std::vector<std::string> f{
        "Image quality is adequate.",
        "The study was reviewed in three planes.",
        "Comparison with prior imaging was not available.",
        "The field of view covers the full volume.",
        "Findings were confirmed on reformatted images.",
        "Routine acquisition protocol was used.",
    };
    return f;
}

/// One sentence per abnormality in catalog order. Paraphrase mode shuffles the
/// sentence order and inserts up to two filler sentences.
inline std::string compose_report(const std::vector<std::string>& names, const std::vector<int>& labels,
                                  bool paraphrase, Rng* rng) {
    if (names.size() != labels.size()) throw std::invalid_argument("compose_report: names/labels length mismatch");
    std::vector<std::string> sentences;
    for (std::size_t i = 0; i < names.size(); ++i) {
        sentences.push_back(labels[i] ? positive_prompt(names[i]) : negative_prompt(names[i]));
    }
    if (paraphrase) {
        if (rng == nullptr) throw std::invalid_argument("compose_report: paraphrase needs an rng");
        const std::size_t extra = rng->below(3);
        for (std::size_t i = 0; i < extra; ++i) {
            sentences.push_back(filler_sentences()[rng->below(filler_sentences().size())]);
        }
        for (std::size_t i = sentences.size(); i > 1; --i) std::swap(sentences[i - 1], sentences[rng->below(i)]);
    }
    std::string out;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        if (i) out += ' ';
        out += sentences[i];
    }
    return out;
}

/// Recovers the label vector from a report written in the prompt grammar.
inline std::vector<int> parse_report(const std::string& report, const std::vector<std::string>& names) {
    std::vector<int> labels(names.size(), -1);
    std::size_t start = 0;
    while (start < report.size()) {
        std::size_t end = report.find('.', start);
        if (end == std::string::npos) end = report.size();
        std::string s = report.substr(start, end - start);
        s.erase(0, s.find_first_not_of(' '));
        for (std::size_t i = 0; i < names.size(); ++i) {
            int v = -1;
            if (s == names[i] + " is present") v = 1;
            if (s == names[i] + " is not present") v = 0;
            if (v < 0) continue;
            if (labels[i] >= 0 && labels[i] != v) {
                throw FormatError("report contradicts itself about '" + names[i] + "'");
            }
            labels[i] = v;
        }
        start = end + 1;
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (labels[i] < 0) throw FormatError("report does not mention '" + names[i] + "'");
    }
    return labels;
}

// ---------------------------------------------------------------------------
// Generation spec.

enum class ShapeKind { Sphere, Box, Shell, Rod };

inline ShapeKind parse_shape_kind(const std::string& s) {
    if (s == "sphere") return ShapeKind::Sphere;
    if (s == "box") return ShapeKind::Box;
    if (s == "shell") return ShapeKind::Shell;
    if (s == "rod") return ShapeKind::Rod;
    throw std::invalid_argument("unknown shape '" + s + "' (expected sphere, box, shell or rod)");
}

inline const char* shape_kind_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::Sphere: return "sphere";
        case ShapeKind::Box: return "box";
        case ShapeKind::Shell: return "shell";
        case ShapeKind::Rod: return "rod";
    }
    return "?";
}

struct Abnormality {
    std::string name;
    ShapeKind shape = ShapeKind::Sphere;
    double prevalence = 0.3;
    double intensity = 600.0;  // HU offset inside the shape
    double size_min = 5.0;     // voxels: radius / half-extent / half-length
    double size_max = 9.0;
};

struct SynthSpec {
    std::array<std::size_t, 3> shape{64, 64, 64};
    std::size_t n_train = 400;
    std::size_t n_val = 100;
    std::uint64_t seed = 42;
    double background_hu = -200.0;
    double noise_hu = 50.0;
    bool paraphrase = false;
    std::vector<Abnormality> catalog;

    std::vector<std::string> names() const {
        std::vector<std::string> n;
        for (const auto& a : catalog) n.push_back(a.name);
        return n;
    }

    static std::vector<Abnormality> default_catalog() {
        return {
            {"sphere", ShapeKind::Sphere, 0.3, 700.0, 5.0, 9.0},
            {"box", ShapeKind::Box, 0.3, -600.0, 4.0, 8.0},
            {"shell", ShapeKind::Shell, 0.3, 500.0, 7.0, 11.0},
            {"rod", ShapeKind::Rod, 0.3, 900.0, 10.0, 18.0},
        };
    }

    void validate() const {
        if (catalog.empty()) throw std::invalid_argument("synthetic spec: abnormality catalog is empty");
        for (std::size_t e : shape) {
            if (e < 8) throw std::invalid_argument("synthetic spec: volume extents must be >= 8");
        }
        if (n_train + n_val == 0) throw std::invalid_argument("synthetic spec: no samples requested");
        if (!(noise_hu >= 0)) throw std::invalid_argument("synthetic spec: noise must be >= 0");
        for (std::size_t i = 0; i < catalog.size(); ++i) {
            const auto& a = catalog[i];
            if (a.name.empty()) throw std::invalid_argument("synthetic spec: abnormality name is empty");
            if (a.name.find_first_of(".!?;\n") != std::string::npos) {
                throw std::invalid_argument("synthetic spec: abnormality name '" + a.name + "' contains punctuation");
            }
            for (std::size_t j = 0; j < i; ++j) {
                if (catalog[j].name == a.name) throw std::invalid_argument("synthetic spec: duplicate name " + a.name);
            }
            if (!(a.prevalence >= 0 && a.prevalence <= 1)) {
                throw std::invalid_argument("synthetic spec: prevalence of '" + a.name + "' must lie in [0,1]");
            }
            if (!(a.size_min > 0 && a.size_max >= a.size_min)) {
                throw std::invalid_argument("synthetic spec: bad size range for '" + a.name + "'");
            }
            const double room = static_cast<double>(*std::min_element(shape.begin(), shape.end())) / 2.0 - 1.0;
            if (a.size_max > room) {
                throw std::invalid_argument("synthetic spec: '" + a.name + "' does not fit in the volume");
            }
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json cat = nlohmann::json::array();
        for (const auto& a : catalog) {
            cat.push_back({{"name", a.name},
                           {"shape", shape_kind_name(a.shape)},
                           {"prevalence", a.prevalence},
                           {"intensity", a.intensity},
                           {"size", {a.size_min, a.size_max}}});
        }
        return {{"shape", shape},         {"n_train", n_train},       {"n_val", n_val},
                {"seed", seed},           {"background_hu", background_hu}, {"noise_hu", noise_hu},
                {"paraphrase", paraphrase}, {"abnormalities", cat}};
    }

    /// Unknown keys are rejected; omitted keys keep their defaults
    /// (including the default four-entry catalog).
    static SynthSpec from_json(const nlohmann::json& j) {
        static const std::vector<std::string> known{"shape",  "n_train",       "n_val",     "seed",
                                                    "background_hu", "noise_hu", "paraphrase", "abnormalities"};
        static const std::vector<std::string> known_ab{"name", "shape", "prevalence", "intensity", "size"};
        auto reject_unknown = [](const nlohmann::json& obj, const std::vector<std::string>& keys, const char* where) {
            if (!obj.is_object()) throw std::invalid_argument(std::string(where) + " must be a JSON object");
            for (const auto& [k, _] : obj.items()) {
                if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
                    throw std::invalid_argument(std::string("unknown key '") + k + "' in " + where);
                }
            }
        };
        reject_unknown(j, known, "synthetic spec");
        SynthSpec s;
        try {
            if (j.contains("shape")) {
                const auto v = j.at("shape").get<std::vector<std::size_t>>();
                if (v.size() != 3) throw std::invalid_argument("synthetic spec: shape must have 3 extents");
                s.shape = {v[0], v[1], v[2]};
            }
            s.n_train = j.value("n_train", s.n_train);
            s.n_val = j.value("n_val", s.n_val);
            s.seed = j.value("seed", s.seed);
            s.background_hu = j.value("background_hu", s.background_hu);
            s.noise_hu = j.value("noise_hu", s.noise_hu);
            s.paraphrase = j.value("paraphrase", s.paraphrase);
            if (j.contains("abnormalities")) {
                for (const auto& a : j.at("abnormalities")) {
                    reject_unknown(a, known_ab, "abnormality");
                    Abnormality ab;
                    ab.name = a.at("name").get<std::string>();
                    ab.shape = parse_shape_kind(a.value("shape", std::string("sphere")));
                    ab.prevalence = a.value("prevalence", ab.prevalence);
                    ab.intensity = a.value("intensity", ab.intensity);
                    if (a.contains("size")) {
                        const auto sz = a.at("size").get<std::vector<double>>();
                        if (sz.size() != 2) throw std::invalid_argument("abnormality size must be [min, max]");
                        ab.size_min = sz[0];
                        ab.size_max = sz[1];
                    }
                    s.catalog.push_back(ab);
                }
            } else {
                s.catalog = default_catalog();
            }
        } catch (const nlohmann::json::exception& e) {
            throw std::invalid_argument(std::string("synthetic spec: ") + e.what());
        }
        s.validate();
        return s;
    }
};

struct Sample {
    Tensor<float> volume;  // [1,H,W,D], values in [-1,1]
    std::vector<int> labels;
    std::string report;
};

namespace detail {

/// Adds `value` to voxels inside the shape centred at (ch, cw, cd).
inline void render_shape(Tensor<float>& hu, ShapeKind kind, double size, double value, Rng& rng,
                         const std::array<std::size_t, 3>& ext) {
    // Centre far enough from the border that the shape fits.
    std::array<double, 3> c{};
    for (std::size_t a = 0; a < 3; ++a) {
        const double lo = size + 1.0;
        const double hi = static_cast<double>(ext[a]) - size - 2.0;
        c[a] = hi > lo ? rng.uniform(lo, hi) : static_cast<double>(ext[a]) / 2.0;
    }
    const std::size_t rod_axis = kind == ShapeKind::Rod ? rng.below(3) : 0;
    const double shell_inner = size - 2.0;
    const double rod_radius = 1.5;
    for (std::size_t h = 0; h < ext[0]; ++h) {
        for (std::size_t w = 0; w < ext[1]; ++w) {
            for (std::size_t d = 0; d < ext[2]; ++d) {
                const std::array<double, 3> off{static_cast<double>(h) - c[0], static_cast<double>(w) - c[1],
                                                static_cast<double>(d) - c[2]};
                bool inside = false;
                switch (kind) {
                    case ShapeKind::Sphere: {
                        inside = off[0] * off[0] + off[1] * off[1] + off[2] * off[2] <= size * size;
                        break;
                    }
                    case ShapeKind::Box: {
                        inside = std::fabs(off[0]) <= size && std::fabs(off[1]) <= size && std::fabs(off[2]) <= size;
                        break;
                    }
                    case ShapeKind::Shell: {
                        const double r2 = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
                        inside = r2 <= size * size && r2 >= shell_inner * shell_inner;
                        break;
                    }
                    case ShapeKind::Rod: {
                        double radial = 0;
                        for (std::size_t a = 0; a < 3; ++a) {
                            if (a != rod_axis) radial += off[a] * off[a];
                        }
                        inside = std::fabs(off[rod_axis]) <= size && radial <= rod_radius * rod_radius;
                        break;
                    }
                }
                if (inside) hu(0, h, w, d) += static_cast<float>(value);
            }
        }
    }
}

}  // namespace detail

/// Deterministic sample `index` of the dataset described by `spec`.
inline Sample generate_sample(const SynthSpec& spec, std::size_t index) {
    Rng rng(derive_seed(spec.seed, index));
    const auto& e = spec.shape;
    Sample s;
    Tensor<float> hu({1, e[0], e[1], e[2]});
    for (auto& v : hu.data()) v = static_cast<float>(spec.background_hu + spec.noise_hu * rng.normal());
    for (const auto& ab : spec.catalog) {
        const int present = rng.uniform() < ab.prevalence ? 1 : 0;
        s.labels.push_back(present);
        // Size is drawn either way so the stream layout does not depend on labels.
        const double size = rng.uniform(ab.size_min, ab.size_max);
        if (present) detail::render_shape(hu, ab.shape, size, ab.intensity, rng, e);
    }
    s.volume = normalize_hu(hu);
    s.report = compose_report(spec.names(), s.labels, spec.paraphrase, &rng);
    return s;
}

struct ManifestEntry {
    std::string volume_path;  // relative to the dataset directory
    std::string report;
    std::vector<int> labels;
    std::string split;  // "train" | "val"

    nlohmann::json to_json() const {
        return {{"volume_path", volume_path}, {"report", report}, {"labels", labels}, {"split", split}};
    }
};

struct Dataset {
    std::filesystem::path dir;
    std::vector<std::string> names;
    std::vector<ManifestEntry> entries;

    std::vector<std::size_t> indices(const std::string& split) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].split == split) out.push_back(i);
        }
        return out;
    }
    Tensor<float> volume(std::size_t i) const { return read_volume((dir / entries.at(i).volume_path).string()); }
};

inline std::string sample_file_name(const std::string& split, std::size_t index) {
    std::ostringstream os;
    os << "volumes/" << split << "_" << std::setw(5) << std::setfill('0') << index << ".rvl";
    return os.str();
}

/// Writes volumes, manifest.jsonl, spec.json and summary.json; returns the summary.
inline nlohmann::json generate_dataset(const SynthSpec& spec, const std::filesystem::path& out_dir) {
    spec.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "volumes", ec);
    if (ec) throw std::runtime_error("cannot create '" + (out_dir / "volumes").string() + "': " + ec.message());
    const std::size_t n = spec.n_train + spec.n_val;
    std::vector<ManifestEntry> entries(n);
    parallel::for_each_index(n, [&](std::size_t i) {
        Sample s = generate_sample(spec, i);
        const std::string split = i < spec.n_train ? "train" : "val";
        const std::size_t local = i < spec.n_train ? i : i - spec.n_train;
        entries[i] = {sample_file_name(split, local), s.report, s.labels, split};
        write_volume((out_dir / entries[i].volume_path).string(), s.volume);
    }, 1);
    std::string manifest;
    std::vector<std::size_t> counts(spec.catalog.size(), 0);
    for (const auto& e : entries) {
        manifest += e.to_json().dump() + "\n";
        for (std::size_t a = 0; a < counts.size(); ++a) counts[a] += static_cast<std::size_t>(e.labels[a]);
    }
    io::write_file((out_dir / "manifest.jsonl").string(), manifest);
    io::write_file((out_dir / "spec.json").string(), spec.to_json().dump(2) + "\n");
    nlohmann::json prev = nlohmann::json::object();
    for (std::size_t a = 0; a < counts.size(); ++a) {
        prev[spec.catalog[a].name] = {{"target", spec.catalog[a].prevalence},
                                     {"empirical", static_cast<double>(counts[a]) / static_cast<double>(n)},
                                     {"count", counts[a]}};
    }
    nlohmann::json summary{{"samples", n},          {"train", spec.n_train}, {"val", spec.n_val},
                           {"seed", spec.seed},     {"shape", spec.shape},   {"prevalence", prev}};
    io::write_file((out_dir / "summary.json").string(), summary.dump(2) + "\n");
    return summary;
}

/// Reads manifest.jsonl (and the catalog names from spec.json).
inline Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset ds;
    ds.dir = dir;
    const std::string spec_text = io::read_file((dir / "spec.json").string());
    try {
        const SynthSpec spec = SynthSpec::from_json(nlohmann::json::parse(spec_text));
        ds.names = spec.names();
    } catch (const std::exception& e) {
        throw FormatError("dataset spec.json: " + std::string(e.what()));
    }
    std::istringstream in(io::read_file((dir / "manifest.jsonl").string()));
    std::size_t line_no = 0;
    for (std::string line; std::getline(in, line);) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ManifestEntry e{j.at("volume_path").get<std::string>(), j.at("report").get<std::string>(),
                            j.at("labels").get<std::vector<int>>(), j.at("split").get<std::string>()};
            if (e.labels.size() != ds.names.size()) throw FormatError("labels length does not match the catalog");
            for (int v : e.labels) {
                if (v != 0 && v != 1) throw FormatError("labels must be 0 or 1");
            }
            if (e.split != "train" && e.split != "val") throw FormatError("split must be train or val");
            ds.entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": " + ex.what());
        } catch (const FormatError& ex) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": " + ex.what());
        }
    }
    if (ds.entries.empty()) throw FormatError("manifest is empty");
    return ds;
}

}  // namespace dcf

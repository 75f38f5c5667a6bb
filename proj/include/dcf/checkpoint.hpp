#pragma once

// Checkpoint file:
//   "DCF1" | u64 LE manifest length | manifest (UTF-8 JSON) | raw tensors
// The manifest is {"format": "DCF1", "meta": {...}, "tensors": [{path, dtype,
// shape}, ...]}; tensor payloads follow in manifest order as little-endian
// f32/f64 row-major buffers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcf/layers/param.hpp"
#include "dcf/tensor.hpp"

namespace dcf {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t get_u32(const unsigned char* p) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

/// Appends scalars as little-endian IEEE bytes.
template <typename T>
void put_scalars(std::string& out, const T* data, std::size_t n) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    for (std::size_t i = 0; i < n; ++i) {
        if constexpr (sizeof(T) == 4) {
            put_u32(out, std::bit_cast<std::uint32_t>(data[i]));
        } else {
            put_u64(out, std::bit_cast<std::uint64_t>(data[i]));
        }
    }
}

template <typename T>
void get_scalars(const unsigned char* p, T* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        if constexpr (sizeof(T) == 4) {
            data[i] = std::bit_cast<T>(get_u32(p + 4 * i));
        } else {
            data[i] = std::bit_cast<T>(get_u64(p + 8 * i));
        }
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

}  // namespace io

template <typename T>
std::string serialize_checkpoint(const nlohmann::json& meta, const ParamList<T>& tensors) {
    nlohmann::json manifest;
    manifest["format"] = "DCF1";
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& t : tensors) {
        manifest["tensors"].push_back({{"path", t.path}, {"dtype", dtype_name<T>()}, {"shape", t.value->shape()}});
    }
    const std::string text = manifest.dump();
    std::string out = "DCF1";
    io::put_u64(out, text.size());
    out += text;
    for (const auto& t : tensors) io::put_scalars(out, t.value->ptr(), t.value->numel());
    return out;
}

template <typename T>
void save_checkpoint(const std::string& path, const nlohmann::json& meta, const ParamList<T>& tensors) {
    io::write_file(path, serialize_checkpoint(meta, tensors));
}

/// Loaded checkpoint: tensors converted to T regardless of stored dtype.
template <typename T>
struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::string> order;
    std::map<std::string, Tensor<T>> tensors;

    const Tensor<T>& at(const std::string& path) const {
        auto it = tensors.find(path);
        if (it == tensors.end()) throw FormatError("checkpoint has no tensor '" + path + "'");
        return it->second;
    }
    bool has(const std::string& path) const { return tensors.count(path) != 0; }
};

template <typename T>
Checkpoint<T> parse_checkpoint(const std::string& bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 12 || bytes.compare(0, 4, "DCF1") != 0) throw FormatError("not a DCF1 checkpoint (bad magic)");
    const std::uint64_t len = io::get_u64(p + 4);
    if (len > bytes.size() - 12) throw FormatError("checkpoint manifest length exceeds file size");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(12, len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
    }
    if (manifest.value("format", "") != "DCF1" || !manifest.contains("tensors")) {
        throw FormatError("checkpoint manifest missing format/tensors");
    }
    Checkpoint<T> ck;
    ck.meta = manifest.value("meta", nlohmann::json::object());
    std::size_t off = 12 + len;
    for (const auto& e : manifest["tensors"]) {
        const std::string path = e.at("path").get<std::string>();
        const std::string dt = e.at("dtype").get<std::string>();
        const Shape shape = e.at("shape").get<Shape>();
        validate_shape(shape);
        const std::size_t n = shape_numel(shape);
        const std::size_t width = dt == "f32" ? 4 : dt == "f64" ? 8 : 0;
        if (width == 0) throw FormatError("unsupported dtype '" + dt + "' for " + path);
        if (bytes.size() - off < n * width) throw FormatError("checkpoint truncated in tensor " + path);
        Tensor<T> t(shape);
        if (width == 4) {
            std::vector<float> tmp(n);
            io::get_scalars(p + off, tmp.data(), n);
            for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<T>(tmp[i]);
        } else {
            std::vector<double> tmp(n);
            io::get_scalars(p + off, tmp.data(), n);
            for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<T>(tmp[i]);
        }
        off += n * width;
        ck.order.push_back(path);
        ck.tensors.emplace(path, std::move(t));
    }
    if (off != bytes.size()) throw FormatError("checkpoint has trailing bytes");
    return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    return parse_checkpoint<T>(io::read_file(path));
}

/// Copies stored values into a live parameter list; every path must exist
/// with a matching shape.
template <typename T>
void restore_parameters(const Checkpoint<T>& ck, const ParamList<T>& params) {
    for (const auto& p : params) {
        const Tensor<T>& src = ck.at(p.path);
        if (src.shape() != p.value->shape()) {
            throw FormatError("checkpoint shape mismatch for " + p.path + ": " + shape_str(src.shape()) + " vs " +
                              shape_str(p.value->shape()));
        }
        *p.value = src;
    }
}

/// FNV-1a 64 over paths, shapes and little-endian value bytes, in list order.
template <typename T>
std::uint64_t parameter_checksum(const ParamList<T>& params) {
    std::uint64_t h = 14695981039346656037ULL;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ULL;
        }
    };
    for (const auto& p : params) {
        mix(p.path);
        mix(shape_str(p.value->shape()));
        std::string bytes;
        io::put_scalars(bytes, p.value->ptr(), p.value->numel());
        mix(bytes);
    }
    return h;
}

}  // namespace dcf

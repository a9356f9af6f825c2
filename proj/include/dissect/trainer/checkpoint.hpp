#pragma once

// Checkpoint file: a plain-text header followed by a binary payload.
//
//   DISSECT-CHECKPOINT
//   format_version=1
//   step=<n>
//   epoch=<k>
//   config_hash=<fnv1a64 of the serialized config>
//   payload_bytes=<n>
//   payload_checksum=<fnv1a64 of the payload>
//   config.<key>=<value>            (every config key)
//   array=<name> <d0>x<d1>... <byte offset>
//   end_header
//   <payload: row-major little-endian float32 arrays, back to back>

#include "dissect/core/error.hpp"
#include "dissect/core/kv.hpp"
#include "dissect/core/rng.hpp"
#include "dissect/datagen/corpus.hpp"
#include "dissect/trainer/config.hpp"
#include "dissect/trainer/trainer.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace dissect::trainer {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "DISSECT-CHECKPOINT";

struct ArrayEntry {
    std::string name;
    std::vector<Index> shape;
    std::uint64_t offset = 0;
};

struct CheckpointManifest {
    int version = kCheckpointVersion;
    long step = 0;
    int epoch = 0;
    std::uint64_t config_hash = 0;
    std::uint64_t payload_bytes = 0;
    std::uint64_t payload_checksum = 0;
    std::vector<ArrayEntry> arrays;
};

namespace detail {

template <typename T>
struct NamedArray {
    std::string name;
    std::vector<Index> shape;
    Mat<T>* value;      // rows = shape[0], cols = product of the rest
    bool transposed;    // stored matrix is the transpose of the logical one
    Vec<T>* vector = nullptr;  // set instead of value for 1-D state
};

template <typename T>
std::vector<NamedArray<T>> enumerate_arrays(TrainState<T>& s) {
    std::vector<NamedArray<T>> out;
    auto add_store = [&](const std::string& prefix, ParamStore<T>& store) {
        for (auto& p : store) out.push_back({prefix + p.name, p.shape, &p.value, false});
    };
    add_store("theta/", s.model.theta);
    add_store("phi/", s.model.phi);
    add_store("aux/", s.model.aux);
    for (int j = 0; j < 3; ++j) {
        auto& cb = s.model.codebooks[static_cast<std::size_t>(j)];
        const std::string pre = std::string("codebook.") + kScaleNames[static_cast<std::size_t>(j)] + "/";
        out.push_back({pre + "entries", {cb.size(), cb.dim()}, &cb.entries, true});
        out.push_back({pre + "ema_count", {cb.size()}, nullptr, false, &cb.ema_count});
        out.push_back({pre + "ema_sum", {cb.size(), cb.dim()}, &cb.ema_sum, true});
    }
    add_store("opt/theta/", s.velocity_theta);
    add_store("opt/aux/", s.velocity_aux);
    return out;
}

inline std::string shape_string(const std::vector<Index>& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s;
}

inline void put_f32(std::string& buf, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int k = 0; k < 4; ++k) buf.push_back(static_cast<char>((bits >> (8 * k)) & 0xFF));
}

inline float get_f32(const std::string& buf, std::size_t pos) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + k])) << (8 * k);
    return std::bit_cast<float>(bits);
}

// Logical row-major element order of a stored matrix.
template <typename T, typename F>
void for_each_row_major(const Mat<T>& m, bool transposed, F&& f) {
    if (transposed) {
        // Logical (r, c) is stored at (c, r): column-major storage already
        // lists the logical matrix row by row.
        for (Index i = 0; i < m.size(); ++i) f(m.data()[i], i);
    } else {
        Index k = 0;
        for (Index r = 0; r < m.rows(); ++r)
            for (Index c = 0; c < m.cols(); ++c) f(m(r, c), k++);
    }
}

}  // namespace detail

template <typename T>
CheckpointManifest save_checkpoint(const TrainState<T>& state, const Config& cfg, const std::filesystem::path& path) {
    auto& s = const_cast<TrainState<T>&>(state);
    std::string payload;
    CheckpointManifest man;
    man.step = s.step;
    man.epoch = s.epoch;
    man.config_hash = config_hash(cfg);
    for (auto& a : detail::enumerate_arrays(s)) {
        man.arrays.push_back({a.name, a.shape, static_cast<std::uint64_t>(payload.size())});
        if (a.vector) {
            const auto& counts = *a.vector;
            for (Index i = 0; i < counts.size(); ++i) detail::put_f32(payload, static_cast<float>(counts(i)));
            continue;
        }
        detail::for_each_row_major(*a.value, a.transposed,
                                   [&](T v, Index) { detail::put_f32(payload, static_cast<float>(v)); });
    }
    man.payload_bytes = payload.size();
    man.payload_checksum = fnv1a64(payload);

    std::ostringstream head;
    head << kCheckpointMagic << "\n"
         << "format_version=" << man.version << "\n"
         << "step=" << man.step << "\n"
         << "epoch=" << man.epoch << "\n"
         << "config_hash=" << man.config_hash << "\n"
         << "payload_bytes=" << man.payload_bytes << "\n"
         << "payload_checksum=" << man.payload_checksum << "\n";
    const KeyValues cfg_kv = to_kv(cfg);
    for (const auto& [k, v] : cfg_kv.entries()) head << "config." << k << "=" << v << "\n";
    for (const auto& a : man.arrays) head << "array=" << a.name << " " << detail::shape_string(a.shape) << " " << a.offset << "\n";
    head << "end_header\n";

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    const std::string h = head.str();
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("write failed for checkpoint '" + path.string() + "'");
    return man;
}

struct RawCheckpoint {
    CheckpointManifest manifest;
    KeyValues config;
    std::string payload;
};

inline RawCheckpoint read_raw_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
    RawCheckpoint raw;
    std::string line;
    if (!std::getline(in, line) || line != kCheckpointMagic)
        throw CheckpointError("'" + path.string() + "' is not a checkpoint file");
    bool ended = false;
    std::map<std::string, std::string> fields;
    while (std::getline(in, line)) {
        if (in.eof()) break;  // last line lacks its newline: the file was cut
        if (line == "end_header") {
            ended = true;
            break;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw CheckpointError("malformed checkpoint header line '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key.rfind("config.", 0) == 0) {
            raw.config.set(key.substr(7), value);
        } else if (key == "array") {
            std::istringstream row(value);
            ArrayEntry a;
            std::string shape;
            if (!(row >> a.name >> shape >> a.offset)) throw CheckpointError("malformed array entry '" + value + "'");
            std::stringstream ss(shape);
            std::string dim;
            while (std::getline(ss, dim, 'x')) a.shape.push_back(static_cast<Index>(parse_int("array shape", dim)));
            raw.manifest.arrays.push_back(std::move(a));
        } else {
            fields[key] = value;
        }
    }
    if (!ended) throw TruncatedFileError("checkpoint header of '" + path.string() + "' is truncated");
    auto need = [&](const std::string& k) -> const std::string& {
        auto it = fields.find(k);
        if (it == fields.end()) throw CheckpointError("checkpoint header lacks '" + k + "'");
        return it->second;
    };
    raw.manifest.version = static_cast<int>(parse_int("format_version", need("format_version")));
    if (raw.manifest.version != kCheckpointVersion)
        throw VersionMismatchError("checkpoint format version " + std::to_string(raw.manifest.version) +
                                   " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
    raw.manifest.step = static_cast<long>(parse_int("step", need("step")));
    raw.manifest.epoch = static_cast<int>(parse_int("epoch", need("epoch")));
    raw.manifest.config_hash = parse_u64("config_hash", need("config_hash"));
    raw.manifest.payload_bytes = parse_u64("payload_bytes", need("payload_bytes"));
    raw.manifest.payload_checksum = parse_u64("payload_checksum", need("payload_checksum"));

    raw.payload.resize(raw.manifest.payload_bytes);
    in.read(raw.payload.data(), static_cast<std::streamsize>(raw.payload.size()));
    if (static_cast<std::uint64_t>(in.gcount()) != raw.manifest.payload_bytes)
        throw TruncatedFileError("checkpoint payload of '" + path.string() + "' is truncated");
    if (fnv1a64(raw.payload) != raw.manifest.payload_checksum)
        throw ChecksumError("checkpoint payload checksum mismatch in '" + path.string() + "'");
    return raw;
}

template <typename T>
struct LoadedCheckpoint {
    Config config;
    TrainState<T> state;
    CheckpointManifest manifest;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
    RawCheckpoint raw = read_raw_checkpoint(path);
    LoadedCheckpoint<T> out;
    out.config = from_kv(raw.config);
    if (config_hash(out.config) != raw.manifest.config_hash)
        throw CheckpointError("checkpoint config does not match its recorded hash");
    out.manifest = raw.manifest;
    Trainer<T> skeleton(out.config, 1);
    out.state = skeleton.init_state();
    out.state.step = raw.manifest.step;
    out.state.epoch = raw.manifest.epoch;

    std::map<std::string, const ArrayEntry*> index;
    for (const auto& a : raw.manifest.arrays) index[a.name] = &a;
    auto arrays = detail::enumerate_arrays(out.state);
    if (arrays.size() != raw.manifest.arrays.size())
        throw CheckpointError("checkpoint array count does not match the configured model");
    for (auto& a : arrays) {
        auto it = index.find(a.name);
        if (it == index.end()) throw CheckpointError("checkpoint lacks array '" + a.name + "'");
        const ArrayEntry& e = *it->second;
        if (e.shape != a.shape)
            throw CheckpointError("array '" + a.name + "' has shape " + detail::shape_string(e.shape) + ", expected " +
                                  detail::shape_string(a.shape));
        Index count = 1;
        for (Index d : a.shape) count *= d;
        if (e.offset + static_cast<std::uint64_t>(count) * 4 > raw.payload.size())
            throw TruncatedFileError("array '" + a.name + "' extends past the payload");
        if (a.vector) {
            auto& counts = *a.vector;
            for (Index i = 0; i < counts.size(); ++i)
                counts(i) = static_cast<T>(detail::get_f32(raw.payload, e.offset + 4 * static_cast<std::size_t>(i)));
            continue;
        }
        Mat<T>& m = *a.value;
        if (a.transposed) {
            for (Index i = 0; i < m.size(); ++i)
                m.data()[i] = static_cast<T>(detail::get_f32(raw.payload, e.offset + 4 * static_cast<std::size_t>(i)));
        } else {
            Index k = 0;
            for (Index r = 0; r < m.rows(); ++r)
                for (Index c = 0; c < m.cols(); ++c, ++k)
                    m(r, c) = static_cast<T>(detail::get_f32(raw.payload, e.offset + 4 * static_cast<std::size_t>(k)));
        }
    }
    return out;
}

// Payload bytes only; used for round-trip comparisons.
inline std::string checkpoint_payload(const std::filesystem::path& path) { return read_raw_checkpoint(path).payload; }

}  // namespace dissect::trainer

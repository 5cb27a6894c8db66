// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary checkpoint container: magic, format version, a string
// metadata map, and named double arrays with shapes. Little-endian on every
// platform this targets; loads are bit-exact inverses of saves.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "duogen/errors.hpp"
#include "duogen/nn.hpp"
#include "duogen/tensor.hpp"

namespace duogen {

inline constexpr char kCheckpointMagic[8] = {'D', 'U', 'O', 'G', 'C', 'K', 'P', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

// Pipeline stage tags recorded under metadata["stage"].
inline constexpr const char* kStageJoint = "unidiffuser";
inline constexpr const char* kStageBidirectional = "bidiffuser";
inline constexpr const char* kStageAdapter = "adapter";
inline constexpr const char* kStageAlignment = "alignment";
inline constexpr const char* kStageDialogue = "dialogue";

struct Checkpoint {
    std::map<std::string, std::string> metadata;
    std::vector<NamedParam> arrays;

    const Tensor* find(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return &a.tensor;
        return nullptr;
    }
    std::string stage() const {
        auto it = metadata.find("stage");
        return it == metadata.end() ? std::string() : it->second;
    }
};

namespace detail {

inline void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t get_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw CheckpointError(CheckpointError::Kind::truncated, "'" + path + "' ends mid-field");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, uint32_t(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}

inline std::string get_str(std::istream& in, const std::string& path) {
    uint32_t n = get_u32(in, path);
    std::string s(n, '\0');
    if (n && !in.read(s.data(), std::streamsize(n)))
        throw CheckpointError(CheckpointError::Kind::truncated, "'" + path + "' ends mid-string");
    return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "' for writing");
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, uint32_t(ckpt.metadata.size()));
    for (const auto& [k, v] : ckpt.metadata) {
        detail::put_str(out, k);
        detail::put_str(out, v);
    }
    detail::put_u32(out, uint32_t(ckpt.arrays.size()));
    for (const auto& arr : ckpt.arrays) {
        detail::put_str(out, arr.name);
        out.put(char(0));  // element type 0: float64
        const auto& shape = arr.tensor.shape();
        detail::put_u32(out, uint32_t(shape.size()));
        for (int d : shape) detail::put_u32(out, uint32_t(d));
        for (size_t i = 0; i < arr.tensor.numel(); ++i) {
            double v = arr.tensor.at(i);
            uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            unsigned char b[8];
            for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
            out.write(reinterpret_cast<const char*>(b), 8);
        }
    }
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "write to '" + path + "' failed");
}

inline void save_checkpoint(const std::string& path, const std::map<std::string, std::string>& metadata,
                            const ParamList& params) {
    Checkpoint ckpt;
    ckpt.metadata = metadata;
    for (const auto& p : params) ckpt.arrays.push_back({p.name, p.tensor.detach()});
    save_checkpoint(path, ckpt);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "' for reading");
    char magic[sizeof kCheckpointMagic];
    if (!in.read(magic, sizeof magic))
        throw CheckpointError(CheckpointError::Kind::truncated, "'" + path + "' is shorter than the magic");
    if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw CheckpointError(CheckpointError::Kind::bad_magic, "'" + path + "' is not a checkpoint file");
    uint32_t version = detail::get_u32(in, path);
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::bad_version,
                              "'" + path + "' has format version " + std::to_string(version) + ", expected " +
                                  std::to_string(kCheckpointVersion));
    Checkpoint ckpt;
    uint32_t meta_n = detail::get_u32(in, path);
    for (uint32_t i = 0; i < meta_n; ++i) {
        auto k = detail::get_str(in, path);
        ckpt.metadata[k] = detail::get_str(in, path);
    }
    uint32_t arr_n = detail::get_u32(in, path);
    for (uint32_t i = 0; i < arr_n; ++i) {
        auto name = detail::get_str(in, path);
        int dtype = in.get();
        if (dtype == EOF) throw CheckpointError(CheckpointError::Kind::truncated, "'" + path + "' ends mid-array");
        if (dtype != 0)
            throw CheckpointError(CheckpointError::Kind::bad_version,
                                  "'" + path + "' array '" + name + "' has unknown element type " +
                                      std::to_string(dtype));
        uint32_t ndim = detail::get_u32(in, path);
        std::vector<int> shape;
        size_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(int(detail::get_u32(in, path)));
            numel *= size_t(shape.back());
        }
        std::vector<double> data(numel);
        for (auto& v : data) {
            unsigned char b[8];
            if (!in.read(reinterpret_cast<char*>(b), 8))
                throw CheckpointError(CheckpointError::Kind::truncated,
                                      "'" + path + "' ends inside array '" + name + "'");
            uint64_t bits = 0;
            for (int k = 0; k < 8; ++k) bits |= uint64_t(b[k]) << (8 * k);
            std::memcpy(&v, &bits, sizeof v);
        }
        ckpt.arrays.push_back({name, Tensor::from_data(shape, std::move(data))});
    }
    return ckpt;
}

// Copies checkpoint arrays into live parameters by name, bitwise. Every
// parameter must be present with a matching shape.
inline void load_into(ParamList& params, const Checkpoint& ckpt) {
    for (auto& p : params) {
        const Tensor* src = ckpt.find(p.name);
        if (!src)
            throw CheckpointError(CheckpointError::Kind::missing_entry,
                                  "checkpoint has no array named '" + p.name + "'");
        if (src->shape() != p.tensor.shape())
            throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                                  "array '" + p.name + "' has shape " + shape_str(src->shape()) +
                                      ", parameter wants " + shape_str(p.tensor.shape()));
        for (size_t i = 0; i < p.tensor.numel(); ++i) p.tensor.at(i) = src->at(i);
    }
}

inline void require_stage(const Checkpoint& ckpt, const std::vector<std::string>& allowed, const std::string& what) {
    const auto stage = ckpt.stage();
    for (const auto& a : allowed)
        if (stage == a) return;
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    throw CheckpointError(CheckpointError::Kind::incompatible_stage,
                          what + " needs a checkpoint from stage {" + list + "}, got '" + stage + "'");
}

}  // namespace duogen

#pragma once
// checkpoint.hpp
//
// Binary model checkpoints.  A checkpoint stores the pipeline stage, a
// handful of scalar config values, and every parameter tensor by name.
// Each stage's file embeds the FNV-1a hash of its parent stage's file, so
// a three-stage run forms a verifiable provenance chain:
//
//     vae.ckpt (parent 0) <- dm.ckpt <- cn.ckpt
//
// Models expose their parameters as an ordered (name, tensor) list; loading
// validates names and shapes against the live model before touching it.

#include <cstring>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nn.hpp"
#include "volume.hpp"

namespace voxsyn {

using NamedParams = std::vector<std::pair<std::string, ParamTensor*>>;

enum class Stage : std::uint8_t { vae = 0, diffusion = 1, control = 2 };

struct CheckpointMeta {
    Stage stage = Stage::vae;
    std::uint64_t parent_hash = 0;               // 0 for the root stage
    std::map<std::string, double> cfg;           // scalar hyperparameters
};

// =====================================================================
//  Hashing
// =====================================================================

constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t file_fnv1a(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    return fnv1a64(bytes.data(), bytes.size());
}

// =====================================================================
//  Serialization
// =====================================================================

namespace detail {

// put_bytes comes from volume.hpp's detail namespace.
template <typename T>
void put_pod(std::string& out, T v) {
    put_bytes(out, &v, sizeof(T));
}
inline void put_str(std::string& out, const std::string& s) {
    put_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

struct ByteReader {
    const std::string& buf;
    std::size_t pos = 0;

    void take(void* dst, std::size_t n) {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
        std::memcpy(dst, buf.data() + pos, n);
        pos += n;
    }
    template <typename T>
    T pod() {
        T v;
        take(&v, sizeof(T));
        return v;
    }
    std::string str() {
        const auto n = pod<std::uint32_t>();
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace detail

inline constexpr char kCkptMagic[4] = {'V', 'S', 'C', 'K'};
inline constexpr std::uint16_t kCkptVersion = 1;

inline void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                            const NamedParams& params) {
    std::string out;
    detail::put_bytes(out, kCkptMagic, 4);
    detail::put_pod<std::uint16_t>(out, kCkptVersion);
    detail::put_pod<std::uint8_t>(out, static_cast<std::uint8_t>(meta.stage));
    detail::put_pod<std::uint8_t>(out, 0);  // pad
    detail::put_pod<std::uint64_t>(out, meta.parent_hash);

    detail::put_pod<std::uint32_t>(out, static_cast<std::uint32_t>(meta.cfg.size()));
    for (const auto& [name, value] : meta.cfg) {
        detail::put_str(out, name);
        detail::put_pod<double>(out, value);
    }

    detail::put_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, p] : params) {
        detail::put_str(out, name);
        detail::put_pod<std::uint8_t>(out, static_cast<std::uint8_t>(p->shape.size()));
        for (i64 d : p->shape) detail::put_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        detail::put_bytes(out, p->w.data(), p->w.size() * sizeof(float));
    }
    detail::write_file(path, out);
}

// Loads parameter values into `params`.  The file's parameter list must match
// `params` exactly — same order, names, and shapes — so a checkpoint can never
// silently load into the wrong architecture.
inline CheckpointMeta load_checkpoint(const std::string& path, const NamedParams& params) {
    const std::string buf = detail::read_file(path);
    detail::ByteReader r{buf};

    char magic[4];
    r.take(magic, 4);
    if (std::memcmp(magic, kCkptMagic, 4) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    if (r.pod<std::uint16_t>() != kCkptVersion)
        throw std::runtime_error("checkpoint: version mismatch");

    CheckpointMeta meta;
    const auto stage = r.pod<std::uint8_t>();
    if (stage > 2) throw std::runtime_error("checkpoint: unknown stage tag");
    meta.stage = static_cast<Stage>(stage);
    r.pod<std::uint8_t>();  // pad
    meta.parent_hash = r.pod<std::uint64_t>();

    const auto n_cfg = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_cfg; ++i) {
        std::string name = r.str();
        meta.cfg[name] = r.pod<double>();
    }

    const auto n_params = r.pod<std::uint32_t>();
    if (n_params != params.size())
        throw std::runtime_error("checkpoint: parameter count mismatch (file has " +
                                 std::to_string(n_params) + ", model has " +
                                 std::to_string(params.size()) + ")");
    for (std::uint32_t i = 0; i < n_params; ++i) {
        const std::string name = r.str();
        if (name != params[i].first)
            throw std::runtime_error("checkpoint: parameter name mismatch at slot " +
                                     std::to_string(i) + " (file '" + name + "', model '" +
                                     params[i].first + "')");
        ParamTensor& p = *params[i].second;
        const auto rank = r.pod<std::uint8_t>();
        if (rank != p.shape.size())
            throw std::runtime_error("checkpoint: rank mismatch for '" + name + "'");
        for (std::size_t d = 0; d < rank; ++d)
            if (static_cast<i64>(r.pod<std::uint32_t>()) != p.shape[d])
                throw std::runtime_error("checkpoint: shape mismatch for '" + name + "'");
        r.take(p.w.data(), p.w.size() * sizeof(float));
    }
    if (r.pos != buf.size()) throw std::runtime_error("checkpoint: trailing bytes");
    return meta;
}

}  // namespace voxsyn

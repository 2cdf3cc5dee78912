#pragma once
// volume.hpp
//
// CT volumes, segmentation masks, and the minimal binary container (mvol)
// they travel in.  Also: the HU normalization window, trilinear resampling
// to dimension multiples, and the body-region / spacing condition encoding.
//
// mvol layout (little-endian), 40-byte header then raw payload:
//   magic "MVOL" | version u16=1 | kind u8 (0 CT f32, 1 mask u16) | pad u8 |
//   dims 3xu32 (d,h,w) | spacing 3xf32 (sz,sy,sx) | top u8 | bottom u8 |
//   reserved 6 bytes | payload row-major, w fastest.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "tensor.hpp"

namespace voxsyn {

// =====================================================================
//  Metadata
// =====================================================================

// Order encodes the head-to-foot axis so a scan's coverage is the pair
// (top, bottom) with top <= bottom.
enum class Region : std::uint8_t { head_neck = 0, chest = 1, abdomen = 2, lower_body = 3 };

inline const char* region_name(Region r) {
    switch (r) {
        case Region::head_neck: return "head_neck";
        case Region::chest: return "chest";
        case Region::abdomen: return "abdomen";
        case Region::lower_body: return "lower_body";
    }
    return "?";
}

inline Region region_from_name(const std::string& s) {
    for (int i = 0; i < 4; ++i)
        if (s == region_name(static_cast<Region>(i))) return static_cast<Region>(i);
    throw std::invalid_argument("unknown region '" + s + "'");
}

struct VolumeMeta {
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // [sz, sy, sx] mm, tensor axis order
    Region top = Region::head_neck;
    Region bottom = Region::lower_body;
};

inline void validate_meta(const VolumeMeta& m) {
    for (float s : m.spacing)
        if (!(s > 0.0f) || !std::isfinite(s))
            throw std::invalid_argument("volume meta: spacing must be positive and finite");
    if (static_cast<int>(m.top) > static_cast<int>(m.bottom))
        throw std::invalid_argument(std::string("volume meta: region order violated (top ") +
                                    region_name(m.top) + " below bottom " +
                                    region_name(m.bottom) + ")");
}

// =====================================================================
//  Volumes
// =====================================================================

constexpr float kHuLo = -1000.0f, kHuHi = 1000.0f;  // normalization window
constexpr float kHuIngestLo = -1024.0f, kHuIngestHi = 3071.0f;
constexpr std::uint16_t kMaxLabel = 127;            // mask vocabulary 0..127

struct CtVolume {
    VolumeMeta meta;
    Tensor5 hu;  // [1,1,d,h,w], Hounsfield units
};

struct SegMask {
    VolumeMeta meta;
    std::array<i64, 3> dims{1, 1, 1};  // [d,h,w]
    std::vector<std::uint16_t> labels;

    std::uint16_t at(i64 d, i64 h, i64 w) const {
        return labels[static_cast<std::size_t>((d * dims[1] + h) * dims[2] + w)];
    }
    std::uint16_t& at(i64 d, i64 h, i64 w) {
        return labels[static_cast<std::size_t>((d * dims[1] + h) * dims[2] + w)];
    }
    i64 numel() const { return dims[0] * dims[1] * dims[2]; }
};

inline void validate_ct(const CtVolume& v) {
    validate_meta(v.meta);
    if (v.hu.dims[0] != 1 || v.hu.dims[1] != 1)
        throw std::invalid_argument("ct volume: expected [1,1,d,h,w]");
    for (i64 i = 0; i < v.hu.numel(); ++i) {
        const float x = v.hu.data[i];
        if (!std::isfinite(x)) throw std::invalid_argument("ct volume: non-finite HU value");
        if (x < kHuIngestLo || x > kHuIngestHi)
            throw std::invalid_argument("ct volume: HU " + std::to_string(x) +
                                        " outside ingest bounds [-1024, 3071]");
    }
}

inline void validate_mask(const SegMask& m) {
    validate_meta(m.meta);
    if (m.numel() != static_cast<i64>(m.labels.size()))
        throw std::invalid_argument("mask: label count does not match dims");
    for (std::uint16_t l : m.labels)
        if (l > kMaxLabel)
            throw std::invalid_argument("mask: label " + std::to_string(l) +
                                        " outside vocabulary 0..127");
}

// =====================================================================
//  mvol serialization
// =====================================================================

namespace detail {

struct MvolHeader {
    std::uint8_t kind = 0;
    std::array<std::uint32_t, 3> dims{};
    std::array<float, 3> spacing{};
    std::uint8_t top = 0, bottom = 0;
};

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
    out.append(static_cast<const char*>(p), n);
}

inline std::string pack_header(const MvolHeader& h) {
    std::string out;
    out.reserve(40);
    out.append("MVOL", 4);
    const std::uint16_t version = 1;
    put_bytes(out, &version, 2);
    out.push_back(static_cast<char>(h.kind));
    out.push_back(0);
    for (std::uint32_t d : h.dims) put_bytes(out, &d, 4);
    for (float s : h.spacing) put_bytes(out, &s, 4);
    out.push_back(static_cast<char>(h.top));
    out.push_back(static_cast<char>(h.bottom));
    out.append(6, '\0');
    return out;
}

inline MvolHeader parse_header(const std::string& raw, const std::string& path) {
    if (raw.size() < 40) throw std::runtime_error("mvol '" + path + "': truncated header");
    if (raw.compare(0, 4, "MVOL") != 0)
        throw std::runtime_error("mvol '" + path + "': bad magic");
    std::uint16_t version = 0;
    std::memcpy(&version, raw.data() + 4, 2);
    if (version != 1)
        throw std::runtime_error("mvol '" + path + "': version mismatch (got " +
                                 std::to_string(version) + ", want 1)");
    MvolHeader h;
    h.kind = static_cast<std::uint8_t>(raw[6]);
    if (h.kind > 1) throw std::runtime_error("mvol '" + path + "': unknown kind");
    for (int i = 0; i < 3; ++i) {
        std::memcpy(&h.dims[i], raw.data() + 8 + 4 * i, 4);
        if (h.dims[i] == 0) throw std::runtime_error("mvol '" + path + "': zero dim");
        std::memcpy(&h.spacing[i], raw.data() + 20 + 4 * i, 4);
    }
    h.top = static_cast<std::uint8_t>(raw[32]);
    h.bottom = static_cast<std::uint8_t>(raw[33]);
    if (h.top > 3 || h.bottom > 3)
        throw std::runtime_error("mvol '" + path + "': bad region tag");
    return h;
}

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("mvol '" + path + "': cannot open");
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return raw;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("mvol '" + path + "': cannot open for write");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("mvol '" + path + "': write failed");
}

}  // namespace detail

inline void write_mvol(const std::string& path, const CtVolume& v) {
    validate_ct(v);
    detail::MvolHeader h;
    h.kind = 0;
    for (int i = 0; i < 3; ++i) {
        h.dims[i] = static_cast<std::uint32_t>(v.hu.dims[2 + i]);
        h.spacing[i] = v.meta.spacing[i];
    }
    h.top = static_cast<std::uint8_t>(v.meta.top);
    h.bottom = static_cast<std::uint8_t>(v.meta.bottom);
    std::string bytes = detail::pack_header(h);
    detail::put_bytes(bytes, v.hu.data.data(), sizeof(float) * v.hu.data.size());
    detail::write_file(path, bytes);
}

inline void write_mvol(const std::string& path, const SegMask& m) {
    validate_mask(m);
    detail::MvolHeader h;
    h.kind = 1;
    for (int i = 0; i < 3; ++i) {
        h.dims[i] = static_cast<std::uint32_t>(m.dims[i]);
        h.spacing[i] = m.meta.spacing[i];
    }
    h.top = static_cast<std::uint8_t>(m.meta.top);
    h.bottom = static_cast<std::uint8_t>(m.meta.bottom);
    std::string bytes = detail::pack_header(h);
    detail::put_bytes(bytes, m.labels.data(), sizeof(std::uint16_t) * m.labels.size());
    detail::write_file(path, bytes);
}

using Mvol = std::variant<CtVolume, SegMask>;

inline Mvol read_mvol(const std::string& path) {
    const std::string raw = detail::read_file(path);
    const detail::MvolHeader h = detail::parse_header(raw, path);
    VolumeMeta meta;
    meta.spacing = h.spacing;
    meta.top = static_cast<Region>(h.top);
    meta.bottom = static_cast<Region>(h.bottom);
    const i64 voxels = static_cast<i64>(h.dims[0]) * h.dims[1] * h.dims[2];
    const std::size_t elem = h.kind == 0 ? sizeof(float) : sizeof(std::uint16_t);
    if (raw.size() < 40 + elem * static_cast<std::size_t>(voxels))
        throw std::runtime_error("mvol '" + path + "': truncated payload (" +
                                 std::to_string(raw.size() - 40) + " bytes for " +
                                 std::to_string(voxels) + " voxels)");
    if (h.kind == 0) {
        CtVolume v;
        v.meta = meta;
        v.hu = Tensor5(1, 1, h.dims[0], h.dims[1], h.dims[2]);
        std::memcpy(v.hu.data.data(), raw.data() + 40, sizeof(float) * v.hu.data.size());
        validate_ct(v);
        return v;
    }
    SegMask m;
    m.meta = meta;
    m.dims = {static_cast<i64>(h.dims[0]), static_cast<i64>(h.dims[1]),
              static_cast<i64>(h.dims[2])};
    m.labels.resize(static_cast<std::size_t>(voxels));
    std::memcpy(m.labels.data(), raw.data() + 40, sizeof(std::uint16_t) * m.labels.size());
    validate_mask(m);
    return m;
}

// =====================================================================
//  HU window
// =====================================================================

// Clip to [-1000, 1000] and map affinely onto [0,1].  The clip is lossy by
// design; everything downstream of ingestion works in the unit window.
inline Tensor5 normalize_hu(const CtVolume& v) {
    Tensor5 out = Tensor5::shaped(v.hu.dims);
    for (i64 i = 0; i < v.hu.numel(); ++i) {
        const float c = std::min(kHuHi, std::max(kHuLo, v.hu.data[i]));
        out.data[i] = (c - kHuLo) / (kHuHi - kHuLo);
    }
    return out;
}

inline CtVolume denormalize_hu(const Tensor5& t, const VolumeMeta& meta) {
    CtVolume v;
    v.meta = meta;
    v.hu = Tensor5::shaped(t.dims);
    for (i64 i = 0; i < t.numel(); ++i) {
        const float c = std::min(1.0f, std::max(0.0f, t.data[i]));
        v.hu.data[i] = kHuLo + c * (kHuHi - kHuLo);
    }
    return v;
}

// =====================================================================
//  Resampling to dimension multiples
// =====================================================================

inline i64 nearest_multiple(i64 dim, i64 m) {
    if (m < 1) throw std::invalid_argument("round_dims: multiple must be >= 1");
    i64 t = ((dim + m / 2) / m) * m;  // tie rounds up
    if (t == 0) t = m;                // never round to empty
    return t;
}

// Trilinear, half-voxel-centre convention (align_corners = false): output
// voxel i samples source coordinate (i + 0.5) * in/out - 0.5, clamped.
inline Tensor5 resize_trilinear(const Tensor5& src, i64 od, i64 oh, i64 ow) {
    const i64 D = src.dims[2], H = src.dims[3], W = src.dims[4];
    if (od < 1 || oh < 1 || ow < 1)
        throw std::invalid_argument("resize: target dims must be >= 1");
    Tensor5 out(src.dims[0], src.dims[1], od, oh, ow);

    auto axis_prep = [](i64 o, i64 in, i64 i, i64& lo, i64& hi, double& f) {
        double c = (static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                       static_cast<double>(o) -
                   0.5;
        if (c < 0.0) c = 0.0;
        if (c > static_cast<double>(in - 1)) c = static_cast<double>(in - 1);
        lo = static_cast<i64>(c);
        hi = std::min(lo + 1, in - 1);
        f = c - static_cast<double>(lo);
    };

    for (i64 n = 0; n < src.dims[0]; ++n)
        for (i64 c = 0; c < src.dims[1]; ++c)
            for (i64 d = 0; d < od; ++d) {
                i64 d0, d1;
                double fd;
                axis_prep(od, D, d, d0, d1, fd);
                for (i64 h = 0; h < oh; ++h) {
                    i64 h0, h1;
                    double fh;
                    axis_prep(oh, H, h, h0, h1, fh);
                    for (i64 w = 0; w < ow; ++w) {
                        i64 w0, w1;
                        double fw;
                        axis_prep(ow, W, w, w0, w1, fw);
                        const double v000 = src.at(n, c, d0, h0, w0);
                        const double v001 = src.at(n, c, d0, h0, w1);
                        const double v010 = src.at(n, c, d0, h1, w0);
                        const double v011 = src.at(n, c, d0, h1, w1);
                        const double v100 = src.at(n, c, d1, h0, w0);
                        const double v101 = src.at(n, c, d1, h0, w1);
                        const double v110 = src.at(n, c, d1, h1, w0);
                        const double v111 = src.at(n, c, d1, h1, w1);
                        const double v00 = v000 + (v001 - v000) * fw;
                        const double v01 = v010 + (v011 - v010) * fw;
                        const double v10 = v100 + (v101 - v100) * fw;
                        const double v11 = v110 + (v111 - v110) * fw;
                        const double v0 = v00 + (v01 - v00) * fh;
                        const double v1 = v10 + (v11 - v10) * fh;
                        out.at(n, c, d, h, w) = static_cast<float>(v0 + (v1 - v0) * fd);
                    }
                }
            }
    return out;
}

// Resample each spatial dim to its nearest positive multiple of M; spacing
// is rescaled so the physical extent (dims x spacing) is preserved exactly.
inline CtVolume round_dims(const CtVolume& v, i64 multiple) {
    const i64 td = nearest_multiple(v.hu.dims[2], multiple);
    const i64 th = nearest_multiple(v.hu.dims[3], multiple);
    const i64 tw = nearest_multiple(v.hu.dims[4], multiple);
    CtVolume out;
    out.meta = v.meta;
    if (td == v.hu.dims[2] && th == v.hu.dims[3] && tw == v.hu.dims[4]) {
        out.hu = v.hu;  // identity, bit for bit
        return out;
    }
    out.hu = resize_trilinear(v.hu, td, th, tw);
    const i64 in_dims[3] = {v.hu.dims[2], v.hu.dims[3], v.hu.dims[4]};
    const i64 out_dims[3] = {td, th, tw};
    for (int i = 0; i < 3; ++i)
        out.meta.spacing[i] = static_cast<float>(
            static_cast<double>(v.meta.spacing[i]) * static_cast<double>(in_dims[i]) /
            static_cast<double>(out_dims[i]));
    return out;
}

// =====================================================================
//  Condition encoding
// =====================================================================

inline std::array<float, 4> encode_region(Region r) {
    std::array<float, 4> v{0.0f, 0.0f, 0.0f, 0.0f};
    v[static_cast<int>(r)] = 1.0f;
    return v;
}

// c_p: scan coverage (top/bottom one-hots) plus voxel spacing in mm.
struct PrimaryCond {
    std::array<float, 4> i_top{}, i_bottom{};
    std::array<float, 3> s{};  // [sz, sy, sx] mm
};

inline PrimaryCond encode_primary_cond(const VolumeMeta& meta) {
    validate_meta(meta);
    PrimaryCond c;
    c.i_top = encode_region(meta.top);
    c.i_bottom = encode_region(meta.bottom);
    c.s = meta.spacing;
    return c;
}

}  // namespace voxsyn

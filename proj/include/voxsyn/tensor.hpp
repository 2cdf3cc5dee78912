#pragma once
// tensor.hpp
//
// Dense 5-D float tensors laid out [n, c, d, h, w], row-major with w fastest.
// Everything downstream (conv stacks, splitting, volume I/O) sits on top of
// this one storage type.  Allocations go through a tracking allocator so the
// split engine can report measured high-water marks against its analytic
// model.  Reductions run in a fixed sequential order: two runs over the same
// data give bit-identical results.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxsyn {

using i64 = std::int64_t;

// =====================================================================
//  Allocation tracking
// =====================================================================
//
// Global byte counters fed by the allocator below.  A Session brackets one
// measured region: peak() is the high-water mark of bytes allocated above
// the level at session start.  Sessions are not meant to nest; measurement
// runs are single-threaded at the top level (worker threads inside a run
// still count — the counters are atomic).

namespace mem {

inline std::atomic<long long> g_live{0};
inline std::atomic<long long> g_high{0};

inline void on_alloc(long long bytes) {
    long long cur = g_live.fetch_add(bytes) + bytes;
    long long hi = g_high.load();
    while (cur > hi && !g_high.compare_exchange_weak(hi, cur)) {
    }
}

inline void on_free(long long bytes) { g_live.fetch_sub(bytes); }

template <class T>
struct TrackingAlloc {
    using value_type = T;
    TrackingAlloc() = default;
    template <class U>
    TrackingAlloc(const TrackingAlloc<U>&) {}

    T* allocate(std::size_t n) {
        on_alloc(static_cast<long long>(n * sizeof(T)));
        return static_cast<T*>(::operator new(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) {
        on_free(static_cast<long long>(n * sizeof(T)));
        ::operator delete(p);
    }
    template <class U>
    bool operator==(const TrackingAlloc<U>&) const { return true; }
};

struct Session {
    long long base;
    Session() {
        base = g_live.load();
        g_high.store(base);
    }
    // Bytes above the level at session start, at the worst moment so far.
    long long peak() const { return g_high.load() - base; }
    long long live() const { return g_live.load() - base; }
};

}  // namespace mem

using FloatBuf = std::vector<float, mem::TrackingAlloc<float>>;

// =====================================================================
//  Interval — half-open index range on one axis
// =====================================================================

struct Interval {
    i64 start = 0;
    i64 end = 0;  // exclusive

    i64 len() const { return end - start; }
    bool contains(i64 i) const { return i >= start && i < end; }
    bool operator==(const Interval&) const = default;
};

inline void check_interval(const Interval& iv, i64 extent, const char* who) {
    if (iv.start < 0 || iv.start > iv.end || iv.end > extent)
        throw std::invalid_argument(std::string(who) + ": bad interval [" +
                                    std::to_string(iv.start) + "," + std::to_string(iv.end) +
                                    ") for extent " + std::to_string(extent));
}

// Spatial axes of a Tensor5.  Values index into dims[] directly.
enum class Axis : int { d = 2, h = 3, w = 4 };

// =====================================================================
//  Tensor5
// =====================================================================

struct Tensor5 {
    std::array<i64, 5> dims{1, 1, 1, 1, 1};  // [n, c, d, h, w]
    FloatBuf data;

    Tensor5() = default;

    Tensor5(i64 n, i64 c, i64 d, i64 h, i64 w, float fill = 0.0f)
        : dims{n, c, d, h, w} {
        for (i64 e : dims)
            if (e < 1) throw std::invalid_argument("Tensor5: all dims must be >= 1");
        data.assign(static_cast<std::size_t>(numel()), fill);
    }

    static Tensor5 shaped(const std::array<i64, 5>& d, float fill = 0.0f) {
        return Tensor5(d[0], d[1], d[2], d[3], d[4], fill);
    }

    i64 n() const { return dims[0]; }
    i64 c() const { return dims[1]; }
    i64 d() const { return dims[2]; }
    i64 h() const { return dims[3]; }
    i64 w() const { return dims[4]; }

    i64 numel() const { return dims[0] * dims[1] * dims[2] * dims[3] * dims[4]; }

    i64 index(i64 n, i64 c, i64 d, i64 h, i64 w) const {
        return (((n * dims[1] + c) * dims[2] + d) * dims[3] + h) * dims[4] + w;
    }
    float& at(i64 n, i64 c, i64 d, i64 h, i64 w) { return data[index(n, c, d, h, w)]; }
    float at(i64 n, i64 c, i64 d, i64 h, i64 w) const { return data[index(n, c, d, h, w)]; }

    bool same_shape(const Tensor5& o) const { return dims == o.dims; }

    i64 bytes() const { return numel() * static_cast<i64>(sizeof(float)); }
};

inline std::string shape_str(const Tensor5& t) {
    std::string s = "[";
    for (int i = 0; i < 5; ++i) s += std::to_string(t.dims[i]) + (i < 4 ? "," : "]");
    return s;
}

// Scans every element; used on ingest paths (file reads, external buffers),
// not on internal hot paths.
inline void validate_finite(const Tensor5& t, const char* context) {
    for (float v : t.data)
        if (!std::isfinite(v))
            throw std::runtime_error(std::string(context) + ": non-finite value in tensor");
}

// =====================================================================
//  Slicing along one spatial axis
// =====================================================================

// Copy of a contiguous interval along `axis`; other dims unchanged.
inline Tensor5 slice_axis(const Tensor5& t, Axis axis, const Interval& iv) {
    const int a = static_cast<int>(axis);
    check_interval(iv, t.dims[a], "slice_axis");
    if (iv.len() == 0) throw std::invalid_argument("slice_axis: empty interval");

    std::array<i64, 5> od = t.dims;
    od[a] = iv.len();
    Tensor5 out = Tensor5::shaped(od);

    std::array<i64, 5> lo{0, 0, 0, 0, 0};
    lo[a] = iv.start;
    for (i64 n = 0; n < od[0]; ++n)
        for (i64 c = 0; c < od[1]; ++c)
            for (i64 d = 0; d < od[2]; ++d)
                for (i64 h = 0; h < od[3]; ++h)
                    for (i64 w = 0; w < od[4]; ++w)
                        out.at(n, c, d, h, w) =
                            t.at(n + lo[0], c + lo[1], d + lo[2], h + lo[3], w + lo[4]);
    return out;
}

// Write src into dst starting at `offset` along `axis`.  Shapes must agree on
// every other dim and src must fit.  Callers writing disjoint intervals may
// do so from different threads; overlapping concurrent writes are a contract
// violation.
inline void write_axis(Tensor5& dst, const Tensor5& src, Axis axis, i64 offset) {
    const int a = static_cast<int>(axis);
    for (int i = 0; i < 5; ++i)
        if (i != a && dst.dims[i] != src.dims[i])
            throw std::invalid_argument("write_axis: shape mismatch on dim " + std::to_string(i));
    if (offset < 0 || offset + src.dims[a] > dst.dims[a])
        throw std::invalid_argument("write_axis: src does not fit at offset " +
                                    std::to_string(offset));

    std::array<i64, 5> lo{0, 0, 0, 0, 0};
    lo[a] = offset;
    for (i64 n = 0; n < src.dims[0]; ++n)
        for (i64 c = 0; c < src.dims[1]; ++c)
            for (i64 d = 0; d < src.dims[2]; ++d)
                for (i64 h = 0; h < src.dims[3]; ++h)
                    for (i64 w = 0; w < src.dims[4]; ++w)
                        dst.at(n + lo[0], c + lo[1], d + lo[2], h + lo[3], w + lo[4]) =
                            src.at(n, c, d, h, w);
}

// write_axis of slice_axis(src, axis, src_iv) without the intermediate copy.
// Same disjoint-write concurrency contract as write_axis.
inline void write_axis_interval(Tensor5& dst, const Tensor5& src, Axis axis,
                                const Interval& src_iv, i64 dst_offset) {
    const int a = static_cast<int>(axis);
    check_interval(src_iv, src.dims[a], "write_axis_interval");
    for (int i = 0; i < 5; ++i)
        if (i != a && dst.dims[i] != src.dims[i])
            throw std::invalid_argument("write_axis_interval: shape mismatch on dim " +
                                        std::to_string(i));
    if (dst_offset < 0 || dst_offset + src_iv.len() > dst.dims[a])
        throw std::invalid_argument("write_axis_interval: interval does not fit at offset " +
                                    std::to_string(dst_offset));

    std::array<i64, 5> cnt = src.dims;
    cnt[a] = src_iv.len();
    std::array<i64, 5> slo{0, 0, 0, 0, 0}, dlo{0, 0, 0, 0, 0};
    slo[a] = src_iv.start;
    dlo[a] = dst_offset;
    for (i64 n = 0; n < cnt[0]; ++n)
        for (i64 c = 0; c < cnt[1]; ++c)
            for (i64 d = 0; d < cnt[2]; ++d)
                for (i64 h = 0; h < cnt[3]; ++h)
                    for (i64 w = 0; w < cnt[4]; ++w)
                        dst.at(n + dlo[0], c + dlo[1], d + dlo[2], h + dlo[3], w + dlo[4]) =
                            src.at(n + slo[0], c + slo[1], d + slo[2], h + slo[3], w + slo[4]);
}

// =====================================================================
//  Elementwise and reductions
// =====================================================================

namespace detail {
inline void check_same_shape(const Tensor5& a, const Tensor5& b, const char* who) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_str(a) +
                                    " vs " + shape_str(b));
}
}  // namespace detail

inline Tensor5 add(const Tensor5& a, const Tensor5& b) {
    detail::check_same_shape(a, b, "add");
    Tensor5 out = Tensor5::shaped(a.dims);
    for (i64 i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

inline Tensor5 sub(const Tensor5& a, const Tensor5& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor5 out = Tensor5::shaped(a.dims);
    for (i64 i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] - b.data[i];
    return out;
}

inline Tensor5 mul(const Tensor5& a, const Tensor5& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor5 out = Tensor5::shaped(a.dims);
    for (i64 i = 0; i < a.numel(); ++i) out.data[i] = a.data[i] * b.data[i];
    return out;
}

// dst += s * src
inline void axpy_(Tensor5& dst, float s, const Tensor5& src) {
    detail::check_same_shape(dst, src, "axpy_");
    for (i64 i = 0; i < dst.numel(); ++i) dst.data[i] += s * src.data[i];
}

// Reductions accumulate in doubles, in flat index order.
inline double reduce_sum(const Tensor5& t) {
    double acc = 0.0;
    for (float v : t.data) acc += static_cast<double>(v);
    return acc;
}

inline float reduce_max(const Tensor5& t) {
    float m = t.data[0];
    for (float v : t.data) m = std::max(m, v);
    return m;
}

inline double reduce_mean_abs(const Tensor5& t) {
    double acc = 0.0;
    for (float v : t.data) acc += std::abs(static_cast<double>(v));
    return acc / static_cast<double>(t.numel());
}

inline float max_abs_diff(const Tensor5& a, const Tensor5& b) {
    detail::check_same_shape(a, b, "max_abs_diff");
    float m = 0.0f;
    for (i64 i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

inline bool bit_equal(const Tensor5& a, const Tensor5& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace voxsyn

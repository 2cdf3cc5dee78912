#pragma once
// tsp.hpp
//
// Tensor splitting along the depth axis for sequential conv chains.
//
// A plan back-propagates each segment's output interval through the chain
// with exact receptive-field interval arithmetic, so every segment's input
// slab carries precisely the halo rows its outputs depend on.  Execution
// then reproduces the monolithic result: convs run in a "ranged" form that
// zero-pads only at true tensor boundaries, and normalization layers run in
// two passes — partial sums per segment over an ownership partition of the
// depth axis, reduced to global statistics, then applied per segment.
//
// Segment outputs are stitched into disjoint regions of one output buffer.
// Sequential mode walks segments in order; parallel mode runs them on a
// bounded worker pool.  Both perform identical per-segment arithmetic and
// reduce statistics in fixed segment order, so their outputs are
// byte-identical.
//
// Also here: the naive sliding-window comparator (windows run independently
// with padded edges, outputs blended — deliberately *not* exact), the seam
// artifact score that quantifies the difference, and the memory model with
// its instrumented-allocator counterpart.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <functional>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nn.hpp"

namespace voxsyn {

// =====================================================================
//  Interval back-propagation
// =====================================================================

// Smallest input interval whose rows determine the given output rows.
// Clamped to [0, in_extent); rows the formula places outside the tensor are
// zero padding, not data.
inline Interval required_input_interval(const Layer& layer, Interval out_iv, i64 in_extent) {
    Interval in;
    if (const auto* cv = std::get_if<Conv3dLayer>(&layer)) {
        in.start = std::max<i64>(0, out_iv.start * cv->s[0] - cv->p[0]);
        in.end = std::min<i64>(in_extent, (out_iv.end - 1) * cv->s[0] - cv->p[0] + cv->k[0]);
    } else if (std::get_if<UpsampleLayer>(&layer)) {
        in.start = out_iv.start / 2;
        in.end = (out_iv.end + 1) / 2;
    } else {
        in = out_iv;  // norm / activation / identity touch rows elementwise
    }
    if (in.len() <= 0)
        throw std::invalid_argument("required_input_interval: empty preimage for out [" +
                                    std::to_string(out_iv.start) + "," +
                                    std::to_string(out_iv.end) + ")");
    return in;
}

// =====================================================================
//  SplitPlan
// =====================================================================

struct SplitPlan {
    // split axis is fixed to d — slabs are contiguous and CT volumes are
    // deepest along z.
    i64 n_segments = 0;
    std::array<i64, 5> input_dims{};
    std::vector<std::array<i64, 5>> level_dims;     // dims entering layer i; back() = output
    // seg_iv[j][i] = depth rows of level i that segment j materializes.
    // seg_iv[j][0] is the segment's chain-input slab, seg_iv[j][L] its
    // disjoint output core.
    std::vector<std::vector<Interval>> seg_iv;

    Interval out_core(i64 j) const { return seg_iv[j].back(); }
};

inline SplitPlan plan_split(const LayerChain& chain, const std::array<i64, 5>& input_dims,
                            i64 n_segments) {
    SplitPlan plan;
    plan.input_dims = input_dims;
    plan.level_dims = chain_dims(chain, input_dims);
    const std::size_t L = chain.layers.size();
    const i64 out_d = plan.level_dims[L][2];
    if (n_segments < 1 || n_segments > out_d)
        throw std::invalid_argument("plan_split: n_segments must be in [1, out d-extent=" +
                                    std::to_string(out_d) + "]");
    plan.n_segments = n_segments;

    // Near-equal disjoint cover of the output axis; remainder rows go to the
    // leading segments.
    const i64 base = out_d / n_segments, rem = out_d % n_segments;
    plan.seg_iv.assign(static_cast<std::size_t>(n_segments),
                       std::vector<Interval>(L + 1));
    i64 cursor = 0;
    for (i64 j = 0; j < n_segments; ++j) {
        const i64 len = base + (j < rem ? 1 : 0);
        plan.seg_iv[j][L] = {cursor, cursor + len};
        cursor += len;
    }

    // Walk backward.  After computing each level's required intervals, close
    // coverage: the union over segments must be the full extent, because
    // norm layers later take global statistics over that level and every row
    // must be owned by exactly one segment.  (Preimage unions can leave gaps
    // — e.g. a stride-2 conv whose kernel never reads the last input row —
    // so growth here is deliberate and always containment-safe.)
    for (std::size_t i = L; i-- > 0;) {
        const i64 ext = plan.level_dims[i][2];
        for (i64 j = 0; j < n_segments; ++j)
            plan.seg_iv[j][i] =
                required_input_interval(chain.layers[i], plan.seg_iv[j][i + 1], ext);
        for (i64 j = 1; j < n_segments; ++j)
            if (plan.seg_iv[j][i].start > plan.seg_iv[j - 1][i].end)
                plan.seg_iv[j][i].start = plan.seg_iv[j - 1][i].end;
        plan.seg_iv[0][i].start = 0;
        plan.seg_iv[n_segments - 1][i].end = ext;
    }
    return plan;
}

// Ownership partition of level i: disjoint intervals covering the extent,
// each inside its segment's slab.  Used for norm partial sums so halo rows
// are never double-counted.
inline std::vector<Interval> ownership_partition(const SplitPlan& plan, std::size_t level) {
    const i64 n = plan.n_segments;
    const i64 ext = plan.level_dims[level][2];
    std::vector<i64> cut(static_cast<std::size_t>(n + 1));
    cut[0] = 0;
    for (i64 j = 1; j < n; ++j)
        cut[j] = std::max(plan.seg_iv[j][level].start, cut[j - 1]);
    cut[n] = ext;
    std::vector<Interval> own(static_cast<std::size_t>(n));
    for (i64 j = 0; j < n; ++j) own[j] = {cut[j], cut[j + 1]};
    return own;
}

// =====================================================================
//  Execution
// =====================================================================

enum class TspMode { sequential, parallel };

// global: two-pass reduction — the correct variant.  per_segment: each
// segment normalizes with its own slab statistics; kept as an ablation knob
// because it's the obvious-but-wrong approach and tests demonstrate the gap.
enum class TspNormStats { global, per_segment };

struct TspOptions {
    TspMode mode = TspMode::sequential;
    int workers = 2;
    TspNormStats norm_stats = TspNormStats::global;
};

namespace detail {

// Bounded pool; rethrows the first worker exception.
inline void parallel_over(i64 n, int workers, const std::function<void(i64)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (i64 i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<i64> next{0};
    std::exception_ptr first_error;
    std::mutex err_mu;
    const int nw = static_cast<int>(std::min<i64>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nw));
    for (int t = 0; t < nw; ++t)
        pool.emplace_back([&] {
            for (i64 i; (i = next.fetch_add(1)) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lk(err_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

inline Tensor5 advance_one(const LayerChain& chain, const SplitPlan& plan, i64 j,
                           std::size_t level, Tensor5&& slab) {
    const Layer& layer = chain.layers[level];
    const Interval in_iv = plan.seg_iv[j][level];
    const Interval out_iv = plan.seg_iv[j][level + 1];
    const i64 in_full = plan.level_dims[level][2];
    if (const auto* cv = std::get_if<Conv3dLayer>(&layer))
        return conv3d_forward_ranged(*cv, slab, in_iv, out_iv, in_full);
    if (std::get_if<UpsampleLayer>(&layer))
        return upsample2_forward_ranged(slab, in_iv, out_iv);
    if (const auto* ac = std::get_if<ActivationLayer>(&layer)) return act_forward(*ac, slab);
    return std::move(slab);  // identity (groupnorm handled by the stage loop)
}

}  // namespace detail

inline void check_plan(const LayerChain& chain, const std::array<i64, 5>& x_dims,
                       const SplitPlan& plan) {
    if (plan.input_dims != x_dims)
        throw std::invalid_argument("execute_tsp: plan input dims do not match tensor");
    if (plan.level_dims.size() != chain.layers.size() + 1 || plan.n_segments < 1)
        throw std::invalid_argument("execute_tsp: plan does not match chain");
}

inline Tensor5 execute_tsp(const LayerChain& chain, const Tensor5& x, const SplitPlan& plan,
                           const TspOptions& opt = {}) {
    check_plan(chain, x.dims, plan);
    const std::size_t L = chain.layers.size();
    const i64 n = plan.n_segments;
    const int workers = opt.mode == TspMode::parallel ? std::max(1, opt.workers) : 1;

    bool has_norm = false;
    for (const Layer& l : chain.layers)
        if (std::get_if<GroupNormLayer>(&l)) has_norm = true;

    if (!has_norm) {
        // No sync points: each segment runs start-to-finish and is freed
        // right after its core rows are stitched, so sequential mode keeps
        // exactly one working set alive.
        Tensor5 out = Tensor5::shaped(plan.level_dims[L]);
        detail::parallel_over(n, workers, [&](i64 j) {
            Tensor5 slab = slice_axis(x, Axis::d, plan.seg_iv[j][0]);
            for (std::size_t i = 0; i < L; ++i)
                slab = detail::advance_one(chain, plan, j, i, std::move(slab));
            const Interval core = plan.out_core(j);
            const Interval rel{core.start - plan.seg_iv[j][L].start,
                               core.end - plan.seg_iv[j][L].start};
            write_axis_interval(out, slab, Axis::d, rel, core.start);
        });
        return out;
    }

    // Norm chains run staged: all segments advance to the next norm layer,
    // statistics reduce across segments in fixed order, everyone applies,
    // repeat.  All slabs are necessarily live at each sync point.
    std::vector<Tensor5> slabs(static_cast<std::size_t>(n));
    detail::parallel_over(n, workers,
                          [&](i64 j) { slabs[j] = slice_axis(x, Axis::d, plan.seg_iv[j][0]); });

    std::size_t level = 0;
    while (level < L) {
        if (const auto* gn = std::get_if<GroupNormLayer>(&chain.layers[level])) {
            if (opt.norm_stats == TspNormStats::global) {
                const std::vector<Interval> own = ownership_partition(plan, level);
                std::vector<GroupPartial> parts(static_cast<std::size_t>(n));
                detail::parallel_over(n, workers, [&](i64 j) {
                    parts[j] = groupnorm_partial(*gn, slabs[j], plan.seg_iv[j][level], own[j]);
                });
                const GroupStats stats = reduce_group_partials(*gn, parts, x.dims[0]);
                detail::parallel_over(n, workers, [&](i64 j) {
                    slabs[j] = groupnorm_apply(*gn, slabs[j], stats);
                });
            } else {
                // Ablation: per-segment statistics — breaks equivalence.
                detail::parallel_over(n, workers, [&](i64 j) {
                    slabs[j] = groupnorm_apply(*gn, slabs[j], groupnorm_stats(*gn, slabs[j]));
                });
            }
            ++level;
            continue;
        }
        const std::size_t stage_end = [&] {
            std::size_t e = level;
            while (e < L && !std::get_if<GroupNormLayer>(&chain.layers[e])) ++e;
            return e;
        }();
        detail::parallel_over(n, workers, [&](i64 j) {
            for (std::size_t i = level; i < stage_end; ++i)
                slabs[j] = detail::advance_one(chain, plan, j, i, std::move(slabs[j]));
        });
        level = stage_end;
    }

    // Stitch buffer appears only now — before this point all live bytes are
    // the segment slabs, which is what the memory model counts.
    Tensor5 out = Tensor5::shaped(plan.level_dims[L]);
    for (i64 j = 0; j < n; ++j) {
        const Interval core = plan.out_core(j);
        const Interval rel{core.start - plan.seg_iv[j][L].start,
                           core.end - plan.seg_iv[j][L].start};
        write_axis_interval(out, slabs[j], Axis::d, rel, core.start);
        slabs[j] = Tensor5();  // free as we stitch
    }
    return out;
}

// =====================================================================
//  Sliding-window comparator
// =====================================================================

enum class BlendKind { constant, gaussian };

struct SlidingWindowResult {
    Tensor5 y;
    bool window_below_receptive_field = false;
    std::vector<i64> seam_boundaries;  // output-coordinate d indices
};

// Depth receptive field of one output row, in input rows.  Walks an interior
// voxel far from 0 with a huge extent so neither clamp fires.
inline i64 chain_receptive_field_d(const LayerChain& chain) {
    const i64 far = i64{1} << 20;
    Interval iv{far, far + 1};
    for (std::size_t i = chain.layers.size(); i-- > 0;)
        iv = required_input_interval(chain.layers[i], iv, i64{1} << 40);
    return iv.len();
}

// The naive baseline: run the chain on each depth window independently (so
// window edges behave like volume edges — zero padding where real rows
// should be) and blend overlapping outputs with per-row weights.  Exactness
// is deliberately not provided; seam_artifact_score quantifies the damage.
inline SlidingWindowResult execute_sliding_window(const LayerChain& chain, const Tensor5& x,
                                                  i64 window_extent, double overlap_fraction,
                                                  BlendKind blend) {
    const i64 D = x.dims[2];
    if (window_extent < 1 || window_extent > D)
        throw std::invalid_argument("sliding_window: window must be in [1, input extent]");
    if (overlap_fraction < 0.0 || overlap_fraction >= 1.0)
        throw std::invalid_argument("sliding_window: overlap fraction must be in [0, 1)");

    i64 stride = window_extent - static_cast<i64>(window_extent * overlap_fraction);
    if (stride < 1) stride = 1;
    std::vector<i64> starts;
    for (i64 s = 0;; s += stride) {
        if (s + window_extent >= D) {
            if (starts.empty() || starts.back() != D - window_extent)
                starts.push_back(D - window_extent);
            break;
        }
        starts.push_back(s);
    }

    const auto full_dims = chain_dims(chain, x.dims);
    const std::array<i64, 5> out_dims = full_dims.back();
    const i64 outD = out_dims[2];

    SlidingWindowResult res;
    res.window_below_receptive_field = window_extent < chain_receptive_field_d(chain);
    res.y = Tensor5::shaped(out_dims);

    std::vector<double> acc(static_cast<std::size_t>(res.y.numel()), 0.0);
    std::vector<double> wsum(static_cast<std::size_t>(outD), 0.0);

    for (std::size_t wi = 0; wi < starts.size(); ++wi) {
        const i64 s = starts[wi];
        Tensor5 win = slice_axis(x, Axis::d, {s, s + window_extent});
        Tensor5 yw = run_chain(chain, win);
        // Nominal placement by the chain's overall depth scale.  For
        // same-extent chains this is the window position itself.
        i64 place = s * outD / D;
        if (place + yw.dims[2] > outD) place = outD - yw.dims[2];
        if (wi > 0) {
            res.seam_boundaries.push_back(place);
            const i64 prev_end = starts[wi - 1] * outD / D + yw.dims[2];
            if (prev_end < outD) res.seam_boundaries.push_back(prev_end);
        }

        const i64 len = yw.dims[2];
        std::vector<double> wgt(static_cast<std::size_t>(len), 1.0);
        if (blend == BlendKind::gaussian) {
            const double sigma = static_cast<double>(len) / 4.0;
            const double centre = (static_cast<double>(len) - 1.0) / 2.0;
            for (i64 i = 0; i < len; ++i) {
                const double z = (static_cast<double>(i) - centre) / sigma;
                wgt[static_cast<std::size_t>(i)] = std::exp(-0.5 * z * z);
            }
        }
        for (i64 nn = 0; nn < yw.dims[0]; ++nn)
            for (i64 c = 0; c < yw.dims[1]; ++c)
                for (i64 d = 0; d < len; ++d) {
                    const double g = wgt[static_cast<std::size_t>(d)];
                    for (i64 h = 0; h < yw.dims[3]; ++h)
                        for (i64 w = 0; w < yw.dims[4]; ++w)
                            acc[static_cast<std::size_t>(
                                res.y.index(nn, c, place + d, h, w))] +=
                                g * yw.at(nn, c, d, h, w);
                }
        for (i64 d = 0; d < len; ++d) wsum[static_cast<std::size_t>(place + d)] += wgt[static_cast<std::size_t>(d)];
    }

    for (i64 nn = 0; nn < res.y.dims[0]; ++nn)
        for (i64 c = 0; c < res.y.dims[1]; ++c)
            for (i64 d = 0; d < outD; ++d) {
                const double ws = wsum[static_cast<std::size_t>(d)];
                for (i64 h = 0; h < res.y.dims[3]; ++h)
                    for (i64 w = 0; w < res.y.dims[4]; ++w) {
                        const std::size_t i =
                            static_cast<std::size_t>(res.y.index(nn, c, d, h, w));
                        res.y.data[i] = ws > 0.0 ? static_cast<float>(acc[i] / ws) : 0.0f;
                    }
            }

    std::sort(res.seam_boundaries.begin(), res.seam_boundaries.end());
    res.seam_boundaries.erase(
        std::unique(res.seam_boundaries.begin(), res.seam_boundaries.end()),
        res.seam_boundaries.end());
    return res;
}

// Mean |y - y_ref| over depth slabs within ±band rows of any boundary.
inline double seam_artifact_score(const Tensor5& y, const Tensor5& y_ref,
                                  const std::vector<i64>& boundaries, i64 band) {
    detail::check_same_shape(y, y_ref, "seam_artifact_score");
    if (boundaries.empty())
        throw std::invalid_argument("seam_artifact_score: empty boundary list");
    const i64 D = y.dims[2];
    std::vector<char> in_band(static_cast<std::size_t>(D), 0);
    for (i64 b : boundaries) {
        if (b < 0 || b >= D)
            throw std::invalid_argument("seam_artifact_score: boundary outside extent");
        for (i64 d = std::max<i64>(0, b - band); d <= std::min(D - 1, b + band); ++d)
            in_band[static_cast<std::size_t>(d)] = 1;
    }
    double acc = 0.0;
    i64 cnt = 0;
    for (i64 n = 0; n < y.dims[0]; ++n)
        for (i64 c = 0; c < y.dims[1]; ++c)
            for (i64 d = 0; d < D; ++d) {
                if (!in_band[static_cast<std::size_t>(d)]) continue;
                for (i64 h = 0; h < y.dims[3]; ++h)
                    for (i64 w = 0; w < y.dims[4]; ++w) {
                        acc += std::abs(static_cast<double>(y.at(n, c, d, h, w)) -
                                        y_ref.at(n, c, d, h, w));
                        ++cnt;
                    }
            }
    return acc / static_cast<double>(cnt);
}

// =====================================================================
//  Memory model
// =====================================================================

struct MemoryReport {
    std::vector<std::array<i64, 2>> per_layer_bytes;  // {in, out} per layer, monolithic
    i64 analytic_monolithic_peak = 0;                 // max over layers of in+out
    i64 analytic_plan_peak = 0;                       // stitch + staged model
    i64 analytic_per_segment_peak = 0;                // max segment working set
    i64 stitch_bytes = 0;
    i64 measured_monolithic_peak = 0;
    i64 measured_plan_peak = 0;                       // sequential execution
};

namespace detail {

inline i64 level_bytes(const std::array<i64, 5>& dims, i64 d_rows) {
    return dims[0] * dims[1] * d_rows * dims[3] * dims[4] * static_cast<i64>(sizeof(float));
}

inline i64 slab_bytes(const SplitPlan& plan, i64 j, std::size_t level) {
    return level_bytes(plan.level_dims[level], plan.seg_iv[j][level].len());
}

}  // namespace detail

// Analytic model mirrors the executors above: it reports the worst moment of
// live activation bytes for a sequential run.  measure=true also runs the
// chain (on zeros) under the allocator counter and records real peaks.
inline MemoryReport memory_report(const LayerChain& chain, const std::array<i64, 5>& input_dims,
                                  const SplitPlan* plan = nullptr, bool measure = true) {
    MemoryReport rep;
    const auto dims = chain_dims(chain, input_dims);
    const std::size_t L = chain.layers.size();
    for (std::size_t i = 0; i < L; ++i) {
        const i64 in_b = detail::level_bytes(dims[i], dims[i][2]);
        const i64 out_b = detail::level_bytes(dims[i + 1], dims[i + 1][2]);
        rep.per_layer_bytes.push_back({in_b, out_b});
        rep.analytic_monolithic_peak = std::max(rep.analytic_monolithic_peak, in_b + out_b);
    }
    rep.stitch_bytes = detail::level_bytes(dims[L], dims[L][2]);

    if (plan) {
        check_plan(chain, input_dims, *plan);
        const i64 n = plan->n_segments;
        bool has_norm = false;
        for (const Layer& l : chain.layers)
            if (std::get_if<GroupNormLayer>(&l)) has_norm = true;

        for (i64 j = 0; j < n; ++j) {
            i64 seg_peak = 0;
            for (std::size_t i = 0; i < L; ++i)
                seg_peak = std::max(seg_peak, detail::slab_bytes(*plan, j, i) +
                                                  detail::slab_bytes(*plan, j, i + 1));
            rep.analytic_per_segment_peak = std::max(rep.analytic_per_segment_peak, seg_peak);
        }

        if (!has_norm) {
            // Stitch buffer plus one segment's working set at a time.
            rep.analytic_plan_peak = rep.stitch_bytes + rep.analytic_per_segment_peak;
        } else {
            // Staged: while segment j runs layer i of stage [a, b), earlier
            // segments rest at level b, later ones at level a.
            i64 peak = 0;
            std::size_t a = 0;
            while (a < L) {
                std::size_t b = a;
                if (std::get_if<GroupNormLayer>(&chain.layers[a])) {
                    b = a + 1;  // norm stage: in+out slabs of the one layer
                } else {
                    while (b < L && !std::get_if<GroupNormLayer>(&chain.layers[b])) ++b;
                }
                for (i64 j = 0; j < n; ++j) {
                    i64 others = 0;
                    for (i64 jj = 0; jj < n; ++jj) {
                        if (jj == j) continue;
                        others += detail::slab_bytes(*plan, jj, jj < j ? b : a);
                    }
                    for (std::size_t i = a; i < b; ++i)
                        peak = std::max(peak, others + detail::slab_bytes(*plan, j, i) +
                                                  detail::slab_bytes(*plan, j, i + 1));
                }
                a = b;
            }
            // Final stitch holds the output plus not-yet-freed slabs.
            i64 finals = 0;
            for (i64 j = 0; j < n; ++j) finals += detail::slab_bytes(*plan, j, L);
            peak = std::max(peak, rep.stitch_bytes + finals);
            rep.analytic_plan_peak = peak;
        }
    }

    if (measure) {
        Tensor5 x = Tensor5::shaped(input_dims, 0.0f);
        {
            mem::Session s;
            Tensor5 y = run_chain(chain, x);
            rep.measured_monolithic_peak = s.peak();
        }
        if (plan) {
            mem::Session s;
            Tensor5 y = execute_tsp(chain, x, *plan, {});
            rep.measured_plan_peak = s.peak();
        }
    }
    return rep;
}

// =====================================================================
//  Benchmark
// =====================================================================

struct BenchRow {
    std::string chain_id;
    i64 n_segments = 0;
    std::string mode;
    i64 analytic_peak_bytes = 0;
    i64 measured_peak_bytes = 0;
    double wall_ms = 0.0;
    double max_abs_diff_vs_monolithic = 0.0;
};

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
    std::ostringstream os;
    os << "chain_id,n_segments,mode,analytic_peak_bytes,measured_peak_bytes,wall_ms,"
          "max_abs_diff_vs_monolithic\n";
    for (const BenchRow& r : rows) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f", r.wall_ms);
        os << r.chain_id << ',' << r.n_segments << ',' << r.mode << ','
           << r.analytic_peak_bytes << ',' << r.measured_peak_bytes << ',' << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.max_abs_diff_vs_monolithic);
        os << buf << '\n';
    }
    return os.str();
}

inline std::vector<BenchRow> run_tsp_benchmark(const std::string& chain_id,
                                               const LayerChain& chain,
                                               const std::array<i64, 5>& input_dims,
                                               const std::vector<i64>& segment_counts,
                                               const std::vector<TspMode>& modes,
                                               int workers = 2) {
    Tensor5 x = Tensor5::shaped(input_dims);
    Rng rng(1234);
    rng.fill_normal(x);
    Tensor5 mono = run_chain(chain, x);

    std::vector<BenchRow> rows;
    for (i64 nseg : segment_counts) {
        SplitPlan plan = plan_split(chain, input_dims, nseg);
        MemoryReport rep = memory_report(chain, input_dims, &plan, false);
        for (TspMode mode : modes) {
            BenchRow row;
            row.chain_id = chain_id;
            row.n_segments = nseg;
            row.mode = mode == TspMode::sequential ? "sequential" : "parallel";
            row.analytic_peak_bytes = rep.analytic_plan_peak;
            const auto t0 = std::chrono::steady_clock::now();
            mem::Session sess;
            Tensor5 y = execute_tsp(chain, x, plan, {mode, workers, TspNormStats::global});
            row.measured_peak_bytes = sess.peak();
            row.wall_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            row.max_abs_diff_vs_monolithic = max_abs_diff(y, mono);
            rows.push_back(row);
        }
    }
    return rows;
}

// Named chain presets shared by the benchmark CLI and the test suites.
// Weights are seeded so every caller sees the same chain.
inline LayerChain make_preset_chain(const std::string& name) {
    Rng rng(7777);
    LayerChain chain;
    if (name == "conv3") {
        chain.layers.push_back(Conv3dLayer(2, 4, {3, 3, 3}, {1, 1, 1}));
        chain.layers.push_back(Conv3dLayer(4, 4, {3, 3, 3}, {1, 1, 1}));
        chain.layers.push_back(Conv3dLayer(4, 2, {3, 3, 3}, {1, 1, 1}));
    } else if (name == "conv4mem") {
        // Decoder-like profile: wide middle, narrow output.
        chain.layers.push_back(Conv3dLayer(4, 16, {3, 3, 3}, {1, 1, 1}));
        chain.layers.push_back(Conv3dLayer(16, 16, {3, 3, 3}, {1, 1, 1}));
        chain.layers.push_back(Conv3dLayer(16, 8, {3, 3, 3}, {1, 1, 1}));
        chain.layers.push_back(Conv3dLayer(8, 1, {3, 3, 3}, {1, 1, 1}));
    } else if (name == "mixed") {
        chain.layers.push_back(Conv3dLayer(2, 4, {3, 3, 3}, {1, 1, 1}));
        chain.layers.push_back(GroupNormLayer(4, 2));
        chain.layers.push_back(ActivationLayer{ActKind::silu});
        chain.layers.push_back(Conv3dLayer(4, 8, {3, 3, 3}, {2, 2, 2}));
        chain.layers.push_back(GroupNormLayer(8, 4));
        chain.layers.push_back(ActivationLayer{ActKind::silu});
        chain.layers.push_back(UpsampleLayer{});
        chain.layers.push_back(Conv3dLayer(8, 2, {3, 3, 3}, {1, 1, 1}));
    } else {
        throw std::invalid_argument("unknown chain preset: " + name);
    }
    init_chain(chain, rng);
    for (Layer& l : chain.layers)
        if (auto* gn = std::get_if<GroupNormLayer>(&l))
            for (auto& v : gn->gamma.w) v = 1.0f + 0.1f * rng.normal();
    return chain;
}

}  // namespace voxsyn

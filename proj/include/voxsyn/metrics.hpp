#pragma once
// metrics.hpp
//
// Reconstruction metrics (PSNR, box-window SSIM over 3D volumes) and the
// HU quality gate: per-organ median intensities checked against configured
// normal ranges.  The SSIM window is uniform rather than Gaussian so tests
// can pin it against an exact reimplementation oracle.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "tensor.hpp"
#include "volume.hpp"

namespace voxsyn {

// =====================================================================
//  PSNR / SSIM
// =====================================================================

inline double psnr(const Tensor5& a, const Tensor5& b, double data_range) {
    detail::check_same_shape(a, b, "psnr");
    if (!(data_range > 0.0)) throw std::invalid_argument("psnr: data_range must be > 0");
    double se = 0.0;
    for (i64 i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        se += d * d;
    }
    const double mse = se / static_cast<double>(a.numel());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(data_range * data_range / mse);
}

// Mean local SSIM with a uniform window, valid positions only.  Window
// shrinks per axis to the tensor's extent when the volume is smaller than
// the nominal window.
inline double ssim3d(const Tensor5& a, const Tensor5& b, i64 window = 7, double k1 = 0.01,
                     double k2 = 0.03, double data_range = 1.0) {
    detail::check_same_shape(a, b, "ssim3d");
    if (window < 1) throw std::invalid_argument("ssim3d: window must be >= 1");
    if (!(data_range > 0.0)) throw std::invalid_argument("ssim3d: data_range must be > 0");
    const i64 wd = std::min(window, a.dims[2]);
    const i64 wh = std::min(window, a.dims[3]);
    const i64 ww = std::min(window, a.dims[4]);
    const double c1 = (k1 * data_range) * (k1 * data_range);
    const double c2 = (k2 * data_range) * (k2 * data_range);
    const double cnt = static_cast<double>(wd * wh * ww);

    double acc = 0.0;
    i64 n_windows = 0;
    for (i64 n = 0; n < a.dims[0]; ++n)
        for (i64 c = 0; c < a.dims[1]; ++c)
            for (i64 d0 = 0; d0 + wd <= a.dims[2]; ++d0)
                for (i64 h0 = 0; h0 + wh <= a.dims[3]; ++h0)
                    for (i64 w0 = 0; w0 + ww <= a.dims[4]; ++w0) {
                        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
                        for (i64 d = d0; d < d0 + wd; ++d)
                            for (i64 h = h0; h < h0 + wh; ++h)
                                for (i64 w = w0; w < w0 + ww; ++w) {
                                    const double va = a.at(n, c, d, h, w);
                                    const double vb = b.at(n, c, d, h, w);
                                    sa += va;
                                    sb += vb;
                                    saa += va * va;
                                    sbb += vb * vb;
                                    sab += va * vb;
                                }
                        const double ma = sa / cnt, mb = sb / cnt;
                        const double va = saa / cnt - ma * ma;
                        const double vb = sbb / cnt - mb * mb;
                        const double cov = sab / cnt - ma * mb;
                        acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) /
                               ((ma * ma + mb * mb + c1) * (va + vb + c2));
                        ++n_windows;
                    }
    return acc / static_cast<double>(n_windows);
}

// Pearson correlation over all elements; 0 when either side is constant.
inline double pearson_corr(const Tensor5& a, const Tensor5& b) {
    detail::check_same_shape(a, b, "pearson_corr");
    const double n = static_cast<double>(a.numel());
    double sa = 0, sb = 0;
    for (i64 i = 0; i < a.numel(); ++i) {
        sa += a.data[i];
        sb += b.data[i];
    }
    const double ma = sa / n, mb = sb / n;
    double vaa = 0, vbb = 0, vab = 0;
    for (i64 i = 0; i < a.numel(); ++i) {
        const double da = a.data[i] - ma, db = b.data[i] - mb;
        vaa += da * da;
        vbb += db * db;
        vab += da * db;
    }
    if (vaa == 0.0 || vbb == 0.0) return 0.0;
    return vab / std::sqrt(vaa * vbb);
}

// =====================================================================
//  HU medians and the quality gate
// =====================================================================

// Exact median per nonzero label; even counts take the lower middle.
inline std::map<std::uint16_t, double> median_hu_per_label(const CtVolume& ct,
                                                           const SegMask& mask) {
    if (ct.hu.dims[2] != mask.dims[0] || ct.hu.dims[3] != mask.dims[1] ||
        ct.hu.dims[4] != mask.dims[2])
        throw std::invalid_argument("median_hu: volume and mask dims differ");
    std::map<std::uint16_t, std::vector<float>> buckets;
    for (i64 d = 0; d < mask.dims[0]; ++d)
        for (i64 h = 0; h < mask.dims[1]; ++h)
            for (i64 w = 0; w < mask.dims[2]; ++w) {
                const std::uint16_t l = mask.at(d, h, w);
                if (l != 0) buckets[l].push_back(ct.hu.at(0, 0, d, h, w));
            }
    std::map<std::uint16_t, double> medians;
    for (auto& [label, vals] : buckets) {
        std::sort(vals.begin(), vals.end());
        medians[label] = vals[(vals.size() - 1) / 2];
    }
    return medians;
}

// label id -> inclusive [lo, hi] HU bounds for the median.
using QualityRanges = std::map<int, std::array<double, 2>>;

struct QualityViolation {
    int label = 0;
    double median = 0, lo = 0, hi = 0;
};

struct QualityReport {
    bool pass = true;
    std::vector<QualityViolation> violations;
    std::map<std::uint16_t, double> medians;  // every label checked
};

inline void validate_ranges(const QualityRanges& r) {
    for (const auto& [label, bounds] : r)
        if (!(bounds[0] <= bounds[1]))
            throw std::invalid_argument("quality ranges: lo > hi for label " +
                                        std::to_string(label));
}

// Pass iff every labeled organ with a configured range has its median inside
// the range.  Labels without configured ranges are ignored; checking nothing
// at all is an error, not a pass.
inline QualityReport quality_check(const CtVolume& ct, const SegMask& mask,
                                   const QualityRanges& ranges) {
    validate_ranges(ranges);
    const auto medians = median_hu_per_label(ct, mask);
    QualityReport rep;
    for (const auto& [label, median] : medians) {
        auto it = ranges.find(static_cast<int>(label));
        if (it == ranges.end()) continue;
        rep.medians[label] = median;
        if (median < it->second[0] || median > it->second[1]) {
            rep.pass = false;
            rep.violations.push_back({static_cast<int>(label), median, it->second[0],
                                      it->second[1]});
        }
    }
    if (rep.medians.empty())
        throw std::runtime_error(
            "quality check: nothing checked (no configured range matches any mask label)");
    return rep;
}

// =====================================================================
//  JSON interfaces
// =====================================================================

// Config shape: {"<label_id>": [lo, hi], ...}
inline QualityRanges quality_ranges_from_json(const nlohmann::json& j) {
    QualityRanges r;
    for (const auto& [key, val] : j.items()) {
        if (!val.is_array() || val.size() != 2)
            throw std::invalid_argument("quality ranges: entry '" + key +
                                        "' must be [lo, hi]");
        r[std::stoi(key)] = {val[0].get<double>(), val[1].get<double>()};
    }
    validate_ranges(r);
    return r;
}

inline nlohmann::json quality_report_to_json(const QualityReport& rep) {
    nlohmann::json j;
    j["pass"] = rep.pass;
    j["violations"] = nlohmann::json::array();
    for (const QualityViolation& v : rep.violations)
        j["violations"].push_back(
            {{"label", v.label}, {"median", v.median}, {"lo", v.lo}, {"hi", v.hi}});
    nlohmann::json med = nlohmann::json::object();
    for (const auto& [label, m] : rep.medians) med[std::to_string(label)] = m;
    j["checked_medians"] = med;
    return j;
}

}  // namespace voxsyn

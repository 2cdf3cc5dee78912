#include <catch2/catch_amalgamated.hpp>

#include <voxsyn/metrics.hpp>
#include <voxsyn/rng.hpp>

#include "helpers.hpp"

using namespace voxsyn;

namespace {

Tensor5 random_tensor(const std::array<i64, 5>& dims, Rng& rng, float lo, float hi) {
    Tensor5 t = Tensor5::shaped(dims);
    for (i64 i = 0; i < t.numel(); ++i) t.data[i] = rng.uniform(lo, hi);
    return t;
}

// Independent PSNR oracle: accumulate in long double via explicit indexing.
double psnr_oracle(const Tensor5& a, const Tensor5& b, double range) {
    long double se = 0.0L;
    for (i64 i = 0; i < a.numel(); ++i) {
        const long double d =
            static_cast<long double>(a.data[i]) - static_cast<long double>(b.data[i]);
        se += d * d;
    }
    const long double mse = se / static_cast<long double>(a.numel());
    return static_cast<double>(10.0L * std::log10(static_cast<long double>(range) * range / mse));
}

// Independent SSIM oracle: gathers each window into vectors and uses two-pass
// (mean first, then centered moments) statistics.
double ssim_oracle(const Tensor5& a, const Tensor5& b, i64 window, double k1, double k2,
                   double range) {
    const i64 wd = std::min(window, a.dims[2]);
    const i64 wh = std::min(window, a.dims[3]);
    const i64 ww = std::min(window, a.dims[4]);
    const double c1 = (k1 * range) * (k1 * range);
    const double c2 = (k2 * range) * (k2 * range);
    std::vector<double> va, vb;
    double total = 0.0;
    i64 count = 0;
    for (i64 n = 0; n < a.dims[0]; ++n)
        for (i64 c = 0; c < a.dims[1]; ++c)
            for (i64 d0 = 0; d0 + wd <= a.dims[2]; ++d0)
                for (i64 h0 = 0; h0 + wh <= a.dims[3]; ++h0)
                    for (i64 w0 = 0; w0 + ww <= a.dims[4]; ++w0) {
                        va.clear();
                        vb.clear();
                        for (i64 d = d0; d < d0 + wd; ++d)
                            for (i64 h = h0; h < h0 + wh; ++h)
                                for (i64 w = w0; w < w0 + ww; ++w) {
                                    va.push_back(a.at(n, c, d, h, w));
                                    vb.push_back(b.at(n, c, d, h, w));
                                }
                        const double m = static_cast<double>(va.size());
                        double ma = 0, mb = 0;
                        for (double v : va) ma += v;
                        for (double v : vb) mb += v;
                        ma /= m;
                        mb /= m;
                        double sa = 0, sb = 0, sab = 0;
                        for (size_t i = 0; i < va.size(); ++i) {
                            sa += (va[i] - ma) * (va[i] - ma);
                            sb += (vb[i] - mb) * (vb[i] - mb);
                            sab += (va[i] - ma) * (vb[i] - mb);
                        }
                        sa /= m;
                        sb /= m;
                        sab /= m;
                        total += (2 * ma * mb + c1) * (2 * sab + c2) /
                                 ((ma * ma + mb * mb + c1) * (sa + sb + c2));
                        ++count;
                    }
    return total / static_cast<double>(count);
}

CtVolume make_ct(i64 d, i64 h, i64 w) {
    CtVolume ct;
    ct.meta.spacing = {1.0f, 1.0f, 1.0f};
    ct.meta.top = Region::chest;
    ct.meta.bottom = Region::chest;
    ct.hu = Tensor5::shaped({1, 1, d, h, w});
    return ct;
}

SegMask make_mask(i64 d, i64 h, i64 w) {
    SegMask m;
    m.meta.top = Region::chest;
    m.meta.bottom = Region::chest;
    m.dims = {d, h, w};
    m.labels.assign(static_cast<size_t>(d * h * w), 0);
    return m;
}

}  // namespace

// =====================================================================
//  PSNR
// =====================================================================

TEST_CASE("psnr: identical volumes give +infinity") {
    Rng rng(101);
    Tensor5 a = random_tensor({1, 1, 6, 5, 4}, rng, -1.f, 1.f);
    Tensor5 b = a;
    CHECK(std::isinf(psnr(a, b, 2.0)));
    CHECK(psnr(a, b, 2.0) > 0);
}

TEST_CASE("psnr: constant offset of half the range gives ~6.02 dB") {
    // MSE = (range/2)^2 exactly, so PSNR = 10*log10(4) = 6.0205999...
    // Values are multiples of 1/1024 so that the +1 offset is exact in f32.
    Rng rng(102);
    Tensor5 a = Tensor5::shaped({1, 1, 5, 6, 7});
    for (i64 i = 0; i < a.numel(); ++i)
        a.data[i] = static_cast<float>(rng.uniform_int(0, 1023)) / 1024.0f;
    Tensor5 b = a;
    for (i64 i = 0; i < b.numel(); ++i) b.data[i] += 1.0f;
    CHECK_THAT(psnr(a, b, 2.0), Catch::Matchers::WithinAbs(6.0205999132796239, 1e-9));
}

TEST_CASE("psnr: matches an independent oracle and is symmetric") {
    Rng rng(103);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor5 a = random_tensor({2, 1, 4, 5, 6}, rng, -3.f, 3.f);
        Tensor5 b = random_tensor({2, 1, 4, 5, 6}, rng, -3.f, 3.f);
        const double p = psnr(a, b, 6.0);
        CHECK_THAT(p, Catch::Matchers::WithinAbs(psnr_oracle(a, b, 6.0), 1e-9));
        CHECK_THAT(p, Catch::Matchers::WithinAbs(psnr(b, a, 6.0), 1e-12));
    }
}

TEST_CASE("psnr: rejects bad inputs") {
    Tensor5 a = Tensor5::shaped({1, 1, 2, 2, 2});
    Tensor5 b = Tensor5::shaped({1, 1, 2, 2, 3});
    CHECK_THROWS_AS(psnr(a, b, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(psnr(a, a, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(psnr(a, a, -1.0), std::invalid_argument);
}

// =====================================================================
//  SSIM
// =====================================================================

TEST_CASE("ssim3d: identical volumes give exactly 1") {
    Rng rng(104);
    Tensor5 a = random_tensor({1, 1, 9, 8, 10}, rng, 0.f, 1.f);
    CHECK_THAT(ssim3d(a, a), Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("ssim3d: matches an independent two-pass oracle") {
    Rng rng(105);
    for (int trial = 0; trial < 4; ++trial) {
        Tensor5 a = random_tensor({1, 2, 9, 8, 9}, rng, 0.f, 1.f);
        Tensor5 b = a;
        // correlated-but-different counterpart: perturb half the voxels
        for (i64 i = 0; i < b.numel(); i += 2) b.data[i] += rng.uniform(-0.3f, 0.3f);
        const double s = ssim3d(a, b, 7, 0.01, 0.03, 1.0);
        const double o = ssim_oracle(a, b, 7, 0.01, 0.03, 1.0);
        CHECK_THAT(s, Catch::Matchers::WithinAbs(o, 1e-5));
        CHECK(s < 1.0);
    }
}

TEST_CASE("ssim3d: bounded in [-1, 1] and symmetric on random pairs") {
    Rng rng(106);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor5 a = random_tensor({1, 1, 8, 8, 8}, rng, -1.f, 1.f);
        Tensor5 b = random_tensor({1, 1, 8, 8, 8}, rng, -1.f, 1.f);
        const double s = ssim3d(a, b, 7, 0.01, 0.03, 2.0);
        CHECK(s >= -1.0);
        CHECK(s <= 1.0);
        CHECK_THAT(s, Catch::Matchers::WithinAbs(ssim3d(b, a, 7, 0.01, 0.03, 2.0), 1e-12));
    }
}

TEST_CASE("ssim3d: window shrinks to the volume when dims are small") {
    Rng rng(107);
    // 4x5x3 volume with the default 7-window: one window spanning everything
    // per axis that is smaller than 7.
    Tensor5 a = random_tensor({1, 1, 4, 5, 3}, rng, 0.f, 1.f);
    Tensor5 b = random_tensor({1, 1, 4, 5, 3}, rng, 0.f, 1.f);
    const double s = ssim3d(a, b, 7, 0.01, 0.03, 1.0);
    const double o = ssim_oracle(a, b, 7, 0.01, 0.03, 1.0);
    CHECK_THAT(s, Catch::Matchers::WithinAbs(o, 1e-5));
    CHECK(std::isfinite(s));
    // identical small volumes still give 1
    CHECK_THAT(ssim3d(a, a, 7, 0.01, 0.03, 1.0), Catch::Matchers::WithinAbs(1.0, 1e-12));
}

// =====================================================================
//  per-label medians
// =====================================================================

TEST_CASE("median_hu_per_label: tiny hand case (odd and even counts)") {
    CtVolume ct = make_ct(1, 1, 7);
    SegMask mask = make_mask(1, 1, 7);
    // label 1 voxels: {30, 10, 20}  -> median 20  (odd count)
    // label 2 voxels: {40, 10, 30, 20} -> lower middle of sorted {10,20,30,40} = 20
    const float hu[7] = {30, 10, 20, 40, 10, 30, 20};
    const std::uint16_t lab[7] = {1, 1, 1, 2, 2, 2, 2};
    for (int i = 0; i < 7; ++i) {
        ct.hu.data[i] = hu[i];
        mask.labels[i] = lab[i];
    }
    auto med = median_hu_per_label(ct, mask);
    REQUIRE(med.size() == 2);
    CHECK(med[1] == 20.0);
    CHECK(med[2] == 20.0);
}

TEST_CASE("median_hu_per_label: background label 0 is excluded") {
    CtVolume ct = make_ct(2, 2, 2);
    SegMask mask = make_mask(2, 2, 2);
    for (i64 i = 0; i < 8; ++i) ct.hu.data[i] = static_cast<float>(i * 100);
    mask.labels[3] = 5;  // single labeled voxel
    auto med = median_hu_per_label(ct, mask);
    REQUIRE(med.size() == 1);
    CHECK(med[5] == 300.0);
}

TEST_CASE("median_hu_per_label: constant region reports the constant") {
    CtVolume ct = make_ct(4, 4, 4);
    SegMask mask = make_mask(4, 4, 4);
    Rng rng(108);
    for (i64 i = 0; i < ct.hu.numel(); ++i) ct.hu.data[i] = rng.uniform(-500.f, 500.f);
    for (i64 d = 1; d < 3; ++d)
        for (i64 h = 1; h < 3; ++h)
            for (i64 w = 1; w < 3; ++w) {
                mask.labels[static_cast<size_t>((d * 4 + h) * 4 + w)] = 3;
                ct.hu.at(0, 0, d, h, w) = 50.0f;
            }
    auto med = median_hu_per_label(ct, mask);
    REQUIRE(med.count(3) == 1);
    CHECK(med[3] == 50.0);
}

TEST_CASE("median_hu_per_label: randomized volumes agree with a sort oracle") {
    Rng rng(109);
    for (int trial = 0; trial < 4; ++trial) {
        CtVolume ct = make_ct(6, 5, 4);
        SegMask mask = make_mask(6, 5, 4);
        std::map<std::uint16_t, std::vector<double>> oracle_sets;
        for (i64 i = 0; i < ct.hu.numel(); ++i) {
            ct.hu.data[i] = rng.uniform(-1000.f, 1000.f);
            const std::uint16_t l = static_cast<std::uint16_t>(rng.uniform_int(0, 4));
            mask.labels[static_cast<size_t>(i)] = l;
            if (l != 0) oracle_sets[l].push_back(ct.hu.data[i]);
        }
        auto med = median_hu_per_label(ct, mask);
        REQUIRE(med.size() == oracle_sets.size());
        for (auto& [label, vals] : oracle_sets) {
            std::sort(vals.begin(), vals.end());
            CHECK(med[label] == vals[(vals.size() - 1) / 2]);
        }
    }
}

// =====================================================================
//  quality gate
// =====================================================================

TEST_CASE("quality_check: pass, fail, and nothing-checked outcomes") {
    CtVolume ct = make_ct(2, 2, 2);
    SegMask mask = make_mask(2, 2, 2);
    for (i64 i = 0; i < 8; ++i) {
        ct.hu.data[i] = 55.0f;  // liver-ish
        mask.labels[static_cast<size_t>(i)] = 1;
    }

    SECTION("median inside range passes") {
        QualityRanges r{{1, {40.0, 70.0}}};
        auto rep = quality_check(ct, mask, r);
        CHECK(rep.pass);
        CHECK(rep.violations.empty());
        REQUIRE(rep.medians.count(1) == 1);
        CHECK(rep.medians[1] == 55.0);
    }
    SECTION("median outside range fails with a populated violation") {
        QualityRanges r{{1, {-100.0, 40.0}}};
        auto rep = quality_check(ct, mask, r);
        CHECK_FALSE(rep.pass);
        REQUIRE(rep.violations.size() == 1);
        CHECK(rep.violations[0].label == 1);
        CHECK(rep.violations[0].median == 55.0);
        CHECK(rep.violations[0].lo == -100.0);
        CHECK(rep.violations[0].hi == 40.0);
    }
    SECTION("inclusive boundaries count as inside") {
        QualityRanges lo_edge{{1, {55.0, 70.0}}};
        QualityRanges hi_edge{{1, {40.0, 55.0}}};
        CHECK(quality_check(ct, mask, lo_edge).pass);
        CHECK(quality_check(ct, mask, hi_edge).pass);
    }
    SECTION("disjoint ranges and labels throw instead of passing") {
        QualityRanges r{{7, {0.0, 1.0}}};
        CHECK_THROWS_WITH(quality_check(ct, mask, r),
                          Catch::Matchers::ContainsSubstring("nothing checked"));
    }
    SECTION("inverted range rejected") {
        QualityRanges r{{1, {70.0, 40.0}}};
        CHECK_THROWS_AS(quality_check(ct, mask, r), std::invalid_argument);
    }
}

TEST_CASE("quality_check: unconfigured labels are ignored, configured ones gate") {
    CtVolume ct = make_ct(1, 1, 4);
    SegMask mask = make_mask(1, 1, 4);
    ct.hu.data[0] = 50;
    ct.hu.data[1] = 50;
    ct.hu.data[2] = 999;
    ct.hu.data[3] = 999;
    mask.labels = {1, 1, 2, 2};
    QualityRanges r{{1, {40.0, 60.0}}};  // label 2 (median 999) not configured
    auto rep = quality_check(ct, mask, r);
    CHECK(rep.pass);
    CHECK(rep.medians.size() == 1);
}

TEST_CASE("quality_check: widening a range never flips pass to fail") {
    Rng rng(110);
    for (int trial = 0; trial < 10; ++trial) {
        CtVolume ct = make_ct(3, 3, 3);
        SegMask mask = make_mask(3, 3, 3);
        for (i64 i = 0; i < 27; ++i) {
            ct.hu.data[i] = rng.uniform(-200.f, 200.f);
            mask.labels[static_cast<size_t>(i)] =
                static_cast<std::uint16_t>(rng.uniform_int(1, 3));
        }
        QualityRanges r;
        for (int l = 1; l <= 3; ++l) {
            const double lo = rng.uniform(-150.f, 0.f);
            r[l] = {lo, lo + rng.uniform(10.f, 300.f)};
        }
        const bool before = quality_check(ct, mask, r).pass;
        QualityRanges wide = r;
        for (auto& [label, bounds] : wide) {
            bounds[0] -= rng.uniform(0.f, 100.f);
            bounds[1] += rng.uniform(0.f, 100.f);
        }
        const bool after = quality_check(ct, mask, wide).pass;
        if (before) CHECK(after);
    }
}

// =====================================================================
//  JSON interfaces
// =====================================================================

TEST_CASE("quality ranges parse from JSON and validate") {
    const auto j = nlohmann::json::parse(R"({"1": [40.0, 70.0], "3": [-120, -60]})");
    QualityRanges r = quality_ranges_from_json(j);
    REQUIRE(r.size() == 2);
    CHECK(r[1][0] == 40.0);
    CHECK(r[1][1] == 70.0);
    CHECK(r[3][0] == -120.0);
    CHECK(r[3][1] == -60.0);

    CHECK_THROWS_AS(quality_ranges_from_json(nlohmann::json::parse(R"({"1": [40.0]})")),
                    std::invalid_argument);
    CHECK_THROWS_AS(quality_ranges_from_json(nlohmann::json::parse(R"({"1": [70, 40]})")),
                    std::invalid_argument);
}

TEST_CASE("quality report serializes to JSON") {
    QualityReport rep;
    rep.pass = false;
    rep.violations.push_back({2, 85.5, 10.0, 60.0});
    rep.medians[1] = 50.0;
    rep.medians[2] = 85.5;
    const nlohmann::json j = quality_report_to_json(rep);
    CHECK(j["pass"] == false);
    REQUIRE(j["violations"].size() == 1);
    CHECK(j["violations"][0]["label"] == 2);
    CHECK(j["violations"][0]["median"] == 85.5);
    CHECK(j["checked_medians"]["1"] == 50.0);
    CHECK(j["checked_medians"]["2"] == 85.5);
}

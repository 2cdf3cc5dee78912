// Volume container, HU window, resampling, condition encoding.
//
// Round-trips are checked at the byte level (write-read-write produces
// identical files), the HU window against its closed-form anchor points,
// and trilinear resampling against the exact-reproduction property on
// linear fields plus direct coordinate arithmetic.

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "voxsyn/volume.hpp"

using namespace voxsyn;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    fs::create_directories("tmp_volume");
    return (fs::path("tmp_volume") / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CtVolume random_ct(Rng& rng, i64 d, i64 h, i64 w) {
    CtVolume v;
    v.meta.spacing = {1.5f, 0.8f, 0.8f};
    v.meta.top = Region::chest;
    v.meta.bottom = Region::abdomen;
    v.hu = Tensor5(1, 1, d, h, w);
    for (i64 i = 0; i < v.hu.numel(); ++i)
        v.hu.data[i] = rng.uniform(-1000.0f, 1500.0f);
    return v;
}

}  // namespace

TEST_CASE("mvol round-trip is byte-exact for volumes and masks") {
    Rng rng(71);
    const std::string p1 = tmp_path("ct.mvol"), p2 = tmp_path("ct2.mvol");
    CtVolume v = random_ct(rng, 5, 4, 6);
    write_mvol(p1, v);

    Mvol back = read_mvol(p1);
    REQUIRE(std::holds_alternative<CtVolume>(back));
    const CtVolume& r = std::get<CtVolume>(back);
    REQUIRE(bit_equal(r.hu, v.hu));
    REQUIRE(r.meta.spacing == v.meta.spacing);
    REQUIRE(r.meta.top == v.meta.top);
    REQUIRE(r.meta.bottom == v.meta.bottom);

    write_mvol(p2, r);
    REQUIRE(slurp(p1) == slurp(p2));

    const std::string m1 = tmp_path("mask.mvol"), m2 = tmp_path("mask2.mvol");
    SegMask mask;
    mask.meta = v.meta;
    mask.dims = {5, 4, 6};
    mask.labels.assign(static_cast<std::size_t>(mask.numel()), 0);
    for (auto& l : mask.labels) l = static_cast<std::uint16_t>(rng.uniform_int(0, 127));
    write_mvol(m1, mask);
    Mvol mback = read_mvol(m1);
    REQUIRE(std::holds_alternative<SegMask>(mback));
    REQUIRE(std::get<SegMask>(mback).labels == mask.labels);
    write_mvol(m2, std::get<SegMask>(mback));
    REQUIRE(slurp(m1) == slurp(m2));

    // Header is exactly 40 bytes + payload.
    REQUIRE(slurp(p1).size() == 40 + 5 * 4 * 6 * sizeof(float));
    REQUIRE(slurp(m1).size() == 40 + 5 * 4 * 6 * sizeof(std::uint16_t));
}

TEST_CASE("mvol rejects corrupt headers and payloads") {
    Rng rng(72);
    const std::string good = tmp_path("good.mvol");
    write_mvol(good, random_ct(rng, 3, 3, 3));
    std::string bytes = slurp(good);

    {
        std::string bad = bytes;
        bad[0] = 'X';
        spit(tmp_path("badmagic.mvol"), bad);
        REQUIRE_THROWS_WITH(read_mvol(tmp_path("badmagic.mvol")),
                            Catch::Matchers::ContainsSubstring("bad magic"));
    }
    {
        std::string bad = bytes;
        bad[4] = 9;  // version
        spit(tmp_path("badver.mvol"), bad);
        REQUIRE_THROWS_WITH(read_mvol(tmp_path("badver.mvol")),
                            Catch::Matchers::ContainsSubstring("version mismatch"));
    }
    {
        std::string bad = bytes.substr(0, bytes.size() - 10);
        spit(tmp_path("short.mvol"), bad);
        REQUIRE_THROWS_WITH(read_mvol(tmp_path("short.mvol")),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }
    {
        std::string bad = bytes;
        const float nan = std::nanf("");
        std::memcpy(bad.data() + 40, &nan, 4);
        spit(tmp_path("nan.mvol"), bad);
        REQUIRE_THROWS_WITH(read_mvol(tmp_path("nan.mvol")),
                            Catch::Matchers::ContainsSubstring("non-finite"));
    }
    REQUIRE_THROWS(read_mvol(tmp_path("missing.mvol")));
}

TEST_CASE("volume validation rejects contract violations") {
    Rng rng(73);
    CtVolume v = random_ct(rng, 2, 2, 2);
    v.hu.data[0] = 4000.0f;  // above ingest ceiling 3071
    REQUIRE_THROWS_WITH(write_mvol(tmp_path("x.mvol"), v),
                        Catch::Matchers::ContainsSubstring("ingest bounds"));

    CtVolume v2 = random_ct(rng, 2, 2, 2);
    v2.meta.top = Region::abdomen;
    v2.meta.bottom = Region::chest;
    REQUIRE_THROWS_WITH(write_mvol(tmp_path("x.mvol"), v2),
                        Catch::Matchers::ContainsSubstring("region order"));

    CtVolume v3 = random_ct(rng, 2, 2, 2);
    v3.meta.spacing[1] = 0.0f;
    REQUIRE_THROWS(write_mvol(tmp_path("x.mvol"), v3));

    SegMask m;
    m.dims = {2, 2, 2};
    m.labels.assign(8, 0);
    m.labels[3] = 128;  // vocabulary is 0..127
    REQUIRE_THROWS_WITH(write_mvol(tmp_path("x.mvol"), m),
                        Catch::Matchers::ContainsSubstring("vocabulary"));
}

TEST_CASE("HU window maps its anchor points exactly") {
    CtVolume v;
    v.hu = Tensor5(1, 1, 1, 1, 5);
    v.hu.data[0] = -1000.0f;
    v.hu.data[1] = 0.0f;
    v.hu.data[2] = 1000.0f;
    v.hu.data[3] = 2500.0f;   // above the window: clipped
    v.hu.data[4] = -1024.0f;  // below the window: clipped
    Tensor5 t = normalize_hu(v);
    REQUIRE(t.data[0] == 0.0f);
    REQUIRE(t.data[1] == 0.5f);
    REQUIRE(t.data[2] == 1.0f);
    REQUIRE(t.data[3] == 1.0f);
    REQUIRE(t.data[4] == 0.0f);
}

TEST_CASE("normalize then denormalize is identity inside the window") {
    Rng rng(74);
    CtVolume v;
    v.hu = Tensor5(1, 1, 4, 4, 4);
    for (i64 i = 0; i < v.hu.numel(); ++i) v.hu.data[i] = rng.uniform(-1000.0f, 1000.0f);
    CtVolume back = denormalize_hu(normalize_hu(v), v.meta);
    REQUIRE(max_abs_diff(back.hu, v.hu) <= 1e-3);  // 2000-wide window, f32 steps

    // Denormalize clamps its input to [0,1] before mapping.
    Tensor5 wild(1, 1, 1, 1, 2);
    wild.data[0] = -0.5f;
    wild.data[1] = 2.0f;
    CtVolume c = denormalize_hu(wild, v.meta);
    REQUIRE(c.hu.data[0] == -1000.0f);
    REQUIRE(c.hu.data[1] == 1000.0f);
}

TEST_CASE("nearest multiple rounding: nearest wins, ties go up, zero becomes M") {
    REQUIRE(nearest_multiple(500, 128) == 512);
    REQUIRE(nearest_multiple(190, 128) == 128);
    REQUIRE(nearest_multiple(192, 128) == 256);  // exact tie
    REQUIRE(nearest_multiple(256, 128) == 256);
    REQUIRE(nearest_multiple(30, 128) == 128);   // would round to 0
    REQUIRE(nearest_multiple(30, 8) == 32);
    REQUIRE(nearest_multiple(28, 8) == 32);      // tie
    REQUIRE(nearest_multiple(27, 8) == 24);
    REQUIRE(nearest_multiple(3, 8) == 8);
    REQUIRE(nearest_multiple(7, 1) == 7);
    REQUIRE_THROWS_AS(nearest_multiple(7, 0), std::invalid_argument);
}

TEST_CASE("round_dims: identity, constants, extent preservation") {
    Rng rng(75);
    CtVolume v = random_ct(rng, 8, 16, 8);
    CtVolume same = round_dims(v, 8);
    REQUIRE(bit_equal(same.hu, v.hu));
    REQUIRE(same.meta.spacing == v.meta.spacing);

    // A constant volume stays exactly constant under any resize.
    CtVolume flat;
    flat.hu = Tensor5(1, 1, 10, 7, 9, 42.0f);
    CtVolume rflat = round_dims(flat, 8);
    REQUIRE(rflat.hu.dims[2] == 8);
    REQUIRE(rflat.hu.dims[3] == 8);
    REQUIRE(rflat.hu.dims[4] == 8);
    for (i64 i = 0; i < rflat.hu.numel(); ++i)
        REQUIRE_THAT(rflat.hu.data[i], Catch::Matchers::WithinAbs(42.0, 1e-4));

    // Physical extent dims*spacing is preserved per axis.
    CtVolume r = round_dims(v, 5);  // 8->10, 16->15, 8->10
    REQUIRE(r.hu.dims[2] == 10);
    REQUIRE(r.hu.dims[3] == 15);
    REQUIRE(r.hu.dims[4] == 10);
    for (int a = 0; a < 3; ++a) {
        const double before = static_cast<double>(v.hu.dims[2 + a]) * v.meta.spacing[a];
        const double after = static_cast<double>(r.hu.dims[2 + a]) * r.meta.spacing[a];
        REQUIRE_THAT(after, Catch::Matchers::WithinRel(before, 1e-6));
    }
}

TEST_CASE("trilinear resampling reproduces linear fields at exact coordinates") {
    // f(d,h,w) = 2d - 3h + 0.5w is trilinear-exact: the interpolated value
    // at an output voxel must equal f evaluated at its source coordinate.
    const i64 D = 6, H = 5, W = 7;
    Tensor5 src(1, 1, D, H, W);
    for (i64 d = 0; d < D; ++d)
        for (i64 h = 0; h < H; ++h)
            for (i64 w = 0; w < W; ++w)
                src.at(0, 0, d, h, w) =
                    2.0f * static_cast<float>(d) - 3.0f * static_cast<float>(h) +
                    0.5f * static_cast<float>(w);

    const i64 od = 9, oh = 5, ow = 4;
    Tensor5 out = resize_trilinear(src, od, oh, ow);
    auto coord = [](i64 i, i64 in, i64 o) {
        double c = (static_cast<double>(i) + 0.5) * static_cast<double>(in) /
                       static_cast<double>(o) -
                   0.5;
        return std::min(std::max(c, 0.0), static_cast<double>(in - 1));
    };
    for (i64 d = 0; d < od; ++d)
        for (i64 h = 0; h < oh; ++h)
            for (i64 w = 0; w < ow; ++w) {
                const double want =
                    2.0 * coord(d, D, od) - 3.0 * coord(h, H, oh) + 0.5 * coord(w, W, ow);
                REQUIRE_THAT(out.at(0, 0, d, h, w),
                             Catch::Matchers::WithinAbs(want, 1e-4));
            }
}

TEST_CASE("region one-hots match their fixed codes") {
    REQUIRE(encode_region(Region::head_neck) == std::array<float, 4>{1, 0, 0, 0});
    REQUIRE(encode_region(Region::chest) == std::array<float, 4>{0, 1, 0, 0});
    REQUIRE(encode_region(Region::abdomen) == std::array<float, 4>{0, 0, 1, 0});
    REQUIRE(encode_region(Region::lower_body) == std::array<float, 4>{0, 0, 0, 1});
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b)
            REQUIRE(encode_region(static_cast<Region>(a)) !=
                    encode_region(static_cast<Region>(b)));
}

TEST_CASE("primary condition bundles coverage and spacing") {
    VolumeMeta meta;
    meta.top = Region::chest;
    meta.bottom = Region::abdomen;
    meta.spacing = {0.92f, 0.86f, 0.86f};  // [sz, sy, sx]
    PrimaryCond c = encode_primary_cond(meta);
    REQUIRE(c.i_top == std::array<float, 4>{0, 1, 0, 0});
    REQUIRE(c.i_bottom == std::array<float, 4>{0, 0, 1, 0});
    REQUIRE(c.s == std::array<float, 3>{0.92f, 0.86f, 0.86f});

    VolumeMeta bad = meta;
    bad.top = Region::lower_body;
    REQUIRE_THROWS_WITH(encode_primary_cond(bad),
                        Catch::Matchers::ContainsSubstring("region order"));

    REQUIRE(region_from_name("chest") == Region::chest);
    REQUIRE_THROWS(region_from_name("torso"));
}

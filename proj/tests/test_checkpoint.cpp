#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include <voxsyn/checkpoint.hpp>
#include <voxsyn/rng.hpp>

using namespace voxsyn;

namespace {

struct TinyModel {
    ParamTensor a, b;

    TinyModel() {
        a.init({2, 3});
        b.init({4});
    }
    NamedParams named_params() { return {{"layer.weight", &a}, {"layer.bias", &b}}; }
    void randomize(Rng& rng) {
        for (auto& v : a.w) v = rng.normal();
        for (auto& v : b.w) v = rng.normal();
    }
};

std::string tmp_path(const std::string& name) {
    std::filesystem::create_directories("tmp_ckpt");
    return "tmp_ckpt/" + name;
}

std::string slurp(const std::string& path) {
    return voxsyn::detail::read_file(path);
}

}  // namespace

TEST_CASE("fnv1a64: frozen reference values") {
    // Standard FNV-1a test vectors.
    CHECK(fnv1a64("", 0) == 14695981039346656037ULL);
    CHECK(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cULL);
    CHECK(fnv1a64("foobar", 6) == 0x85944171f73967e8ULL);
}

TEST_CASE("checkpoint: values round-trip exactly") {
    TinyModel src;
    Rng rng(201);
    src.randomize(rng);
    CheckpointMeta meta;
    meta.stage = Stage::diffusion;
    meta.parent_hash = 0xdeadbeefcafef00dULL;
    meta.cfg = {{"T", 50.0}, {"beta_min", 1e-4}, {"beta_max", 0.02}};

    const std::string path = tmp_path("roundtrip.ckpt");
    save_checkpoint(path, meta, src.named_params());

    TinyModel dst;
    const CheckpointMeta got = load_checkpoint(path, dst.named_params());
    CHECK(got.stage == Stage::diffusion);
    CHECK(got.parent_hash == 0xdeadbeefcafef00dULL);
    REQUIRE(got.cfg.size() == 3);
    CHECK(got.cfg.at("T") == 50.0);
    CHECK(got.cfg.at("beta_min") == 1e-4);
    CHECK(got.cfg.at("beta_max") == 0.02);
    CHECK(dst.a.w == src.a.w);  // bit-exact float vectors
    CHECK(dst.b.w == src.b.w);
}

TEST_CASE("checkpoint: save is byte-deterministic") {
    TinyModel m;
    Rng rng(202);
    m.randomize(rng);
    CheckpointMeta meta;
    meta.cfg = {{"f", 4.0}};
    const std::string p1 = tmp_path("det1.ckpt");
    const std::string p2 = tmp_path("det2.ckpt");
    save_checkpoint(p1, meta, m.named_params());
    save_checkpoint(p2, meta, m.named_params());
    CHECK(slurp(p1) == slurp(p2));
}

TEST_CASE("checkpoint: provenance hash chain verifies") {
    Rng rng(203);
    TinyModel vae, dm, cn;
    vae.randomize(rng);
    dm.randomize(rng);
    cn.randomize(rng);

    const std::string p_vae = tmp_path("chain_vae.ckpt");
    const std::string p_dm = tmp_path("chain_dm.ckpt");
    const std::string p_cn = tmp_path("chain_cn.ckpt");

    CheckpointMeta m0;
    m0.stage = Stage::vae;
    save_checkpoint(p_vae, m0, vae.named_params());

    CheckpointMeta m1;
    m1.stage = Stage::diffusion;
    m1.parent_hash = file_fnv1a(p_vae);
    save_checkpoint(p_dm, m1, dm.named_params());

    CheckpointMeta m2;
    m2.stage = Stage::control;
    m2.parent_hash = file_fnv1a(p_dm);
    save_checkpoint(p_cn, m2, cn.named_params());

    // Walk the chain back and verify each parent hash.
    TinyModel probe;
    const CheckpointMeta got_cn = load_checkpoint(p_cn, probe.named_params());
    CHECK(got_cn.parent_hash == file_fnv1a(p_dm));
    const CheckpointMeta got_dm = load_checkpoint(p_dm, probe.named_params());
    CHECK(got_dm.parent_hash == file_fnv1a(p_vae));
    const CheckpointMeta got_vae = load_checkpoint(p_vae, probe.named_params());
    CHECK(got_vae.parent_hash == 0);

    // Any edit to the parent file breaks the chain.
    std::string tampered = slurp(p_vae);
    tampered[tampered.size() / 2] ^= 0x01;
    voxsyn::detail::write_file(p_vae, tampered);
    CHECK(file_fnv1a(p_vae) != got_dm.parent_hash);
}

TEST_CASE("checkpoint: corrupt and mismatched files are rejected") {
    TinyModel m;
    Rng rng(204);
    m.randomize(rng);
    CheckpointMeta meta;
    const std::string path = tmp_path("victim.ckpt");
    save_checkpoint(path, meta, m.named_params());
    const std::string good = slurp(path);

    SECTION("bad magic") {
        std::string bad = good;
        bad[0] = 'X';
        voxsyn::detail::write_file(path, bad);
        CHECK_THROWS_WITH(load_checkpoint(path, m.named_params()),
                          Catch::Matchers::ContainsSubstring("bad magic"));
    }
    SECTION("version mismatch") {
        std::string bad = good;
        bad[4] = 9;
        voxsyn::detail::write_file(path, bad);
        CHECK_THROWS_WITH(load_checkpoint(path, m.named_params()),
                          Catch::Matchers::ContainsSubstring("version mismatch"));
    }
    SECTION("truncated") {
        voxsyn::detail::write_file(path, good.substr(0, good.size() - 5));
        CHECK_THROWS_WITH(load_checkpoint(path, m.named_params()),
                          Catch::Matchers::ContainsSubstring("truncated"));
    }
    SECTION("trailing bytes") {
        voxsyn::detail::write_file(path, good + "xx");
        CHECK_THROWS_WITH(load_checkpoint(path, m.named_params()),
                          Catch::Matchers::ContainsSubstring("trailing"));
    }
    SECTION("parameter name mismatch") {
        NamedParams renamed = {{"other.weight", &m.a}, {"layer.bias", &m.b}};
        CHECK_THROWS_WITH(load_checkpoint(path, renamed),
                          Catch::Matchers::ContainsSubstring("name mismatch"));
    }
    SECTION("parameter count mismatch") {
        NamedParams fewer = {{"layer.weight", &m.a}};
        CHECK_THROWS_WITH(load_checkpoint(path, fewer),
                          Catch::Matchers::ContainsSubstring("count mismatch"));
    }
    SECTION("shape mismatch") {
        TinyModel other;
        other.a.init({3, 2});  // transposed shape, same numel
        CHECK_THROWS_WITH(load_checkpoint(path, other.named_params()),
                          Catch::Matchers::ContainsSubstring("shape mismatch"));
    }
}

#pragma once
// cli.hpp
//
// Operator surface tying the pipeline together: toy training with enforced
// stage order (vae -> dm -> cn, hash-chained checkpoints), seeded generation,
// VAE round-trips with optional TSP decode, TSP benchmarking, and the HU
// quality gate.  Every command is deterministic given (config, seed, inputs);
// re-runs produce byte-identical artifacts.
//
// Commands are exposed twice: as throwing cmd_* functions taking parsed
// argument structs (what the tests drive), and through run_cli() which owns
// flag parsing and turns exceptions into exit code 1.

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "checkpoint.hpp"
#include "controlnet.hpp"
#include "metrics.hpp"
#include "toydata.hpp"
#include "tsp.hpp"
#include "vae.hpp"
#include "volume.hpp"

namespace voxsyn {

// =====================================================================
//  Run configuration
// =====================================================================

// Defaults are the toy-scale settings every trajectory test was tuned on.
// Note beta_max: the full-scale schedule ends at 0.02, but with T=50 toy
// steps that leaves alpha_bar_T ~= 0.6 — the chain never mixes to noise and
// ancestral sampling cannot recover a memorized latent.  0.2 restores
// alpha_bar_T ~= 0.007 at T=50.
struct RunConfig {
    // model
    i64 f = 4;
    i64 latent_channels = 4;
    std::vector<i64> widths{8, 16};  // VAE trunk widths, one per stride-2 level
    i64 gn_groups = 2;
    i64 unet_w1 = 16, unet_w2 = 32, unet_te = 32;
    i64 T = 50;
    double beta_min = 1e-4, beta_max = 0.2;
    i64 cond_f = 4, cond_emb = 8;
    // training
    double lr = 1e-3;
    double adam_beta1 = 0.9, adam_beta2 = 0.999;
    double schedule_power = 1.0;
    i64 steps = 200;
    std::uint64_t seed = 1234;
    // paths
    std::string data_dir = ".";
    std::string checkpoint_dir = "checkpoints";
    std::string ranges_path;
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const char* section,
                                std::initializer_list<const char*> known) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok)
            throw std::invalid_argument(std::string("run config: unknown key '") + key +
                                        "' in " + section);
    }
}

template <typename T>
inline void take(const nlohmann::json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace detail

// Shape: {"seed": N, "model": {...}, "training": {...}, "paths": {...}} —
// seed is mandatory, everything else defaults.  Unknown keys are rejected so
// a typo cannot silently fall back to a default.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown_keys(j, "config root", {"seed", "model", "training", "paths"});
    if (!j.contains("seed"))
        throw std::invalid_argument("run config: seed is mandatory");
    RunConfig rc;
    rc.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown_keys(m, "model",
                                    {"f", "latent_channels", "widths", "gn_groups", "unet_w1",
                                     "unet_w2", "unet_te", "T", "beta_min", "beta_max",
                                     "cond_f", "cond_emb"});
        detail::take(m, "f", rc.f);
        detail::take(m, "latent_channels", rc.latent_channels);
        detail::take(m, "widths", rc.widths);
        detail::take(m, "gn_groups", rc.gn_groups);
        detail::take(m, "unet_w1", rc.unet_w1);
        detail::take(m, "unet_w2", rc.unet_w2);
        detail::take(m, "unet_te", rc.unet_te);
        detail::take(m, "T", rc.T);
        detail::take(m, "beta_min", rc.beta_min);
        detail::take(m, "beta_max", rc.beta_max);
        detail::take(m, "cond_f", rc.cond_f);
        detail::take(m, "cond_emb", rc.cond_emb);
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        detail::reject_unknown_keys(
            t, "training", {"lr", "adam_beta1", "adam_beta2", "schedule_power", "steps"});
        detail::take(t, "lr", rc.lr);
        detail::take(t, "adam_beta1", rc.adam_beta1);
        detail::take(t, "adam_beta2", rc.adam_beta2);
        detail::take(t, "schedule_power", rc.schedule_power);
        detail::take(t, "steps", rc.steps);
    }
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        detail::reject_unknown_keys(p, "paths", {"data_dir", "checkpoint_dir", "ranges"});
        detail::take(p, "data_dir", rc.data_dir);
        detail::take(p, "checkpoint_dir", rc.checkpoint_dir);
        detail::take(p, "ranges", rc.ranges_path);
    }
    return rc;
}

inline nlohmann::json read_json_file(const std::string& path) {
    return nlohmann::json::parse(detail::read_file(path));
}

// Input paths must resolve at load; checkpoint_dir is an output location and
// gets created here instead.
inline RunConfig load_run_config(const std::string& path) {
    RunConfig rc = run_config_from_json(read_json_file(path));
    namespace fs = std::filesystem;
    if (!rc.data_dir.empty() && !fs::exists(rc.data_dir))
        throw std::invalid_argument("run config: data dir not found: " + rc.data_dir);
    if (!rc.ranges_path.empty() && !fs::exists(rc.ranges_path))
        throw std::invalid_argument("run config: ranges file not found: " + rc.ranges_path);
    if (!rc.checkpoint_dir.empty()) fs::create_directories(rc.checkpoint_dir);
    return rc;
}

// =====================================================================
//  Model construction from a config
// =====================================================================

inline VaeConfig vae_config(const RunConfig& rc) {
    VaeConfig c;
    c.f = rc.f;
    c.latent_channels = rc.latent_channels;
    c.widths = rc.widths;
    c.gn_groups = rc.gn_groups;
    return c;
}

inline UNetConfig unet_config(const RunConfig& rc) {
    UNetConfig c;
    c.latent_channels = rc.latent_channels;
    c.w1 = rc.unet_w1;
    c.w2 = rc.unet_w2;
    c.te = rc.unet_te;
    return c;
}

inline AdamConfig adam_config(const RunConfig& rc) {
    AdamConfig c;
    c.lr = static_cast<float>(rc.lr);
    c.beta1 = static_cast<float>(rc.adam_beta1);
    c.beta2 = static_cast<float>(rc.adam_beta2);
    c.total_steps = rc.steps;
    c.power = static_cast<float>(rc.schedule_power);
    return c;
}

inline std::string stage_ckpt_path(const RunConfig& rc, const char* stage) {
    return (std::filesystem::path(rc.checkpoint_dir) / (std::string(stage) + ".ckpt"))
        .string();
}

namespace detail {

inline std::map<std::string, double> vae_cfg_map(const RunConfig& rc) {
    std::map<std::string, double> m{{"f", double(rc.f)},
                                    {"latent_channels", double(rc.latent_channels)},
                                    {"gn_groups", double(rc.gn_groups)},
                                    {"steps", double(rc.steps)},
                                    {"lr", rc.lr},
                                    {"seed", double(rc.seed)}};
    for (std::size_t i = 0; i < rc.widths.size(); ++i)
        m["width" + std::to_string(i)] = double(rc.widths[i]);
    return m;
}

inline std::map<std::string, double> dm_cfg_map(const RunConfig& rc) {
    return {{"latent_channels", double(rc.latent_channels)},
            {"unet_w1", double(rc.unet_w1)},
            {"unet_w2", double(rc.unet_w2)},
            {"unet_te", double(rc.unet_te)},
            {"T", double(rc.T)},
            {"beta_min", rc.beta_min},
            {"beta_max", rc.beta_max},
            {"steps", double(rc.steps)},
            {"lr", rc.lr},
            {"seed", double(rc.seed)}};
}

inline std::map<std::string, double> cn_cfg_map(const RunConfig& rc) {
    auto m = dm_cfg_map(rc);
    m["cond_f"] = double(rc.cond_f);
    m["cond_emb"] = double(rc.cond_emb);
    return m;
}

// "%.9g" round-trips every float exactly and keeps CSVs byte-stable.
inline std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline CtVolume expect_ct(Mvol&& m, const std::string& path) {
    if (!std::holds_alternative<CtVolume>(m))
        throw std::invalid_argument("expected a CT volume, got a segmentation mask: " + path);
    return std::get<CtVolume>(std::move(m));
}

inline SegMask expect_mask(Mvol&& m, const std::string& path) {
    if (!std::holds_alternative<SegMask>(m))
        throw std::invalid_argument("expected a segmentation mask, got a CT volume: " + path);
    return std::get<SegMask>(std::move(m));
}

inline void require_stage(const CheckpointMeta& meta, Stage want, const std::string& path) {
    if (meta.stage != want)
        throw std::runtime_error("checkpoint stage mismatch: " + path +
                                 " does not hold the expected stage");
}

// Nearest valid extent for an indivisible dimension (never rounds to zero).
inline i64 suggest_dim(i64 dim, i64 m) { return std::max(m, nearest_multiple(dim, m)); }

inline std::string dims_csv(i64 d, i64 h, i64 w) {
    return std::to_string(d) + "," + std::to_string(h) + "," + std::to_string(w);
}

}  // namespace detail

// =====================================================================
//  train-toy: staged toy training with hash-chained checkpoints
// =====================================================================

struct TrainToyArgs {
    std::string stage;  // "vae" | "dm" | "cn"
};

inline int cmd_train_toy(const TrainToyArgs& a, const RunConfig& rc) {
    namespace fs = std::filesystem;
    if (!rc.checkpoint_dir.empty()) fs::create_directories(rc.checkpoint_dir);
    const std::string vae_path = stage_ckpt_path(rc, "vae");
    const std::string dm_path = stage_ckpt_path(rc, "dm");
    const std::string cn_path = stage_ckpt_path(rc, "cn");

    std::string csv;
    std::string out_ckpt, out_csv;
    double first_loss = 0.0, last_loss = 0.0;

    if (a.stage == "vae") {
        const auto data = make_blob_volumes(8, 32, rc.seed + 4242);
        Rng init_rng(rc.seed);
        VaeModel vae = make_vae(vae_config(rc), init_rng);
        LayerChain disc = make_discriminator(init_rng);
        VaeTrainer tr = make_vae_trainer(vae, disc);
        tr.opt_g.cfg = adam_config(rc);
        tr.opt_d.cfg = adam_config(rc);
        Rng train_rng(rc.seed + 1);
        csv = "step,recon,perceptual,kl,d_loss,g_loss,lr\n";
        for (i64 s = 1; s <= rc.steps; ++s) {
            const double lr = scheduled_lr(tr.opt_g.cfg, tr.opt_g.step);
            const VaeStepStats st =
                train_step_vae(tr, data[static_cast<std::size_t>((s - 1) % i64(data.size()))],
                               train_rng);
            const double g_loss = vae_weighted_g_total(tr.cfg, st);
            csv += std::to_string(s) + "," + detail::fmt_g(st.recon) + "," +
                   detail::fmt_g(st.perceptual) + "," + detail::fmt_g(st.kl) + "," +
                   detail::fmt_g(st.d_loss) + "," + detail::fmt_g(g_loss) + "," +
                   detail::fmt_g(lr) + "\n";
            if (s == 1) first_loss = st.recon;
            last_loss = st.recon;
        }
        save_checkpoint(vae_path, {Stage::vae, 0, detail::vae_cfg_map(rc)},
                        vae.named_params("vae"));
        out_ckpt = vae_path;
        out_csv = (fs::path(rc.checkpoint_dir) / "vae_loss.csv").string();
    } else if (a.stage == "dm") {
        if (!fs::exists(vae_path))
            throw std::runtime_error(
                "stage order violated: dm requires a vae checkpoint at " + vae_path +
                " (run --stage vae first)");
        const auto data = make_latent_toyset(rc.latent_channels, rc.seed + 5151);
        Rng init_rng(rc.seed);
        UNet3d m = make_unet(unet_config(rc), init_rng);
        DmTrainer tr =
            make_dm_trainer(m, make_schedule(rc.T, rc.beta_min, rc.beta_max), adam_config(rc));
        Rng train_rng(rc.seed + 1);
        csv = "step,loss,lr\n";
        for (i64 s = 1; s <= rc.steps; ++s) {
            const double lr = scheduled_lr(tr.opt.cfg, tr.opt.step);
            const auto& sample = data[static_cast<std::size_t>((s - 1) % i64(data.size()))];
            const double loss = train_step_dm(tr, sample.z0, sample.cond, train_rng);
            csv += std::to_string(s) + "," + detail::fmt_g(loss) + "," + detail::fmt_g(lr) +
                   "\n";
            if (s == 1) first_loss = loss;
            last_loss = loss;
        }
        save_checkpoint(dm_path,
                        {Stage::diffusion, file_fnv1a(vae_path), detail::dm_cfg_map(rc)},
                        m.named_params("unet"));
        out_ckpt = dm_path;
        out_csv = (fs::path(rc.checkpoint_dir) / "dm_loss.csv").string();
    } else if (a.stage == "cn") {
        if (!fs::exists(vae_path) || !fs::exists(dm_path))
            throw std::runtime_error(
                "stage order violated: cn requires vae and dm checkpoints (run --stage vae "
                "then --stage dm first)");
        Rng init_rng(rc.seed);
        UNet3d base = make_unet(unet_config(rc), init_rng);
        const CheckpointMeta dm_meta = load_checkpoint(dm_path, base.named_params("unet"));
        detail::require_stage(dm_meta, Stage::diffusion, dm_path);
        if (dm_meta.parent_hash != file_fnv1a(vae_path))
            throw std::runtime_error(
                "checkpoint chain mismatch: dm checkpoint was not trained on top of the vae "
                "checkpoint in " + rc.checkpoint_dir);
        Rng cn_rng(rc.seed + 2);
        ControlNetModel cn = make_controlnet(base, cn_rng, rc.cond_f, rc.cond_emb);
        CnTrainer tr = make_cn_trainer(cn, make_schedule(rc.T, rc.beta_min, rc.beta_max),
                                       adam_config(rc));
        const auto data = make_control_toyset(rc.latent_channels, rc.cond_f, 32, rc.seed + 6161);
        Rng train_rng(rc.seed + 1);
        csv = "step,loss,lr\n";
        for (i64 s = 1; s <= rc.steps; ++s) {
            const double lr = scheduled_lr(tr.opt.cfg, tr.opt.step);
            const auto& sample = data[static_cast<std::size_t>((s - 1) % i64(data.size()))];
            const double loss =
                train_step_cn(tr, sample.z0, sample.mask, sample.cond, train_rng);
            csv += std::to_string(s) + "," + detail::fmt_g(loss) + "," + detail::fmt_g(lr) +
                   "\n";
            if (s == 1) first_loss = loss;
            last_loss = loss;
        }
        save_checkpoint(cn_path, {Stage::control, file_fnv1a(dm_path), detail::cn_cfg_map(rc)},
                        cn.control_named_params("cn"));
        out_ckpt = cn_path;
        out_csv = (fs::path(rc.checkpoint_dir) / (a.stage + "_loss.csv")).string();
    } else {
        throw std::invalid_argument("train-toy: unknown stage '" + a.stage +
                                    "' (expected vae, dm, or cn)");
    }

    detail::write_file(out_csv, csv);
    nlohmann::json rep{{"stage", a.stage},
                       {"steps", rc.steps},
                       {"seed", rc.seed},
                       {"first_loss", first_loss},
                       {"last_loss", last_loss},
                       {"checkpoint", out_ckpt},
                       {"loss_csv", out_csv}};
    std::fputs((rep.dump(2) + "\n").c_str(), stdout);
    return 0;
}

// =====================================================================
//  roundtrip: encode/decode a volume through a trained VAE
// =====================================================================

struct RoundtripArgs {
    std::string input;       // .mvol CT volume
    std::string checkpoint;  // vae .ckpt
    std::string output;      // recon .mvol; default: <input>_recon.mvol
    int tsp = 0;             // 0 = monolithic decode only
    int workers = 2;
};

inline int cmd_roundtrip(const RoundtripArgs& a, const RunConfig& rc) {
    CtVolume ct = detail::expect_ct(read_mvol(a.input), a.input);

    const i64 d = ct.hu.dims[2], h = ct.hu.dims[3], w = ct.hu.dims[4];
    if (d % rc.f || h % rc.f || w % rc.f)
        throw std::invalid_argument(
            "roundtrip: dims " + detail::dims_csv(d, h, w) + " not divisible by f=" +
            std::to_string(rc.f) + "; resample to the nearest multiple first, e.g. dims " +
            detail::dims_csv(detail::suggest_dim(d, rc.f), detail::suggest_dim(h, rc.f),
                             detail::suggest_dim(w, rc.f)) +
            " via round_dims");

    Rng init_rng(rc.seed);
    VaeModel vae = make_vae(vae_config(rc), init_rng);
    const CheckpointMeta meta = load_checkpoint(a.checkpoint, vae.named_params("vae"));
    detail::require_stage(meta, Stage::vae, a.checkpoint);

    const Tensor5 x = normalize_hu(ct);
    // Mean latent: the round-trip is a fidelity probe, so no sampling noise.
    const Tensor5 z = vae_encode(vae, x).mu;
    const Tensor5 mono = vae_decode(vae, z);
    Tensor5 recon = mono;
    double tsp_diff = 0.0;
    if (a.tsp >= 1) {
        TspOptions opts;
        opts.workers = a.workers;
        recon = vae_decode_tsp(vae, z, a.tsp, opts);
        tsp_diff = max_abs_diff(recon, mono);
    }

    double l1 = 0.0;
    for (i64 i = 0; i < x.numel(); ++i) l1 += std::abs(double(x.data[i]) - double(recon.data[i]));
    l1 /= double(x.numel());

    const std::string out_path =
        a.output.empty() ? a.input.substr(0, a.input.rfind(".mvol")) + "_recon.mvol"
                         : a.output;
    write_mvol(out_path, denormalize_hu(recon, ct.meta));

    nlohmann::json rep{{"psnr", psnr(x, recon, 1.0)},
                       {"ssim", ssim3d(x, recon)},
                       {"l1", l1},
                       {"output", out_path}};
    if (a.tsp >= 1) {
        rep["tsp_segments"] = a.tsp;
        rep["tsp_max_abs_diff"] = tsp_diff;
    }
    std::fputs((rep.dump(2) + "\n").c_str(), stdout);
    return 0;
}

// =====================================================================
//  generate: conditioned sampling, optional control mask, TSP auto-decode
// =====================================================================

struct GenerateArgs {
    std::array<i64, 3> dims{32, 32, 32};
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    std::string top = "chest", bottom = "abdomen";
    std::uint64_t seed = 0;
    std::string mask;      // optional seg mask -> control branch
    std::string output = "generated.mvol";
    std::string manifest;  // default: <output>.manifest.json
    i64 tsp_threshold = 64 * 64 * 64;  // voxel count above which decode uses TSP
    int tsp_segments = 4;
    int workers = 2;
};

inline int cmd_generate(const GenerateArgs& a, const RunConfig& rc) {
    namespace fs = std::filesystem;
    VolumeMeta meta;
    meta.spacing = a.spacing;
    meta.top = region_from_name(a.top);
    meta.bottom = region_from_name(a.bottom);
    validate_meta(meta);  // rejects inverted coverage ("region order violated")

    // One stride-2 level in the U-Net on top of the VAE's factor f.
    const i64 mult = rc.f * 2;
    for (i64 dim : a.dims)
        if (dim % mult || dim / rc.f < 2)
            throw std::invalid_argument(
                "generate: dims " + detail::dims_csv(a.dims[0], a.dims[1], a.dims[2]) +
                " must be divisible by f*2=" + std::to_string(mult) + "; nearest valid dims " +
                detail::dims_csv(detail::suggest_dim(a.dims[0], mult),
                                 detail::suggest_dim(a.dims[1], mult),
                                 detail::suggest_dim(a.dims[2], mult)));

    const std::string vae_path = stage_ckpt_path(rc, "vae");
    const std::string dm_path = stage_ckpt_path(rc, "dm");
    if (!fs::exists(vae_path) || !fs::exists(dm_path))
        throw std::runtime_error("generate: missing vae/dm checkpoints in " +
                                 rc.checkpoint_dir + " (run train-toy first)");

    Rng init_rng(rc.seed);
    VaeModel vae = make_vae(vae_config(rc), init_rng);
    detail::require_stage(load_checkpoint(vae_path, vae.named_params("vae")), Stage::vae,
                          vae_path);
    UNet3d unet = make_unet(unet_config(rc), init_rng);
    const CheckpointMeta dm_meta = load_checkpoint(dm_path, unet.named_params("unet"));
    detail::require_stage(dm_meta, Stage::diffusion, dm_path);
    if (dm_meta.parent_hash != file_fnv1a(vae_path))
        throw std::runtime_error(
            "checkpoint chain mismatch: dm checkpoint was not trained on top of this vae "
            "checkpoint");

    const NoiseSchedule ns = make_schedule(rc.T, rc.beta_min, rc.beta_max);
    const PrimaryCond cond = encode_primary_cond(meta);
    const std::array<i64, 5> ldims{1, rc.latent_channels, a.dims[0] / rc.f, a.dims[1] / rc.f,
                                   a.dims[2] / rc.f};

    Tensor5 z;
    if (!a.mask.empty()) {
        SegMask mask = detail::expect_mask(read_mvol(a.mask), a.mask);
        if (mask.dims != a.dims)
            throw std::invalid_argument(
                "generate: mask dims " +
                detail::dims_csv(mask.dims[0], mask.dims[1], mask.dims[2]) +
                " must match --dims " + detail::dims_csv(a.dims[0], a.dims[1], a.dims[2]));
        const std::string cn_path = stage_ckpt_path(rc, "cn");
        if (!fs::exists(cn_path))
            throw std::runtime_error("generate: --mask requires a cn checkpoint at " + cn_path +
                                     " (run train-toy --stage cn first)");
        Rng cn_rng(rc.seed + 2);
        ControlNetModel cn = make_controlnet(unet, cn_rng, rc.cond_f, rc.cond_emb);
        const CheckpointMeta cn_meta =
            load_checkpoint(cn_path, cn.control_named_params("cn"));
        detail::require_stage(cn_meta, Stage::control, cn_path);
        if (cn_meta.parent_hash != file_fnv1a(dm_path))
            throw std::runtime_error(
                "checkpoint chain mismatch: cn checkpoint was not trained on top of this dm "
                "checkpoint");
        const Tensor5 c_f = cond_encode(cn.cond_enc, mask);
        z = generate_latent_cn(cn, ns, ldims, cond, c_f, a.seed);
    } else {
        z = generate_latent(unet, ns, ldims, cond, a.seed);
    }

    const i64 voxels = a.dims[0] * a.dims[1] * a.dims[2];
    const bool use_tsp = voxels > a.tsp_threshold;
    Tensor5 decoded;
    if (use_tsp) {
        TspOptions opts;
        opts.workers = a.workers;
        decoded = vae_decode_tsp(vae, z, a.tsp_segments, opts);
    } else {
        decoded = vae_decode(vae, z);
    }
    write_mvol(a.output, denormalize_hu(decoded, meta));  // clamps into [-1000, 1000] HU

    nlohmann::json man{{"seed", a.seed},
                       {"T", rc.T},
                       {"dims", {a.dims[0], a.dims[1], a.dims[2]}},
                       {"c_p",
                        {{"top", a.top},
                         {"bottom", a.bottom},
                         {"spacing", {meta.spacing[0], meta.spacing[1], meta.spacing[2]}}}},
                       {"control_mask", a.mask},
                       {"tsp_segments", use_tsp ? a.tsp_segments : 0},
                       {"output", a.output}};
    const std::string man_path = a.manifest.empty() ? a.output + ".manifest.json" : a.manifest;
    detail::write_file(man_path, man.dump(2) + "\n");
    std::fputs((man.dump(2) + "\n").c_str(), stdout);
    return 0;
}

// =====================================================================
//  benchmark-tsp: memory/equivalence CSV over a preset chain
// =====================================================================

struct BenchmarkArgs {
    std::string chain = "conv3";
    i64 extent = 32;
    std::vector<i64> segments{1, 2, 4};
    std::vector<std::string> modes{"sequential", "parallel"};
    std::string out;  // optional CSV path; always printed to stdout
    int workers = 2;
};

inline i64 chain_input_channels(const LayerChain& chain) {
    for (const Layer& l : chain.layers) {
        if (const auto* cv = std::get_if<Conv3dLayer>(&l)) return cv->c_in;
        if (const auto* gn = std::get_if<GroupNormLayer>(&l)) return gn->channels;
    }
    return 1;
}

inline int cmd_benchmark_tsp(const BenchmarkArgs& a) {
    const LayerChain chain = make_preset_chain(a.chain);
    std::vector<TspMode> modes;
    for (const std::string& m : a.modes) {
        if (m == "sequential") modes.push_back(TspMode::sequential);
        else if (m == "parallel") modes.push_back(TspMode::parallel);
        else throw std::invalid_argument("benchmark-tsp: unknown mode '" + m + "'");
    }
    const std::array<i64, 5> dims{1, chain_input_channels(chain), a.extent, 32, 32};
    const auto rows = run_tsp_benchmark(a.chain, chain, dims, a.segments, modes, a.workers);
    const std::string csv = bench_csv(rows);
    std::fputs(csv.c_str(), stdout);
    if (!a.out.empty()) detail::write_file(a.out, csv);
    for (const BenchRow& r : rows)
        if (r.max_abs_diff_vs_monolithic > 1e-5) {
            std::fputs("benchmark-tsp: equivalence violated (diff > 1e-5)\n", stderr);
            return 3;
        }
    return 0;
}

// =====================================================================
//  check-quality: HU gate over a labeled volume
// =====================================================================

struct CheckQualityArgs {
    std::string ct, mask, ranges;
    std::string report;  // optional JSON output path
};

inline int cmd_check_quality(const CheckQualityArgs& a) {
    if (a.ranges.empty())
        throw std::invalid_argument(
            "check-quality: --ranges required (or set paths.ranges in the config)");
    const CtVolume ct = detail::expect_ct(read_mvol(a.ct), a.ct);
    const SegMask mask = detail::expect_mask(read_mvol(a.mask), a.mask);
    const QualityRanges ranges = quality_ranges_from_json(read_json_file(a.ranges));

    // Resolve "nothing checked" to exit 2 before quality_check turns it into
    // an exception.
    const auto medians = median_hu_per_label(ct, mask);
    bool any = false;
    for (const auto& [label, _] : medians) any = any || ranges.count(int(label)) > 0;
    if (!any) {
        std::fputs("check-quality: nothing checked (no configured range matches any mask "
                   "label)\n",
                   stderr);
        return 2;
    }

    const QualityReport rep = quality_check(ct, mask, ranges);
    const nlohmann::json j = quality_report_to_json(rep);
    std::fputs((j.dump(2) + "\n").c_str(), stdout);
    if (!a.report.empty()) detail::write_file(a.report, j.dump(2) + "\n");
    return rep.pass ? 0 : 1;
}

// =====================================================================
//  Flag parsing
// =====================================================================

namespace detail {

inline std::array<i64, 3> parse_dims3(const std::string& s) {
    char extra = 0;
    long long a = 0, b = 0, c = 0;
    const int n = std::sscanf(s.c_str(), "%lld,%lld,%lld%c", &a, &b, &c, &extra);
    if (n != 3) throw CLI::ValidationError("dims", "expected d,h,w (e.g. 32,32,32)");
    return {static_cast<i64>(a), static_cast<i64>(b), static_cast<i64>(c)};
}

inline std::array<float, 3> parse_spacing3(const std::string& s) {
    std::array<float, 3> out{};
    char extra = 0;
    float a = 0, b = 0, c = 0;
    const int n = std::sscanf(s.c_str(), "%f,%f,%f%c", &a, &b, &c, &extra);
    if (n != 3)
        throw CLI::ValidationError("spacing", "expected sz,sy,sx (e.g. 1.5,1.0,1.0)");
    out = {a, b, c};
    return out;
}

}  // namespace detail

// Builds the app, parses argv, dispatches.  Throwing command bodies become
// exit code 1 with the message on stderr; parse errors use CLI11's own codes.
inline int run_cli(int argc, const char* const* argv) {
    CLI::App app{"desk-scale 3D CT synthesis pipeline"};
    app.require_subcommand(1);
    // App-level flags (--config, --workers) may appear on either side of the
    // subcommand name.
    app.fallthrough();

    std::string config_path;
    int workers = 2;
    app.add_option("--config", config_path, "RunConfig JSON (defaults used when omitted)");
    app.add_option("--workers", workers, "TSP worker pool bound");

    TrainToyArgs train;
    auto* c_train = app.add_subcommand("train-toy", "seeded staged toy training");
    c_train->add_option("--stage", train.stage, "vae | dm | cn")->required();

    RoundtripArgs rt;
    auto* c_rt = app.add_subcommand("roundtrip", "VAE encode/decode fidelity report");
    c_rt->add_option("--input", rt.input, "input CT .mvol")->required();
    c_rt->add_option("--checkpoint", rt.checkpoint, "vae checkpoint")->required();
    c_rt->add_option("--output", rt.output, "reconstruction path");
    c_rt->add_option("--tsp", rt.tsp, "decode via TSP with N segments, report diff");

    GenerateArgs gen;
    std::string dims_s = "32,32,32", spacing_s = "1,1,1";
    auto* c_gen = app.add_subcommand("generate", "sample a conditioned CT volume");
    c_gen->add_option("--dims", dims_s, "output dims d,h,w");
    c_gen->add_option("--spacing", spacing_s, "voxel spacing sz,sy,sx mm");
    c_gen->add_option("--top", gen.top, "top region");
    c_gen->add_option("--bottom", gen.bottom, "bottom region");
    c_gen->add_option("--seed", gen.seed, "sampling seed")->required();
    c_gen->add_option("--mask", gen.mask, "seg mask engaging the control branch");
    c_gen->add_option("--output", gen.output, "output .mvol path");
    c_gen->add_option("--manifest", gen.manifest, "manifest JSON path");
    c_gen->add_option("--tsp-threshold", gen.tsp_threshold, "voxel count forcing TSP decode");
    c_gen->add_option("--tsp-segments", gen.tsp_segments, "segments for TSP decode");

    BenchmarkArgs bm;
    std::string segments_s = "1,2,4", modes_s = "sequential,parallel";
    auto* c_bm = app.add_subcommand("benchmark-tsp", "TSP memory/equivalence CSV");
    c_bm->add_option("--chain", bm.chain, "preset: conv3 | conv4mem | mixed");
    c_bm->add_option("--extent", bm.extent, "depth extent of the input");
    c_bm->add_option("--segments", segments_s, "comma list of segment counts");
    c_bm->add_option("--mode", modes_s, "comma list from {sequential, parallel}");
    c_bm->add_option("--out", bm.out, "also write the CSV here");

    CheckQualityArgs q;
    auto* c_q = app.add_subcommand("check-quality", "HU median gate");
    c_q->add_option("--ct", q.ct, "CT .mvol")->required();
    c_q->add_option("--mask", q.mask, "seg mask .mvol")->required();
    c_q->add_option("--ranges", q.ranges, "label -> [lo, hi] JSON");
    c_q->add_option("--report", q.report, "write report JSON here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        RunConfig rc = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (c_q->parsed() && q.ranges.empty()) q.ranges = rc.ranges_path;
        rt.workers = gen.workers = bm.workers = workers;
        if (c_train->parsed()) return cmd_train_toy(train, rc);
        if (c_rt->parsed()) return cmd_roundtrip(rt, rc);
        if (c_gen->parsed()) {
            gen.dims = detail::parse_dims3(dims_s);
            gen.spacing = detail::parse_spacing3(spacing_s);
            return cmd_generate(gen, rc);
        }
        if (c_bm->parsed()) {
            bm.segments.clear();
            for (std::size_t pos = 0; pos < segments_s.size();) {
                const std::size_t comma = segments_s.find(',', pos);
                const std::size_t end = comma == std::string::npos ? segments_s.size() : comma;
                bm.segments.push_back(std::stoll(segments_s.substr(pos, end - pos)));
                pos = end + 1;
            }
            bm.modes.clear();
            for (std::size_t pos = 0; pos < modes_s.size();) {
                const std::size_t comma = modes_s.find(',', pos);
                const std::size_t end = comma == std::string::npos ? modes_s.size() : comma;
                bm.modes.push_back(modes_s.substr(pos, end - pos));
                pos = end + 1;
            }
            return cmd_benchmark_tsp(bm);
        }
        if (c_q->parsed()) return cmd_check_quality(q);
    } catch (const std::exception& e) {
        std::fputs(("error: " + std::string(e.what()) + "\n").c_str(), stderr);
        return 1;
    }
    return 0;
}

// Convenience overload for tests: args without the program name.
inline int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv{"voxsyn"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace voxsyn

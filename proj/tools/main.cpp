#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "diffstream/attn_mask.hpp"
#include "diffstream/denoiser.hpp"
#include "diffstream/diffusion.hpp"
#include "diffstream/frame_io.hpp"
#include "diffstream/kernels.hpp"
#include "diffstream/pipeline.hpp"
#include "diffstream/tensor.hpp"

namespace ds = diffstream;

namespace {

// Weights are seeded independently of --seed so the same model is compared
// under different noise draws.
constexpr std::uint64_t kModelSeed = 0x1ec5;

struct Opts {
    int window = 16;
    int warmup = 8;
    int steps = 4;
    float strength = 0.5f;
    std::string mode = "live2diff";
    int style = 0;
    std::uint64_t seed = 0;
    bool no_cond = false;
    bool no_kv_cache = false;
    std::string source = "moving_bar";
    int frames = 32;
    std::string input;
    std::string output;
    int xt_row = -1;
};

struct Prepared {
    ds::ToyDenoiser model;
    ds::Schedule sched;
    ds::FrameClip clip;
    std::vector<ds::Tensor> latents;
    std::vector<ds::Tensor> conds;
    ds::PipelineConfig pc;
};

Prepared prepare(const Opts& o) {
    Prepared p;
    ds::DenoiserConfig mc;
    mc.window = o.window;
    p.model = ds::init_model(mc, kModelSeed);
    p.sched = ds::make_schedule(mc.n_train_steps, o.steps);

    if (o.input.empty()) {
        p.clip = ds::synthetic_source(ds::parse_source(o.source), o.frames, mc.latent_h,
                                      mc.latent_w, o.seed);
    } else {
        p.clip = ds::load_frames(o.input);
        if (p.clip.height != mc.latent_h || p.clip.width != mc.latent_w || p.clip.channels != 1)
            throw std::invalid_argument("input clip must be single-channel at the latent "
                                        "resolution (" +
                                        std::to_string(mc.latent_h) + "x" +
                                        std::to_string(mc.latent_w) + ")");
    }
    for (const auto& f : p.clip.frames) {
        p.latents.push_back(ds::latent_from_frame(f, mc.channels));
        if (!o.no_cond) p.conds.push_back(ds::structure_map(f, mc.latent_h, mc.latent_w));
    }

    p.pc.window = o.window;
    p.pc.warmup = o.warmup;
    p.pc.strength = o.strength;
    p.pc.style_id = o.style;
    p.pc.use_kv_cache = !o.no_kv_cache;
    p.pc.seed = o.seed;
    return p;
}

ds::FrameClip latents_to_clip(const Prepared& p, const std::vector<ds::Tensor>& latents) {
    ds::FrameClip out;
    out.width = p.clip.width;
    out.height = p.clip.height;
    out.channels = 1;
    for (const auto& z : latents)
        out.frames.push_back(ds::frame_from_latent(z, out.height, out.width));
    return out;
}

int cmd_run(const Opts& o) {
    Prepared p = prepare(o);
    ds::RunMode mode = ds::parse_run_mode(o.mode);
    if (o.no_kv_cache && mode == ds::RunMode::Live2Diff) mode = ds::RunMode::Live2DiffNoCache;

    const auto t0 = std::chrono::steady_clock::now();
    ds::RunResult r = ds::run_latents(p.latents, o.no_cond ? nullptr : &p.conds, mode, p.model,
                                      p.sched, p.pc);
    const double wall =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    ds::FrameClip out = latents_to_clip(p, r.outputs);
    ds::MetricsReport rep = ds::compute_metrics(p.clip, out, r.counters);

    std::printf("mode            %s\n", ds::run_mode_name(mode));
    std::printf("kernels         %s\n", ds::kernels::active().name);
    std::printf("frames          %zu\n", p.latents.size());
    std::printf("window/warmup   %d/%d\n", o.window, o.warmup);
    std::printf("steps/strength  %d/%.3f\n", o.steps, (double)o.strength);
    std::printf("flicker         %.6e\n", rep.flicker);
    std::printf("structure_mse   %.6e\n", rep.structure_mse);
    std::printf("latency_ms      %.3f +/- %.3f\n", rep.latency_mean_ms, rep.latency_std_ms);
    std::printf("wall_ms         %.1f\n", wall);
    for (const auto& [k, v] : r.counters.as_map()) std::printf("%-22s %.0f\n", k.c_str(), v);

    if (!o.output.empty()) {
        ds::save_frames(o.output, out);
        std::printf("wrote           %s\n", o.output.c_str());
    }
    return 0;
}

int cmd_bench(const Opts& o) {
    Prepared p = prepare(o);
    const std::vector<ds::Tensor>* conds = o.no_cond ? nullptr : &p.conds;

    const auto t0 = std::chrono::steady_clock::now();
    ds::RunResult cached =
        ds::run_latents(p.latents, conds, ds::RunMode::Live2Diff, p.model, p.sched, p.pc);
    const auto t1 = std::chrono::steady_clock::now();
    ds::RunResult recomputed =
        ds::run_latents(p.latents, conds, ds::RunMode::Live2DiffNoCache, p.model, p.sched, p.pc);
    const auto t2 = std::chrono::steady_clock::now();

    const double wall_cached = std::chrono::duration<double, std::milli>(t1 - t0).count();
    const double wall_nocache = std::chrono::duration<double, std::milli>(t2 - t1).count();

    float dmax = 0.0f;
    for (std::size_t i = 0; i < cached.outputs.size(); ++i)
        dmax = std::max(dmax, ds::max_abs_diff(cached.outputs[i], recomputed.outputs[i]));

    const double proj_cached = (double)cached.counters.kv_projection_count;
    const double proj_nocache = (double)recomputed.counters.kv_projection_count;
    const double rows = proj_cached;
    const double mean_window =
        rows > 0 ? (double)cached.counters.attended_slot_count / rows : 0.0;

    std::printf("kernels               %s\n", ds::kernels::active().name);
    std::printf("frames                %zu\n", p.latents.size());
    std::printf("window/warmup/steps   %d/%d/%d\n", o.window, o.warmup, o.steps);
    std::printf("output max |delta|    %.3e\n", (double)dmax);
    std::printf("kv projections        %.0f cached, %.0f recomputed\n", proj_cached, proj_nocache);
    std::printf("projection ratio      %.4f\n", proj_cached > 0 ? proj_nocache / proj_cached : 0.0);
    std::printf("mean attended window  %.4f\n", mean_window);
    std::printf("latency cached ms     %.3f +/- %.3f\n", cached.counters.latency_mean_ms(),
                cached.counters.latency_std_ms());
    std::printf("latency recompute ms  %.3f +/- %.3f\n", recomputed.counters.latency_mean_ms(),
                recomputed.counters.latency_std_ms());
    std::printf("wall ms               %.1f cached, %.1f recomputed\n", wall_cached, wall_nocache);
    std::printf("speedup               %.2fx\n",
                wall_cached > 0 ? wall_nocache / wall_cached : 0.0);
    return 0;
}

bool report(const char* name, bool ok, double detail = 0.0, bool has_detail = false) {
    if (ok)
        std::printf("PASS  %s\n", name);
    else if (has_detail)
        std::printf("FAIL  %s (%.3e)\n", name, detail);
    else
        std::printf("FAIL  %s\n", name);
    return ok;
}

int cmd_verify(const Opts& o) {
    bool all = true;

    {
        const std::vector<float> row1 = {0, 0, 0, 0, ds::kMaskBlocked, ds::kMaskBlocked, 0, 0};
        const std::vector<int> want1 = {0, 1, 2, 3, 3, 3, 4, 5};
        const std::vector<float> row2 = {0, 0, 0, 0, ds::kMaskBlocked, ds::kMaskBlocked,
                                         ds::kMaskBlocked, 0};
        const std::vector<int> want2 = {0, 1, 2, 3, 3, 3, 3, 4};
        all &= report("positional index compaction",
                      ds::pe_index_compaction(row1) == want1 && ds::pe_index_compaction(row2) == want2);
    }
    {
        const ds::AttentionMask m = ds::build_training_mask(ds::MaskMode::UnidirectionalWarmup, 4, 2);
        const bool want[4][4] = {{1, 1, 0, 0}, {1, 1, 0, 0}, {1, 1, 1, 0}, {1, 1, 1, 1}};
        bool ok = true;
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) ok &= m.at(i, j) == want[i][j];
        all &= report("warmup mask worked example", ok);
    }
    {
        const ds::Schedule s = ds::make_schedule(1000, 4);
        const bool ok = s.infer_steps == std::vector<int>{999, 749, 499, 249};
        const ds::Schedule id = ds::make_schedule(8, 8);
        const bool ok2 = id.infer_steps == std::vector<int>{7, 6, 5, 4, 3, 2, 1, 0};
        all &= report("inference step spacing", ok && ok2);
    }
    {
        ds::DenoiserConfig mc;
        mc.window = 8;
        ds::ToyDenoiser model = ds::init_model(mc, kModelSeed);
        ds::Schedule sched = ds::make_schedule(mc.n_train_steps, 2);
        ds::PipelineConfig pc;
        pc.window = 8;
        pc.warmup = 2;
        pc.seed = o.seed;
        ds::FrameClip clip = ds::synthetic_source(ds::SourceKind::MovingBar, 20, mc.latent_h,
                                                  mc.latent_w, o.seed);
        std::vector<ds::Tensor> latents;
        for (const auto& f : clip.frames) latents.push_back(ds::latent_from_frame(f, mc.channels));
        ds::RunResult a =
            ds::run_latents(latents, nullptr, ds::RunMode::Live2Diff, model, sched, pc);
        ds::RunResult b =
            ds::run_latents(latents, nullptr, ds::RunMode::Live2DiffNoCache, model, sched, pc);
        float dmax = 0.0f;
        for (std::size_t i = 0; i < a.outputs.size(); ++i)
            dmax = std::max(dmax, ds::max_abs_diff(a.outputs[i], b.outputs[i]));
        all &= report("cached matches recompute", dmax <= 1e-6f, dmax, true);
    }
    {
        ds::DenoiserConfig mc;
        ds::ToyDenoiser model = ds::init_model(mc, kModelSeed);
        ds::RngStream rng{42, 0};
        ds::Tensor z = ds::gaussian(rng, {4, mc.spatial(), mc.channels});
        ds::Tensor cond = ds::gaussian(rng, {4, mc.spatial(), mc.cond_channels});
        const std::vector<int> t(4, 500);
        const ds::AttentionMask mask = ds::build_training_mask(ds::MaskMode::BidirectionalChunk, 4);
        ds::Tensor y0 = ds::forward_masked(model, z, t, 0, nullptr, mask);
        ds::Tensor y1 = ds::forward_masked(model, z, t, 0, &cond, mask);
        all &= report("fresh adapter is inert", ds::max_abs_diff(y0, y1) == 0.0f);
    }

    return all ? 0 : 1;
}

int cmd_xt(const Opts& o) {
    Prepared p = prepare(o);
    ds::RunMode mode = ds::parse_run_mode(o.mode);
    if (o.no_kv_cache && mode == ds::RunMode::Live2Diff) mode = ds::RunMode::Live2DiffNoCache;

    ds::RunResult r = ds::run_latents(p.latents, o.no_cond ? nullptr : &p.conds, mode, p.model,
                                      p.sched, p.pc);
    ds::FrameClip out = latents_to_clip(p, r.outputs);
    const int row = o.xt_row >= 0 ? o.xt_row : p.clip.height / 2;
    const std::string path = o.output.empty() ? "xt.pgm" : o.output;
    ds::export_xt_slice(path, out, row);
    std::printf("wrote %s (row %d, %zu frames)\n", path.c_str(), row, out.frames.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"streaming video diffusion playground"};
    app.require_subcommand(1);

    Opts o;
    app.set_config("--config", "", "key=value file; command-line flags win");
    app.add_option("--window", o.window, "temporal attention window")->capture_default_str();
    app.add_option("--warmup", o.warmup, "bidirectional warmup frames")->capture_default_str();
    app.add_option("--steps", o.steps, "inference steps")->capture_default_str();
    app.add_option("--strength", o.strength, "noising strength in [0, 1]")->capture_default_str();
    app.add_option("--mode", o.mode,
                   "live2diff, live2diff_nocache, perframe, chunked or sliding")
        ->capture_default_str();
    app.add_option("--style", o.style, "style embedding id")->capture_default_str();
    app.add_option("--seed", o.seed, "noise seed")->capture_default_str();
    app.add_flag("--no-cond", o.no_cond, "drop the structure conditioning");
    app.add_flag("--no-kv-cache", o.no_kv_cache, "re-project cached history every frame");
    app.add_option("--source", o.source, "moving_bar, drifting_sine, static or random_walk")
        ->capture_default_str();
    app.add_option("--frames", o.frames, "synthetic clip length")->capture_default_str();
    app.add_option("--input", o.input, "clip file to stream instead of a synthetic source");
    app.add_option("--output", o.output, "where to write the result");
    app.add_option("--xt-row", o.xt_row, "scan row for the X-T slice (default: middle)");

    CLI::App* run = app.add_subcommand("run", "stream a clip and report metrics");
    CLI::App* bench = app.add_subcommand("bench", "compare cached against recomputed attention");
    CLI::App* verify = app.add_subcommand("verify", "run the built-in self checks");
    CLI::App* xt = app.add_subcommand("xt", "export the X-T slice of a run");
    for (CLI::App* sub : {run, bench, verify, xt}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) return cmd_run(o);
        if (*bench) return cmd_bench(o);
        if (*verify) return cmd_verify(o);
        if (*xt) return cmd_xt(o);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

#pragma once

// Shared fixtures for the unit and acceptance tests: a small model
// configuration, random clip makers, and a sequential reference engine that
// denoises each streamed frame to completion immediately instead of
// pipelining. It mirrors the pipeline's RNG conventions exactly, so the two
// must agree on every emitted frame.

#include <stdexcept>
#include <vector>

#include "diffstream/attn_mask.hpp"
#include "diffstream/denoiser.hpp"
#include "diffstream/diffusion.hpp"
#include "diffstream/pipeline.hpp"
#include "diffstream/tensor.hpp"

namespace support {

using namespace diffstream;

inline DenoiserConfig tiny_config() {
    DenoiserConfig cfg;
    cfg.channels = 8;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.latent_h = 2;
    cfg.latent_w = 2;
    cfg.window = 8;
    cfg.n_train_steps = 50;
    cfg.n_styles = 4;
    cfg.cond_channels = 1;
    cfg.adapter_hidden = 4;
    return cfg;
}

inline ToyDenoiser tiny_model(std::uint64_t seed = 11) { return init_model(tiny_config(), seed); }

inline std::vector<Tensor> make_clip(const ToyDenoiser& m, int frames, std::uint64_t seed) {
    RngStream rng{seed, 0};
    std::vector<Tensor> clip;
    clip.reserve((std::size_t)frames);
    for (int i = 0; i < frames; ++i)
        clip.push_back(gaussian(rng, {m.cfg.spatial(), m.cfg.channels}));
    return clip;
}

inline std::vector<Tensor> make_conds(const ToyDenoiser& m, int frames, std::uint64_t seed) {
    RngStream rng{seed, 0};
    std::vector<Tensor> conds;
    conds.reserve((std::size_t)frames);
    for (int i = 0; i < frames; ++i)
        conds.push_back(gaussian(rng, {m.cfg.spatial(), m.cfg.cond_channels}));
    return conds;
}

inline float max_abs_diff_clips(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("clip size mismatch");
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i], b[i]));
    return m;
}

// Per-frame full denoising against the same per-step caches the pipeline
// uses: after the warmup batch, each frame runs all its steps back to back.
// Stream order and noise draws match the pipeline, so bank contents seen by
// any attended slot are identical.
inline std::vector<Tensor> run_sequential(const std::vector<Tensor>& latents,
                                          const std::vector<Tensor>* conds,
                                          const ToyDenoiser& model, const Schedule& sched,
                                          const PipelineConfig& cfg) {
    const int w = cfg.warmup;
    const int s = model.cfg.spatial();
    const int c = model.cfg.channels;
    if ((int)latents.size() < w)
        throw std::invalid_argument("run_sequential: clip shorter than the warmup window");

    const int start = start_step_index(sched, cfg.strength);
    std::vector<Tensor> outs;
    outs.reserve(latents.size());
    if (start == sched.n_infer_steps) return latents;

    RngStream rng{cfg.seed, 0};
    StreamCaches caches =
        make_stream_caches(model, sched.n_infer_steps, cfg.window, cfg.warmup, cfg.use_kv_cache);

    Tensor z = Tensor::zeros({w, s, c});
    for (int f = 0; f < w; ++f) {
        NoisedLatent nl = add_noise(latents[(std::size_t)f], cfg.strength, sched, rng);
        std::copy(nl.z.data.begin(), nl.z.data.end(), z.data.begin() + (std::size_t)f * s * c);
    }
    Tensor condb;
    if (conds != nullptr) {
        condb = Tensor::zeros({w, s, model.cfg.cond_channels});
        for (int f = 0; f < w; ++f)
            std::copy((*conds)[(std::size_t)f].data.begin(), (*conds)[(std::size_t)f].data.end(),
                      condb.data.begin() + (std::size_t)f * s * model.cfg.cond_channels);
    }
    for (int j = start; j < sched.n_infer_steps; ++j) {
        Tensor eps = forward_warmup(model, z, sched.infer_steps[(std::size_t)j], cfg.style_id,
                                    conds != nullptr ? &condb : nullptr, caches, j);
        z = denoise_step(z, eps, j, sched);
    }
    for (int f = 0; f < w; ++f) {
        Tensor row = Tensor::zeros({s, c});
        std::copy(z.data.begin() + (std::size_t)f * s * c,
                  z.data.begin() + (std::size_t)(f + 1) * s * c, row.data.begin());
        outs.push_back(std::move(row));
    }

    for (std::size_t i = (std::size_t)w; i < latents.size(); ++i) {
        NoisedLatent nl = add_noise(latents[i], cfg.strength, sched, rng);
        Tensor zi = std::move(nl.z);
        zi.shape = {1, s, c};
        Tensor ci;
        if (conds != nullptr) {
            ci = (*conds)[i];
            ci.shape = {1, s, model.cfg.cond_channels};
        }
        for (int j = start; j < sched.n_infer_steps; ++j) {
            StreamRow row;
            row.t_index = sched.infer_steps[(std::size_t)j];
            row.step = j;
            row.mask_row = streaming_row_mask((long)i, cfg.window, cfg.warmup);
            Tensor eps = forward_streaming(model, zi, {&row, 1}, cfg.style_id,
                                           conds != nullptr ? &ci : nullptr, caches, nullptr);
            zi = denoise_step(zi, eps, j, sched);
        }
        zi.shape = {s, c};
        outs.push_back(std::move(zi));
    }
    return outs;
}

}  // namespace support

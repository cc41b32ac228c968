#include "diffstream/pipeline.hpp"

#include <algorithm>
#include <cstring>
#include <stdexcept>
#include <utility>

#include "diffstream/attn_mask.hpp"

namespace diffstream {

RunMode parse_run_mode(const std::string& name) {
    if (name == "live2diff") return RunMode::Live2Diff;
    if (name == "live2diff_nocache") return RunMode::Live2DiffNoCache;
    if (name == "perframe") return RunMode::PerFrame;
    if (name == "chunked") return RunMode::Chunked;
    if (name == "sliding") return RunMode::Sliding;
    throw std::invalid_argument("unknown mode '" + name +
                                "' (expected live2diff, live2diff_nocache, perframe, chunked or "
                                "sliding)");
}

const char* run_mode_name(RunMode mode) {
    switch (mode) {
        case RunMode::Live2Diff: return "live2diff";
        case RunMode::Live2DiffNoCache: return "live2diff_nocache";
        case RunMode::PerFrame: return "perframe";
        case RunMode::Chunked: return "chunked";
        case RunMode::Sliding: return "sliding";
    }
    return "?";
}

namespace {

// Keeps the placeholder draws off the per-frame noise stream so cached and
// recompute runs consume identical noise for identical frames.
constexpr std::uint64_t kPlaceholderSalt = 0x9e3779b97f4a7c15ull;

double elapsed_ms(std::chrono::steady_clock::time_point a, std::chrono::steady_clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
}

void copy_row(Tensor& dst, int row, const Tensor& src) {
    std::memcpy(dst.ptr() + (std::size_t)row * src.numel(), src.ptr(),
                src.numel() * sizeof(float));
}

Tensor take_row(const Tensor& src, int row, int s, int c) {
    Tensor out = Tensor::zeros({s, c});
    std::memcpy(out.ptr(), src.ptr() + (std::size_t)row * s * c, (std::size_t)s * c * sizeof(float));
    return out;
}

}  // namespace

StreamPipeline::StreamPipeline(const ToyDenoiser& model, const Schedule& sched,
                               const PipelineConfig& cfg)
    : model_(model), sched_(sched), cfg_(cfg) {
    if (cfg.window < 2) throw std::invalid_argument("pipeline: window must be at least 2");
    if (cfg.warmup < 1 || cfg.warmup >= cfg.window)
        throw std::invalid_argument("pipeline: warmup must be in [1, window)");
    if (!(cfg.strength >= 0.0f && cfg.strength <= 1.0f))
        throw std::invalid_argument("pipeline: strength must be in [0, 1]");
    if (cfg.style_id < 0 || cfg.style_id >= model.cfg.n_styles)
        throw std::invalid_argument("pipeline: style_id out of range");
    start_step_ = start_step_index(sched, cfg.strength);
    depth_ = sched.n_infer_steps - start_step_;
    noise_rng_ = RngStream{cfg.seed, 0};
    placeholder_rng_ = RngStream{cfg.seed ^ kPlaceholderSalt, 0};
    if (depth_ > 0)
        caches_ =
            make_stream_caches(model, sched.n_infer_steps, cfg.window, cfg.warmup, cfg.use_kv_cache);
}

std::vector<Tensor> StreamPipeline::push(const Tensor& latent, const Tensor* cond) {
    const auto t0 = clock::now();
    if (phase_ == Phase::Finished) throw std::logic_error("pipeline: push after flush");
    const int s = model_.cfg.spatial();
    const int c = model_.cfg.channels;
    if (latent.ndim() != 2 || latent.dim(0) != s || latent.dim(1) != c)
        throw std::invalid_argument("pipeline: latent must be [spatial x channels]");
    if (cond != nullptr &&
        (cond->ndim() != 2 || cond->dim(0) != s || cond->dim(1) != model_.cfg.cond_channels))
        throw std::invalid_argument("pipeline: cond must be [spatial x cond_channels]");
    if (frames_pushed_ == 0)
        has_cond_ = cond != nullptr;
    else if ((cond != nullptr) != has_cond_)
        throw std::invalid_argument("pipeline: conditioning must cover every frame or none");
    ++frames_pushed_;

    if (phase_ == Phase::CollectingWarmup) {
        warmup_latents_.push_back(latent);
        if (has_cond_) warmup_conds_.push_back(*cond);
        warmup_times_.push_back(t0);
        if ((int)warmup_latents_.size() < cfg_.warmup) return {};
        auto outs = run_warmup();
        phase_ = Phase::Streaming;
        return outs;
    }
    return ingest(&latent, cond, t0);
}

std::vector<Tensor> StreamPipeline::run_warmup() {
    const int w = cfg_.warmup;
    const int s = model_.cfg.spatial();
    const int c = model_.cfg.channels;
    next_frame_index_ = w;
    std::vector<Tensor> outs;
    outs.reserve((std::size_t)w);

    if (depth_ == 0) {
        for (auto& z : warmup_latents_) {
            step_logs_.emplace_back();
            outs.push_back(std::move(z));
        }
        frames_emitted_ += w;
        warmup_latents_.clear();
        warmup_conds_.clear();
        warmup_times_.clear();
        return outs;
    }

    Tensor z = Tensor::zeros({w, s, c});
    for (int f = 0; f < w; ++f) {
        NoisedLatent nl = add_noise(warmup_latents_[(std::size_t)f], cfg_.strength, sched_, noise_rng_);
        copy_row(z, f, nl.z);
    }
    Tensor condb;
    if (has_cond_) {
        condb = Tensor::zeros({w, s, model_.cfg.cond_channels});
        for (int f = 0; f < w; ++f) copy_row(condb, f, warmup_conds_[(std::size_t)f]);
    }

    std::vector<int> steps;
    for (int j = start_step_; j < sched_.n_infer_steps; ++j) {
        Tensor eps = forward_warmup(model_, z, sched_.infer_steps[(std::size_t)j], cfg_.style_id,
                                    has_cond_ ? &condb : nullptr, caches_, j);
        ++counters_.denoiser_calls;
        z = denoise_step(z, eps, j, sched_);
        steps.push_back(j);
    }

    for (int f = 0; f < w; ++f) {
        outs.push_back(take_row(z, f, s, c));
        step_logs_.push_back(steps);
    }
    frames_emitted_ += w;
    warmup_latents_.clear();
    warmup_conds_.clear();
    warmup_times_.clear();
    return outs;
}

Tensor StreamPipeline::placeholder_latent() {
    return gaussian(placeholder_rng_, {model_.cfg.spatial(), model_.cfg.channels});
}

void StreamPipeline::seed_placeholders() {
    for (int j = sched_.n_infer_steps - 1; j > start_step_; --j) {
        InFlight it;
        it.real = false;
        it.frame_index = next_frame_index_ - (long)(j - start_step_);
        it.next_step = j;
        it.z = placeholder_latent();
        it.ingest_time = clock::now();
        if (has_cond_) it.cond = Tensor::zeros({model_.cfg.spatial(), model_.cfg.cond_channels});
        in_flight_.push_back(std::move(it));
    }
}

std::vector<Tensor> StreamPipeline::ingest(const Tensor* latent, const Tensor* cond,
                                           clock::time_point t0) {
    const int s = model_.cfg.spatial();
    const int c = model_.cfg.channels;
    std::vector<Tensor> outs;

    if (depth_ == 0) {
        // Strength zero: the noising map is the identity and no steps run.
        if (latent != nullptr) {
            step_logs_.emplace_back();
            counters_.frame_latency_ms.push_back(elapsed_ms(t0, clock::now()));
            ++frames_emitted_;
            ++next_frame_index_;
            outs.push_back(*latent);
        }
        return outs;
    }

    if (in_flight_.empty()) seed_placeholders();

    InFlight item;
    item.real = latent != nullptr;
    item.frame_index = next_frame_index_++;
    item.next_step = start_step_;
    item.ingest_time = t0;
    if (item.real) {
        NoisedLatent nl = add_noise(*latent, cfg_.strength, sched_, noise_rng_);
        item.z = std::move(nl.z);
        if (has_cond_) item.cond = *cond;
    } else {
        item.z = placeholder_latent();
        if (has_cond_) item.cond = Tensor::zeros({s, model_.cfg.cond_channels});
    }
    in_flight_.push_back(std::move(item));

    const int d = (int)in_flight_.size();
    Tensor batch = Tensor::zeros({d, s, c});
    Tensor condb;
    if (has_cond_) condb = Tensor::zeros({d, s, model_.cfg.cond_channels});
    std::vector<StreamRow> rows((std::size_t)d);
    for (int i = 0; i < d; ++i) {
        const InFlight& it = in_flight_[(std::size_t)i];
        copy_row(batch, i, it.z);
        if (has_cond_) copy_row(condb, i, it.cond);
        rows[(std::size_t)i].t_index = sched_.infer_steps[(std::size_t)it.next_step];
        rows[(std::size_t)i].step = it.next_step;
        rows[(std::size_t)i].mask_row = streaming_row_mask(
            std::max(it.frame_index, (long)cfg_.warmup), cfg_.window, cfg_.warmup);
        rows[(std::size_t)i].count = it.real;
    }

    Tensor eps = forward_streaming(model_, batch, rows, cfg_.style_id,
                                   has_cond_ ? &condb : nullptr, caches_, &counters_);
    ++counters_.denoiser_calls;

    for (int i = 0; i < d; ++i) {
        InFlight& it = in_flight_[(std::size_t)i];
        it.z = denoise_step(it.z, take_row(eps, i, s, c), it.next_step, sched_);
        it.steps_done.push_back(it.next_step);
        ++it.next_step;
    }

    if (in_flight_.front().next_step == sched_.n_infer_steps) {
        InFlight done = std::move(in_flight_.front());
        in_flight_.pop_front();
        if (done.real) {
            counters_.frame_latency_ms.push_back(elapsed_ms(done.ingest_time, clock::now()));
            step_logs_.push_back(std::move(done.steps_done));
            ++frames_emitted_;
            outs.push_back(std::move(done.z));
        }
    }
    return outs;
}

std::vector<Tensor> StreamPipeline::flush() {
    if (phase_ == Phase::Finished) return {};
    if (phase_ == Phase::CollectingWarmup) {
        if (!warmup_latents_.empty())
            throw std::logic_error("pipeline: flush before the warmup window was filled");
        phase_ = Phase::Finished;
        return {};
    }
    std::vector<Tensor> outs;
    auto any_real = [&] {
        return std::any_of(in_flight_.begin(), in_flight_.end(),
                           [](const InFlight& it) { return it.real; });
    };
    while (any_real()) {
        auto got = ingest(nullptr, nullptr, clock::now());
        for (auto& t : got) outs.push_back(std::move(t));
    }
    in_flight_.clear();
    phase_ = Phase::Finished;
    return outs;
}

namespace {

void check_clip(const ToyDenoiser& m, const std::vector<Tensor>& latents,
                const std::vector<Tensor>* conds) {
    const int s = m.cfg.spatial();
    const int c = m.cfg.channels;
    if (latents.empty()) throw std::invalid_argument("run: the clip has no frames");
    for (const auto& t : latents)
        if (t.ndim() != 2 || t.dim(0) != s || t.dim(1) != c)
            throw std::invalid_argument("run: every latent must be [spatial x channels]");
    if (conds != nullptr) {
        if (conds->size() != latents.size())
            throw std::invalid_argument("run: conditioning count does not match the frame count");
        for (const auto& t : *conds)
            if (t.ndim() != 2 || t.dim(0) != s || t.dim(1) != m.cfg.cond_channels)
                throw std::invalid_argument("run: every cond must be [spatial x cond_channels]");
    }
}

RunResult run_streaming_mode(const std::vector<Tensor>& latents, const std::vector<Tensor>* conds,
                             RunMode mode, const ToyDenoiser& model, const Schedule& sched,
                             const PipelineConfig& cfg) {
    if ((int)latents.size() < cfg.warmup)
        throw std::invalid_argument("run: the clip is shorter than the warmup window");
    PipelineConfig pc = cfg;
    pc.use_kv_cache = mode == RunMode::Live2Diff;
    StreamPipeline p(model, sched, pc);
    RunResult r;
    for (std::size_t i = 0; i < latents.size(); ++i) {
        auto outs = p.push(latents[i], conds != nullptr ? &(*conds)[i] : nullptr);
        for (auto& t : outs) r.outputs.push_back(std::move(t));
    }
    auto rest = p.flush();
    for (auto& t : rest) r.outputs.push_back(std::move(t));
    r.counters = p.counters();
    r.step_logs = p.emitted_step_logs();
    if (r.outputs.size() != latents.size())
        throw std::logic_error("run: streaming emitted a different number of frames than fed");
    return r;
}

RunResult run_perframe(const std::vector<Tensor>& latents, const std::vector<Tensor>* conds,
                       const ToyDenoiser& model, const Schedule& sched, const PipelineConfig& cfg) {
    const int s = model.cfg.spatial();
    const int c = model.cfg.channels;
    RngStream rng{cfg.seed, 0};
    RunResult r;
    std::vector<int> tv(1, 0);
    for (std::size_t i = 0; i < latents.size(); ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        NoisedLatent nl = add_noise(latents[i], cfg.strength, sched, rng);
        Tensor z = std::move(nl.z);
        z.shape = {1, s, c};
        Tensor cb;
        if (conds != nullptr) {
            cb = (*conds)[i];
            cb.shape = {1, s, model.cfg.cond_channels};
        }
        std::vector<int> log;
        for (int j = nl.start_step; j < sched.n_infer_steps; ++j) {
            tv[0] = sched.infer_steps[(std::size_t)j];
            Tensor eps = forward_spatial_only(model, z, tv, cfg.style_id,
                                              conds != nullptr ? &cb : nullptr);
            ++r.counters.denoiser_calls;
            z = denoise_step(z, eps, j, sched);
            log.push_back(j);
        }
        z.shape = {s, c};
        r.outputs.push_back(std::move(z));
        r.step_logs.push_back(std::move(log));
        r.counters.frame_latency_ms.push_back(
            elapsed_ms(t0, std::chrono::steady_clock::now()));
    }
    return r;
}

// Denoise `z` [n x S x C] through every step with a full bidirectional mask.
void denoise_block(Tensor& z, const Tensor* condb, const ToyDenoiser& model, const Schedule& sched,
                   const PipelineConfig& cfg, int start, std::vector<int>* log, OpCounters& ctr) {
    const int n = z.dim(0);
    const AttentionMask mask = build_training_mask(MaskMode::BidirectionalChunk, n);
    std::vector<int> tv((std::size_t)n, 0);
    for (int j = start; j < sched.n_infer_steps; ++j) {
        std::fill(tv.begin(), tv.end(), sched.infer_steps[(std::size_t)j]);
        Tensor eps = forward_masked(model, z, tv, cfg.style_id, condb, mask);
        ++ctr.denoiser_calls;
        z = denoise_step(z, eps, j, sched);
        if (log != nullptr) log->push_back(j);
    }
}

RunResult run_chunked(const std::vector<Tensor>& latents, const std::vector<Tensor>* conds,
                      const ToyDenoiser& model, const Schedule& sched, const PipelineConfig& cfg) {
    const int s = model.cfg.spatial();
    const int c = model.cfg.channels;
    const int total = (int)latents.size();
    RngStream rng{cfg.seed, 0};
    RunResult r;
    for (int s0 = 0; s0 < total; s0 += cfg.window) {
        const int n = std::min(cfg.window, total - s0);
        Tensor z0 = Tensor::zeros({n, s, c});
        for (int i = 0; i < n; ++i) copy_row(z0, i, latents[(std::size_t)(s0 + i)]);
        NoisedLatent nl = add_noise(z0, cfg.strength, sched, rng);
        Tensor z = std::move(nl.z);
        Tensor condb;
        if (conds != nullptr) {
            condb = Tensor::zeros({n, s, model.cfg.cond_channels});
            for (int i = 0; i < n; ++i) copy_row(condb, i, (*conds)[(std::size_t)(s0 + i)]);
        }
        std::vector<int> log;
        denoise_block(z, conds != nullptr ? &condb : nullptr, model, sched, cfg, nl.start_step,
                      &log, r.counters);
        for (int i = 0; i < n; ++i) {
            r.outputs.push_back(take_row(z, i, s, c));
            r.step_logs.push_back(log);
        }
    }
    return r;
}

RunResult run_sliding(const std::vector<Tensor>& latents, const std::vector<Tensor>* conds,
                      const ToyDenoiser& model, const Schedule& sched, const PipelineConfig& cfg) {
    const int s = model.cfg.spatial();
    const int c = model.cfg.channels;
    const int total = (int)latents.size();
    const int overlap = cfg.sliding_overlap > 0 ? cfg.sliding_overlap : cfg.window / 2;
    if (overlap >= cfg.window)
        throw std::invalid_argument("run: sliding overlap must be smaller than the window");

    std::vector<WindowChunk> plan;
    if (total <= cfg.window) {
        WindowChunk whole;
        whole.start = 0;
        whole.length = total;
        whole.fusion.assign((std::size_t)total, 1.0f);
        plan.push_back(std::move(whole));
    } else {
        plan = sliding_window_plan(total, cfg.window, overlap);
    }

    // Each frame is noised exactly once; overlapping chunks denoise the same
    // z_t and their outputs are blended by coverage.
    RngStream rng{cfg.seed, 0};
    std::vector<Tensor> noised;
    noised.reserve((std::size_t)total);
    int start = sched.n_infer_steps;
    for (const auto& z0 : latents) {
        NoisedLatent nl = add_noise(z0, cfg.strength, sched, rng);
        start = nl.start_step;
        noised.push_back(std::move(nl.z));
    }

    RunResult r;
    r.outputs.assign((std::size_t)total, Tensor::zeros({s, c}));
    r.step_logs.assign((std::size_t)total, {});
    for (const auto& chunk : plan) {
        const int n = chunk.length;
        Tensor z = Tensor::zeros({n, s, c});
        for (int i = 0; i < n; ++i) copy_row(z, i, noised[(std::size_t)(chunk.start + i)]);
        Tensor condb;
        if (conds != nullptr) {
            condb = Tensor::zeros({n, s, model.cfg.cond_channels});
            for (int i = 0; i < n; ++i) copy_row(condb, i, (*conds)[(std::size_t)(chunk.start + i)]);
        }
        std::vector<int> log;
        denoise_block(z, conds != nullptr ? &condb : nullptr, model, sched, cfg, start, &log,
                      r.counters);
        for (int i = 0; i < n; ++i) {
            const std::size_t f = (std::size_t)(chunk.start + i);
            Tensor& acc = r.outputs[f];
            acc = axpby(1.0f, acc, chunk.fusion[(std::size_t)i], take_row(z, i, s, c));
            if (r.step_logs[f].empty()) r.step_logs[f] = log;
        }
    }
    return r;
}

}  // namespace

RunResult run_latents(const std::vector<Tensor>& latents, const std::vector<Tensor>* conds,
                      RunMode mode, const ToyDenoiser& model, const Schedule& sched,
                      const PipelineConfig& cfg) {
    check_clip(model, latents, conds);
    switch (mode) {
        case RunMode::Live2Diff:
        case RunMode::Live2DiffNoCache:
            return run_streaming_mode(latents, conds, mode, model, sched, cfg);
        case RunMode::PerFrame: return run_perframe(latents, conds, model, sched, cfg);
        case RunMode::Chunked: return run_chunked(latents, conds, model, sched, cfg);
        case RunMode::Sliding: return run_sliding(latents, conds, model, sched, cfg);
    }
    throw std::logic_error("run: unhandled mode");
}

}  // namespace diffstream

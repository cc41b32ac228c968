#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "diffstream/denoiser.hpp"
#include "diffstream/diffusion.hpp"
#include "diffstream/op_counters.hpp"
#include "diffstream/tensor.hpp"

namespace diffstream {

enum class RunMode {
    Live2Diff,         // streaming, per-step KV caches
    Live2DiffNoCache,  // streaming, history features kept and re-projected every frame
    PerFrame,          // each frame denoised alone, temporal attention skipped
    Chunked,           // independent blocks of `window` frames, bidirectional inside
    Sliding,           // overlapping blocks, outputs fused by coverage weight
};

RunMode parse_run_mode(const std::string& name);
const char* run_mode_name(RunMode mode);

struct PipelineConfig {
    int window = 16;
    int warmup = 8;
    float strength = 0.5f;
    int style_id = 0;
    bool use_kv_cache = true;
    std::uint64_t seed = 0;
    int sliding_overlap = 0;  // 0 picks window / 2
};

// Streaming engine: frames enter one at a time and are denoised in a staggered
// batch, one denoiser call per ingest. The first `warmup` frames are collected
// and denoised together bidirectionally; they also seed the per-step caches.
// After warmup every push advances all in-flight frames by one inference step,
// so a frame's output appears depth() - 1 pushes after its own.
class StreamPipeline {
  public:
    enum class Phase { CollectingWarmup, Streaming, Finished };

    StreamPipeline(const ToyDenoiser& model, const Schedule& sched, const PipelineConfig& cfg);

    // Feed one latent [S x C] (cond [S x cond_channels] or null, consistently
    // across pushes). Returns any frames finished by this push: the warmup
    // batch all at once, then at most one per push.
    std::vector<Tensor> push(const Tensor& latent, const Tensor* cond = nullptr);

    // Drain the in-flight frames. The pipeline cannot be pushed to afterwards.
    std::vector<Tensor> flush();

    Phase phase() const { return phase_; }
    int depth() const { return depth_; }
    long long frames_pushed() const { return frames_pushed_; }
    long long frames_emitted() const { return frames_emitted_; }
    const OpCounters& counters() const { return counters_; }

    // Inference step indices each emitted frame went through, in emit order.
    const std::vector<std::vector<int>>& emitted_step_logs() const { return step_logs_; }

  private:
    using clock = std::chrono::steady_clock;

    struct InFlight {
        Tensor z;      // [S x C], latent at `next_step`
        Tensor cond;   // empty when the stream has no conditioning
        long frame_index = 0;
        bool real = false;
        int next_step = 0;
        std::vector<int> steps_done;
        clock::time_point ingest_time{};
    };

    std::vector<Tensor> run_warmup();
    std::vector<Tensor> ingest(const Tensor* latent, const Tensor* cond, clock::time_point t0);
    void seed_placeholders();
    Tensor placeholder_latent();

    const ToyDenoiser& model_;
    const Schedule& sched_;
    PipelineConfig cfg_;
    Phase phase_ = Phase::CollectingWarmup;
    int start_step_ = 0;
    int depth_ = 0;
    bool has_cond_ = false;

    RngStream noise_rng_;
    RngStream placeholder_rng_;
    StreamCaches caches_;
    std::deque<InFlight> in_flight_;  // front = closest to finishing

    std::vector<Tensor> warmup_latents_;
    std::vector<Tensor> warmup_conds_;
    std::vector<clock::time_point> warmup_times_;

    long long frames_pushed_ = 0;
    long long frames_emitted_ = 0;
    long next_frame_index_ = 0;
    OpCounters counters_;
    std::vector<std::vector<int>> step_logs_;
};

struct RunResult {
    std::vector<Tensor> outputs;  // one [S x C] latent per input frame
    OpCounters counters;
    std::vector<std::vector<int>> step_logs;
};

// Run a whole clip of latents [S x C] through one of the five modes.
// `conds` is null for an unconditioned run, else one [S x cond_channels]
// tensor per frame.
RunResult run_latents(const std::vector<Tensor>& latents, const std::vector<Tensor>* conds,
                      RunMode mode, const ToyDenoiser& model, const Schedule& sched,
                      const PipelineConfig& cfg);

}  // namespace diffstream

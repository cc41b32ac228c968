#pragma once

// Toy latent denoiser: per-frame channel mixers plus temporal attention
// layers, with timestep/style embeddings and a zero-initialized structure
// conditioning adapter. Small enough to verify exactly, shaped like the real
// thing: batch mode runs a whole window under one training mask, streaming
// mode runs staggered frames against per-step KV cache banks.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "diffstream/attn_mask.hpp"
#include "diffstream/kv_cache.hpp"
#include "diffstream/op_counters.hpp"
#include "diffstream/temporal_attention.hpp"
#include "diffstream/tensor.hpp"

namespace diffstream {

struct DenoiserConfig {
    int channels = 16;  // C, even and divisible by heads
    int heads = 2;
    int blocks = 2;  // mixer + temporal attention pairs
    int latent_h = 8;
    int latent_w = 8;
    int window = 16;  // L, also the positional table length
    int n_train_steps = 1000;
    int n_styles = 4;
    int cond_channels = 1;
    int adapter_hidden = 8;

    int spatial() const { return latent_h * latent_w; }
};

// Two-stage channel mixer whose last stage starts at zero, so an untrained
// adapter is an exact no-op on the backbone.
struct ConditionAdapter {
    Tensor first;   // [hidden x cond_channels]
    Tensor final_;  // [C x hidden], zero at init

    Tensor apply(const Tensor& cond) const;  // tanh between the stages
};

struct ToyDenoiser {
    DenoiserConfig cfg;
    std::vector<Tensor> mixers;          // per block, [C x C], bias-free
    std::vector<AttentionWeights> attn;  // per block
    PositionalEncoding pe;               // [window x C]
    std::vector<PeProjections> pe_proj;  // per block
    Tensor timestep_table;               // [n_train_steps x C]
    Tensor style_table;                  // [n_styles x C]
    ConditionAdapter adapter;
};

// Deterministic init: same seed, same bits.
ToyDenoiser init_model(const DenoiserConfig& cfg, std::uint64_t seed);

// Mutable per-run attention state: one bank per temporal layer (step-indexed
// inside). Weights stay immutable and shareable; forward calls in streaming
// mode mutate only this object.
struct StreamCaches {
    bool cache_kv = true;
    std::vector<KVCacheBank> kv;
    std::vector<FeatureBank> feats;
};

// `window` may be smaller than the model's; it sets the bank geometry.
StreamCaches make_stream_caches(const ToyDenoiser& m, int n_steps, int window, int warmup,
                                bool cache_kv);

// Whole-window batch forward; latents [F x S x C], per-frame training-step
// indices, mask [F x F]. Returns the eps estimate, same shape.
Tensor forward_masked(const ToyDenoiser& m, const Tensor& latents, std::span<const int> t_indices,
                      int style_id, const Tensor* cond, const AttentionMask& mask);

// Batch forward over the warmup frames (bidirectional among themselves) that
// also writes W_K f / W_V f of every layer input into the warmup region of
// that layer's bank at `step`.
Tensor forward_warmup(const ToyDenoiser& m, const Tensor& latents, int t_index, int style_id,
                      const Tensor* cond, StreamCaches& caches, int step);

struct StreamRow {
    int t_index = 0;             // training-step index for the embedding
    int step = 0;                // denoising step; selects the bank row
    std::vector<float> mask_row;  // slot mask, 0 / -inf
    bool count = true;           // placeholders are excluded from counters
};

// Staggered streaming forward: latents [D x S x C], one row descriptor per
// in-flight frame. Every frame rolls its step's cache row exactly once.
Tensor forward_streaming(const ToyDenoiser& m, const Tensor& latents,
                         std::span<const StreamRow> rows, int style_id, const Tensor* cond,
                         StreamCaches& caches, OpCounters* counters);

// Frame-independent forward with the temporal attention layers skipped;
// backbone of the per-frame baseline mode.
Tensor forward_spatial_only(const ToyDenoiser& m, const Tensor& latents,
                            std::span<const int> t_indices, int style_id, const Tensor* cond);

// Per-pixel gradient magnitude (central differences, clamped at the edges)
// of the channel-mean image, box-downsampled to the latent grid.
// frame is [H x W] or [H x W x C_img]; returns [out_h*out_w x 1].
Tensor structure_map(const Tensor& frame, int out_h, int out_w);

// Weight container: magic "L2DW", version, shape table, then raw LE f32
// payloads. Round-trips bit-exactly.
void save_weights(const ToyDenoiser& m, const std::string& path);
ToyDenoiser load_weights(const std::string& path);

}  // namespace diffstream

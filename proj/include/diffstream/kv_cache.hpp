#pragma once

// Per-denoising-step key/value caches for streaming temporal attention.
//
// One bank serves one attention layer; inside it every denoising step owns
// an [S x L x C] slice. Slots [0, warmup) hold the warmup frames and are
// written once, then never move. The remaining slots are a rolling queue
// with the newest frame in slot L-1. Cached entries are the pure mapped
// features W_K f / W_V f; positional encodings are attached at read time
// through the compacted index map, so an entry never changes meaning as it
// ages through the queue.

#include <span>
#include <string>

#include "diffstream/attn_mask.hpp"
#include "diffstream/temporal_attention.hpp"
#include "diffstream/tensor.hpp"

namespace diffstream {

struct KVCacheBank {
    Tensor k_cache, v_cache;  // [T x S x L x C]
    int n_steps = 0, spatial = 0, window = 0, channels = 0, warmup = 0;
    std::vector<std::uint8_t> warmup_written;  // per step
    std::vector<int> recent_count;             // per step, capped at window - warmup
};

KVCacheBank allocate_bank(int n_steps, int spatial, int window, int channels, int warmup);

// k, v are [S x warmup x C]; single shot per step.
void write_warmup(KVCacheBank& bank, int step, const Tensor& k, const Tensor& v);

// k, v are [S x 1 x C] (or [S x C]); shifts the recent region left and puts
// the new entry in slot window-1.
void roll_and_write(KVCacheBank& bank, int step, const Tensor& k, const Tensor& v);

int occupancy(const KVCacheBank& bank, int step);

// Projects the current frame, rolls it into the cache, then runs one-query
// masked attention over the window slots with compacted positional indices.
// feat is [S x 1 x C] (or [S x C]); returns [S x 1 x C].
Tensor attend_streaming(KVCacheBank& bank, int step, const Tensor& feat, const AttentionWeights& w,
                        std::span<const float> mask_row, const PeProjections& pe_proj);

// In-place variant for the streaming forward: out is [S x C] and may alias
// feat, which is fully read before anything is written.
void attend_streaming(KVCacheBank& bank, int step, const float* feat, float* out,
                      const AttentionWeights& w, std::span<const float> mask_row,
                      const PeProjections& pe_proj);

// Header T,S,L,C,warmup as LE u32, then k then v as raw LE f32.
void dump_bank(const KVCacheBank& bank, const std::string& path);

// Reference bank for the no-cache baseline: stores raw layer-input features
// with identical slot bookkeeping and reprojects the whole attended window
// on every read. Deliberately wasteful; outputs match attend_streaming
// bit for bit because the reprojection reruns the exact same dot products.
struct FeatureBank {
    Tensor feats;  // [T x S x L x C]
    int n_steps = 0, spatial = 0, window = 0, channels = 0, warmup = 0;
    std::vector<std::uint8_t> warmup_written;
    std::vector<int> recent_count;
};

FeatureBank allocate_feature_bank(int n_steps, int spatial, int window, int channels, int warmup);
void write_warmup(FeatureBank& bank, int step, const Tensor& feats);
void roll_and_write(FeatureBank& bank, int step, const Tensor& feats);

Tensor attend_recompute(FeatureBank& bank, int step, const Tensor& feat, const AttentionWeights& w,
                        std::span<const float> mask_row, const PeProjections& pe_proj);

void attend_recompute(FeatureBank& bank, int step, const float* feat, float* out,
                      const AttentionWeights& w, std::span<const float> mask_row,
                      const PeProjections& pe_proj);

}  // namespace diffstream

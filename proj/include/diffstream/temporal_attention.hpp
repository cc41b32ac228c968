#pragma once

// Multi-head temporal self-attention over the frame axis, with sinusoidal
// positional encodings added to the features before all three projections.
// Spatial positions never mix here; each one attends independently.

#include "diffstream/attn_mask.hpp"
#include "diffstream/tensor.hpp"

namespace diffstream {

// Bias-free projection weights of one temporal attention layer. There are
// deliberately no bias tensors: the streaming cache stores W_K f / W_V f and
// re-attaches W_K pe / W_V pe at read time, which is exact only when the
// projections are linear.
struct AttentionWeights {
    Tensor w_q, w_k, w_v, w_out;  // each [C x C]
    int head_count = 1;

    int channels() const { return w_q.ndim() == 2 ? w_q.dim(0) : 0; }
};

struct PositionalEncoding {
    Tensor table;  // [max_len x C]

    int max_len() const { return table.ndim() == 2 ? table.dim(0) : 0; }
    int channels() const { return table.ndim() == 2 ? table.dim(1) : 0; }
};

// Projected encodings W_Q pe / W_K pe / W_V pe, each [max_len x C]; computed
// once so streaming reads only gather rows.
struct PeProjections {
    Tensor q, k, v;
};

// table[p][2i] = sin(p / 10000^(2i/C)), table[p][2i+1] = cos(same). C even.
PositionalEncoding make_positional_encoding(int max_len, int channels);

PeProjections precompute_pe_projections(const AttentionWeights& w, const PositionalEncoding& pe);

void validate_attention_weights(const AttentionWeights& w);

// feat is [S x F x C]; frame f uses positional row f; mask is [F x F].
// Returns [S x F x C].
Tensor attend_full(const Tensor& feat, const AttentionWeights& w, const AttentionMask& mask,
                   const PositionalEncoding& pe);

// Analytic d(loss)/d(feat) for upstream = d(loss)/d(output), same shapes as
// attend_full. Gradients w.r.t. the weights are not needed anywhere.
Tensor attend_backward(const Tensor& feat, const AttentionWeights& w, const AttentionMask& mask,
                       const PositionalEncoding& pe, const Tensor& upstream);

}  // namespace diffstream

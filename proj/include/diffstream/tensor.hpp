#pragma once

// Dense row-major float32 tensors plus the handful of ops the engine is
// built from, and a counter-based RNG whose draws are a pure function of
// (seed, counter) so runs replay bit-identically everywhere.

#include <cstdint>
#include <vector>

#include "diffstream/attn_mask.hpp"

namespace diffstream {

struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    std::int64_t numel() const { return (std::int64_t)data.size(); }
    int ndim() const { return (int)shape.size(); }
    int dim(int i) const { return shape[(std::size_t)i]; }
    float* ptr() { return data.data(); }
    const float* ptr() const { return data.data(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

struct RngStream {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    std::uint64_t next_raw();
    double next_uniform();  // [0, 1)
    float next_normal();    // one counter tick per draw
};

// c = a * b for 2-d operands [m x k] * [k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// y[..., o] = sum_i weight[o, i] * x[..., i]; weight is [C_out x C_in] and
// applies to the last axis. No bias anywhere: the cached positional-encoding
// decomposition W(f + pe) = Wf + Wpe relies on it.
Tensor linear_nobias(const Tensor& weight, const Tensor& x);

// Softmax over the last axis of [... x Q x KV] with mask [Q x KV]; blocked
// slots get weight exactly 0. Throws std::domain_error on a fully masked row.
Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask);

// Standard normal draws; advances rng.counter by the element count.
Tensor gaussian(RngStream& rng, std::vector<int> shape);

void add_inplace(Tensor& dst, const Tensor& src);
Tensor axpby(float alpha, const Tensor& x, float beta, const Tensor& y);
float max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace diffstream

#include "diffstream/tensor.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "diffstream/kernels.hpp"

namespace diffstream {

namespace {

std::int64_t shape_numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor: extents must be positive");
        n *= d;
    }
    return n;
}

// splitmix64 finalizer; full avalanche, so consecutive counters give
// independent-looking 64-bit words.
std::uint64_t mix64(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign((std::size_t)shape_numel(shape), 0.0f);
}

std::uint64_t RngStream::next_raw() { return mix64(seed + mix64(counter++)); }

double RngStream::next_uniform() { return (double)(next_raw() >> 11) * 0x1.0p-53; }

float RngStream::next_normal() {
    const std::uint64_t r = next_raw();
    // Box-Muller from one 64-bit word: high half gives u1 in (0, 1], low half
    // gives the angle. One counter tick per normal.
    const double u1 = ((double)(r >> 32) + 1.0) * 0x1.0p-32;
    const double u2 = (double)(r & 0xffffffffull) * 0x1.0p-32;
    return (float)(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw std::invalid_argument("matmul: operands must be 2-d");
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner extents " + std::to_string(a.dim(1)) + " vs " +
                                    std::to_string(b.dim(0)));
    Tensor c({a.dim(0), b.dim(1)});
    kernels::active().gemm(a.ptr(), b.ptr(), c.ptr(), a.dim(0), a.dim(1), b.dim(1));
    return c;
}

Tensor linear_nobias(const Tensor& weight, const Tensor& x) {
    if (weight.ndim() != 2) throw std::invalid_argument("linear_nobias: weight must be 2-d");
    if (x.ndim() < 1 || x.dim(x.ndim() - 1) != weight.dim(1))
        throw std::invalid_argument("linear_nobias: last axis " +
                                    std::to_string(x.ndim() ? x.dim(x.ndim() - 1) : 0) +
                                    " does not match weight columns " + std::to_string(weight.dim(1)));
    const int c_in = weight.dim(1);
    const int c_out = weight.dim(0);
    const int rows = (int)(x.numel() / c_in);
    std::vector<int> out_shape = x.shape;
    out_shape.back() = c_out;
    Tensor y(std::move(out_shape));
    kernels::active().gemm_nt(x.ptr(), weight.ptr(), y.ptr(), rows, c_in, c_out);
    return y;
}

Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask) {
    if (scores.ndim() < 2)
        throw std::invalid_argument("masked_softmax: scores must be at least 2-d");
    const int kv = scores.dim(scores.ndim() - 1);
    const int q = scores.dim(scores.ndim() - 2);
    if (q != mask.rows || kv != mask.cols)
        throw std::invalid_argument("masked_softmax: mask " + std::to_string(mask.rows) + "x" +
                                    std::to_string(mask.cols) + " does not match scores " +
                                    std::to_string(q) + "x" + std::to_string(kv));
    for (int r = 0; r < q; ++r) {
        bool any = false;
        for (int c = 0; c < kv; ++c) any = any || mask.at(r, c);
        if (!any) throw std::domain_error("masked_softmax: fully masked row " + std::to_string(r));
    }
    Tensor out = scores;
    const std::int64_t batches = scores.numel() / ((std::int64_t)q * kv);
    for (std::int64_t b = 0; b < batches; ++b)
        for (int r = 0; r < q; ++r)
            kernels::softmax_masked_row(out.ptr() + (b * q + r) * kv, mask.row(r), kv);
    return out;
}

Tensor gaussian(RngStream& rng, std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.next_normal();
    return t;
}

void add_inplace(Tensor& dst, const Tensor& src) {
    if (!dst.same_shape(src)) throw std::invalid_argument("add_inplace: shape mismatch");
    kernels::active().add((int)dst.numel(), dst.ptr(), src.ptr());
}

Tensor axpby(float alpha, const Tensor& x, float beta, const Tensor& y) {
    if (!x.same_shape(y)) throw std::invalid_argument("axpby: shape mismatch");
    Tensor out(x.shape);
    kernels::active().axpby((int)x.numel(), alpha, x.ptr(), beta, y.ptr(), out.ptr());
    return out;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    float m = 0.0f;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace diffstream

#include "diffstream/kernels.hpp"

#include <cassert>
#include <cmath>
#include <cstring>

namespace diffstream::kernels {

// ==================== scalar reference kernels ====================
// These define the semantics; the SIMD variants must agree with them to
// within float reassociation error. Loop orders are chosen so the AVX2
// versions can keep the same per-element accumulation order where possible
// (gemm runs i-k-j in both).

namespace {

void gemm_scalar(const float* a, const float* b, float* c, int m, int k, int n) {
    std::memset(c, 0, sizeof(float) * (size_t)m * n);
    for (int i = 0; i < m; ++i) {
        const float* arow = a + (size_t)i * k;
        float* crow = c + (size_t)i * n;
        for (int kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b + (size_t)kk * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void gemm_nt_scalar(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + (size_t)i * k;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + (size_t)j * k;
            float acc = 0.0f;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            c[(size_t)i * n + j] = acc;
        }
    }
}

void axpby_scalar(int n, float alpha, const float* x, float beta, const float* y, float* out) {
    for (int i = 0; i < n; ++i) out[i] = alpha * x[i] + beta * y[i];
}

void add_scalar(int n, float* dst, const float* src) {
    for (int i = 0; i < n; ++i) dst[i] += src[i];
}

void attn_scores_scalar(const float* q, const float* k, float* scores, int n, int d, int stride) {
    for (int r = 0; r < n; ++r) {
        const float* krow = k + (size_t)r * stride;
        float acc = 0.0f;
        for (int j = 0; j < d; ++j) acc += q[j] * krow[j];
        scores[r] = acc;
    }
}

void attn_mix_scalar(const float* w, const float* v, float* out, int n, int d, int stride) {
    for (int j = 0; j < d; ++j) {
        float acc = 0.0f;
        for (int r = 0; r < n; ++r) acc += w[r] * v[(size_t)r * stride + j];
        out[j] = acc;
    }
}

void softmax_masked_scalar(float* row, const std::uint8_t* allowed, int n) {
    float maxv = -INFINITY;
    for (int i = 0; i < n; ++i)
        if (!allowed || allowed[i]) maxv = row[i] > maxv ? row[i] : maxv;
    assert(maxv > -INFINITY && "softmax_masked_row needs at least one allowed slot");
    float sum = 0.0f;
    for (int i = 0; i < n; ++i) {
        if (!allowed || allowed[i]) {
            row[i] = std::exp(row[i] - maxv);
            sum += row[i];
        } else {
            row[i] = 0.0f;
        }
    }
    const float inv = 1.0f / sum;
    for (int i = 0; i < n; ++i) row[i] *= inv;
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable t{"scalar",      gemm_scalar, gemm_nt_scalar,
                               axpby_scalar,  add_scalar,  attn_scores_scalar,
                               attn_mix_scalar, softmax_masked_scalar};
    return t;
}

void softmax_masked_row(float* row, const std::uint8_t* allowed, int n) {
    active().softmax_masked(row, allowed, n);
}

}  // namespace diffstream::kernels

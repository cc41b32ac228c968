#include "diffstream/kernels.hpp"

// AVX2+FMA variants. This translation unit is built with -mavx2 -mfma on
// x86-64 and must only be entered through the dispatch table after a CPUID
// check. On other architectures it degrades to the scalar table.

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cassert>
#include <cmath>
#include <cstring>

namespace diffstream::kernels {
namespace {

// Same i-k-j order as the scalar gemm; the only numeric difference is FMA
// rounding, so per-element results track scalar to ~1 ulp per term.
void gemm_avx2(const float* a, const float* b, float* c, int m, int k, int n) {
    std::memset(c, 0, sizeof(float) * (size_t)m * n);
    for (int i = 0; i < m; ++i) {
        const float* arow = a + (size_t)i * k;
        float* crow = c + (size_t)i * n;
        for (int kk = 0; kk < k; ++kk) {
            const __m256 av = _mm256_set1_ps(arow[kk]);
            const float* brow = b + (size_t)kk * n;
            int j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 cv = _mm256_loadu_ps(crow + j);
                cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j), cv);
                _mm256_storeu_ps(crow + j, cv);
            }
            const float as = arow[kk];
            for (; j < n; ++j) crow[j] += as * brow[j];
        }
    }
}

float hsum8(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    lo = _mm_add_ps(lo, hi);
    lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
    lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
    return _mm_cvtss_f32(lo);
}

void gemm_nt_avx2(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + (size_t)i * k;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + (size_t)j * k;
            __m256 acc = _mm256_setzero_ps();
            int kk = 0;
            for (; kk + 8 <= k; kk += 8)
                acc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + kk), _mm256_loadu_ps(brow + kk), acc);
            float s = hsum8(acc);
            for (; kk < k; ++kk) s += arow[kk] * brow[kk];
            c[(size_t)i * n + j] = s;
        }
    }
}

void axpby_avx2(int n, float alpha, const float* x, float beta, const float* y, float* out) {
    const __m256 av = _mm256_set1_ps(alpha);
    const __m256 bv = _mm256_set1_ps(beta);
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 r = _mm256_mul_ps(bv, _mm256_loadu_ps(y + i));
        r = _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), r);
        _mm256_storeu_ps(out + i, r);
    }
    for (; i < n; ++i) out[i] = alpha * x[i] + beta * y[i];
}

void add_avx2(int n, float* dst, const float* src) {
    int i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(dst + i), _mm256_loadu_ps(src + i)));
    for (; i < n; ++i) dst[i] += src[i];
}

void attn_scores_avx2(const float* q, const float* k, float* scores, int n, int d, int stride) {
    for (int r = 0; r < n; ++r) {
        const float* krow = k + (size_t)r * stride;
        __m256 acc = _mm256_setzero_ps();
        int j = 0;
        for (; j + 8 <= d; j += 8)
            acc = _mm256_fmadd_ps(_mm256_loadu_ps(q + j), _mm256_loadu_ps(krow + j), acc);
        float s = hsum8(acc);
        for (; j < d; ++j) s += q[j] * krow[j];
        scores[r] = s;
    }
}

// Accumulates across rows in the scalar order; only the per-lane FMA
// rounding differs.
void attn_mix_avx2(const float* w, const float* v, float* out, int n, int d, int stride) {
    int j = 0;
    for (; j + 8 <= d; j += 8) {
        __m256 acc = _mm256_setzero_ps();
        for (int r = 0; r < n; ++r)
            acc = _mm256_fmadd_ps(_mm256_set1_ps(w[r]),
                                  _mm256_loadu_ps(v + (size_t)r * stride + j), acc);
        _mm256_storeu_ps(out + j, acc);
    }
    for (; j < d; ++j) {
        float acc = 0.0f;
        for (int r = 0; r < n; ++r) acc += w[r] * v[(size_t)r * stride + j];
        out[j] = acc;
    }
}

// exp on 8 lanes: round-to-nearest base-2 range reduction plus a degree-6
// minimax polynomial (the classic Cephes fit), good to ~2 ulp. Inputs are
// clamped to the finite exp range; softmax only feeds it row - max <= 0.
__m256 exp8(__m256 x) {
    x = _mm256_max_ps(x, _mm256_set1_ps(-87.33654f));
    x = _mm256_min_ps(x, _mm256_set1_ps(88.72283f));
    const __m256 k =
        _mm256_round_ps(_mm256_mul_ps(x, _mm256_set1_ps(1.44269504088896341f)),
                        _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    __m256 r = _mm256_fnmadd_ps(k, _mm256_set1_ps(0.693359375f), x);
    r = _mm256_fnmadd_ps(k, _mm256_set1_ps(-2.12194440e-4f), r);
    __m256 p = _mm256_set1_ps(1.9875691500e-4f);
    p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.3981999507e-3f));
    p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(8.3334519073e-3f));
    p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(4.1665795894e-2f));
    p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.6666665459e-1f));
    p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(5.0000001201e-1f));
    p = _mm256_fmadd_ps(p, _mm256_mul_ps(r, r), r);
    p = _mm256_add_ps(p, _mm256_set1_ps(1.0f));
    const __m256i ebits = _mm256_slli_epi32(
        _mm256_add_epi32(_mm256_cvtps_epi32(k), _mm256_set1_epi32(127)), 23);
    return _mm256_mul_ps(p, _mm256_castsi256_ps(ebits));
}

void softmax_masked_avx2(float* row, const std::uint8_t* allowed, int n) {
    float maxv = -INFINITY;
    if (allowed == nullptr && n >= 8) {
        __m256 mv = _mm256_loadu_ps(row);
        int i = 8;
        for (; i + 8 <= n; i += 8) mv = _mm256_max_ps(mv, _mm256_loadu_ps(row + i));
        __m128 lo = _mm_max_ps(_mm256_castps256_ps128(mv), _mm256_extractf128_ps(mv, 1));
        lo = _mm_max_ps(lo, _mm_movehl_ps(lo, lo));
        lo = _mm_max_ss(lo, _mm_shuffle_ps(lo, lo, 1));
        maxv = _mm_cvtss_f32(lo);
        for (; i < n; ++i) maxv = row[i] > maxv ? row[i] : maxv;
    } else {
        for (int i = 0; i < n; ++i)
            if (!allowed || allowed[i]) maxv = row[i] > maxv ? row[i] : maxv;
    }
    assert(maxv > -INFINITY && "softmax_masked_row needs at least one allowed slot");

    // Blocked lanes may hold arbitrary scores; their exps are forced to zero
    // before the sum so they cannot contaminate it.
    const __m256 mv8 = _mm256_set1_ps(maxv);
    __m256 acc = _mm256_setzero_ps();
    int i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 e = exp8(_mm256_sub_ps(_mm256_loadu_ps(row + i), mv8));
        if (allowed != nullptr) {
            const __m256i m =
                _mm256_cvtepu8_epi32(_mm_loadl_epi64((const __m128i*)(allowed + i)));
            e = _mm256_and_ps(
                e, _mm256_castsi256_ps(_mm256_cmpgt_epi32(m, _mm256_setzero_si256())));
        }
        _mm256_storeu_ps(row + i, e);
        acc = _mm256_add_ps(acc, e);
    }
    float sum = hsum8(acc);
    for (; i < n; ++i) {
        if (!allowed || allowed[i]) {
            row[i] = std::exp(row[i] - maxv);
            sum += row[i];
        } else {
            row[i] = 0.0f;
        }
    }
    const float inv = 1.0f / sum;
    i = 0;
    for (; i + 8 <= n; i += 8)
        _mm256_storeu_ps(row + i, _mm256_mul_ps(_mm256_loadu_ps(row + i), _mm256_set1_ps(inv)));
    for (; i < n; ++i) row[i] *= inv;
}

}  // namespace

const KernelTable& avx2_table() {
    static const KernelTable t{"avx2",     gemm_avx2, gemm_nt_avx2,    axpby_avx2,
                               add_avx2,   attn_scores_avx2, attn_mix_avx2,
                               softmax_masked_avx2};
    return t;
}

}  // namespace diffstream::kernels

#else  // non-x86 fallback: the "avx2" table is just scalar and never selected

namespace diffstream::kernels {

const KernelTable& avx2_table() { return scalar_table(); }

}  // namespace diffstream::kernels

#endif

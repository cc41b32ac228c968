#pragma once

// Float32 compute kernels with runtime SIMD dispatch.
//
// Every kernel has a scalar reference implementation and, on x86-64, an
// AVX2+FMA variant. The active table is chosen once from CPUID; set
// DIFFSTREAM_FORCE_SCALAR=1 (or call select(scalar_table())) to pin the
// scalar path. The variants are equivalence-tested against scalar.

#include <cstdint>

namespace diffstream::kernels {

struct KernelTable {
    const char* name;
    // c[m x n] = a[m x k] * b[k x n], row major, c overwritten
    void (*gemm)(const float* a, const float* b, float* c, int m, int k, int n);
    // c[m x n] = a[m x k] * b[n x k]^T, row major, c overwritten
    void (*gemm_nt)(const float* a, const float* b, float* c, int m, int k, int n);
    // out[i] = alpha * x[i] + beta * y[i]
    void (*axpby)(int n, float alpha, const float* x, float beta, const float* y, float* out);
    // dst[i] += src[i]
    void (*add)(int n, float* dst, const float* src);
    // scores[r] = dot(q, k + r * stride, d) for r in [0, n); one query row
    // against n strided key rows
    void (*attn_scores)(const float* q, const float* k, float* scores, int n, int d, int stride);
    // out[j] = sum_r w[r] * v[r * stride + j] for j in [0, d); blends n
    // strided value rows with the given weights
    void (*attn_mix)(const float* w, const float* v, float* out, int n, int d, int stride);
    // softmax over one row restricted to allowed slots; see softmax_masked_row
    void (*softmax_masked)(float* row, const std::uint8_t* allowed, int n);
};

const KernelTable& scalar_table();
bool avx2_available();
const KernelTable& avx2_table();  // only valid to run when avx2_available()

const KernelTable& active();
void select(const KernelTable& table);  // override, mainly for tests

// Softmax over one row restricted to allowed slots; blocked slots come out
// exactly 0 on every variant, never via exp underflow. allowed == nullptr
// means all allowed. Caller guarantees at least one allowed slot. Runs
// through the active table; every attention path in a process therefore
// shares one softmax.
void softmax_masked_row(float* row, const std::uint8_t* allowed, int n);

}  // namespace diffstream::kernels

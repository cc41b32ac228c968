#include "diffstream/temporal_attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffstream/kernels.hpp"

namespace diffstream {

namespace {

void check_mask_rows(const AttentionMask& mask) {
    for (int r = 0; r < mask.rows; ++r) {
        bool any = false;
        for (int c = 0; c < mask.cols; ++c) any = any || mask.at(r, c);
        if (!any)
            throw std::domain_error("attend: fully masked row " + std::to_string(r));
    }
}

void copy_head(const float* src, float* dst, int f, int c, int head, int d) {
    for (int i = 0; i < f; ++i)
        for (int j = 0; j < d; ++j) dst[(std::size_t)i * d + j] = src[(std::size_t)i * c + head * d + j];
}

void place_head(const float* src, float* dst, int f, int c, int head, int d) {
    for (int i = 0; i < f; ++i)
        for (int j = 0; j < d; ++j) dst[(std::size_t)i * c + head * d + j] = src[(std::size_t)i * d + j];
}

}  // namespace

PositionalEncoding make_positional_encoding(int max_len, int channels) {
    if (max_len <= 0 || channels <= 0 || channels % 2 != 0)
        throw std::invalid_argument("make_positional_encoding: need max_len > 0 and even channels");
    PositionalEncoding pe;
    pe.table = Tensor({max_len, channels});
    for (int p = 0; p < max_len; ++p) {
        float* row = pe.table.ptr() + (std::size_t)p * channels;
        for (int i = 0; i < channels / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * i / channels);
            row[2 * i] = (float)std::sin(p * freq);
            row[2 * i + 1] = (float)std::cos(p * freq);
        }
    }
    return pe;
}

void validate_attention_weights(const AttentionWeights& w) {
    const int c = w.channels();
    auto square = [c](const Tensor& t) { return t.ndim() == 2 && t.dim(0) == c && t.dim(1) == c; };
    if (c <= 0 || !square(w.w_q) || !square(w.w_k) || !square(w.w_v) || !square(w.w_out))
        throw std::invalid_argument("attention weights must be four [C x C] matrices");
    if (w.head_count <= 0 || c % w.head_count != 0)
        throw std::invalid_argument("head_count must divide channels, got " +
                                    std::to_string(w.head_count) + " for C=" + std::to_string(c));
}

PeProjections precompute_pe_projections(const AttentionWeights& w, const PositionalEncoding& pe) {
    validate_attention_weights(w);
    if (pe.channels() != w.channels())
        throw std::invalid_argument("precompute_pe_projections: channel mismatch");
    return PeProjections{linear_nobias(w.w_q, pe.table), linear_nobias(w.w_k, pe.table),
                         linear_nobias(w.w_v, pe.table)};
}

Tensor attend_full(const Tensor& feat, const AttentionWeights& w, const AttentionMask& mask,
                   const PositionalEncoding& pe) {
    validate_attention_weights(w);
    const int c = w.channels();
    if (feat.ndim() != 3 || feat.dim(2) != c)
        throw std::invalid_argument("attend_full: feat must be [S x F x C]");
    const int s_count = feat.dim(0);
    const int f = feat.dim(1);
    if (mask.rows != f || mask.cols != f)
        throw std::invalid_argument("attend_full: mask must be [F x F]");
    if (pe.channels() != c || pe.max_len() < f)
        throw std::invalid_argument("attend_full: positional table too short");
    check_mask_rows(mask);

    const auto& kt = kernels::active();
    const int heads = w.head_count;
    const int d = c / heads;
    const float inv_sqrt_d = 1.0f / std::sqrt((float)d);

    Tensor out({s_count, f, c});
    std::vector<float> x((std::size_t)f * c), q(x.size()), k(x.size()), v(x.size()), o(x.size());
    std::vector<float> qh((std::size_t)f * d), kh(qh.size()), vh(qh.size()), oh(qh.size());
    std::vector<float> scores((std::size_t)f * f);

    for (int s = 0; s < s_count; ++s) {
        const float* fs = feat.ptr() + (std::size_t)s * f * c;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = fs[i];
        kt.add((int)x.size(), x.data(), pe.table.ptr());  // rows 0..F-1 of the table

        kt.gemm_nt(x.data(), w.w_q.ptr(), q.data(), f, c, c);
        kt.gemm_nt(x.data(), w.w_k.ptr(), k.data(), f, c, c);
        kt.gemm_nt(x.data(), w.w_v.ptr(), v.data(), f, c, c);

        for (int h = 0; h < heads; ++h) {
            copy_head(q.data(), qh.data(), f, c, h, d);
            copy_head(k.data(), kh.data(), f, c, h, d);
            copy_head(v.data(), vh.data(), f, c, h, d);
            kt.gemm_nt(qh.data(), kh.data(), scores.data(), f, d, f);
            for (auto& sc : scores) sc *= inv_sqrt_d;
            for (int r = 0; r < f; ++r)
                kernels::softmax_masked_row(scores.data() + (std::size_t)r * f, mask.row(r), f);
            kt.gemm(scores.data(), vh.data(), oh.data(), f, f, d);
            place_head(oh.data(), o.data(), f, c, h, d);
        }
        kt.gemm_nt(o.data(), w.w_out.ptr(), out.ptr() + (std::size_t)s * f * c, f, c, c);
    }
    return out;
}

Tensor attend_backward(const Tensor& feat, const AttentionWeights& w, const AttentionMask& mask,
                       const PositionalEncoding& pe, const Tensor& upstream) {
    validate_attention_weights(w);
    if (!feat.same_shape(upstream))
        throw std::invalid_argument("attend_backward: upstream must match feat shape");
    const int c = w.channels();
    if (feat.ndim() != 3 || feat.dim(2) != c)
        throw std::invalid_argument("attend_backward: feat must be [S x F x C]");
    const int s_count = feat.dim(0);
    const int f = feat.dim(1);
    if (mask.rows != f || mask.cols != f)
        throw std::invalid_argument("attend_backward: mask must be [F x F]");
    if (pe.channels() != c || pe.max_len() < f)
        throw std::invalid_argument("attend_backward: positional table too short");
    check_mask_rows(mask);

    const auto& kt = kernels::active();
    const int heads = w.head_count;
    const int d = c / heads;
    const float inv_sqrt_d = 1.0f / std::sqrt((float)d);

    Tensor grad({s_count, f, c});
    std::vector<float> x((std::size_t)f * c), q(x.size()), k(x.size()), v(x.size());
    std::vector<float> dq(x.size()), dk(x.size()), dv(x.size()), do_(x.size()), dx(x.size());
    std::vector<float> qh((std::size_t)f * d), kh(qh.size()), vh(qh.size());
    std::vector<float> doh(qh.size()), dqh(qh.size()), dkh(qh.size()), dvh(qh.size());
    std::vector<float> attn((std::size_t)f * f), da((std::size_t)f * f), ds((std::size_t)f * f),
        ds_t((std::size_t)f * f);

    for (int s = 0; s < s_count; ++s) {
        const float* fs = feat.ptr() + (std::size_t)s * f * c;
        const float* gs = upstream.ptr() + (std::size_t)s * f * c;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = fs[i];
        kt.add((int)x.size(), x.data(), pe.table.ptr());

        kt.gemm_nt(x.data(), w.w_q.ptr(), q.data(), f, c, c);
        kt.gemm_nt(x.data(), w.w_k.ptr(), k.data(), f, c, c);
        kt.gemm_nt(x.data(), w.w_v.ptr(), v.data(), f, c, c);

        // y = o W_out^T  =>  do = g W_out
        kt.gemm(gs, w.w_out.ptr(), do_.data(), f, c, c);

        for (int h = 0; h < heads; ++h) {
            copy_head(q.data(), qh.data(), f, c, h, d);
            copy_head(k.data(), kh.data(), f, c, h, d);
            copy_head(v.data(), vh.data(), f, c, h, d);
            copy_head(do_.data(), doh.data(), f, c, h, d);

            kt.gemm_nt(qh.data(), kh.data(), attn.data(), f, d, f);
            for (auto& sc : attn) sc *= inv_sqrt_d;
            for (int r = 0; r < f; ++r)
                kernels::softmax_masked_row(attn.data() + (std::size_t)r * f, mask.row(r), f);

            kt.gemm_nt(doh.data(), vh.data(), da.data(), f, d, f);  // da = do v^T

            // dv = attn^T do
            for (int r = 0; r < f; ++r)
                for (int j = 0; j < f; ++j) ds_t[(std::size_t)j * f + r] = attn[(std::size_t)r * f + j];
            kt.gemm(ds_t.data(), doh.data(), dvh.data(), f, f, d);

            // softmax backward per row; blocked slots hold exact zeros in attn
            // so they stay zero here too.
            for (int r = 0; r < f; ++r) {
                const float* ar = attn.data() + (std::size_t)r * f;
                const float* dar = da.data() + (std::size_t)r * f;
                float dot = 0.0f;
                for (int j = 0; j < f; ++j) dot += ar[j] * dar[j];
                float* dsr = ds.data() + (std::size_t)r * f;
                for (int j = 0; j < f; ++j) dsr[j] = ar[j] * (dar[j] - dot) * inv_sqrt_d;
            }

            kt.gemm(ds.data(), kh.data(), dqh.data(), f, f, d);  // dq = ds k
            for (int r = 0; r < f; ++r)
                for (int j = 0; j < f; ++j) ds_t[(std::size_t)j * f + r] = ds[(std::size_t)r * f + j];
            kt.gemm(ds_t.data(), qh.data(), dkh.data(), f, f, d);  // dk = ds^T q

            place_head(dqh.data(), dq.data(), f, c, h, d);
            place_head(dkh.data(), dk.data(), f, c, h, d);
            place_head(dvh.data(), dv.data(), f, c, h, d);
        }

        // x routes into all three projections: dx = dq Wq + dk Wk + dv Wv.
        kt.gemm(dq.data(), w.w_q.ptr(), dx.data(), f, c, c);
        kt.gemm(dk.data(), w.w_k.ptr(), q.data(), f, c, c);  // q reused as scratch
        kt.add((int)dx.size(), dx.data(), q.data());
        kt.gemm(dv.data(), w.w_v.ptr(), q.data(), f, c, c);
        kt.add((int)dx.size(), dx.data(), q.data());

        float* out = grad.ptr() + (std::size_t)s * f * c;
        for (std::size_t i = 0; i < dx.size(); ++i) out[i] = dx[i];
    }
    return grad;
}

}  // namespace diffstream

#include "diffstream/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

#include "diffstream/binary_io.hpp"
#include "diffstream/kernels.hpp"

namespace diffstream {

namespace {

void check_geometry(int n_steps, int spatial, int window, int channels, int warmup) {
    if (n_steps < 1 || spatial < 1 || window < 1 || channels < 1)
        throw std::invalid_argument("cache bank: extents must be positive");
    if (warmup < 1 || warmup >= window)
        throw std::invalid_argument("cache bank: need 1 <= warmup < window, got warmup=" +
                                    std::to_string(warmup) + " window=" + std::to_string(window));
}

void check_step(int step, int n_steps) {
    if (step < 0 || step >= n_steps)
        throw std::out_of_range("cache bank: step " + std::to_string(step) + " of " +
                                std::to_string(n_steps));
}

// Accepts [S x C] or [S x 1 x C]; returns S.
int single_frame_rows(const Tensor& t, int spatial, int channels, const char* what) {
    const bool ok2 = t.ndim() == 2 && t.dim(0) == spatial && t.dim(1) == channels;
    const bool ok3 =
        t.ndim() == 3 && t.dim(0) == spatial && t.dim(1) == 1 && t.dim(2) == channels;
    if (!ok2 && !ok3)
        throw std::invalid_argument(std::string(what) + ": expected [S x 1 x C] with S=" +
                                    std::to_string(spatial) + " C=" + std::to_string(channels));
    return spatial;
}

void check_warmup_block(const Tensor& t, int spatial, int warmup, int channels, const char* what) {
    if (t.ndim() != 3 || t.dim(0) != spatial || t.dim(1) != warmup || t.dim(2) != channels)
        throw std::invalid_argument(std::string(what) + ": expected [S x warmup x C]");
}

// Allowed slots of one streaming row, with their compacted positional
// indices, validated against the bank state.
struct SlotPlan {
    std::vector<int> slots;
    std::vector<int> pe_idx;
    int q_pe_idx = 0;
};

SlotPlan plan_row(std::span<const float> mask_row, int window, int warmup, bool warmup_ok,
                  int recent_count) {
    if ((int)mask_row.size() != window)
        throw std::invalid_argument("attend: mask row length " + std::to_string(mask_row.size()) +
                                    " does not match window " + std::to_string(window));
    const std::vector<int> idx = pe_index_compaction(mask_row);
    SlotPlan plan;
    for (int j = 0; j < window; ++j) {
        if (mask_row[(std::size_t)j] != 0.0f) continue;
        if (j < warmup) {
            if (!warmup_ok)
                throw std::logic_error("attend: mask allows warmup slot " + std::to_string(j) +
                                       " before write_warmup");
        } else if (window - j > recent_count) {
            throw std::logic_error("attend: mask allows recent slot " + std::to_string(j) +
                                   " with only " + std::to_string(recent_count) + " entries");
        }
        plan.slots.push_back(j);
        plan.pe_idx.push_back(idx[(std::size_t)j]);
    }
    if (mask_row[(std::size_t)window - 1] != 0.0f)
        throw std::logic_error("attend: current frame (slot window-1) must attend itself");
    plan.q_pe_idx = idx[(std::size_t)window - 1];
    return plan;
}

// Reused across calls; attention runs per frame, so fresh heap traffic per
// call would dwarf the math at this scale.
struct AttendScratch {
    std::vector<float> khat, vhat, fhat;
    std::vector<float> kcur, vcur, q;
    std::vector<float> qrow, scores, o;
};

AttendScratch& scratch() {
    static thread_local AttendScratch ws;
    return ws;
}

// One-query attention per spatial position over assembled windows
// khat/vhat [S x n x C] (positional rows already added), then W_out. Heads
// are d-contiguous column slices, so the dots read the rows in place.
void finish_single_query(const float* q, const float* khat, const float* vhat, int spatial, int n,
                         const AttentionWeights& w, const PeProjections& pe_proj, int q_pe_idx,
                         float* out) {
    const auto& kt = kernels::active();
    const int c = w.channels();
    const int heads = w.head_count;
    const int d = c / heads;
    const float inv_sqrt_d = 1.0f / std::sqrt((float)d);

    AttendScratch& ws = scratch();
    ws.qrow.resize((std::size_t)c);
    ws.scores.resize((std::size_t)n);
    ws.o.resize((std::size_t)spatial * c);

    const float* q_pe_row = pe_proj.q.ptr() + (std::size_t)q_pe_idx * c;
    for (int s = 0; s < spatial; ++s) {
        const float* qs = q + (std::size_t)s * c;
        for (int j = 0; j < c; ++j) ws.qrow[(std::size_t)j] = qs[j] + q_pe_row[j];
        const float* ks = khat + (std::size_t)s * n * c;
        const float* vs = vhat + (std::size_t)s * n * c;
        float* os = ws.o.data() + (std::size_t)s * c;
        for (int h = 0; h < heads; ++h) {
            const int off = h * d;
            kt.attn_scores(ws.qrow.data() + off, ks + off, ws.scores.data(), n, d, c);
            for (int r = 0; r < n; ++r) ws.scores[(std::size_t)r] *= inv_sqrt_d;
            kernels::softmax_masked_row(ws.scores.data(), nullptr, n);
            kt.attn_mix(ws.scores.data(), vs + off, os + off, n, d, c);
        }
    }
    kt.gemm_nt(ws.o.data(), w.w_out.ptr(), out, spatial, c, c);
}

}  // namespace

KVCacheBank allocate_bank(int n_steps, int spatial, int window, int channels, int warmup) {
    check_geometry(n_steps, spatial, window, channels, warmup);
    KVCacheBank b;
    b.k_cache = Tensor({n_steps, spatial, window, channels});
    b.v_cache = Tensor({n_steps, spatial, window, channels});
    b.n_steps = n_steps;
    b.spatial = spatial;
    b.window = window;
    b.channels = channels;
    b.warmup = warmup;
    b.warmup_written.assign((std::size_t)n_steps, 0);
    b.recent_count.assign((std::size_t)n_steps, 0);
    return b;
}

namespace {

float* step_slice(Tensor& t, int step, int spatial, int window, int channels) {
    return t.ptr() + (std::size_t)step * spatial * window * channels;
}

void write_warmup_slots(float* cache, const float* src, int spatial, int window, int warmup,
                        int channels) {
    // src is [S x warmup x C], cache slice is [S x L x C]
    for (int s = 0; s < spatial; ++s)
        std::memcpy(cache + ((std::size_t)s * window) * channels,
                    src + (std::size_t)s * warmup * channels,
                    sizeof(float) * (std::size_t)warmup * channels);
}

void roll_slots(float* cache, const float* src, int spatial, int window, int warmup, int channels) {
    for (int s = 0; s < spatial; ++s) {
        float* row = cache + (std::size_t)s * window * channels;
        std::memmove(row + (std::size_t)warmup * channels, row + (std::size_t)(warmup + 1) * channels,
                     sizeof(float) * (std::size_t)(window - warmup - 1) * channels);
        std::memcpy(row + (std::size_t)(window - 1) * channels, src + (std::size_t)s * channels,
                    sizeof(float) * (std::size_t)channels);
    }
}

template <typename Bank>
void bump_recent(Bank& bank, int step) {
    const int cap = bank.window - bank.warmup;
    auto& n = bank.recent_count[(std::size_t)step];
    n = n < cap ? n + 1 : cap;
}

void roll_raw(KVCacheBank& bank, int step, const float* k, const float* v) {
    if (!bank.warmup_written[(std::size_t)step])
        throw std::logic_error("roll_and_write: warmup must be written first at step " +
                               std::to_string(step));
    roll_slots(step_slice(bank.k_cache, step, bank.spatial, bank.window, bank.channels), k,
               bank.spatial, bank.window, bank.warmup, bank.channels);
    roll_slots(step_slice(bank.v_cache, step, bank.spatial, bank.window, bank.channels), v,
               bank.spatial, bank.window, bank.warmup, bank.channels);
    bump_recent(bank, step);
}

void roll_raw(FeatureBank& bank, int step, const float* feats) {
    if (!bank.warmup_written[(std::size_t)step])
        throw std::logic_error("roll_and_write: warmup must be written first at step " +
                               std::to_string(step));
    roll_slots(step_slice(bank.feats, step, bank.spatial, bank.window, bank.channels), feats,
               bank.spatial, bank.window, bank.warmup, bank.channels);
    bump_recent(bank, step);
}

}  // namespace

void write_warmup(KVCacheBank& bank, int step, const Tensor& k, const Tensor& v) {
    check_step(step, bank.n_steps);
    if (bank.warmup_written[(std::size_t)step])
        throw std::logic_error("write_warmup: step " + std::to_string(step) + " already written");
    check_warmup_block(k, bank.spatial, bank.warmup, bank.channels, "write_warmup k");
    check_warmup_block(v, bank.spatial, bank.warmup, bank.channels, "write_warmup v");
    write_warmup_slots(step_slice(bank.k_cache, step, bank.spatial, bank.window, bank.channels),
                       k.ptr(), bank.spatial, bank.window, bank.warmup, bank.channels);
    write_warmup_slots(step_slice(bank.v_cache, step, bank.spatial, bank.window, bank.channels),
                       v.ptr(), bank.spatial, bank.window, bank.warmup, bank.channels);
    bank.warmup_written[(std::size_t)step] = 1;
}

void roll_and_write(KVCacheBank& bank, int step, const Tensor& k, const Tensor& v) {
    check_step(step, bank.n_steps);
    single_frame_rows(k, bank.spatial, bank.channels, "roll_and_write k");
    single_frame_rows(v, bank.spatial, bank.channels, "roll_and_write v");
    roll_raw(bank, step, k.ptr(), v.ptr());
}

int occupancy(const KVCacheBank& bank, int step) {
    check_step(step, bank.n_steps);
    return bank.recent_count[(std::size_t)step];
}

void attend_streaming(KVCacheBank& bank, int step, const float* feat, float* out,
                      const AttentionWeights& w, std::span<const float> mask_row,
                      const PeProjections& pe_proj) {
    validate_attention_weights(w);
    check_step(step, bank.n_steps);
    if (w.channels() != bank.channels)
        throw std::invalid_argument("attend_streaming: channel mismatch");
    const int spatial = bank.spatial;
    const int c = bank.channels;
    const auto& kt = kernels::active();

    // Validate against the occupancy the roll below will produce, so a
    // rejected call leaves the bank untouched.
    const int after_roll =
        std::min(bank.recent_count[(std::size_t)step] + 1, bank.window - bank.warmup);
    const SlotPlan plan = plan_row(mask_row, bank.window, bank.warmup,
                                   bank.warmup_written[(std::size_t)step] != 0, after_roll);
    const int n = (int)plan.slots.size();

    AttendScratch& ws = scratch();
    ws.kcur.resize((std::size_t)spatial * c);
    ws.vcur.resize((std::size_t)spatial * c);
    ws.q.resize((std::size_t)spatial * c);
    kt.gemm_nt(feat, w.w_k.ptr(), ws.kcur.data(), spatial, c, c);
    kt.gemm_nt(feat, w.w_v.ptr(), ws.vcur.data(), spatial, c, c);
    kt.gemm_nt(feat, w.w_q.ptr(), ws.q.data(), spatial, c, c);
    roll_raw(bank, step, ws.kcur.data(), ws.vcur.data());

    ws.khat.resize((std::size_t)spatial * n * c);
    ws.vhat.resize((std::size_t)spatial * n * c);
    const float* kc = step_slice(bank.k_cache, step, spatial, bank.window, c);
    const float* vc = step_slice(bank.v_cache, step, spatial, bank.window, c);
    for (int s = 0; s < spatial; ++s) {
        for (int r = 0; r < n; ++r) {
            const int slot = plan.slots[(std::size_t)r];
            const float* kcr = kc + ((std::size_t)s * bank.window + slot) * c;
            const float* vcr = vc + ((std::size_t)s * bank.window + slot) * c;
            float* krow = ws.khat.data() + ((std::size_t)s * n + r) * c;
            float* vrow = ws.vhat.data() + ((std::size_t)s * n + r) * c;
            const float* pk = pe_proj.k.ptr() + (std::size_t)plan.pe_idx[(std::size_t)r] * c;
            const float* pv = pe_proj.v.ptr() + (std::size_t)plan.pe_idx[(std::size_t)r] * c;
            for (int j = 0; j < c; ++j) {
                krow[j] = kcr[j] + pk[j];
                vrow[j] = vcr[j] + pv[j];
            }
        }
    }
    finish_single_query(ws.q.data(), ws.khat.data(), ws.vhat.data(), spatial, n, w, pe_proj,
                        plan.q_pe_idx, out);
}

Tensor attend_streaming(KVCacheBank& bank, int step, const Tensor& feat, const AttentionWeights& w,
                        std::span<const float> mask_row, const PeProjections& pe_proj) {
    single_frame_rows(feat, bank.spatial, bank.channels, "attend_streaming feat");
    Tensor out({bank.spatial, 1, bank.channels});
    attend_streaming(bank, step, feat.ptr(), out.ptr(), w, mask_row, pe_proj);
    return out;
}

void dump_bank(const KVCacheBank& bank, const std::string& path) {
    detail::ByteWriter wr;
    wr.u32((std::uint32_t)bank.n_steps);
    wr.u32((std::uint32_t)bank.spatial);
    wr.u32((std::uint32_t)bank.window);
    wr.u32((std::uint32_t)bank.channels);
    wr.u32((std::uint32_t)bank.warmup);
    wr.f32_array(bank.k_cache.ptr(), (std::size_t)bank.k_cache.numel());
    wr.f32_array(bank.v_cache.ptr(), (std::size_t)bank.v_cache.numel());
    detail::write_file(path, wr.buf);
}

FeatureBank allocate_feature_bank(int n_steps, int spatial, int window, int channels, int warmup) {
    check_geometry(n_steps, spatial, window, channels, warmup);
    FeatureBank b;
    b.feats = Tensor({n_steps, spatial, window, channels});
    b.n_steps = n_steps;
    b.spatial = spatial;
    b.window = window;
    b.channels = channels;
    b.warmup = warmup;
    b.warmup_written.assign((std::size_t)n_steps, 0);
    b.recent_count.assign((std::size_t)n_steps, 0);
    return b;
}

void write_warmup(FeatureBank& bank, int step, const Tensor& feats) {
    check_step(step, bank.n_steps);
    if (bank.warmup_written[(std::size_t)step])
        throw std::logic_error("write_warmup: step " + std::to_string(step) + " already written");
    check_warmup_block(feats, bank.spatial, bank.warmup, bank.channels, "write_warmup feats");
    write_warmup_slots(step_slice(bank.feats, step, bank.spatial, bank.window, bank.channels),
                       feats.ptr(), bank.spatial, bank.window, bank.warmup, bank.channels);
    bank.warmup_written[(std::size_t)step] = 1;
}

void roll_and_write(FeatureBank& bank, int step, const Tensor& feats) {
    check_step(step, bank.n_steps);
    single_frame_rows(feats, bank.spatial, bank.channels, "roll_and_write feats");
    roll_raw(bank, step, feats.ptr());
}

void attend_recompute(FeatureBank& bank, int step, const float* feat, float* out,
                      const AttentionWeights& w, std::span<const float> mask_row,
                      const PeProjections& pe_proj) {
    validate_attention_weights(w);
    check_step(step, bank.n_steps);
    if (w.channels() != bank.channels)
        throw std::invalid_argument("attend_recompute: channel mismatch");
    const int spatial = bank.spatial;
    const int c = bank.channels;
    const auto& kt = kernels::active();

    const int after_roll =
        std::min(bank.recent_count[(std::size_t)step] + 1, bank.window - bank.warmup);
    const SlotPlan plan = plan_row(mask_row, bank.window, bank.warmup,
                                   bank.warmup_written[(std::size_t)step] != 0, after_roll);
    const int n = (int)plan.slots.size();

    AttendScratch& ws = scratch();
    ws.q.resize((std::size_t)spatial * c);
    kt.gemm_nt(feat, w.w_q.ptr(), ws.q.data(), spatial, c, c);
    roll_raw(bank, step, feat);

    // Reproject the whole attended window every call: this is the cost the
    // KV cache removes. One batched gemm over all spatial positions; each
    // output row is the same dot as a per-position projection would give.
    ws.fhat.resize((std::size_t)spatial * n * c);
    ws.khat.resize((std::size_t)spatial * n * c);
    ws.vhat.resize((std::size_t)spatial * n * c);
    const float* fc = step_slice(bank.feats, step, spatial, bank.window, c);
    for (int s = 0; s < spatial; ++s)
        for (int r = 0; r < n; ++r)
            std::memcpy(ws.fhat.data() + ((std::size_t)s * n + r) * c,
                        fc + ((std::size_t)s * bank.window + plan.slots[(std::size_t)r]) * c,
                        sizeof(float) * (std::size_t)c);
    kt.gemm_nt(ws.fhat.data(), w.w_k.ptr(), ws.khat.data(), spatial * n, c, c);
    kt.gemm_nt(ws.fhat.data(), w.w_v.ptr(), ws.vhat.data(), spatial * n, c, c);
    for (int s = 0; s < spatial; ++s) {
        float* ks = ws.khat.data() + (std::size_t)s * n * c;
        float* vs = ws.vhat.data() + (std::size_t)s * n * c;
        for (int r = 0; r < n; ++r) {
            float* kr = ks + (std::size_t)r * c;
            float* vr = vs + (std::size_t)r * c;
            const float* pk = pe_proj.k.ptr() + (std::size_t)plan.pe_idx[(std::size_t)r] * c;
            const float* pv = pe_proj.v.ptr() + (std::size_t)plan.pe_idx[(std::size_t)r] * c;
            for (int j = 0; j < c; ++j) {
                kr[j] += pk[j];
                vr[j] += pv[j];
            }
        }
    }
    finish_single_query(ws.q.data(), ws.khat.data(), ws.vhat.data(), spatial, n, w, pe_proj,
                        plan.q_pe_idx, out);
}

Tensor attend_recompute(FeatureBank& bank, int step, const Tensor& feat, const AttentionWeights& w,
                        std::span<const float> mask_row, const PeProjections& pe_proj) {
    single_frame_rows(feat, bank.spatial, bank.channels, "attend_recompute feat");
    Tensor out({bank.spatial, 1, bank.channels});
    attend_recompute(bank, step, feat.ptr(), out.ptr(), w, mask_row, pe_proj);
    return out;
}

}  // namespace diffstream

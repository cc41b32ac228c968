#include "diffstream/denoiser.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>

#include "diffstream/binary_io.hpp"
#include "diffstream/kernels.hpp"

namespace diffstream {

namespace {

void check_config(const DenoiserConfig& cfg) {
    if (cfg.channels < 2 || cfg.channels % 2 != 0)
        throw std::invalid_argument("denoiser: channels must be even and >= 2");
    if (cfg.heads < 1 || cfg.channels % cfg.heads != 0)
        throw std::invalid_argument("denoiser: heads must divide channels");
    if (cfg.blocks < 1) throw std::invalid_argument("denoiser: need at least one block");
    if (cfg.latent_h < 1 || cfg.latent_w < 1)
        throw std::invalid_argument("denoiser: latent grid extents must be positive");
    if (cfg.window < 2) throw std::invalid_argument("denoiser: window must be >= 2");
    if (cfg.n_train_steps < 2) throw std::invalid_argument("denoiser: n_train_steps must be >= 2");
    if (cfg.n_styles < 1 || cfg.cond_channels < 1 || cfg.adapter_hidden < 1)
        throw std::invalid_argument("denoiser: style/cond extents must be positive");
}

// [A x B x C] -> [B x A x C]
Tensor transpose_fs(const Tensor& x) {
    const int a = x.dim(0), b = x.dim(1), c = x.dim(2);
    Tensor y({b, a, c});
    for (int i = 0; i < a; ++i)
        for (int j = 0; j < b; ++j)
            std::memcpy(y.ptr() + ((std::size_t)j * a + i) * c, x.ptr() + ((std::size_t)i * b + j) * c,
                        sizeof(float) * (std::size_t)c);
    return y;
}

void scale_tensor(Tensor& t, float s) {
    for (auto& v : t.data) v *= s;
}

void check_latents(const ToyDenoiser& m, const Tensor& latents, const char* what) {
    if (latents.ndim() != 3 || latents.dim(1) != m.cfg.spatial() || latents.dim(2) != m.cfg.channels)
        throw std::invalid_argument(std::string(what) + ": latents must be [F x " +
                                    std::to_string(m.cfg.spatial()) + " x " +
                                    std::to_string(m.cfg.channels) + "]");
}

// Copies latents and adds per-frame timestep + style rows and, when present,
// the adapter's conditioning at the first block's input.
Tensor prepare_input(const ToyDenoiser& m, const Tensor& latents, std::span<const int> t_indices,
                     int style_id, const Tensor* cond) {
    const int f = latents.dim(0);
    const int s = m.cfg.spatial();
    const int c = m.cfg.channels;
    if ((int)t_indices.size() != f)
        throw std::invalid_argument("forward: need one training-step index per frame");
    for (int t : t_indices)
        if (t < 0 || t >= m.cfg.n_train_steps)
            throw std::out_of_range("forward: training-step index " + std::to_string(t));
    if (style_id < 0 || style_id >= m.cfg.n_styles)
        throw std::out_of_range("forward: style id " + std::to_string(style_id));
    if (cond && (cond->ndim() != 3 || cond->dim(0) != f || cond->dim(1) != s ||
                 cond->dim(2) != m.cfg.cond_channels))
        throw std::invalid_argument("forward: cond must be [F x S x cond_channels]");

    Tensor x = latents;
    std::vector<float> bias((std::size_t)c);
    const float* style_row = m.style_table.ptr() + (std::size_t)style_id * c;
    for (int i = 0; i < f; ++i) {
        const float* t_row = m.timestep_table.ptr() + (std::size_t)t_indices[(std::size_t)i] * c;
        for (int j = 0; j < c; ++j) bias[(std::size_t)j] = t_row[j] + style_row[j];
        float* frame = x.ptr() + (std::size_t)i * s * c;
        for (int j = 0; j < s; ++j) {
            float* row = frame + (std::size_t)j * c;
            for (int k = 0; k < c; ++k) row[k] += bias[(std::size_t)k];
        }
    }
    if (cond) {
        const Tensor adapted = m.adapter.apply(*cond);
        add_inplace(x, adapted);
    }
    return x;
}

std::int64_t count_allowed(std::span<const float> row) {
    std::int64_t n = 0;
    for (float v : row) n += v == 0.0f ? 1 : 0;
    return n;
}

}  // namespace

Tensor ConditionAdapter::apply(const Tensor& cond) const {
    Tensor h = linear_nobias(first, cond);
    for (auto& v : h.data) v = std::tanh(v);
    return linear_nobias(final_, h);
}

ToyDenoiser init_model(const DenoiserConfig& cfg, std::uint64_t seed) {
    check_config(cfg);
    ToyDenoiser m;
    m.cfg = cfg;
    RngStream rng{seed, 0};
    const float w_scale = 1.0f / std::sqrt((float)cfg.channels);

    for (int b = 0; b < cfg.blocks; ++b) {
        Tensor mixer = gaussian(rng, {cfg.channels, cfg.channels});
        scale_tensor(mixer, w_scale);
        m.mixers.push_back(std::move(mixer));

        AttentionWeights w;
        w.head_count = cfg.heads;
        for (Tensor* t : {&w.w_q, &w.w_k, &w.w_v, &w.w_out}) {
            *t = gaussian(rng, {cfg.channels, cfg.channels});
            scale_tensor(*t, w_scale);
        }
        m.attn.push_back(std::move(w));
    }

    m.pe = make_positional_encoding(cfg.window, cfg.channels);
    for (int b = 0; b < cfg.blocks; ++b)
        m.pe_proj.push_back(precompute_pe_projections(m.attn[(std::size_t)b], m.pe));

    m.timestep_table = make_positional_encoding(cfg.n_train_steps, cfg.channels).table;
    m.style_table = gaussian(rng, {cfg.n_styles, cfg.channels});
    scale_tensor(m.style_table, 0.5f);

    m.adapter.first = gaussian(rng, {cfg.adapter_hidden, cfg.cond_channels});
    scale_tensor(m.adapter.first, 1.0f / std::sqrt((float)cfg.cond_channels));
    m.adapter.final_ = Tensor({cfg.channels, cfg.adapter_hidden});
    return m;
}

StreamCaches make_stream_caches(const ToyDenoiser& m, int n_steps, int window, int warmup,
                                bool cache_kv) {
    if (window > m.pe.table.dim(0))
        throw std::invalid_argument("make_stream_caches: window exceeds the positional table");
    StreamCaches c;
    c.cache_kv = cache_kv;
    for (int b = 0; b < m.cfg.blocks; ++b) {
        if (cache_kv)
            c.kv.push_back(allocate_bank(n_steps, m.cfg.spatial(), window, m.cfg.channels, warmup));
        else
            c.feats.push_back(
                allocate_feature_bank(n_steps, m.cfg.spatial(), window, m.cfg.channels, warmup));
    }
    return c;
}

Tensor forward_masked(const ToyDenoiser& m, const Tensor& latents, std::span<const int> t_indices,
                      int style_id, const Tensor* cond, const AttentionMask& mask) {
    check_latents(m, latents, "forward_masked");
    Tensor x = prepare_input(m, latents, t_indices, style_id, cond);
    for (int b = 0; b < m.cfg.blocks; ++b) {
        x = linear_nobias(m.mixers[(std::size_t)b], x);
        Tensor xt = transpose_fs(x);
        xt = attend_full(xt, m.attn[(std::size_t)b], mask, m.pe);
        x = transpose_fs(xt);
    }
    return x;
}

Tensor forward_spatial_only(const ToyDenoiser& m, const Tensor& latents,
                            std::span<const int> t_indices, int style_id, const Tensor* cond) {
    check_latents(m, latents, "forward_spatial_only");
    Tensor x = prepare_input(m, latents, t_indices, style_id, cond);
    for (int b = 0; b < m.cfg.blocks; ++b)
        x = linear_nobias(m.mixers[(std::size_t)b], x);
    return x;
}

Tensor forward_warmup(const ToyDenoiser& m, const Tensor& latents, int t_index, int style_id,
                      const Tensor* cond, StreamCaches& caches, int step) {
    check_latents(m, latents, "forward_warmup");
    const int f = latents.dim(0);
    const std::size_t banks = caches.cache_kv ? caches.kv.size() : caches.feats.size();
    if ((int)banks != m.cfg.blocks)
        throw std::invalid_argument("forward_warmup: caches do not match the model's layer count");
    const int bank_warmup = caches.cache_kv ? caches.kv[0].warmup : caches.feats[0].warmup;
    if (f != bank_warmup)
        throw std::invalid_argument("forward_warmup: expected exactly the warmup frames");

    const AttentionMask mask = build_training_mask(MaskMode::BidirectionalChunk, f);
    const std::vector<int> t_indices((std::size_t)f, t_index);
    Tensor x = prepare_input(m, latents, t_indices, style_id, cond);
    for (int b = 0; b < m.cfg.blocks; ++b) {
        x = linear_nobias(m.mixers[(std::size_t)b], x);
        if (caches.cache_kv) {
            const auto& w = m.attn[(std::size_t)b];
            write_warmup(caches.kv[(std::size_t)b], step, transpose_fs(linear_nobias(w.w_k, x)),
                         transpose_fs(linear_nobias(w.w_v, x)));
        } else {
            write_warmup(caches.feats[(std::size_t)b], step, transpose_fs(x));
        }
        Tensor xt = transpose_fs(x);
        xt = attend_full(xt, m.attn[(std::size_t)b], mask, m.pe);
        x = transpose_fs(xt);
    }
    return x;
}

Tensor forward_streaming(const ToyDenoiser& m, const Tensor& latents,
                         std::span<const StreamRow> rows, int style_id, const Tensor* cond,
                         StreamCaches& caches, OpCounters* counters) {
    check_latents(m, latents, "forward_streaming");
    const int f = latents.dim(0);
    const int s = m.cfg.spatial();
    const int c = m.cfg.channels;
    if ((int)rows.size() != f)
        throw std::invalid_argument("forward_streaming: need one row descriptor per frame");
    const std::size_t banks = caches.cache_kv ? caches.kv.size() : caches.feats.size();
    if ((int)banks != m.cfg.blocks)
        throw std::invalid_argument("forward_streaming: caches do not match the model's layer count");

    std::vector<int> t_indices((std::size_t)f);
    for (int d = 0; d < f; ++d) t_indices[(std::size_t)d] = rows[(std::size_t)d].t_index;
    Tensor x = prepare_input(m, latents, t_indices, style_id, cond);

    for (int b = 0; b < m.cfg.blocks; ++b) {
        x = linear_nobias(m.mixers[(std::size_t)b], x);
        const auto& w = m.attn[(std::size_t)b];
        const auto& pp = m.pe_proj[(std::size_t)b];
        for (int d = 0; d < f; ++d) {
            const auto& row = rows[(std::size_t)d];
            float* frame = x.ptr() + (std::size_t)d * s * c;
            if (caches.cache_kv)
                attend_streaming(caches.kv[(std::size_t)b], row.step, frame, frame, w, row.mask_row,
                                 pp);
            else
                attend_recompute(caches.feats[(std::size_t)b], row.step, frame, frame, w,
                                 row.mask_row, pp);
            if (counters && row.count) {
                const std::int64_t n = count_allowed(row.mask_row);
                counters->kv_projection_count += caches.cache_kv ? 1 : n;
                counters->attended_slot_count += n;
                const std::int64_t c2 = (std::int64_t)c * c;
                counters->attention_flop_estimate +=
                    caches.cache_kv ? 8 * s * c2 + 4 * (std::int64_t)s * n * c
                                    : 4 * s * c2 + 4 * (std::int64_t)s * n * c2 +
                                          4 * (std::int64_t)s * n * c;
            }
        }
    }
    return x;
}

Tensor structure_map(const Tensor& frame, int out_h, int out_w) {
    if (frame.ndim() != 2 && frame.ndim() != 3)
        throw std::invalid_argument("structure_map: frame must be [H x W] or [H x W x C]");
    const int h = frame.dim(0);
    const int w = frame.dim(1);
    const int ch = frame.ndim() == 3 ? frame.dim(2) : 1;
    if (out_h < 1 || out_w < 1 || h % out_h != 0 || w % out_w != 0)
        throw std::invalid_argument("structure_map: frame extents must be multiples of the grid");

    std::vector<float> gray((std::size_t)h * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const float* px = frame.ptr() + ((std::size_t)y * w + x) * ch;
            float acc = 0.0f;
            for (int k = 0; k < ch; ++k) acc += px[k];
            gray[(std::size_t)y * w + x] = acc / (float)ch;
        }

    std::vector<float> mag((std::size_t)h * w);
    for (int y = 0; y < h; ++y) {
        const int yl = y > 0 ? y - 1 : 0;
        const int yh = y < h - 1 ? y + 1 : h - 1;
        for (int x = 0; x < w; ++x) {
            const int xl = x > 0 ? x - 1 : 0;
            const int xh = x < w - 1 ? x + 1 : w - 1;
            const float gx = 0.5f * (gray[(std::size_t)y * w + xh] - gray[(std::size_t)y * w + xl]);
            const float gy = 0.5f * (gray[(std::size_t)yh * w + x] - gray[(std::size_t)yl * w + x]);
            mag[(std::size_t)y * w + x] = std::sqrt(gx * gx + gy * gy);
        }
    }

    const int fy = h / out_h, fx = w / out_w;
    Tensor out({out_h * out_w, 1});
    for (int oy = 0; oy < out_h; ++oy)
        for (int ox = 0; ox < out_w; ++ox) {
            float acc = 0.0f;
            for (int dy = 0; dy < fy; ++dy)
                for (int dx = 0; dx < fx; ++dx)
                    acc += mag[(std::size_t)(oy * fy + dy) * w + (ox * fx + dx)];
            out.ptr()[(std::size_t)oy * out_w + ox] = acc / (float)(fy * fx);
        }
    return out;
}

// ==================== weight container ====================

namespace {

constexpr char kWeightMagic[4] = {'L', '2', 'D', 'W'};
constexpr std::uint16_t kWeightVersion = 1;

std::vector<std::pair<std::string, Tensor*>> weight_entries(ToyDenoiser& m) {
    std::vector<std::pair<std::string, Tensor*>> e;
    for (std::size_t b = 0; b < m.mixers.size(); ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        e.emplace_back(p + "mixer", &m.mixers[b]);
        e.emplace_back(p + "wq", &m.attn[b].w_q);
        e.emplace_back(p + "wk", &m.attn[b].w_k);
        e.emplace_back(p + "wv", &m.attn[b].w_v);
        e.emplace_back(p + "wout", &m.attn[b].w_out);
        e.emplace_back(p + "pe_q", &m.pe_proj[b].q);
        e.emplace_back(p + "pe_k", &m.pe_proj[b].k);
        e.emplace_back(p + "pe_v", &m.pe_proj[b].v);
    }
    e.emplace_back("pe", &m.pe.table);
    e.emplace_back("timestep", &m.timestep_table);
    e.emplace_back("style", &m.style_table);
    e.emplace_back("adapter.first", &m.adapter.first);
    e.emplace_back("adapter.final", &m.adapter.final_);
    return e;
}

}  // namespace

void save_weights(const ToyDenoiser& m, const std::string& path) {
    detail::ByteWriter wr;
    wr.magic(kWeightMagic);
    wr.u16(kWeightVersion);
    const auto& c = m.cfg;
    for (int v : {c.channels, c.heads, c.blocks, c.latent_h, c.latent_w, c.window, c.n_train_steps,
                  c.n_styles, c.cond_channels, c.adapter_hidden})
        wr.u32((std::uint32_t)v);

    auto entries = weight_entries(const_cast<ToyDenoiser&>(m));
    wr.u32((std::uint32_t)entries.size());
    for (const auto& [name, t] : entries) {
        wr.u16((std::uint16_t)name.size());
        wr.buf.append(name);
        wr.u16((std::uint16_t)t->ndim());
        for (int d : t->shape) wr.u32((std::uint32_t)d);
    }
    for (const auto& [name, t] : entries) wr.f32_array(t->ptr(), (std::size_t)t->numel());
    detail::write_file(path, wr.buf);
}

ToyDenoiser load_weights(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader rd{bytes, "weights"};
    rd.magic(kWeightMagic);
    const auto version = rd.u16("version");
    if (version != kWeightVersion)
        throw std::runtime_error("weights: unsupported version " + std::to_string(version) +
                                 " at offset 4");

    DenoiserConfig cfg;
    for (int* v : {&cfg.channels, &cfg.heads, &cfg.blocks, &cfg.latent_h, &cfg.latent_w, &cfg.window,
                   &cfg.n_train_steps, &cfg.n_styles, &cfg.cond_channels, &cfg.adapter_hidden})
        *v = (int)rd.u32("config");
    check_config(cfg);

    ToyDenoiser m;
    m.cfg = cfg;
    m.mixers.resize((std::size_t)cfg.blocks);
    m.attn.resize((std::size_t)cfg.blocks);
    for (auto& w : m.attn) w.head_count = cfg.heads;
    m.pe_proj.resize((std::size_t)cfg.blocks);

    auto entries = weight_entries(m);
    const auto n_entries = rd.u32("entry count");
    if (n_entries != entries.size())
        throw std::runtime_error("weights: expected " + std::to_string(entries.size()) +
                                 " entries, found " + std::to_string(n_entries));
    for (auto& [name, t] : entries) {
        const auto name_len = rd.u16("name length");
        rd.need(name_len, "name");
        const std::string found(bytes.data() + rd.off, name_len);
        rd.off += name_len;
        if (found != name)
            throw std::runtime_error("weights: expected entry '" + name + "', found '" + found + "'");
        const auto ndim = rd.u16("rank");
        std::vector<int> shape;
        for (int i = 0; i < (int)ndim; ++i) shape.push_back((int)rd.u32("extent"));
        *t = Tensor(std::move(shape));
    }
    for (auto& [name, t] : entries)
        rd.f32_array(t->ptr(), (std::size_t)t->numel(), name.c_str());
    rd.done();
    return m;
}

}  // namespace diffstream

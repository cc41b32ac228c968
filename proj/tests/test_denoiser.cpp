#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

#include "diffstream/binary_io.hpp"
#include "diffstream/denoiser.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace diffstream;
using support::tiny_config;
using support::tiny_model;

namespace {

float model_diff(const ToyDenoiser& a, const ToyDenoiser& b) {
    float m = 0.0f;
    for (std::size_t i = 0; i < a.mixers.size(); ++i) {
        m = std::max(m, max_abs_diff(a.mixers[i], b.mixers[i]));
        m = std::max(m, max_abs_diff(a.attn[i].w_q, b.attn[i].w_q));
        m = std::max(m, max_abs_diff(a.attn[i].w_k, b.attn[i].w_k));
        m = std::max(m, max_abs_diff(a.attn[i].w_v, b.attn[i].w_v));
        m = std::max(m, max_abs_diff(a.attn[i].w_out, b.attn[i].w_out));
        m = std::max(m, max_abs_diff(a.pe_proj[i].q, b.pe_proj[i].q));
    }
    m = std::max(m, max_abs_diff(a.pe.table, b.pe.table));
    m = std::max(m, max_abs_diff(a.timestep_table, b.timestep_table));
    m = std::max(m, max_abs_diff(a.style_table, b.style_table));
    m = std::max(m, max_abs_diff(a.adapter.first, b.adapter.first));
    m = std::max(m, max_abs_diff(a.adapter.final_, b.adapter.final_));
    return m;
}

}  // namespace

TEST_CASE("model init is a pure function of the seed") {
    const ToyDenoiser a = tiny_model(11);
    const ToyDenoiser b = tiny_model(11);
    CHECK(model_diff(a, b) == 0.0f);
    const ToyDenoiser c = tiny_model(12);
    CHECK(model_diff(a, c) > 0.0f);
    CHECK(a.pe.table.dim(0) == a.cfg.window);
    CHECK(a.timestep_table.dim(0) == a.cfg.n_train_steps);
}

TEST_CASE("config validation rejects inconsistent geometry") {
    DenoiserConfig cfg = tiny_config();
    cfg.channels = 7;
    CHECK_THROWS_AS(init_model(cfg, 1), std::invalid_argument);
    cfg = tiny_config();
    cfg.heads = 3;
    CHECK_THROWS_AS(init_model(cfg, 1), std::invalid_argument);
    cfg = tiny_config();
    cfg.window = 1;
    CHECK_THROWS_AS(init_model(cfg, 1), std::invalid_argument);
    cfg = tiny_config();
    cfg.n_train_steps = 1;
    CHECK_THROWS_AS(init_model(cfg, 1), std::invalid_argument);
    cfg = tiny_config();
    cfg.blocks = 0;
    CHECK_THROWS_AS(init_model(cfg, 1), std::invalid_argument);
}

TEST_CASE("a fresh adapter is exactly inert") {
    const ToyDenoiser m = tiny_model();
    RngStream rng{50, 0};
    const Tensor latents = gaussian(rng, {3, m.cfg.spatial(), m.cfg.channels});
    const Tensor cond = gaussian(rng, {3, m.cfg.spatial(), m.cfg.cond_channels});
    const std::vector<int> t(3, 9);
    const AttentionMask mask = build_training_mask(MaskMode::BidirectionalChunk, 3);

    const Tensor adapted = m.adapter.apply(cond);
    for (float v : adapted.data) CHECK(v == 0.0f);

    const Tensor with = forward_masked(m, latents, t, 0, &cond, mask);
    const Tensor without = forward_masked(m, latents, t, 0, nullptr, mask);
    CHECK(max_abs_diff(with, without) == 0.0f);

    // One nonzero weight in the final stage and conditioning flows through.
    ToyDenoiser poked = tiny_model();
    poked.adapter.final_.ptr()[0] = 0.1f;
    const Tensor active = forward_masked(poked, latents, t, 0, &cond, mask);
    CHECK(max_abs_diff(active, without) > 0.0f);
}

TEST_CASE("timestep and style embeddings steer the output") {
    const ToyDenoiser m = tiny_model();
    RngStream rng{51, 0};
    const Tensor latents = gaussian(rng, {2, m.cfg.spatial(), m.cfg.channels});
    const AttentionMask mask = build_training_mask(MaskMode::BidirectionalChunk, 2);
    const std::vector<int> t0(2, 0), t1(2, 30);

    const Tensor a = forward_masked(m, latents, t0, 0, nullptr, mask);
    const Tensor b = forward_masked(m, latents, t1, 0, nullptr, mask);
    CHECK(max_abs_diff(a, b) > 0.0f);
    const Tensor c = forward_masked(m, latents, t0, 2, nullptr, mask);
    CHECK(max_abs_diff(a, c) > 0.0f);

    CHECK_THROWS_AS(forward_masked(m, latents, std::vector<int>{0, 50}, 0, nullptr, mask),
                    std::out_of_range);
    CHECK_THROWS_AS(forward_masked(m, latents, t0, 4, nullptr, mask), std::out_of_range);
    CHECK_THROWS_AS(forward_masked(m, latents, std::vector<int>{0}, 0, nullptr, mask),
                    std::invalid_argument);
}

TEST_CASE("warmup forward equals the batch forward it caches for") {
    const ToyDenoiser m = tiny_model();
    const int w = 2;
    RngStream rng{52, 0};
    const Tensor latents = gaussian(rng, {w, m.cfg.spatial(), m.cfg.channels});
    const Tensor cond = gaussian(rng, {w, m.cfg.spatial(), m.cfg.cond_channels});

    StreamCaches caches = make_stream_caches(m, 2, 8, w, true);
    const Tensor got = forward_warmup(m, latents, 9, 1, &cond, caches, 0);
    const AttentionMask mask = build_training_mask(MaskMode::BidirectionalChunk, w);
    const Tensor want = forward_masked(m, latents, std::vector<int>(w, 9), 1, &cond, mask);
    CHECK(max_abs_diff(got, want) == 0.0f);

    // Both layers' banks were seeded.
    CHECK(caches.kv[0].warmup_written[0] == 1);
    CHECK(caches.kv[1].warmup_written[0] == 1);
    CHECK(caches.kv[0].warmup_written[1] == 0);

    CHECK_THROWS_AS(
        forward_warmup(m, gaussian(rng, {w + 1, m.cfg.spatial(), m.cfg.channels}), 9, 1, nullptr,
                       caches, 1),
        std::invalid_argument);
}

TEST_CASE("frame-by-frame streaming tracks the batch forward before eviction") {
    const ToyDenoiser m = tiny_model();
    const int w = 2, total = 8;  // window is 8: no eviction happens yet
    RngStream rng{53, 0};
    const Tensor latents = gaussian(rng, {total, m.cfg.spatial(), m.cfg.channels});
    const int t = 17, style = 1;

    const AttentionMask mask = build_training_mask(MaskMode::UnidirectionalWarmup, total, w);
    const Tensor batch = forward_masked(m, latents, std::vector<int>(total, t), style, nullptr, mask);

    StreamCaches caches = make_stream_caches(m, 1, 8, w, true);
    Tensor warm({w, m.cfg.spatial(), m.cfg.channels});
    std::copy(latents.data.begin(), latents.data.begin() + warm.numel(), warm.data.begin());
    forward_warmup(m, warm, t, style, nullptr, caches, 0);

    const int s = m.cfg.spatial(), c = m.cfg.channels;
    for (int i = w; i < total; ++i) {
        Tensor frame({1, s, c});
        std::copy(latents.data.begin() + (std::size_t)i * s * c,
                  latents.data.begin() + (std::size_t)(i + 1) * s * c, frame.data.begin());
        StreamRow row;
        row.t_index = t;
        row.step = 0;
        row.mask_row = streaming_row_mask(i, 8, w);
        const Tensor out = forward_streaming(m, frame, {&row, 1}, style, nullptr, caches, nullptr);
        float worst = 0.0f;
        for (int e = 0; e < s * c; ++e)
            worst = std::max(worst, std::fabs(out.data[(std::size_t)e] -
                                              batch.data[(std::size_t)i * s * c + e]));
        CHECK(worst <= 1e-5f);
    }
}

TEST_CASE("work counters attribute projections to real frames only") {
    const ToyDenoiser m = tiny_model();
    const int s = m.cfg.spatial(), c = m.cfg.channels;
    RngStream rng{54, 0};

    auto run = [&](bool cached, bool second_counts) {
        StreamCaches caches = make_stream_caches(m, 2, 8, 2, cached);
        Tensor warm = gaussian(rng, {2, s, c});
        forward_warmup(m, warm, 9, 0, nullptr, caches, 0);
        forward_warmup(m, warm, 5, 0, nullptr, caches, 1);
        Tensor batch = gaussian(rng, {2, s, c});
        std::vector<StreamRow> rows(2);
        rows[0] = {9, 0, streaming_row_mask(2, 8, 2), true};
        rows[1] = {5, 1, streaming_row_mask(2, 8, 2), second_counts};
        OpCounters ctr;
        forward_streaming(m, batch, rows, 0, nullptr, caches, &ctr);
        return ctr;
    };

    // 3 attended slots per row (2 warmup + itself), 2 rows, 2 blocks.
    const OpCounters cached = run(true, true);
    CHECK(cached.kv_projection_count == 4);     // one projected frame per row and block
    CHECK(cached.attended_slot_count == 12);    // 3 slots * 2 rows * 2 blocks
    CHECK(cached.denoiser_calls == 0);          // callers count calls, not the forward

    const OpCounters nocache = run(false, true);
    CHECK(nocache.kv_projection_count == 12);   // every attended slot reprojected
    CHECK(nocache.attended_slot_count == 12);

    const OpCounters partial = run(true, false);
    CHECK(partial.kv_projection_count == 2);    // the uncounted row vanishes
    CHECK(partial.attended_slot_count == 6);
}

TEST_CASE("spatial-only forward treats frames independently") {
    const ToyDenoiser m = tiny_model();
    const int s = m.cfg.spatial(), c = m.cfg.channels;
    RngStream rng{55, 0};
    const Tensor latents = gaussian(rng, {2, s, c});
    const std::vector<int> t{3, 40};

    const Tensor both = forward_spatial_only(m, latents, t, 1, nullptr);
    for (int i = 0; i < 2; ++i) {
        Tensor one({1, s, c});
        std::copy(latents.data.begin() + (std::size_t)i * s * c,
                  latents.data.begin() + (std::size_t)(i + 1) * s * c, one.data.begin());
        const Tensor lone =
            forward_spatial_only(m, one, std::vector<int>{t[(std::size_t)i]}, 1, nullptr);
        for (int e = 0; e < s * c; ++e)
            CHECK(lone.data[(std::size_t)e] == both.data[(std::size_t)i * s * c + e]);
    }
}

TEST_CASE("structure_map measures gradient magnitude on the latent grid") {
    Tensor frame({2, 2, 1});
    frame.ptr()[0] = 0.0f;
    frame.ptr()[1] = 1.0f;
    frame.ptr()[2] = 0.0f;
    frame.ptr()[3] = 1.0f;
    // Every pixel sees gx = 0.5 * (1 - 0), gy = 0.
    const Tensor full = structure_map(frame, 2, 2);
    REQUIRE(full.shape == std::vector<int>{4, 1});
    for (int i = 0; i < 4; ++i) CHECK(full.ptr()[i] == doctest::Approx(0.5f));
    const Tensor pooled = structure_map(frame, 1, 1);
    CHECK(pooled.ptr()[0] == doctest::Approx(0.5f));

    const Tensor flat = structure_map(Tensor({4, 4}), 2, 2);
    for (int i = 0; i < 4; ++i) CHECK(flat.ptr()[i] == 0.0f);

    CHECK_THROWS_AS(structure_map(Tensor({8}), 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(structure_map(frame, 3, 1), std::invalid_argument);
}

TEST_CASE("weights round-trip bit-exactly through the container") {
    const ToyDenoiser m = tiny_model(77);
    const char* path = "test_weights.bin";
    save_weights(m, path);
    const ToyDenoiser back = load_weights(path);
    CHECK(model_diff(m, back) == 0.0f);
    CHECK(back.cfg.channels == m.cfg.channels);
    CHECK(back.cfg.window == m.cfg.window);
    CHECK(back.attn[0].head_count == m.cfg.heads);

    std::string bytes = detail::read_file(path);
    SUBCASE("corrupt magic") {
        bytes[0] = 'X';
        detail::write_file(path, bytes);
        CHECK_THROWS_AS(load_weights(path), std::runtime_error);
    }
    SUBCASE("unsupported version") {
        bytes[4] = 9;
        detail::write_file(path, bytes);
        CHECK_THROWS_AS(load_weights(path), std::runtime_error);
    }
    SUBCASE("truncated payload") {
        detail::write_file(path, bytes.substr(0, bytes.size() - 5));
        CHECK_THROWS_AS(load_weights(path), std::runtime_error);
    }
    SUBCASE("trailing garbage") {
        detail::write_file(path, bytes + "zz");
        CHECK_THROWS_AS(load_weights(path), std::runtime_error);
    }
    std::remove(path);
}

TEST_CASE("stream caches mirror the model layout") {
    const ToyDenoiser m = tiny_model();
    const StreamCaches kv = make_stream_caches(m, 3, 6, 2, true);
    CHECK(kv.kv.size() == 2);
    CHECK(kv.feats.empty());
    CHECK(kv.kv[0].window == 6);
    CHECK(kv.kv[0].n_steps == 3);

    const StreamCaches fb = make_stream_caches(m, 3, 6, 2, false);
    CHECK(fb.feats.size() == 2);
    CHECK(fb.kv.empty());

    // The bank window may shrink below the model's but not exceed its
    // positional table.
    CHECK_THROWS_AS(make_stream_caches(m, 3, 9, 2, true), std::invalid_argument);

    StreamCaches broken = make_stream_caches(m, 1, 6, 2, true);
    broken.kv.pop_back();
    RngStream rng{66, 0};
    Tensor warm = gaussian(rng, {2, m.cfg.spatial(), m.cfg.channels});
    CHECK_THROWS_AS(forward_warmup(m, warm, 0, 0, nullptr, broken, 0), std::invalid_argument);
}

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <vector>

#include "diffstream/binary_io.hpp"
#include "diffstream/kv_cache.hpp"
#include "diffstream/temporal_attention.hpp"
#include "doctest.h"

using namespace diffstream;

namespace {

constexpr float kB = kMaskBlocked;

AttentionWeights random_weights(int c, int heads, std::uint64_t seed) {
    RngStream rng{seed, 0};
    AttentionWeights w;
    w.head_count = heads;
    const float scale = 1.0f / std::sqrt((float)c);
    for (Tensor* t : {&w.w_q, &w.w_k, &w.w_v, &w.w_out}) {
        *t = gaussian(rng, {c, c});
        for (auto& v : t->data) v *= scale;
    }
    return w;
}

// Gathers per-frame features [S x 1 x C] into one [S x n x C] window tensor.
Tensor gather_window(const std::vector<Tensor>& frames, const std::vector<int>& pick, int s,
                     int c) {
    const int n = (int)pick.size();
    Tensor out({s, n, c});
    for (int sp = 0; sp < s; ++sp)
        for (int r = 0; r < n; ++r)
            for (int ch = 0; ch < c; ++ch)
                out.ptr()[((std::size_t)sp * n + r) * c + ch] =
                    frames[(std::size_t)pick[(std::size_t)r]].ptr()[(std::size_t)sp * c + ch];
    return out;
}

struct StreamFixture {
    int s = 2, c = 8, window = 6, warmup = 2, heads = 2;
    AttentionWeights w = random_weights(8, 2, 21);
    PositionalEncoding pe = make_positional_encoding(6, 8);
    PeProjections proj = precompute_pe_projections(w, pe);

    Tensor warmup_block(const std::vector<Tensor>& frames, const Tensor& weight) const {
        std::vector<int> pick;
        for (int i = 0; i < warmup; ++i) pick.push_back(i);
        return linear_nobias(weight, gather_window(frames, pick, s, c));
    }

    // The attended frame set of `frame_index`, in slot order.
    std::vector<int> window_frames(long frame_index) const {
        std::vector<int> pick;
        for (int i = 0; i < warmup; ++i) pick.push_back(i);
        const long lo = std::max((long)warmup, frame_index - (window - warmup) + 1);
        for (long i = lo; i <= frame_index; ++i) pick.push_back((int)i);
        return pick;
    }
};

}  // namespace

TEST_CASE("bank allocation validates its geometry") {
    CHECK_NOTHROW(allocate_bank(2, 4, 8, 16, 4));
    CHECK_THROWS_AS(allocate_bank(0, 4, 8, 16, 4), std::invalid_argument);
    CHECK_THROWS_AS(allocate_bank(2, 4, 8, 16, 0), std::invalid_argument);
    CHECK_THROWS_AS(allocate_bank(2, 4, 8, 16, 8), std::invalid_argument);
    const KVCacheBank b = allocate_bank(3, 4, 8, 16, 4);
    CHECK(b.k_cache.shape == std::vector<int>{3, 4, 8, 16});
    CHECK(occupancy(b, 2) == 0);
    CHECK_THROWS_AS(occupancy(b, 3), std::out_of_range);
}

TEST_CASE("warmup writes land in the pinned slots once") {
    const int s = 2, window = 5, c = 4, warmup = 2;
    KVCacheBank bank = allocate_bank(1, s, window, c, warmup);
    RngStream rng{1, 0};
    const Tensor k = gaussian(rng, {s, warmup, c});
    const Tensor v = gaussian(rng, {s, warmup, c});
    write_warmup(bank, 0, k, v);

    for (int sp = 0; sp < s; ++sp)
        for (int f = 0; f < warmup; ++f)
            for (int ch = 0; ch < c; ++ch)
                CHECK(bank.k_cache.ptr()[((std::size_t)sp * window + f) * c + ch] ==
                      k.ptr()[((std::size_t)sp * warmup + f) * c + ch]);

    CHECK_THROWS_AS(write_warmup(bank, 0, k, v), std::logic_error);
    KVCacheBank other = allocate_bank(1, s, window, c, warmup);
    CHECK_THROWS_AS(write_warmup(other, 0, gaussian(rng, {s, warmup + 1, c}), v),
                    std::invalid_argument);
}

TEST_CASE("rolls shift the recent region left and keep warmup pinned") {
    const int s = 1, window = 5, c = 2, warmup = 2;
    KVCacheBank bank = allocate_bank(1, s, window, c, warmup);
    Tensor k({s, warmup, c}), v({s, warmup, c});
    for (int i = 0; i < warmup * c; ++i) k.ptr()[i] = 100.0f + (float)i;
    CHECK_THROWS_AS(roll_and_write(bank, 0, Tensor({s, 1, c}), Tensor({s, 1, c})),
                    std::logic_error);
    write_warmup(bank, 0, k, v);

    auto wrote = [&](float tag) {
        Tensor kf({s, 1, c}), vf({s, 1, c});
        kf.ptr()[0] = tag;
        kf.ptr()[1] = tag + 0.5f;
        roll_and_write(bank, 0, kf, vf);
    };
    wrote(1.0f);
    wrote(2.0f);
    wrote(3.0f);
    wrote(4.0f);  // recent capacity is 3, so the first entry falls out

    const float* row = bank.k_cache.ptr();
    CHECK(row[0 * c] == 100.0f);  // warmup untouched
    CHECK(row[1 * c] == 102.0f);
    CHECK(row[2 * c] == 2.0f);  // oldest surviving roll
    CHECK(row[3 * c] == 3.0f);
    CHECK(row[4 * c] == 4.0f);  // newest always in the last slot
    CHECK(occupancy(bank, 0) == 3);
}

TEST_CASE("occupancy saturates per step and steps stay isolated") {
    const int s = 1, window = 4, c = 2, warmup = 1;
    KVCacheBank bank = allocate_bank(2, s, window, c, warmup);
    RngStream rng{2, 0};
    write_warmup(bank, 0, gaussian(rng, {s, warmup, c}), gaussian(rng, {s, warmup, c}));
    write_warmup(bank, 1, gaussian(rng, {s, warmup, c}), gaussian(rng, {s, warmup, c}));
    const Tensor snapshot = bank.k_cache;

    for (int i = 0; i < 5; ++i)
        roll_and_write(bank, 0, gaussian(rng, {s, 1, c}), gaussian(rng, {s, 1, c}));
    CHECK(occupancy(bank, 0) == 3);
    CHECK(occupancy(bank, 1) == 0);

    // Step 1's slice of the cache is bit-identical to before the rolls.
    const std::size_t slice = (std::size_t)s * window * c;
    for (std::size_t i = 0; i < slice; ++i)
        CHECK(bank.k_cache.data[slice + i] == snapshot.data[slice + i]);
}

TEST_CASE("attend_streaming rejects malformed or premature masks") {
    StreamFixture fx;
    KVCacheBank bank = allocate_bank(1, fx.s, fx.window, fx.c, fx.warmup);
    RngStream rng{3, 0};
    const Tensor feat = gaussian(rng, {fx.s, 1, fx.c});

    // Warmup slots allowed before write_warmup.
    std::vector<float> row((std::size_t)fx.window, kB);
    row[0] = row[1] = 0.0f;
    row[(std::size_t)fx.window - 1] = 0.0f;
    KVCacheBank fresh = allocate_bank(1, fx.s, fx.window, fx.c, fx.warmup);
    CHECK_THROWS_AS(attend_streaming(fresh, 0, feat, fx.w, row, fx.proj), std::logic_error);

    write_warmup(bank, 0, gaussian(rng, {fx.s, fx.warmup, fx.c}),
                 gaussian(rng, {fx.s, fx.warmup, fx.c}));

    // Wrong row length.
    CHECK_THROWS_AS(
        attend_streaming(bank, 0, feat, fx.w, std::vector<float>{0.0f, 0.0f}, fx.proj),
        std::invalid_argument);

    // Claiming two recent slots when only this frame has rolled in.
    std::vector<float> greedy((std::size_t)fx.window, kB);
    greedy[0] = greedy[1] = 0.0f;
    greedy[(std::size_t)fx.window - 2] = greedy[(std::size_t)fx.window - 1] = 0.0f;
    CHECK_THROWS_AS(attend_streaming(bank, 0, feat, fx.w, greedy, fx.proj), std::logic_error);

    // The current frame's slot must be allowed.
    std::vector<float> noself((std::size_t)fx.window, kB);
    noself[0] = noself[1] = 0.0f;
    CHECK_THROWS_AS(attend_streaming(bank, 0, feat, fx.w, noself, fx.proj), std::logic_error);
}

TEST_CASE("streaming attention equals a from-scratch window oracle") {
    StreamFixture fx;
    const int total = 12;
    RngStream rng{4, 0};
    std::vector<Tensor> frames;
    for (int i = 0; i < total; ++i) frames.push_back(gaussian(rng, {fx.s, 1, fx.c}));

    KVCacheBank bank = allocate_bank(1, fx.s, fx.window, fx.c, fx.warmup);
    write_warmup(bank, 0, fx.warmup_block(frames, fx.w.w_k), fx.warmup_block(frames, fx.w.w_v));

    for (int i = fx.warmup; i < total; ++i) {
        const auto row = streaming_row_mask(i, fx.window, fx.warmup);
        const Tensor got = attend_streaming(bank, 0, frames[(std::size_t)i], fx.w, row, fx.proj);

        const auto pick = fx.window_frames(i);
        const Tensor wf = gather_window(frames, pick, fx.s, fx.c);
        const AttentionMask all = make_mask((int)pick.size(), (int)pick.size(), true);
        const Tensor full = attend_full(wf, fx.w, all, fx.pe);

        const int n = (int)pick.size();
        float worst = 0.0f;
        for (int sp = 0; sp < fx.s; ++sp)
            for (int ch = 0; ch < fx.c; ++ch)
                worst = std::max(worst,
                                 std::fabs(got.ptr()[(std::size_t)sp * fx.c + ch] -
                                           full.ptr()[((std::size_t)sp * n + n - 1) * fx.c + ch]));
        CHECK(worst <= 1e-5f);
    }
}

TEST_CASE("cached and recomputed attention agree bitwise") {
    StreamFixture fx;
    const int total = 14;
    RngStream rng{5, 0};
    std::vector<Tensor> frames;
    for (int i = 0; i < total; ++i) frames.push_back(gaussian(rng, {fx.s, 1, fx.c}));

    KVCacheBank kv = allocate_bank(1, fx.s, fx.window, fx.c, fx.warmup);
    write_warmup(kv, 0, fx.warmup_block(frames, fx.w.w_k), fx.warmup_block(frames, fx.w.w_v));

    FeatureBank fb = allocate_feature_bank(1, fx.s, fx.window, fx.c, fx.warmup);
    std::vector<int> pick;
    for (int i = 0; i < fx.warmup; ++i) pick.push_back(i);
    write_warmup(fb, 0, gather_window(frames, pick, fx.s, fx.c));

    for (int i = fx.warmup; i < total; ++i) {
        const auto row = streaming_row_mask(i, fx.window, fx.warmup);
        const Tensor a = attend_streaming(kv, 0, frames[(std::size_t)i], fx.w, row, fx.proj);
        const Tensor b = attend_recompute(fb, 0, frames[(std::size_t)i], fx.w, row, fx.proj);
        CHECK(max_abs_diff(a, b) == 0.0f);
    }
}

TEST_CASE("in-place attention matches the allocating form bitwise") {
    StreamFixture fx;
    RngStream rng{6, 0};
    std::vector<Tensor> frames;
    for (int i = 0; i < 6; ++i) frames.push_back(gaussian(rng, {fx.s, 1, fx.c}));

    KVCacheBank a = allocate_bank(1, fx.s, fx.window, fx.c, fx.warmup);
    KVCacheBank b = allocate_bank(1, fx.s, fx.window, fx.c, fx.warmup);
    write_warmup(a, 0, fx.warmup_block(frames, fx.w.w_k), fx.warmup_block(frames, fx.w.w_v));
    write_warmup(b, 0, fx.warmup_block(frames, fx.w.w_k), fx.warmup_block(frames, fx.w.w_v));

    for (int i = fx.warmup; i < 6; ++i) {
        const auto row = streaming_row_mask(i, fx.window, fx.warmup);
        const Tensor want = attend_streaming(a, 0, frames[(std::size_t)i], fx.w, row, fx.proj);
        Tensor buf = frames[(std::size_t)i];  // output aliases the input
        attend_streaming(b, 0, buf.ptr(), buf.ptr(), fx.w, row, fx.proj);
        CHECK(max_abs_diff(want, buf) == 0.0f);
    }
}

TEST_CASE("bank dumps serialize the geometry header and both caches") {
    KVCacheBank bank = allocate_bank(2, 3, 4, 2, 1);
    RngStream rng{7, 0};
    write_warmup(bank, 0, gaussian(rng, {3, 1, 2}), gaussian(rng, {3, 1, 2}));
    const char* path = "test_bank_dump.bin";
    dump_bank(bank, path);

    const std::string bytes = detail::read_file(path);
    detail::ByteReader rd{bytes, "bank dump"};
    CHECK(rd.u32("n_steps") == 2);
    CHECK(rd.u32("spatial") == 3);
    CHECK(rd.u32("window") == 4);
    CHECK(rd.u32("channels") == 2);
    CHECK(rd.u32("warmup") == 1);
    std::vector<float> k((std::size_t)bank.k_cache.numel());
    std::vector<float> v((std::size_t)bank.v_cache.numel());
    rd.f32_array(k.data(), k.size(), "k");
    rd.f32_array(v.data(), v.size(), "v");
    rd.done();
    for (std::size_t i = 0; i < k.size(); ++i) CHECK(k[i] == bank.k_cache.data[i]);
    std::remove(path);
}

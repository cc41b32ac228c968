#include <algorithm>
#include <cstdio>
#include <stdexcept>
#include <string>

#include "diffstream/binary_io.hpp"
#include "diffstream/frame_io.hpp"
#include "doctest.h"

using namespace diffstream;

namespace {

float clip_diff(const FrameClip& a, const FrameClip& b) {
    REQUIRE(a.frames.size() == b.frames.size());
    float m = 0.0f;
    for (std::size_t i = 0; i < a.frames.size(); ++i)
        m = std::max(m, max_abs_diff(a.frames[i], b.frames[i]));
    return m;
}

}  // namespace

TEST_CASE("source names round-trip") {
    for (SourceKind kind : {SourceKind::MovingBar, SourceKind::DriftingSine, SourceKind::Static,
                            SourceKind::RandomWalk})
        CHECK(parse_source(source_name(kind)) == kind);
    CHECK_THROWS_AS(parse_source("webcam"), std::invalid_argument);
}

TEST_CASE("synthetic sources are deterministic and in range") {
    for (SourceKind kind : {SourceKind::MovingBar, SourceKind::DriftingSine, SourceKind::Static,
                            SourceKind::RandomWalk}) {
        const FrameClip a = synthetic_source(kind, 6, 4, 8, 5);
        const FrameClip b = synthetic_source(kind, 6, 4, 8, 5);
        CHECK(clip_diff(a, b) == 0.0f);
        CHECK(a.channels == 1);
        CHECK((int)a.frames.size() == 6);
        CHECK(a.frames[0].shape == std::vector<int>{4, 8, 1});
        for (const auto& f : a.frames)
            for (float v : f.data) {
                CHECK(v >= 0.0f);
                CHECK(v <= 1.0f);
            }
    }
    CHECK_THROWS_AS(synthetic_source(SourceKind::Static, 0, 4, 4, 1), std::invalid_argument);
}

TEST_CASE("the static source freezes, the bar wraps, the walk moves") {
    const FrameClip still = synthetic_source(SourceKind::Static, 5, 4, 4, 9);
    for (std::size_t f = 1; f < still.frames.size(); ++f)
        CHECK(max_abs_diff(still.frames[0], still.frames[f]) == 0.0f);

    const FrameClip bar = synthetic_source(SourceKind::MovingBar, 10, 2, 8, 0);
    CHECK(max_abs_diff(bar.frames[0], bar.frames[8]) == 0.0f);  // period = width
    CHECK(max_abs_diff(bar.frames[0], bar.frames[1]) > 0.0f);
    // Frame 0: a two-pixel bar sits at the left edge.
    CHECK(bar.frames[0].ptr()[0] == 1.0f);
    CHECK(bar.frames[0].ptr()[1] == 1.0f);
    CHECK(bar.frames[0].ptr()[2] == 0.05f);

    const FrameClip walk = synthetic_source(SourceKind::RandomWalk, 3, 4, 4, 9);
    CHECK(max_abs_diff(walk.frames[0], walk.frames[1]) > 0.0f);
}

TEST_CASE("clips survive the container round trip bit for bit") {
    const FrameClip clip = synthetic_source(SourceKind::DriftingSine, 4, 3, 5, 2);
    const char* path = "test_clip.l2df";
    save_frames(path, clip);
    const FrameClip back = load_frames(path);
    CHECK(back.width == 5);
    CHECK(back.height == 3);
    CHECK(back.channels == 1);
    CHECK(clip_diff(clip, back) == 0.0f);

    std::string bytes = detail::read_file(path);
    SUBCASE("corrupt magic") {
        bytes[0] = 'X';
        detail::write_file(path, bytes);
        CHECK_THROWS_AS(load_frames(path), std::runtime_error);
    }
    SUBCASE("unsupported version") {
        bytes[4] = 3;
        detail::write_file(path, bytes);
        CHECK_THROWS_AS(load_frames(path), std::runtime_error);
    }
    SUBCASE("truncated frame data") {
        detail::write_file(path, bytes.substr(0, bytes.size() - 3));
        CHECK_THROWS_AS(load_frames(path), std::runtime_error);
    }
    SUBCASE("trailing bytes") {
        detail::write_file(path, bytes + '\0');
        CHECK_THROWS_AS(load_frames(path), std::runtime_error);
    }
    std::remove(path);

    FrameClip bad = clip;
    bad.width = 4;
    CHECK_THROWS_AS(save_frames("nope.l2df", bad), std::invalid_argument);
}

TEST_CASE("frames map to latents and back") {
    const FrameClip clip = synthetic_source(SourceKind::Static, 1, 4, 4, 3);
    const Tensor z = latent_from_frame(clip.frames[0], 8);
    REQUIRE(z.shape == std::vector<int>{16, 8});
    for (int i = 0; i < 16; ++i) {
        const float want = 2.0f * clip.frames[0].ptr()[i] - 1.0f;
        for (int c = 0; c < 8; ++c) CHECK(z.ptr()[i * 8 + c] == want);
    }
    const Tensor back = frame_from_latent(z, 4, 4);
    CHECK(max_abs_diff(back, clip.frames[0]) <= 1e-6f);

    CHECK_THROWS_AS(latent_from_frame(Tensor({4, 4}), 8), std::invalid_argument);
    CHECK_THROWS_AS(latent_from_frame(clip.frames[0], 0), std::invalid_argument);
    CHECK_THROWS_AS(frame_from_latent(z, 4, 5), std::invalid_argument);
}

TEST_CASE("metrics report flicker, structure drift and latency moments") {
    FrameClip inputs;
    inputs.width = inputs.height = inputs.channels = 1;
    inputs.frames.assign(2, Tensor::zeros({1, 1, 1}));
    inputs.frames[0].ptr()[0] = 0.5f;
    inputs.frames[1].ptr()[0] = 0.5f;
    FrameClip outputs = inputs;
    outputs.frames[0].ptr()[0] = 0.0f;

    OpCounters ctr;
    ctr.frame_latency_ms = {1.0, 2.0, 3.0};
    const MetricsReport rep = compute_metrics(inputs, outputs, ctr);
    CHECK(rep.flicker == doctest::Approx(0.25));
    CHECK(rep.structure_mse == 0.0);  // single pixels carry no gradient
    CHECK(rep.latency_mean_ms == doctest::Approx(2.0));
    CHECK(rep.latency_std_ms == doctest::Approx(1.0));

    const MetricsReport same = compute_metrics(inputs, inputs, OpCounters{});
    CHECK(same.flicker == 0.0);
    CHECK(same.latency_mean_ms == 0.0);
    CHECK(same.latency_std_ms == 0.0);

    FrameClip extra = inputs;
    extra.frames.push_back(Tensor::zeros({1, 1, 1}));
    CHECK_THROWS_AS(compute_metrics(inputs, extra, ctr), std::invalid_argument);
    FrameClip empty;
    empty.width = empty.height = empty.channels = 1;
    CHECK_THROWS_AS(compute_metrics(empty, empty, ctr), std::invalid_argument);
}

TEST_CASE("latency std needs at least two samples") {
    OpCounters ctr;
    CHECK(ctr.latency_std_ms() == 0.0);
    ctr.frame_latency_ms = {7.5};
    CHECK(ctr.latency_mean_ms() == doctest::Approx(7.5));
    CHECK(ctr.latency_std_ms() == 0.0);

    const auto map = ctr.as_map();
    CHECK(map.count("kv_projection_count") == 1);
    CHECK(map.count("attended_slot_count") == 1);
    CHECK(map.count("denoiser_calls") == 1);
    CHECK(map.at("frames_timed") == 1.0);
}

TEST_CASE("the x-t slice renders one column per frame") {
    FrameClip clip;
    clip.width = 2;
    clip.height = 2;
    clip.channels = 1;
    clip.frames.assign(2, Tensor::zeros({2, 2, 1}));
    std::fill(clip.frames[1].data.begin(), clip.frames[1].data.end(), 1.0f);

    const char* path = "test_slice.pgm";
    export_xt_slice(path, clip, 0);
    const std::string got = detail::read_file(path);
    const std::string want = std::string("P5\n2 2\n255\n") +
                             '\x00' + '\xff' + '\x00' + '\xff';
    CHECK(got == want);

    // A constant clip has no span to scale; everything lands on black.
    std::fill(clip.frames[1].data.begin(), clip.frames[1].data.end(), 0.0f);
    export_xt_slice(path, clip, 1);
    const std::string flat = detail::read_file(path);
    CHECK(flat.substr(flat.size() - 4) == std::string(4, '\0'));
    std::remove(path);

    CHECK_THROWS_AS(export_xt_slice(path, clip, 2), std::invalid_argument);
    CHECK_THROWS_AS(export_xt_slice(path, FrameClip{1, 1, 1, {}}, 0), std::invalid_argument);
}

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diffstream/op_counters.hpp"
#include "diffstream/tensor.hpp"

namespace diffstream {

// A clip of frames, each [height x width x channels], values nominally [0, 1].
struct FrameClip {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<Tensor> frames;
};

// Raw clip container: "L2DF", u16 version, then width / height / channels /
// frame count as u32 LE, then the frames as row-major f32 LE.
void save_frames(const std::string& path, const FrameClip& clip);
FrameClip load_frames(const std::string& path);

enum class SourceKind { MovingBar, DriftingSine, Static, RandomWalk };

SourceKind parse_source(const std::string& name);
const char* source_name(SourceKind kind);

// Deterministic single-channel test clips at the latent resolution.
FrameClip synthetic_source(SourceKind kind, int frame_count, int height, int width,
                           std::uint64_t seed);

// Latent [h*w x channels]: every channel carries 2 v - 1. Back out by the
// channel mean, clamped to [0, 1]. Frames must be single-channel.
Tensor latent_from_frame(const Tensor& frame, int channels);
Tensor frame_from_latent(const Tensor& latent, int height, int width);

struct MetricsReport {
    double flicker = 0.0;        // mean squared difference of consecutive outputs
    double structure_mse = 0.0;  // gradient-map MSE between matching in/out frames
    double latency_mean_ms = 0.0;
    double latency_std_ms = 0.0;
};

MetricsReport compute_metrics(const FrameClip& inputs, const FrameClip& outputs,
                              const OpCounters& counters);

// Binary PGM of the clip's X-T slice: column x = frame index, row y = pixel
// column of scan row `row`, channel-mean, min-max scaled to 0..255.
void export_xt_slice(const std::string& path, const FrameClip& clip, int row);

}  // namespace diffstream

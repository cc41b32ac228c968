#include "diffstream/frame_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "diffstream/binary_io.hpp"
#include "diffstream/denoiser.hpp"

namespace diffstream {

namespace {

constexpr char kClipMagic[4] = {'L', '2', 'D', 'F'};
constexpr std::uint16_t kClipVersion = 1;

void check_clip_shape(const FrameClip& clip, const char* who) {
    if (clip.width <= 0 || clip.height <= 0 || clip.channels <= 0)
        throw std::invalid_argument(std::string(who) + ": clip extents must be positive");
    for (const auto& f : clip.frames)
        if (f.ndim() != 3 || f.dim(0) != clip.height || f.dim(1) != clip.width ||
            f.dim(2) != clip.channels)
            throw std::invalid_argument(std::string(who) +
                                        ": every frame must be [height x width x channels]");
}

float gray_at(const Tensor& frame, int y, int x) {
    const int c = frame.dim(2);
    const float* px = frame.ptr() + ((std::size_t)y * frame.dim(1) + x) * c;
    float acc = 0.0f;
    for (int i = 0; i < c; ++i) acc += px[i];
    return acc / (float)c;
}

}  // namespace

void save_frames(const std::string& path, const FrameClip& clip) {
    check_clip_shape(clip, "save_frames");
    detail::ByteWriter wr;
    wr.magic(kClipMagic);
    wr.u16(kClipVersion);
    wr.u32((std::uint32_t)clip.width);
    wr.u32((std::uint32_t)clip.height);
    wr.u32((std::uint32_t)clip.channels);
    wr.u32((std::uint32_t)clip.frames.size());
    for (const auto& f : clip.frames) wr.f32_array(f.ptr(), f.numel());
    detail::write_file(path, wr.buf);
}

FrameClip load_frames(const std::string& path) {
    const std::string bytes = detail::read_file(path);
    detail::ByteReader rd{bytes, "frame clip"};
    rd.magic(kClipMagic);
    const std::uint16_t ver = rd.u16("version");
    if (ver != kClipVersion)
        throw std::runtime_error("frame clip: unsupported version " + std::to_string(ver));
    FrameClip clip;
    clip.width = (int)rd.u32("width");
    clip.height = (int)rd.u32("height");
    clip.channels = (int)rd.u32("channels");
    const std::uint32_t count = rd.u32("frame count");
    if (clip.width <= 0 || clip.height <= 0 || clip.channels <= 0)
        throw std::runtime_error("frame clip: degenerate geometry");
    clip.frames.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Tensor f = Tensor::zeros({clip.height, clip.width, clip.channels});
        rd.f32_array(f.ptr(), f.numel(), "frame data");
        clip.frames.push_back(std::move(f));
    }
    rd.done();
    return clip;
}

SourceKind parse_source(const std::string& name) {
    if (name == "moving_bar") return SourceKind::MovingBar;
    if (name == "drifting_sine") return SourceKind::DriftingSine;
    if (name == "static") return SourceKind::Static;
    if (name == "random_walk") return SourceKind::RandomWalk;
    throw std::invalid_argument("unknown source '" + name +
                                "' (expected moving_bar, drifting_sine, static or random_walk)");
}

const char* source_name(SourceKind kind) {
    switch (kind) {
        case SourceKind::MovingBar: return "moving_bar";
        case SourceKind::DriftingSine: return "drifting_sine";
        case SourceKind::Static: return "static";
        case SourceKind::RandomWalk: return "random_walk";
    }
    return "?";
}

FrameClip synthetic_source(SourceKind kind, int frame_count, int height, int width,
                           std::uint64_t seed) {
    if (frame_count <= 0 || height <= 0 || width <= 0)
        throw std::invalid_argument("synthetic_source: extents must be positive");
    FrameClip clip;
    clip.width = width;
    clip.height = height;
    clip.channels = 1;
    clip.frames.reserve((std::size_t)frame_count);
    RngStream rng{seed, 0};
    constexpr float pi = std::numbers::pi_v<float>;

    Tensor walk;
    if (kind == SourceKind::RandomWalk) {
        walk = Tensor::zeros({height, width, 1});
        std::fill(walk.data.begin(), walk.data.end(), 0.5f);
    }
    Tensor texture;
    if (kind == SourceKind::Static) {
        texture = gaussian(rng, {height, width, 1});
        for (float& v : texture.data) v = 0.1f * v;
    }

    for (int f = 0; f < frame_count; ++f) {
        Tensor frame = Tensor::zeros({height, width, 1});
        switch (kind) {
            case SourceKind::MovingBar: {
                const int bar_w = std::max(1, width / 4);
                const int pos = f % width;
                for (int y = 0; y < height; ++y)
                    for (int x = 0; x < width; ++x) {
                        const int d = (x - pos + width) % width;
                        frame.ptr()[y * width + x] = d < bar_w ? 1.0f : 0.05f;
                    }
                break;
            }
            case SourceKind::DriftingSine: {
                for (int y = 0; y < height; ++y)
                    for (int x = 0; x < width; ++x) {
                        const float phase = 2.0f * pi *
                                            ((float)x / (float)width - 0.125f * (float)f) +
                                            pi * (float)y / (float)height;
                        frame.ptr()[y * width + x] = 0.5f + 0.5f * std::sin(phase);
                    }
                break;
            }
            case SourceKind::Static: {
                for (int y = 0; y < height; ++y)
                    for (int x = 0; x < width; ++x) {
                        const float base = 0.5f + 0.4f * std::sin(2.0f * pi * (float)x / (float)width) *
                                                      std::cos(2.0f * pi * (float)y / (float)height);
                        float v = base + texture.ptr()[y * width + x];
                        frame.ptr()[y * width + x] = std::clamp(v, 0.0f, 1.0f);
                    }
                break;
            }
            case SourceKind::RandomWalk: {
                for (int y = 0; y < height; ++y)
                    for (int x = 0; x < width; ++x) {
                        float v = walk.ptr()[y * width + x] + 0.08f * (float)rng.next_normal();
                        v = std::clamp(v, 0.0f, 1.0f);
                        walk.ptr()[y * width + x] = v;
                        frame.ptr()[y * width + x] = v;
                    }
                break;
            }
        }
        clip.frames.push_back(std::move(frame));
    }
    return clip;
}

Tensor latent_from_frame(const Tensor& frame, int channels) {
    if (frame.ndim() != 3 || frame.dim(2) != 1)
        throw std::invalid_argument("latent_from_frame: expected a [h x w x 1] frame");
    if (channels <= 0) throw std::invalid_argument("latent_from_frame: channels must be positive");
    const int s = frame.dim(0) * frame.dim(1);
    Tensor z = Tensor::zeros({s, channels});
    for (int i = 0; i < s; ++i) {
        const float v = 2.0f * frame.ptr()[i] - 1.0f;
        for (int c = 0; c < channels; ++c) z.ptr()[(std::size_t)i * channels + c] = v;
    }
    return z;
}

Tensor frame_from_latent(const Tensor& latent, int height, int width) {
    if (latent.ndim() != 2 || latent.dim(0) != height * width)
        throw std::invalid_argument("frame_from_latent: latent rows must equal height * width");
    const int c = latent.dim(1);
    Tensor frame = Tensor::zeros({height, width, 1});
    for (int i = 0; i < height * width; ++i) {
        float acc = 0.0f;
        for (int j = 0; j < c; ++j) acc += latent.ptr()[(std::size_t)i * c + j];
        frame.ptr()[i] = std::clamp((acc / (float)c + 1.0f) * 0.5f, 0.0f, 1.0f);
    }
    return frame;
}

MetricsReport compute_metrics(const FrameClip& inputs, const FrameClip& outputs,
                              const OpCounters& counters) {
    check_clip_shape(inputs, "compute_metrics");
    check_clip_shape(outputs, "compute_metrics");
    if (inputs.frames.size() != outputs.frames.size())
        throw std::invalid_argument("compute_metrics: input and output frame counts differ");
    if (outputs.frames.empty()) throw std::invalid_argument("compute_metrics: empty clip");

    MetricsReport rep;
    const std::size_t n = outputs.frames.size();
    if (n > 1) {
        double acc = 0.0;
        for (std::size_t f = 1; f < n; ++f) {
            const Tensor& a = outputs.frames[f - 1];
            const Tensor& b = outputs.frames[f];
            double mse = 0.0;
            for (std::int64_t i = 0; i < a.numel(); ++i) {
                const double d = (double)b.ptr()[i] - (double)a.ptr()[i];
                mse += d * d;
            }
            acc += mse / (double)a.numel();
        }
        rep.flicker = acc / (double)(n - 1);
    }

    double sacc = 0.0;
    for (std::size_t f = 0; f < n; ++f) {
        const Tensor si = structure_map(inputs.frames[f], inputs.height, inputs.width);
        const Tensor so = structure_map(outputs.frames[f], outputs.height, outputs.width);
        if (si.numel() != so.numel())
            throw std::invalid_argument("compute_metrics: input and output resolutions differ");
        double mse = 0.0;
        for (std::int64_t i = 0; i < si.numel(); ++i) {
            const double d = (double)so.ptr()[i] - (double)si.ptr()[i];
            mse += d * d;
        }
        sacc += mse / (double)si.numel();
    }
    rep.structure_mse = sacc / (double)n;

    rep.latency_mean_ms = counters.latency_mean_ms();
    rep.latency_std_ms = counters.latency_std_ms();
    return rep;
}

void export_xt_slice(const std::string& path, const FrameClip& clip, int row) {
    check_clip_shape(clip, "export_xt_slice");
    if (clip.frames.empty()) throw std::invalid_argument("export_xt_slice: empty clip");
    if (row < 0 || row >= clip.height)
        throw std::invalid_argument("export_xt_slice: row out of range");

    const int w = (int)clip.frames.size();
    const int h = clip.width;
    std::vector<float> slice((std::size_t)w * h);
    float lo = std::numeric_limits<float>::max();
    float hi = std::numeric_limits<float>::lowest();
    for (int f = 0; f < w; ++f)
        for (int x = 0; x < h; ++x) {
            const float v = gray_at(clip.frames[(std::size_t)f], row, x);
            slice[(std::size_t)x * w + f] = v;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    const float span = hi - lo;

    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.reserve(out.size() + slice.size());
    for (float v : slice) {
        const float t = span > 0.0f ? (v - lo) / span : 0.0f;
        out.push_back((char)(unsigned char)std::lround(t * 255.0f));
    }
    detail::write_file(path, out);
}

}  // namespace diffstream

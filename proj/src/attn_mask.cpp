#include "diffstream/attn_mask.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace diffstream {

AttentionMask make_mask(int rows, int cols, bool allowed_everywhere) {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("mask: extents must be positive");
    AttentionMask m;
    m.rows = rows;
    m.cols = cols;
    m.allowed.assign((std::size_t)rows * cols, allowed_everywhere ? 1 : 0);
    return m;
}

AttentionMask build_training_mask(MaskMode mode, int window, int warmup) {
    if (window <= 0) throw std::invalid_argument("build_training_mask: window must be positive");
    if (mode == MaskMode::UnidirectionalWarmup && (warmup < 1 || warmup >= window))
        throw std::invalid_argument("build_training_mask: need 1 <= warmup < window, got warmup=" +
                                    std::to_string(warmup) + " window=" + std::to_string(window));
    AttentionMask m = make_mask(window, window);
    for (int i = 0; i < window; ++i) {
        for (int j = 0; j < window; ++j) {
            bool ok = false;
            switch (mode) {
                case MaskMode::BidirectionalChunk:
                case MaskMode::SlidingOverlap:  // window-internal training is bidirectional
                    ok = true;
                    break;
                case MaskMode::Unidirectional:
                    ok = j <= i;
                    break;
                case MaskMode::UnidirectionalWarmup:
                    // Warmup frames attend only among themselves; later frames
                    // attend the warmup block plus their causal past.
                    ok = i < warmup ? j < warmup : (j < warmup || j <= i);
                    break;
            }
            m.set(i, j, ok);
        }
    }
    return m;
}

std::vector<float> streaming_row_mask(long frame_index, int window, int warmup) {
    if (warmup < 1 || warmup >= window)
        throw std::invalid_argument("streaming_row_mask: need 1 <= warmup < window");
    if (frame_index < warmup)
        throw std::logic_error("streaming_row_mask: streaming starts at frame_index == warmup");
    const int recent_capacity = window - warmup;
    const long have = frame_index - warmup + 1;  // frames seen since warmup, incl. current
    const int allowed_recent = (int)std::min<long>(have, recent_capacity);
    std::vector<float> row((std::size_t)window, kMaskBlocked);
    for (int j = 0; j < warmup; ++j) row[j] = 0.0f;
    for (int j = window - allowed_recent; j < window; ++j) row[j] = 0.0f;
    return row;
}

std::vector<int> pe_index_compaction(std::span<const float> mask_row) {
    std::vector<int> idx(mask_row.size());
    int count = 0;
    for (std::size_t i = 0; i < mask_row.size(); ++i) {
        if (mask_row[i] == 0.0f) ++count;
        idx[i] = std::max(count - 1, 0);
    }
    if (count == 0) throw std::invalid_argument("pe_index_compaction: fully blocked row");
    return idx;
}

std::vector<std::uint8_t> row_allowed(std::span<const float> mask_row) {
    std::vector<std::uint8_t> a(mask_row.size());
    for (std::size_t i = 0; i < mask_row.size(); ++i) a[i] = mask_row[i] == 0.0f ? 1 : 0;
    return a;
}

std::vector<WindowChunk> sliding_window_plan(int total_frames, int window, int overlap) {
    if (window <= 0 || total_frames < window)
        throw std::invalid_argument("sliding_window_plan: need 0 < window <= total_frames");
    if (overlap <= 0 || overlap >= window)
        throw std::invalid_argument("sliding_window_plan: need 0 < overlap < window");
    const int stride = window - overlap;
    std::vector<int> starts;
    for (int s = 0; s + window <= total_frames; s += stride) starts.push_back(s);
    if (starts.back() + window < total_frames) starts.push_back(total_frames - window);

    std::vector<int> cover((std::size_t)total_frames, 0);
    for (int s : starts)
        for (int i = 0; i < window; ++i) ++cover[(std::size_t)s + i];

    std::vector<WindowChunk> plan;
    plan.reserve(starts.size());
    for (int s : starts) {
        WindowChunk c;
        c.start = s;
        c.length = window;
        c.fusion.resize((std::size_t)window);
        for (int i = 0; i < window; ++i) c.fusion[(std::size_t)i] = 1.0f / (float)cover[(std::size_t)s + i];
        plan.push_back(std::move(c));
    }
    return plan;
}

AttentionMask influence_mask(MaskMode mode, int total_frames, int window, int warmup, int overlap) {
    if (total_frames <= 0 || window <= 0)
        throw std::invalid_argument("influence_mask: extents must be positive");
    AttentionMask m = make_mask(total_frames, total_frames);
    switch (mode) {
        case MaskMode::BidirectionalChunk:
            // Independent chunks of `window`: influence never crosses a chunk edge.
            for (int i = 0; i < total_frames; ++i)
                for (int j = 0; j < total_frames; ++j) m.set(i, j, i / window == j / window);
            break;
        case MaskMode::SlidingOverlap: {
            const auto plan = sliding_window_plan(total_frames, window, overlap);
            for (const auto& c : plan)
                for (int i = 0; i < c.length; ++i)
                    for (int j = 0; j < c.length; ++j) m.set(c.start + i, c.start + j, true);
            break;
        }
        case MaskMode::Unidirectional:
            // Causal with a window-deep context.
            for (int i = 0; i < total_frames; ++i)
                for (int j = 0; j < total_frames; ++j) m.set(i, j, j <= i && i - j < window);
            break;
        case MaskMode::UnidirectionalWarmup: {
            if (warmup < 1 || warmup >= window)
                throw std::invalid_argument("influence_mask: need 1 <= warmup < window");
            const int recent = window - warmup;
            for (int i = 0; i < total_frames; ++i) {
                for (int j = 0; j < total_frames; ++j) {
                    bool ok;
                    if (i < warmup)
                        ok = j < warmup;
                    else
                        ok = j < warmup || (j <= i && i - j < recent);
                    m.set(i, j, ok);
                }
            }
            break;
        }
    }
    return m;
}

}  // namespace diffstream

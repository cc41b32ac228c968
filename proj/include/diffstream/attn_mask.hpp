#pragma once

// Temporal attention mask construction: training-window masks, per-frame
// streaming rows, positional-index compaction and the sliding-window
// inference plan. Masks are pure geometry; no tensor math lives here.

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace diffstream {

inline constexpr float kMaskBlocked = -std::numeric_limits<float>::infinity();

struct AttentionMask {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint8_t> allowed;  // row major, 1 = attend

    bool at(int r, int c) const { return allowed[(std::size_t)r * cols + c] != 0; }
    void set(int r, int c, bool v) { allowed[(std::size_t)r * cols + c] = v ? 1 : 0; }
    const std::uint8_t* row(int r) const { return allowed.data() + (std::size_t)r * cols; }
};

AttentionMask make_mask(int rows, int cols, bool allowed_everywhere = false);

enum class MaskMode {
    BidirectionalChunk,    // every frame in the window attends every frame
    SlidingOverlap,        // trains bidirectional; overlap matters at inference
    Unidirectional,        // causal: each frame attends itself and earlier frames
    UnidirectionalWarmup,  // warmup block bidirectional among itself, rest causal
};

// L x L training mask for one window. warmup is required (and only used) for
// UnidirectionalWarmup.
AttentionMask build_training_mask(MaskMode mode, int window, int warmup = 0);

// One streaming attention row over the cache slot axis: warmup slots
// [0, warmup) always allowed, then among the recent slots the last
// min(frame_index - warmup + 1, window - warmup) are allowed; the current
// frame sits in slot window-1. 0 = attend, -inf = blocked.
std::vector<float> streaming_row_mask(long frame_index, int window, int warmup);

// Compacted positional indices: kv_idx[i] = (number of allowed slots on
// [0, i]) - 1, clamped at 0. Allowed slots get contiguous positions in slot
// order, so streaming rows reproduce the training-time layout exactly.
std::vector<int> pe_index_compaction(std::span<const float> mask_row);

std::vector<std::uint8_t> row_allowed(std::span<const float> mask_row);

// One inference chunk of the sliding plan. fusion[i] is the weight of this
// chunk's output for frame start+i; weights across chunks sum to 1 per frame
// (uniform over the chunks that cover it).
struct WindowChunk {
    int start = 0;
    int length = 0;
    std::vector<float> fusion;
};

// Chunks of length `window` advancing by window - overlap, plus a tail chunk
// so every frame is covered. Requires 0 < overlap < window <= total_frames.
std::vector<WindowChunk> sliding_window_plan(int total_frames, int window, int overlap);

// Whole-stream influence geometry of the four modes: entry (i, j) says
// whether the output for frame i may contain information from frame j when a
// stream of total_frames is processed with the given window. Used to
// cross-check the builders against brute-force enumeration.
AttentionMask influence_mask(MaskMode mode, int total_frames, int window, int warmup = 0,
                             int overlap = 0);

}  // namespace diffstream

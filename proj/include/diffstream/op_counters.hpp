#pragma once

// Work accounting for cache-ablation runs. kv_projection_count counts one
// unit per (real frame, layer, step) K/V pair actually projected, so the
// no-cache / cached ratio is exactly the mean attended-window length.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace diffstream {

struct OpCounters {
    std::int64_t kv_projection_count = 0;
    std::int64_t attended_slot_count = 0;  // sum of attended window lengths
    std::int64_t attention_flop_estimate = 0;
    std::int64_t denoiser_calls = 0;
    std::vector<double> frame_latency_ms;  // streaming-phase outputs, ingest to return

    double latency_mean_ms() const;
    double latency_std_ms() const;
    std::map<std::string, double> as_map() const;
};

}  // namespace diffstream

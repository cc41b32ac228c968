#include "diffstream/op_counters.hpp"

#include <cmath>

namespace diffstream {

double OpCounters::latency_mean_ms() const {
    if (frame_latency_ms.empty()) return 0.0;
    double s = 0.0;
    for (double v : frame_latency_ms) s += v;
    return s / (double)frame_latency_ms.size();
}

double OpCounters::latency_std_ms() const {
    if (frame_latency_ms.size() < 2) return 0.0;
    const double m = latency_mean_ms();
    double s = 0.0;
    for (double v : frame_latency_ms) s += (v - m) * (v - m);
    return std::sqrt(s / (double)(frame_latency_ms.size() - 1));
}

std::map<std::string, double> OpCounters::as_map() const {
    return {
        {"kv_projection_count", (double)kv_projection_count},
        {"attended_slot_count", (double)attended_slot_count},
        {"attention_flop_estimate", (double)attention_flop_estimate},
        {"denoiser_calls", (double)denoiser_calls},
        {"latency_mean_ms", latency_mean_ms()},
        {"latency_std_ms", latency_std_ms()},
        {"frames_timed", (double)frame_latency_ms.size()},
    };
}

}  // namespace diffstream

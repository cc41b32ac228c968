#include "diffstream/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace diffstream {

float Schedule::signal(int train_step) const {
    if (train_step < 0 || train_step >= n_train_steps)
        throw std::out_of_range("schedule: training index " + std::to_string(train_step));
    return train_step == 0 ? 1.0f : alpha_bar[(std::size_t)train_step];
}

Schedule make_schedule(int n_train_steps, int n_infer_steps, float beta_min, float beta_max) {
    if (n_train_steps < 2) throw std::invalid_argument("make_schedule: need n_train_steps >= 2");
    if (n_infer_steps < 1 || n_infer_steps > n_train_steps)
        throw std::invalid_argument("make_schedule: need 1 <= n_infer_steps <= n_train_steps");
    if (!(beta_min > 0.0f) || !(beta_max < 1.0f) || !(beta_min <= beta_max))
        throw std::invalid_argument("make_schedule: need 0 < beta_min <= beta_max < 1");

    Schedule s;
    s.n_train_steps = n_train_steps;
    s.n_infer_steps = n_infer_steps;
    s.alpha_bar.resize((std::size_t)n_train_steps);
    double prod = 1.0;
    for (int t = 0; t < n_train_steps; ++t) {
        const double beta = beta_min + (beta_max - beta_min) * (double)t / (n_train_steps - 1);
        prod *= 1.0 - beta;
        s.alpha_bar[(std::size_t)t] = (float)prod;
    }

    // Evenly spaced from the noisiest index down; n_infer == n_train yields
    // every index in descending order.
    s.infer_steps.resize((std::size_t)n_infer_steps);
    for (int j = 0; j < n_infer_steps; ++j) {
        const long long num = (long long)(n_infer_steps - j) * n_train_steps;
        s.infer_steps[(std::size_t)j] = (int)((num + n_infer_steps - 1) / n_infer_steps) - 1;
    }
    for (int j = 0; j + 1 < n_infer_steps; ++j)
        if (s.infer_steps[(std::size_t)j] <= s.infer_steps[(std::size_t)j + 1])
            throw std::logic_error("make_schedule: inference steps not strictly decreasing");

    s.lambda_step.resize((std::size_t)n_infer_steps);
    s.mu_step.resize((std::size_t)n_infer_steps);
    for (int j = 0; j < n_infer_steps; ++j) {
        const double a_t = s.alpha_bar[(std::size_t)s.infer_steps[(std::size_t)j]];
        const double a_prev =
            j + 1 < n_infer_steps ? s.alpha_bar[(std::size_t)s.infer_steps[(std::size_t)j + 1]] : 1.0;
        s.lambda_step[(std::size_t)j] = (float)std::sqrt(a_prev / a_t);
        s.mu_step[(std::size_t)j] =
            (float)(std::sqrt(1.0 - a_prev) - std::sqrt(a_prev * (1.0 - a_t) / a_t));
    }
    return s;
}

int start_step_index(const Schedule& sched, float strength) {
    if (!(strength >= 0.0f) || !(strength <= 1.0f))
        throw std::invalid_argument("strength must be in [0, 1]");
    const int t = (int)std::lround((double)strength * (sched.n_train_steps - 1));
    if (t == 0) return sched.n_infer_steps;
    for (int j = 0; j < sched.n_infer_steps; ++j)
        if (sched.infer_steps[(std::size_t)j] <= t) return j;
    return sched.n_infer_steps - 1;  // below the last step but not clean: run the final step
}

NoisedLatent add_noise(const Tensor& z0, float strength, const Schedule& sched, RngStream& rng) {
    const int start = start_step_index(sched, strength);
    const int t = (int)std::lround((double)strength * (sched.n_train_steps - 1));
    const Tensor eps = gaussian(rng, z0.shape);
    const float a = sched.signal(t);
    NoisedLatent out;
    out.z = axpby(std::sqrt(a), z0, std::sqrt(1.0f - a), eps);
    out.start_step = start;
    out.train_index = t;
    return out;
}

Tensor denoise_step(const Tensor& z_t, const Tensor& eps, int step_index, const Schedule& sched) {
    if (step_index < 0 || step_index >= sched.n_infer_steps)
        throw std::out_of_range("denoise_step: step index " + std::to_string(step_index));
    if (!z_t.same_shape(eps)) throw std::invalid_argument("denoise_step: shape mismatch");
    return axpby(sched.lambda_step[(std::size_t)step_index], z_t,
                 sched.mu_step[(std::size_t)step_index], eps);
}

}  // namespace diffstream

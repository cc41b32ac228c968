#pragma once

// Deterministic DDIM-style schedule: linear betas, cumulative signal table,
// evenly spaced inference steps and the per-step (lambda, mu) update
// coefficients, plus strength-to-start-step noising.

#include <vector>

#include "diffstream/tensor.hpp"

namespace diffstream {

struct Schedule {
    int n_train_steps = 0;
    int n_infer_steps = 0;
    std::vector<float> alpha_bar;    // cumulative product of (1 - beta), strictly decreasing
    std::vector<int> infer_steps;    // training indices, strictly decreasing, noisiest first
    std::vector<float> lambda_step;  // z_prev = lambda * z_t + mu * eps per inference step
    std::vector<float> mu_step;

    // Signal level of training index t; index 0 counts as noise-free, the
    // same virtual alpha_bar_{-1} = 1 the final inference step uses.
    float signal(int train_step) const;
};

Schedule make_schedule(int n_train_steps, int n_infer_steps, float beta_min = 1e-4f,
                       float beta_max = 0.02f);

// First inference step whose training index is <= round(strength * (n-1)).
// Strength 0 returns n_infer_steps (nothing to run); a positive strength
// below the last step still runs the final step so full denoising always
// lands on the model's x0 estimate.
int start_step_index(const Schedule& sched, float strength);

struct NoisedLatent {
    Tensor z;
    int start_step = 0;  // first inference step to run, n_infer_steps = none
    int train_index = 0;
};

// z = sqrt(signal(t)) z0 + sqrt(1 - signal(t)) eps with t = round(s * (n-1)).
// Always consumes numel(z0) draws so RNG streams stay aligned across modes.
NoisedLatent add_noise(const Tensor& z0, float strength, const Schedule& sched, RngStream& rng);

Tensor denoise_step(const Tensor& z_t, const Tensor& eps, int step_index, const Schedule& sched);

}  // namespace diffstream

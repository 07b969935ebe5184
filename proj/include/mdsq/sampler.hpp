#pragma once
// Reverse diffusion: deterministic Euler steps driven by the clean-latent
// prediction, from noise (plus absorbed positions) down to token ids.

#include "mdsq/denoiser.hpp"
#include "mdsq/diffusion.hpp"
#include "mdsq/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

namespace mdsq {

struct SamplerConfig {
    std::size_t num_steps = 64;
    bool clamp_each_step = true;  // snap target rows of each prediction to the EMB row of their rounded token
    std::uint64_t seed = 0;
    std::size_t max_len = 256;

    // 2 <= num_steps <= T
    void validate(std::size_t T) const;
};

// Uniform grid T = g[0] > g[1] > ... > g[num_steps] = 0.
std::vector<std::size_t> step_grid(std::size_t T, std::size_t num_steps);

// z_s = sqrt(abar_s) z0_hat + sqrt(1 - abar_s) * (z_t - sqrt(abar_t) z0_hat) / sqrt(1 - abar_t)
Tensor reverse_update(const Tensor& z_t, const Tensor& z0_hat, double alpha_bar_t, double alpha_bar_s);

// Predicts clean latents for the whole sequence at step t.
using DenoiseFn = std::function<Tensor(const Tensor& z_t, std::size_t t)>;
// Optional in-place projection of a prediction (e.g. snapping to embeddings).
using SnapFn = std::function<void(Tensor& z0_hat)>;

// One step from t down to s (0 <= s < t <= T). Stepping to s = 0 returns the
// clean prediction itself, the endpoint of the reverse trajectory.
Tensor reverse_step(const Tensor& z_t, std::size_t t, std::size_t s, const DenoiseFn& denoise,
                    const NoiseSchedule& schedule, const SnapFn& snap = {});

struct SampleResult {
    std::vector<std::size_t> target_ids;
    Tensor latents;  // final [seq, width] latents, source rows re-anchored
};

// source_ids is the encoded prefix [bos, ..., eos]; target_len target rows
// follow it. `denoise` overrides the model's f_theta (oracle tests); the model
// still supplies embeddings for the source, the absorbing state and rounding.
SampleResult sample(std::span<const std::size_t> source_ids, std::size_t target_len, const DenoiserModel& model,
                    const NoiseSchedule& schedule, const SamplerConfig& cfg, const DenoiseFn& denoise = {},
                    std::ostream* trace = nullptr);

} // namespace mdsq

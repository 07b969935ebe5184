#pragma once
// Noise schedule, partial forward noising with the soft absorbing state, and
// the joint denoising loss.

#include "mdsq/data.hpp"
#include "mdsq/denoiser.hpp"
#include "mdsq/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace mdsq {

class Rng;

struct NoiseSchedule {
    std::size_t T = 0;
    std::vector<double> alpha_bar;    // [T+1]
    std::vector<double> absorb_prob;  // [T+1]

    // FNV-1a over the bit patterns of T and both arrays.
    std::uint64_t checksum() const;
    // "t alpha_bar absorb_prob" lines with a header.
    void write(std::ostream& os) const;
};

inline constexpr double kScheduleOffset = 1e-4;
inline constexpr double kAlphaBarFloor = 1e-4;

// alpha_bar_t = 1 - sqrt(t/T + 1e-4), kept inside (1e-4, 1 - 1e-4) by a floor
// that decreases linearly from 2e-4 at t=0 to exactly 1e-4 at t=T, so the
// sequence stays strictly decreasing for every T. absorb_prob_t = p_max * t/T.
NoiseSchedule build_sqrt_schedule(std::size_t T, double p_max = 0.1);

struct DiffusionState {
    Tensor z;  // [seq, width]
    std::size_t t = 0;
    std::vector<std::uint8_t> absorbed;
    std::vector<std::uint8_t> source_mask;
};

// Per-row coefficient and additive noise: row r of z_t is coef[r] * z0[r] + noise[r].
// Source rows get coef 1 and zero noise; the rng is consumed for target rows only.
struct NoiseDraw {
    std::vector<double> coef;
    Tensor noise;
};

NoiseDraw draw_noise(std::size_t rows, std::size_t width, double alpha_bar, std::span<const std::uint8_t> source_mask,
                     Rng& rng);

// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps on non-source rows; source rows unchanged.
Tensor forward_noise(const Tensor& z0, std::size_t t, const NoiseSchedule& schedule,
                     std::span<const std::uint8_t> source_mask, Rng& rng);
// Same, with an explicit alpha_bar (used for the limiting cases).
Tensor forward_noise_at(const Tensor& z0, double alpha_bar, std::span<const std::uint8_t> source_mask, Rng& rng);

// Each non-source, not yet absorbed row is absorbed with probability
// absorb_prob[state.t]; absorbed rows carry mask_embedding.
DiffusionState apply_absorbing_state(DiffusionState state, const NoiseSchedule& schedule,
                                     std::span<const double> mask_embedding, Rng& rng);
// Absorption decisions alone, consuming one uniform per eligible row.
std::vector<std::uint8_t> draw_absorption(std::span<const std::uint8_t> already_absorbed,
                                          std::span<const std::uint8_t> source_mask, double prob, Rng& rng);

struct LossConfig {
    double reg_lambda = 1.0;       // R(|z0|) = lambda * mean(z0^2)
    double rounding_weight = 1.0;  // weight of -log p(w | z0_hat)
    bool include_aux = true;       // MoE load-balance losses
};

struct LossTerms {
    Var total;
    double mse = 0.0;
    double reg = 0.0;
    double rounding = 0.0;
    double aux = 0.0;
    std::size_t absorbed = 0;  // target rows replaced by the absorbing state
    std::vector<RoutingStats> routing;  // merged per MoE layer over the batch
};

// Averages over the batch rows. Each row: t ~ U[2, T], z_t from forward_noise
// and apply_absorbing_state, then MSE(f_theta(z_t, t), EMB(w)) over target
// positions + R + rounding + aux. Pads are trimmed before the forward pass.
LossTerms diffusion_loss(const Batch& batch, const DenoiserModel& model, const NoiseSchedule& schedule,
                         const LossConfig& cfg, Rng& rng, ParamBinder& bind);

} // namespace mdsq

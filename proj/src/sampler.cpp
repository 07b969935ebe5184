#include "mdsq/sampler.hpp"

#include "mdsq/data.hpp"
#include "mdsq/error.hpp"
#include "mdsq/rng.hpp"

#include <cmath>
#include <ostream>

namespace mdsq {

void SamplerConfig::validate(std::size_t T) const
{
    if (num_steps < 2 || num_steps > T)
        throw ConfigError("sampler steps must lie in [2, T=" + std::to_string(T) + "], got " +
                          std::to_string(num_steps));
    if (max_len == 0)
        throw ConfigError("sampler max_len must be >= 1");
}

std::vector<std::size_t> step_grid(std::size_t T, std::size_t num_steps)
{
    if (num_steps == 0 || num_steps > T)
        throw ConfigError("step grid needs 1 <= num_steps <= T, got " + std::to_string(num_steps) + " for T=" +
                          std::to_string(T));
    std::vector<std::size_t> grid(num_steps + 1);
    for (std::size_t k = 0; k <= num_steps; ++k)
        grid[k] = T * (num_steps - k) / num_steps;
    return grid;
}

Tensor reverse_update(const Tensor& z_t, const Tensor& z0_hat, double alpha_bar_t, double alpha_bar_s)
{
    if (z_t.shape() != z0_hat.shape())
        throw DimensionError("reverse_update: " + shape_str(z_t.shape()) + " vs " + shape_str(z0_hat.shape()));
    if (alpha_bar_s == alpha_bar_t)
        return z_t;
    const double st = std::sqrt(alpha_bar_t), ss = std::sqrt(alpha_bar_s);
    const double nt = std::sqrt(1.0 - alpha_bar_t), ns = std::sqrt(1.0 - alpha_bar_s);
    Tensor out(z_t.shape());
    for (std::size_t i = 0; i < z_t.size(); ++i) {
        const double eps = (z_t[i] - st * z0_hat[i]) / nt;
        out[i] = ss * z0_hat[i] + ns * eps;
    }
    return out;
}

Tensor reverse_step(const Tensor& z_t, std::size_t t, std::size_t s, const DenoiseFn& denoise,
                    const NoiseSchedule& schedule, const SnapFn& snap)
{
    if (s >= t)
        throw OrderingError("reverse step needs s < t, got s=" + std::to_string(s) + ", t=" + std::to_string(t));
    if (t > schedule.T)
        throw OrderingError("reverse step from t=" + std::to_string(t) + " beyond T=" + std::to_string(schedule.T));
    Tensor z0_hat = denoise(z_t, t);
    if (snap)
        snap(z0_hat);
    if (s == 0)
        return z0_hat;
    return reverse_update(z_t, z0_hat, schedule.alpha_bar[t], schedule.alpha_bar[s]);
}

SampleResult sample(std::span<const std::size_t> source_ids, std::size_t target_len, const DenoiserModel& model,
                    const NoiseSchedule& schedule, const SamplerConfig& cfg, const DenoiseFn& denoise,
                    std::ostream* trace)
{
    const ModelConfig& mc = model.config;
    cfg.validate(schedule.T);
    if (schedule.T != mc.T)
        throw ConfigError("schedule length " + std::to_string(schedule.T) + " differs from model T=" +
                          std::to_string(mc.T));
    const std::size_t src_len = source_ids.size();
    const std::size_t seq = src_len + target_len;
    if (target_len == 0)
        throw ConfigError("target length must be >= 1");
    if (seq > mc.max_seq_len || seq > cfg.max_len)
        throw LengthError("source of " + std::to_string(src_len) + " tokens plus " + std::to_string(target_len) +
                          " target tokens exceeds the maximum length");
    checked_ids(source_ids, mc);
    const std::size_t width = mc.width;

    std::vector<std::uint8_t> source_mask(seq, 0);
    Tensor clean({seq, width});
    for (std::size_t r = 0; r < src_len; ++r) {
        source_mask[r] = 1;
        const auto e = model.embedding.row(source_ids[r]);
        std::copy(e.begin(), e.end(), clean.row(r).begin());
    }

    Rng rng(cfg.seed);
    Tensor z = clean;
    for (std::size_t r = src_len; r < seq; ++r)
        for (std::size_t i = 0; i < width; ++i)
            z.at(r, i) = rng.normal();
    const std::vector<std::uint8_t> none(seq, 0);
    const std::vector<std::uint8_t> absorbed =
        draw_absorption(none, source_mask, schedule.absorb_prob[schedule.T], rng);
    for (std::size_t r = 0; r < seq; ++r)
        if (absorbed[r]) {
            const auto m = model.embedding.row(kMaskId);
            std::copy(m.begin(), m.end(), z.row(r).begin());
        }

    const DenoiseFn predict = denoise ? denoise : DenoiseFn([&model](const Tensor& zt, std::size_t t) {
        return f_theta_values(zt, t, model);
    });
    SnapFn snap;
    if (cfg.clamp_each_step)
        snap = [&](Tensor& z0) {
            const std::vector<std::size_t> ids = round_to_tokens(z0, model).ids;
            for (std::size_t r = src_len; r < seq; ++r) {
                const auto e = model.embedding.row(ids[r]);
                std::copy(e.begin(), e.end(), z0.row(r).begin());
            }
        };

    const std::vector<std::size_t> grid = step_grid(schedule.T, cfg.num_steps);
    Tensor prev_pred;
    for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
        const std::size_t t = grid[k], s = grid[k + 1];
        Tensor pred_seen;
        const DenoiseFn tracked = [&](const Tensor& zt, std::size_t tt) {
            Tensor p = predict(zt, tt);
            if (trace != nullptr)
                pred_seen = p;
            return p;
        };
        z = reverse_step(z, t, s, tracked, schedule, snap);
        for (std::size_t r = 0; r < src_len; ++r)
            std::copy(clean.row(r).begin(), clean.row(r).end(), z.row(r).begin());
        if (trace != nullptr) {
            double change = 0.0;
            if (prev_pred.size() == pred_seen.size())
                for (std::size_t r = src_len; r < seq; ++r) {
                    double d2 = 0.0;
                    for (std::size_t i = 0; i < width; ++i)
                        d2 += (pred_seen.at(r, i) - prev_pred.at(r, i)) * (pred_seen.at(r, i) - prev_pred.at(r, i));
                    change += std::sqrt(d2);
                }
            *trace << t << ' ' << change / static_cast<double>(target_len) << '\n';
            prev_pred = std::move(pred_seen);
        }
    }

    SampleResult result;
    Tensor target({target_len, width});
    for (std::size_t r = 0; r < target_len; ++r)
        std::copy(z.row(src_len + r).begin(), z.row(src_len + r).end(), target.row(r).begin());
    result.target_ids = round_to_tokens(target, model).ids;
    result.latents = std::move(z);
    return result;
}

} // namespace mdsq

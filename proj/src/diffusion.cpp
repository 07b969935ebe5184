#include "mdsq/diffusion.hpp"

#include "mdsq/error.hpp"
#include "mdsq/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <ostream>

namespace mdsq {

namespace {

void fnv(std::uint64_t& h, std::uint64_t x)
{
    for (int i = 0; i < 8; ++i) {
        h ^= (x >> (8 * i)) & 0xFF;
        h *= 0x100000001b3ULL;
    }
}

} // namespace

std::uint64_t NoiseSchedule::checksum() const
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    fnv(h, T);
    for (double a : alpha_bar)
        fnv(h, std::bit_cast<std::uint64_t>(a));
    for (double p : absorb_prob)
        fnv(h, std::bit_cast<std::uint64_t>(p));
    return h;
}

void NoiseSchedule::write(std::ostream& os) const
{
    os << "# t alpha_bar absorb_prob\n";
    os.precision(17);
    for (std::size_t t = 0; t <= T; ++t)
        os << t << ' ' << alpha_bar[t] << ' ' << absorb_prob[t] << '\n';
}

NoiseSchedule build_sqrt_schedule(std::size_t T, double p_max)
{
    if (T < 2)
        throw ConfigError("diffusion needs T >= 2, got " + std::to_string(T));
    if (!(p_max >= 0.0 && p_max <= 1.0))
        throw ConfigError("absorbing probability p_max must lie in [0, 1]");
    NoiseSchedule s;
    s.T = T;
    s.alpha_bar.resize(T + 1);
    s.absorb_prob.resize(T + 1);
    for (std::size_t t = 0; t <= T; ++t) {
        const double frac = static_cast<double>(t) / static_cast<double>(T);
        const double raw = 1.0 - std::sqrt(frac + kScheduleOffset);
        const double floor = kAlphaBarFloor * (2.0 - frac);
        s.alpha_bar[t] = std::min(std::max(raw, floor), 1.0 - kAlphaBarFloor);
        s.absorb_prob[t] = p_max * frac;
    }
    return s;
}

NoiseDraw draw_noise(std::size_t rows, std::size_t width, double alpha_bar, std::span<const std::uint8_t> source_mask,
                     Rng& rng)
{
    if (source_mask.size() != rows)
        throw DimensionError("source mask has " + std::to_string(source_mask.size()) + " entries for " +
                             std::to_string(rows) + " rows");
    NoiseDraw d;
    d.coef.assign(rows, 1.0);
    d.noise = Tensor({rows, width});
    const double keep = std::sqrt(alpha_bar);
    const double sigma = std::sqrt(1.0 - alpha_bar);
    for (std::size_t r = 0; r < rows; ++r) {
        if (source_mask[r])
            continue;
        d.coef[r] = keep;
        for (std::size_t i = 0; i < width; ++i)
            d.noise.at(r, i) = sigma * rng.normal();
    }
    return d;
}

Tensor forward_noise_at(const Tensor& z0, double alpha_bar, std::span<const std::uint8_t> source_mask, Rng& rng)
{
    if (z0.rank() != 2)
        throw DimensionError("forward_noise: latents must be [seq, width], got " + shape_str(z0.shape()));
    const std::size_t rows = z0.dim(0), width = z0.dim(1);
    const NoiseDraw d = draw_noise(rows, width, alpha_bar, source_mask, rng);
    Tensor out = z0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (source_mask[r])
            continue;
        for (std::size_t i = 0; i < width; ++i)
            out.at(r, i) = d.coef[r] * z0.at(r, i) + d.noise.at(r, i);
    }
    return out;
}

Tensor forward_noise(const Tensor& z0, std::size_t t, const NoiseSchedule& schedule,
                     std::span<const std::uint8_t> source_mask, Rng& rng)
{
    if (t < 1 || t > schedule.T)
        throw ConfigError("forward_noise step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.T) +
                          "]");
    return forward_noise_at(z0, schedule.alpha_bar[t], source_mask, rng);
}

std::vector<std::uint8_t> draw_absorption(std::span<const std::uint8_t> already_absorbed,
                                          std::span<const std::uint8_t> source_mask, double prob, Rng& rng)
{
    if (already_absorbed.size() != source_mask.size())
        throw DimensionError("absorbed and source masks differ in length");
    std::vector<std::uint8_t> out(already_absorbed.begin(), already_absorbed.end());
    for (std::size_t r = 0; r < out.size(); ++r) {
        if (source_mask[r] || out[r])
            continue;
        if (rng.uniform() < prob)
            out[r] = 1;
    }
    return out;
}

DiffusionState apply_absorbing_state(DiffusionState state, const NoiseSchedule& schedule,
                                     std::span<const double> mask_embedding, Rng& rng)
{
    if (state.t > schedule.T)
        throw ConfigError("diffusion state step " + std::to_string(state.t) + " > T");
    const std::size_t rows = state.z.dim(0), width = state.z.dim(1);
    if (mask_embedding.size() != width)
        throw DimensionError("mask embedding width " + std::to_string(mask_embedding.size()) + " for latents " +
                             shape_str(state.z.shape()));
    if (state.absorbed.empty())
        state.absorbed.assign(rows, 0);
    if (state.source_mask.size() != rows || state.absorbed.size() != rows)
        throw DimensionError("diffusion state masks do not match " + std::to_string(rows) + " rows");
    state.absorbed = draw_absorption(state.absorbed, state.source_mask, schedule.absorb_prob[state.t], rng);
    for (std::size_t r = 0; r < rows; ++r)
        if (state.absorbed[r])
            std::copy(mask_embedding.begin(), mask_embedding.end(), state.z.row(r).begin());
    return state;
}

LossTerms diffusion_loss(const Batch& batch, const DenoiserModel& model, const NoiseSchedule& schedule,
                         const LossConfig& cfg, Rng& rng, ParamBinder& bind)
{
    if (batch.batch_size == 0)
        throw BatchError("empty batch");
    if (schedule.T != model.config.T)
        throw ConfigError("schedule length " + std::to_string(schedule.T) + " differs from model T=" +
                          std::to_string(model.config.T));
    Tape& tape = bind.tape();
    const std::size_t width = model.config.width;
    Var emb = bind(model.embedding);
    LossTerms terms;
    Var total;
    for (std::size_t b = 0; b < batch.batch_size; ++b) {
        const std::size_t len = batch.length(b);
        const auto row_ids = batch.row_ids(b).first(len);
        const auto row_src = batch.row_source(b).first(len);
        std::vector<std::size_t> target_pos, target_ids;
        for (std::size_t j = 0; j < len; ++j)
            if (!row_src[j]) {
                target_pos.push_back(j);
                target_ids.push_back(row_ids[j]);
            }
        if (target_pos.empty())
            throw BatchError("batch row " + std::to_string(b) + " has no target positions");

        const std::size_t t = rng.uniform_int(2, schedule.T);
        const NoiseDraw draw = draw_noise(len, width, schedule.alpha_bar[t], row_src, rng);
        const std::vector<std::uint8_t> none(len, 0);
        const std::vector<std::uint8_t> absorbed = draw_absorption(none, row_src, schedule.absorb_prob[t], rng);

        Var z0 = gather_rows(emb, checked_ids(row_ids, model.config));
        Tensor coef({len, width});
        std::vector<std::size_t> absorbed_rows;
        for (std::size_t r = 0; r < len; ++r) {
            const double c = absorbed[r] ? 0.0 : draw.coef[r];
            std::fill(coef.row(r).begin(), coef.row(r).end(), c);
            if (absorbed[r])
                absorbed_rows.push_back(r);
        }
        Tensor noise = draw.noise;
        for (std::size_t r : absorbed_rows)
            std::fill(noise.row(r).begin(), noise.row(r).end(), 0.0);
        Var z_t = add(mul(z0, tape.constant(std::move(coef))), tape.constant(std::move(noise)));
        terms.absorbed += absorbed_rows.size();
        if (!absorbed_rows.empty()) {
            const std::vector<std::size_t> mask_ids(absorbed_rows.size(), kMaskId);
            z_t = add(z_t, scatter_rows(gather_rows(emb, mask_ids), absorbed_rows, len));
        }

        DenoiserOutput out = f_theta(z_t, t, model, bind);
        Var pred = gather_rows(out.z0_hat, target_pos);
        Var anchor = gather_rows(z0, target_pos);
        Var mse = mean(sqdiff(pred, anchor));
        Var reg = scale(mean(mul(anchor, anchor)), cfg.reg_lambda);
        Var rounding = cross_entropy_rows(token_logits(pred, model, bind), target_ids);
        Var row_loss = add(add(mse, reg), scale(rounding, cfg.rounding_weight));
        if (cfg.include_aux)
            row_loss = add(row_loss, out.aux_loss);
        total = total.valid() ? add(total, row_loss) : row_loss;

        terms.mse += mse.value().item();
        terms.reg += reg.value().item();
        terms.rounding += rounding.value().item();
        terms.aux += out.aux_loss.value().item();
        if (terms.routing.empty())
            terms.routing = std::move(out.routing);
        else
            for (std::size_t l = 0; l < out.routing.size(); ++l)
                terms.routing[l].merge(out.routing[l]);
    }
    const double n = static_cast<double>(batch.batch_size);
    terms.total = scale(total, 1.0 / n);
    terms.mse /= n;
    terms.reg /= n;
    terms.rounding /= n;
    terms.aux /= n;
    return terms;
}

} // namespace mdsq

#include "mdsq/train.hpp"

#include "mdsq/diffusion.hpp"
#include "mdsq/error.hpp"
#include "mdsq/rng.hpp"
#include "mdsq/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>

namespace mdsq {

void Adam::step(DenoiserModel& model)
{
    auto params = model.named_parameters();
    if (m_.empty()) {
        for (const NamedTensor& p : params) {
            m_.emplace_back(p.tensor->size(), 0.0);
            v_.emplace_back(p.tensor->size(), 0.0);
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i].tensor;
        if (!p.has_grad())
            continue;
        auto w = p.data();
        auto g = p.grad();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            w[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.adam_eps);
        }
    }
    model.enforce_frozen();
}

double clip_grad_norm(DenoiserModel& model, double max_norm)
{
    double sq = 0.0;
    for (const NamedTensor& p : model.named_parameters())
        if (p.tensor->has_grad())
            for (double g : p.tensor->grad())
                sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const NamedTensor& p : model.named_parameters())
            if (p.tensor->has_grad())
                for (double& g : p.tensor->grad())
                    g *= s;
    }
    return norm;
}

void write_log_entry(std::ostream& os, const TrainLogEntry& e)
{
    os << "step=" << e.step << " stage=" << e.stage << " loss=" << e.loss << " mse=" << e.mse << " reg=" << e.reg
       << " rounding=" << e.rounding << " aux=" << e.aux << " grad_norm=" << e.grad_norm << " load=";
    for (std::size_t l = 0; l < e.load_fraction.size(); ++l) {
        os << (l ? ";" : "");
        for (std::size_t i = 0; i < e.load_fraction[l].size(); ++i)
            os << (i ? "," : "") << e.load_fraction[l][i];
    }
    os << '\n';
}

namespace {

std::vector<std::size_t> pairs_within(std::span<const TextPair> corpus, const Vocab& vocab, std::size_t max_len)
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < corpus.size(); ++i)
        if (encoded_length(vocab, corpus[i]) <= max_len)
            out.push_back(i);
    return out;
}

} // namespace

TrainResult train_model(DenoiserModel& model, std::span<const TextPair> corpus, const Vocab& vocab,
                        const RunConfig& config, const TrainOptions& options)
{
    config.validate();
    if (corpus.empty())
        throw BatchError("training corpus is empty");
    if (vocab.size() != model.config.vocab_size)
        throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " ids, model expects " +
                          std::to_string(model.config.vocab_size));
    const TrainConfig& tc = config.train;
    const NoiseSchedule schedule = config.schedule_table();
    const LossConfig loss_cfg = config.loss();
    const std::size_t full_window = model.config.window;
    const std::size_t max_len = model.config.max_seq_len;

    const std::vector<std::size_t> full_pool = pairs_within(corpus, vocab, max_len);
    if (full_pool.size() != corpus.size())
        throw LengthError("corpus pair exceeds max_seq_len " + std::to_string(max_len));
    std::vector<std::size_t> short_pool = pairs_within(corpus, vocab, max_len / 2);
    if (short_pool.empty())
        short_pool = full_pool;
    const std::size_t stage1_steps = static_cast<std::size_t>(tc.stage1_fraction * static_cast<double>(tc.steps));

    Rng root(tc.seed);
    Rng data_rng = root.split(1);
    Rng noise_rng = root.split(2);
    Adam adam(tc);
    TrainResult result;
    const auto t0 = std::chrono::steady_clock::now();

    for (std::size_t step = 1; step <= tc.steps; ++step) {
        const bool stage1 = step <= stage1_steps;
        model.config.window = stage1 ? std::max<std::size_t>(2, (full_window / 2) & ~std::size_t{1}) : full_window;
        const std::vector<std::size_t>& pool = stage1 ? short_pool : full_pool;
        std::vector<TextPair> picked;
        for (std::size_t b = 0; b < tc.batch_size; ++b)
            picked.push_back(corpus[pool[data_rng.uniform_int(0, pool.size() - 1)]]);
        const Batch batch = batchify(picked, vocab, max_len, picked.size()).front();

        model.zero_grad();
        Tape tape;
        ParamBinder bind(tape, true);
        LossTerms terms = diffusion_loss(batch, model, schedule, loss_cfg, noise_rng, bind);
        const double loss = terms.total.value().item();
        if (!std::isfinite(loss)) {
            model.config.window = full_window;
            throw NumericError("non-finite loss at step " + std::to_string(step));
        }
        tape.backward(terms.total);
        model.enforce_frozen();
        const double gnorm = clip_grad_norm(model, tc.grad_clip);
        if (!std::isfinite(gnorm)) {
            model.config.window = full_window;
            throw NumericError("non-finite gradient at step " + std::to_string(step));
        }
        adam.step(model);

        result.final_loss = loss;
        result.steps_run = step;
        if (step % tc.log_every == 0 || step == tc.steps) {
            TrainLogEntry e{step, stage1 ? 1u : 2u, loss, terms.mse, terms.reg, terms.rounding, terms.aux, gnorm, {}};
            for (const RoutingStats& r : terms.routing)
                e.load_fraction.push_back(r.load_fraction());
            if (options.log) {
                write_log_entry(*options.log, e);
                options.log->flush();
            }
            result.log.push_back(std::move(e));
        }
        if (tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && options.on_checkpoint) {
            model.config.window = full_window;
            options.on_checkpoint(step, model);
        }
        if (options.stop_early) {
            model.config.window = full_window;
            if (options.stop_early(step, model)) {
                result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                break;
            }
        }
        result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (options.time_budget_seconds > 0.0 && result.seconds >= options.time_budget_seconds)
            break;
    }
    model.config.window = full_window;
    model.zero_grad();
    return result;
}

std::string generate(const DenoiserModel& model, const NoiseSchedule& schedule, const Vocab& vocab,
                     std::string_view source, std::size_t target_len, const SamplerConfig& cfg)
{
    const std::vector<std::size_t> src = encode_source(vocab, source);
    const SampleResult r = sample(src, target_len, model, schedule, cfg);
    return vocab.decode(r.target_ids);
}

GenerationResult evaluate_pairs(const DenoiserModel& model, const NoiseSchedule& schedule, const Vocab& vocab,
                                std::span<const TextPair> pairs, const SamplerConfig& cfg)
{
    GenerationResult out;
    std::vector<std::string> refs;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        SamplerConfig c = cfg;
        c.seed = cfg.seed + i;
        const std::size_t len = utf8_decode(pairs[i].target).size();
        out.outputs.push_back(generate(model, schedule, vocab, pairs[i].source, len, c));
        refs.push_back(pairs[i].target);
    }
    out.report = evaluate_text(out.outputs, refs, 2);
    return out;
}

} // namespace mdsq

#pragma once
// Training loop (Adam, two-stage window/length curriculum) and sampling-based
// evaluation over text pairs.

#include "mdsq/config.hpp"
#include "mdsq/data.hpp"
#include "mdsq/denoiser.hpp"
#include "mdsq/metrics.hpp"

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mdsq {

class Adam {
public:
    explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

    // Bias-corrected adaptive-moment update from the parameters' grad buffers.
    void step(DenoiserModel& model);
    std::size_t steps() const { return t_; }

private:
    TrainConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Scales all gradients so their global L2 norm is at most max_norm (0: no-op).
// Returns the norm before scaling.
double clip_grad_norm(DenoiserModel& model, double max_norm);

struct TrainLogEntry {
    std::size_t step = 0;
    std::size_t stage = 1;
    double loss = 0.0;
    double mse = 0.0;
    double reg = 0.0;
    double rounding = 0.0;
    double aux = 0.0;
    double grad_norm = 0.0;
    std::vector<std::vector<double>> load_fraction;  // per MoE layer, per expert
};

void write_log_entry(std::ostream& os, const TrainLogEntry& e);

struct TrainOptions {
    std::ostream* log = nullptr;
    // Called every train.checkpoint_every steps (when nonzero).
    std::function<void(std::size_t step, const DenoiserModel&)> on_checkpoint;
    // Polled after every optimizer step with the full window restored; true ends training.
    std::function<bool(std::size_t step, const DenoiserModel&)> stop_early;
    // Stops early once exceeded (0: unlimited).
    double time_budget_seconds = 0.0;
};

struct TrainResult {
    std::vector<TrainLogEntry> log;
    double final_loss = 0.0;
    std::size_t steps_run = 0;
    double seconds = 0.0;
};

// Stage 1 covers floor(stage1_fraction * steps) steps at half the window and
// pairs no longer than max_seq_len / 2; stage 2 uses the full configuration.
// Throws NumericError on a non-finite loss.
TrainResult train_model(DenoiserModel& model, std::span<const TextPair> corpus, const Vocab& vocab,
                        const RunConfig& config, const TrainOptions& options = {});

std::string generate(const DenoiserModel& model, const NoiseSchedule& schedule, const Vocab& vocab,
                     std::string_view source, std::size_t target_len, const SamplerConfig& cfg);

struct GenerationResult {
    std::vector<std::string> outputs;
    EvalReport report;
};

// Generates each target with its reference length; pair i samples with seed
// cfg.seed + i.
GenerationResult evaluate_pairs(const DenoiserModel& model, const NoiseSchedule& schedule, const Vocab& vocab,
                                std::span<const TextPair> pairs, const SamplerConfig& cfg);

} // namespace mdsq

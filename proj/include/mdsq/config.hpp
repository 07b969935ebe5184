#pragma once
// Run configuration: a flat key=value text format covering the model, noise
// schedule, training, sampler and output paths.

#include "mdsq/denoiser.hpp"
#include "mdsq/diffusion.hpp"
#include "mdsq/sampler.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace mdsq {

struct ScheduleConfig {
    std::size_t T = 2048;
    double p_max = 0.1;
    double lambda = 1.0;  // weight of the latent-norm regularizer
    double rounding_weight = 1.0;
};

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global L2 norm; 0 disables
    std::size_t batch_size = 16;
    std::size_t steps = 1000;
    std::uint64_t seed = 0;
    // Fraction of steps trained at half window and half sequence length.
    double stage1_fraction = 0.25;
    std::size_t log_every = 10;
    std::size_t checkpoint_every = 0;  // 0: final checkpoint only
};

struct PathsConfig {
    std::string corpus;
    std::string checkpoint = "model.ckpt";
    std::string logdir = "runs";
};

struct RunConfig {
    ModelConfig model;
    ScheduleConfig schedule;
    TrainConfig train;
    SamplerConfig sampler;
    PathsConfig paths;
    std::u32string alphabet;  // empty: derived from the corpus at train time

    // Keys in canonical order, e.g. "model.width", "schedule.T", "train.lr".
    static const std::vector<std::string>& keys();
    static bool has_key(std::string_view key);

    // Throws ConfigError naming the key on unknown keys or malformed values.
    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;

    // Every violated constraint (field ranges and cross-field consistency)
    // is listed in a single ConfigError.
    void validate() const;
    std::vector<std::string> violations() const;

    // Fully resolved "key = value" lines for every key, defaults included.
    std::string to_text() const;
    // Starts from defaults; '#' comments and blank lines are ignored.
    static RunConfig from_text(std::string_view text);

    // FNV-1a over the keys that determine tensor shapes and the schedule
    // (model.*, schedule.T, schedule.p_max, vocab.alphabet).
    std::uint64_t model_hash() const;

    LossConfig loss() const;
    NoiseSchedule schedule_table() const;
};

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& config);

// MDSQ_LOGDIR overrides paths.logdir when set and non-empty.
std::string resolve_logdir(const RunConfig& config);

struct AblationRow {
    std::string name;
    bool sparse = true;
    std::size_t steps = 2048;
    std::size_t window = 512;
};

// The six configurations of the window / steps / attention-type ablation.
const std::vector<AblationRow>& ablation_rows();
const AblationRow& ablation_row(std::string_view name);
// Applies a row with window and step counts divided by `scale` (toy runs);
// sampler steps are capped at the new T.
RunConfig apply_ablation(RunConfig config, const AblationRow& row, std::size_t scale = 1);

} // namespace mdsq

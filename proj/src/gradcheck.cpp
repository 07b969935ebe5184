#include "mdsq/gradcheck.hpp"

#include "mdsq/data.hpp"
#include "mdsq/diffusion.hpp"
#include "mdsq/error.hpp"
#include "mdsq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace mdsq {

std::string parameter_group(std::string_view name)
{
    auto has = [&](std::string_view s) { return name.find(s) != std::string_view::npos; };
    if (name == "embedding" || name == "positions" || name.rfind("time.", 0) == 0)
        return "embeddings";
    if (has(".attn.") || has(".ln1."))
        return "attention";
    if (has(".moe.gate"))
        return "gates";
    if (has(".moe.expert") || has(".ffn.") || has(".ln2."))
        return "experts";
    return "head";
}

const std::vector<std::string>& parameter_groups()
{
    static const std::vector<std::string> groups = {"embeddings", "attention", "gates", "experts", "head"};
    return groups;
}

bool GradCheckReport::passed() const
{
    return std::all_of(groups.begin(), groups.end(), [](const GradCheckGroup& g) { return g.passed; });
}

RunConfig tiny_gradcheck_config()
{
    RunConfig c;
    c.alphabet = toy_alphabet(10);
    c.model.vocab_size = kFirstCharId + c.alphabet.size();
    c.model.width = 8;
    c.model.num_layers = 2;
    c.model.num_heads = 2;
    c.model.window = 4;
    c.model.dilations = {1, 2};
    c.model.global_positions = {0};
    c.model.num_experts = 3;
    c.model.top_k = 2;
    c.model.hidden = 12;
    c.model.aux_loss_coeff = 0.05;
    c.model.max_seq_len = 16;
    c.schedule.T = 32;
    c.model.T = 32;
    c.schedule.p_max = 0.5;
    c.sampler.num_steps = 8;
    c.sampler.max_len = 16;
    return c;
}

namespace {

struct Candidate {
    std::size_t param;
    std::size_t index;
};

} // namespace

GradCheckReport gradcheck(const RunConfig& config, std::uint64_t seed, const GradCheckOptions& options)
{
    config.validate();
    if (config.model.width > 16)
        throw ConfigError("gradcheck needs a tiny config (width <= 16), got width " +
                          std::to_string(config.model.width));
    const Vocab vocab = Vocab::from_alphabet(config.alphabet.empty()
                                                 ? toy_alphabet(config.model.vocab_size)
                                                 : config.alphabet);
    if (vocab.size() != config.model.vocab_size)
        throw ConfigError("gradcheck vocabulary does not match model.vocab_size");

    Rng root(seed);
    Rng init_rng = root.split(0);
    DenoiserModel model = DenoiserModel::init(config.model, init_rng);
    const std::size_t max_len = (config.model.max_seq_len - 2) / 2;
    const std::vector<TextPair> pairs =
        make_toy_task(ToyTask::kReverse, 2, std::min<std::size_t>(3, max_len), std::min<std::size_t>(5, max_len),
                      vocab.size(), root.split(1).seed());
    const Batch batch = batchify(pairs, vocab, config.model.max_seq_len, pairs.size()).front();
    const NoiseSchedule schedule = config.schedule_table();
    const LossConfig loss_cfg = config.loss();

    // Prefer a noise draw that exercises the absorbing state.
    std::uint64_t noise_seed = root.split(2).seed();
    std::size_t absorbed = 0;
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
        Tape tape;
        ParamBinder bind(tape, false);
        Rng r(noise_seed + attempt);
        absorbed = diffusion_loss(batch, model, schedule, loss_cfg, r, bind).absorbed;
        if (absorbed > 0 || config.schedule.p_max == 0.0) {
            noise_seed += attempt;
            break;
        }
    }

    auto loss_value = [&]() {
        Tape tape;
        ParamBinder bind(tape, false);
        Rng r(noise_seed);
        return diffusion_loss(batch, model, schedule, loss_cfg, r, bind).total.value().item();
    };

    model.zero_grad();
    {
        Tape tape;
        ParamBinder bind(tape, true);
        Rng r(noise_seed);
        LossTerms terms = diffusion_loss(batch, model, schedule, loss_cfg, r, bind);
        tape.backward(terms.total);
    }
    if (options.corrupt)
        options.corrupt(model);

    auto params = model.named_parameters();
    GradCheckReport report;
    report.absorbed_rows = absorbed;
    report.tolerance = options.tolerance;
    Rng pick = root.split(3);
    for (const std::string& group : parameter_groups()) {
        std::vector<Candidate> cands;
        for (std::size_t p = 0; p < params.size(); ++p) {
            if (parameter_group(params[p].name) != group)
                continue;
            const std::size_t n = params[p].tensor->size();
            for (std::size_t i = 0; i < n; ++i) {
                if (params[p].name == "embedding" && i / config.model.width == kPadId)
                    continue;
                cands.push_back({p, i});
            }
        }
        std::shuffle(cands.begin(), cands.end(), pick.engine());
        cands.resize(std::min(cands.size(), options.per_group));

        GradCheckGroup g;
        g.group = group;
        for (const Candidate& c : cands) {
            Tensor& t = *params[c.param].tensor;
            const double analytic = t.has_grad() ? t.grad()[c.index] : 0.0;
            const double saved = t.data()[c.index];
            t.data()[c.index] = saved + options.step;
            const double up = loss_value();
            t.data()[c.index] = saved - options.step;
            const double down = loss_value();
            t.data()[c.index] = saved;
            const double numeric = (up - down) / (2.0 * options.step);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), options.abs_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            g.entries.push_back({params[c.param].name, c.index, analytic, numeric, rel});
            if (rel > g.max_rel_err || g.worst_param.empty()) {
                g.max_rel_err = std::max(g.max_rel_err, rel);
                g.worst_param = params[c.param].name + "[" + std::to_string(c.index) + "]";
            }
        }
        g.passed = !g.entries.empty() && g.max_rel_err < options.tolerance;
        report.groups.push_back(std::move(g));
    }
    return report;
}

void write_gradcheck_report(std::ostream& os, const GradCheckReport& report)
{
    for (const GradCheckGroup& g : report.groups)
        os << (g.passed ? "PASS " : "FAIL ") << g.group << " checked=" << g.entries.size()
           << " max_rel_err=" << g.max_rel_err << " worst=" << g.worst_param << '\n';
    os << "absorbed_rows=" << report.absorbed_rows << " tolerance=" << report.tolerance << '\n';
    os << (report.passed() ? "gradcheck passed" : "gradcheck FAILED") << '\n';
}

} // namespace mdsq

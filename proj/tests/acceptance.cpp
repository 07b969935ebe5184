// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// fails. Criterion numbers given as arguments restrict the run.

#include "mdsq/attention.hpp"
#include "mdsq/config.hpp"
#include "mdsq/data.hpp"
#include "mdsq/denoiser.hpp"
#include "mdsq/diffusion.hpp"
#include "mdsq/gradcheck.hpp"
#include "mdsq/metrics.hpp"
#include "mdsq/moe.hpp"
#include "mdsq/rng.hpp"
#include "mdsq/sampler.hpp"
#include "mdsq/train.hpp"
#include "oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace mdsq;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

double max_diff(std::span<const double> a, std::span<const double> b)
{
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::string fmt(double x)
{
    std::ostringstream os;
    os << x;
    return os.str();
}

// ---- 1 ----------------------------------------------------------------------

Outcome attention_equivalence()
{
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + rng.uniform_int(0, 31);
        const std::size_t heads = 1 + rng.uniform_int(0, 3);
        const std::size_t width = heads * (1 + rng.uniform_int(0, 7));
        SparseAttentionConfig cfg;
        cfg.window = 2 * (1 + rng.uniform_int(0, 7));
        cfg.dilation = 1 + rng.uniform_int(0, 3);
        cfg.num_heads = heads;
        cfg.head_dim = width / heads;
        const std::size_t n_globals = rng.uniform_int(0, 2);
        for (std::size_t g = 0; g < n_globals; ++g)
            cfg.global_positions.push_back(rng.uniform_int(0, n - 1));
        const Tensor q = Tensor::randn({n, width}, rng), k = Tensor::randn({n, width}, rng),
                     v = Tensor::randn({n, width}, rng);
        Tape tape;
        const Var out = masked_multihead_attention(tape.watch(q), tape.watch(k), tape.watch(v),
                                                   build_window_mask(n, cfg), heads);
        const auto ref = oracle::dense_attention(q.vec(), k.vec(), v.vec(), oracle::window_bits(n, cfg), n, width, heads);
        worst = std::max(worst, max_diff(out.value().data(), ref));
    }
    return {worst < 1e-10, "200 configs, max abs diff " + fmt(worst)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome complexity_slopes()
{
    SparseAttentionConfig cfg;
    cfg.window = 32;
    cfg.dilation = 1;
    cfg.num_heads = 1;
    cfg.head_dim = 8;
    const BenchReport r = bench_attention({128, 256, 512, 1024, 2048}, cfg, 1);
    bool square = true;
    for (const BenchRow& row : r.rows)
        if (row.attention_kind == "dense")
            square = square && row.pair_count == row.seq_len * row.seq_len;
    const bool ok = square && std::abs(r.sparse_pair_slope - 1.0) <= 0.1 && std::abs(r.dense_pair_slope - 2.0) <= 0.1;
    return {ok, "sparse slope " + fmt(r.sparse_pair_slope) + ", dense slope " + fmt(r.dense_pair_slope) +
                    (square ? ", dense = n^2" : ", dense != n^2")};
}

// ---- 3 ----------------------------------------------------------------------

Outcome receptive_field_reach()
{
    Rng rng(303);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 20; ++trial) {
        SparseAttentionConfig cfg;
        cfg.num_layers = 1 + rng.uniform_int(0, 3);
        cfg.dilation = 1 + rng.uniform_int(0, 2);
        cfg.window = 2 * (1 + rng.uniform_int(0, 3));
        cfg.num_heads = 1;
        cfg.head_dim = 1;
        const std::size_t n = 2 * receptive_field(cfg) + 33;
        const std::size_t center = n / 2;
        const TokenReach bfs = reachability_span(n, cfg)[center];
        const TokenReach cf = window_reach_closed_form(n, cfg, center);
        const std::size_t formula = cfg.num_layers * cfg.dilation * cfg.window;
        if (bfs.count != cf.count || bfs.lo != cf.lo || bfs.hi != cf.hi || bfs.extent() != formula ||
            receptive_field(cfg) != formula)
            ++mismatches;
    }
    return {mismatches == 0, "20 configs, " + std::to_string(mismatches) + " mismatches"};
}

// ---- 4 ----------------------------------------------------------------------

Outcome gradient_check()
{
    double worst = 0.0;
    std::string failing;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const GradCheckReport r = gradcheck(tiny_gradcheck_config(), seed);
        for (const GradCheckGroup& g : r.groups) {
            worst = std::max(worst, g.max_rel_err);
            if (!g.passed)
                failing += " seed" + std::to_string(seed) + ":" + g.group;
        }
        if (r.absorbed_rows == 0)
            failing += " seed" + std::to_string(seed) + ":no-absorbed-rows";
    }
    return {failing.empty(), "5 seeds, worst rel err " + fmt(worst) + failing};
}

// ---- 5 ----------------------------------------------------------------------

Outcome moe_algebra()
{
    Rng rng(505);
    double simplex = 0.0, dense = 0.0, unselected = 0.0, identical = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t width = 2 + rng.uniform_int(0, 6), hidden = 2 + rng.uniform_int(0, 6);
        const std::size_t experts = 2 + rng.uniform_int(0, 4);
        const std::size_t tokens = 1 + rng.uniform_int(0, 6);
        const Tensor x = Tensor::randn({tokens, width}, rng);

        MoELayer layer = MoELayer::init(width, hidden, experts, experts, 0.0, rng);
        for (std::size_t t = 0; t < tokens; ++t) {
            const Tensor p = gate(layer, x.row(t));
            double sum = 0.0;
            for (double v : p.vec()) {
                sum += v;
                simplex = std::max(simplex, std::max(0.0, -v));
            }
            simplex = std::max(simplex, std::abs(sum - 1.0));
        }
        {
            Tape tape;
            ParamBinder bind(tape, false);
            const MoEOutput out = moe_forward(tape.watch(x), layer, bind);
            for (std::size_t t = 0; t < tokens; ++t) {
                const auto ref = oracle::dense_mixture(layer, std::vector<double>(x.row(t).begin(), x.row(t).end()));
                dense = std::max(dense, max_diff(out.out.value().row(t), ref));
            }
        }

        // Single token, top-1: every expert but the routed one gets zero gradient.
        layer.top_k = 1;
        const Tensor one({1, width}, std::vector<double>(x.row(0).begin(), x.row(0).end()));
        {
            for (FeedForward& e : layer.experts)
                for (Tensor* t : {&e.w1, &e.b1, &e.w2, &e.b2})
                    t->clear_grad();
            Tape tape;
            ParamBinder bind(tape, true);
            const MoEOutput out = moe_forward(tape.watch(one), layer, bind);
            tape.backward(sum(out.out));
            const std::size_t chosen = top_k_experts(gate(layer, one.row(0)).vec(), 1)[0];
            for (std::size_t e = 0; e < experts; ++e) {
                if (e == chosen)
                    continue;
                for (const Tensor* t : {&layer.experts[e].w1, &layer.experts[e].b1, &layer.experts[e].w2,
                                        &layer.experts[e].b2})
                    if (t->has_grad())
                        for (double g : t->grad())
                            unselected = std::max(unselected, std::abs(g));
            }
        }

        // Identical experts: any routing returns the shared expert's output.
        layer.top_k = 1 + rng.uniform_int(0, experts - 1);
        for (std::size_t e = 1; e < experts; ++e)
            layer.experts[e] = layer.experts[0];
        Tape tape;
        ParamBinder bind(tape, false);
        const MoEOutput out = moe_forward(tape.watch(x), layer, bind);
        for (std::size_t t = 0; t < tokens; ++t) {
            const auto ref = oracle::relu_ffn(layer.experts[0], std::vector<double>(x.row(t).begin(), x.row(t).end()));
            identical = std::max(identical, max_diff(out.out.value().row(t), ref));
        }
    }
    const bool ok = simplex <= 1e-12 && dense <= 1e-10 && unselected == 0.0 && identical <= 1e-10;
    return {ok, "simplex " + fmt(simplex) + ", dense " + fmt(dense) + ", unselected grad " + fmt(unselected) +
                    ", identical " + fmt(identical)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome forward_statistics()
{
    const std::size_t T = 1000, draws = 100000;
    const NoiseSchedule sched = build_sqrt_schedule(T, 0.5);
    Rng rng(606);
    const Tensor z0 = Tensor::randn({1, 4}, rng);
    const std::vector<std::uint8_t> target_row{0};
    std::string bad;
    double worst_z = 0.0;
    for (std::size_t t : {10u, 100u, 300u, 600u, 1000u}) {
        const double ab = sched.alpha_bar[t];
        std::vector<double> s1(4, 0.0), s2(4, 0.0);
        for (std::size_t i = 0; i < draws; ++i) {
            const Tensor zt = forward_noise(z0, t, sched, target_row, rng);
            for (std::size_t c = 0; c < 4; ++c) {
                s1[c] += zt[c];
                s2[c] += zt[c] * zt[c];
            }
        }
        for (std::size_t c = 0; c < 4; ++c) {
            const double var = 1.0 - ab, mu = std::sqrt(ab) * z0[c];
            const double mean = s1[c] / draws;
            const double emp_var = s2[c] / draws - mean * mean;
            // Standard errors of the sample mean and variance of a Gaussian.
            const double z_mean = std::abs(mean - mu) / std::sqrt(var / draws);
            const double z_var = std::abs(emp_var - var) / (var * std::sqrt(2.0 / (draws - 1)));
            worst_z = std::max({worst_z, z_mean, z_var});
            if (z_mean > 3.0 || z_var > 3.0)
                bad += " t=" + std::to_string(t);
        }
    }

    // Absorbed fraction at several t.
    double worst_abs = 0.0;
    const Tensor mask_row({4}, std::vector<double>{9, 9, 9, 9});
    for (std::size_t t : {100u, 500u, 1000u}) {
        const std::size_t rows = 20000;
        DiffusionState st;
        st.z = Tensor({rows, 4});
        st.t = t;
        st.absorbed.assign(rows, 0);
        st.source_mask.assign(rows, 0);
        st = apply_absorbing_state(std::move(st), sched, mask_row.vec(), rng);
        const double p = sched.absorb_prob[t];
        const double frac =
            static_cast<double>(std::count(st.absorbed.begin(), st.absorbed.end(), 1)) / static_cast<double>(rows);
        const double z = std::abs(frac - p) / std::sqrt(p * (1 - p) / rows);
        worst_abs = std::max(worst_abs, z);
        if (z > 3.0)
            bad += " absorb t=" + std::to_string(t);
    }

    // p_max = 0 is the pure Gaussian process, bit for bit.
    const NoiseSchedule gauss = build_sqrt_schedule(T, 0.0);
    Rng a(7), b(7);
    const Tensor big = Tensor::randn({64, 4}, rng);
    const std::vector<std::uint8_t> src(64, 0);
    DiffusionState st;
    st.z = forward_noise(big, 500, gauss, src, a);
    st.t = 500;
    st.absorbed.assign(64, 0);
    st.source_mask = src;
    st = apply_absorbing_state(std::move(st), gauss, mask_row.vec(), a);
    const Tensor plain = forward_noise(big, 500, gauss, src, b);
    const bool exact = st.z.vec() == plain.vec() &&
                       std::count(st.absorbed.begin(), st.absorbed.end(), 1) == 0;
    if (!exact)
        bad += " p_max=0 differs";
    return {bad.empty(), "worst moment z " + fmt(worst_z) + ", worst absorb z " + fmt(worst_abs) +
                             (exact ? ", p_max=0 exact" : "") + bad};
}

// ---- 7 ----------------------------------------------------------------------

Outcome sampler_oracle()
{
    ModelConfig mc;
    mc.vocab_size = 14;
    mc.width = 8;
    mc.num_layers = 2;
    mc.num_heads = 2;
    mc.window = 4;
    mc.num_experts = 2;
    mc.top_k = 1;
    mc.hidden = 8;
    mc.T = 64;
    mc.max_seq_len = 32;
    Rng rng(707);
    const DenoiserModel model = DenoiserModel::init(mc, rng);
    const NoiseSchedule sched = build_sqrt_schedule(mc.T);
    const std::vector<std::size_t> src{kBosId, 5, 9, 6, kEosId};
    const std::vector<std::size_t> tgt{7, 4, 11, 12, 8};
    std::vector<std::size_t> full = src;
    full.insert(full.end(), tgt.begin(), tgt.end());
    Tensor truth({full.size(), mc.width});
    for (std::size_t r = 0; r < full.size(); ++r)
        for (std::size_t c = 0; c < mc.width; ++c)
            truth.at(r, c) = model.embedding.at(full[r], c);
    const DenoiseFn oracle = [&](const Tensor&, std::size_t) { return truth; };

    double worst = 0.0;
    for (std::size_t steps : {std::size_t{2}, std::size_t{8}, mc.T})
        for (bool clamp : {false, true}) {
            SamplerConfig cfg;
            cfg.num_steps = steps;
            cfg.clamp_each_step = clamp;
            cfg.max_len = 32;
            const SampleResult r = sample(src, tgt.size(), model, sched, cfg, oracle);
            worst = std::max(worst, max_diff(r.latents.data(), truth.data()));
        }

    SamplerConfig cfg;
    cfg.num_steps = 16;
    cfg.seed = 3;
    cfg.max_len = 32;
    const SampleResult a = sample(src, tgt.size(), model, sched, cfg);
    const SampleResult b = sample(src, tgt.size(), model, sched, cfg);
    const bool same = a.latents.vec() == b.latents.vec() && a.target_ids == b.target_ids;
    return {worst < 1e-8 && same,
            "grids {2,8,T}: max latent error " + fmt(worst) + (same ? ", seeded runs bit-identical" : ", seeded runs differ")};
}

// ---- 8 ----------------------------------------------------------------------

constexpr double kTrainBudgetSeconds = 30 * 60;

RunConfig desk_config(const Vocab& vocab, std::uint64_t seed)
{
    RunConfig c;
    c.alphabet = vocab.alphabet();
    c.model.vocab_size = vocab.size();
    c.model.width = 32;
    c.model.num_layers = 4;
    c.model.num_heads = 4;
    c.model.window = 40;
    c.model.dilations = {1, 1, 1, 1};
    c.model.global_positions = {0};
    c.model.num_experts = 4;
    c.model.top_k = 2;
    c.model.hidden = 64;
    c.model.max_seq_len = 40;
    c.schedule.T = 64;
    c.model.T = 64;
    c.sampler.num_steps = 64;
    c.sampler.max_len = 40;
    c.train.lr = 3e-3;
    c.train.batch_size = 16;
    c.train.steps = 40000;
    c.train.seed = seed;
    return c;
}

struct TaskData {
    std::vector<TextPair> train, heldout;
};

TaskData task_data(ToyTask task)
{
    TaskData d;
    d.train = make_toy_task(task, 20000, 1, 16, 16, 11);
    std::set<std::string> seen;
    for (const TextPair& p : d.train)
        seen.insert(p.source);
    for (const TextPair& p : make_toy_task(task, 1000, 1, 16, 16, 977))
        if (!seen.count(p.source) && d.heldout.size() < 100)
            d.heldout.push_back(p);
    return d;
}

struct TrainedRun {
    double exact_match = 0.0;
    double seconds = 0.0;
    std::size_t steps = 0;
    RunConfig config;
    DenoiserModel model;
};

// Trains under the time budget, probing held-out accuracy periodically and
// stopping once the full held-out set reaches the target.
TrainedRun train_until(const TaskData& data, std::uint64_t seed, double target)
{
    const Vocab vocab = Vocab::from_alphabet(toy_alphabet(16));
    TrainedRun run;
    run.config = desk_config(vocab, seed);
    Rng init = Rng(seed).split(0);
    run.model = DenoiserModel::init(run.config.model, init);
    const NoiseSchedule sched = run.config.schedule_table();
    const std::vector<TextPair> probe(data.heldout.begin(), data.heldout.begin() + 20);

    TrainOptions opts;
    opts.time_budget_seconds = kTrainBudgetSeconds;
    opts.stop_early = [&](std::size_t step, const DenoiserModel& m) {
        if (step % 1000 != 0)
            return false;
        if (evaluate_pairs(m, sched, vocab, probe, run.config.sampler).report.exact_match < target)
            return false;
        return evaluate_pairs(m, sched, vocab, data.heldout, run.config.sampler).report.exact_match >= target;
    };
    const TrainResult r = train_model(run.model, data.train, vocab, run.config, opts);
    run.seconds = r.seconds;
    run.steps = r.steps_run;
    run.exact_match = evaluate_pairs(run.model, sched, vocab, data.heldout, run.config.sampler).report.exact_match;
    return run;
}

struct EndToEnd {
    Outcome outcome;
    std::optional<TrainedRun> copy_model;
};

EndToEnd end_to_end()
{
    EndToEnd e;
    std::string detail;
    bool all = true;
    for (ToyTask task : {ToyTask::kCopy, ToyTask::kReverse}) {
        const TaskData data = task_data(task);
        std::size_t passed = 0, failed = 0;
        detail += std::string(toy_task_name(task)) + ":";
        for (std::uint64_t seed = 0; seed < 3 && passed < 2 && failed < 2; ++seed) {
            TrainedRun run = train_until(data, seed, 0.9);
            const bool ok = run.exact_match >= 0.9;
            passed += ok;
            failed += !ok;
            detail += " seed" + std::to_string(seed) + "=" + fmt(run.exact_match) + "@" +
                      std::to_string(run.steps) + "steps/" + std::to_string(static_cast<int>(run.seconds)) + "s";
            if (task == ToyTask::kCopy && (!e.copy_model || run.exact_match > e.copy_model->exact_match))
                e.copy_model = std::move(run);
        }
        all = all && passed >= 2;
        detail += "; ";
    }
    e.outcome = {all, detail};
    return e;
}

// ---- 9 ----------------------------------------------------------------------

Outcome ablation_direction(const std::optional<TrainedRun>& copy)
{
    std::string detail;
    bool ok = true;

    // (a) halving sampler steps on the trained copy model.
    if (!copy) {
        ok = false;
        detail += "no trained copy model;";
    } else {
        const Vocab vocab = Vocab::from_alphabet(copy->config.alphabet);
        const TaskData data = task_data(ToyTask::kCopy);
        const NoiseSchedule sched = copy->config.schedule_table();
        const std::size_t T = copy->config.schedule.T;
        std::vector<double> em;
        for (std::size_t steps : {T, T / 2, T / 4}) {
            SamplerConfig cfg = copy->config.sampler;
            cfg.num_steps = steps;
            em.push_back(evaluate_pairs(copy->model, sched, vocab, data.heldout, cfg).report.exact_match);
        }
        detail += "copy exact match at T,T/2,T/4 steps: " + fmt(em[0]) + "," + fmt(em[1]) + "," + fmt(em[2]);
        for (std::size_t i = 1; i < em.size(); ++i) {
            const double p = std::clamp((em[i] + em[i - 1]) / 2.0, 0.01, 0.99);
            const double noise = 3.0 * std::sqrt(2.0 * p * (1.0 - p) / 100.0);
            if (em[i] - em[i - 1] > noise) {
                ok = false;
                detail += " (halving improved beyond 3 sigma)";
            }
        }
        detail += ";";
    }

    // (b) full-window sparse equals standard attention.
    Rng rng(909);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        ModelConfig mc;
        mc.vocab_size = 12;
        mc.width = 16;
        mc.num_layers = 2;
        mc.num_heads = 2;
        mc.num_experts = 3;
        mc.top_k = 2;
        mc.hidden = 16;
        mc.T = 32;
        mc.max_seq_len = 24;
        mc.window = 2 * mc.max_seq_len;
        mc.dilations = {1};
        const DenoiserModel sparse = DenoiserModel::init(mc, rng);
        DenoiserModel standard = sparse;
        standard.config.sparse_attention = false;
        const std::size_t n = 4 + rng.uniform_int(0, 20);
        const Tensor z = Tensor::randn({n, mc.width}, rng);
        const std::size_t t = 1 + rng.uniform_int(0, 31);
        worst = std::max(worst, max_diff(f_theta_values(z, t, sparse).data(), f_theta_values(z, t, standard).data()));
    }
    detail += " full-window sparse vs standard max diff " + fmt(worst);
    ok = ok && worst < 1e-10;

    SparseAttentionConfig cfg;
    cfg.window = 32;
    cfg.num_heads = 1;
    cfg.head_dim = 8;
    const BenchReport r = bench_attention({128, 256, 512, 1024, 2048}, cfg, 0);
    detail += "; pair slopes sparse " + fmt(r.sparse_pair_slope) + " dense " + fmt(r.dense_pair_slope);
    ok = ok && r.sparse_pair_slope < r.dense_pair_slope - 0.5;
    return {ok, detail};
}

// ---- 10 ---------------------------------------------------------------------

Outcome metrics_self_test()
{
    std::string bad;
    const auto c = [](std::string_view s) { return char_tokens(s); };
    const auto w = [](std::string_view s) { return word_tokens(s); };
    const std::vector<Tokens> same{w("the cat sat on the mat"), w("a b c d e")};
    if (bleu(same, same) != 1.0)
        bad += " bleu-identical";
    if (bleu({c("abc")}, {c("xyz")}) != 0.0)
        bad += " bleu-disjoint";
    const NgramPrecision p = modified_precision({w("the the the")}, {w("the cat")}, 1);
    if (p.clipped != 1 || p.total != 3)
        bad += " bleu-clipping";
    if (rouge_l(c("abcde"), c("abcde")) != 1.0)
        bad += " rouge-identical";
    if (rouge_l(c("abc"), c("xyz")) != 0.0)
        bad += " rouge-disjoint";
    const RougeL r = rouge_l_scores(c("abcd"), c("acd"));
    if (lcs_length(c("abcd"), c("acd")) != 3 || r.precision != 0.75 || r.recall != 1.0 ||
        std::abs(r.f1 - 6.0 / 7.0) > 1e-15)
        bad += " rouge-lcs";
    if (std::abs(distinct2({c("abab")}) - 2.0 / 3.0) > 1e-15)
        bad += " distinct2";
    const EvalReport e = evaluate_text({"hello", "world"}, {"hello", "world"});
    if (e.bleu != 1.0 || e.rouge_l != 1.0 || e.exact_match != 1.0)
        bad += " report-identical";
    return {bad.empty(), bad.empty() ? "hand-worked examples exact, identical corpora score 1" : "failed:" + bad};
}

} // namespace

int main(int argc, char** argv)
{
    std::set<int> only;
    for (int i = 1; i < argc; ++i)
        only.insert(std::atoi(argv[i]));
    int failures = 0;
    const auto report = [&](int n, const std::string& name, const std::function<Outcome()>& fn) {
        if (!only.empty() && !only.count(n))
            return;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << " (" << name << ", " << fmt(s) << "s): "
                  << o.detail << std::endl;
    };

    report(1, "sparse/dense attention equivalence", attention_equivalence);
    report(2, "pair-count complexity", complexity_slopes);
    report(3, "receptive field", receptive_field_reach);
    report(4, "gradient check", gradient_check);
    report(5, "MoE algebra", moe_algebra);
    report(6, "forward-process statistics", forward_statistics);
    report(7, "sampler oracle", sampler_oracle);
    std::optional<TrainedRun> copy;
    report(8, "end-to-end learning", [&] {
        EndToEnd e = end_to_end();
        copy = std::move(e.copy_model);
        return e.outcome;
    });
    report(9, "ablation directionality", [&] { return ablation_direction(copy); });
    report(10, "metrics self-test", metrics_self_test);
    return failures == 0 ? 0 : 1;
}

#include "mdsq/data.hpp"
#include "mdsq/error.hpp"
#include "mdsq/rng.hpp"
#include "mdsq/sampler.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace mdsq;
using mdsq::testing::max_abs_diff;

namespace {

ModelConfig small(std::size_t T)
{
    ModelConfig c;
    c.vocab_size = 12;
    c.width = 8;
    c.num_layers = 1;
    c.num_heads = 2;
    c.window = 4;
    c.num_experts = 2;
    c.top_k = 1;
    c.hidden = 8;
    c.T = T;
    c.max_seq_len = 32;
    return c;
}

Tensor rows_of(const DenoiserModel& m, const std::vector<std::size_t>& ids)
{
    Tensor out({ids.size(), m.config.width});
    for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t c = 0; c < m.config.width; ++c)
            out.at(r, c) = m.embedding.at(ids[r], c);
    return out;
}

} // namespace

TEST(StepGrid, Examples)
{
    EXPECT_EQ(step_grid(4, 4), (std::vector<std::size_t>{4, 3, 2, 1, 0}));
    EXPECT_EQ(step_grid(2048, 4), (std::vector<std::size_t>{2048, 1536, 1024, 512, 0}));
    EXPECT_THROW(step_grid(4, 5), ConfigError);
}

TEST(StepGrid, StrictlyDecreasingToZero)
{
    for (std::size_t T : {2u, 3u, 7u, 100u, 2048u})
        for (std::size_t n = 1; n <= T; n += 1 + n / 3) {
            const auto g = step_grid(T, n);
            ASSERT_EQ(g.size(), n + 1);
            EXPECT_EQ(g.front(), T);
            EXPECT_EQ(g.back(), 0u);
            for (std::size_t i = 1; i < g.size(); ++i)
                EXPECT_LT(g[i], g[i - 1]);
        }
}

TEST(SamplerConfig, StepsBoundedByT)
{
    SamplerConfig c;
    c.num_steps = 65;
    EXPECT_THROW(c.validate(64), ConfigError);
    c.num_steps = 1;
    EXPECT_THROW(c.validate(64), ConfigError);
    c.num_steps = 64;
    EXPECT_NO_THROW(c.validate(64));
}

TEST(ReverseStep, EqualAlphaBarIsFixedPoint)
{
    Rng rng(1);
    const Tensor z = Tensor::randn({3, 4}, rng), z0 = Tensor::randn({3, 4}, rng);
    EXPECT_EQ(reverse_update(z, z0, 0.3, 0.3).vec(), z.vec());
}

TEST(ReverseStep, OracleKeepsNoiseDirection)
{
    Rng rng(2);
    const NoiseSchedule s = build_sqrt_schedule(100);
    const Tensor z0 = Tensor::randn({5, 4}, rng), eps = Tensor::randn({5, 4}, rng);
    Tensor zt({5, 4});
    const std::size_t t = 80, u = 30;
    for (std::size_t i = 0; i < zt.size(); ++i)
        zt[i] = std::sqrt(s.alpha_bar[t]) * z0[i] + std::sqrt(1 - s.alpha_bar[t]) * eps[i];
    const DenoiseFn oracle = [&](const Tensor&, std::size_t) { return z0; };
    const Tensor zs = reverse_step(zt, t, u, oracle, s);
    for (std::size_t i = 0; i < zs.size(); ++i)
        EXPECT_NEAR(zs[i], std::sqrt(s.alpha_bar[u]) * z0[i] + std::sqrt(1 - s.alpha_bar[u]) * eps[i], 1e-12);
    EXPECT_LT(max_abs_diff(reverse_step(zt, t, 0, oracle, s).data(), z0.data()), 1e-8);
}

TEST(ReverseStep, SingleStepEqualsMultiStep)
{
    Rng rng(3);
    const NoiseSchedule s = build_sqrt_schedule(64);
    const Tensor z0 = Tensor::randn({4, 3}, rng);
    const DenoiseFn oracle = [&](const Tensor&, std::size_t) { return z0; };
    const Tensor zT = Tensor::randn({4, 3}, rng);
    const Tensor one = reverse_step(zT, 64, 0, oracle, s);
    Tensor z = zT;
    const auto g = step_grid(64, 16);
    for (std::size_t k = 0; k + 1 < g.size(); ++k)
        z = reverse_step(z, g[k], g[k + 1], oracle, s);
    EXPECT_LT(max_abs_diff(one.data(), z.data()), 1e-8);
}

TEST(ReverseStep, OrderingErrors)
{
    const NoiseSchedule s = build_sqrt_schedule(10);
    const DenoiseFn id = [](const Tensor& z, std::size_t) { return z; };
    const Tensor z({1, 1});
    EXPECT_THROW(reverse_step(z, 5, 5, id, s), OrderingError);
    EXPECT_THROW(reverse_step(z, 5, 7, id, s), OrderingError);
}

class SampleTest : public ::testing::Test {
protected:
    void init(std::size_t T, double p_max = 0.1)
    {
        Rng rng(4);
        model = DenoiserModel::init(small(T), rng);
        // Equal-norm rows so an exact embedding is its own dot-product argmax.
        for (std::size_t v = kFirstCharId - 3; v < model.embedding.dim(0); ++v) {
            double n = 0.0;
            for (double x : model.embedding.row(v))
                n += x * x;
            for (double& x : model.embedding.row(v))
                x /= std::sqrt(n);
        }
        schedule = build_sqrt_schedule(T, p_max);
    }

    DenoiseFn oracle_for(const std::vector<std::size_t>& full_ids)
    {
        const Tensor truth = rows_of(model, full_ids);
        return [truth](const Tensor&, std::size_t) { return truth; };
    }

    DenoiserModel model;
    NoiseSchedule schedule;
};

TEST_F(SampleTest, OracleRecoversTargetsAndLatents)
{
    init(64);
    const std::vector<std::size_t> src{kBosId, 4, 5, kEosId};
    const std::vector<std::size_t> tgt{7, 9, 4};
    std::vector<std::size_t> full = src;
    full.insert(full.end(), tgt.begin(), tgt.end());
    const Tensor truth = rows_of(model, full);
    for (std::size_t steps : {2u, 8u, 64u})
        for (bool clamp : {false, true}) {
            SamplerConfig cfg;
            cfg.num_steps = steps;
            cfg.clamp_each_step = clamp;
            const SampleResult r = sample(src, 3, model, schedule, cfg, oracle_for(full));
            EXPECT_EQ(r.target_ids, tgt);
            EXPECT_LT(max_abs_diff(r.latents.data(), truth.data()), 1e-8);
        }
}

TEST_F(SampleTest, SameSeedIsBitIdentical)
{
    init(32);
    const std::vector<std::size_t> src{kBosId, 4, 6, kEosId};
    SamplerConfig cfg;
    cfg.num_steps = 8;
    cfg.seed = 11;
    const SampleResult a = sample(src, 4, model, schedule, cfg), b = sample(src, 4, model, schedule, cfg);
    EXPECT_EQ(a.target_ids, b.target_ids);
    EXPECT_EQ(a.latents.vec(), b.latents.vec());
}

TEST_F(SampleTest, SourceRowsStayClean)
{
    init(32);
    const std::vector<std::size_t> src{kBosId, 8, 6, 5, kEosId};
    SamplerConfig cfg;
    cfg.num_steps = 4;
    const SampleResult r = sample(src, 2, model, schedule, cfg);
    const Tensor clean = rows_of(model, src);
    for (std::size_t i = 0; i < clean.size(); ++i)
        EXPECT_EQ(r.latents[i], clean[i]);
    EXPECT_EQ(round_to_tokens(clean, model).ids.size(), src.size());
}

TEST_F(SampleTest, TraceHasOneLinePerStep)
{
    init(32);
    const std::vector<std::size_t> src{kBosId, 4, kEosId};
    SamplerConfig cfg;
    cfg.num_steps = 8;
    std::ostringstream trace;
    sample(src, 2, model, schedule, cfg, {}, &trace);
    std::istringstream is(trace.str());
    std::size_t t = 0, lines = 0;
    double change = 0.0;
    while (is >> t >> change)
        ++lines;
    EXPECT_EQ(lines, 8u);
}

TEST_F(SampleTest, ValidationErrors)
{
    init(32);
    const std::vector<std::size_t> src{kBosId, 4, kEosId};
    SamplerConfig cfg;
    cfg.num_steps = 33;
    EXPECT_THROW(sample(src, 2, model, schedule, cfg), ConfigError);
    cfg.num_steps = 4;
    EXPECT_THROW(sample(src, 40, model, schedule, cfg), LengthError);
    const NoiseSchedule other = build_sqrt_schedule(16);
    EXPECT_THROW(sample(src, 2, model, other, cfg), ConfigError);
}

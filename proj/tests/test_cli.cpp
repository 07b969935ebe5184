#include "mdsq/checkpoint.hpp"
#include "mdsq/cli.hpp"
#include "mdsq/config.hpp"
#include "mdsq/error.hpp"
#include "mdsq/gradcheck.hpp"
#include "mdsq/metrics.hpp"
#include "mdsq/rng.hpp"
#include "mdsq/train.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace mdsq;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir()
    {
        static int counter = 0;
        path_ = fs::temp_directory_path() / ("mdsq_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    fs::path operator/(const std::string& name) const { return path_ / name; }
    std::string str() const { return path_.string(); }

private:
    fs::path path_;
};

struct CliRun {
    int code;
    std::string out, err;
};

CliRun cli(std::vector<std::string> args)
{
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig toy_run(const fs::path& corpus)
{
    RunConfig c = tiny_gradcheck_config();
    c.alphabet.clear();
    c.model.vocab_size = 16;
    c.paths.corpus = corpus.string();
    return c;
}

} // namespace

TEST(RunConfigText, ParsesAndRoundTrips)
{
    const RunConfig c = RunConfig::from_text("# comment\nmodel.width = 32\n\nschedule.T=64\ntrain.lr = 0.003\n"
                                             "model.dilations = 1,2\nsampler.num_steps = 16\n");
    EXPECT_EQ(c.model.width, 32u);
    EXPECT_EQ(c.schedule.T, 64u);
    EXPECT_EQ(c.model.T, 64u);
    EXPECT_EQ(c.train.lr, 0.003);
    EXPECT_EQ(c.model.dilations, (std::vector<std::size_t>{1, 2}));
    const RunConfig back = RunConfig::from_text(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.model_hash(), c.model_hash());
    for (const std::string& key : RunConfig::keys())
        EXPECT_EQ(back.get(key), c.get(key)) << key;
}

TEST(RunConfigText, ExactDoublesAndAlphabet)
{
    RunConfig c;
    c.train.lr = 0.1 + 0.2;
    c.alphabet = U"abé日";
    const RunConfig back = RunConfig::from_text(c.to_text());
    EXPECT_EQ(back.train.lr, c.train.lr);
    EXPECT_EQ(back.alphabet, c.alphabet);
}

TEST(RunConfigText, UnknownKeyAndBadValue)
{
    EXPECT_THROW(RunConfig::from_text("model.depth = 3\n"), ConfigError);
    EXPECT_THROW(RunConfig::from_text("model.width = wide\n"), ConfigError);
    EXPECT_THROW(RunConfig::from_text("model.width\n"), ConfigError);
    EXPECT_FALSE(RunConfig::has_key("model.depth"));
    EXPECT_TRUE(RunConfig::has_key("paths.logdir"));
}

TEST(RunConfigValidate, ListsEveryViolation)
{
    RunConfig c;
    c.model.top_k = 9;
    c.model.window = 3;
    c.sampler.num_steps = 5000;
    c.sampler.max_len = c.model.max_seq_len + 1;
    const auto v = c.violations();
    EXPECT_GE(v.size(), 4u);
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        for (const std::string& line : v)
            EXPECT_NE(msg.find(line), std::string::npos) << line;
    }
    EXPECT_NO_THROW(RunConfig{}.validate());
}

TEST(RunConfigValidate, WindowBoundedBySequence)
{
    RunConfig c;
    c.model.max_seq_len = 64;
    c.model.window = 130;
    c.sampler.max_len = 64;
    EXPECT_THROW(c.validate(), ConfigError);
    c.model.window = 128;
    EXPECT_NO_THROW(c.validate());
}

TEST(RunConfigHash, CoversShapesOnly)
{
    RunConfig a, b;
    b.train.lr = 0.5;
    b.sampler.num_steps = 7;
    EXPECT_EQ(a.model_hash(), b.model_hash());
    b.model.width = 64;
    EXPECT_NE(a.model_hash(), b.model_hash());
    RunConfig d;
    d.set("schedule.T", "1024");
    EXPECT_NE(a.model_hash(), d.model_hash());
}

TEST(RunConfigPaths, LogdirEnvironmentOverride)
{
    RunConfig c;
    c.paths.logdir = "from_config";
    ::unsetenv("MDSQ_LOGDIR");
    EXPECT_EQ(resolve_logdir(c), "from_config");
    ::setenv("MDSQ_LOGDIR", "from_env", 1);
    EXPECT_EQ(resolve_logdir(c), "from_env");
    ::unsetenv("MDSQ_LOGDIR");
}

TEST(Ablation, GridMatchesAxes)
{
    std::set<std::size_t> windows, steps;
    std::set<bool> kinds;
    for (const AblationRow& r : ablation_rows()) {
        windows.insert(r.window);
        steps.insert(r.steps);
        kinds.insert(r.sparse);
    }
    EXPECT_EQ(ablation_rows().size(), 6u);
    EXPECT_EQ(windows, (std::set<std::size_t>{256, 512, 1024}));
    EXPECT_EQ(steps, (std::set<std::size_t>{1024, 2048, 4096}));
    EXPECT_EQ(kinds, (std::set<bool>{false, true}));
    EXPECT_FALSE(ablation_row("no-sparse").sparse);
    EXPECT_EQ(ablation_row("reduced-steps").steps, 1024u);
    EXPECT_THROW(ablation_row("bigger-everything"), ConfigError);

    RunConfig c;
    c.model.max_seq_len = 64;
    c.sampler.max_len = 64;
    const RunConfig r = apply_ablation(c, ablation_row("reduced-steps"), 16);
    EXPECT_EQ(r.schedule.T, 64u);
    EXPECT_EQ(r.model.T, 64u);
    EXPECT_EQ(r.model.window, 32u);
    EXPECT_LE(r.sampler.num_steps, 64u);
}

class CheckpointTest : public ::testing::Test {
protected:
    void SetUp() override
    {
        config = tiny_gradcheck_config();
        Rng rng(3);
        model = DenoiserModel::init(config.model, rng);
    }
    RunConfig config;
    DenoiserModel model;
    TempDir dir;
};

TEST_F(CheckpointTest, SaveLoadSaveIsByteIdentical)
{
    save_model(dir / "a.ckpt", model, config);
    const LoadedModel loaded = load_model(dir / "a.ckpt");
    save_model(dir / "b.ckpt", loaded.model, loaded.config);
    EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
    EXPECT_EQ(loaded.config.to_text(), config.to_text());
    const auto p = model.named_parameters();
    const auto q = loaded.model.named_parameters();
    ASSERT_EQ(p.size(), q.size());
    for (std::size_t i = 0; i < p.size(); ++i)
        EXPECT_EQ(p[i].tensor->vec(), q[i].tensor->vec()) << p[i].name;
}

TEST_F(CheckpointTest, LayoutIsLittleEndian)
{
    const std::string bytes = serialize_checkpoint(make_checkpoint(model, config));
    ASSERT_GE(bytes.size(), 12u);
    EXPECT_EQ(bytes.substr(0, 4), "MDSQ");
    EXPECT_EQ(bytes.substr(4, 4), std::string("\x01\x00\x00\x00", 4));
    const Checkpoint c = parse_checkpoint(bytes);
    EXPECT_NE(c.config_text.find("# model_hash = "), std::string::npos);
    EXPECT_EQ(c.tensors.size(), model.named_parameters().size());
}

TEST_F(CheckpointTest, MalformedBytes)
{
    const std::string bytes = serialize_checkpoint(make_checkpoint(model, config));
    EXPECT_THROW(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), IoError);
    EXPECT_THROW(parse_checkpoint("MDSX" + bytes.substr(4)), IoError);
    std::string v2 = bytes;
    v2[4] = 2;
    EXPECT_THROW(parse_checkpoint(v2), CompatibilityError);
    EXPECT_THROW(read_checkpoint(dir / "missing.ckpt"), IoError);
}

TEST_F(CheckpointTest, ShapeAndHashMismatch)
{
    Checkpoint c = make_checkpoint(model, config);
    c.tensors[0].second = Tensor({2, 2});
    EXPECT_THROW(model_from_checkpoint(c), CompatibilityError);

    Checkpoint d = make_checkpoint(model, config);
    d.tensors.pop_back();
    EXPECT_THROW(model_from_checkpoint(d), CompatibilityError);

    RunConfig other = config;
    other.model.width = 12;
    try {
        check_compatible(other, config);
        FAIL();
    } catch (const CompatibilityError& e) {
        EXPECT_NE(std::string(e.what()).find("model.width"), std::string::npos);
    }
    RunConfig same = config;
    same.sampler.num_steps = 4;
    EXPECT_NO_THROW(check_compatible(same, config));
}

TEST(GradCheck, FreshInitPassesAndCoversAllGroups)
{
    const GradCheckReport r = gradcheck(tiny_gradcheck_config(), 0);
    EXPECT_TRUE(r.passed());
    EXPECT_GT(r.absorbed_rows, 0u);
    std::vector<std::string> names;
    for (const GradCheckGroup& g : r.groups) {
        names.push_back(g.group);
        EXPECT_GE(g.entries.size(), 20u) << g.group;
        EXPECT_LT(g.max_rel_err, 1e-5) << g.group;
    }
    EXPECT_EQ(names, (std::vector<std::string>{"embeddings", "attention", "gates", "experts", "head"}));
}

TEST(GradCheck, ParameterGroups)
{
    EXPECT_EQ(parameter_group("embedding"), "embeddings");
    EXPECT_EQ(parameter_group("time.w"), "embeddings");
    EXPECT_EQ(parameter_group("block1.attn.wq"), "attention");
    EXPECT_EQ(parameter_group("block0.moe.gate"), "gates");
    EXPECT_EQ(parameter_group("block0.moe.expert2.w1"), "experts");
    EXPECT_EQ(parameter_group("out_w"), "head");
}

TEST(GradCheck, CorruptedBackwardNamesGroup)
{
    GradCheckOptions opts;
    opts.corrupt = [](DenoiserModel& m) {
        for (double& g : m.blocks[1].moe.gate_weights.grad())
            g = g * 1.5 + 1e-3;
    };
    const GradCheckReport r = gradcheck(tiny_gradcheck_config(), 1, opts);
    EXPECT_FALSE(r.passed());
    for (const GradCheckGroup& g : r.groups) {
        EXPECT_EQ(g.passed, g.group != "gates") << g.group;
        if (!g.passed)
            EXPECT_NE(g.worst_param.find("block1.moe.gate"), std::string::npos);
    }
    std::ostringstream os;
    write_gradcheck_report(os, r);
    EXPECT_NE(os.str().find("gates"), std::string::npos);
    EXPECT_NE(os.str().find("FAIL"), std::string::npos);
}

class CliTest : public ::testing::Test {
protected:
    void SetUp() override
    {
        ::unsetenv("MDSQ_LOGDIR");
        write_corpus(dir / "copy.tsv", make_toy_task(ToyTask::kCopy, 64, 2, 6, 16, 5));
        RunConfig c = toy_run(dir / "copy.tsv");
        c.paths.logdir = (dir / "logs").string();
        c.paths.checkpoint = (dir / "m.ckpt").string();
        c.train.steps = 3;
        c.train.log_every = 1;
        save_run_config(dir / "run.cfg", c);
    }
    TempDir dir;
};

TEST_F(CliTest, TrainWritesResolvedConfigLogAndCheckpoint)
{
    const CliRun r = cli({"train", "--config", (dir / "run.cfg").string(), "--train.steps", "4"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("steps 4"), std::string::npos);
    const RunConfig written = load_run_config(dir / "logs/config.txt");
    EXPECT_EQ(written.train.steps, 4u);
    EXPECT_FALSE(written.alphabet.empty());
    EXPECT_EQ(written.model.vocab_size, 4 + written.alphabet.size());
    std::istringstream log(slurp(dir / "logs/train.log"));
    std::size_t lines = 0;
    for (std::string l; std::getline(log, l);)
        lines += l.rfind("step=", 0) == 0;
    EXPECT_EQ(lines, 4u);
    EXPECT_NO_THROW(load_model(dir / "m.ckpt"));
}

TEST_F(CliTest, ZeroStepsSavesInitialization)
{
    ASSERT_EQ(cli({"train", "--config", (dir / "run.cfg").string(), "--train.steps", "0", "--train.seed", "9"}).code, 0);
    const LoadedModel loaded = load_model(dir / "m.ckpt");
    Rng rng = Rng(9).split(0);
    const DenoiserModel fresh = DenoiserModel::init(loaded.config.model, rng);
    EXPECT_EQ(serialize_checkpoint(make_checkpoint(fresh, loaded.config)), slurp(dir / "m.ckpt"));
}

TEST_F(CliTest, LogdirEnvOverridesConfig)
{
    ::setenv("MDSQ_LOGDIR", (dir / "envlogs").c_str(), 1);
    const CliRun r = cli({"train", "--config", (dir / "run.cfg").string()});
    ::unsetenv("MDSQ_LOGDIR");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "envlogs/config.txt"));
    EXPECT_FALSE(fs::exists(dir / "logs/config.txt"));
}

TEST_F(CliTest, SampleIsSeededAndChecksCompatibility)
{
    ASSERT_EQ(cli({"train", "--config", (dir / "run.cfg").string()}).code, 0);
    const std::string ck = (dir / "m.ckpt").string();
    const std::string logs = (dir / "logs").string();
    const CliRun a = cli({"sample", "--checkpoint", ck, "--input", "abc", "--input", "dd", "--sampler.seed", "4",
                          "--paths.logdir", logs});
    const CliRun b = cli({"sample", "--checkpoint", ck, "--input", "abc", "--input", "dd", "--sampler.seed", "4",
                          "--paths.logdir", logs});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_TRUE(fs::exists(dir / "logs/sample_config.txt"));
    const CliRun bad = cli({"sample", "--checkpoint", ck, "--input", "abc", "--model.width", "16"});
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.err.find("model.width"), std::string::npos);
}

TEST_F(CliTest, ExitCodes)
{
    EXPECT_EQ(cli({"--help"}).code, 0);
    EXPECT_EQ(cli({"frobnicate"}).code, 1);
    EXPECT_EQ(cli({"train", "--config", (dir / "run.cfg").string(), "--model.top_k", "7"}).code, 1);
    EXPECT_EQ(cli({"train", "--config", (dir / "run.cfg").string(), "--model.width", "x"}).code, 1);
    EXPECT_EQ(cli({"train", "--config", (dir / "missing.cfg").string()}).code, 2);
    EXPECT_EQ(cli({"train", "--config", (dir / "run.cfg").string(), "--paths.corpus", (dir / "nope.tsv").string()}).code,
              2);
    EXPECT_EQ(cli({"sample", "--checkpoint", (dir / "nope.ckpt").string(), "--input", "a"}).code, 2);
    const CliRun nan = cli({"train", "--config", (dir / "run.cfg").string(), "--train.lr", "1e300",
                            "--train.grad_clip", "0", "--train.steps", "20"});
    EXPECT_EQ(nan.code, 3) << nan.err;
    EXPECT_EQ(static_cast<int>(NumericError("x").code()), 3);
}

TEST_F(CliTest, ValidationListsAllViolations)
{
    const CliRun r = cli({"train", "--config", (dir / "run.cfg").string(), "--model.top_k", "7", "--model.window", "3"});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("top_k"), std::string::npos);
    EXPECT_NE(r.err.find("window"), std::string::npos);
}

TEST_F(CliTest, GradcheckCommandPasses)
{
    const CliRun r = cli({"gradcheck", "--seed", "2", "--paths.logdir", (dir / "gc").string()});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(fs::exists(dir / "gc/gradcheck.txt"));
    for (const char* g : {"embeddings", "attention", "gates", "experts", "head"})
        EXPECT_NE(r.out.find(g), std::string::npos) << g;
}

TEST_F(CliTest, BenchWritesDelimitedReport)
{
    const std::string prefix = (dir / "bench").string();
    const CliRun r = cli({"bench", "--seq-lens", "64,128,256", "--runs", "0", "--out", prefix, "--model.window", "32",
                          "--paths.logdir", (dir / "logs").string()});
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream csv(prefix + ".csv");
    const BenchReport rep = read_bench_csv(csv);
    ASSERT_EQ(rep.rows.size(), 6u);
    bool saw = false;
    for (const BenchRow& row : rep.rows)
        if (row.attention_kind == "dense" && row.seq_len == 256) {
            EXPECT_EQ(row.pair_count, 65536u);
            saw = true;
        }
    EXPECT_TRUE(saw);
    EXPECT_TRUE(fs::exists(prefix + ".txt"));
}

TEST_F(CliTest, MakeToyAndEval)
{
    const std::string corpus = (dir / "rev.tsv").string();
    ASSERT_EQ(cli({"make-toy", "--task", "reverse", "--n", "5", "--seed", "1", "--out", corpus}).code, 0);
    const auto pairs = load_corpus(corpus);
    ASSERT_EQ(pairs.size(), 5u);
    std::ofstream(dir / "c.txt") << "abcd\nxy\n";
    std::ofstream(dir / "r.txt") << "abcd\nxz\n";
    const CliRun r = cli({"eval", "--candidates", (dir / "c.txt").string(), "--references", (dir / "r.txt").string(),
                          "--max-n", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("exact_match 0.5"), std::string::npos) << r.out;
}

// Minibatch losses are noisy, so the trend is judged on consecutive
// 50-point window means of the first 200 logged steps.
TEST(TrainTrend, LossWindowsDecrease)
{
    const auto corpus = make_toy_task(ToyTask::kCopy, 200, 2, 6, 16, 11);
    std::size_t decreasing = 0;
    const std::size_t seeds = 3;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        RunConfig c = tiny_gradcheck_config();
        c.alphabet = vocab_from_corpus(corpus).alphabet();
        c.model.vocab_size = 4 + c.alphabet.size();
        c.train.steps = 200;
        c.train.log_every = 1;
        c.train.seed = seed;
        c.train.lr = 3e-3;
        c.train.batch_size = 8;
        Rng rng = Rng(seed).split(0);
        DenoiserModel model = DenoiserModel::init(c.model, rng);
        const TrainResult r = train_model(model, corpus, Vocab::from_alphabet(c.alphabet), c);
        ASSERT_EQ(r.log.size(), 200u);
        std::vector<double> means(4, 0.0);
        for (std::size_t i = 0; i < 200; ++i)
            means[i / 50] += r.log[i].loss / 50.0;
        decreasing += means[0] > means[1] && means[1] > means[2] && means[2] > means[3];
    }
    EXPECT_EQ(decreasing, seeds);
}

#include "mdsq/cli.hpp"

#include "mdsq/checkpoint.hpp"
#include "mdsq/config.hpp"
#include "mdsq/data.hpp"
#include "mdsq/error.hpp"
#include "mdsq/gradcheck.hpp"
#include "mdsq/metrics.hpp"
#include "mdsq/rng.hpp"
#include "mdsq/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

namespace mdsq {

namespace fs = std::filesystem;

namespace {

// --config FILE, then --set key=value, then --<key> value (later wins).
struct ConfigFlags {
    std::string config_file;
    std::vector<std::string> sets;
    std::map<std::string, std::string> values;

    void attach(CLI::App& app, const std::map<std::string, std::string>& aliases = {})
    {
        app.add_option("--config", config_file, "key = value config file");
        app.add_option("--set", sets, "override, key=value (repeatable)");
        for (const std::string& key : RunConfig::keys()) {
            const auto alias = aliases.find(key);
            const std::string names = "--" + key + (alias == aliases.end() ? "" : "," + alias->second);
            app.add_option(names, values[key])->group("Config keys");
        }
    }

    RunConfig resolve(const CLI::App& app, RunConfig base = {}) const
    {
        RunConfig c = config_file.empty() ? std::move(base) : load_run_config(config_file);
        for (const std::string& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw ConfigError("--set expects key=value, got '" + s + "'");
            c.set(s.substr(0, eq), s.substr(eq + 1));
        }
        for (const auto& [key, value] : values)
            if (app.count("--" + key) > 0)
                c.set(key, value);
        return c;
    }

    bool any_given(const CLI::App& app) const
    {
        if (!config_file.empty() || !sets.empty())
            return true;
        for (const auto& kv : values)
            if (app.count("--" + kv.first) > 0)
                return true;
        return false;
    }
};

std::vector<std::string> read_lines(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

void write_text(const fs::path& path, const std::string& text)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text))
        throw IoError("cannot write " + path.string());
}

fs::path run_dir(const RunConfig& c)
{
    const fs::path dir = resolve_logdir(c);
    fs::create_directories(dir);
    return dir;
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
    ConfigFlags flags;
    std::string ablation;
    std::size_t ablation_scale = 1;
    double time_budget = 0.0;
};

int cmd_train(const CLI::App& app, const TrainArgs& a, std::ostream& out)
{
    RunConfig c = a.flags.resolve(app);
    if (!a.ablation.empty())
        c = apply_ablation(c, ablation_row(a.ablation), a.ablation_scale);
    if (c.paths.corpus.empty())
        throw ConfigError("paths.corpus is required for training");
    const std::vector<TextPair> corpus = load_corpus(c.paths.corpus);
    if (c.alphabet.empty())
        c.alphabet = vocab_from_corpus(corpus).alphabet();
    const Vocab vocab = Vocab::from_alphabet(c.alphabet);
    c.model.vocab_size = vocab.size();
    c.validate();

    const fs::path dir = run_dir(c);
    save_run_config(dir / "config.txt", c);
    std::ofstream log(dir / "train.log", std::ios::trunc);
    if (!log)
        throw IoError("cannot write " + (dir / "train.log").string());

    Rng init_rng = Rng(c.train.seed).split(0);
    DenoiserModel model = DenoiserModel::init(c.model, init_rng);
    TrainOptions opts;
    opts.log = &log;
    opts.time_budget_seconds = a.time_budget;
    opts.on_checkpoint = [&](std::size_t step, const DenoiserModel& m) {
        save_model(c.paths.checkpoint + ".step" + std::to_string(step), m, c);
    };
    const TrainResult r = train_model(model, corpus, vocab, c, opts);
    save_model(c.paths.checkpoint, model, c);
    out << "steps " << r.steps_run << "\nfinal_loss " << r.final_loss << "\nseconds " << r.seconds
        << "\ncheckpoint " << c.paths.checkpoint << "\nlog " << (dir / "train.log").string() << '\n';
    return 0;
}

// ---- sample -----------------------------------------------------------------

struct SampleArgs {
    ConfigFlags flags;
    std::string checkpoint;
    std::vector<std::string> inputs;
    std::string input_file;
    std::optional<std::size_t> target_len;
};

int cmd_sample(const CLI::App& app, const SampleArgs& a, std::ostream& out)
{
    if (a.checkpoint.empty())
        throw ConfigError("--checkpoint is required");
    LoadedModel loaded = load_model(a.checkpoint);
    RunConfig c = loaded.config;
    if (a.flags.any_given(app)) {
        RunConfig requested = a.flags.resolve(app, loaded.config);
        if (requested.alphabet.empty())
            requested.alphabet = loaded.config.alphabet;
        check_compatible(requested, loaded.config);
        c = requested;
    }
    c.validate();
    save_run_config(run_dir(c) / "sample_config.txt", c);

    std::vector<std::string> sources = a.inputs;
    if (!a.input_file.empty())
        for (std::string& l : read_lines(a.input_file))
            sources.push_back(std::move(l));
    if (sources.empty())
        throw ConfigError("no input: pass --input TEXT or --input-file FILE");
    const Vocab vocab = Vocab::from_alphabet(c.alphabet);
    const NoiseSchedule schedule = c.schedule_table();
    for (const std::string& src : sources) {
        const std::size_t len = a.target_len.value_or(utf8_decode(src).size());
        out << generate(loaded.model, schedule, vocab, src, len, c.sampler) << '\n';
    }
    return 0;
}

// ---- gradcheck --------------------------------------------------------------

struct GradcheckArgs {
    ConfigFlags flags;
    std::uint64_t seed = 0;
    std::size_t per_group = 20;
};

int cmd_gradcheck(const CLI::App& app, const GradcheckArgs& a, std::ostream& out)
{
    const RunConfig c = a.flags.resolve(app, tiny_gradcheck_config());
    GradCheckOptions opts;
    opts.per_group = a.per_group;
    const GradCheckReport report = gradcheck(c, a.seed, opts);
    std::ostringstream text;
    write_gradcheck_report(text, report);
    const fs::path dir = run_dir(c);
    save_run_config(dir / "gradcheck_config.txt", c);
    write_text(dir / "gradcheck.txt", text.str());
    out << text.str();
    if (!report.passed()) {
        std::string failing;
        for (const GradCheckGroup& g : report.groups)
            if (!g.passed)
                failing += (failing.empty() ? "" : ", ") + g.group + " (" + g.worst_param + ")";
        throw NumericError("gradient check failed for " + failing);
    }
    return 0;
}

// ---- bench ------------------------------------------------------------------

struct BenchArgs {
    ConfigFlags flags;
    std::vector<std::size_t> seq_lens{128, 256, 512, 1024, 2048};
    std::size_t runs = 3;
    std::string out_prefix;
};

int cmd_bench(const CLI::App& app, const BenchArgs& a, std::ostream& out)
{
    const RunConfig c = a.flags.resolve(app);
    c.validate();
    SparseAttentionConfig s = c.model.attention_for_layer(0);
    const BenchReport report = bench_attention(a.seq_lens, s, a.runs);
    const fs::path dir = run_dir(c);
    const fs::path prefix = a.out_prefix.empty() ? dir / "bench" : fs::path(a.out_prefix);
    std::ostringstream text, csv;
    write_bench_text(text, report);
    write_bench_csv(csv, report);
    write_text(prefix.string() + ".txt", text.str());
    write_text(prefix.string() + ".csv", csv.str());
    save_run_config(dir / "bench_config.txt", c);
    out << text.str();
    return 0;
}

// ---- make-toy ---------------------------------------------------------------

struct ToyArgs {
    std::string task = "copy";
    std::size_t n = 1000;
    std::size_t min_len = 4;
    std::size_t max_len = 16;
    std::size_t vocab = 16;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_make_toy(const ToyArgs& a, std::ostream& out)
{
    const std::vector<TextPair> pairs = make_toy_task(parse_toy_task(a.task), a.n, a.min_len, a.max_len, a.vocab, a.seed);
    if (a.out.empty()) {
        for (const TextPair& p : pairs)
            out << p.source << '\t' << p.target << '\n';
    } else {
        write_corpus(a.out, pairs);
        out << "wrote " << pairs.size() << " pairs to " << a.out << '\n';
    }
    return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
    ConfigFlags flags;
    std::string candidates;
    std::string references;
    std::string checkpoint;
    std::string corpus;
    std::size_t max_n = 4;
    std::optional<std::size_t> limit;
};

int cmd_eval(const CLI::App& app, const EvalArgs& a, std::ostream& out)
{
    EvalReport report;
    if (!a.checkpoint.empty()) {
        if (a.corpus.empty())
            throw ConfigError("--checkpoint needs --corpus with held-out pairs");
        LoadedModel loaded = load_model(a.checkpoint);
        RunConfig c = loaded.config;
        if (a.flags.any_given(app)) {
            c = a.flags.resolve(app, loaded.config);
            check_compatible(c, loaded.config);
        }
        c.validate();
        std::vector<TextPair> pairs = load_corpus(a.corpus);
        if (a.limit && *a.limit < pairs.size())
            pairs.resize(*a.limit);
        const Vocab vocab = Vocab::from_alphabet(c.alphabet);
        const GenerationResult g = evaluate_pairs(loaded.model, c.schedule_table(), vocab, pairs, c.sampler);
        std::vector<std::string> refs;
        for (const TextPair& p : pairs)
            refs.push_back(p.target);
        report = evaluate_text(g.outputs, refs, a.max_n);
        save_run_config(run_dir(c) / "eval_config.txt", c);
    } else {
        if (a.candidates.empty() || a.references.empty())
            throw ConfigError("eval needs --candidates and --references, or --checkpoint and --corpus");
        report = evaluate_text(read_lines(a.candidates), read_lines(a.references), a.max_n);
    }
    write_eval_report(out, report);
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Sparse-attention mixture-of-experts diffusion for sequence-to-sequence text", "mdsq"};
    app.require_subcommand(1);

    TrainArgs train;
    CLI::App* train_cmd = app.add_subcommand("train", "train a denoiser on a tab-separated corpus");
    train.flags.attach(*train_cmd, {{"paths.corpus", "--corpus"}, {"paths.checkpoint", "--checkpoint"}});
    train_cmd->add_option("--ablation", train.ablation, "ablation row (baseline, no-sparse, reduced-steps, ...)");
    train_cmd->add_option("--ablation-scale", train.ablation_scale, "divide ablation window and steps");
    train_cmd->add_option("--time-budget", train.time_budget, "stop after this many seconds");

    SampleArgs sample_args;
    CLI::App* sample_cmd = app.add_subcommand("sample", "generate targets from a checkpoint");
    sample_args.flags.attach(*sample_cmd);
    sample_cmd->add_option("--checkpoint", sample_args.checkpoint, "checkpoint file")->required();
    sample_cmd->add_option("--input", sample_args.inputs, "source text (repeatable)");
    sample_cmd->add_option("--input-file", sample_args.input_file, "one source per line");
    sample_cmd->add_option("--target-len", sample_args.target_len, "target length (default: source length)");

    GradcheckArgs gc;
    CLI::App* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check on a tiny model");
    gc.flags.attach(*gc_cmd);
    gc_cmd->add_option("--seed", gc.seed, "model and data seed");
    gc_cmd->add_option("--per-group", gc.per_group, "parameters checked per group");

    BenchArgs bench;
    CLI::App* bench_cmd = app.add_subcommand("bench", "dense vs sparse attention pair counts and timings");
    bench.flags.attach(*bench_cmd);
    bench_cmd->add_option("--seq-lens", bench.seq_lens, "ascending sequence lengths")->delimiter(',');
    bench_cmd->add_option("--runs", bench.runs, "timed repetitions (0: counts only)");
    bench_cmd->add_option("--out", bench.out_prefix, "output prefix for .txt and .csv");

    ToyArgs toy;
    CLI::App* toy_cmd = app.add_subcommand("make-toy", "write a copy/reverse/sort toy corpus");
    toy_cmd->add_option("--task", toy.task, "copy, reverse or sort");
    toy_cmd->add_option("--n", toy.n, "number of pairs");
    toy_cmd->add_option("--min-len", toy.min_len);
    toy_cmd->add_option("--max-len", toy.max_len);
    toy_cmd->add_option("--vocab", toy.vocab, "vocabulary size including reserved ids");
    toy_cmd->add_option("--seed", toy.seed);
    toy_cmd->add_option("--out", toy.out, "corpus file (default: stdout)");

    EvalArgs ev;
    CLI::App* eval_cmd = app.add_subcommand("eval", "BLEU, ROUGE-L, distinct-2 and exact match");
    ev.flags.attach(*eval_cmd);
    eval_cmd->add_option("--candidates", ev.candidates, "one candidate per line");
    eval_cmd->add_option("--references", ev.references, "one reference per line");
    eval_cmd->add_option("--checkpoint", ev.checkpoint, "generate candidates from this checkpoint");
    eval_cmd->add_option("--corpus", ev.corpus, "held-out pairs for --checkpoint");
    eval_cmd->add_option("--max-n", ev.max_n, "BLEU n-gram order");
    eval_cmd->add_option("--limit", ev.limit, "evaluate only the first N pairs");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::kValidation);
    }

    try {
        if (*train_cmd)
            return cmd_train(*train_cmd, train, out);
        if (*sample_cmd)
            return cmd_sample(*sample_cmd, sample_args, out);
        if (*gc_cmd)
            return cmd_gradcheck(*gc_cmd, gc, out);
        if (*bench_cmd)
            return cmd_bench(*bench_cmd, bench, out);
        if (*toy_cmd)
            return cmd_make_toy(toy, out);
        if (*eval_cmd)
            return cmd_eval(*eval_cmd, ev, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(e.code());
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return static_cast<int>(ExitCode::kIo);
    }
    return static_cast<int>(ExitCode::kValidation);
}

} // namespace mdsq

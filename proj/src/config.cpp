#include "mdsq/config.hpp"

#include "mdsq/data.hpp"
#include "mdsq/error.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace mdsq {

namespace {

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected)
{
    throw ConfigError(std::string(key) + ": expected " + std::string(expected) + ", got '" + std::string(value) + "'");
}

std::uint64_t parse_u64(std::string_view key, std::string_view v, int base = 10)
{
    std::uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out, base);
    if (v.empty() || ec != std::errc{} || p != v.data() + v.size())
        bad_value(key, v, "a non-negative integer");
    return out;
}

std::size_t parse_size(std::string_view key, std::string_view v)
{
    return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(std::string_view key, std::string_view v)
{
    double out = 0.0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc{} || p != v.data() + v.size())
        bad_value(key, v, "a number");
    return out;
}

bool parse_bool(std::string_view key, std::string_view v)
{
    if (v == "true" || v == "1")
        return true;
    if (v == "false" || v == "0")
        return false;
    bad_value(key, v, "true or false");
}

std::vector<std::string_view> split_commas(std::string_view v)
{
    std::vector<std::string_view> out;
    if (v.empty())
        return out;
    std::size_t start = 0;
    while (true) {
        const auto comma = v.find(',', start);
        out.push_back(v.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
        if (comma == std::string_view::npos)
            break;
        start = comma + 1;
    }
    return out;
}

std::vector<std::size_t> parse_size_list(std::string_view key, std::string_view v)
{
    std::vector<std::size_t> out;
    for (std::string_view item : split_commas(v))
        out.push_back(parse_size(key, trim(item)));
    return out;
}

std::u32string parse_alphabet(std::string_view key, std::string_view v)
{
    std::u32string out;
    for (std::string_view item : split_commas(v)) {
        const std::uint64_t cp = parse_u64(key, trim(item), 16);
        if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))
            bad_value(key, item, "a Unicode scalar value in hex");
        out.push_back(static_cast<char32_t>(cp));
    }
    return out;
}

std::string fmt(double x)
{
    char buf[64];
    const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, p);
}

std::string fmt(bool b)
{
    return b ? "true" : "false";
}

std::string fmt_list(const std::vector<std::size_t>& xs)
{
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i)
        out += (i ? "," : "") + std::to_string(xs[i]);
    return out;
}

std::string fmt_alphabet(const std::u32string& a)
{
    std::ostringstream os;
    os << std::hex;
    for (std::size_t i = 0; i < a.size(); ++i)
        os << (i ? "," : "") << static_cast<std::uint32_t>(a[i]);
    return os.str();
}

struct KeySpec {
    std::string name;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, std::string_view key, std::string_view value)> set;
};

#define MDSQ_SIZE_KEY(key, field)                                                                     \
    KeySpec{key, [](const RunConfig& c) { return std::to_string(c.field); },                          \
            [](RunConfig& c, std::string_view k, std::string_view v) { c.field = parse_size(k, v); }}
#define MDSQ_DOUBLE_KEY(key, field)                                                                   \
    KeySpec{key, [](const RunConfig& c) { return fmt(c.field); },                                     \
            [](RunConfig& c, std::string_view k, std::string_view v) { c.field = parse_double(k, v); }}
#define MDSQ_BOOL_KEY(key, field)                                                                     \
    KeySpec{key, [](const RunConfig& c) { return fmt(c.field); },                                     \
            [](RunConfig& c, std::string_view k, std::string_view v) { c.field = parse_bool(k, v); }}
#define MDSQ_STRING_KEY(key, field)                                                                   \
    KeySpec{key, [](const RunConfig& c) { return c.field; },                                          \
            [](RunConfig& c, std::string_view, std::string_view v) { c.field = std::string(v); }}

const std::vector<KeySpec>& key_specs()
{
    static const std::vector<KeySpec> specs = {
        MDSQ_SIZE_KEY("model.vocab_size", model.vocab_size),
        MDSQ_SIZE_KEY("model.width", model.width),
        MDSQ_SIZE_KEY("model.num_layers", model.num_layers),
        MDSQ_SIZE_KEY("model.num_heads", model.num_heads),
        MDSQ_SIZE_KEY("model.window", model.window),
        KeySpec{"model.dilations", [](const RunConfig& c) { return fmt_list(c.model.dilations); },
                [](RunConfig& c, std::string_view k, std::string_view v) {
                    c.model.dilations = parse_size_list(k, v);
                }},
        KeySpec{"model.global_positions", [](const RunConfig& c) { return fmt_list(c.model.global_positions); },
                [](RunConfig& c, std::string_view k, std::string_view v) {
                    c.model.global_positions = parse_size_list(k, v);
                }},
        KeySpec{"model.attention",
                [](const RunConfig& c) { return std::string(c.model.sparse_attention ? "sparse" : "standard"); },
                [](RunConfig& c, std::string_view k, std::string_view v) {
                    if (v == "sparse")
                        c.model.sparse_attention = true;
                    else if (v == "standard")
                        c.model.sparse_attention = false;
                    else
                        bad_value(k, v, "sparse or standard");
                }},
        MDSQ_SIZE_KEY("model.num_experts", model.num_experts),
        MDSQ_SIZE_KEY("model.top_k", model.top_k),
        MDSQ_SIZE_KEY("model.hidden", model.hidden),
        MDSQ_DOUBLE_KEY("model.aux_loss_coeff", model.aux_loss_coeff),
        MDSQ_SIZE_KEY("model.moe_every", model.moe_every),
        MDSQ_SIZE_KEY("model.max_seq_len", model.max_seq_len),
        MDSQ_BOOL_KEY("model.tied_head", model.tied_head),
        KeySpec{"vocab.alphabet", [](const RunConfig& c) { return fmt_alphabet(c.alphabet); },
                [](RunConfig& c, std::string_view k, std::string_view v) { c.alphabet = parse_alphabet(k, v); }},
        KeySpec{"schedule.T", [](const RunConfig& c) { return std::to_string(c.schedule.T); },
                [](RunConfig& c, std::string_view k, std::string_view v) {
                    c.schedule.T = parse_size(k, v);
                    c.model.T = c.schedule.T;
                }},
        MDSQ_DOUBLE_KEY("schedule.p_max", schedule.p_max),
        MDSQ_DOUBLE_KEY("schedule.lambda", schedule.lambda),
        MDSQ_DOUBLE_KEY("schedule.rounding_weight", schedule.rounding_weight),
        MDSQ_DOUBLE_KEY("train.lr", train.lr),
        MDSQ_DOUBLE_KEY("train.beta1", train.beta1),
        MDSQ_DOUBLE_KEY("train.beta2", train.beta2),
        MDSQ_DOUBLE_KEY("train.adam_eps", train.adam_eps),
        MDSQ_DOUBLE_KEY("train.grad_clip", train.grad_clip),
        MDSQ_SIZE_KEY("train.batch_size", train.batch_size),
        MDSQ_SIZE_KEY("train.steps", train.steps),
        KeySpec{"train.seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
                [](RunConfig& c, std::string_view k, std::string_view v) { c.train.seed = parse_u64(k, v); }},
        MDSQ_DOUBLE_KEY("train.stage1_fraction", train.stage1_fraction),
        MDSQ_SIZE_KEY("train.log_every", train.log_every),
        MDSQ_SIZE_KEY("train.checkpoint_every", train.checkpoint_every),
        MDSQ_SIZE_KEY("sampler.num_steps", sampler.num_steps),
        MDSQ_BOOL_KEY("sampler.clamp", sampler.clamp_each_step),
        KeySpec{"sampler.seed", [](const RunConfig& c) { return std::to_string(c.sampler.seed); },
                [](RunConfig& c, std::string_view k, std::string_view v) { c.sampler.seed = parse_u64(k, v); }},
        MDSQ_SIZE_KEY("sampler.max_len", sampler.max_len),
        MDSQ_STRING_KEY("paths.corpus", paths.corpus),
        MDSQ_STRING_KEY("paths.checkpoint", paths.checkpoint),
        MDSQ_STRING_KEY("paths.logdir", paths.logdir),
    };
    return specs;
}

#undef MDSQ_SIZE_KEY
#undef MDSQ_DOUBLE_KEY
#undef MDSQ_BOOL_KEY
#undef MDSQ_STRING_KEY

const KeySpec& find_key(std::string_view key)
{
    for (const KeySpec& k : key_specs())
        if (k.name == key)
            return k;
    throw ConfigError("unknown key '" + std::string(key) + "'");
}

constexpr std::string_view kModelHashPrefixes[] = {"model.", "vocab.", "schedule.T", "schedule.p_max"};

} // namespace

const std::vector<std::string>& RunConfig::keys()
{
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const KeySpec& k : key_specs())
            out.push_back(k.name);
        return out;
    }();
    return names;
}

bool RunConfig::has_key(std::string_view key)
{
    const auto& ks = keys();
    return std::find(ks.begin(), ks.end(), key) != ks.end();
}

void RunConfig::set(std::string_view key, std::string_view value)
{
    find_key(key).set(*this, key, trim(value));
}

std::string RunConfig::get(std::string_view key) const
{
    return find_key(key).get(*this);
}

std::vector<std::string> RunConfig::violations() const
{
    std::vector<std::string> errs;
    for (const std::string& e : model.violations())
        errs.push_back("model: " + e);
    if (model.T != schedule.T)
        errs.push_back("model T " + std::to_string(model.T) + " differs from schedule.T " +
                       std::to_string(schedule.T));
    if (schedule.T < 2)
        errs.push_back("schedule.T must be >= 2");
    if (!(schedule.p_max >= 0.0 && schedule.p_max <= 1.0))
        errs.push_back("schedule.p_max must lie in [0, 1]");
    if (!(schedule.lambda >= 0.0))
        errs.push_back("schedule.lambda must be >= 0");
    if (!(schedule.rounding_weight >= 0.0))
        errs.push_back("schedule.rounding_weight must be >= 0");
    if (model.window > 2 * model.max_seq_len)
        errs.push_back("model.window " + std::to_string(model.window) + " exceeds the sequence bound 2 x max_seq_len = " +
                       std::to_string(2 * model.max_seq_len));
    if (!alphabet.empty() && model.vocab_size != kFirstCharId + alphabet.size())
        errs.push_back("model.vocab_size " + std::to_string(model.vocab_size) + " does not match the " +
                       std::to_string(alphabet.size()) + "-symbol alphabet plus " + std::to_string(kFirstCharId) +
                       " reserved ids");
    if (!(train.lr > 0.0))
        errs.push_back("train.lr must be > 0");
    if (!(train.beta1 >= 0.0 && train.beta1 < 1.0) || !(train.beta2 >= 0.0 && train.beta2 < 1.0))
        errs.push_back("train.beta1 and train.beta2 must lie in [0, 1)");
    if (!(train.adam_eps > 0.0))
        errs.push_back("train.adam_eps must be > 0");
    if (!(train.grad_clip >= 0.0))
        errs.push_back("train.grad_clip must be >= 0");
    if (train.batch_size == 0)
        errs.push_back("train.batch_size must be >= 1");
    if (!(train.stage1_fraction >= 0.0 && train.stage1_fraction <= 1.0))
        errs.push_back("train.stage1_fraction must lie in [0, 1]");
    if (train.log_every == 0)
        errs.push_back("train.log_every must be >= 1");
    if (sampler.num_steps < 2 || sampler.num_steps > schedule.T)
        errs.push_back("sampler.num_steps " + std::to_string(sampler.num_steps) + " must lie in [2, schedule.T = " +
                       std::to_string(schedule.T) + "]");
    if (sampler.max_len == 0 || sampler.max_len > model.max_seq_len)
        errs.push_back("sampler.max_len must lie in [1, model.max_seq_len]");
    return errs;
}

void RunConfig::validate() const
{
    const std::vector<std::string> errs = violations();
    if (errs.empty())
        return;
    std::string msg = std::to_string(errs.size()) + " invalid setting" + (errs.size() == 1 ? "" : "s");
    for (const std::string& e : errs)
        msg += "\n  - " + e;
    throw ConfigError(msg);
}

std::string RunConfig::to_text() const
{
    std::string out;
    for (const KeySpec& k : key_specs())
        out += k.name + " = " + k.get(*this) + "\n";
    return out;
}

RunConfig RunConfig::from_text(std::string_view text)
{
    RunConfig c;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string body = trim(line.substr(0, line.find('#')));
        if (body.empty())
            continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        c.set(trim(std::string_view(body).substr(0, eq)), trim(std::string_view(body).substr(eq + 1)));
    }
    return c;
}

std::uint64_t RunConfig::model_hash() const
{
    std::uint64_t h = 1469598103934665603ULL;
    for (const KeySpec& k : key_specs()) {
        const bool shaped = std::any_of(std::begin(kModelHashPrefixes), std::end(kModelHashPrefixes),
                                        [&](std::string_view p) { return k.name.rfind(p, 0) == 0; });
        if (!shaped)
            continue;
        for (unsigned char ch : k.name + "=" + k.get(*this) + "\n") {
            h ^= ch;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

LossConfig RunConfig::loss() const
{
    LossConfig l;
    l.reg_lambda = schedule.lambda;
    l.rounding_weight = schedule.rounding_weight;
    return l;
}

NoiseSchedule RunConfig::schedule_table() const
{
    return build_sqrt_schedule(schedule.T, schedule.p_max);
}

RunConfig load_run_config(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return RunConfig::from_text(ss.str());
}

void save_run_config(const std::filesystem::path& path, const RunConfig& config)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << config.to_text()))
        throw IoError("cannot write config " + path.string());
}

std::string resolve_logdir(const RunConfig& config)
{
    const char* env = std::getenv("MDSQ_LOGDIR");
    return env != nullptr && *env != '\0' ? std::string(env) : config.paths.logdir;
}

const std::vector<AblationRow>& ablation_rows()
{
    static const std::vector<AblationRow> rows = {
        {"baseline", true, 2048, 512},          {"no-sparse", false, 2048, 512},
        {"reduced-steps", true, 1024, 512},     {"increased-steps", true, 4096, 512},
        {"smaller-window", true, 2048, 256},    {"larger-window", true, 2048, 1024},
    };
    return rows;
}

const AblationRow& ablation_row(std::string_view name)
{
    for (const AblationRow& r : ablation_rows())
        if (r.name == name)
            return r;
    std::string known;
    for (const AblationRow& r : ablation_rows())
        known += (known.empty() ? "" : ", ") + r.name;
    throw ConfigError("unknown ablation row '" + std::string(name) + "' (known: " + known + ")");
}

RunConfig apply_ablation(RunConfig config, const AblationRow& row, std::size_t scale)
{
    if (scale == 0)
        throw ConfigError("ablation scale must be >= 1");
    config.model.sparse_attention = row.sparse;
    config.model.window = std::max<std::size_t>(2, (row.window / scale) & ~std::size_t{1});
    config.schedule.T = std::max<std::size_t>(2, row.steps / scale);
    config.model.T = config.schedule.T;
    config.sampler.num_steps = std::min(config.sampler.num_steps, config.schedule.T);
    return config;
}

} // namespace mdsq

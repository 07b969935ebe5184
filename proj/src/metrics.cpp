#include "mdsq/metrics.hpp"

#include "mdsq/data.hpp"
#include "mdsq/error.hpp"
#include "mdsq/rng.hpp"
#include "mdsq/tensor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

namespace mdsq {

Tokens char_tokens(std::string_view text)
{
    Tokens out;
    for (char32_t c : utf8_decode(text))
        out.push_back(utf8_encode(std::u32string(1, c)));
    return out;
}

Tokens word_tokens(std::string_view text)
{
    Tokens out;
    std::istringstream is{std::string(text)};
    std::string w;
    while (is >> w)
        out.push_back(w);
    return out;
}

namespace {

std::map<Tokens, std::size_t> ngram_counts(const Tokens& t, std::size_t n)
{
    std::map<Tokens, std::size_t> counts;
    for (std::size_t i = 0; i + n <= t.size(); ++i)
        ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return counts;
}

void check_corpus(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references)
{
    if (candidates.size() != references.size())
        throw EvalError("candidate and reference lists differ in length (" + std::to_string(candidates.size()) +
                        " vs " + std::to_string(references.size()) + ")");
    if (candidates.empty())
        throw EvalError("empty corpus");
}

} // namespace

NgramPrecision modified_precision(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                                  std::size_t n)
{
    check_corpus(candidates, references);
    NgramPrecision p;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto cand = ngram_counts(candidates[i], n);
        const auto ref = ngram_counts(references[i], n);
        for (const auto& [gram, count] : cand) {
            auto it = ref.find(gram);
            p.clipped += std::min(count, it == ref.end() ? std::size_t{0} : it->second);
            p.total += count;
        }
    }
    return p;
}

double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, std::size_t max_n)
{
    check_corpus(candidates, references);
    if (max_n == 0)
        throw EvalError("BLEU needs max_n >= 1");
    double log_sum = 0.0;
    for (std::size_t n = 1; n <= max_n; ++n) {
        const NgramPrecision p = modified_precision(candidates, references, n);
        if (p.clipped == 0 || p.total == 0)
            return 0.0;
        log_sum += std::log(static_cast<double>(p.clipped) / static_cast<double>(p.total));
    }
    std::size_t c = 0, r = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        c += candidates[i].size();
        r += references[i].size();
    }
    const double bp = c >= r ? 1.0 : std::exp(1.0 - static_cast<double>(r) / static_cast<double>(c));
    return std::clamp(bp * std::exp(log_sum / static_cast<double>(max_n)), 0.0, 1.0);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b)
{
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

RougeL rouge_l_scores(const Tokens& candidate, const Tokens& reference)
{
    RougeL r;
    if (candidate.empty() || reference.empty())
        return r;
    const double lcs = static_cast<double>(lcs_length(candidate, reference));
    r.precision = lcs / static_cast<double>(candidate.size());
    r.recall = lcs / static_cast<double>(reference.size());
    if (lcs > 0.0)
        r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
    return r;
}

double rouge_l(const Tokens& candidate, const Tokens& reference)
{
    return rouge_l_scores(candidate, reference).f1;
}

double distinct2(const std::vector<Tokens>& candidates)
{
    std::set<std::pair<std::string, std::string>> unique;
    std::size_t total = 0;
    for (const Tokens& c : candidates)
        for (std::size_t i = 0; i + 1 < c.size(); ++i) {
            unique.emplace(c[i], c[i + 1]);
            ++total;
        }
    return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

double exact_match(const std::vector<std::string>& candidates, const std::vector<std::string>& references)
{
    if (candidates.size() != references.size())
        throw EvalError("candidate and reference lists differ in length");
    if (candidates.empty())
        throw EvalError("empty corpus");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i)
        hits += candidates[i] == references[i] ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(candidates.size());
}

EvalReport evaluate_text(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                         std::size_t max_n)
{
    std::vector<Tokens> c, r;
    for (const auto& s : candidates)
        c.push_back(char_tokens(s));
    for (const auto& s : references)
        r.push_back(char_tokens(s));
    EvalReport rep;
    rep.n_samples = candidates.size();
    rep.bleu = bleu(c, r, max_n);
    double rl = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i)
        rl += rouge_l(c[i], r[i]);
    rep.rouge_l = rl / static_cast<double>(c.size());
    rep.distinct2 = distinct2(c);
    rep.exact_match = exact_match(candidates, references);
    return rep;
}

void write_eval_report(std::ostream& os, const EvalReport& report)
{
    os << "n_samples " << report.n_samples << '\n'
       << "bleu " << report.bleu << '\n'
       << "rouge_l " << report.rouge_l << '\n'
       << "distinct2 " << report.distinct2 << '\n'
       << "exact_match " << report.exact_match << '\n';
}

// ---- bench ------------------------------------------------------------------

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 2)
        throw EvalError("slope fit needs at least two matching points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

namespace {

double median_forward_seconds(const AttentionMask& mask, std::size_t width, std::size_t heads, std::size_t runs,
                              Rng& rng)
{
    const std::size_t n = mask.seq_len();
    const Tensor q = Tensor::randn({n, width}, rng), k = Tensor::randn({n, width}, rng),
                 v = Tensor::randn({n, width}, rng);
    std::vector<double> times;
    for (std::size_t r = 0; r < runs; ++r) {
        Tape tape;
        const auto t0 = std::chrono::steady_clock::now();
        Var out = masked_multihead_attention(tape.watch(q), tape.watch(k), tape.watch(v), mask, heads);
        const auto t1 = std::chrono::steady_clock::now();
        (void)out;
        times.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
}

} // namespace

BenchReport bench_attention(const std::vector<std::size_t>& seq_lens, const SparseAttentionConfig& sparse,
                            std::size_t runs)
{
    if (!std::is_sorted(seq_lens.begin(), seq_lens.end()))
        throw ConfigError("bench sequence lengths must be sorted ascending");
    sparse.validate();
    BenchReport rep;
    Rng rng(1234);
    std::vector<double> xs, dense_pairs, sparse_pairs, dense_t, sparse_t;
    for (std::size_t n : seq_lens) {
        SparseAttentionConfig cfg = sparse;
        std::erase_if(cfg.global_positions, [&](std::size_t g) { return g >= n; });
        const AttentionMask dense_mask = AttentionMask::dense(n);
        const AttentionMask sparse_mask = build_window_mask(n, cfg);
        BenchRow d{n, "dense", count_attended_pairs(dense_mask), 0.0};
        BenchRow s{n, "sparse", count_attended_pairs(sparse_mask), 0.0};
        if (runs > 0) {
            d.wall_time = median_forward_seconds(dense_mask, cfg.width(), cfg.num_heads, runs, rng);
            s.wall_time = median_forward_seconds(sparse_mask, cfg.width(), cfg.num_heads, runs, rng);
        }
        xs.push_back(static_cast<double>(n));
        dense_pairs.push_back(static_cast<double>(d.pair_count));
        sparse_pairs.push_back(static_cast<double>(s.pair_count));
        dense_t.push_back(d.wall_time);
        sparse_t.push_back(s.wall_time);
        rep.rows.push_back(d);
        rep.rows.push_back(s);
    }
    if (xs.size() >= 2) {
        rep.dense_pair_slope = loglog_slope(xs, dense_pairs);
        rep.sparse_pair_slope = loglog_slope(xs, sparse_pairs);
        if (runs > 0) {
            rep.dense_time_slope = loglog_slope(xs, dense_t);
            rep.sparse_time_slope = loglog_slope(xs, sparse_t);
        }
    }
    return rep;
}

void write_bench_text(std::ostream& os, const BenchReport& report)
{
    for (const BenchRow& r : report.rows)
        os << "n=" << r.seq_len << ' ' << r.attention_kind << " pairs=" << r.pair_count << " time=" << r.wall_time
           << "s\n";
    os << "pair slope: dense " << report.dense_pair_slope << ", sparse " << report.sparse_pair_slope << '\n';
    os << "time slope: dense " << report.dense_time_slope << ", sparse " << report.sparse_time_slope << '\n';
}

void write_bench_csv(std::ostream& os, const BenchReport& report)
{
    os << "seq_len,attention_kind,pair_count,wall_time\n";
    os.precision(17);
    for (const BenchRow& r : report.rows)
        os << r.seq_len << ',' << r.attention_kind << ',' << r.pair_count << ',' << r.wall_time << '\n';
}

BenchReport read_bench_csv(std::istream& is)
{
    BenchReport rep;
    std::string line;
    if (!std::getline(is, line) || line != "seq_len,attention_kind,pair_count,wall_time")
        throw LineFormatError("bench file: missing header");
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty())
            continue;
        std::istringstream ls(line);
        BenchRow r;
        std::string f[4];
        for (int i = 0; i < 4; ++i)
            if (!std::getline(ls, f[i], i < 3 ? ',' : '\n'))
                throw LineFormatError("bench file line " + std::to_string(line_no) + ": expected 4 fields");
        try {
            r.seq_len = std::stoull(f[0]);
            r.attention_kind = f[1];
            r.pair_count = std::stoull(f[2]);
            r.wall_time = std::stod(f[3]);
        } catch (const std::exception&) {
            throw LineFormatError("bench file line " + std::to_string(line_no) + ": bad number");
        }
        rep.rows.push_back(r);
    }
    std::vector<double> xs, dp, sp, dt, st;
    for (const BenchRow& r : rep.rows) {
        if (r.attention_kind == "dense") {
            xs.push_back(static_cast<double>(r.seq_len));
            dp.push_back(static_cast<double>(r.pair_count));
            dt.push_back(r.wall_time);
        } else {
            sp.push_back(static_cast<double>(r.pair_count));
            st.push_back(r.wall_time);
        }
    }
    if (xs.size() >= 2 && sp.size() == xs.size()) {
        rep.dense_pair_slope = loglog_slope(xs, dp);
        rep.sparse_pair_slope = loglog_slope(xs, sp);
        if (std::all_of(dt.begin(), dt.end(), [](double t) { return t > 0; }) &&
            std::all_of(st.begin(), st.end(), [](double t) { return t > 0; })) {
            rep.dense_time_slope = loglog_slope(xs, dt);
            rep.sparse_time_slope = loglog_slope(xs, st);
        }
    }
    return rep;
}

} // namespace mdsq

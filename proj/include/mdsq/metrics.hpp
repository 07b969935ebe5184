#pragma once
// Generation metrics and the attention complexity bench.

#include "mdsq/attention.hpp"

#include <cstddef>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace mdsq {

using Tokens = std::vector<std::string>;

Tokens char_tokens(std::string_view text);  // one token per code point
Tokens word_tokens(std::string_view text);  // split on whitespace

struct NgramPrecision {
    std::size_t clipped = 0;
    std::size_t total = 0;
};

// Corpus-level modified n-gram precision (candidate counts clipped by the
// reference counts).
NgramPrecision modified_precision(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                                  std::size_t n);

// Corpus BLEU: uniform weights over 1..max_n, brevity penalty, no smoothing.
// Any empty n-gram bucket yields 0.
double bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, std::size_t max_n = 4);

std::size_t lcs_length(const Tokens& a, const Tokens& b);

struct RougeL {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

RougeL rouge_l_scores(const Tokens& candidate, const Tokens& reference);
// F1 (beta = 1); 0 when either side is empty.
double rouge_l(const Tokens& candidate, const Tokens& reference);

// Unique bigrams / total bigrams over the whole candidate set; 0 without bigrams.
double distinct2(const std::vector<Tokens>& candidates);

double exact_match(const std::vector<std::string>& candidates, const std::vector<std::string>& references);

struct EvalReport {
    double bleu = 0.0;
    double rouge_l = 0.0;  // mean sentence-level F1
    double distinct2 = 0.0;
    double exact_match = 0.0;
    std::size_t n_samples = 0;
};

// Character-level scoring; bleu uses max_n.
EvalReport evaluate_text(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                         std::size_t max_n = 2);
void write_eval_report(std::ostream& os, const EvalReport& report);

struct BenchRow {
    std::size_t seq_len = 0;
    std::string attention_kind;  // "dense" or "sparse"
    std::size_t pair_count = 0;
    double wall_time = 0.0;  // median seconds per forward
};

struct BenchReport {
    std::vector<BenchRow> rows;
    double dense_pair_slope = 0.0;
    double sparse_pair_slope = 0.0;
    double dense_time_slope = 0.0;
    double sparse_time_slope = 0.0;
};

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// runs == 0 skips timing (pair counts only).
BenchReport bench_attention(const std::vector<std::size_t>& seq_lens, const SparseAttentionConfig& sparse,
                            std::size_t runs);

void write_bench_text(std::ostream& os, const BenchReport& report);
// Delimited form: header "seq_len,attention_kind,pair_count,wall_time", one row per line.
void write_bench_csv(std::ostream& os, const BenchReport& report);
BenchReport read_bench_csv(std::istream& is);

} // namespace mdsq

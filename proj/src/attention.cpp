#include "mdsq/attention.hpp"

#include "mdsq/error.hpp"
#include "mdsq/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace mdsq {

void SparseAttentionConfig::validate() const
{
    if (window < 2 || window % 2 != 0)
        throw ConfigError("attention window must be even and >= 2, got " + std::to_string(window));
    if (dilation < 1)
        throw ConfigError("attention dilation must be >= 1");
    if (num_heads < 1 || head_dim < 1)
        throw ConfigError("attention needs at least one head of nonzero width");
    if (num_layers < 1)
        throw ConfigError("attention layer count must be >= 1");
}

void SparseAttentionConfig::validate_for(std::size_t seq_len) const
{
    validate();
    for (std::size_t g : global_positions)
        if (g >= seq_len)
            throw ConfigError("global position " + std::to_string(g) + " outside sequence of length " +
                              std::to_string(seq_len));
}

AttentionMask AttentionMask::from_matrix(std::size_t seq_len, std::vector<std::uint8_t> allowed)
{
    if (allowed.size() != seq_len * seq_len)
        throw DimensionError("attention mask needs " + std::to_string(seq_len * seq_len) + " entries, got " +
                             std::to_string(allowed.size()));
    auto impl = std::make_shared<Impl>();
    impl->n = seq_len;
    impl->offsets.reserve(seq_len + 1);
    impl->offsets.push_back(0);
    for (std::size_t i = 0; i < seq_len; ++i) {
        if (allowed[i * seq_len + i] == 0)
            throw DimensionError("attention mask row " + std::to_string(i) + " does not allow the diagonal");
        for (std::size_t j = 0; j < seq_len; ++j)
            if (allowed[i * seq_len + j] != 0) {
                allowed[i * seq_len + j] = 1;
                impl->cols.push_back(static_cast<std::uint32_t>(j));
            }
        impl->offsets.push_back(impl->cols.size());
    }
    impl->bits = std::move(allowed);
    AttentionMask m;
    m.impl_ = std::move(impl);
    return m;
}

AttentionMask AttentionMask::dense(std::size_t seq_len)
{
    return from_matrix(seq_len, std::vector<std::uint8_t>(seq_len * seq_len, 1));
}

AttentionMask build_window_mask(std::size_t seq_len, const SparseAttentionConfig& cfg)
{
    if (seq_len < 1)
        throw ConfigError("sequence length must be >= 1");
    cfg.validate_for(seq_len);
    const std::size_t reach = (cfg.window / 2) * cfg.dilation;
    std::vector<std::uint8_t> bits(seq_len * seq_len, 0);
    for (std::size_t i = 0; i < seq_len; ++i) {
        const std::size_t lo = i >= reach ? i - reach : 0;
        const std::size_t hi = std::min(seq_len - 1, i + reach);
        for (std::size_t j = lo; j <= hi; ++j) {
            const std::size_t gap = i > j ? i - j : j - i;
            if (gap % cfg.dilation == 0)
                bits[i * seq_len + j] = 1;
        }
    }
    for (std::size_t g : cfg.global_positions)
        for (std::size_t j = 0; j < seq_len; ++j) {
            bits[g * seq_len + j] = 1;
            bits[j * seq_len + g] = 1;
        }
    return AttentionMask::from_matrix(seq_len, std::move(bits));
}

Var masked_multihead_attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t num_heads)
{
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    if (qv.rank() != 2 || kv.shape() != qv.shape() || vv.shape() != qv.shape())
        throw DimensionError("attention: q, k, v must share a [seq, width] shape, got " + shape_str(qv.shape()) +
                             ", " + shape_str(kv.shape()) + ", " + shape_str(vv.shape()));
    const std::size_t seq = qv.dim(0), width = qv.dim(1);
    if (num_heads == 0 || width % num_heads != 0)
        throw DimensionError("attention: width " + std::to_string(width) + " not divisible by " +
                             std::to_string(num_heads) + " heads");
    if (mask.seq_len() != seq)
        throw DimensionError("attention: mask for length " + std::to_string(mask.seq_len()) + " applied to length " +
                             std::to_string(seq));
    const std::size_t dk = width / num_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
    const std::size_t pairs = mask.pair_count();

    // probs[h * pairs + offset(i) + r] = attention weight of query i on its r-th allowed key
    std::vector<double> probs(num_heads * pairs);
    Tensor out({seq, width});
    const double* Q = qv.data().data();
    const double* K = kv.data().data();
    const double* V = vv.data().data();
    for (std::size_t h = 0; h < num_heads; ++h) {
        const std::size_t c0 = h * dk;
        for (std::size_t i = 0; i < seq; ++i) {
            const auto keys = mask.row(i);
            if (keys.empty())
                throw DegenerateRowError("attention query " + std::to_string(i) + " has no allowed key");
            double* p = probs.data() + h * pairs + mask.row_offset(i);
            double mx = -INFINITY;
            for (std::size_t r = 0; r < keys.size(); ++r) {
                p[r] = inv_sqrt * kernels::dot(Q + i * width + c0, K + keys[r] * width + c0, dk);
                mx = std::max(mx, p[r]);
            }
            double z = 0.0;
            for (std::size_t r = 0; r < keys.size(); ++r) {
                p[r] = std::exp(p[r] - mx);
                z += p[r];
            }
            double* o = out.data().data() + i * width + c0;
            for (std::size_t r = 0; r < keys.size(); ++r) {
                p[r] /= z;
                kernels::axpy(p[r], V + keys[r] * width + c0, o, dk);
            }
        }
    }

    return q.tape().record(
        std::move(out), {q, k, v},
        [q, k, v, mask, num_heads, dk, width, seq, inv_sqrt, pairs, probs = std::move(probs)](
            Tape& tape, std::span<const double> g) {
            const double* Q = q.value().data().data();
            const double* K = k.value().data().data();
            const double* V = v.value().data().data();
            std::span<double> gq = tape.grad_buffer(q);
            std::span<double> gk = tape.grad_buffer(k);
            std::span<double> gv = tape.grad_buffer(v);
            std::vector<double> dp;
            for (std::size_t h = 0; h < num_heads; ++h) {
                const std::size_t c0 = h * dk;
                for (std::size_t i = 0; i < seq; ++i) {
                    const auto keys = mask.row(i);
                    const double* p = probs.data() + h * pairs + mask.row_offset(i);
                    const double* gi = g.data() + i * width + c0;
                    dp.assign(keys.size(), 0.0);
                    double c = 0.0;
                    for (std::size_t r = 0; r < keys.size(); ++r) {
                        dp[r] = kernels::dot(gi, V + keys[r] * width + c0, dk);
                        c += p[r] * dp[r];
                        if (!gv.empty())
                            kernels::axpy(p[r], gi, gv.data() + keys[r] * width + c0, dk);
                    }
                    for (std::size_t r = 0; r < keys.size(); ++r) {
                        const double ds = inv_sqrt * p[r] * (dp[r] - c);
                        if (!gq.empty())
                            kernels::axpy(ds, K + keys[r] * width + c0, gq.data() + i * width + c0, dk);
                        if (!gk.empty())
                            kernels::axpy(ds, Q + i * width + c0, gk.data() + keys[r] * width + c0, dk);
                    }
                }
            }
        });
}

std::size_t receptive_field(const SparseAttentionConfig& cfg)
{
    return cfg.num_layers * cfg.dilation * cfg.window;
}

std::vector<TokenReach> reachability_span(std::size_t seq_len, const SparseAttentionConfig& cfg)
{
    const AttentionMask mask = build_window_mask(seq_len, cfg);
    std::vector<TokenReach> out(seq_len);
    std::vector<std::uint8_t> seen(seq_len);
    std::vector<std::uint32_t> frontier, next;
    for (std::size_t c = 0; c < seq_len; ++c) {
        std::fill(seen.begin(), seen.end(), 0);
        seen[c] = 1;
        frontier.assign(1, static_cast<std::uint32_t>(c));
        for (std::size_t layer = 0; layer < cfg.num_layers && !frontier.empty(); ++layer) {
            next.clear();
            for (std::uint32_t j : frontier)
                for (std::uint32_t key : mask.row(j))
                    if (!seen[key]) {
                        seen[key] = 1;
                        next.push_back(key);
                    }
            frontier.swap(next);
        }
        TokenReach& r = out[c];
        r.lo = seq_len;
        for (std::size_t j = 0; j < seq_len; ++j)
            if (seen[j]) {
                ++r.count;
                r.lo = std::min(r.lo, j);
                r.hi = j;
            }
    }
    return out;
}

TokenReach window_reach_closed_form(std::size_t seq_len, const SparseAttentionConfig& cfg, std::size_t token)
{
    const std::size_t steps = cfg.num_layers * (cfg.window / 2);
    const std::size_t d = cfg.dilation;
    const std::size_t left = std::min(steps, token / d);
    const std::size_t right = std::min(steps, (seq_len - 1 - token) / d);
    TokenReach r;
    r.count = left + right + 1;
    r.lo = token - left * d;
    r.hi = token + right * d;
    return r;
}

std::size_t count_attended_pairs(const AttentionMask& mask)
{
    return mask.pair_count();
}

} // namespace mdsq

#include "mdsq/moe.hpp"

#include "mdsq/error.hpp"
#include "mdsq/kernels.hpp"
#include "mdsq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace mdsq {

FeedForward FeedForward::init(std::size_t width, std::size_t hidden, Rng& rng)
{
    FeedForward f;
    f.w1 = Tensor::randn({width, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(width)));
    f.b1 = Tensor::zeros({hidden});
    f.w2 = Tensor::randn({hidden, width}, rng, 0.5 / std::sqrt(static_cast<double>(hidden)));
    f.b2 = Tensor::zeros({width});
    return f;
}

Var feed_forward(Var x, const FeedForward& ffn, ParamBinder& bind)
{
    Var h = relu(add(matmul(x, bind(ffn.w1)), bind(ffn.b1)));
    return add(matmul(h, bind(ffn.w2)), bind(ffn.b2));
}

Tensor feed_forward_values(const FeedForward& ffn, std::span<const double> x)
{
    const std::size_t width = ffn.width(), hidden = ffn.hidden();
    if (x.size() != width)
        throw DimensionError("feed_forward: token of width " + std::to_string(x.size()) + ", expected " +
                             std::to_string(width));
    std::vector<double> h(ffn.b1.data().begin(), ffn.b1.data().end());
    for (std::size_t i = 0; i < width; ++i)
        for (std::size_t j = 0; j < hidden; ++j)
            h[j] += x[i] * ffn.w1.at(i, j);
    Tensor out({width}, std::vector<double>(ffn.b2.data().begin(), ffn.b2.data().end()));
    for (std::size_t j = 0; j < hidden; ++j) {
        const double a = std::max(h[j], 0.0);
        for (std::size_t i = 0; i < width; ++i)
            out[i] += a * ffn.w2.at(j, i);
    }
    return out;
}

MoELayer MoELayer::init(std::size_t width, std::size_t hidden, std::size_t num_experts, std::size_t top_k,
                        double aux_loss_coeff, Rng& rng)
{
    MoELayer layer;
    layer.gate_weights = Tensor::randn({width, num_experts}, rng, 0.1 / std::sqrt(static_cast<double>(width)));
    for (std::size_t e = 0; e < num_experts; ++e)
        layer.experts.push_back(FeedForward::init(width, hidden, rng));
    layer.top_k = top_k;
    layer.aux_loss_coeff = aux_loss_coeff;
    layer.validate();
    return layer;
}

void MoELayer::validate() const
{
    if (experts.empty())
        throw ConfigError("MoE layer needs at least one expert");
    if (top_k < 1 || top_k > experts.size())
        throw ConfigError("top_k must lie in [1, " + std::to_string(experts.size()) + "], got " +
                          std::to_string(top_k));
    if (aux_loss_coeff < 0.0)
        throw ConfigError("aux_loss_coeff must be >= 0");
    if (gate_weights.rank() != 2 || gate_weights.dim(1) != experts.size())
        throw ConfigError("gate weights " + shape_str(gate_weights.shape()) + " do not match " +
                          std::to_string(experts.size()) + " experts");
    for (const FeedForward& e : experts)
        if (e.w1.shape() != experts.front().w1.shape() || e.w2.shape() != experts.front().w2.shape() ||
            e.b1.shape() != experts.front().b1.shape() || e.b2.shape() != experts.front().b2.shape())
            throw ConfigError("experts differ in shape");
    if (experts.front().width() != gate_weights.dim(0))
        throw ConfigError("expert width differs from gate width");
}

Tensor gate(const MoELayer& layer, std::span<const double> x)
{
    const std::size_t width = layer.width(), ne = layer.num_experts();
    if (x.size() != width)
        throw DimensionError("gate: token of width " + std::to_string(x.size()) + ", gate expects " +
                             std::to_string(width));
    std::vector<double> logits(ne, 0.0);
    for (std::size_t i = 0; i < width; ++i)
        kernels::axpy(x[i], layer.gate_weights.data().data() + i * ne, logits.data(), ne);
    return softmax_values(logits);
}

std::vector<std::size_t> top_k_experts(std::span<const double> probs, std::size_t k)
{
    std::vector<std::size_t> idx(probs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    k = std::min(k, idx.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                      [&](std::size_t a, std::size_t b) { return probs[a] > probs[b] || (probs[a] == probs[b] && a < b); });
    idx.resize(k);
    return idx;
}

Var topk_renormalize(Var probs, const std::vector<std::vector<std::size_t>>& routes)
{
    const Tensor& pv = probs.value();
    if (pv.rank() != 2 || pv.dim(0) != routes.size())
        throw DimensionError("topk_renormalize: " + std::to_string(routes.size()) + " routes for probabilities " +
                             shape_str(pv.shape()));
    const std::size_t ne = pv.dim(1);
    Tensor out(pv.shape());
    std::vector<double> denom(routes.size());
    for (std::size_t t = 0; t < routes.size(); ++t) {
        double z = 0.0;
        for (std::size_t e : routes[t])
            z += pv.at(t, e);
        denom[t] = z;
        for (std::size_t e : routes[t])
            out.at(t, e) = pv.at(t, e) / z;
    }
    Tensor w = out;
    return probs.tape().record(
        std::move(out), {probs},
        [probs, routes, ne, denom = std::move(denom), w = std::move(w)](Tape& tape, std::span<const double> g) {
            std::span<double> gp = tape.grad_buffer(probs);
            for (std::size_t t = 0; t < routes.size(); ++t) {
                double c = 0.0;
                for (std::size_t e : routes[t])
                    c += g[t * ne + e] * w[t * ne + e];
                for (std::size_t e : routes[t])
                    gp[t * ne + e] += (g[t * ne + e] - c) / denom[t];
            }
        });
}

void RoutingStats::merge(const RoutingStats& other)
{
    if (counts.empty()) {
        *this = other;
        return;
    }
    for (std::size_t i = 0; i < counts.size(); ++i) {
        counts[i] += other.counts[i];
        gate_mass[i] += other.gate_mass[i];
    }
    tokens += other.tokens;
}

std::vector<double> RoutingStats::mean_gate_mass() const
{
    std::vector<double> m(gate_mass.size(), 0.0);
    for (std::size_t i = 0; i < m.size() && tokens > 0; ++i)
        m[i] = gate_mass[i] / static_cast<double>(tokens);
    return m;
}

std::vector<double> RoutingStats::load_fraction() const
{
    std::vector<double> f(counts.size(), 0.0);
    for (std::size_t i = 0; i < f.size() && tokens > 0; ++i)
        f[i] = static_cast<double>(counts[i]) / static_cast<double>(tokens * top_k);
    return f;
}

namespace {

RoutingStats stats_from(const Tensor& probs, const std::vector<std::vector<std::size_t>>& routes, std::size_t top_k)
{
    RoutingStats s;
    const std::size_t ne = probs.dim(1);
    s.counts.assign(ne, 0);
    s.gate_mass.assign(ne, 0.0);
    s.tokens = routes.size();
    s.top_k = top_k;
    for (std::size_t t = 0; t < routes.size(); ++t) {
        for (std::size_t e : routes[t])
            ++s.counts[e];
        for (std::size_t e = 0; e < ne; ++e)
            s.gate_mass[e] += probs.at(t, e);
    }
    return s;
}

} // namespace

MoEOutput moe_forward(Var x, const MoELayer& layer, ParamBinder& bind)
{
    layer.validate();
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || xv.dim(1) != layer.width())
        throw DimensionError("moe_forward: input " + shape_str(xv.shape()) + " for layer of width " +
                             std::to_string(layer.width()));
    const std::size_t seq = xv.dim(0), ne = layer.num_experts();

    Var probs = softmax_lastdim(matmul(x, bind(layer.gate_weights)));
    std::vector<std::vector<std::size_t>> routes(seq);
    for (std::size_t t = 0; t < seq; ++t)
        routes[t] = top_k_experts(probs.value().row(t), layer.top_k);
    Var weights = topk_renormalize(probs, routes);

    Var out;
    for (std::size_t e = 0; e < ne; ++e) {
        std::vector<std::size_t> tokens;
        for (std::size_t t = 0; t < seq; ++t)
            if (std::find(routes[t].begin(), routes[t].end(), e) != routes[t].end())
                tokens.push_back(t);
        if (tokens.empty())
            continue;
        const std::vector<std::size_t> col(tokens.size(), e);
        Var y = feed_forward(gather_rows(x, tokens), layer.experts[e], bind);
        Var contrib = scatter_rows(mul_rows(y, gather_elements(weights, tokens, col)), tokens, seq);
        out = out.valid() ? add(out, contrib) : contrib;
    }

    MoEOutput result;
    result.out = out;
    result.stats = stats_from(probs.value(), routes, layer.top_k);
    const std::vector<double> frac = result.stats.load_fraction();
    Tape& tape = x.tape();
    Var balance = scale(sum(mul(mean_rows(probs), tape.constant(Tensor({ne}, frac)))), static_cast<double>(ne));
    result.balance = balance.value().item();
    result.aux_loss = scale(balance, layer.aux_loss_coeff);
    return result;
}

RoutingStats routing_stats(const MoELayer& layer, const Tensor& tokens)
{
    if (tokens.rank() != 2 || tokens.dim(1) != layer.width())
        throw DimensionError("routing_stats: tokens " + shape_str(tokens.shape()) + " for layer of width " +
                             std::to_string(layer.width()));
    Tensor probs({tokens.dim(0), layer.num_experts()});
    std::vector<std::vector<std::size_t>> routes(tokens.dim(0));
    for (std::size_t t = 0; t < tokens.dim(0); ++t) {
        Tensor p = gate(layer, tokens.row(t));
        std::copy(p.data().begin(), p.data().end(), probs.row(t).begin());
        routes[t] = top_k_experts(p.data(), layer.top_k);
    }
    return stats_from(probs, routes, layer.top_k);
}

} // namespace mdsq

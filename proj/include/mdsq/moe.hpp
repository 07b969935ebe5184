#pragma once
// Mixture-of-Experts feed-forward: softmax gate, top-k routing with
// renormalized weights, and a load-balance auxiliary loss.

#include "mdsq/tensor.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace mdsq {

class Rng;

// Two-layer relu network: width -> hidden -> width.
struct FeedForward {
    Tensor w1;  // [width, hidden]
    Tensor b1;  // [hidden]
    Tensor w2;  // [hidden, width]
    Tensor b2;  // [width]

    static FeedForward init(std::size_t width, std::size_t hidden, Rng& rng);
    std::size_t width() const { return w1.dim(0); }
    std::size_t hidden() const { return w1.dim(1); }
};

Var feed_forward(Var x, const FeedForward& ffn, ParamBinder& bind);
// Plain evaluation of one token, for oracles and inspection.
Tensor feed_forward_values(const FeedForward& ffn, std::span<const double> x);

struct MoELayer {
    Tensor gate_weights;  // W_g, [width, num_experts]
    std::vector<FeedForward> experts;
    std::size_t top_k = 2;
    double aux_loss_coeff = 0.01;

    static MoELayer init(std::size_t width, std::size_t hidden, std::size_t num_experts, std::size_t top_k,
                         double aux_loss_coeff, Rng& rng);

    std::size_t num_experts() const { return experts.size(); }
    std::size_t width() const { return gate_weights.dim(0); }
    // 1 <= top_k <= num_experts and identical expert shapes.
    void validate() const;
};

// softmax(W_g^T x) for a single token.
Tensor gate(const MoELayer& layer, std::span<const double> x);

// Indices of the k largest probabilities, largest first; equal values prefer the
// lower index.
std::vector<std::size_t> top_k_experts(std::span<const double> probs, std::size_t k);

// Dense [tokens, experts] weights: each token's selected probabilities divided
// by their sum, zero elsewhere. Differentiable in probs.
Var topk_renormalize(Var probs, const std::vector<std::vector<std::size_t>>& routes);

struct RoutingStats {
    std::vector<std::size_t> counts;  // token-slots routed to each expert
    std::vector<double> gate_mass;    // summed gate probability per expert
    std::size_t tokens = 0;
    std::size_t top_k = 0;

    void merge(const RoutingStats& other);
    std::vector<double> mean_gate_mass() const;
    // counts[i] / (tokens * top_k)
    std::vector<double> load_fraction() const;
};

struct MoEOutput {
    Var out;          // [seq, width]
    Var aux_loss;     // scalar, aux_loss_coeff * balance penalty
    double balance = 0.0;  // num_experts * sum_i load_fraction_i * mean_gate_i
    RoutingStats stats;
};

MoEOutput moe_forward(Var x, const MoELayer& layer, ParamBinder& bind);

// Gate-only pass over a batch of token rows [tokens, width].
RoutingStats routing_stats(const MoELayer& layer, const Tensor& tokens);

} // namespace mdsq

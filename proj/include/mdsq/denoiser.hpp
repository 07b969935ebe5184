#pragma once
// The denoising network f_theta: token, position and time embeddings feeding a
// stack of pre-layernorm [sparse attention -> MoE feed-forward] blocks, plus the
// rounding head that maps predicted clean embeddings back to token ids.

#include "mdsq/attention.hpp"
#include "mdsq/moe.hpp"
#include "mdsq/tensor.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace mdsq {

class Rng;

struct ModelConfig {
    std::size_t vocab_size = 64;  // includes pad, bos, eos and the absorbing-state slot
    std::size_t width = 128;
    std::size_t num_layers = 4;
    std::size_t num_heads = 4;
    std::size_t window = 32;
    std::vector<std::size_t> dilations{1};  // per layer, cycled when shorter than num_layers
    std::vector<std::size_t> global_positions{0};
    bool sparse_attention = true;  // false: standard dense attention
    std::size_t num_experts = 4;
    std::size_t top_k = 2;
    std::size_t hidden = 512;
    double aux_loss_coeff = 0.01;
    std::size_t moe_every = 1;  // layer i uses MoE iff i % moe_every == 0
    std::size_t T = 2048;
    std::size_t max_seq_len = 256;
    bool tied_head = true;

    std::size_t head_dim() const { return num_heads == 0 ? 0 : width / num_heads; }
    std::size_t dilation_for_layer(std::size_t layer) const { return dilations[layer % dilations.size()]; }
    bool layer_uses_moe(std::size_t layer) const { return layer % moe_every == 0; }
    SparseAttentionConfig attention_for_layer(std::size_t layer) const;
    std::vector<std::string> violations() const;
    // Lists every violated constraint in one ConfigError.
    void validate() const;
};

struct DenoiserBlock {
    Tensor ln1_gain, ln1_bias;
    Tensor wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    bool uses_moe = true;
    MoELayer moe;     // when uses_moe
    FeedForward ffn;  // otherwise
};

struct NamedTensor {
    std::string name;
    Tensor* tensor;
};

struct NamedConstTensor {
    std::string name;
    const Tensor* tensor;
};

class DenoiserModel {
public:
    ModelConfig config;
    Tensor embedding;   // EMB, [vocab, width]; row kPadId frozen at zero
    Tensor positions;   // [max_seq_len, width]
    Tensor time_w;      // [width, width]
    Tensor time_b;      // [width]
    std::vector<DenoiserBlock> blocks;
    Tensor final_gain, final_bias;
    Tensor out_w;       // [width, width]
    Tensor out_b;       // [width]
    Tensor head;        // [width, vocab], only when !config.tied_head

    static DenoiserModel init(const ModelConfig& config, Rng& rng);

    std::vector<NamedTensor> named_parameters();
    std::vector<NamedConstTensor> named_parameters() const;
    std::size_t parameter_count() const;
    void zero_grad();
    // Re-zeroes the frozen pad row and its gradient.
    void enforce_frozen();
    bool all_finite() const;
};

// Closed form:
//   V*w + L*w + (w*w + w) + 2w + (w*w + w) + [untied: w*V]
//   + per layer: 4w + 4w^2 + FFN, where FFN = 2wh + h + w for a dense layer and
//     w*E + E*(2wh + h + w) for an MoE layer.
std::size_t parameter_count(const ModelConfig& config);

std::vector<std::size_t> checked_ids(std::span<const std::size_t> ids, const ModelConfig& config);
Var embed(std::span<const std::size_t> ids, const DenoiserModel& model, ParamBinder& bind);

// Sinusoidal features of t/T, shape [width].
Tensor time_features(std::size_t t, std::size_t T, std::size_t width);

// Masks for a sequence length, one per layer (dense masks when sparse
// attention is disabled). Global positions beyond the length are dropped.
std::vector<AttentionMask> layer_masks(const ModelConfig& config, std::size_t seq_len);

struct DenoiserOutput {
    Var z0_hat;    // [seq, width]
    Var aux_loss;  // scalar sum of MoE auxiliary losses
    std::vector<RoutingStats> routing;  // per MoE layer
};

DenoiserOutput f_theta(Var z_t, std::size_t t, const DenoiserModel& model, ParamBinder& bind);
// Inference-only evaluation.
Tensor f_theta_values(const Tensor& z_t, std::size_t t, const DenoiserModel& model);

// logits[i, v] = <z0_hat[i], EMB[v]> (tied) or z0_hat * head.
Var token_logits(Var z0_hat, const DenoiserModel& model, ParamBinder& bind);

struct Rounding {
    std::vector<std::size_t> ids;
    Tensor logits;
};

// argmax over logits per row, ties resolved toward the lowest id.
Rounding round_to_tokens(const Tensor& z0_hat, const DenoiserModel& model);

} // namespace mdsq

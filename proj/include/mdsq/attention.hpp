#pragma once
// Sparse attention masks (dilated sliding window + global tokens), the masked
// multi-head attention kernel, and exact accounting of attended pairs and
// multi-layer receptive fields.

#include "mdsq/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

namespace mdsq {

struct SparseAttentionConfig {
    std::size_t window = 32;   // full width w; each side covers w/2 dilated steps
    std::size_t dilation = 1;  // gap factor d
    std::vector<std::size_t> global_positions;
    std::size_t num_heads = 4;
    std::size_t head_dim = 32;
    std::size_t num_layers = 4;  // only used by receptive-field accounting

    std::size_t width() const noexcept { return num_heads * head_dim; }

    // w >= 2 and even, d >= 1, heads/head_dim/layers >= 1.
    void validate() const;
    // Additionally checks every global position is inside [0, seq_len).
    void validate_for(std::size_t seq_len) const;
};

// Immutable boolean [seq_len, seq_len] matrix (row = query, col = key) with the
// allowed key list of each row kept alongside for sparse iteration.
class AttentionMask {
public:
    AttentionMask() = default;

    static AttentionMask dense(std::size_t seq_len);
    // Throws DimensionError unless allowed has seq_len^2 entries and every
    // diagonal entry is set.
    static AttentionMask from_matrix(std::size_t seq_len, std::vector<std::uint8_t> allowed);

    std::size_t seq_len() const noexcept { return impl_ ? impl_->n : 0; }
    bool allowed(std::size_t query, std::size_t key) const { return impl_->bits[query * impl_->n + key] != 0; }
    std::span<const std::uint8_t> matrix() const { return impl_->bits; }
    std::span<const std::uint32_t> row(std::size_t query) const
    {
        return {impl_->cols.data() + impl_->offsets[query], impl_->offsets[query + 1] - impl_->offsets[query]};
    }
    std::size_t pair_count() const noexcept { return impl_ ? impl_->cols.size() : 0; }
    std::size_t row_offset(std::size_t query) const { return impl_->offsets[query]; }

private:
    struct Impl {
        std::size_t n = 0;
        std::vector<std::uint8_t> bits;
        std::vector<std::size_t> offsets;
        std::vector<std::uint32_t> cols;
    };
    std::shared_ptr<const Impl> impl_;
};

// Query i may attend key j iff |i-j| <= (w/2)*d and (i-j) mod d == 0, or either
// index is a global position.
AttentionMask build_window_mask(std::size_t seq_len, const SparseAttentionConfig& cfg);

// Per head h: softmax(Q_h K_h^T / sqrt(d_k)) V_h restricted to allowed pairs;
// heads concatenated. Only allowed pairs are evaluated, forward and backward.
Var masked_multihead_attention(Var q, Var k, Var v, const AttentionMask& mask, std::size_t num_heads);

// l * d * w
std::size_t receptive_field(const SparseAttentionConfig& cfg);

struct TokenReach {
    std::size_t count = 0;  // number of influencing input positions
    std::size_t lo = 0;     // leftmost influencing position
    std::size_t hi = 0;     // rightmost influencing position
    std::size_t extent() const noexcept { return hi - lo; }
};

// Exact reachable sets after cfg.num_layers applications of the one-layer mask
// (relational composition, explored breadth first).
std::vector<TokenReach> reachability_span(std::size_t seq_len, const SparseAttentionConfig& cfg);

// Closed form for the symmetric dilated window without global tokens: token c
// is influenced by c + d*m for every integer |m| <= l*w/2 that lies inside the
// sequence. Away from the edges that is l*w + 1 positions spanning l*d*w.
TokenReach window_reach_closed_form(std::size_t seq_len, const SparseAttentionConfig& cfg, std::size_t token);

std::size_t count_attended_pairs(const AttentionMask& mask);

} // namespace mdsq

#include "mdsq/denoiser.hpp"

#include "mdsq/data.hpp"
#include "mdsq/error.hpp"
#include "mdsq/kernels.hpp"
#include "mdsq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mdsq {

SparseAttentionConfig ModelConfig::attention_for_layer(std::size_t layer) const
{
    SparseAttentionConfig a;
    a.window = window;
    a.dilation = dilation_for_layer(layer);
    a.global_positions = global_positions;
    a.num_heads = num_heads;
    a.head_dim = head_dim();
    a.num_layers = num_layers;
    return a;
}

std::vector<std::string> ModelConfig::violations() const
{
    std::vector<std::string> errs;
    if (vocab_size <= kFirstCharId)
        errs.push_back("vocab_size must exceed the " + std::to_string(kFirstCharId) + " reserved ids");
    if (width == 0)
        errs.push_back("width must be >= 1");
    if (num_layers == 0)
        errs.push_back("num_layers must be >= 1");
    if (num_heads == 0 || width % num_heads != 0)
        errs.push_back("width must equal num_heads x head_dim");
    if (window < 2 || window % 2 != 0)
        errs.push_back("window must be even and >= 2");
    if (dilations.empty() || std::any_of(dilations.begin(), dilations.end(), [](std::size_t d) { return d == 0; }))
        errs.push_back("dilations must be a nonempty list of values >= 1");
    if (num_experts == 0)
        errs.push_back("num_experts must be >= 1");
    if (top_k == 0 || top_k > num_experts)
        errs.push_back("top_k must lie in [1, num_experts]");
    if (hidden == 0)
        errs.push_back("hidden must be >= 1");
    if (aux_loss_coeff < 0.0)
        errs.push_back("aux_loss_coeff must be >= 0");
    if (moe_every == 0)
        errs.push_back("moe_every must be >= 1");
    if (T < 2)
        errs.push_back("T must be >= 2");
    if (max_seq_len == 0)
        errs.push_back("max_seq_len must be >= 1");
    for (std::size_t g : global_positions)
        if (g >= max_seq_len)
            errs.push_back("global position " + std::to_string(g) + " >= max_seq_len");
    return errs;
}

void ModelConfig::validate() const
{
    const std::vector<std::string> errs = violations();
    if (!errs.empty()) {
        std::ostringstream os;
        for (std::size_t i = 0; i < errs.size(); ++i)
            os << (i ? "; " : "") << errs[i];
        throw ConfigError(os.str());
    }
}

namespace {

Tensor ones(std::size_t n)
{
    return Tensor::filled({n}, 1.0);
}

} // namespace

DenoiserModel DenoiserModel::init(const ModelConfig& config, Rng& rng)
{
    config.validate();
    const std::size_t w = config.width;
    const double sw = 1.0 / std::sqrt(static_cast<double>(w));
    DenoiserModel m;
    m.config = config;
    m.embedding = Tensor::randn({config.vocab_size, w}, rng, 1.0);
    m.positions = Tensor::randn({config.max_seq_len, w}, rng, 1.0);
    m.time_w = Tensor::randn({w, w}, rng, sw);
    m.time_b = Tensor::zeros({w});
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        DenoiserBlock b;
        b.ln1_gain = ones(w);
        b.ln1_bias = Tensor::zeros({w});
        b.wq = Tensor::randn({w, w}, rng, sw);
        b.wk = Tensor::randn({w, w}, rng, sw);
        b.wv = Tensor::randn({w, w}, rng, sw);
        b.wo = Tensor::randn({w, w}, rng, 0.5 * sw);
        b.ln2_gain = ones(w);
        b.ln2_bias = Tensor::zeros({w});
        b.uses_moe = config.layer_uses_moe(l);
        if (b.uses_moe)
            b.moe = MoELayer::init(w, config.hidden, config.num_experts, config.top_k, config.aux_loss_coeff, rng);
        else
            b.ffn = FeedForward::init(w, config.hidden, rng);
        m.blocks.push_back(std::move(b));
    }
    m.final_gain = ones(w);
    m.final_bias = Tensor::zeros({w});
    m.out_w = Tensor::randn({w, w}, rng, sw);
    m.out_b = Tensor::zeros({w});
    if (!config.tied_head)
        m.head = Tensor::randn({w, config.vocab_size}, rng, sw);
    m.enforce_frozen();
    return m;
}

std::vector<NamedConstTensor> DenoiserModel::named_parameters() const
{
    std::vector<NamedConstTensor> p{{"embedding", &embedding},
                                    {"positions", &positions},
                                    {"time.w", &time_w},
                                    {"time.b", &time_b}};
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const DenoiserBlock& b = blocks[l];
        const std::string pre = "block" + std::to_string(l) + ".";
        p.push_back({pre + "ln1.gain", &b.ln1_gain});
        p.push_back({pre + "ln1.bias", &b.ln1_bias});
        p.push_back({pre + "attn.wq", &b.wq});
        p.push_back({pre + "attn.wk", &b.wk});
        p.push_back({pre + "attn.wv", &b.wv});
        p.push_back({pre + "attn.wo", &b.wo});
        p.push_back({pre + "ln2.gain", &b.ln2_gain});
        p.push_back({pre + "ln2.bias", &b.ln2_bias});
        if (b.uses_moe) {
            p.push_back({pre + "moe.gate", &b.moe.gate_weights});
            for (std::size_t e = 0; e < b.moe.experts.size(); ++e) {
                const std::string ep = pre + "moe.expert" + std::to_string(e) + ".";
                p.push_back({ep + "w1", &b.moe.experts[e].w1});
                p.push_back({ep + "b1", &b.moe.experts[e].b1});
                p.push_back({ep + "w2", &b.moe.experts[e].w2});
                p.push_back({ep + "b2", &b.moe.experts[e].b2});
            }
        } else {
            p.push_back({pre + "ffn.w1", &b.ffn.w1});
            p.push_back({pre + "ffn.b1", &b.ffn.b1});
            p.push_back({pre + "ffn.w2", &b.ffn.w2});
            p.push_back({pre + "ffn.b2", &b.ffn.b2});
        }
    }
    p.push_back({"final.gain", &final_gain});
    p.push_back({"final.bias", &final_bias});
    p.push_back({"out.w", &out_w});
    p.push_back({"out.b", &out_b});
    if (!config.tied_head)
        p.push_back({"head", &head});
    return p;
}

std::vector<NamedTensor> DenoiserModel::named_parameters()
{
    std::vector<NamedTensor> out;
    for (const NamedConstTensor& p : std::as_const(*this).named_parameters())
        out.push_back({p.name, const_cast<Tensor*>(p.tensor)});
    return out;
}

std::size_t DenoiserModel::parameter_count() const
{
    std::size_t n = 0;
    for (const NamedConstTensor& p : named_parameters())
        n += p.tensor->size();
    return n;
}

void DenoiserModel::zero_grad()
{
    for (NamedTensor& p : named_parameters())
        p.tensor->clear_grad();
}

void DenoiserModel::enforce_frozen()
{
    std::fill(embedding.row(kPadId).begin(), embedding.row(kPadId).end(), 0.0);
    if (embedding.has_grad()) {
        const std::size_t w = config.width;
        std::fill_n(embedding.grad().begin() + static_cast<std::ptrdiff_t>(kPadId * w), w, 0.0);
    }
}

bool DenoiserModel::all_finite() const
{
    for (const NamedConstTensor& p : named_parameters())
        if (!p.tensor->all_finite())
            return false;
    return true;
}

std::size_t parameter_count(const ModelConfig& c)
{
    const std::size_t w = c.width, V = c.vocab_size, h = c.hidden, E = c.num_experts;
    std::size_t n = V * w + c.max_seq_len * w + (w * w + w) + 2 * w + (w * w + w);
    if (!c.tied_head)
        n += w * V;
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        n += 4 * w + 4 * w * w;
        const std::size_t ffn = 2 * w * h + h + w;
        n += c.layer_uses_moe(l) ? w * E + E * ffn : ffn;
    }
    return n;
}

std::vector<std::size_t> checked_ids(std::span<const std::size_t> ids, const ModelConfig& config)
{
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] >= config.vocab_size)
            throw VocabularyError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                                  " outside vocabulary of " + std::to_string(config.vocab_size));
    return {ids.begin(), ids.end()};
}

Var embed(std::span<const std::size_t> ids, const DenoiserModel& model, ParamBinder& bind)
{
    return gather_rows(bind(model.embedding), checked_ids(ids, model.config));
}

Tensor time_features(std::size_t t, std::size_t T, std::size_t width)
{
    Tensor f({width});
    const double pos = 1000.0 * static_cast<double>(t) / static_cast<double>(T);
    const std::size_t half = width / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        f[i] = std::sin(pos * freq);
        f[half + i] = std::cos(pos * freq);
    }
    return f;
}

std::vector<AttentionMask> layer_masks(const ModelConfig& config, std::size_t seq_len)
{
    std::vector<AttentionMask> masks;
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        if (!config.sparse_attention) {
            masks.push_back(AttentionMask::dense(seq_len));
            continue;
        }
        SparseAttentionConfig a = config.attention_for_layer(l);
        std::erase_if(a.global_positions, [&](std::size_t g) { return g >= seq_len; });
        masks.push_back(build_window_mask(seq_len, a));
    }
    return masks;
}

namespace {

Var affine_norm(Var x, const Tensor& gain, const Tensor& bias, ParamBinder& bind)
{
    return add(mul(layernorm_lastdim(x), bind(gain)), bind(bias));
}

} // namespace

DenoiserOutput f_theta(Var z_t, std::size_t t, const DenoiserModel& model, ParamBinder& bind)
{
    const ModelConfig& c = model.config;
    const Tensor& zv = z_t.value();
    if (zv.rank() != 2 || zv.dim(1) != c.width)
        throw DimensionError("f_theta: latents " + shape_str(zv.shape()) + " for width " + std::to_string(c.width));
    const std::size_t seq = zv.dim(0);
    if (seq == 0 || seq > c.max_seq_len)
        throw ConfigError("sequence length " + std::to_string(seq) + " outside [1, max_seq_len=" +
                          std::to_string(c.max_seq_len) + "]");
    if (t > c.T)
        throw ConfigError("step " + std::to_string(t) + " > T=" + std::to_string(c.T));
    Tape& tape = bind.tape();

    std::vector<std::size_t> pos_ids(seq);
    std::iota(pos_ids.begin(), pos_ids.end(), std::size_t{0});
    Var time = reshape(add(matmul(tape.constant(Tensor({1, c.width}, time_features(t, c.T, c.width).vec())),
                                  bind(model.time_w)),
                           bind(model.time_b)),
                       {c.width});
    Var h = add(add(z_t, gather_rows(bind(model.positions), pos_ids)), time);

    const std::vector<AttentionMask> masks = layer_masks(c, seq);
    DenoiserOutput out;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const DenoiserBlock& b = model.blocks[l];
        Var a = affine_norm(h, b.ln1_gain, b.ln1_bias, bind);
        Var att = masked_multihead_attention(matmul(a, bind(b.wq)), matmul(a, bind(b.wk)), matmul(a, bind(b.wv)),
                                             masks[l], c.num_heads);
        h = add(h, matmul(att, bind(b.wo)));
        Var f = affine_norm(h, b.ln2_gain, b.ln2_bias, bind);
        if (b.uses_moe) {
            MoEOutput m = moe_forward(f, b.moe, bind);
            h = add(h, m.out);
            out.aux_loss = out.aux_loss.valid() ? add(out.aux_loss, m.aux_loss) : m.aux_loss;
            out.routing.push_back(std::move(m.stats));
        } else {
            h = add(h, feed_forward(f, b.ffn, bind));
        }
    }
    if (!out.aux_loss.valid())
        out.aux_loss = tape.constant(Tensor::scalar(0.0));
    out.z0_hat = add(matmul(affine_norm(h, model.final_gain, model.final_bias, bind), bind(model.out_w)),
                     bind(model.out_b));
    return out;
}

Tensor f_theta_values(const Tensor& z_t, std::size_t t, const DenoiserModel& model)
{
    Tape tape;
    ParamBinder bind(tape, false);
    return f_theta(tape.watch(z_t), t, model, bind).z0_hat.value();
}

Var token_logits(Var z0_hat, const DenoiserModel& model, ParamBinder& bind)
{
    if (model.config.tied_head)
        return matmul(z0_hat, transpose(bind(model.embedding)));
    return matmul(z0_hat, bind(model.head));
}

Rounding round_to_tokens(const Tensor& z0_hat, const DenoiserModel& model)
{
    const ModelConfig& c = model.config;
    if (z0_hat.rank() != 2 || z0_hat.dim(1) != c.width)
        throw DimensionError("round_to_tokens: latents " + shape_str(z0_hat.shape()));
    const std::size_t seq = z0_hat.dim(0), V = c.vocab_size;
    Rounding r;
    r.logits = Tensor({seq, V});
    r.ids.resize(seq);
    for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t v = 0; v < V; ++v) {
            if (c.tied_head) {
                r.logits.at(i, v) = kernels::dot(z0_hat.row(i).data(), model.embedding.row(v).data(), c.width);
            } else {
                double s = 0.0;
                for (std::size_t k = 0; k < c.width; ++k)
                    s += z0_hat.at(i, k) * model.head.at(k, v);
                r.logits.at(i, v) = s;
            }
        }
        const auto row = r.logits.row(i);
        r.ids[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return r;
}

} // namespace mdsq

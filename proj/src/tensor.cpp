#include "mdsq/tensor.hpp"

#include "mdsq/error.hpp"
#include "mdsq/kernels.hpp"
#include "mdsq/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace mdsq {

std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i)
        os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data))
{
    if (shape_numel(shape_) != data_.size())
        throw DimensionError("shape " + shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                             " values, got " + std::to_string(data_.size()));
}

Tensor Tensor::filled(Shape shape, double value)
{
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev)
{
    Tensor t(std::move(shape));
    for (double& x : t.data_)
        x = stddev * rng.normal();
    return t;
}

double Tensor::item() const
{
    if (data_.size() != 1)
        throw RankError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
}

std::span<double> Tensor::grad()
{
    if (!grad_)
        throw Error("tensor has no gradient buffer");
    return *grad_;
}

std::span<const double> Tensor::grad() const
{
    if (!grad_)
        throw Error("tensor has no gradient buffer");
    return *grad_;
}

std::span<double> Tensor::ensure_grad()
{
    if (!grad_)
        grad_.emplace(data_.size(), 0.0);
    return *grad_;
}

void Tensor::zero_grad()
{
    if (grad_)
        std::fill(grad_->begin(), grad_->end(), 0.0);
}

bool Tensor::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

// ---- Var / Tape -------------------------------------------------------------

const Tensor& Var::value() const
{
    return tape_->value(*this);
}

const Tape::Node& Tape::node(Var v) const
{
    if (v.tape_ != this || v.id_ >= nodes_.size())
        throw Error("variable does not belong to this tape");
    return nodes_[v.id_];
}

Tape::Node& Tape::node(Var v)
{
    if (v.tape_ != this || v.id_ >= nodes_.size())
        throw Error("variable does not belong to this tape");
    return nodes_[v.id_];
}

Var Tape::push(Node n)
{
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor& param)
{
    Node n;
    n.ref = &param;
    n.param = &param;
    n.requires_grad = true;
    return push(std::move(n));
}

Var Tape::watch(const Tensor& value)
{
    Node n;
    n.ref = &value;
    return push(std::move(n));
}

Var Tape::constant(Tensor value)
{
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward)
{
    return record(std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Tape::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward)
{
    Node n;
    n.owned = std::move(value);
    for (const Var& p : parents)
        n.requires_grad = n.requires_grad || node(p).requires_grad;
    if (n.requires_grad)
        n.backward = std::move(backward);
    return push(std::move(n));
}

std::span<double> Tape::grad_buffer(Var v)
{
    Node& n = node(v);
    if (!n.requires_grad)
        return {};
    if (n.grad.empty())
        n.grad.assign(n.value().size(), 0.0);
    return n.grad;
}

std::span<const double> Tape::grad(Var v) const
{
    return node(v).grad;
}

void Tape::backward(Var loss)
{
    Node& root = node(loss);
    if (root.value().rank() != 0)
        throw RankError("backward() needs a scalar loss, got shape " + shape_str(root.value().shape()));
    if (backward_done_)
        throw Error("backward() already ran on this tape");
    backward_done_ = true;
    if (!root.requires_grad)
        return;
    root.grad.assign(1, 1.0);
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty() || !n.backward)
            continue;
        n.backward(*this, n.grad);
    }
    for (Node& n : nodes_) {
        if (n.param == nullptr)
            continue;
        std::span<double> g = n.param->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            g[i] += n.grad[i];
    }
}

void backward(Var loss)
{
    loss.tape().backward(loss);
}

// ---- ops ------------------------------------------------------------------

namespace {

// Number of leading repetitions when b broadcasts over a; throws otherwise.
std::size_t broadcast_reps(const Shape& a, const Shape& b, const char* op)
{
    if (a == b)
        return 1;
    if (b.size() < a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size())))
        return shape_numel(a) / std::max<std::size_t>(shape_numel(b), 1);
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op)
{
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
}

void accumulate(std::span<double> dst, std::span<const double> src)
{
    if (dst.empty())
        return;
    for (std::size_t i = 0; i < src.size(); ++i)
        dst[i] += src[i];
}

std::vector<double> transposed(std::span<const double> a, std::size_t rows, std::size_t cols)
{
    std::vector<double> t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            t[c * rows + r] = a[r * cols + c];
    return t;
}

} // namespace

Var matmul(Var a, Var b)
{
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    require_rank(av, 2, "matmul");
    require_rank(bv, 2, "matmul");
    const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    if (bv.dim(0) != k)
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(av.shape()) + " x " +
                             shape_str(bv.shape()));
    Tensor out({m, n});
    kernels::gemm_nn(m, n, k, av.data().data(), k, bv.data().data(), n, out.data().data(), n);
    return a.tape().record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tape, std::span<const double> g) {
        if (tape.requires_grad(a)) {
            // dA += dC * B^T
            std::vector<double> bt = transposed(b.value().data(), k, n);
            kernels::gemm_nn(m, k, n, g.data(), n, bt.data(), k, tape.grad_buffer(a).data(), k);
        }
        if (tape.requires_grad(b)) {
            // dB += A^T * dC
            std::vector<double> at = transposed(a.value().data(), m, k);
            kernels::gemm_nn(k, n, m, at.data(), m, g.data(), n, tape.grad_buffer(b).data(), n);
        }
    });
}

Var transpose(Var a)
{
    const Tensor& av = a.value();
    require_rank(av, 2, "transpose");
    const std::size_t r = av.dim(0), c = av.dim(1);
    Tensor out({c, r}, transposed(av.data(), r, c));
    return a.tape().record(std::move(out), {a}, [a, r, c](Tape& tape, std::span<const double> g) {
        accumulate(tape.grad_buffer(a), transposed(g, c, r));
    });
}

Var reshape(Var a, Shape shape)
{
    const Tensor& av = a.value();
    if (shape_numel(shape) != av.size())
        throw DimensionError("reshape: " + shape_str(av.shape()) + " to " + shape_str(shape));
    Tensor out(std::move(shape), av.vec());
    return a.tape().record(std::move(out), {a}, [a](Tape& tape, std::span<const double> g) {
        accumulate(tape.grad_buffer(a), g);
    });
}

namespace {

template <typename Fwd, typename Da, typename Db>
Var binary(Var a, Var b, const char* name, Fwd fwd, Da da, Db db)
{
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const std::size_t reps = broadcast_reps(av.shape(), bv.shape(), name);
    const std::size_t inner = bv.size();
    Tensor out(av.shape());
    for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t i = 0; i < inner; ++i)
            out[r * inner + i] = fwd(av[r * inner + i], bv[i]);
    return a.tape().record(std::move(out), {a, b}, [a, b, reps, inner, da, db](Tape& tape, std::span<const double> g) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        std::span<double> ga = tape.grad_buffer(a);
        std::span<double> gb = tape.grad_buffer(b);
        for (std::size_t r = 0; r < reps; ++r)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t k = r * inner + i;
                if (!ga.empty())
                    ga[k] += g[k] * da(av[k], bv[i]);
                if (!gb.empty())
                    gb[i] += g[k] * db(av[k], bv[i]);
            }
    });
}

} // namespace

Var add(Var a, Var b)
{
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(Var a, Var b)
{
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(Var a, Var b)
{
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Var sqdiff(Var a, Var b)
{
    return binary(
        a, b, "sqdiff", [](double x, double y) { return (x - y) * (x - y); },
        [](double x, double y) { return 2.0 * (x - y); }, [](double x, double y) { return -2.0 * (x - y); });
}

Var scale(Var a, double c)
{
    Tensor out(a.value().shape());
    const Tensor& av = a.value();
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = c * av[i];
    return a.tape().record(std::move(out), {a}, [a, c](Tape& tape, std::span<const double> g) {
        std::span<double> ga = tape.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] += c * g[i];
    });
}

Var relu(Var a)
{
    const Tensor& av = a.value();
    Tensor out(av.shape());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = av[i] > 0.0 ? av[i] : 0.0;
    return a.tape().record(std::move(out), {a}, [a](Tape& tape, std::span<const double> g) {
        const Tensor& av = a.value();
        std::span<double> ga = tape.grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (av[i] > 0.0)
                ga[i] += g[i];
    });
}

Var layernorm_lastdim(Var x, double eps)
{
    const Tensor& xv = x.value();
    if (xv.rank() == 0)
        throw DimensionError("layernorm_lastdim: scalar input");
    const std::size_t n = xv.shape().back();
    const std::size_t rows = n == 0 ? 0 : xv.size() / n;
    Tensor out(xv.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data().data() + r * n;
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            mu += in[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            var += (in[i] - mu) * (in[i] - mu);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t i = 0; i < n; ++i)
            out[r * n + i] = (in[i] - mu) * inv_std[r];
    }
    Tensor y = out;
    return x.tape().record(std::move(out), {x},
                           [x, n, rows, inv_std = std::move(inv_std), y = std::move(y)](Tape& tape,
                                                                                       std::span<const double> g) {
                               std::span<double> gx = tape.grad_buffer(x);
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const double* gy = g.data() + r * n;
                                   const double* yr = y.data().data() + r * n;
                                   double mg = 0.0, mgy = 0.0;
                                   for (std::size_t i = 0; i < n; ++i) {
                                       mg += gy[i];
                                       mgy += gy[i] * yr[i];
                                   }
                                   mg /= static_cast<double>(n);
                                   mgy /= static_cast<double>(n);
                                   for (std::size_t i = 0; i < n; ++i)
                                       gx[r * n + i] += inv_std[r] * (gy[i] - mg - yr[i] * mgy);
                               }
                           });
}

Var gather_rows(Var table, std::span<const std::size_t> ids)
{
    const Tensor& tv = table.value();
    require_rank(tv, 2, "gather_rows");
    const std::size_t n = tv.dim(1);
    Tensor out({ids.size(), n});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= tv.dim(0))
            throw DimensionError("gather_rows: row " + std::to_string(ids[r]) + " outside table of shape " +
                                 shape_str(tv.shape()));
        std::copy_n(tv.data().data() + ids[r] * n, n, out.data().data() + r * n);
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return table.tape().record(std::move(out), {table},
                               [table, n, idx = std::move(idx)](Tape& tape, std::span<const double> g) {
                                   std::span<double> gt = tape.grad_buffer(table);
                                   for (std::size_t r = 0; r < idx.size(); ++r)
                                       for (std::size_t i = 0; i < n; ++i)
                                           gt[idx[r] * n + i] += g[r * n + i];
                               });
}

Var scatter_rows(Var src, std::span<const std::size_t> ids, std::size_t n_rows)
{
    const Tensor& sv = src.value();
    require_rank(sv, 2, "scatter_rows");
    if (sv.dim(0) != ids.size())
        throw DimensionError("scatter_rows: " + std::to_string(ids.size()) + " ids for source of shape " +
                             shape_str(sv.shape()));
    const std::size_t n = sv.dim(1);
    Tensor out({n_rows, n});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= n_rows)
            throw DimensionError("scatter_rows: target row " + std::to_string(ids[r]) + " >= " +
                                 std::to_string(n_rows));
        for (std::size_t i = 0; i < n; ++i)
            out[ids[r] * n + i] += sv[r * n + i];
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return src.tape().record(std::move(out), {src}, [src, n, idx = std::move(idx)](Tape& tape, std::span<const double> g) {
        std::span<double> gs = tape.grad_buffer(src);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t i = 0; i < n; ++i)
                gs[r * n + i] += g[idx[r] * n + i];
    });
}

Var sum(Var a)
{
    const Tensor& av = a.value();
    double s = 0.0;
    for (double x : av.data())
        s += x;
    return a.tape().record(Tensor::scalar(s), {a}, [a](Tape& tape, std::span<const double> g) {
        for (double& x : tape.grad_buffer(a))
            x += g[0];
    });
}

Var mean(Var a)
{
    const double n = static_cast<double>(a.value().size());
    if (n == 0)
        throw DimensionError("mean of empty tensor");
    return scale(sum(a), 1.0 / n);
}

Var mean_rows(Var a)
{
    const Tensor& av = a.value();
    require_rank(av, 2, "mean_rows");
    const std::size_t m = av.dim(0), n = av.dim(1);
    if (m == 0)
        throw DimensionError("mean_rows of empty tensor");
    Tensor out({n});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < n; ++i)
            out[i] += av[r * n + i];
    for (std::size_t i = 0; i < n; ++i)
        out[i] /= static_cast<double>(m);
    return a.tape().record(std::move(out), {a}, [a, m, n](Tape& tape, std::span<const double> g) {
        std::span<double> ga = tape.grad_buffer(a);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t i = 0; i < n; ++i)
                ga[r * n + i] += g[i] / static_cast<double>(m);
    });
}

Tensor softmax_values(std::span<const double> logits)
{
    Tensor out({logits.size()});
    if (logits.empty())
        return out;
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        z += out[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i)
        out[i] /= z;
    return out;
}

Var softmax_lastdim(Var x, std::span<const std::uint8_t> mask)
{
    constexpr double kMaskBias = -1e30;
    const Tensor& xv = x.value();
    if (xv.rank() == 0)
        throw DimensionError("softmax_lastdim: scalar input");
    if (!mask.empty() && mask.size() != xv.size())
        throw DimensionError("softmax_lastdim: mask has " + std::to_string(mask.size()) +
                             " entries for input of shape " + shape_str(xv.shape()));
    const std::size_t n = xv.shape().back();
    const std::size_t rows = n == 0 ? 0 : xv.size() / n;
    Tensor out(xv.shape());
    std::vector<double> biased(n);
    for (std::size_t r = 0; r < rows; ++r) {
        bool any = mask.empty();
        for (std::size_t i = 0; i < n; ++i) {
            const bool ok = mask.empty() || mask[r * n + i] != 0;
            any = any || ok;
            biased[i] = xv[r * n + i] + (ok ? 0.0 : kMaskBias);
        }
        if (!any)
            throw DegenerateRowError("softmax row " + std::to_string(r) + " has every entry masked");
        const double mx = *std::max_element(biased.begin(), biased.end());
        double z = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const bool ok = mask.empty() || mask[r * n + i] != 0;
            const double e = ok ? std::exp(biased[i] - mx) : 0.0;
            out[r * n + i] = e;
            z += e;
        }
        for (std::size_t i = 0; i < n; ++i)
            out[r * n + i] /= z;
    }
    Tensor y = out;
    return x.tape().record(std::move(out), {x}, [x, n, rows, y = std::move(y)](Tape& tape, std::span<const double> g) {
        std::span<double> gx = tape.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r) {
            double dotp = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                dotp += y[r * n + i] * g[r * n + i];
            for (std::size_t i = 0; i < n; ++i)
                gx[r * n + i] += y[r * n + i] * (g[r * n + i] - dotp);
        }
    });
}

Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets)
{
    const Tensor& lv = logits.value();
    require_rank(lv, 2, "cross_entropy_rows");
    const std::size_t m = lv.dim(0), v = lv.dim(1);
    if (targets.size() != m)
        throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(lv.shape()));
    if (m == 0)
        throw DimensionError("cross_entropy_rows: no rows");
    Tensor probs({m, v});
    double loss = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        if (targets[r] >= v)
            throw DimensionError("cross_entropy_rows: target " + std::to_string(targets[r]) + " >= " +
                                 std::to_string(v));
        const double* row = lv.data().data() + r * v;
        const double mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (std::size_t i = 0; i < v; ++i) {
            probs[r * v + i] = std::exp(row[i] - mx);
            z += probs[r * v + i];
        }
        for (std::size_t i = 0; i < v; ++i)
            probs[r * v + i] /= z;
        loss += -(row[targets[r]] - mx - std::log(z));
    }
    loss /= static_cast<double>(m);
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    return logits.tape().record(
        Tensor::scalar(loss), {logits},
        [logits, m, v, probs = std::move(probs), tgt = std::move(tgt)](Tape& tape, std::span<const double> g) {
            std::span<double> gl = tape.grad_buffer(logits);
            const double s = g[0] / static_cast<double>(m);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t i = 0; i < v; ++i)
                    gl[r * v + i] += s * (probs[r * v + i] - (i == tgt[r] ? 1.0 : 0.0));
        });
}

Var slice_cols(Var a, std::size_t start, std::size_t count)
{
    const Tensor& av = a.value();
    require_rank(av, 2, "slice_cols");
    const std::size_t m = av.dim(0), n = av.dim(1);
    if (start + count > n)
        throw DimensionError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + count) +
                             ") outside shape " + shape_str(av.shape()));
    Tensor out({m, count});
    for (std::size_t r = 0; r < m; ++r)
        std::copy_n(av.data().data() + r * n + start, count, out.data().data() + r * count);
    return a.tape().record(std::move(out), {a}, [a, m, n, start, count](Tape& tape, std::span<const double> g) {
        std::span<double> ga = tape.grad_buffer(a);
        for (std::size_t r = 0; r < m; ++r)
            for (std::size_t i = 0; i < count; ++i)
                ga[r * n + start + i] += g[r * count + i];
    });
}

Var concat_cols(const std::vector<Var>& parts)
{
    if (parts.empty())
        throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts.front().value().dim(0);
    std::size_t total = 0;
    std::vector<std::size_t> offsets;
    for (const Var& p : parts) {
        require_rank(p.value(), 2, "concat_cols");
        if (p.value().dim(0) != m)
            throw DimensionError("concat_cols: row counts differ, " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        offsets.push_back(total);
        total += p.value().dim(1);
    }
    Tensor out({m, total});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        const std::size_t w = pv.dim(1);
        for (std::size_t r = 0; r < m; ++r)
            std::copy_n(pv.data().data() + r * w, w, out.data().data() + r * total + offsets[k]);
    }
    return parts.front().tape().record(std::move(out), parts,
                                       [parts, offsets, m, total](Tape& tape, std::span<const double> g) {
                                           for (std::size_t k = 0; k < parts.size(); ++k) {
                                               std::span<double> gp = tape.grad_buffer(parts[k]);
                                               if (gp.empty())
                                                   continue;
                                               const std::size_t w = parts[k].value().dim(1);
                                               for (std::size_t r = 0; r < m; ++r)
                                                   for (std::size_t i = 0; i < w; ++i)
                                                       gp[r * w + i] += g[r * total + offsets[k] + i];
                                           }
                                       });
}

Var gather_elements(Var a, std::span<const std::size_t> rows, std::span<const std::size_t> cols)
{
    const Tensor& av = a.value();
    require_rank(av, 2, "gather_elements");
    if (rows.size() != cols.size())
        throw DimensionError("gather_elements: index lists differ in length");
    const std::size_t n = av.dim(1);
    Tensor out({rows.size()});
    std::vector<std::size_t> flat(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= av.dim(0) || cols[i] >= n)
            throw DimensionError("gather_elements: index outside shape " + shape_str(av.shape()));
        flat[i] = rows[i] * n + cols[i];
        out[i] = av[flat[i]];
    }
    return a.tape().record(std::move(out), {a}, [a, flat = std::move(flat)](Tape& tape, std::span<const double> g) {
        std::span<double> ga = tape.grad_buffer(a);
        for (std::size_t i = 0; i < flat.size(); ++i)
            ga[flat[i]] += g[i];
    });
}

Var mul_rows(Var a, Var w)
{
    const Tensor& av = a.value();
    const Tensor& wv = w.value();
    require_rank(av, 2, "mul_rows");
    require_rank(wv, 1, "mul_rows");
    const std::size_t m = av.dim(0), n = av.dim(1);
    if (wv.dim(0) != m)
        throw DimensionError("mul_rows: weights " + shape_str(wv.shape()) + " for rows of " + shape_str(av.shape()));
    Tensor out({m, n});
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < n; ++i)
            out[r * n + i] = av[r * n + i] * wv[r];
    return a.tape().record(std::move(out), {a, w}, [a, w, m, n](Tape& tape, std::span<const double> g) {
        const Tensor& av = a.value();
        const Tensor& wv = w.value();
        std::span<double> ga = tape.grad_buffer(a);
        std::span<double> gw = tape.grad_buffer(w);
        for (std::size_t r = 0; r < m; ++r) {
            if (!ga.empty())
                kernels::axpy(wv[r], g.data() + r * n, ga.data() + r * n, n);
            if (!gw.empty())
                gw[r] += kernels::dot(g.data() + r * n, av.data().data() + r * n, n);
        }
    });
}

} // namespace mdsq

namespace mdsq {

Var ParamBinder::operator()(const Tensor& param)
{
    auto it = bound_.find(&param);
    if (it != bound_.end())
        return it->second;
    Var v = trainable_ ? tape_->leaf(const_cast<Tensor&>(param)) : tape_->watch(param);
    bound_.emplace(&param, v);
    return v;
}

} // namespace mdsq

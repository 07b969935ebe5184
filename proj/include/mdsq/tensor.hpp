#pragma once
// Dense row-major float64 tensors with an explicit, scoped reverse-mode tape.
//
// A Tensor is a plain value. Differentiation happens through a Tape: parameters
// are registered with Tape::leaf (non-owning, gradients land in Tensor::grad on
// backward), intermediate values are owned by the tape, and every op records a
// backward closure. Tapes are built, differentiated once, and dropped.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mdsq {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
public:
    Tensor() : shape_{0} {}
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor filled(Shape shape, double value);
    static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& vec() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // rank-2 accessors
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    std::span<double> row(std::size_t r) { return {data_.data() + r * shape_.back(), shape_.back()}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * shape_.back(), shape_.back()}; }

    double item() const;

    bool has_grad() const noexcept { return grad_.has_value(); }
    std::span<double> grad();
    std::span<const double> grad() const;
    // Allocates a zero gradient buffer when absent.
    std::span<double> ensure_grad();
    void zero_grad();
    void clear_grad() { grad_.reset(); }

    bool all_finite() const;

private:
    Shape shape_;
    std::vector<double> data_;
    std::optional<std::vector<double>> grad_;
};

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    // grad_out is the gradient flowing into the node that owns this closure.
    using BackwardFn = std::function<void(Tape&, std::span<const double> grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Trainable parameter, referenced in place. backward() adds into param.grad.
    Var leaf(Tensor& param);
    // Read-only reference to an external tensor; no gradient.
    Var watch(const Tensor& value);
    // Owned constant; no gradient.
    Var constant(Tensor value);

    Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
    Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

    const Tensor& value(Var v) const { return node(v).value(); }
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    // Gradient accumulator for v, zero-initialized on first access. Used by
    // backward closures; writes to nodes that do not require grad are dropped.
    std::span<double> grad_buffer(Var v);
    // Gradient accumulated so far (empty span when v received none).
    std::span<const double> grad(Var v) const;

    // Reverse sweep from a scalar loss. Visits each reachable node once, then
    // fills Tensor::grad of every leaf (zeros for leaves the loss never used).
    void backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* ref = nullptr;
        Tensor* param = nullptr;
        bool requires_grad = false;
        BackwardFn backward;
        std::vector<double> grad;

        const Tensor& value() const { return ref != nullptr ? *ref : owned; }
    };

    const Node& node(Var v) const;
    Node& node(Var v);
    Var push(Node n);

    std::deque<Node> nodes_;
    bool backward_done_ = false;
};

// Free-function spelling of Tape::backward.
void backward(Var loss);

// ---- ops ----------------------------------------------------------------
// Binary elementwise ops accept b with a's exact shape, or b's shape equal to a
// trailing suffix of a's shape (expanded over the leading dimensions).

Var matmul(Var a, Var b);
Var transpose(Var a);
// Same data, new shape with identical element count.
Var reshape(Var a, Shape shape);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var relu(Var a);
Var layernorm_lastdim(Var x, double eps = 1e-5);
Var gather_rows(Var table, std::span<const std::size_t> ids);
// out[ids[r]] += src[r]; out has n_rows rows.
Var scatter_rows(Var src, std::span<const std::size_t> ids, std::size_t n_rows);
Var sum(Var a);
Var mean(Var a);
// [m, n] -> [n], averaging over rows.
Var mean_rows(Var a);
// elementwise (a - b)^2
Var sqdiff(Var a, Var b);
// mask (optional) has a.size() entries; nonzero means "allowed".
Var softmax_lastdim(Var x, std::span<const std::uint8_t> mask = {});
// mean over rows of -log softmax(logits[r])[targets[r]]
Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
// out[i] = a[rows[i], cols[i]]
Var gather_elements(Var a, std::span<const std::size_t> rows, std::span<const std::size_t> cols);
// row r of a scaled by w[r]
Var mul_rows(Var a, Var w);

// Non-differentiable helpers on plain tensors.
Tensor softmax_values(std::span<const double> logits);

} // namespace mdsq

#include <unordered_map>

namespace mdsq {

// Maps model parameters onto one tape: trainable binders register leaves, and
// backward() then writes into the bound tensors' grad buffers even though the
// model is passed by const reference; inference binders register read-only
// views. Each parameter is bound at most once per tape.
class ParamBinder {
public:
    ParamBinder(Tape& tape, bool trainable) : tape_(&tape), trainable_(trainable) {}

    Var operator()(const Tensor& param);
    Tape& tape() const noexcept { return *tape_; }
    bool trainable() const noexcept { return trainable_; }

private:
    Tape* tape_;
    bool trainable_;
    std::unordered_map<const Tensor*, Var> bound_;
};

} // namespace mdsq

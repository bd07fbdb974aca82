#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Graph is built define-by-run: every op appends a node holding its cached
// output, and backward() sweeps the nodes once in reverse insertion order.
// Everything is 64-bit. Any op producing NaN/Inf throws NonFiniteError.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssip::tape {

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Dense rank-2 tensor. Vectors are 1 x n rows.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
    Tensor(std::size_t rows, std::size_t cols, std::vector<double> values);

    static Tensor row(std::initializer_list<double> values);
    static Tensor row(std::span<const double> values);
    static Tensor scalar(double value) { return Tensor(1, 1, value); }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return values_.size(); }
    std::vector<std::size_t> shape() const { return {rows_, cols_}; }
    bool empty() const { return values_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    /// Value of a 1 x 1 tensor.
    double item() const;

    std::span<double> values() { return values_; }
    std::span<const double> values() const { return values_; }
    std::span<const double> row_span(std::size_t r) const {
        return std::span<const double>(values_).subspan(r * cols_, cols_);
    }

    bool all_finite() const;
    bool operator==(const Tensor&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

struct NodeId {
    std::uint32_t index = 0;
    bool operator==(const NodeId&) const = default;
};

enum class OpKind : std::uint8_t {
    leaf,
    affine,         // x[B,in] * W[out,in]^T + b[1,out]
    add,            // same shape, or rhs 1 x n broadcast over rows
    sub,            // same shape, or rhs 1 x n broadcast over rows
    mul,            // elementwise, same shape
    scale,          // constant scalar factor
    add_const,      // + constant tensor (same shape, or 1 x n broadcast)
    tanh,
    sigmoid,
    exp,
    sum,            // all elements -> 1 x 1
    row_sum,        // [B,n] -> [B,1]
    squared_norm,   // all elements -> 1 x 1
    logsumexp,      // all elements -> 1 x 1, max-shifted
    concat,         // along columns, equal row counts
    slice_cols,     // contiguous column range
    broadcast_rows, // [1,n] -> [B,n]
};

const char* op_name(OpKind kind);

/// Extra non-tensor arguments some ops take.
struct OpArgs {
    double factor = 1.0;          // scale
    std::size_t begin = 0;        // slice_cols
    std::size_t count = 0;        // slice_cols, broadcast_rows
    Tensor constant;              // add_const
};

class Gradients {
public:
    explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}
    /// Gradient for a node; zeros of the node's shape when nothing flowed into it.
    const Tensor& operator[](NodeId id) const { return grads_.at(id.index); }
    std::size_t size() const { return grads_.size(); }

private:
    std::vector<Tensor> grads_;
};

class Graph {
public:
    Graph() = default;

    NodeId leaf(Tensor value);
    NodeId record(OpKind kind, std::span<const NodeId> inputs, const OpArgs& args = {});

    NodeId affine(NodeId x, NodeId weight, NodeId bias);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double factor);
    NodeId add_const(NodeId a, Tensor constant);
    NodeId tanh(NodeId a);
    NodeId sigmoid(NodeId a);
    NodeId exp(NodeId a);
    NodeId sum(NodeId a);
    NodeId row_sum(NodeId a);
    NodeId squared_norm(NodeId a);
    NodeId logsumexp(NodeId a);
    NodeId concat(NodeId a, NodeId b);
    NodeId slice_cols(NodeId a, std::size_t begin, std::size_t count);
    NodeId broadcast_rows(NodeId a, std::size_t rows);

    const Tensor& value(NodeId id) const { return nodes_.at(id.index).value; }
    OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient of a scalar root w.r.t. every node (seed 1 at the root).
    Gradients backward(NodeId root) const;

private:
    struct Node {
        OpKind kind = OpKind::leaf;
        std::uint8_t arity = 0;
        std::uint32_t inputs[3] = {0, 0, 0};
        Tensor value;
        OpArgs args;
    };

    const Node& node(NodeId id) const;
    Tensor forward(OpKind kind, std::span<const NodeId> inputs, const OpArgs& args) const;
    void propagate(std::uint32_t index, const Tensor& upstream, std::vector<Tensor>& grads) const;

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Multilayer perceptrons.

enum class Activation : std::uint8_t { linear = 0, tanh = 1 };

struct Layer {
    Tensor weight;  // out x in
    Tensor bias;    // 1 x out
    Activation activation = Activation::linear;

    bool operator==(const Layer&) const = default;
};

/// Layer list; hidden layers use tanh, the final layer is linear.
struct MlpParams {
    std::vector<Layer> layers;

    std::size_t input_dim() const;
    std::size_t output_dim() const;
    std::size_t parameter_count() const;
    /// Throws ShapeError when adjacent dims disagree or the last layer is not linear.
    void validate() const;

    std::vector<double> flatten() const;
    void assign(std::span<const double> flat);

    bool operator==(const MlpParams&) const = default;
};

/// Builds an MLP with tanh hidden layers: dims = {in, h1, ..., out}.
/// Weights ~ U(-s, s) with s = init_scale * sqrt(6 / (fan_in + fan_out)); biases zero.
MlpParams make_mlp(std::span<const std::size_t> dims, double init_scale, std::mt19937_64& rng);

struct MlpRecord {
    NodeId output;
    std::vector<NodeId> params;  // weight, bias per layer, in layer order
};

MlpRecord mlp_forward(Graph& graph, const MlpParams& params, NodeId input);

/// Forward pass without gradient bookkeeping; same arithmetic as mlp_forward.
Tensor mlp_eval(const MlpParams& params, const Tensor& input);

}  // namespace ssip::tape

#include "ssip/tape.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace ssip::tape {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap view(const Tensor& t) {
    return ConstMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                    static_cast<Eigen::Index>(t.cols()));
}

MutMap view(Tensor& t) {
    return MutMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

std::string dims(const Tensor& t) {
    return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

[[noreturn]] void shape_fail(OpKind kind, const std::string& detail) {
    throw ShapeError(std::string("tape: ") + op_name(kind) + ": " + detail);
}

Tensor affine_forward(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor out(x.rows(), w.rows());
    auto o = view(out);
    o.noalias() = view(x) * view(w).transpose();
    o.rowwise() += view(b).row(0);
    return out;
}

Tensor tanh_forward(const Tensor& x) {
    Tensor out = x;
    for (double& v : out.values()) v = std::tanh(v);
    return out;
}

double logistic(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

bool row_broadcast(const Tensor& a, const Tensor& b) {
    return b.rows() == 1 && b.cols() == a.cols() && a.rows() != 1;
}

void accumulate(Tensor& slot, const Tensor& delta) {
    if (slot.empty()) {
        slot = delta;
        return;
    }
    auto s = slot.values();
    auto d = delta.values();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += d[i];
}

// Sums a [B,n] gradient down to the [1,n] operand it was broadcast from.
Tensor reduce_rows(const Tensor& g) {
    Tensor out(1, g.cols());
    view(out) = view(g).colwise().sum();
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
        throw ShapeError("tensor: " + std::to_string(values_.size()) + " values for shape " +
                         std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Tensor Tensor::row(std::initializer_list<double> values) {
    return Tensor(1, values.size(), std::vector<double>(values));
}

Tensor Tensor::row(std::span<const double> values) {
    return Tensor(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

double Tensor::item() const {
    if (values_.size() != 1) throw ShapeError("tensor: item() on " + dims(*this));
    return values_[0];
}

bool Tensor::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::leaf: return "leaf";
        case OpKind::affine: return "affine";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::add_const: return "add_const";
        case OpKind::tanh: return "tanh";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::exp: return "exp";
        case OpKind::sum: return "sum";
        case OpKind::row_sum: return "row_sum";
        case OpKind::squared_norm: return "squared_norm";
        case OpKind::logsumexp: return "logsumexp";
        case OpKind::concat: return "concat";
        case OpKind::slice_cols: return "slice_cols";
        case OpKind::broadcast_rows: return "broadcast_rows";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Graph

const Graph::Node& Graph::node(NodeId id) const {
    if (id.index >= nodes_.size()) {
        throw std::out_of_range("tape: node " + std::to_string(id.index) + " not in graph");
    }
    return nodes_[id.index];
}

NodeId Graph::leaf(Tensor value) {
    if (!value.all_finite()) throw NonFiniteError("tape: non-finite leaf");
    Node n;
    n.kind = OpKind::leaf;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::record(OpKind kind, std::span<const NodeId> inputs, const OpArgs& args) {
    if (kind == OpKind::leaf) throw std::invalid_argument("tape: record(leaf); use leaf()");
    if (inputs.size() > 3) throw std::invalid_argument("tape: too many inputs");
    for (NodeId id : inputs) node(id);

    Tensor out = forward(kind, inputs, args);
    if (!out.all_finite()) {
        throw NonFiniteError(std::string("tape: non-finite output from ") + op_name(kind));
    }
    Node n;
    n.kind = kind;
    n.arity = static_cast<std::uint8_t>(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) n.inputs[i] = inputs[i].index;
    n.value = std::move(out);
    n.args = args;
    nodes_.push_back(std::move(n));
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Graph::forward(OpKind kind, std::span<const NodeId> in, const OpArgs& args) const {
    auto need = [&](std::size_t n) {
        if (in.size() != n) {
            shape_fail(kind, "expected " + std::to_string(n) + " inputs, got " +
                                 std::to_string(in.size()));
        }
    };
    auto val = [&](std::size_t i) -> const Tensor& { return nodes_[in[i].index].value; };

    switch (kind) {
        case OpKind::affine: {
            need(3);
            const Tensor& x = val(0);
            const Tensor& w = val(1);
            const Tensor& b = val(2);
            if (x.cols() != w.cols()) shape_fail(kind, "input " + dims(x) + " vs weight " + dims(w));
            if (b.rows() != 1 || b.cols() != w.rows()) {
                shape_fail(kind, "bias " + dims(b) + " vs weight " + dims(w));
            }
            return affine_forward(x, w, b);
        }
        case OpKind::add:
        case OpKind::sub: {
            need(2);
            const Tensor& a = val(0);
            const Tensor& b = val(1);
            Tensor out = a;
            auto o = view(out);
            if (a.rows() == b.rows() && a.cols() == b.cols()) {
                if (kind == OpKind::add) o += view(b);
                else o -= view(b);
            } else if (row_broadcast(a, b)) {
                if (kind == OpKind::add) o.rowwise() += view(b).row(0);
                else o.rowwise() -= view(b).row(0);
            } else {
                shape_fail(kind, dims(a) + " vs " + dims(b));
            }
            return out;
        }
        case OpKind::mul: {
            need(2);
            const Tensor& a = val(0);
            const Tensor& b = val(1);
            if (a.rows() != b.rows() || a.cols() != b.cols()) shape_fail(kind, dims(a) + " vs " + dims(b));
            Tensor out = a;
            view(out).array() *= view(b).array();
            return out;
        }
        case OpKind::scale: {
            need(1);
            Tensor out = val(0);
            for (double& v : out.values()) v *= args.factor;
            return out;
        }
        case OpKind::add_const: {
            need(1);
            const Tensor& a = val(0);
            const Tensor& c = args.constant;
            Tensor out = a;
            if (a.rows() == c.rows() && a.cols() == c.cols()) {
                view(out) += view(c);
            } else if (row_broadcast(a, c)) {
                view(out).rowwise() += view(c).row(0);
            } else {
                shape_fail(kind, dims(a) + " vs constant " + dims(c));
            }
            return out;
        }
        case OpKind::tanh:
            need(1);
            return tanh_forward(val(0));
        case OpKind::sigmoid: {
            need(1);
            Tensor out = val(0);
            for (double& v : out.values()) v = logistic(v);
            return out;
        }
        case OpKind::exp: {
            need(1);
            Tensor out = val(0);
            for (double& v : out.values()) v = std::exp(v);
            return out;
        }
        case OpKind::sum: {
            need(1);
            double s = 0.0;
            for (double v : val(0).values()) s += v;
            return Tensor::scalar(s);
        }
        case OpKind::row_sum: {
            need(1);
            const Tensor& a = val(0);
            Tensor out(a.rows(), 1);
            for (std::size_t r = 0; r < a.rows(); ++r) {
                double s = 0.0;
                for (double v : a.row_span(r)) s += v;
                out[r] = s;
            }
            return out;
        }
        case OpKind::squared_norm: {
            need(1);
            double s = 0.0;
            for (double v : val(0).values()) s += v * v;
            return Tensor::scalar(s);
        }
        case OpKind::logsumexp: {
            need(1);
            const Tensor& a = val(0);
            if (a.empty()) shape_fail(kind, "empty input");
            const double m = *std::max_element(a.values().begin(), a.values().end());
            double s = 0.0;
            for (double v : a.values()) s += std::exp(v - m);
            return Tensor::scalar(m + std::log(s));
        }
        case OpKind::concat: {
            need(2);
            const Tensor& a = val(0);
            const Tensor& b = val(1);
            if (a.rows() != b.rows()) shape_fail(kind, dims(a) + " vs " + dims(b));
            Tensor out(a.rows(), a.cols() + b.cols());
            auto o = view(out);
            o.leftCols(static_cast<Eigen::Index>(a.cols())) = view(a);
            o.rightCols(static_cast<Eigen::Index>(b.cols())) = view(b);
            return out;
        }
        case OpKind::slice_cols: {
            need(1);
            const Tensor& a = val(0);
            if (args.count == 0 || args.begin + args.count > a.cols()) {
                shape_fail(kind, "columns [" + std::to_string(args.begin) + ", " +
                                     std::to_string(args.begin + args.count) + ") of " + dims(a));
            }
            Tensor out(a.rows(), args.count);
            view(out) = view(a).middleCols(static_cast<Eigen::Index>(args.begin),
                                           static_cast<Eigen::Index>(args.count));
            return out;
        }
        case OpKind::broadcast_rows: {
            need(1);
            const Tensor& a = val(0);
            if (a.rows() != 1 || args.count == 0) shape_fail(kind, "needs a 1xn input and count > 0");
            Tensor out(args.count, a.cols());
            view(out).rowwise() = view(a).row(0);
            return out;
        }
        case OpKind::leaf:
            break;
    }
    throw std::invalid_argument("tape: unknown op kind " + std::to_string(static_cast<int>(kind)));
}

NodeId Graph::affine(NodeId x, NodeId weight, NodeId bias) {
    const NodeId in[] = {x, weight, bias};
    return record(OpKind::affine, in);
}
NodeId Graph::add(NodeId a, NodeId b) {
    const NodeId in[] = {a, b};
    return record(OpKind::add, in);
}
NodeId Graph::sub(NodeId a, NodeId b) {
    const NodeId in[] = {a, b};
    return record(OpKind::sub, in);
}
NodeId Graph::mul(NodeId a, NodeId b) {
    const NodeId in[] = {a, b};
    return record(OpKind::mul, in);
}
NodeId Graph::scale(NodeId a, double factor) {
    OpArgs args;
    args.factor = factor;
    const NodeId in[] = {a};
    return record(OpKind::scale, in, args);
}
NodeId Graph::add_const(NodeId a, Tensor constant) {
    OpArgs args;
    args.constant = std::move(constant);
    const NodeId in[] = {a};
    return record(OpKind::add_const, in, args);
}
NodeId Graph::tanh(NodeId a) {
    const NodeId in[] = {a};
    return record(OpKind::tanh, in);
}
NodeId Graph::sigmoid(NodeId a) {
    const NodeId in[] = {a};
    return record(OpKind::sigmoid, in);
}
NodeId Graph::exp(NodeId a) {
    const NodeId in[] = {a};
    return record(OpKind::exp, in);
}
NodeId Graph::sum(NodeId a) {
    const NodeId in[] = {a};
    return record(OpKind::sum, in);
}
NodeId Graph::row_sum(NodeId a) {
    const NodeId in[] = {a};
    return record(OpKind::row_sum, in);
}
NodeId Graph::squared_norm(NodeId a) {
    const NodeId in[] = {a};
    return record(OpKind::squared_norm, in);
}
NodeId Graph::logsumexp(NodeId a) {
    const NodeId in[] = {a};
    return record(OpKind::logsumexp, in);
}
NodeId Graph::concat(NodeId a, NodeId b) {
    const NodeId in[] = {a, b};
    return record(OpKind::concat, in);
}
NodeId Graph::slice_cols(NodeId a, std::size_t begin, std::size_t count) {
    OpArgs args;
    args.begin = begin;
    args.count = count;
    const NodeId in[] = {a};
    return record(OpKind::slice_cols, in, args);
}
NodeId Graph::broadcast_rows(NodeId a, std::size_t rows) {
    OpArgs args;
    args.count = rows;
    const NodeId in[] = {a};
    return record(OpKind::broadcast_rows, in, args);
}

Gradients Graph::backward(NodeId root) const {
    const Node& r = node(root);
    if (r.value.size() != 1) {
        throw ShapeError("tape: backward needs a scalar root, got " + dims(r.value));
    }
    std::vector<Tensor> grads(nodes_.size());
    grads[root.index] = Tensor::scalar(1.0);
    for (std::uint32_t i = root.index + 1; i-- > 0;) {
        if (grads[i].empty() || nodes_[i].kind == OpKind::leaf) continue;
        propagate(i, grads[i], grads);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (grads[i].empty()) grads[i] = Tensor(nodes_[i].value.rows(), nodes_[i].value.cols());
    }
    return Gradients(std::move(grads));
}

void Graph::propagate(std::uint32_t index, const Tensor& g, std::vector<Tensor>& grads) const {
    const Node& n = nodes_[index];
    const auto in = [&](std::size_t i) { return n.inputs[i]; };
    const auto val = [&](std::size_t i) -> const Tensor& { return nodes_[n.inputs[i]].value; };

    switch (n.kind) {
        case OpKind::affine: {
            const Tensor& x = val(0);
            const Tensor& w = val(1);
            Tensor gx(x.rows(), x.cols());
            view(gx).noalias() = view(g) * view(w);
            Tensor gw(w.rows(), w.cols());
            view(gw).noalias() = view(g).transpose() * view(x);
            accumulate(grads[in(0)], gx);
            accumulate(grads[in(1)], gw);
            accumulate(grads[in(2)], reduce_rows(g));
            break;
        }
        case OpKind::add:
        case OpKind::sub: {
            accumulate(grads[in(0)], g);
            Tensor gb = row_broadcast(val(0), val(1)) ? reduce_rows(g) : g;
            if (n.kind == OpKind::sub) {
                for (double& v : gb.values()) v = -v;
            }
            accumulate(grads[in(1)], gb);
            break;
        }
        case OpKind::mul: {
            Tensor ga = g;
            view(ga).array() *= view(val(1)).array();
            Tensor gb = g;
            view(gb).array() *= view(val(0)).array();
            accumulate(grads[in(0)], ga);
            accumulate(grads[in(1)], gb);
            break;
        }
        case OpKind::scale: {
            Tensor ga = g;
            for (double& v : ga.values()) v *= n.args.factor;
            accumulate(grads[in(0)], ga);
            break;
        }
        case OpKind::add_const:
            accumulate(grads[in(0)], g);
            break;
        case OpKind::tanh: {
            Tensor ga = g;
            auto y = n.value.values();
            auto a = ga.values();
            for (std::size_t i = 0; i < a.size(); ++i) a[i] *= 1.0 - y[i] * y[i];
            accumulate(grads[in(0)], ga);
            break;
        }
        case OpKind::sigmoid: {
            Tensor ga = g;
            auto y = n.value.values();
            auto a = ga.values();
            for (std::size_t i = 0; i < a.size(); ++i) a[i] *= y[i] * (1.0 - y[i]);
            accumulate(grads[in(0)], ga);
            break;
        }
        case OpKind::exp: {
            Tensor ga = g;
            view(ga).array() *= view(n.value).array();
            accumulate(grads[in(0)], ga);
            break;
        }
        case OpKind::sum: {
            const Tensor& a = val(0);
            accumulate(grads[in(0)], Tensor(a.rows(), a.cols(), g.item()));
            break;
        }
        case OpKind::row_sum: {
            const Tensor& a = val(0);
            Tensor ga(a.rows(), a.cols());
            for (std::size_t r = 0; r < a.rows(); ++r) {
                for (std::size_t c = 0; c < a.cols(); ++c) ga(r, c) = g[r];
            }
            accumulate(grads[in(0)], ga);
            break;
        }
        case OpKind::squared_norm: {
            Tensor ga = val(0);
            for (double& v : ga.values()) v *= 2.0 * g.item();
            accumulate(grads[in(0)], ga);
            break;
        }
        case OpKind::logsumexp: {
            Tensor ga = val(0);
            const double lse = n.value.item();
            for (double& v : ga.values()) v = g.item() * std::exp(v - lse);
            accumulate(grads[in(0)], ga);
            break;
        }
        case OpKind::concat: {
            const Tensor& a = val(0);
            const Tensor& b = val(1);
            Tensor ga(a.rows(), a.cols());
            Tensor gb(b.rows(), b.cols());
            view(ga) = view(g).leftCols(static_cast<Eigen::Index>(a.cols()));
            view(gb) = view(g).rightCols(static_cast<Eigen::Index>(b.cols()));
            accumulate(grads[in(0)], ga);
            accumulate(grads[in(1)], gb);
            break;
        }
        case OpKind::slice_cols: {
            const Tensor& a = val(0);
            Tensor ga(a.rows(), a.cols());
            view(ga).middleCols(static_cast<Eigen::Index>(n.args.begin),
                                static_cast<Eigen::Index>(n.args.count)) = view(g);
            accumulate(grads[in(0)], ga);
            break;
        }
        case OpKind::broadcast_rows:
            accumulate(grads[in(0)], reduce_rows(g));
            break;
        case OpKind::leaf:
            break;
    }
}

// ---------------------------------------------------------------------------
// MLP

std::size_t MlpParams::input_dim() const {
    return layers.empty() ? 0 : layers.front().weight.cols();
}

std::size_t MlpParams::output_dim() const {
    return layers.empty() ? 0 : layers.back().weight.rows();
}

std::size_t MlpParams::parameter_count() const {
    std::size_t n = 0;
    for (const Layer& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

void MlpParams::validate() const {
    if (layers.empty()) throw ShapeError("mlp: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const Layer& l = layers[i];
        if (l.bias.rows() != 1 || l.bias.cols() != l.weight.rows()) {
            throw ShapeError("mlp: layer " + std::to_string(i) + " bias " + dims(l.bias) +
                             " vs weight " + dims(l.weight));
        }
        if (i > 0 && layers[i - 1].weight.rows() != l.weight.cols()) {
            throw ShapeError("mlp: layer " + std::to_string(i) + " expects " +
                             std::to_string(l.weight.cols()) + " inputs, previous layer emits " +
                             std::to_string(layers[i - 1].weight.rows()));
        }
    }
    if (layers.back().activation != Activation::linear) {
        throw ShapeError("mlp: final layer must be linear");
    }
}

std::vector<double> MlpParams::flatten() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const Layer& l : layers) {
        flat.insert(flat.end(), l.weight.values().begin(), l.weight.values().end());
        flat.insert(flat.end(), l.bias.values().begin(), l.bias.values().end());
    }
    return flat;
}

void MlpParams::assign(std::span<const double> flat) {
    if (flat.size() != parameter_count()) {
        throw ShapeError("mlp: assign " + std::to_string(flat.size()) + " values to " +
                         std::to_string(parameter_count()) + " parameters");
    }
    std::size_t k = 0;
    for (Layer& l : layers) {
        for (double& v : l.weight.values()) v = flat[k++];
        for (double& v : l.bias.values()) v = flat[k++];
    }
}

MlpParams make_mlp(std::span<const std::size_t> dims_list, double init_scale, std::mt19937_64& rng) {
    if (dims_list.size() < 2) throw ShapeError("mlp: need at least input and output dims");
    MlpParams p;
    for (std::size_t i = 0; i + 1 < dims_list.size(); ++i) {
        const std::size_t fan_in = dims_list[i];
        const std::size_t fan_out = dims_list[i + 1];
        const double s = init_scale * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        std::uniform_real_distribution<double> u(-s, s);
        Layer l;
        l.weight = Tensor(fan_out, fan_in);
        for (double& v : l.weight.values()) v = u(rng);
        l.bias = Tensor(1, fan_out);
        l.activation = (i + 2 == dims_list.size()) ? Activation::linear : Activation::tanh;
        p.layers.push_back(std::move(l));
    }
    return p;
}

MlpRecord mlp_forward(Graph& graph, const MlpParams& params, NodeId input) {
    if (params.layers.empty()) throw ShapeError("mlp: no layers");
    if (graph.value(input).cols() != params.input_dim()) {
        throw ShapeError("mlp: input width " + std::to_string(graph.value(input).cols()) +
                         " but first layer expects " + std::to_string(params.input_dim()));
    }
    MlpRecord rec;
    NodeId h = input;
    for (const Layer& l : params.layers) {
        const NodeId w = graph.leaf(l.weight);
        const NodeId b = graph.leaf(l.bias);
        rec.params.push_back(w);
        rec.params.push_back(b);
        h = graph.affine(h, w, b);
        if (l.activation == Activation::tanh) h = graph.tanh(h);
    }
    rec.output = h;
    return rec;
}

Tensor mlp_eval(const MlpParams& params, const Tensor& input) {
    if (params.layers.empty()) throw ShapeError("mlp: no layers");
    if (input.cols() != params.input_dim()) {
        throw ShapeError("mlp: input width " + std::to_string(input.cols()) +
                         " but first layer expects " + std::to_string(params.input_dim()));
    }
    Tensor h = input;
    for (const Layer& l : params.layers) {
        h = affine_forward(h, l.weight, l.bias);
        if (l.activation == Activation::tanh) h = tanh_forward(h);
    }
    if (!h.all_finite()) throw NonFiniteError("mlp: non-finite output");
    return h;
}

}  // namespace ssip::tape

#include "vlmadapt/tensor.hpp"

#include <cmath>

#include "vlmadapt/kernels.hpp"

namespace vlmadapt {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

// effective 2-D dims of a matmul; rank-1 on the left is a row, rank-1 on
// the right is a column
struct MatDims {
    std::size_t m, k, n;
    bool a_vec, b_vec;
};

MatDims resolve_matmul(const std::vector<std::size_t>& as, const std::vector<std::size_t>& bs,
                       bool trans_a, bool trans_b) {
    if (as.size() > 2 || bs.size() > 2)
        throw ShapeError("matmul: operands must be rank 1 or 2");
    if ((as.size() == 1 && trans_a) || (bs.size() == 1 && trans_b))
        throw ShapeError("matmul: transpose flag on rank-1 operand");

    MatDims d{};
    d.a_vec = as.size() == 1;
    d.b_vec = bs.size() == 1;
    std::size_t am = d.a_vec ? 1 : as[0];
    std::size_t ak = d.a_vec ? as[0] : as[1];
    if (trans_a) std::swap(am, ak);
    std::size_t bk = d.b_vec ? bs[0] : bs[0];
    std::size_t bn = d.b_vec ? 1 : bs[1];
    if (trans_b) std::swap(bk, bn);
    if (ak != bk)
        throw ShapeError("matmul: inner dimensions disagree (" + std::to_string(ak) + " vs " +
                         std::to_string(bk) + ")");
    d.m = am;
    d.k = ak;
    d.n = bn;
    return d;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape_in, std::vector<double> values_in,
               bool requires_grad_in)
    : shape(std::move(shape_in)), values(std::move(values_in)), requires_grad(requires_grad_in) {
    if (shape.empty()) throw ShapeError("tensor: empty shape");
    for (std::size_t d : shape)
        if (d == 0) throw ShapeError("tensor: zero dimension");
    if (shape_product(shape) != values.size())
        throw ShapeError("tensor: element count does not match shape");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::row_vector(std::vector<double> values) {
    std::size_t n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const { return rank() >= 2 ? shape[0] : 1; }

std::size_t Tensor::cols() const { return rank() >= 2 ? shape[1] : shape[0]; }

bool Tensor::all_finite() const {
    for (double v : values)
        if (!std::isfinite(v)) return false;
    return true;
}

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::bias_add: return "bias_add";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::tanh_fn: return "tanh";
        case Op::relu: return "relu";
        case Op::exp_fn: return "exp";
        case Op::log_fn: return "log";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::l2_normalize: return "l2_normalize";
        case Op::softmax: return "softmax";
        case Op::softmax_cross_entropy: return "softmax_cross_entropy";
        case Op::concat_rows: return "concat_rows";
        case Op::index_select: return "index_select";
    }
    return "?";
}

Tape::NodeId Tape::push(Node n) {
    if (n.op != Op::leaf) {
        compute_forward(n);
        if (!n.value.all_finite())
            throw NonFiniteError(std::string(op_name(n.op)) + ": non-finite output");
    }
    nodes_.push_back(std::move(n));
    grads_ready_ = false;
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tape::NodeId Tape::input(Tensor value) {
    if (!value.all_finite()) throw NonFiniteError("tape input: non-finite value");
    Node n;
    n.op = Op::leaf;
    n.value = std::move(value);
    return push(std::move(n));
}

Tape::NodeId Tape::constant(Tensor value) {
    value.requires_grad = false;
    return input(std::move(value));
}

Tape::NodeId Tape::parameter(Tensor value) {
    value.requires_grad = true;
    return input(std::move(value));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
    MatDims d = resolve_matmul(node(a).value.shape, node(b).value.shape, trans_a, trans_b);
    Node n;
    n.op = Op::matmul;
    n.a = a;
    n.b = b;
    n.trans_a = trans_a;
    n.trans_b = trans_b;
    if (d.a_vec && d.b_vec) n.value.shape = {1};
    else if (d.b_vec) n.value.shape = {d.m};
    else if (d.a_vec) n.value.shape = {d.n};
    else n.value.shape = {d.m, d.n};
    return push(std::move(n));
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    const auto& as = node(a).value.shape;
    const auto& bs = node(b).value.shape;
    Node n;
    n.a = a;
    n.b = b;
    if (as == bs) {
        n.op = Op::add;
    } else if (as.size() == 2 && bs.size() == 1 && bs[0] == as[1]) {
        n.op = Op::bias_add;
    } else {
        throw ShapeError("add: shapes must match (bias broadcast is [m x n] + [n] only)");
    }
    n.value.shape = as;
    return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
    if (node(a).value.shape != node(b).value.shape) throw ShapeError("mul: shapes must match");
    Node n;
    n.op = Op::mul;
    n.a = a;
    n.b = b;
    n.value.shape = node(a).value.shape;
    return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId a, double factor) {
    if (!std::isfinite(factor)) throw NonFiniteError("scale: non-finite factor");
    Node n;
    n.op = Op::scale;
    n.a = a;
    n.factor = factor;
    n.value.shape = node(a).value.shape;
    return push(std::move(n));
}

Tape::NodeId Tape::unary(Op op, NodeId a) {
    Node n;
    n.op = op;
    n.a = a;
    n.value.shape = node(a).value.shape;
    return push(std::move(n));
}

Tape::NodeId Tape::tanh_fn(NodeId a) { return unary(Op::tanh_fn, a); }
Tape::NodeId Tape::relu(NodeId a) { return unary(Op::relu, a); }
Tape::NodeId Tape::exp_fn(NodeId a) { return unary(Op::exp_fn, a); }
Tape::NodeId Tape::log_fn(NodeId a) { return unary(Op::log_fn, a); }

Tape::NodeId Tape::sum(NodeId a) {
    Node n;
    n.op = Op::sum;
    n.a = a;
    n.value.shape = {1};
    return push(std::move(n));
}

Tape::NodeId Tape::mean(NodeId a) {
    Node n;
    n.op = Op::mean;
    n.a = a;
    n.value.shape = {1};
    return push(std::move(n));
}

Tape::NodeId Tape::l2_normalize(NodeId a) {
    Node n;
    n.op = Op::l2_normalize;
    n.a = a;
    n.value.shape = node(a).value.shape;
    return push(std::move(n));
}

Tape::NodeId Tape::softmax(NodeId a) {
    Node n;
    n.op = Op::softmax;
    n.a = a;
    n.value.shape = node(a).value.shape;
    return push(std::move(n));
}

Tape::NodeId Tape::softmax_cross_entropy(NodeId logits, std::vector<std::size_t> targets) {
    const Tensor& lv = node(logits).value;
    if (targets.size() != lv.rows())
        throw ShapeError("softmax_cross_entropy: one target per row required");
    for (std::size_t t : targets)
        if (t >= lv.cols()) throw ShapeError("softmax_cross_entropy: target out of range");
    Node n;
    n.op = Op::softmax_cross_entropy;
    n.a = logits;
    n.indices = std::move(targets);
    n.value.shape = {1};
    return push(std::move(n));
}

Tape::NodeId Tape::concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const std::size_t cols = node(parts[0]).value.cols();
    std::size_t rows = 0;
    for (NodeId p : parts) {
        if (node(p).value.cols() != cols) throw ShapeError("concat_rows: column counts differ");
        rows += node(p).value.rows();
    }
    Node n;
    n.op = Op::concat_rows;
    n.parts = parts;
    n.value.shape = {rows, cols};
    return push(std::move(n));
}

Tape::NodeId Tape::index_select(NodeId a, std::vector<std::size_t> row_indices) {
    const Tensor& av = node(a).value;
    if (av.rank() != 2) throw ShapeError("index_select: rank-2 input required");
    if (row_indices.empty()) throw ShapeError("index_select: no indices");
    for (std::size_t r : row_indices)
        if (r >= av.shape[0]) throw ShapeError("index_select: row index out of range");
    Node n;
    n.op = Op::index_select;
    n.a = a;
    n.indices = std::move(row_indices);
    n.value.shape = {n.indices.size(), av.shape[1]};
    return push(std::move(n));
}

void Tape::compute_forward(Node& n) {
    const std::size_t out_size = shape_product(n.value.shape);
    n.value.values.resize(out_size);
    switch (n.op) {
        case Op::leaf:
            break;
        case Op::matmul: {
            const Tensor& av = node(n.a).value;
            const Tensor& bv = node(n.b).value;
            MatDims d = resolve_matmul(av.shape, bv.shape, n.trans_a, n.trans_b);
            kernels::matmul(av.values.data(), bv.values.data(), n.value.values.data(), d.m, d.k,
                            d.n, n.trans_a, n.trans_b);
            break;
        }
        case Op::add:
            kernels::add(node(n.a).value.values.data(), node(n.b).value.values.data(),
                         n.value.values.data(), out_size);
            break;
        case Op::bias_add: {
            const Tensor& av = node(n.a).value;
            kernels::bias_add(av.values.data(), node(n.b).value.values.data(),
                              n.value.values.data(), av.rows(), av.cols());
            break;
        }
        case Op::mul:
            kernels::mul(node(n.a).value.values.data(), node(n.b).value.values.data(),
                         n.value.values.data(), out_size);
            break;
        case Op::scale:
            kernels::scale(node(n.a).value.values.data(), n.factor, n.value.values.data(),
                           out_size);
            break;
        case Op::tanh_fn:
            kernels::map_unary(kernels::UnaryOp::tanh_fn, node(n.a).value.values.data(),
                               n.value.values.data(), out_size);
            break;
        case Op::relu:
            kernels::map_unary(kernels::UnaryOp::relu, node(n.a).value.values.data(),
                               n.value.values.data(), out_size);
            break;
        case Op::exp_fn:
            kernels::map_unary(kernels::UnaryOp::exp_fn, node(n.a).value.values.data(),
                               n.value.values.data(), out_size);
            break;
        case Op::log_fn:
            kernels::map_unary(kernels::UnaryOp::log_fn, node(n.a).value.values.data(),
                               n.value.values.data(), out_size);
            break;
        case Op::sum:
            n.value.values[0] =
                kernels::sum(node(n.a).value.values.data(), node(n.a).value.size());
            break;
        case Op::mean:
            n.value.values[0] =
                kernels::sum(node(n.a).value.values.data(), node(n.a).value.size()) /
                static_cast<double>(node(n.a).value.size());
            break;
        case Op::l2_normalize: {
            const Tensor& av = node(n.a).value;
            const std::size_t rows = av.rows(), cols = av.cols();
            n.aux.resize(rows);
            kernels::row_l2_normalize(av.values.data(), n.value.values.data(), n.aux.data(), rows,
                                      cols, norm_floor_);
            for (std::size_t r = 0; r < rows; ++r)
                if (n.aux[r] == 0.0) throw std::invalid_argument("l2_normalize: zero-norm input");
            break;
        }
        case Op::softmax: {
            const Tensor& av = node(n.a).value;
            kernels::row_softmax(av.values.data(), n.value.values.data(), av.rows(), av.cols());
            break;
        }
        case Op::softmax_cross_entropy: {
            const Tensor& av = node(n.a).value;
            const std::size_t rows = av.rows(), cols = av.cols();
            n.aux.resize(rows * cols);
            kernels::row_softmax(av.values.data(), n.aux.data(), rows, cols);
            double total = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                // -log softmax via logsumexp for stability
                const double* row = av.values.data() + r * cols;
                double mx = row[0];
                for (std::size_t c = 1; c < cols; ++c) mx = row[c] > mx ? row[c] : mx;
                double denom = 0.0;
                for (std::size_t c = 0; c < cols; ++c) denom += std::exp(row[c] - mx);
                total += mx + std::log(denom) - row[n.indices[r]];
            }
            n.value.values[0] = total / static_cast<double>(rows);
            break;
        }
        case Op::concat_rows: {
            std::size_t offset = 0;
            for (NodeId p : n.parts) {
                const Tensor& pv = node(p).value;
                for (std::size_t i = 0; i < pv.size(); ++i)
                    n.value.values[offset + i] = pv.values[i];
                offset += pv.size();
            }
            break;
        }
        case Op::index_select: {
            const Tensor& av = node(n.a).value;
            const std::size_t cols = av.shape[1];
            for (std::size_t i = 0; i < n.indices.size(); ++i)
                for (std::size_t c = 0; c < cols; ++c)
                    n.value.values[i * cols + c] = av.values[n.indices[i] * cols + c];
            break;
        }
    }
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

const Tensor& Tape::grad(NodeId id) const {
    if (!grads_ready_) throw std::logic_error("grad: backward() has not run");
    return node(id).grad;
}

void Tape::backward(NodeId loss) {
    Node& ln = node(loss);
    if (!ln.value.is_scalar())
        throw std::invalid_argument("backward: loss must be scalar");
    for (Node& n : nodes_) {
        n.grad.shape = n.value.shape;
        n.grad.values.assign(n.value.size(), 0.0);
        n.grad.requires_grad = false;
    }
    ln.grad.values[0] = 1.0;
    for (NodeId id = loss; id >= 0; --id) {
        Node& n = node(id);
        if (n.op == Op::leaf) continue;
        bool any = false;
        for (double g : n.grad.values)
            if (g != 0.0) {
                any = true;
                break;
            }
        if (!any) continue;
        backward_node(n);
    }
    for (const Node& n : nodes_)
        if (!n.grad.all_finite())
            throw NonFiniteError(std::string(op_name(n.op)) + ": non-finite gradient");
    grads_ready_ = true;
}

void Tape::backward_node(Node& n) {
    const std::vector<double>& g = n.grad.values;
    switch (n.op) {
        case Op::leaf:
            break;
        case Op::matmul: {
            Node& na = node(n.a);
            Node& nb = node(n.b);
            MatDims d =
                resolve_matmul(na.value.shape, nb.value.shape, n.trans_a, n.trans_b);
            std::vector<double> buf;
            buf.resize(na.value.size());
            if (!n.trans_a)
                kernels::matmul(g.data(), nb.value.values.data(), buf.data(), d.m, d.n, d.k,
                                false, !n.trans_b);
            else
                kernels::matmul(nb.value.values.data(), g.data(), buf.data(), d.k, d.n, d.m,
                                n.trans_b, true);
            for (std::size_t i = 0; i < buf.size(); ++i) na.grad.values[i] += buf[i];
            buf.assign(nb.value.size(), 0.0);
            if (!n.trans_b)
                kernels::matmul(na.value.values.data(), g.data(), buf.data(), d.k, d.m, d.n,
                                !n.trans_a, false);
            else
                kernels::matmul(g.data(), na.value.values.data(), buf.data(), d.n, d.m, d.k,
                                true, n.trans_a);
            for (std::size_t i = 0; i < buf.size(); ++i) nb.grad.values[i] += buf[i];
            break;
        }
        case Op::add: {
            Node& na = node(n.a);
            Node& nb = node(n.b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                na.grad.values[i] += g[i];
                nb.grad.values[i] += g[i];
            }
            break;
        }
        case Op::bias_add: {
            Node& na = node(n.a);
            Node& nb = node(n.b);
            const std::size_t rows = na.value.rows(), cols = na.value.cols();
            for (std::size_t i = 0; i < g.size(); ++i) na.grad.values[i] += g[i];
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) nb.grad.values[c] += g[r * cols + c];
            break;
        }
        case Op::mul: {
            Node& na = node(n.a);
            Node& nb = node(n.b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                na.grad.values[i] += g[i] * nb.value.values[i];
                nb.grad.values[i] += g[i] * na.value.values[i];
            }
            break;
        }
        case Op::scale: {
            Node& na = node(n.a);
            for (std::size_t i = 0; i < g.size(); ++i) na.grad.values[i] += g[i] * n.factor;
            break;
        }
        case Op::tanh_fn: {
            Node& na = node(n.a);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = n.value.values[i];
                na.grad.values[i] += g[i] * (1.0 - y * y);
            }
            break;
        }
        case Op::relu: {
            Node& na = node(n.a);
            for (std::size_t i = 0; i < g.size(); ++i)
                na.grad.values[i] += na.value.values[i] > 0.0 ? g[i] : 0.0;
            break;
        }
        case Op::exp_fn: {
            Node& na = node(n.a);
            for (std::size_t i = 0; i < g.size(); ++i)
                na.grad.values[i] += g[i] * n.value.values[i];
            break;
        }
        case Op::log_fn: {
            Node& na = node(n.a);
            for (std::size_t i = 0; i < g.size(); ++i)
                na.grad.values[i] += g[i] / na.value.values[i];
            break;
        }
        case Op::sum: {
            Node& na = node(n.a);
            for (double& gi : na.grad.values) gi += g[0];
            break;
        }
        case Op::mean: {
            Node& na = node(n.a);
            const double s = g[0] / static_cast<double>(na.value.size());
            for (double& gi : na.grad.values) gi += s;
            break;
        }
        case Op::l2_normalize: {
            Node& na = node(n.a);
            const std::size_t rows = na.value.rows(), cols = na.value.cols();
            for (std::size_t r = 0; r < rows; ++r) {
                const double s = n.aux[r];
                const double nu = s + norm_floor_;
                const double* x = na.value.values.data() + r * cols;
                const double* gr = g.data() + r * cols;
                double gx = 0.0;
                for (std::size_t c = 0; c < cols; ++c) gx += gr[c] * x[c];
                const double coef = gx / (s * nu * nu);
                for (std::size_t c = 0; c < cols; ++c)
                    na.grad.values[r * cols + c] += gr[c] / nu - coef * x[c];
            }
            break;
        }
        case Op::softmax: {
            Node& na = node(n.a);
            const std::size_t rows = na.value.rows(), cols = na.value.cols();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* p = n.value.values.data() + r * cols;
                const double* gr = g.data() + r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * p[c];
                for (std::size_t c = 0; c < cols; ++c)
                    na.grad.values[r * cols + c] += p[c] * (gr[c] - dot);
            }
            break;
        }
        case Op::softmax_cross_entropy: {
            Node& na = node(n.a);
            const std::size_t rows = na.value.rows(), cols = na.value.cols();
            const double s = g[0] / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* p = n.aux.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double ind = c == n.indices[r] ? 1.0 : 0.0;
                    na.grad.values[r * cols + c] += s * (p[c] - ind);
                }
            }
            break;
        }
        case Op::concat_rows: {
            std::size_t offset = 0;
            for (NodeId p : n.parts) {
                Node& np = node(p);
                for (std::size_t i = 0; i < np.value.size(); ++i)
                    np.grad.values[i] += g[offset + i];
                offset += np.value.size();
            }
            break;
        }
        case Op::index_select: {
            Node& na = node(n.a);
            const std::size_t cols = na.value.shape[1];
            // serial scatter: duplicate indices accumulate
            for (std::size_t i = 0; i < n.indices.size(); ++i)
                for (std::size_t c = 0; c < cols; ++c)
                    na.grad.values[n.indices[i] * cols + c] += g[i * cols + c];
            break;
        }
    }
}

void Tape::set_leaf(NodeId leaf, const Tensor& value) {
    Node& n = node(leaf);
    if (n.op != Op::leaf) throw std::invalid_argument("set_leaf: node is not a leaf");
    if (n.value.shape != value.shape) throw ShapeError("set_leaf: shape mismatch");
    if (!value.all_finite()) throw NonFiniteError("set_leaf: non-finite value");
    n.value.values = value.values;
    grads_ready_ = false;
}

void Tape::set_leaf_element(NodeId leaf, std::size_t flat_index, double v) {
    Node& n = node(leaf);
    if (n.op != Op::leaf) throw std::invalid_argument("set_leaf_element: node is not a leaf");
    n.value.values.at(flat_index) = v;
    grads_ready_ = false;
}

void Tape::replay() {
    for (Node& n : nodes_) {
        if (n.op == Op::leaf) continue;
        compute_forward(n);
        if (!n.value.all_finite())
            throw NonFiniteError(std::string(op_name(n.op)) + ": non-finite output");
    }
}

double Tape::finite_diff_max_rel_error(NodeId loss, const std::vector<NodeId>& leaves,
                                       double epsilon) {
    if (!(epsilon > 0.0) || epsilon > 1e-2)
        throw std::invalid_argument("finite_diff: epsilon must lie in (0, 1e-2]");
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (NodeId l : leaves) analytic.push_back(node(l).grad.values);

    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Node& leaf = node(leaves[li]);
        if (leaf.op != Op::leaf)
            throw std::invalid_argument("finite_diff: perturbation target is not a leaf");
        for (std::size_t i = 0; i < leaf.value.size(); ++i) {
            const double orig = leaf.value.values[i];
            leaf.value.values[i] = orig + epsilon;
            replay();
            const double up = node(loss).value.values[0];
            leaf.value.values[i] = orig - epsilon;
            replay();
            const double down = node(loss).value.values[0];
            leaf.value.values[i] = orig;
            const double numeric = (up - down) / (2.0 * epsilon);
            const double a = analytic[li][i];
            const double rel =
                std::fabs(a - numeric) / (std::fabs(a) + std::fabs(numeric) + 1e-12);
            worst = rel > worst ? rel : worst;
        }
    }
    replay();
    return worst;
}

}  // namespace vlmadapt

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vlmadapt {

// Raised when an operation produces NaN/Inf anywhere. Divergence detection
// (hyperparameter probes) catches exactly this type.
struct NonFiniteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Dense row-major 64-bit float array. Rank 1 = vector, rank 2 = matrix,
// scalars use shape {1}.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(std::vector<std::size_t> shape_in, std::vector<double> values_in,
           bool requires_grad_in = false);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);
    static Tensor scalar(double value);
    static Tensor row_vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    // 2-D view: rank-1 tensors count as a single row
    std::size_t rows() const;
    std::size_t cols() const;
    bool is_scalar() const { return size() == 1; }

    double& at(std::size_t i) { return values[i]; }
    double at(std::size_t i) const { return values[i]; }
    double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

    bool all_finite() const;
    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

enum class Op : std::uint8_t {
    leaf,
    matmul,
    add,
    bias_add,
    mul,
    scale,
    tanh_fn,
    relu,
    exp_fn,
    log_fn,
    sum,
    mean,
    l2_normalize,
    softmax,
    softmax_cross_entropy,
    concat_rows,
    index_select,
};

const char* op_name(Op op);

// Define-by-run computation tape. Node creation computes the forward value
// immediately and records enough to differentiate; nodes are therefore
// topologically ordered by construction. replay() recomputes every non-leaf
// value in that order, which is what finite differencing uses after
// perturbing a leaf.
class Tape {
public:
    using NodeId = std::int32_t;

    NodeId input(Tensor value);      // leaf, honors value.requires_grad
    NodeId constant(Tensor value);   // leaf, never differentiated
    NodeId parameter(Tensor value);  // leaf with requires_grad forced on

    // trans_a/trans_b transpose the stored operand before multiplying;
    // rank-1 operands promote to a row on the left, a column on the right
    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
    NodeId add(NodeId a, NodeId b);  // equal shapes, or [m x n] + [n]
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double factor);
    NodeId tanh_fn(NodeId a);
    NodeId relu(NodeId a);
    NodeId exp_fn(NodeId a);
    NodeId log_fn(NodeId a);
    NodeId sum(NodeId a);
    NodeId mean(NodeId a);
    NodeId l2_normalize(NodeId a);  // per row; an exactly-zero row is an error
    NodeId softmax(NodeId a);       // per row
    // mean over rows of -log softmax(row)[target]
    NodeId softmax_cross_entropy(NodeId logits, std::vector<std::size_t> targets);
    NodeId concat_rows(const std::vector<NodeId>& parts);
    NodeId index_select(NodeId a, std::vector<std::size_t> row_indices);

    const Tensor& value(NodeId id) const;

    // reverse pass from a scalar loss; every node gets a gradient tensor,
    // zero where the loss does not reach
    void backward(NodeId loss);
    const Tensor& grad(NodeId id) const;  // valid after backward()
    bool grads_ready() const { return grads_ready_; }

    // replace a leaf's value (same shape); call replay() to recompute
    void set_leaf(NodeId leaf, const Tensor& value);
    void set_leaf_element(NodeId leaf, std::size_t flat_index, double v);
    void replay();

    // max over every element of the given leaves of
    // |analytic - numeric| / (|analytic| + |numeric| + 1e-12),
    // numeric from central differences on the replayed tape;
    // epsilon must lie in (0, 1e-2]
    double finite_diff_max_rel_error(NodeId loss, const std::vector<NodeId>& leaves,
                                     double epsilon);

    std::size_t node_count() const { return nodes_.size(); }
    double norm_floor() const { return norm_floor_; }
    void set_norm_floor(double floor) { norm_floor_ = floor; }

private:
    struct Node {
        Op op = Op::leaf;
        Tensor value;
        Tensor grad;
        NodeId a = -1, b = -1;
        std::vector<NodeId> parts;         // concat_rows
        std::vector<std::size_t> indices;  // index_select rows / cross-entropy targets
        double factor = 0.0;               // scale
        bool trans_a = false, trans_b = false;
        std::vector<double> aux;  // forward scratch persisted for backward
    };

    std::vector<Node> nodes_;
    double norm_floor_ = 1e-12;
    bool grads_ready_ = false;

    Node& node(NodeId id) { return nodes_.at(static_cast<std::size_t>(id)); }
    const Node& node(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    NodeId push(Node n);
    NodeId unary(Op op, NodeId a);
    void compute_forward(Node& n);
    void backward_node(Node& n);
};

}  // namespace vlmadapt

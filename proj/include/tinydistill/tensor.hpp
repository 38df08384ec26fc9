#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tinydistill/rng.hpp"

namespace tinydistill {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One node of the recorded computation. Nodes form the tape: parents are
// always created before children, so a depth-first walk from the loss node
// yields a topological order and backward() visits each node exactly once.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated lazily, same length as data
    bool requires_grad = false;        // leaf parameter flag
    bool needs_grad = false;           // true if a path to a leaf parameter exists
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad();
};

}  // namespace detail

// Dense 64-bit float tensor participating in reverse-mode differentiation.
// A Tensor is a cheap handle; copying shares the underlying storage.
//
// Invariants:
//   - product(shape) == data length;
//   - grad, when allocated, matches data length;
//   - public operations reject non-finite results (overflow raises
//     ValueError instead of propagating NaN/Inf).
class Tensor {
public:
    Tensor();

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> data);
    static Tensor scalar(double value);
    // Leaf with requires_grad set; the unit the optimizer updates.
    static Tensor parameter(Shape shape, std::vector<double> data);
    static Tensor randn(Shape shape, Rng& rng, double mean, double stddev,
                        bool truncate_2sigma = true);

    const Shape& shape() const;
    std::size_t rank() const;
    std::size_t dim(std::size_t i) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    std::span<double> mutable_data();  // leaves only (optimizer updates)

    bool requires_grad() const;
    void set_requires_grad(bool value);
    // True when this tensor lies on a recorded path to some parameter.
    bool participates_in_grad() const;

    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    double value() const;  // scalar tensors only
    double at(std::initializer_list<std::size_t> index) const;

    // Constant copy sharing no graph history.
    Tensor detach() const;
    // Deep copy as a fresh leaf (keeps requires_grad).
    Tensor clone() const;

    bool defined() const { return node_ != nullptr; }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node);
    std::shared_ptr<detail::TensorNode> node_;

    friend Tensor make_op_result(Shape shape, std::vector<double> data,
                                 std::vector<Tensor> parents,
                                 std::function<void(detail::TensorNode&)> backward_fn,
                                 const char* op_name);
};

// --- gradient recording control ------------------------------------------

bool grad_enabled();

// Disables graph recording in scope (teacher forward passes, evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// --- primitives ------------------------------------------------------------
// Each primitive validates shapes, checks its output for non-finite values
// and, when gradients are enabled, records a backward rule. Gradients
// accumulate additively across multiple uses of a tensor.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);           // elementwise
Tensor scale(const Tensor& a, double c);
Tensor add_bias(const Tensor& x, const Tensor& bias);   // bias over last dim

// Batched matrix product [..,p,q] x [..,q,r] -> [..,p,r]; batch dimensions
// broadcast (a dimension may be 1 or absent on either side).
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose_last_two(const Tensor& a);
Tensor relu(const Tensor& a);

// Row softmax over the last dimension with max-subtraction; rows sum to 1.
Tensor softmax_rows(const Tensor& a);
// Computed directly (not log(softmax(x))) for stability.
Tensor log_softmax_rows(const Tensor& a);

// Per-row normalization over the last dimension with learnable gain/bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-12);

// Embedding lookup: rows of table gathered by ids; result shape is
// id_shape + [table.dim(1)]. Backward scatter-adds into the table.
Tensor gather_rows(const Tensor& table, const std::vector<std::int32_t>& ids,
                   Shape id_shape);

// Removes dimension 1 at the given index: [a,n,rest..] -> [a,rest..].
Tensor select_dim1(const Tensor& x, std::size_t index);

// [b,l,d] -> [b,h,l,d/h]; column block i*d/h..(i+1)*d/h becomes head i.
Tensor split_heads(const Tensor& x, std::size_t heads);
// Inverse of split_heads; implemented as the concatenation of head slices.
Tensor merge_heads(const Tensor& x);

// Concatenation along the last dimension; all other dimensions must agree.
Tensor concat_last_dim(const std::vector<Tensor>& parts);

// Inverted dropout; identity when p == 0. Mask drawn from rng.
Tensor dropout(const Tensor& x, double p, Rng& rng);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// Mean over all elements of (a-b)^2.
Tensor mse(const Tensor& a, const Tensor& b);

// sum(w * (a-b)^2) / sum(w); weight entries are 0/1 and receive no
// gradient. Returns constant zero when sum(w) == 0.
Tensor masked_mse(const Tensor& a, const Tensor& b, const Tensor& weight);

// Mean over rows of -sum_c softmax(teacher/t)_c * log softmax(student/t)_c.
// The teacher side is treated as a constant: gradients flow only to
// student_logits.
Tensor soft_cross_entropy(const Tensor& teacher_logits,
                          const Tensor& student_logits, double temperature);

// Mean over rows of -log softmax(row)[target]. Rows with include == 0 are
// skipped and the mean divides by the number of included rows.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets);
Tensor cross_entropy_masked(const Tensor& logits,
                            const std::vector<std::int32_t>& targets,
                            const std::vector<std::uint8_t>& include);

// Reverse pass from a scalar loss. Populates grad for every tensor with
// requires_grad reachable from the loss; each recorded node is visited
// exactly once, in reverse topological order.
void backward(const Tensor& loss);

}  // namespace tinydistill

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <vector>

#include "eeguq/tensor.hpp"

namespace eeguq {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
  public:
    Var() : tape_(nullptr), index_(0) {}
    Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

    const Tensor& value() const;
    /// Gradient of the last backward pass; zeros if the node was not reached.
    Tensor grad() const;
    bool requires_grad() const;
    Tape* tape() const { return tape_; }
    std::size_t index() const { return index_; }

  private:
    friend class Tape;
    Tape* tape_;
    std::size_t index_;
};

/// Records primitive operations in execution order; replaying the record
/// backward yields gradients for every leaf reachable from a scalar loss.
/// Single-writer: one training step builds and consumes one tape.
class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Differentiable input (parameter).
    Var leaf(Tensor value);
    /// Non-differentiable input.
    Var constant(Tensor value);

    /// Runs reverse-mode accumulation from a scalar loss and returns
    /// d(loss)/d(param) for each param. Grads of unreachable params are zero.
    std::vector<Tensor> grad(Var loss, const std::vector<Var>& params);

    std::size_t node_count() const { return nodes_.size(); }

  private:
    friend class Var;
    friend struct TapeOps;

    struct Node {
        Tensor value;
        Tensor grad;  // empty until touched by backward
        bool requires_grad = false;
        std::function<void()> backward;  // empty for leaves/constants
    };

    Node& node(std::size_t i) { return nodes_[i]; }
    const Node& node(std::size_t i) const { return nodes_[i]; }
    Var record(Tensor value, bool requires_grad, std::function<void()> backward);
    void ensure_grad(std::size_t i);

    std::deque<Node> nodes_;
};

// --- primitive operations -------------------------------------------------
// All primitives validate shapes and throw std::invalid_argument naming the
// offending dimension. Each is differentiable w.r.t. every Var operand that
// requires grad.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);
/// s is a scalar (size-1) Var; result is s * x element-wise.
Var mul_scalar_var(Var s, Var x);

Var matmul(Var a, Var b);
/// x: [n, k], v: [k]; adds v to every row.
Var add_rowvec(Var x, Var v);

/// Cross-correlation with zero padding (pad_h, pad_w) and channel groups.
/// input [B, Ci, H, W], kernel [Co, Ci/groups, KH, KW] -> [B, Co, OH, OW].
Var conv2d(Var input, Var kernel, std::int64_t pad_h, std::int64_t pad_w, std::int64_t groups);

Var relu(Var x);
Var sigmoid(Var x);
Var tanh_op(Var x);
Var log_op(Var x);
Var clamp_min(Var x, double floor);

/// Row-wise softmax / log-softmax over the last dimension of a 2-d input.
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);

/// Pooling over non-overlapping windows; the window must divide the extents.
Var avgpool2d(Var x, std::int64_t win_h, std::int64_t win_w);
Var maxpool2d(Var x, std::int64_t win_h, std::int64_t win_w);

struct BatchNormResult {
    Var y;
    Tensor batch_mean;  // per-channel, for running-stat updates
    Tensor batch_var;   // biased
};

/// Training-mode batch norm over [B, C, H, W] with per-channel batch stats.
BatchNormResult batchnorm_train(Var x, Var gamma, Var beta, double eps);

/// Eval-mode batch norm: per-channel affine from fixed running statistics.
Var batchnorm_eval(Var x, Var gamma, Var beta, const Tensor& running_mean,
                   const Tensor& running_var, double eps);

/// y[i] = x[i, labels[i]] for x: [n, k].
Var pick_class(Var x, const std::vector<std::int64_t>& labels);

Var sum_all(Var x);
Var mean_all(Var x);
Var reshape(Var x, std::vector<std::int64_t> new_shape);
/// Columns [start, start+len) of a 2-d input.
Var slice_cols(Var x, std::int64_t start, std::int64_t len);

/// Mean cross-entropy of logits [n, k] against integer labels.
Var cross_entropy(Var logits, const std::vector<std::int64_t>& labels);

/// Jensen-Shannon divergence between two row-distribution Vars [n, k],
/// averaged over rows; composed from primitives so it is differentiable.
Var js_divergence_rows(Var p, Var q);

}  // namespace eeguq

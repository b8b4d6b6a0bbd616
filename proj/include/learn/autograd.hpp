#pragma once

// Minimal reverse-mode automatic differentiation over dense Eigen matrices.
//
// A Var is a handle to a node holding a value, an accumulated gradient and a
// closure that pushes the node's gradient into its inputs. Graphs are built
// eagerly by calling the free functions below and released when the last
// handle goes away. Parameters are long-lived leaf Vars.
//
// Image feature maps use a channels x (batch * H * W) layout; column index
// b*H*W + y*W + x.

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Dense>

namespace learn::ag {

using Matrix = Eigen::MatrixXd;

struct Node {
  Matrix value;
  Matrix grad;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  void accumulate(const Matrix& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  void zero_grad() { node_->grad.resize(0, 0); }

  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward);
  std::shared_ptr<Node> node_;
};

/// Wraps a computed value as a graph node. `backward` receives the result
/// node (whose grad is populated) and must call accumulate on its inputs.
/// Skipped entirely when no input needs a gradient or grad mode is off.
Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward);

Var constant(Matrix value);
Var parameter(Matrix value);

/// Seeds d(root)/d(root) = 1 for a 1x1 root and back-propagates.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise and linear algebra.
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var transpose(const Var& a);
/// a (n x c) + row (1 x c) broadcast over rows.
Var add_row(const Var& a, const Var& row);
/// a (r x n) + col (r x 1) broadcast over columns.
Var add_col(const Var& a, const Var& col);
/// a (r x n) scaled per column: out(:, j) = a(:, j) * col_scale(0, j).
Var mul_row(const Var& a, const Var& row);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// Nonlinearities.
Var relu(const Var& a);
Var gelu(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);

// Shape manipulation.
Var rows(const Var& a, Eigen::Index start, Eigen::Index count);
Var cols(const Var& a, Eigen::Index start, Eigen::Index count);
Var gather_rows(const Var& a, const std::vector<int>& index);
Var vcat(const std::vector<Var>& parts);
Var hcat(const std::vector<Var>& parts);
/// Row-major reshape of a (r x c) into (r*c/new_cols x new_cols).
Var reshape_rows(const Var& a, Eigen::Index new_cols);

// Reductions.
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a);
Var normalize_rows(const Var& a);

// Normalisation layers.
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var group_norm(const Var& x, int batch, int groups, const Var& gamma, const Var& beta, double eps = 1e-5);

/// softmax(q k^T * scale + mask) v. mask (if given) is additive with
/// entries 0 or -inf and must leave at least one finite entry per row.
Var attention(const Var& q, const Var& k, const Var& v, const Matrix* mask, double scale);

// Convolutional pieces for channel x (B*H*W) feature maps.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int batch, int height, int width, int kernel);
Var avg_pool2(const Var& x, int batch, int height, int width);
Var upsample2(const Var& x, int batch, int height, int width);
/// x (C x B*HW) plus per-image channel offsets e (C x B).
Var add_per_image(const Var& x, const Var& e, int pixels_per_image);

// Losses (scalar 1x1 results).
Var mse(const Var& a, const Matrix& target);
Var l1(const Var& a, const Matrix& target);
Var softmax_cross_entropy(const Var& logits, const std::vector<int>& targets);
Var bce_with_logits(const Var& logits, const Matrix& targets);

}  // namespace learn::ag

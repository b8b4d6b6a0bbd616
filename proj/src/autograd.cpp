#include "learn/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "learn/error.hpp"

namespace learn::ag {

namespace {

thread_local bool g_grad_enabled = true;

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                                              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                              std::to_string(b.cols()));
  }
}

Node& in(Node& n, std::size_t i) { return *n.inputs[i]; }

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var make_result(Matrix value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  if (!g_grad_enabled) return out;
  bool needs = false;
  for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (!needs) return out;
  out.node_->requires_grad = true;
  out.node_->inputs.reserve(inputs.size());
  for (auto& v : inputs) out.node_->inputs.push_back(v.node());
  out.node_->backward = std::move(backward);
  return out;
}

Var constant(Matrix value) { return Var(std::move(value), false); }
Var parameter(Matrix value) { return Var(std::move(value), true); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && child->backward && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && n->grad.size() != 0) n->backward(*n);
  }
  // Interior gradients are not needed after the sweep.
  for (Node* n : order) {
    if (n != root.node().get()) n->grad.resize(0, 0);
  }
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                              " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  return make_result(a.value() * b.value(), {a, b}, [](Node& n) {
    Node& x = in(n, 0);
    Node& y = in(n, 1);
    if (x.requires_grad) x.accumulate(n.grad * y.value.transpose());
    if (y.requires_grad) y.accumulate(x.value.transpose() * n.grad);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make_result(a.value() + b.value(), {a, b}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    in(n, 1).accumulate(n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  return make_result(a.value() - b.value(), {a, b}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    in(n, 1).accumulate(-n.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  return make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& n) {
    Node& x = in(n, 0);
    Node& y = in(n, 1);
    if (x.requires_grad) x.accumulate(n.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate(n.grad.cwiseProduct(x.value));
  });
}

Var scale(const Var& a, double s) {
  return make_result(a.value() * s, {a}, [s](Node& n) { in(n, 0).accumulate(n.grad * s); });
}

Var transpose(const Var& a) {
  return make_result(a.value().transpose(), {a}, [](Node& n) { in(n, 0).accumulate(n.grad.transpose()); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error(ErrorCode::ShapeMismatch, "add_row: bad row shape");
  Matrix out = a.value().rowwise() + row.value().row(0);
  return make_result(std::move(out), {a, row}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad.colwise().sum());
  });
}

Var add_col(const Var& a, const Var& col) {
  if (col.cols() != 1 || col.rows() != a.rows()) throw Error(ErrorCode::ShapeMismatch, "add_col: bad column shape");
  Matrix out = a.value().colwise() + col.value().col(0);
  return make_result(std::move(out), {a, col}, [](Node& n) {
    in(n, 0).accumulate(n.grad);
    if (in(n, 1).requires_grad) in(n, 1).accumulate(n.grad.rowwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error(ErrorCode::ShapeMismatch, "mul_row: bad row shape");
  Matrix out = a.value() * row.value().row(0).asDiagonal();
  return make_result(std::move(out), {a, row}, [](Node& n) {
    Node& x = in(n, 0);
    Node& r = in(n, 1);
    if (x.requires_grad) x.accumulate(n.grad * r.value.row(0).asDiagonal());
    if (r.requires_grad) r.accumulate((n.grad.cwiseProduct(x.value)).colwise().sum());
  });
}

Var relu(const Var& a) {
  return make_result(a.value().cwiseMax(0.0), {a}, [](Node& n) {
    Node& x = in(n, 0);
    x.accumulate(n.grad.cwiseProduct((x.value.array() > 0.0).cast<double>().matrix()));
  });
}

Var gelu(const Var& a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  const Matrix& x = a.value();
  Matrix t = (c * (x.array() + 0.044715 * x.array().cube())).tanh().matrix();
  Matrix out = (0.5 * x.array() * (1.0 + t.array())).matrix();
  return make_result(std::move(out), {a}, [t = std::move(t), c](Node& n) {
    const auto& xv = in(n, 0).value.array();
    const auto dinner = c * (1.0 + 3.0 * 0.044715 * xv.square());
    const auto d = 0.5 * (1.0 + t.array()) + 0.5 * xv * (1.0 - t.array().square()) * dinner;
    in(n, 0).accumulate((n.grad.array() * d).matrix());
  });
}

Var silu(const Var& a) {
  Matrix s = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  Matrix out = a.value().cwiseProduct(s);
  return make_result(std::move(out), {a}, [s = std::move(s)](Node& n) {
    const auto& xv = in(n, 0).value.array();
    const auto d = s.array() * (1.0 + xv * (1.0 - s.array()));
    in(n, 0).accumulate((n.grad.array() * d).matrix());
  });
}

Var sigmoid(const Var& a) {
  Matrix s = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return make_result(s, {a}, [](Node& n) {
    const auto& sv = n.value.array();
    in(n, 0).accumulate((n.grad.array() * sv * (1.0 - sv)).matrix());
  });
}

Var rows(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.rows()) throw Error(ErrorCode::ShapeMismatch, "rows: range out of bounds");
  return make_result(a.value().middleRows(start, count), {a}, [start, count](Node& n) {
    Node& x = in(n, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    g.middleRows(start, count) = n.grad;
    x.accumulate(g);
  });
}

Var cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw Error(ErrorCode::ShapeMismatch, "cols: range out of bounds");
  return make_result(a.value().middleCols(start, count), {a}, [start, count](Node& n) {
    Node& x = in(n, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    g.middleCols(start, count) = n.grad;
    x.accumulate(g);
  });
}

Var gather_rows(const Var& a, const std::vector<int>& index) {
  Matrix out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw Error(ErrorCode::ShapeMismatch, "gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return make_result(std::move(out), {a}, [index](Node& n) {
    Node& x = in(n, 0);
    Matrix g = Matrix::Zero(x.value.rows(), x.value.cols());
    for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    x.accumulate(g);
  });
}

Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "vcat of nothing");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw Error(ErrorCode::ShapeMismatch, "vcat: column counts differ");
    total += p.rows();
  }
  Matrix out(total, parts.front().cols());
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    offsets.push_back(at);
    at += p.rows();
  }
  return make_result(std::move(out), parts, [offsets](Node& n) {
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      Node& x = in(n, i);
      if (x.requires_grad) x.accumulate(n.grad.middleRows(offsets[i], x.value.rows()));
    }
  });
}

Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "hcat of nothing");
  Eigen::Index total = 0;
  for (const auto& p : parts) {
    if (p.rows() != parts.front().rows()) throw Error(ErrorCode::ShapeMismatch, "hcat: row counts differ");
    total += p.cols();
  }
  Matrix out(parts.front().rows(), total);
  std::vector<Eigen::Index> offsets;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    offsets.push_back(at);
    at += p.cols();
  }
  return make_result(std::move(out), parts, [offsets](Node& n) {
    for (std::size_t i = 0; i < n.inputs.size(); ++i) {
      Node& x = in(n, i);
      if (x.requires_grad) x.accumulate(n.grad.middleCols(offsets[i], x.value.cols()));
    }
  });
}

Var reshape_rows(const Var& a, Eigen::Index new_cols) {
  const Eigen::Index total = a.value().size();
  if (new_cols <= 0 || total % new_cols != 0) throw Error(ErrorCode::ShapeMismatch, "reshape_rows: size mismatch");
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor flat = a.value();
  Matrix out = Eigen::Map<const RowMajor>(flat.data(), total / new_cols, new_cols);
  const Eigen::Index r = a.rows();
  const Eigen::Index c = a.cols();
  return make_result(std::move(out), {a}, [r, c](Node& n) {
    const RowMajor g = n.grad;
    in(n, 0).accumulate(Eigen::Map<const RowMajor>(g.data(), r, c));
  });
}

Var sum(const Var& a) {
  return make_result(Matrix::Constant(1, 1, a.value().sum()), {a}, [](Node& n) {
    Node& x = in(n, 0);
    x.accumulate(Matrix::Constant(x.value.rows(), x.value.cols(), n.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  return make_result(Matrix::Constant(1, 1, a.value().mean()), {a}, [count](Node& n) {
    Node& x = in(n, 0);
    x.accumulate(Matrix::Constant(x.value.rows(), x.value.cols(), n.grad(0, 0) / count));
  });
}

Var mean_rows(const Var& a) {
  if (a.rows() == 0) throw Error(ErrorCode::ShapeMismatch, "mean_rows of an empty matrix");
  const double count = static_cast<double>(a.rows());
  return make_result(a.value().colwise().mean(), {a}, [count](Node& n) {
    Node& x = in(n, 0);
    x.accumulate(n.grad.replicate(x.value.rows(), 1) / count);
  });
}

Var normalize_rows(const Var& a) {
  Eigen::VectorXd norms = a.value().rowwise().norm();
  for (Eigen::Index i = 0; i < norms.size(); ++i) {
    if (!(norms[i] > 0.0)) throw Error(ErrorCode::ZeroVector, "normalize_rows: zero row");
  }
  Matrix unit = norms.cwiseInverse().asDiagonal() * a.value();
  return make_result(unit, {a}, [norms](Node& n) {
    const Eigen::VectorXd radial = n.value.cwiseProduct(n.grad).rowwise().sum();
    in(n, 0).accumulate(norms.cwiseInverse().asDiagonal() * (n.grad - radial.asDiagonal() * n.value));
  });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || beta.rows() != 1 || beta.cols() != d) {
    throw Error(ErrorCode::ShapeMismatch, "layer_norm_rows: gamma/beta must be 1 x d");
  }
  const Eigen::VectorXd mu = x.value().rowwise().mean();
  Matrix centered = x.value().colwise() - mu;
  const Eigen::VectorXd inv_std = ((centered.array().square().rowwise().sum() / double(d)) + eps).rsqrt().matrix();
  Matrix xhat = inv_std.asDiagonal() * centered;
  Matrix out = (xhat * gamma.value().row(0).asDiagonal()).rowwise() + beta.value().row(0);
  return make_result(std::move(out), {x, gamma, beta}, [xhat = std::move(xhat), inv_std, d](Node& n) {
    Node& xn = in(n, 0);
    Node& g = in(n, 1);
    Node& b = in(n, 2);
    if (g.requires_grad) g.accumulate((n.grad.cwiseProduct(xhat)).colwise().sum());
    if (b.requires_grad) b.accumulate(n.grad.colwise().sum());
    if (xn.requires_grad) {
      const Matrix dxhat = n.grad * g.value.row(0).asDiagonal();
      const Eigen::VectorXd m1 = dxhat.rowwise().mean();
      const Eigen::VectorXd m2 = (dxhat.cwiseProduct(xhat)).rowwise().mean();
      Matrix dx = dxhat.colwise() - m1;
      dx -= m2.asDiagonal() * xhat;
      xn.accumulate(inv_std.asDiagonal() * dx);
    }
    (void)d;
  });
}

Var group_norm(const Var& x, int batch, int groups, const Var& gamma, const Var& beta, double eps) {
  const Eigen::Index channels = x.rows();
  if (batch <= 0 || x.cols() % batch != 0) throw Error(ErrorCode::ShapeMismatch, "group_norm: columns not divisible by batch");
  if (groups <= 0 || channels % groups != 0) throw Error(ErrorCode::ShapeMismatch, "group_norm: channels not divisible by groups");
  if (gamma.rows() != channels || gamma.cols() != 1 || beta.rows() != channels || beta.cols() != 1) {
    throw Error(ErrorCode::ShapeMismatch, "group_norm: gamma/beta must be C x 1");
  }
  const Eigen::Index pixels = x.cols() / batch;
  const Eigen::Index per_group = channels / groups;
  const double count = static_cast<double>(per_group * pixels);
  Matrix xhat(x.rows(), x.cols());
  Eigen::MatrixXd inv_std(groups, batch);
  for (int b = 0; b < batch; ++b) {
    for (int g = 0; g < groups; ++g) {
      auto block = x.value().block(g * per_group, b * pixels, per_group, pixels);
      const double mu = block.mean();
      const double var = (block.array() - mu).square().sum() / count;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std(g, b) = is;
      xhat.block(g * per_group, b * pixels, per_group, pixels) = (block.array() - mu) * is;
    }
  }
  Matrix out = (gamma.value().col(0).asDiagonal() * xhat).colwise() + beta.value().col(0);
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std, batch, groups, pixels, per_group, count](Node& n) {
                       Node& xn = in(n, 0);
                       Node& gm = in(n, 1);
                       Node& bt = in(n, 2);
                       if (gm.requires_grad) gm.accumulate(n.grad.cwiseProduct(xhat).rowwise().sum());
                       if (bt.requires_grad) bt.accumulate(n.grad.rowwise().sum());
                       if (!xn.requires_grad) return;
                       const Matrix dxhat = gm.value.col(0).asDiagonal() * n.grad;
                       Matrix dx(n.grad.rows(), n.grad.cols());
                       for (int b = 0; b < batch; ++b) {
                         for (int g = 0; g < groups; ++g) {
                           auto dh = dxhat.block(g * per_group, b * pixels, per_group, pixels);
                           auto xh = xhat.block(g * per_group, b * pixels, per_group, pixels);
                           const double m1 = dh.sum() / count;
                           const double m2 = dh.cwiseProduct(xh).sum() / count;
                           dx.block(g * per_group, b * pixels, per_group, pixels) =
                               inv_std(g, b) * (dh.array() - m1 - xh.array() * m2);
                         }
                       }
                       xn.accumulate(dx);
                     });
}

Var attention(const Var& q, const Var& k, const Var& v, const Matrix* mask, double scale) {
  if (q.cols() != k.cols()) throw Error(ErrorCode::ShapeMismatch, "attention: query/key widths differ");
  if (k.rows() != v.rows()) throw Error(ErrorCode::ShapeMismatch, "attention: key/value counts differ");
  if (mask && (mask->rows() != q.rows() || mask->cols() != k.rows())) {
    throw Error(ErrorCode::ShapeMismatch, "attention: mask must be queries x keys");
  }
  Matrix logits = (q.value() * k.value().transpose()) * scale;
  if (mask) logits += *mask;
  const Eigen::VectorXd mx = logits.rowwise().maxCoeff();
  Matrix p = (logits.colwise() - mx).array().exp().matrix();
  const Eigen::VectorXd z = p.rowwise().sum();
  p = z.cwiseInverse().asDiagonal() * p;
  Matrix out = p * v.value();
  return make_result(std::move(out), {q, k, v}, [p = std::move(p), scale](Node& n) {
    Node& qn = in(n, 0);
    Node& kn = in(n, 1);
    Node& vn = in(n, 2);
    if (vn.requires_grad) vn.accumulate(p.transpose() * n.grad);
    if (!qn.requires_grad && !kn.requires_grad) return;
    const Matrix dp = n.grad * vn.value.transpose();
    const Eigen::VectorXd rowdot = p.cwiseProduct(dp).rowwise().sum();
    const Matrix dlogits = (p.array() * (dp.colwise() - rowdot).array()).matrix() * scale;
    if (qn.requires_grad) qn.accumulate(dlogits * kn.value);
    if (kn.requires_grad) kn.accumulate(dlogits.transpose() * qn.value);
  });
}

namespace {

// (C*k*k) x (B*H*W) patch matrix, zero padding, stride 1.
Matrix im2col(const Matrix& x, int batch, int height, int width, int kernel) {
  const int pad = kernel / 2;
  const Eigen::Index channels = x.rows();
  const Eigen::Index pixels = Eigen::Index(height) * width;
  Matrix colsm = Matrix::Zero(channels * kernel * kernel, batch * pixels);
  for (int b = 0; b < batch; ++b) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const Eigen::Index row0 = (Eigen::Index(ky) * kernel + kx) * channels;
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          for (int xx = 0; xx < width; ++xx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= width) continue;
            colsm.block(row0, b * pixels + Eigen::Index(y) * width + xx, channels, 1) =
                x.col(b * pixels + Eigen::Index(sy) * width + sx);
          }
        }
      }
    }
  }
  return colsm;
}

Matrix col2im(const Matrix& colsm, Eigen::Index channels, int batch, int height, int width, int kernel) {
  const int pad = kernel / 2;
  const Eigen::Index pixels = Eigen::Index(height) * width;
  Matrix x = Matrix::Zero(channels, batch * pixels);
  for (int b = 0; b < batch; ++b) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const Eigen::Index row0 = (Eigen::Index(ky) * kernel + kx) * channels;
        for (int y = 0; y < height; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= height) continue;
          for (int xx = 0; xx < width; ++xx) {
            const int sx = xx + kx - pad;
            if (sx < 0 || sx >= width) continue;
            x.col(b * pixels + Eigen::Index(sy) * width + sx) +=
                colsm.block(row0, b * pixels + Eigen::Index(y) * width + xx, channels, 1);
          }
        }
      }
    }
  }
  return x;
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int batch, int height, int width, int kernel) {
  const Eigen::Index channels = x.rows();
  if (x.cols() != Eigen::Index(batch) * height * width) throw Error(ErrorCode::ShapeMismatch, "conv2d: input size");
  if (weight.cols() != channels * kernel * kernel) throw Error(ErrorCode::ShapeMismatch, "conv2d: weight width");
  if (bias.rows() != weight.rows() || bias.cols() != 1) throw Error(ErrorCode::ShapeMismatch, "conv2d: bias shape");
  if (kernel == 1) {
    return add_col(matmul(weight, x), bias);
  }
  Matrix patches = im2col(x.value(), batch, height, width, kernel);
  Matrix out = weight.value() * patches;
  out.colwise() += bias.value().col(0);
  return make_result(std::move(out), {x, weight, bias},
                     [patches = std::move(patches), channels, batch, height, width, kernel](Node& n) {
                       Node& xn = in(n, 0);
                       Node& wn = in(n, 1);
                       Node& bn = in(n, 2);
                       if (wn.requires_grad) wn.accumulate(n.grad * patches.transpose());
                       if (bn.requires_grad) bn.accumulate(n.grad.rowwise().sum());
                       if (xn.requires_grad) {
                         xn.accumulate(col2im(wn.value.transpose() * n.grad, channels, batch, height, width, kernel));
                       }
                     });
}

Var avg_pool2(const Var& x, int batch, int height, int width) {
  if (height % 2 || width % 2) throw Error(ErrorCode::ShapeMismatch, "avg_pool2: odd spatial size");
  const int oh = height / 2;
  const int ow = width / 2;
  const Eigen::Index in_pixels = Eigen::Index(height) * width;
  const Eigen::Index out_pixels = Eigen::Index(oh) * ow;
  Matrix out = Matrix::Zero(x.rows(), batch * out_pixels);
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < height; ++y)
      for (int xx = 0; xx < width; ++xx)
        out.col(b * out_pixels + Eigen::Index(y / 2) * ow + xx / 2) +=
            0.25 * x.value().col(b * in_pixels + Eigen::Index(y) * width + xx);
  return make_result(std::move(out), {x}, [=](Node& n) {
    Matrix g(n.grad.rows(), Eigen::Index(batch) * in_pixels);
    for (int b = 0; b < batch; ++b)
      for (int y = 0; y < height; ++y)
        for (int xx = 0; xx < width; ++xx)
          g.col(b * in_pixels + Eigen::Index(y) * width + xx) =
              0.25 * n.grad.col(b * out_pixels + Eigen::Index(y / 2) * ow + xx / 2);
    in(n, 0).accumulate(g);
  });
}

Var upsample2(const Var& x, int batch, int height, int width) {
  const int oh = height * 2;
  const int ow = width * 2;
  const Eigen::Index in_pixels = Eigen::Index(height) * width;
  const Eigen::Index out_pixels = Eigen::Index(oh) * ow;
  Matrix out(x.rows(), batch * out_pixels);
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx)
        out.col(b * out_pixels + Eigen::Index(y) * ow + xx) = x.value().col(b * in_pixels + Eigen::Index(y / 2) * width + xx / 2);
  return make_result(std::move(out), {x}, [=](Node& n) {
    Matrix g = Matrix::Zero(n.grad.rows(), Eigen::Index(batch) * in_pixels);
    for (int b = 0; b < batch; ++b)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          g.col(b * in_pixels + Eigen::Index(y / 2) * width + xx / 2) += n.grad.col(b * out_pixels + Eigen::Index(y) * ow + xx);
    in(n, 0).accumulate(g);
  });
}

Var add_per_image(const Var& x, const Var& e, int pixels_per_image) {
  const Eigen::Index batch = e.cols();
  if (e.rows() != x.rows() || x.cols() != batch * pixels_per_image) {
    throw Error(ErrorCode::ShapeMismatch, "add_per_image: shape mismatch");
  }
  Matrix out = x.value();
  for (Eigen::Index b = 0; b < batch; ++b) out.middleCols(b * pixels_per_image, pixels_per_image).colwise() += e.value().col(b);
  return make_result(std::move(out), {x, e}, [batch, pixels_per_image](Node& n) {
    in(n, 0).accumulate(n.grad);
    Node& en = in(n, 1);
    if (!en.requires_grad) return;
    Matrix g(n.grad.rows(), batch);
    for (Eigen::Index b = 0; b < batch; ++b) g.col(b) = n.grad.middleCols(b * pixels_per_image, pixels_per_image).rowwise().sum();
    en.accumulate(g);
  });
}

Var mse(const Var& a, const Matrix& target) {
  require_same_shape(a.value(), target, "mse");
  Matrix diff = a.value() - target;
  const double count = static_cast<double>(diff.size());
  const double value = diff.squaredNorm() / count;
  return make_result(Matrix::Constant(1, 1, value), {a}, [diff = std::move(diff), count](Node& n) {
    in(n, 0).accumulate(diff * (2.0 * n.grad(0, 0) / count));
  });
}

Var l1(const Var& a, const Matrix& target) {
  require_same_shape(a.value(), target, "l1");
  Matrix diff = a.value() - target;
  const double count = static_cast<double>(diff.size());
  const double value = diff.cwiseAbs().sum() / count;
  return make_result(Matrix::Constant(1, 1, value), {a}, [diff = std::move(diff), count](Node& n) {
    in(n, 0).accumulate(diff.unaryExpr([](double v) { return double((v > 0) - (v < 0)); }) * (n.grad(0, 0) / count));
  });
}

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows() || targets.empty()) {
    throw Error(ErrorCode::ShapeMismatch, "softmax_cross_entropy: one target per row required");
  }
  const Matrix& z = logits.value();
  const Eigen::VectorXd mx = z.rowwise().maxCoeff();
  Matrix p = (z.colwise() - mx).array().exp().matrix();
  const Eigen::VectorXd s = p.rowwise().sum();
  p = s.cwiseInverse().asDiagonal() * p;
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    if (targets[i] < 0 || targets[i] >= z.cols()) throw Error(ErrorCode::ShapeMismatch, "softmax_cross_entropy: bad target");
    loss += mx[r] + std::log(s[r]) - z(r, targets[i]);
  }
  const double count = static_cast<double>(targets.size());
  return make_result(Matrix::Constant(1, 1, loss / count), {logits}, [p = std::move(p), targets, count](Node& n) {
    Matrix g = p;
    for (std::size_t i = 0; i < targets.size(); ++i) g(static_cast<Eigen::Index>(i), targets[i]) -= 1.0;
    in(n, 0).accumulate(g * (n.grad(0, 0) / count));
  });
}

Var bce_with_logits(const Var& logits, const Matrix& targets) {
  require_same_shape(logits.value(), targets, "bce_with_logits");
  const Matrix& z = logits.value();
  // max(z,0) - z*t + log(1 + exp(-|z|))
  const Matrix per = (z.cwiseMax(0.0).array() - z.array() * targets.array() + (-z.cwiseAbs().array()).exp().log1p()).matrix();
  const double count = static_cast<double>(z.size());
  Matrix s = (1.0 / (1.0 + (-z.array()).exp())).matrix();
  return make_result(Matrix::Constant(1, 1, per.sum() / count), {logits}, [s = std::move(s), targets, count](Node& n) {
    in(n, 0).accumulate((s - targets) * (n.grad(0, 0) / count));
  });
}

}  // namespace learn::ag

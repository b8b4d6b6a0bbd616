#pragma once

// Training objectives over embedding matrices (one embedding per row).
// Every differentiable loss comes in a value-only form and a *_grad form
// returning the value together with analytic gradients with respect to
// each input matrix.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "learn/encoders.hpp"
#include "learn/error.hpp"
#include "learn/layout.hpp"
#include "learn/random.hpp"

namespace learn {

template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct LossConfig {
  double tau = 0.07;
  double lambda_align = 1.0;
  double lambda_laycontrast = 0.5;
  double lambda_semantic = 1.0;
  double lambda_intra = 0.36;
  double augment_mask_prob = 0.1;
  double augment_dropout = 0.1;

  void validate() const {
    if (!(tau > 0.0)) throw Error(ErrorCode::InvalidConfig, "loss.tau must be > 0");
    for (double w : {lambda_align, lambda_laycontrast, lambda_semantic, lambda_intra}) {
      if (!(w >= 0.0)) throw Error(ErrorCode::InvalidConfig, "loss weights must be >= 0");
    }
    for (double p : {augment_mask_prob, augment_dropout}) {
      if (!(p >= 0.0 && p < 1.0)) throw Error(ErrorCode::InvalidConfig, "augmentation probabilities must lie in [0, 1)");
    }
  }
};

namespace detail {

template <typename Scalar>
MatX<Scalar> normalize_rows(const MatX<Scalar>& m, VecX<Scalar>* norms = nullptr) {
  VecX<Scalar> n = m.rowwise().norm();
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    if (!(n[i] > Scalar(0))) throw Error(ErrorCode::ZeroVector, "row " + std::to_string(i) + " is a zero vector");
  }
  if (norms) *norms = n;
  return n.cwiseInverse().asDiagonal() * m;
}

// Backward through row normalisation: given dL/d(unit rows), return
// dL/d(raw rows).
template <typename Scalar>
MatX<Scalar> normalize_rows_backward(const MatX<Scalar>& unit, const VecX<Scalar>& norms, const MatX<Scalar>& grad_unit) {
  const VecX<Scalar> radial = (unit.cwiseProduct(grad_unit)).rowwise().sum();
  return norms.cwiseInverse().asDiagonal() * (grad_unit - radial.asDiagonal() * unit);
}

template <typename Scalar>
MatX<Scalar> softmax_rows(const MatX<Scalar>& logits) {
  MatX<Scalar> p = (logits.colwise() - logits.rowwise().maxCoeff()).array().exp().matrix();
  return p.array().colwise() / p.rowwise().sum().array();
}

template <typename Scalar>
VecX<Scalar> logsumexp_rows(const MatX<Scalar>& logits) {
  const VecX<Scalar> mx = logits.rowwise().maxCoeff();
  return mx + ((logits.colwise() - mx).array().exp().rowwise().sum().log()).matrix();
}

}  // namespace detail

/// Stack embeddings as the rows of a matrix.
inline Eigen::MatrixXd stack_rows(const std::vector<Embedding>& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != m.cols()) throw Error(ErrorCode::DimensionMismatch, "embeddings differ in dimension");
    m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  }
  return m;
}

template <typename Scalar>
Scalar cosine_similarity(const VecX<Scalar>& a, const VecX<Scalar>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::DimensionMismatch, "cosine of vectors with different dimension");
  const Scalar na = a.norm();
  const Scalar nb = b.norm();
  if (!(na > Scalar(0)) || !(nb > Scalar(0))) throw Error(ErrorCode::ZeroVector, "cosine of a zero vector");
  using std::clamp;
  return std::clamp<Scalar>(a.dot(b) / (na * nb), Scalar(-1), Scalar(1));
}

template <typename Scalar>
struct PairLoss {
  Scalar value{};
  MatX<Scalar> grad_first;
  MatX<Scalar> grad_second;
};

template <typename Scalar>
struct SingleLoss {
  Scalar value{};
  MatX<Scalar> grad;
};

/// Token-level InfoNCE between layout tokens l_i and region embeddings v_i
/// (row i of each matrix forms the positive pair).
template <typename Scalar>
PairLoss<Scalar> token_alignment_loss_grad(const MatX<Scalar>& l, const MatX<Scalar>& v, Scalar tau) {
  if (l.rows() != v.rows()) throw Error(ErrorCode::MismatchedLengths, "layout and region counts differ");
  if (l.rows() == 0) throw Error(ErrorCode::MismatchedLengths, "token alignment needs at least one pair");
  if (l.cols() != v.cols()) throw Error(ErrorCode::DimensionMismatch, "layout and region dimensions differ");
  const auto n = static_cast<Scalar>(l.rows());
  VecX<Scalar> nl, nv;
  const MatX<Scalar> lu = detail::normalize_rows(l, &nl);
  const MatX<Scalar> vu = detail::normalize_rows(v, &nv);
  const MatX<Scalar> logits = (lu * vu.transpose()) / tau;

  PairLoss<Scalar> out;
  out.value = (detail::logsumexp_rows(logits) - logits.diagonal()).sum() / n;
  MatX<Scalar> g = detail::softmax_rows(logits);
  g.diagonal().array() -= Scalar(1);
  g /= (n * tau);
  out.grad_first = detail::normalize_rows_backward<Scalar>(lu, nl, g * vu);
  out.grad_second = detail::normalize_rows_backward<Scalar>(vu, nv, g.transpose() * lu);
  return out;
}

template <typename Scalar>
Scalar token_alignment_loss(const MatX<Scalar>& l, const MatX<Scalar>& v, Scalar tau) {
  return token_alignment_loss_grad(l, v, tau).value;
}

/// Same objective evaluated on a precomputed similarity matrix.
template <typename Scalar>
Scalar token_alignment_loss_from_similarity(const MatX<Scalar>& sim, Scalar tau) {
  const MatX<Scalar> logits = sim / tau;
  return (detail::logsumexp_rows(logits) - logits.diagonal()).sum() / static_cast<Scalar>(sim.rows());
}

/// Batch-level contrastive loss over global layout embeddings l_k and their
/// augmented views l_k^+. The denominator enumerates every anchor l_m,
/// m = 1..B (k included), and the result is averaged over B.
template <typename Scalar>
PairLoss<Scalar> layout_contrastive_loss_grad(const MatX<Scalar>& anchors, const MatX<Scalar>& positives, Scalar tau) {
  if (anchors.rows() != positives.rows()) throw Error(ErrorCode::MismatchedLengths, "anchor and positive counts differ");
  if (anchors.rows() == 0) throw Error(ErrorCode::MismatchedLengths, "contrastive loss needs a non-empty batch");
  if (anchors.cols() != positives.cols()) throw Error(ErrorCode::DimensionMismatch, "anchor and positive dimensions differ");
  const auto b = static_cast<Scalar>(anchors.rows());
  VecX<Scalar> na, np;
  const MatX<Scalar> au = detail::normalize_rows(anchors, &na);
  const MatX<Scalar> pu = detail::normalize_rows(positives, &np);
  const MatX<Scalar> logits = (au * au.transpose()) / tau;
  const VecX<Scalar> pos = (au.cwiseProduct(pu)).rowwise().sum() / tau;

  PairLoss<Scalar> out;
  out.value = (detail::logsumexp_rows(logits) - pos).sum() / b;
  const MatX<Scalar> g = detail::softmax_rows(logits) / (b * tau);
  const Scalar gpos = Scalar(-1) / (b * tau);
  const MatX<Scalar> grad_au = (g + g.transpose()) * au + gpos * pu;
  const MatX<Scalar> grad_pu = gpos * au;
  out.grad_first = detail::normalize_rows_backward<Scalar>(au, na, grad_au);
  out.grad_second = detail::normalize_rows_backward<Scalar>(pu, np, grad_pu);
  return out;
}

template <typename Scalar>
Scalar layout_contrastive_loss(const MatX<Scalar>& anchors, const MatX<Scalar>& positives, Scalar tau) {
  return layout_contrastive_loss_grad(anchors, positives, tau).value;
}

/// Mean (1 - cos) over all ordered pairs of one concept's embeddings,
/// diagonal included.
template <typename Scalar>
SingleLoss<Scalar> intra_concept_loss_grad(const MatX<Scalar>& members) {
  if (members.rows() == 0) throw Error(ErrorCode::MismatchedLengths, "intra-concept loss needs at least one embedding");
  const auto m = static_cast<Scalar>(members.rows());
  VecX<Scalar> norms;
  const MatX<Scalar> u = detail::normalize_rows(members, &norms);
  const VecX<Scalar> total = u.colwise().sum().transpose();
  SingleLoss<Scalar> out;
  // sum_ij u_i.u_j = |sum_i u_i|^2
  out.value = Scalar(1) - total.squaredNorm() / (m * m);
  const MatX<Scalar> grad_u = (Scalar(-2) / (m * m)) * VecX<Scalar>::Ones(members.rows()) * total.transpose();
  out.grad = detail::normalize_rows_backward<Scalar>(u, norms, grad_u);
  return out;
}

template <typename Scalar>
Scalar intra_concept_loss(const MatX<Scalar>& members) {
  return intra_concept_loss_grad(members).value;
}

template <typename Scalar>
Scalar combined_layout_loss(Scalar laycontrast, Scalar intra, const LossConfig& cfg) {
  return laycontrast + static_cast<Scalar>(cfg.lambda_intra) * intra;
}

/// 1 - cos(text, image) with gradients for both embeddings (as 1 x d rows).
template <typename Scalar>
PairLoss<Scalar> semantic_alignment_loss_grad(const VecX<Scalar>& text, const VecX<Scalar>& image) {
  if (text.size() != image.size()) throw Error(ErrorCode::DimensionMismatch, "text and image embeddings differ in dimension");
  VecX<Scalar> nt, ni;
  const MatX<Scalar> tu = detail::normalize_rows<Scalar>(text.transpose(), &nt);
  const MatX<Scalar> iu = detail::normalize_rows<Scalar>(image.transpose(), &ni);
  PairLoss<Scalar> out;
  out.value = Scalar(1) - (tu.cwiseProduct(iu)).sum();
  out.grad_first = detail::normalize_rows_backward<Scalar>(tu, nt, -iu);
  out.grad_second = detail::normalize_rows_backward<Scalar>(iu, ni, -tu);
  return out;
}

template <typename Scalar>
Scalar semantic_alignment_loss(const VecX<Scalar>& text, const VecX<Scalar>& image) {
  return Scalar(1) - cosine_similarity<Scalar>(text, image);
}

inline double semantic_alignment_loss(const std::string& prompt, const Image& image, const EncoderHandle& enc) {
  return semantic_alignment_loss<double>(encode_text(enc, prompt), encode_image(enc, image));
}

/// Multiplier vector for one augmented view: coordinates are masked with
/// probability mask_prob, then dropped with probability dropout and the
/// survivors rescaled by 1/(1-dropout).
inline Eigen::VectorXd augmentation_mask(Eigen::Index dim, const LossConfig& cfg, Rng& rng) {
  Eigen::VectorXd m = Eigen::VectorXd::Ones(dim);
  for (Eigen::Index i = 0; i < dim; ++i) {
    if (rng.bernoulli(cfg.augment_mask_prob)) m[i] = 0.0;
  }
  const double keep = 1.0 - cfg.augment_dropout;
  for (Eigen::Index i = 0; i < dim; ++i) {
    const bool drop = rng.bernoulli(cfg.augment_dropout);
    m[i] = drop ? 0.0 : m[i] / keep;
  }
  return m;
}

inline constexpr int kAugmentAttempts = 8;

/// Draws a mask for `l` whose product with `l` is non-zero, resampling up to
/// kAugmentAttempts times.
inline Eigen::VectorXd draw_nonvanishing_mask(const Embedding& l, const LossConfig& cfg, Rng& rng) {
  for (int attempt = 0; attempt < kAugmentAttempts; ++attempt) {
    Eigen::VectorXd m = augmentation_mask(l.size(), cfg, rng);
    if (l.cwiseProduct(m).squaredNorm() > 0.0) return m;
  }
  throw Error(ErrorCode::AllMasked, "augmentation zeroed every coordinate " + std::to_string(kAugmentAttempts) + " times");
}

/// l^+ = normalize(l * mask), deterministic in `seed`.
inline Embedding augment_layout_embedding(const Embedding& l, const LossConfig& cfg, std::uint64_t seed) {
  if (l.size() == 0 || !l.allFinite()) throw Error(ErrorCode::ZeroVector, "cannot augment an empty or non-finite embedding");
  if (cfg.augment_mask_prob == 0.0 && cfg.augment_dropout == 0.0) return l;
  Rng rng(seed);
  const Eigen::VectorXd m = draw_nonvanishing_mask(l, cfg, rng);
  const Eigen::VectorXd masked = l.cwiseProduct(m);
  return masked / masked.norm();
}

}  // namespace learn

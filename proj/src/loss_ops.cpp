#include "learn/loss_ops.hpp"

namespace learn::ag {

Var token_alignment(const Var& layout_tokens, const Var& regions, double tau) {
  auto r = token_alignment_loss_grad<double>(layout_tokens.value(), regions.value(), tau);
  return make_result(Matrix::Constant(1, 1, r.value), {layout_tokens, regions},
                     [gl = std::move(r.grad_first), gv = std::move(r.grad_second)](Node& n) {
                       n.inputs[0]->accumulate(gl * n.grad(0, 0));
                       n.inputs[1]->accumulate(gv * n.grad(0, 0));
                     });
}

Var layout_contrastive(const Var& anchors, const Var& positives, double tau) {
  auto r = layout_contrastive_loss_grad<double>(anchors.value(), positives.value(), tau);
  return make_result(Matrix::Constant(1, 1, r.value), {anchors, positives},
                     [ga = std::move(r.grad_first), gp = std::move(r.grad_second)](Node& n) {
                       n.inputs[0]->accumulate(ga * n.grad(0, 0));
                       n.inputs[1]->accumulate(gp * n.grad(0, 0));
                     });
}

Var intra_concept(const Var& members) {
  auto r = intra_concept_loss_grad<double>(members.value());
  return make_result(Matrix::Constant(1, 1, r.value), {members},
                     [g = std::move(r.grad)](Node& n) { n.inputs[0]->accumulate(g * n.grad(0, 0)); });
}

Var semantic_alignment(const Matrix& text_embeddings, const Var& image_embeddings) {
  if (text_embeddings.rows() != image_embeddings.rows()) {
    throw Error(ErrorCode::MismatchedLengths, "one text embedding per image embedding required");
  }
  const Eigen::Index count = image_embeddings.rows();
  double total = 0.0;
  Matrix grad(image_embeddings.rows(), image_embeddings.cols());
  for (Eigen::Index i = 0; i < count; ++i) {
    auto r = semantic_alignment_loss_grad<double>(text_embeddings.row(i).transpose(),
                                                  image_embeddings.value().row(i).transpose());
    total += r.value;
    grad.row(i) = r.grad_second.row(0);
  }
  const double inv = 1.0 / static_cast<double>(count);
  return make_result(Matrix::Constant(1, 1, total * inv), {image_embeddings},
                     [g = std::move(grad), inv](Node& n) { n.inputs[0]->accumulate(g * (inv * n.grad(0, 0))); });
}

}  // namespace learn::ag

#pragma once

// Autograd nodes for the contrastive objectives. Forward values and
// gradients come from the analytic forms in losses.hpp.

#include "learn/autograd.hpp"
#include "learn/losses.hpp"

namespace learn::ag {

Var token_alignment(const Var& layout_tokens, const Var& regions, double tau);
Var layout_contrastive(const Var& anchors, const Var& positives, double tau);
Var intra_concept(const Var& members);
/// 1 - cos between a constant text embedding (1 x d) and image embeddings;
/// averaged over rows of `image_embeddings`.
Var semantic_alignment(const Matrix& text_embeddings, const Var& image_embeddings);

}  // namespace learn::ag

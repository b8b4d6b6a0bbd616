#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "learn/diffusion.hpp"
#include "learn/image.hpp"
#include "learn/layout.hpp"

namespace learn {

struct PromptModulator {
  Embedding positive;
  Embedding negative;
  double alpha = 0.0;
  double beta = 0.0;
};

/// normalize(e + alpha * positive - beta * negative).
Embedding apply_prompt_modulation(const Embedding& e, const PromptModulator& m);

struct ClarityWeights {
  double luminance_variance = 0.5;
  double edge_clutter = 0.5;
};

double clarity_score(const Image& image, const ClarityWeights& w);

/// Renders one image for (candidate embedding, seed).
using CandidateRenderer = std::function<Image(const Embedding& candidate, std::uint64_t seed)>;

struct BackgroundSelection {
  std::size_t best_index = 0;
  Embedding best;
  std::vector<double> scores;  // mean clarity score per candidate, lower is better
};

BackgroundSelection select_background_pseudo_prompt(const std::vector<Embedding>& candidates,
                                                    const CandidateRenderer& render,
                                                    const std::vector<std::uint64_t>& seeds,
                                                    const ClarityWeights& weights = {});

/// Renders candidates with the generator, each passed as an extra global
/// conditioning token alongside the layout.
BackgroundSelection select_background_pseudo_prompt(const std::vector<Embedding>& candidates,
                                                    const GeneratorModel& model, const Layout& layout,
                                                    const EncoderHandle& enc, const std::vector<std::uint64_t>& seeds,
                                                    int num_steps, const ClarityWeights& weights = {});

}  // namespace learn

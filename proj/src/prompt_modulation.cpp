#include "learn/prompt_modulation.hpp"

#include "learn/error.hpp"
#include "learn/metrics.hpp"

namespace learn {

Embedding apply_prompt_modulation(const Embedding& e, const PromptModulator& m) {
  if (m.alpha < 0.0 || m.beta < 0.0) throw Error(ErrorCode::OutOfRange, "modulation weights must be >= 0");
  Embedding out = e;
  if (m.alpha != 0.0) {
    if (m.positive.size() != e.size()) throw Error(ErrorCode::DimensionMismatch, "positive embedding dimension differs");
    out += m.alpha * m.positive;
  }
  if (m.beta != 0.0) {
    if (m.negative.size() != e.size()) throw Error(ErrorCode::DimensionMismatch, "negative embedding dimension differs");
    out -= m.beta * m.negative;
  }
  const double n = out.norm();
  if (!(n > 0.0)) throw Error(ErrorCode::ZeroVector, "modulated embedding vanished");
  return out / n;
}

double clarity_score(const Image& image, const ClarityWeights& w) {
  const Clarity c = clarity_metrics(image);
  return w.luminance_variance * c.luminance_variance + w.edge_clutter * c.edge_clutter;
}

BackgroundSelection select_background_pseudo_prompt(const std::vector<Embedding>& candidates,
                                                    const CandidateRenderer& render,
                                                    const std::vector<std::uint64_t>& seeds,
                                                    const ClarityWeights& weights) {
  if (candidates.empty()) throw Error(ErrorCode::EmptyCandidates, "no background candidates given");
  if (seeds.empty()) throw Error(ErrorCode::InvalidConfig, "at least one seed is required");
  BackgroundSelection sel;
  for (const auto& c : candidates) {
    double total = 0.0;
    for (std::uint64_t s : seeds) total += clarity_score(render(c, s), weights);
    sel.scores.push_back(total / static_cast<double>(seeds.size()));
  }
  for (std::size_t i = 1; i < sel.scores.size(); ++i) {
    if (sel.scores[i] < sel.scores[sel.best_index]) sel.best_index = i;
  }
  sel.best = candidates[sel.best_index];
  return sel;
}

BackgroundSelection select_background_pseudo_prompt(const std::vector<Embedding>& candidates,
                                                    const GeneratorModel& model, const Layout& layout,
                                                    const EncoderHandle& enc, const std::vector<std::uint64_t>& seeds,
                                                    int num_steps, const ClarityWeights& weights) {
  const CandidateRenderer render = [&](const Embedding& c, std::uint64_t seed) {
    SamplerOptions opt;
    opt.extra_tokens = {c};
    return generate(model, layout, enc, seed, num_steps, opt);
  };
  return select_background_pseudo_prompt(candidates, render, seeds, weights);
}

}  // namespace learn

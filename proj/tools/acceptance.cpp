// Acceptance run: one PASS/FAIL line per criterion. Exit code is the
// number of failed criteria (capped at 1).

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <unistd.h>

#include "learn/caption2layout.hpp"
#include "learn/dataset.hpp"
#include "learn/diffusion.hpp"
#include "learn/losses.hpp"
#include "learn/metrics.hpp"
#include "learn/random.hpp"
#include "learn/traversal.hpp"

using namespace learn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

// ---------------------------------------------------------------- losses

Outcome loss_oracles() {
  const Eigen::MatrixXd sim = Eigen::MatrixXd::Identity(2, 2);
  const double a = token_alignment_loss_from_similarity<double>(sim, 1.0);
  const double expect_a = std::log(1.0 + std::exp(-1.0));

  const int n = 5;
  const double u = token_alignment_loss_from_similarity<double>(Eigen::MatrixXd::Constant(n, n, 0.3), 0.07);

  Eigen::MatrixXd ortho(2, 3);
  ortho << 1, 0, 0, 0, 1, 0;
  const double intra = intra_concept_loss<double>(ortho);

  const double combined = combined_layout_loss<double>(0.5, 0.5, LossConfig{});

  const bool ok = std::abs(a - 0.313262) < 1e-6 && std::abs(a - expect_a) < 1e-12 &&
                  std::abs(u - std::log(double(n))) < 1e-9 && intra == 0.5 && std::abs(combined - 0.68) < 1e-12;
  return {ok, "align=" + fmt(a, 9) + " uniform=" + fmt(u, 12) + " intra=" + fmt(intra) + " combined=" + fmt(combined)};
}

double relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

// Central differences of f with respect to every entry of x.
Eigen::MatrixXd numeric_grad(const std::function<double(const Eigen::MatrixXd&)>& f, Eigen::MatrixXd x,
                             double h = 1e-4) {
  Eigen::MatrixXd g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = f(x);
    x.data()[i] = keep - h;
    const double down = f(x);
    x.data()[i] = keep;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

Outcome gradient_checks() {
  Rng rng(2024);
  double worst[4] = {0, 0, 0, 0};
  for (int point = 0; point < 20; ++point) {
    const int rows = rng.uniform_int(2, 6);
    const int dim = rng.uniform_int(3, 10);
    const double tau = rng.uniform(0.07, 1.0);
    const Eigen::MatrixXd a = rng.normal_matrix(rows, dim);
    const Eigen::MatrixXd b = rng.normal_matrix(rows, dim);

    const auto ta = token_alignment_loss_grad<double>(a, b, tau);
    worst[0] = std::max({worst[0],
                         relative_error(ta.grad_first, numeric_grad([&](const auto& x) { return token_alignment_loss<double>(x, b, tau); }, a)),
                         relative_error(ta.grad_second, numeric_grad([&](const auto& x) { return token_alignment_loss<double>(a, x, tau); }, b))});

    const auto lc = layout_contrastive_loss_grad<double>(a, b, tau);
    worst[1] = std::max({worst[1],
                         relative_error(lc.grad_first, numeric_grad([&](const auto& x) { return layout_contrastive_loss<double>(x, b, tau); }, a)),
                         relative_error(lc.grad_second, numeric_grad([&](const auto& x) { return layout_contrastive_loss<double>(a, x, tau); }, b))});

    const auto ic = intra_concept_loss_grad<double>(a);
    worst[2] = std::max(worst[2], relative_error(ic.grad, numeric_grad([](const auto& x) { return intra_concept_loss<double>(x); }, a)));

    const Eigen::VectorXd t = a.row(0).transpose(), im = b.row(0).transpose();
    const auto sa = semantic_alignment_loss_grad<double>(t, im);
    auto as_vec = [](const Eigen::MatrixXd& x) { return Eigen::VectorXd(x.row(0).transpose()); };
    worst[3] = std::max({worst[3],
                         relative_error(sa.grad_first, numeric_grad([&](const auto& x) { return semantic_alignment_loss<double>(as_vec(x), im); }, t.transpose())),
                         relative_error(sa.grad_second, numeric_grad([&](const auto& x) { return semantic_alignment_loss<double>(t, as_vec(x)); }, im.transpose()))});
  }
  const bool ok = std::all_of(std::begin(worst), std::end(worst), [](double w) { return w < 1e-4; });
  return {ok, "max rel err token=" + fmt(worst[0], 3) + " contrastive=" + fmt(worst[1], 3) + " intra=" + fmt(worst[2], 3) +
                  " semantic=" + fmt(worst[3], 3)};
}

// ------------------------------------------------------------------ mask

Layout random_layout(Rng& rng, int max_elements) {
  Layout l;
  const int n = rng.uniform_int(1, max_elements);
  for (int i = 0; i < n; ++i) {
    const double x = rng.uniform(0.0, 0.8), y = rng.uniform(0.0, 0.8);
    const double w = rng.uniform(0.05, 1.0 - x), h = rng.uniform(0.05, 1.0 - y);
    l.elements.push_back({"ball", validate_box(x, y, w, h)});
  }
  return l;
}

Outcome mask_semantics() {
  Rng rng(77);
  double worst_sum = 0.0, worst_dominant = 0.0, worst_null = 0.0;
  int dominant_cells = 0, uncovered_cells = 0;
  for (int res : {4, 8, 16}) {
    for (int trial = 0; trial < 30; ++trial) {
      const Layout layout = random_layout(rng, 5);
      const AttentionMask mask = build_attention_mask(layout, res);
      const auto tokens = mask.values.cols();
      const auto cells = mask.values.rows();
      // One-hot keys make each output row equal to that row's attention weights.
      const Eigen::MatrixXd keys = Eigen::MatrixXd::Identity(tokens, tokens);
      const double scale = std::sqrt(static_cast<double>(tokens));

      const Eigen::MatrixXd noise_q = rng.normal_matrix(cells, tokens, 3.0);
      const Eigen::MatrixXd w_random = masked_cross_attention(noise_q, keys, mask);
      worst_sum = std::max(worst_sum, (w_random.rowwise().sum().array() - 1.0).abs().maxCoeff());

      Eigen::MatrixXd q = Eigen::MatrixXd::Zero(cells, tokens);
      std::vector<int> owner(static_cast<std::size_t>(cells), -1);
      for (Eigen::Index p = 0; p < cells; ++p) {
        int covering = 0, last = -1;
        for (Eigen::Index i = 0; i + 1 < tokens; ++i) {
          if (mask.values(p, i) == 0.0) {
            ++covering;
            last = static_cast<int>(i);
          }
        }
        if (covering == 1) {
          owner[static_cast<std::size_t>(p)] = last;
          // Logit of the owner beats every other token by 30 after scaling.
          q.row(p) = rng.normal_matrix(1, tokens, 0.1);
          q(p, last) = q.row(p).maxCoeff() + 30.0 * scale + 1.0;
        } else if (covering == 0) {
          owner[static_cast<std::size_t>(p)] = -2;
          q.row(p) = rng.normal_matrix(1, tokens, 5.0);
        }
      }
      const Eigen::MatrixXd w = masked_cross_attention(q, keys, mask);
      for (Eigen::Index p = 0; p < cells; ++p) {
        const int o = owner[static_cast<std::size_t>(p)];
        if (o >= 0) {
          worst_dominant = std::max(worst_dominant, 1.0 - w(p, o));
          ++dominant_cells;
        } else if (o == -2) {
          worst_null = std::max(worst_null, 1.0 - w(p, tokens - 1));
          ++uncovered_cells;
        }
      }
    }
  }
  const bool ok = worst_sum <= 1e-6 && worst_dominant <= 1e-6 && worst_null <= 1e-12 && dominant_cells > 0 &&
                  uncovered_cells > 0;
  return {ok, "row-sum dev=" + fmt(worst_sum, 3) + " dominant deficit=" + fmt(worst_dominant, 3) + " (" +
                  std::to_string(dominant_cells) + " cells) null deficit=" + fmt(worst_null, 3) + " (" +
                  std::to_string(uncovered_cells) + " cells)"};
}

// ---------------------------------------------------------------- models

struct DeskScale {
  int encoder_dim = 64;
  LayoutDecoderConfig decoder() const {
    LayoutDecoderConfig c;
    c.embed_dim = 64;
    c.max_tokens = 8;
    c.num_layers = 2;
    c.num_heads = 4;
    c.memory_tokens = 4;
    return c;
  }
  DiffusionConfig diffusion() const {
    DiffusionConfig c;
    c.unet.base_channels = 16;
    c.unet.layout_dim = 32;
    return c;
  }
};

std::vector<Sample> synthetic(int n, int concepts, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_records = n;
  spec.image_size = 32;
  spec.num_concepts = concepts;
  return generate_synthetic_dataset(spec, seed);
}

OptimizerConfig layout_optimizer(int steps, std::uint64_t seed) {
  OptimizerConfig o;
  o.adamw.lr = 2e-3;
  o.steps = steps;
  o.batch_size = 16;
  o.seed = seed;
  return o;
}

DiffusionTrainConfig diffusion_trainer(int steps, std::uint64_t seed) {
  DiffusionTrainConfig t;
  t.adamw.lr = 4e-3;
  t.steps = steps;
  t.batch_size = 8;
  t.seed = seed;
  return t;
}

Outcome overfit_layout() {
  const DeskScale desk;
  const auto data = synthetic(16, 0, 11);
  const EncoderHandle enc = EncoderHandle::toy(desk.encoder_dim, 0);
  LayoutDecoderModel m(desk.decoder(), enc.text_dim(), enc.image_dim(), 5);
  train_layout_decoder(m, data, enc, LayoutLossWeights{}, layout_optimizer(300, 5));
  double total = 0.0;
  for (const auto& s : data) total += mean_matched_iou(predict_layout(m, s.record.caption, enc).layout, s.record.layout());
  const double iou = total / static_cast<double>(data.size());
  return {iou >= 0.5, "mean matched IoU=" + fmt(iou, 4) + " after 300 steps on 16 records"};
}

Outcome overfit_diffusion() {
  const DeskScale desk;
  const auto data = synthetic(8, 0, 1);
  const EncoderHandle enc = EncoderHandle::toy(desk.encoder_dim, 0);
  GeneratorModel m(desk.diffusion(), enc.text_dim(), 1);
  const double before = evaluate_noise_loss(m, data, enc, 5);
  train_diffusion(m, data, enc, diffusion_trainer(500, 1));
  const double after = evaluate_noise_loss(m, data, enc, 5);
  const Image img = generate(m, data[0].record.layout(), enc, 3, m.config().num_steps);
  const double p = psnr(img, data[0].image);
  const double ratio = after / before;
  return {ratio < 0.2 && p >= 18.0,
          "noise loss " + fmt(before, 4) + " -> " + fmt(after, 4) + " (ratio " + fmt(ratio, 3) + "), PSNR " + fmt(p, 4) + " dB"};
}

// Shapes are drawn in palette colours with at least one dark channel; the
// canvas is white.
std::vector<bool> foreground(const Image& img) {
  std::vector<bool> fg(static_cast<std::size_t>(img.height()) * img.width());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      fg[static_cast<std::size_t>(y) * img.width() + x] = std::min({img(y, x, 0), img(y, x, 1), img(y, x, 2)}) < 0.5;
  return fg;
}

double foreground_iou(const Image& generated, const Image& reference) {
  const auto a = foreground(generated), b = foreground(reference);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double layout_fidelity(const GeneratorModel& m, const std::vector<Sample>& data, const EncoderHandle& enc,
                       std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Image img = generate(m, data[i].record.layout(), enc, mix_seed(seed, i), 50);
    total += foreground_iou(img, data[i].image);
  }
  return total / static_cast<double>(data.size());
}

Outcome ablation(std::ostream& log) {
  const DeskScale desk;
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto data = synthetic(16, 0, 100 + seed);
    const EncoderHandle enc = EncoderHandle::toy(desk.encoder_dim, seed);
    double iou[2] = {0, 0};
    for (int use : {1, 0}) {
      DiffusionConfig cfg = desk.diffusion();
      cfg.use_layout = use == 1;
      GeneratorModel m(cfg, enc.text_dim(), seed);
      train_diffusion(m, data, enc, diffusion_trainer(600, seed));
      iou[use] = layout_fidelity(m, data, enc, seed);
      log << "  ablation seed " << seed << (use ? " full" : " no-layout") << " IoU " << fmt(iou[use], 4) << "\n";
    }
    const double drop = iou[1] - iou[0];
    wins += drop > 0.05;
    detail += " seed" + std::to_string(seed) + ":" + fmt(iou[1], 3) + "/" + fmt(iou[0], 3);
  }
  return {wins >= 2, "full/no-layout IoU" + detail + ", " + std::to_string(wins) + "/3 seeds drop > 0.05"};
}

double intra_inter_margin(const std::vector<Sample>& data, const EncoderHandle& enc, double lambda_intra,
                          std::uint64_t seed) {
  const DeskScale desk;
  LayoutDecoderModel m(desk.decoder(), enc.text_dim(), enc.image_dim(), seed);
  LayoutLossWeights w;
  w.contrastive.lambda_intra = lambda_intra;
  train_layout_decoder(m, data, enc, w, layout_optimizer(300, seed));
  std::map<std::string, std::vector<Embedding>> groups;
  for (const auto& s : data) {
    groups[s.record.concept_tags.front()].push_back(layout_token_embeddings(m, s.record.caption, enc).global);
  }
  const auto stats = intra_concept_similarity_stats(groups);
  return stats.intra_mean - stats.inter_mean.value_or(0.0);
}

Outcome intra_concept_property(std::ostream& log) {
  const DeskScale desk;
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto data = synthetic(32, 4, 200 + seed);
    const EncoderHandle enc = EncoderHandle::toy(desk.encoder_dim, seed);
    const double with = intra_inter_margin(data, enc, 0.36, seed);
    const double without = intra_inter_margin(data, enc, 0.0, seed);
    log << "  intra seed " << seed << " margin with=" << fmt(with, 4) << " without=" << fmt(without, 4) << "\n";
    wins += with >= 0.1 && without < with;
    detail += " seed" + std::to_string(seed) + ":" + fmt(with, 3) + "/" + fmt(without, 3);
  }
  return {wins >= 2, "margin with/without" + detail + ", " + std::to_string(wins) + "/3 seeds hold"};
}

// --------------------------------------------------------------- metrics

Outcome metric_oracles() {
  Rng rng(3);
  const Eigen::MatrixXd feats = rng.normal_matrix(50, 4);
  const double fid_same = fid_score(feats, feats);
  Eigen::MatrixXd shifted = feats;
  shifted.col(0).array() += 1.0;
  const double fid_shift = fid_score(feats, shifted);

  Layout exact;
  exact.elements = {{"ball", validate_box(0.25, 0.25, 0.5, 0.5)}, {"block", validate_box(0.0, 0.0, 0.25, 0.125)}};
  std::vector<RegionMask> refs;
  for (const auto& el : exact.elements) refs.push_back(RegionMask::from_box(el.box, 32, 32, el.label));
  const double sam = sam_iou(exact, refs);

  const double overlap = box_iou(validate_box(0.0, 0.0, 0.5, 0.5), validate_box(0.25, 0.25, 0.5, 0.5));

  const Clarity flat = clarity_metrics(Image(16, 16, 0.4));
  Image split(16, 16, 0.0);
  for (int y = 0; y < 16; ++y)
    for (int x = 8; x < 16; ++x)
      for (int c = 0; c < 3; ++c) split(y, x, c) = 1.0;
  const Clarity half = clarity_metrics(split);

  const bool ok = std::abs(fid_same) < 1e-6 && std::abs(fid_shift - 1.0) < 1e-6 && sam == 100.0 &&
                  std::abs(overlap - 0.142857) < 1e-6 && flat.luminance_variance == 0.0 && flat.edge_clutter == 0.0 &&
                  std::abs(half.luminance_variance - 0.25) < 1e-9;
  return {ok, "fid same=" + fmt(fid_same, 3) + " shift=" + fmt(fid_shift, 10) + " sam=" + fmt(sam) +
                  " box_iou=" + fmt(overlap, 8) + " clarity flat=(" + fmt(flat.luminance_variance) + "," +
                  fmt(flat.edge_clutter) + ") split var=" + fmt(half.luminance_variance, 10)};
}

// ------------------------------------------------------------- traversal

Outcome traversal_properties() {
  Rng rng(99);
  int failures = 0, cycles_raised = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(1, 50);
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = n - 1; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.next() % (i + 1)]);
    std::vector<ConceptNode> nodes;
    for (int i = 0; i < n; ++i) nodes.push_back({"n" + std::to_string(i), "concept " + std::to_string(i), {}});
    std::vector<std::pair<std::string, std::string>> edges;
    const double density = rng.uniform(0.0, 0.2);
    // Edges only go forward in a hidden order, so the graph is acyclic.
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (rng.bernoulli(density)) edges.push_back({nodes[perm[i]].id, nodes[perm[j]].id});

    const ConceptGraph g(nodes, edges);
    const std::string target = nodes[static_cast<std::size_t>(rng.uniform_int(0, n - 1))].id;
    const TraversalPlan plan = curriculum_order(g, target);

    // Reference closure by reverse breadth-first search.
    std::set<std::string> closure{target};
    std::vector<std::string> frontier{target};
    while (!frontier.empty()) {
      const std::string cur = frontier.back();
      frontier.pop_back();
      for (const auto& [a, b] : edges)
        if (b == cur && closure.insert(a).second) frontier.push_back(a);
    }
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < plan.ordered_concepts.size(); ++i) pos[plan.ordered_concepts[i]] = i;
    bool ok = plan.ordered_concepts.size() == closure.size() && pos.size() == closure.size() &&
              std::all_of(closure.begin(), closure.end(), [&](const auto& c) { return pos.count(c) != 0; }) &&
              !plan.ordered_concepts.empty() && plan.ordered_concepts.back() == target;
    for (const auto& [a, b] : edges) {
      if (pos.count(a) && pos.count(b) && pos[a] >= pos[b]) ok = false;
    }
    failures += !ok;

    if (!edges.empty()) {
      // Reversing any edge on a path closes a cycle.
      auto cyclic = edges;
      cyclic.push_back({edges.front().second, edges.front().first});
      try {
        ConceptGraph bad(nodes, cyclic);
      } catch (const Error& e) {
        cycles_raised += e.code() == ErrorCode::CycleDetected;
        continue;
      }
      ++failures;
    }
  }
  return {failures == 0, std::to_string(200 - failures) + "/200 graphs ok, " + std::to_string(cycles_raised) +
                              " cycles raised CycleDetected"};
}

// ------------------------------------------------------------------- CLI

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome cli_determinism(const std::string& learn_bin) {
  const fs::path dir = fs::temp_directory_path() / ("learn_accept_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream g(dir / "chain.json");
    g << R"({"nodes":[{"id":"force","prompt":"a block pushed by a lever"},)"
         R"({"id":"friction","prompt":"a block resting on a ramp"},)"
         R"({"id":"incline","prompt":"a ball rolling down a ramp"}],)"
         R"("edges":[["force","friction"],["friction","incline"]]})";
  }
  std::vector<std::string> files;
  for (const char* run : {"a", "b"}) {
    const std::string cmd = "\"" + learn_bin + "\" traverse --graph \"" + (dir / "chain.json").string() +
                            "\" --concept incline --seed 42 --steps 25 --out-dir \"" + (dir / run).string() +
                            "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) {
      fs::remove_all(dir);
      return {false, "learn traverse exited non-zero"};
    }
  }
  bool same = true;
  int compared = 0;
  for (const auto& name : {"frame_000.png", "frame_001.png", "frame_002.png", "plan.json"}) {
    const auto a = slurp(dir / "a" / name), b = slurp(dir / "b" / name);
    same = same && !a.empty() && a == b;
    ++compared;
  }
  fs::remove_all(dir);
  return {same, std::to_string(compared) + " outputs compared byte for byte"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"learn acceptance checks"};
  std::string learn_bin = LEARN_BIN_PATH;
  std::vector<std::string> only;
  app.add_option("--learn", learn_bin, "Path to the learn executable");
  app.add_option("--only", only, "Run only the named checks");
  CLI11_PARSE(app, argc, argv);

  std::vector<std::pair<std::string, std::function<Outcome()>>> checks = {
      {"loss-oracles", loss_oracles},
      {"gradient-checks", gradient_checks},
      {"mask-semantics", mask_semantics},
      {"overfit-layout", overfit_layout},
      {"overfit-diffusion", overfit_diffusion},
      {"ablation-layout", [] { return ablation(std::cerr); }},
      {"intra-concept-similarity", [] { return intra_concept_property(std::cerr); }},
      {"metric-oracles", metric_oracles},
      {"traversal-properties", traversal_properties},
      {"cli-determinism", [&] { return cli_determinism(learn_bin); }},
  };

  int failed = 0;
  for (const auto& [name, check] : checks) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << " (" << fmt(secs, 3) << " s): " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}

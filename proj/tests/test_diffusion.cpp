#include <doctest.h>

#include <cmath>
#include <limits>

#include "learn/dataset.hpp"
#include "learn/diffusion.hpp"
#include "learn/error.hpp"
#include "learn/random.hpp"

using namespace learn;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

DiffusionConfig small_config() {
  DiffusionConfig c;
  c.unet.image_size = 16;
  c.unet.base_channels = 8;
  c.unet.channel_mult = {1, 2};
  c.unet.attention_resolutions = {16, 8};
  c.unet.layout_dim = 16;
  c.unet.num_heads = 2;
  c.unet.max_groups = 4;
  c.num_steps = 50;
  return c;
}

std::vector<Sample> synthetic(int n, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.num_records = n;
  spec.image_size = 16;
  spec.max_shapes = 2;
  return generate_synthetic_dataset(spec, seed);
}

Layout layout_of(std::initializer_list<LayoutElement> els) {
  Layout l;
  l.elements = els;
  return l;
}

DiffusionTrainConfig trainer(int steps, std::uint64_t seed) {
  DiffusionTrainConfig t;
  t.adamw.lr = 2e-3;
  t.steps = steps;
  t.batch_size = 2;
  t.seed = seed;
  t.semantic_every = 2;
  return t;
}

}  // namespace

TEST_CASE("attention mask follows cell centres") {
  const auto m = build_attention_mask(layout_of({{"ball", validate_box(0, 0, 0.5, 0.5)}}), 2);
  REQUIRE(m.values.rows() == 4);
  REQUIRE(m.values.cols() == 2);
  CHECK(m.values(0, 0) == 0.0);
  for (int p = 1; p < 4; ++p) CHECK(m.values(p, 0) == -kInf);
  CHECK(m.values.col(1).isZero(0));

  const auto empty = build_attention_mask(Layout{}, 4);
  CHECK(empty.values.cols() == 1);
  CHECK(empty.values.isZero(0));

  const auto full = build_attention_mask(layout_of({{"ramp", validate_box(0, 0, 1, 1)}}), 8);
  CHECK(full.values.col(0).isZero(0));

  const auto extra = build_attention_mask(layout_of({{"ball", validate_box(0, 0, 0.1, 0.1)}}), 4, 2);
  CHECK(extra.values.cols() == 4);
  CHECK(extra.values.rightCols(3).isZero(0));
  CHECK_THROWS_AS(build_attention_mask(Layout{}, 0), Error);
}

TEST_CASE("mask columns agree with box_contains for random layouts") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Layout l;
    const int n = rng.uniform_int(0, 4);
    for (int i = 0; i < n; ++i) {
      const double x = rng.uniform(0, 0.9), y = rng.uniform(0, 0.9);
      l.elements.push_back({"ball", validate_box(x, y, rng.uniform(0, 1 - x), rng.uniform(0, 1 - y))});
    }
    const int res = rng.uniform_int(1, 16);
    const auto m = build_attention_mask(l, res);
    for (int r = 0; r < res; ++r)
      for (int c = 0; c < res; ++c)
        for (int i = 0; i < n; ++i) {
          const bool open = m.values(r * res + c, i) == 0.0;
          CHECK(open == box_contains(l.elements[i].box, (c + 0.5) / res, (r + 0.5) / res));
        }
    CHECK(m.values.col(n).isZero(0));
  }
}

TEST_CASE("masked attention oracles") {
  Rng rng(4);
  // A single token with an open mask is returned verbatim.
  const Eigen::MatrixXd token = rng.normal_matrix(1, 6);
  AttentionMask open{Eigen::MatrixXd::Zero(5, 1), 0};
  const Eigen::MatrixXd out = masked_cross_attention(rng.normal_matrix(5, 6), token, open);
  for (int r = 0; r < 5; ++r) CHECK((out.row(r) - token).norm() < 1e-12);

  // Two tokens the query scores identically, third masked: output is their mean.
  Eigen::MatrixXd l(3, 2);
  l << 1, 0, 0, 1, 3, 3;
  Eigen::MatrixXd q(1, 2);
  q << 1, 1;
  AttentionMask two{Eigen::MatrixXd::Zero(1, 3), 0};
  two.values(0, 2) = -kInf;
  const Eigen::MatrixXd mean = masked_cross_attention(q, l, two);
  CHECK(mean(0, 0) == doctest::Approx(0.5));
  CHECK(mean(0, 1) == doctest::Approx(0.5));

  // Dominant logit on the only covering token.
  Eigen::MatrixXd keys(2, 2);
  keys << 100, 0, 0, 0;
  Eigen::MatrixXd q2(1, 2);
  q2 << 1, 0;
  const Eigen::MatrixXd dom = masked_cross_attention(q2, keys, AttentionMask{Eigen::MatrixXd::Zero(1, 2), 0});
  CHECK(dom(0, 0) == doctest::Approx(100.0).epsilon(1e-9));

  CHECK_THROWS_AS(masked_cross_attention(q, l, open), Error);
  CHECK_THROWS_AS(masked_cross_attention(rng.normal_matrix(1, 3), l, two), Error);
}

TEST_CASE("masked attention rows are convex combinations") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = rng.uniform_int(1, 6), p = rng.uniform_int(1, 10), d = rng.uniform_int(1, 8);
    // Identity-like keys with value = key lets us read the weights back.
    Eigen::MatrixXd keys = Eigen::MatrixXd::Zero(n, n + d);
    keys.leftCols(n).setIdentity();
    keys.rightCols(d) = rng.normal_matrix(n, d);
    AttentionMask m{Eigen::MatrixXd::Zero(p, n), 0};
    for (int r = 0; r < p; ++r)
      for (int c = 0; c + 1 < n; ++c)
        if (rng.bernoulli(0.5)) m.values(r, c) = -kInf;
    Eigen::MatrixXd q = rng.normal_matrix(p, n + d);
    q.rightCols(d).setZero();
    const Eigen::MatrixXd out = masked_cross_attention(q, keys, m);
    const Eigen::MatrixXd w = out.leftCols(n);
    for (int r = 0; r < p; ++r) {
      CHECK(std::abs(w.row(r).sum() - 1.0) < 1e-6);
      for (int c = 0; c < n; ++c) {
        CHECK(w(r, c) >= 0.0);
        if (m.values(r, c) != 0.0) CHECK(w(r, c) == 0.0);
      }
    }
  }
}

TEST_CASE("noise schedule") {
  const auto s = small_config().make_schedule();
  CHECK(s.num_steps == 50);
  for (int t = 0; t < s.num_steps; ++t) {
    CHECK(s.betas[t] > 0.0);
    CHECK(s.betas[t] < 1.0);
    CHECK(s.alpha_bars[t] > 0.0);
    CHECK(s.alpha_bars[t] < 1.0);
    if (t > 0) CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
  }
  // Reference scaling: 1000/50 = 20x the nominal endpoints.
  CHECK(s.betas[0] == doctest::Approx(2e-3));
  CHECK(s.betas[49] == doctest::Approx(0.4));
  CHECK_THROWS_AS(NoiseSchedule::linear(0), Error);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.5, 0.1), Error);
}

TEST_CASE("forward noising at the last step is close to standard normal") {
  for (int steps : {200, 50}) {
    DiffusionConfig c = small_config();
    c.num_steps = steps;
    const auto s = c.make_schedule();
    Rng rng(11);
    Eigen::MatrixXd x0(3, 4);
    x0 << 1, -1, 1, -1, 1, 1, -1, -1, 0.5, 0, -0.5, 1;
    Eigen::ArrayXXd sum = Eigen::ArrayXXd::Zero(3, 4), sq = sum;
    for (int i = 0; i < 1000; ++i) {
      const Eigen::ArrayXXd xt = q_sample(s, x0, steps - 1, rng.normal_matrix(3, 4)).array();
      sum += xt;
      sq += xt.square();
    }
    const Eigen::ArrayXXd mean = sum / 1000.0;
    const Eigen::ArrayXXd sd = (sq / 1000.0 - mean.square()).sqrt();
    CHECK(mean.abs().maxCoeff() < 0.1);
    CHECK(sd.minCoeff() >= 0.9);
    CHECK(sd.maxCoeff() <= 1.1);
  }
}

TEST_CASE("respaced timesteps") {
  const auto ts = respaced_timesteps(200, 50);
  REQUIRE(ts.size() == 50);
  CHECK(ts.front() == 199);
  CHECK(ts.back() == 0);
  for (std::size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] < ts[i - 1]);
  CHECK(respaced_timesteps(200, 1) == std::vector<int>{199});
  CHECK_THROWS_AS(respaced_timesteps(200, 0), Error);
  CHECK_THROWS_AS(respaced_timesteps(200, 201), Error);
}

TEST_CASE("samplers recover the clean image from an exact noise oracle") {
  const auto s = small_config().make_schedule();
  Rng rng(8);
  const Eigen::MatrixXd x0 = (rng.normal_matrix(3, 20, 0.4)).cwiseMax(-1.0).cwiseMin(1.0);
  const NoisePredictor oracle = [&](const Eigen::MatrixXd& x, int t) {
    const double ab = s.alpha_bars[t];
    return Eigen::MatrixXd((x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab));
  };
  for (bool ddim : {false, true})
    for (int steps : {1, 10, 50}) CHECK((sample_planes(s, 20, oracle, 3, steps, ddim) - x0).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("model space conversion round trips") {
  Image img(4, 5, 0.25);
  img(1, 2, 0) = 1.0;
  const Eigen::MatrixXd planes = to_model_space(img);
  CHECK(planes.minCoeff() == doctest::Approx(-0.5));
  CHECK(planes.maxCoeff() == doctest::Approx(1.0));
  const Image back = from_model_space(4, 5, planes);
  CHECK((back.planes() - img.planes()).norm() < 1e-12);
}

TEST_CASE("differentiable image embedding matches encode_image") {
  const auto enc = EncoderHandle::toy(24, 2);
  const auto data = synthetic(3, 1);
  Eigen::MatrixXd batch(3, 3 * 256);
  for (int b = 0; b < 3; ++b) batch.middleCols(b * 256, 256) = to_model_space(data[b].image);
  const Eigen::MatrixXd e = toy_image_embedding(ag::constant(batch), 3, 16, 16, enc).value();
  REQUIRE(e.rows() == 3);
  for (int b = 0; b < 3; ++b) CHECK((e.row(b).transpose() - encode_image(enc, data[b].image)).norm() < 1e-9);
}

TEST_CASE("first injection output is local to each box") {
  const auto enc = EncoderHandle::toy(16, 1);
  const GeneratorModel m(small_config(), enc.text_dim(), 4);
  Rng rng(9);
  const Eigen::MatrixXd x = rng.normal_matrix(3, 256);
  const auto box = validate_box(0.25, 0.25, 0.5, 0.25);
  const auto base = m.condition(layout_of({{"ball", box}, {"ramp", validate_box(0, 0.75, 1, 0.25)}}), enc);
  const auto swapped = m.condition(layout_of({{"magnet", box}, {"ramp", validate_box(0, 0.75, 1, 0.25)}}), enc);
  const Eigen::MatrixXd a = m.first_injection_output(x, 20, base);
  const Eigen::MatrixXd b = m.first_injection_output(x, 20, swapped);
  const int res = static_cast<int>(std::lround(std::sqrt(static_cast<double>(a.rows()))));
  REQUIRE(res * res == a.rows());
  int inside = 0, changed_inside = 0;
  for (int r = 0; r < res; ++r)
    for (int c = 0; c < res; ++c) {
      const int p = r * res + c;
      if (box_contains(box, (c + 0.5) / res, (r + 0.5) / res)) {
        ++inside;
        changed_inside += (a.row(p) - b.row(p)).norm() > 1e-9;
      } else {
        CHECK((a.row(p) - b.row(p)).norm() == 0.0);
      }
    }
  CHECK(inside > 0);
  CHECK(changed_inside == inside);

  // A token covering no cell changes nothing at all.
  const auto tiny = validate_box(0.0, 0.0, 0.01, 0.01);
  const auto t1 = m.condition(layout_of({{"ball", tiny}}), enc);
  const auto t2 = m.condition(layout_of({{"lever", tiny}}), enc);
  CHECK(m.first_injection_output(x, 20, t1) == m.first_injection_output(x, 20, t2));
}

TEST_CASE("generate is deterministic and clamped") {
  const auto enc = EncoderHandle::toy(16, 1);
  const GeneratorModel m(small_config(), enc.text_dim(), 4);
  const Layout l = layout_of({{"ball", validate_box(0.1, 0.1, 0.4, 0.4)}});
  const Image a = generate(m, l, enc, 7, 5);
  const Image b = generate(m, l, enc, 7, 5);
  CHECK(a.planes() == b.planes());
  CHECK(a.height() == 16);
  CHECK(a.planes().minCoeff() >= 0.0);
  CHECK(a.planes().maxCoeff() <= 1.0);
  CHECK(generate(m, l, enc, 8, 5).planes() != a.planes());
  SamplerOptions ddim;
  ddim.ddim = true;
  const Image d = generate(m, l, enc, 7, 5, ddim);
  CHECK(d.planes().minCoeff() >= 0.0);
  CHECK(d.planes().maxCoeff() <= 1.0);
  for (int bad : {0, -1, 51}) {
    try {
      generate(m, l, enc, 7, bad);
      FAIL("expected InvalidSteps");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InvalidSteps);
    }
  }
}

TEST_CASE("diffusion training history") {
  const auto enc = EncoderHandle::toy(16, 1);
  const auto data = synthetic(4, 2);
  GeneratorModel a(small_config(), enc.text_dim(), 4), b(small_config(), enc.text_dim(), 4);
  const auto ha = train_diffusion(a, data, enc, trainer(4, 3));
  const auto hb = train_diffusion(b, data, enc, trainer(4, 3));
  CHECK(ha == hb);
  REQUIRE(ha.size() == 4);
  for (const auto& h : ha) {
    CHECK(h.has_semantic == (h.step % 2 == 0));
    CHECK(std::isfinite(h.total));
    CHECK(h.total == doctest::Approx(h.noise_mse + (h.has_semantic ? h.semantic : 0.0)));
  }
  CHECK(evaluate_noise_loss(a, data, enc, 1) == evaluate_noise_loss(b, data, enc, 1));

  auto off = trainer(4, 3);
  off.lambda_semantic = 0.0;
  GeneratorModel c(small_config(), enc.text_dim(), 4);
  for (const auto& h : train_diffusion(c, data, enc, off)) {
    CHECK_FALSE(h.has_semantic);
    CHECK(h.semantic == 0.0);
  }

  GeneratorModel d(small_config(), enc.text_dim(), 4);
  try {
    train_diffusion(d, {}, enc, trainer(1, 0));
    FAIL("expected EmptyDataset");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyDataset);
  }
}

TEST_CASE("withholding the layout still attends the null token") {
  DiffusionConfig c = small_config();
  c.use_layout = false;
  const auto enc = EncoderHandle::toy(16, 1);
  const GeneratorModel m(c, enc.text_dim(), 4);
  const auto cond = m.condition(layout_of({{"ball", validate_box(0, 0, 1, 1)}}), enc);
  CHECK(cond.layout.size() == 0);
  CHECK(m.layout_tokens(cond).rows() == 1);
}

TEST_CASE("config validation and json") {
  DiffusionConfig c = small_config();
  CHECK(DiffusionConfig::from_json(c.to_json()).to_json() == c.to_json());
  c.unet.attention_resolutions = {3};
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  c.unet.image_size = 15;
  CHECK_THROWS_AS(c.validate(), Error);
}

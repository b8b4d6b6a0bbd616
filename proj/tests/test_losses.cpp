#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "learn/loss_ops.hpp"
#include "learn/losses.hpp"
#include "support.hpp"

using namespace learn;
using testing::numeric_grad;
using testing::relative_error;

namespace {

// -log(e / (e + 1)), evaluated by hand.
const double kTwoWay = std::log1p(std::exp(-1.0));

Eigen::MatrixXd unit_rows(Eigen::MatrixXd m) { return m.rowwise().normalized(); }

Eigen::MatrixXd permute_rows(const Eigen::MatrixXd& m, const std::vector<int>& p) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (std::size_t i = 0; i < p.size(); ++i) out.row(Eigen::Index(i)) = m.row(p[i]);
  return out;
}

}  // namespace

TEST_CASE("cosine similarity oracles") {
  Eigen::VectorXd a(2), b(2), c(2);
  a << 1, 0;
  b << 1, 1;
  c << 0, 3;
  CHECK(cosine_similarity<double>(a, a) == doctest::Approx(1.0));
  CHECK(cosine_similarity<double>(a, c) == 0.0);
  CHECK(std::abs(cosine_similarity<double>(a, b) - 0.707107) < 1e-6);
  CHECK_THROWS_AS(cosine_similarity<double>(a, Eigen::VectorXd::Zero(2)), Error);
  CHECK_THROWS_AS(cosine_similarity<double>(a, Eigen::VectorXd::Ones(3)), Error);
}

TEST_CASE("token alignment loss oracles") {
  CHECK(std::abs(kTwoWay - 0.313262) < 1e-6);
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);
  CHECK(std::abs(token_alignment_loss<double>(eye, eye, 1.0) - 0.313262) < 1e-6);
  CHECK(token_alignment_loss<double>(eye, eye, 1.0) == doctest::Approx(kTwoWay).epsilon(1e-14));

  Eigen::MatrixXd one(1, 3);
  one << 0.3, -1.0, 2.0;
  CHECK(token_alignment_loss<double>(one, one * 2.0, 0.07) == 0.0);

  for (int n : {2, 3, 7, 16}) {
    const double u = token_alignment_loss_from_similarity<double>(Eigen::MatrixXd::Constant(n, n, -0.2), 0.5);
    CHECK(std::abs(u - std::log(double(n))) < 1e-9);
  }
}

TEST_CASE("token alignment loss properties") {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = rng.uniform_int(1, 8), d = rng.uniform_int(2, 12);
    const Eigen::MatrixXd l = rng.normal_matrix(n, d), v = rng.normal_matrix(n, d);
    const double tau = rng.uniform(0.05, 2.0);
    const double base = token_alignment_loss<double>(l, v, tau);
    CHECK(base >= 0.0);

    std::vector<int> p(static_cast<std::size_t>(n));
    std::iota(p.begin(), p.end(), 0);
    std::reverse(p.begin(), p.end());
    CHECK(token_alignment_loss<double>(permute_rows(l, p), permute_rows(v, p), tau) ==
          doctest::Approx(base).epsilon(1e-12));
  }

  // Perfect alignment, non-positive off-diagonal, small temperature.
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);
  CHECK(token_alignment_loss<double>(eye, eye, 0.07) < 1e-6);
  Eigen::MatrixXd simplex = Eigen::MatrixXd::Constant(4, 4, -1.0 / 3.0);
  simplex.diagonal().setOnes();
  CHECK(token_alignment_loss_from_similarity<double>(simplex, 0.07) < 1e-6);
  CHECK(token_alignment_loss_from_similarity<double>(simplex, 0.05) < token_alignment_loss_from_similarity<double>(simplex, 0.07));

  double previous = token_alignment_loss<double>(eye, eye, 2.0);
  for (double tau : {1.0, 0.5, 0.2, 0.1, 0.07}) {
    const double now = token_alignment_loss<double>(eye, eye, tau);
    CHECK(now < previous);
    previous = now;
  }
}

TEST_CASE("layout contrastive loss oracles") {
  Eigen::MatrixXd l(1, 2), lp(1, 2);
  l << 1, 0;
  CHECK(layout_contrastive_loss<double>(l, l, 1.0) == 0.0);
  CHECK(layout_contrastive_loss<double>(l, l, 0.07) == 0.0);

  lp << 0.5, std::sqrt(0.75);
  CHECK(layout_contrastive_loss<double>(l, lp, 1.0) == doctest::Approx(0.5).epsilon(1e-14));

  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);
  CHECK(std::abs(layout_contrastive_loss<double>(eye, eye, 1.0) - 0.313262) < 1e-6);
  CHECK(layout_contrastive_loss<double>(eye, eye, 1.0) == doctest::Approx(kTwoWay).epsilon(1e-14));
}

TEST_CASE("intra-concept loss oracles and order invariance") {
  Eigen::MatrixXd same(3, 2);
  same << 1, 2, 1, 2, 1, 2;
  CHECK(std::abs(intra_concept_loss<double>(same)) < 1e-15);

  const Eigen::MatrixXd ortho = Eigen::MatrixXd::Identity(2, 2);
  CHECK(intra_concept_loss<double>(ortho) == 0.5);

  Eigen::MatrixXd half(2, 2);
  half << 1, 0, 0.5, std::sqrt(0.75);
  CHECK(intra_concept_loss<double>(half) == doctest::Approx(0.25).epsilon(1e-14));

  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd m = rng.normal_matrix(rng.uniform_int(1, 6), 5);
    const double v = intra_concept_loss<double>(m);
    CHECK(v >= -1e-15);
    CHECK(v <= 2.0);
    std::vector<int> p(static_cast<std::size_t>(m.rows()));
    std::iota(p.begin(), p.end(), 0);
    std::rotate(p.begin(), p.begin() + 1, p.end());
    CHECK(intra_concept_loss<double>(permute_rows(m, p)) == doctest::Approx(v).epsilon(1e-12));

    // Against the pairwise definition.
    const Eigen::MatrixXd u = unit_rows(m);
    double pairwise = 0.0;
    for (Eigen::Index i = 0; i < u.rows(); ++i)
      for (Eigen::Index j = 0; j < u.rows(); ++j) pairwise += 1.0 - u.row(i).dot(u.row(j));
    CHECK(v == doctest::Approx(pairwise / double(u.rows() * u.rows())).epsilon(1e-12));
  }
}

TEST_CASE("combined layout loss") {
  const LossConfig cfg;
  CHECK(cfg.lambda_intra == 0.36);
  CHECK(combined_layout_loss<double>(0.5, 0.5, cfg) == doctest::Approx(0.68).epsilon(1e-15));
  CHECK(combined_layout_loss<double>(0.7, 0.0, cfg) == 0.7);
  LossConfig off = cfg;
  off.lambda_intra = 0.0;
  CHECK(combined_layout_loss<double>(0.7, 0.9, off) == 0.7);
}

TEST_CASE("semantic alignment loss") {
  Eigen::VectorXd a(3), b(3);
  a << 1, 2, 3;
  b << -3, 0, 1;
  CHECK(semantic_alignment_loss<double>(a, a * 4.0) == doctest::Approx(0.0));
  CHECK(semantic_alignment_loss<double>(a, b) == doctest::Approx(1.0));
  CHECK(semantic_alignment_loss<double>(a, -a) == doctest::Approx(2.0));
}

TEST_CASE("analytic gradients match central differences") {
  Rng rng(12);
  const double h = 1e-4;
  for (int point = 0; point < 20; ++point) {
    const int n = rng.uniform_int(1, 6), d = rng.uniform_int(2, 9);
    const double tau = rng.uniform(0.07, 1.0);
    const Eigen::MatrixXd a = rng.normal_matrix(n, d), b = rng.normal_matrix(n, d);

    const auto ta = token_alignment_loss_grad<double>(a, b, tau);
    CHECK(relative_error(ta.grad_first, numeric_grad([&](const auto& x) { return token_alignment_loss<double>(x, b, tau); }, a, h)) < 1e-4);
    CHECK(relative_error(ta.grad_second, numeric_grad([&](const auto& x) { return token_alignment_loss<double>(a, x, tau); }, b, h)) < 1e-4);

    const auto lc = layout_contrastive_loss_grad<double>(a, b, tau);
    CHECK(relative_error(lc.grad_first, numeric_grad([&](const auto& x) { return layout_contrastive_loss<double>(x, b, tau); }, a, h)) < 1e-4);
    CHECK(relative_error(lc.grad_second, numeric_grad([&](const auto& x) { return layout_contrastive_loss<double>(a, x, tau); }, b, h)) < 1e-4);

    const auto ic = intra_concept_loss_grad<double>(a);
    CHECK(relative_error(ic.grad, numeric_grad([](const auto& x) { return intra_concept_loss<double>(x); }, a, h)) < 1e-4);

    const Eigen::VectorXd t = a.row(0).transpose(), im = b.row(0).transpose();
    const auto sa = semantic_alignment_loss_grad<double>(t, im);
    auto row = [](const Eigen::MatrixXd& x) { return Eigen::VectorXd(x.row(0).transpose()); };
    CHECK(relative_error(sa.grad_first, numeric_grad([&](const auto& x) { return semantic_alignment_loss<double>(row(x), im); }, t.transpose(), h)) < 1e-4);
    CHECK(relative_error(sa.grad_second, numeric_grad([&](const auto& x) { return semantic_alignment_loss<double>(t, row(x)); }, im.transpose(), h)) < 1e-4);
  }
}

TEST_CASE("autograd loss nodes carry the analytic gradients") {
  Rng rng(13);
  const Eigen::MatrixXd a = rng.normal_matrix(4, 6), b = rng.normal_matrix(4, 6);
  auto la = ag::parameter(a), lb = ag::parameter(b);
  auto loss = ag::add(ag::token_alignment(la, lb, 0.2), ag::scale(ag::layout_contrastive(la, lb, 0.3), 0.5));
  loss = ag::add(loss, ag::intra_concept(la));
  ag::backward(loss);
  const auto ta = token_alignment_loss_grad<double>(a, b, 0.2);
  const auto lc = layout_contrastive_loss_grad<double>(a, b, 0.3);
  const auto ic = intra_concept_loss_grad<double>(a);
  CHECK((la.grad() - (ta.grad_first + 0.5 * lc.grad_first + ic.grad)).norm() < 1e-12);
  CHECK((lb.grad() - (ta.grad_second + 0.5 * lc.grad_second)).norm() < 1e-12);

  auto img = ag::parameter(b);
  auto sem = ag::semantic_alignment(a, img);
  ag::backward(sem);
  const Eigen::MatrixXd numeric = numeric_grad(
      [&](const Eigen::MatrixXd& x) {
        double s = 0;
        for (int i = 0; i < 4; ++i) s += semantic_alignment_loss<double>(a.row(i).transpose(), x.row(i).transpose());
        return s / 4.0;
      },
      b);
  CHECK(relative_error(img.grad(), numeric) < 1e-6);
}

TEST_CASE("loss input validation") {
  const Eigen::MatrixXd a = Eigen::MatrixXd::Ones(2, 3);
  CHECK_THROWS_AS(token_alignment_loss<double>(a, Eigen::MatrixXd::Ones(3, 3), 0.1), Error);
  CHECK_THROWS_AS(token_alignment_loss<double>(a, Eigen::MatrixXd::Ones(2, 4), 0.1), Error);
  CHECK_THROWS_AS(layout_contrastive_loss<double>(Eigen::MatrixXd(0, 3), Eigen::MatrixXd(0, 3), 0.1), Error);
  Eigen::MatrixXd zero_row = a;
  zero_row.row(1).setZero();
  try {
    intra_concept_loss<double>(zero_row);
    FAIL("expected ZeroVector");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ZeroVector);
  }
}

TEST_CASE("layout embedding augmentation") {
  Rng rng(14);
  const Embedding l = rng.normal_matrix(768, 1);
  LossConfig none;
  none.augment_mask_prob = 0.0;
  none.augment_dropout = 0.0;
  CHECK(augment_layout_embedding(l, none, 3) == l);

  LossConfig cfg;
  CHECK(augment_layout_embedding(l, cfg, 3) == augment_layout_embedding(l, cfg, 3));
  CHECK(augment_layout_embedding(l, cfg, 3) != augment_layout_embedding(l, cfg, 4));
  CHECK(augment_layout_embedding(l, cfg, 3).norm() == doctest::Approx(1.0));

  LossConfig half;
  half.augment_mask_prob = 0.5;
  half.augment_dropout = 0.0;
  const Embedding out = augment_layout_embedding(l, half, 21);
  const double zeroed = static_cast<double>((out.array() == 0.0).count()) / 768.0;
  CHECK(zeroed >= 0.4);
  CHECK(zeroed <= 0.6);

  // A single-coordinate embedding eventually fails to survive aggressive masking.
  LossConfig harsh;
  harsh.augment_mask_prob = 0.99;
  harsh.augment_dropout = 0.0;
  Embedding tiny(1);
  tiny << 1.0;
  bool all_masked = false;
  for (std::uint64_t s = 0; s < 20 && !all_masked; ++s) {
    try {
      augment_layout_embedding(tiny, harsh, s);
    } catch (const Error& e) {
      all_masked = e.code() == ErrorCode::AllMasked;
    }
  }
  CHECK(all_masked);
}

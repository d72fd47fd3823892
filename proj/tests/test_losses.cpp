#include <doctest.h>

#include <cmath>
#include <random>

#include "fedsc/error.hpp"
#include "fedsc/losses.hpp"
#include "support.hpp"

using namespace fedsc;
using namespace fedsc::testing;

namespace {

SimilarityContext unit_context(const RelationalSet& r, double tau) {
  SimilarityContext ctx;
  ctx.normalizers = Matrix::Ones(static_cast<Eigen::Index>(r.num_classes()), static_cast<Eigen::Index>(r.num_clients()));
  ctx.temperature = tau;
  return ctx;
}

// Direct transcription of the contrastive loss for one feature.
double oracle_rpcl(const Vector& z, int label, const RelationalSet& r, const SimilarityContext& ctx) {
  double pos = 0, all = 0;
  for (std::size_t j = 0; j < r.num_classes(); ++j)
    for (std::size_t k = 0; k < r.num_clients(); ++k) {
      if (!r.is_valid(j, k)) continue;
      const Vector rk = r.prototype(j, k).transpose();
      const double s = z.dot(rk) / (z.norm() * rk.norm()) /
                       ctx.normalizers(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k));
      const double e = std::exp(s / ctx.temperature);
      all += e;
      if (static_cast<int>(j) == label) pos += e;
    }
  return -std::log(pos / all);
}

template <typename Fn>
Vector numeric_grad(const Vector& z, Fn&& f, double h = 1e-5) {
  Vector g(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    Vector up = z, down = z;
    up(i) += h;
    down(i) -= h;
    g(i) = (f(up) - f(down)) / (2 * h);
  }
  return g;
}

double max_rel(const Vector& a, const Vector& b) {
  double worst = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a(i), b(i)));
  return worst;
}

}  // namespace

TEST_CASE("similarity") {
  Vector r(3);
  r << 1, 2, 2;
  CHECK(similarity(r, r, 1.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(similarity(r, r, 2.0) == doctest::Approx(0.5).epsilon(1e-15));
  Vector o(3);
  o << 2, -1, 0;
  CHECK(std::abs(similarity(o, r, 3.0)) < 1e-15);
  CHECK_THROWS_AS(similarity(Vector::Zero(3), r, 1.0), Error);
  CHECK_THROWS_AS(similarity(o, r, 0.0), Error);
}

TEST_CASE("normalizers are mean distances") {
  RelationalSet r;
  r.per_class.push_back(Matrix(1, 2));
  r.per_class[0] << 1, 1;
  r.valid = {true};
  Matrix one(1, 2);
  one << 4, 1;
  CHECK(compute_normalizers(one, r, 0.05).normalizers(0, 0) == doctest::Approx(3.0).epsilon(1e-15));
  Matrix pair(2, 2);
  pair << 1 + 0.6, 1 - 0.8, 1 - 0.6, 1 + 0.8;
  CHECK(compute_normalizers(pair, r, 0.05).normalizers(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

  std::mt19937_64 rng(3);
  const auto rel = random_relational(3, 2, 4, rng);
  const Matrix f = random_matrix(10, 4, rng);
  const auto ctx = compute_normalizers(f, rel, 0.05);
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t k = 0; k < 2; ++k) {
      double s = 0;
      for (int i = 0; i < 10; ++i) s += (f.row(i) - rel.prototype(j, k)).norm();
      CHECK(std::abs(ctx.normalizers(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k)) - s / 10) < 1e-12);
    }
  try {
    compute_normalizers(Matrix(0, 4), rel, 0.05);
    FAIL("expected empty-feature-set");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kEmptyFeatureSet);
  }
}

TEST_CASE("rpcl equals log C under full similarity symmetry") {
  for (std::size_t C : {2u, 5u, 10u}) {
    RelationalSet r;
    Vector v = Vector::LinSpaced(4, 0.5, 2.0);
    for (std::size_t j = 0; j < C; ++j) r.per_class.push_back(v.transpose().replicate(3, 1));
    r.valid.assign(C * 3, true);
    Vector z(4);
    z << 0.3, -1, 2, 0.1;
    const auto ctx = unit_context(r, 0.05);
    CHECK(std::abs(rpcl_loss_and_grad(z, 1, r, ctx).loss - std::log(static_cast<double>(C))) < 1e-9);
  }
}

TEST_CASE("rpcl matches a direct transcription and is nonnegative") {
  std::mt19937_64 rng(17);
  for (int t = 0; t < 20; ++t) {
    const auto r = random_relational(4, 3, 5, rng);
    const Vector z = random_vector(5, rng);
    const auto ctx = compute_normalizers(random_matrix(6, 5, rng), r, 0.05);
    const int y = static_cast<int>(rng() % 4);
    const double loss = rpcl_loss_and_grad(z, y, r, ctx).loss;
    CHECK(loss >= 0.0);
    CHECK(std::abs(loss - oracle_rpcl(z, y, r, ctx)) < 1e-9 * std::max(1.0, loss));
  }
}

TEST_CASE("rpcl gradient matches finite differences") {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 20; ++t) {
    const auto r = random_relational(4, 3, 5, rng);
    const Vector z = random_vector(5, rng);
    const auto ctx = compute_normalizers(random_matrix(6, 5, rng), r, 0.05);
    const int y = static_cast<int>(rng() % 4);
    const auto analytic = rpcl_loss_and_grad(z, y, r, ctx).grad;
    const auto numeric = numeric_grad(z, [&](const Vector& v) { return rpcl_loss_and_grad(v, y, r, ctx).loss; });
    CHECK(max_rel(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("rpcl tends to zero when positives dominate and is scale invariant") {
  RelationalSet r;
  Vector e0 = Vector::Unit(3, 0), e1 = Vector::Unit(3, 1);
  r.per_class = {e0.transpose().replicate(2, 1), e1.transpose().replicate(2, 1)};
  r.valid.assign(4, true);
  const auto ctx = unit_context(r, 0.01);
  CHECK(rpcl_loss_and_grad(e0, 0, r, ctx).loss < 1e-30);
  std::mt19937_64 rng(1);
  const Vector z = random_vector(3, rng);
  CHECK(std::abs(rpcl_loss_and_grad(z, 1, r, ctx).loss - rpcl_loss_and_grad(7.5 * z, 1, r, ctx).loss) < 1e-12);
}

TEST_CASE("rpcl decreases when a positive similarity increases") {
  std::mt19937_64 rng(8);
  auto r = random_relational(3, 2, 4, rng);
  const Vector z = random_vector(4, rng);
  auto ctx = unit_context(r, 0.5);
  const double before = rpcl_loss_and_grad(z, 0, r, ctx).loss;
  // Rotating one positive prototype halfway towards z raises its cosine.
  const Vector moved = 0.5 * (r.prototype(0, 1).transpose().normalized() + z.normalized());
  r.per_class[0].row(1) = moved.transpose();
  CHECK(rpcl_loss_and_grad(z, 0, r, ctx).loss < before);
}

TEST_CASE("rpcl needs positives and negatives") {
  std::mt19937_64 rng(8);
  auto r = random_relational(2, 2, 3, rng);
  const auto ctx = unit_context(r, 0.05);
  const Vector z = random_vector(3, rng);
  r.valid = {false, false, true, true};
  try {
    rpcl_loss_and_grad(z, 0, r, ctx);
    FAIL("expected no-positive-prototype");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNoPositivePrototype);
  }
  r.valid = {true, true, false, false};
  try {
    rpcl_loss_and_grad(z, 0, r, ctx);
    FAIL("expected no-negative-prototype");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kNoNegativePrototype);
  }
}

TEST_CASE("cpdr spot values") {
  ConsistentSet c;
  c.vectors = Matrix::Zero(2, 3);
  c.vectors.row(1) << 1, 2, 3;
  c.supported = {true, true};
  Vector z(3);
  z << 2, 0, 3.5;
  const auto l1 = cpdr_loss_and_grad(z, 1, c);
  CHECK(l1.loss == doctest::Approx(3.5).epsilon(1e-15));
  CHECK(l1.grad(0) == 1.0);
  CHECK(l1.grad(1) == -1.0);
  CHECK(l1.grad(2) == 1.0);
  CHECK(cpdr_loss_and_grad(c.vectors.row(1).transpose(), 1, c).loss == 0.0);
  CHECK(cpdr_loss_and_grad(c.vectors.row(1).transpose(), 1, c).grad.isZero(0));
  const auto l2 = cpdr_loss_and_grad(z, 1, c, CpdrNorm::kL2);
  CHECK(l2.loss == doctest::Approx(std::sqrt(1 + 4 + 0.25)).epsilon(1e-15));
  c.supported[0] = false;
  try {
    cpdr_loss_and_grad(z, 0, c);
    FAIL("expected class-unsupported");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kClassUnsupported);
  }
}

TEST_CASE("cpdr is a metric and its gradient matches away from kinks") {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 20; ++t) {
    const auto c = random_consistent(3, 5, rng);
    const Vector z = random_vector(5, rng);
    const Vector w = random_vector(5, rng);
    const Vector o = c.vectors.row(2).transpose();
    for (auto norm : {CpdrNorm::kL1, CpdrNorm::kL2}) {
      const double dz = cpdr_loss_and_grad(z, 2, c, norm).loss;
      CHECK(dz >= 0.0);
      // Triangle inequality through w: d(z, o) <= |z - w| + d(w, o).
      const double zw = norm == CpdrNorm::kL1 ? (z - w).lpNorm<1>() : (z - w).norm();
      CHECK(dz <= zw + cpdr_loss_and_grad(w, 2, c, norm).loss + 1e-12);
      if ((z - o).cwiseAbs().minCoeff() <= 0.1) continue;
      const auto analytic = cpdr_loss_and_grad(z, 2, c, norm).grad;
      const auto numeric = numeric_grad(z, [&](const Vector& v) { return cpdr_loss_and_grad(v, 2, c, norm).loss; });
      CHECK(max_rel(analytic, numeric) <= 1e-4);
    }
  }
}

TEST_CASE("cross entropy") {
  for (int C : {2, 7, 10}) {
    const auto ce = ce_loss_and_grad(Vector::Constant(C, 0.37), 1);
    CHECK(std::abs(ce.loss - std::log(static_cast<double>(C))) < 1e-9);
    CHECK(std::abs(ce.grad.sum()) < 1e-15);
  }
  Vector big = Vector::Zero(3);
  big(2) = 800;
  CHECK(ce_loss_and_grad(big, 2).loss < 1e-300);
  CHECK(std::isfinite(ce_loss_and_grad(big, 0).loss));

  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const Vector l = random_vector(5, rng, 3.0);
    const int y = static_cast<int>(rng() % 5);
    const auto ce = ce_loss_and_grad(l, y);
    CHECK(std::abs(ce.grad.sum()) < 1e-12);
    const auto numeric = numeric_grad(l, [&](const Vector& v) { return ce_loss_and_grad(v, y).loss; });
    CHECK(max_rel(ce.grad, numeric) <= 1e-4);
  }
  try {
    ce_loss_and_grad(Vector::Zero(3), 3);
    FAIL("expected label-out-of-range");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kLabelOutOfRange);
  }
}

TEST_CASE("total loss is the sum of its components") {
  std::mt19937_64 rng(12);
  const ModelShape shape{3, 6, 4, 3};
  const auto p = random_parameters(shape, rng);
  const auto batch = forward_features(p, random_matrix(5, 3, rng), {0, 1, 2, 1, 0});
  const auto rel = random_relational(3, 2, 4, rng);
  const auto cons = random_consistent(3, 4, rng);
  const auto ctx = compute_normalizers(batch.z, rel, 0.05);
  const auto loss = total_loss(batch, &rel, &cons, &ctx, p);
  CHECK(loss.total == loss.ce + loss.rpcl + loss.cpdr);
  const Matrix logits = forward_logits(p, batch.z);
  double ce = 0, rpcl = 0, cpdr = 0;
  for (int i = 0; i < 5; ++i) {
    const int y = batch.labels[static_cast<std::size_t>(i)];
    ce += ce_loss_and_grad(logits.row(i).transpose(), y).loss;
    rpcl += rpcl_loss_and_grad(batch.z.row(i).transpose(), y, rel, ctx).loss;
    cpdr += cpdr_loss_and_grad(batch.z.row(i).transpose(), y, cons).loss;
  }
  CHECK(std::abs(loss.ce - ce / 5) < 1e-12);
  CHECK(std::abs(loss.rpcl - rpcl / 5) < 1e-12);
  CHECK(std::abs(loss.cpdr - cpdr / 5) < 1e-12);

  const auto ce_only = total_loss(batch, nullptr, nullptr, nullptr, p);
  CHECK(ce_only.total == ce_only.ce);
  CHECK(ce_only.grad_z.isZero(0));

  LossOptions weighted;
  weighted.rpcl_weight = 0.5;
  weighted.cpdr_weight = 0.0;
  const auto w = total_loss(batch, &rel, &cons, &ctx, p, weighted);
  CHECK(std::abs(w.rpcl - 0.5 * loss.rpcl) < 1e-12);
  CHECK(w.cpdr == 0.0);
}

TEST_CASE("total loss collapses to cross entropy at its prototype minima") {
  // Every z sits on its consistent prototype and the positives dominate.
  const ModelShape shape{2, 2, 2, 2};
  Parameters p = Parameters::zeros(shape);
  p.w1.setIdentity();
  p.w2.setIdentity();
  Matrix x(2, 2);
  x << 1, 0, 0, 1;
  const auto batch = forward_features(p, x, {0, 1});
  RelationalSet rel;
  rel.per_class = {x.row(0).replicate(2, 1), x.row(1).replicate(2, 1)};
  rel.valid.assign(4, true);
  ConsistentSet cons{x, {true, true}};
  SimilarityContext ctx{Matrix::Ones(2, 2), 0.005};
  const auto loss = total_loss(batch, &rel, &cons, &ctx, p);
  CHECK(loss.cpdr == 0.0);
  CHECK(loss.rpcl < 1e-30);
  CHECK(std::abs(loss.total - loss.ce) < 1e-30);
}

TEST_CASE("unsupported samples are skipped only on request") {
  std::mt19937_64 rng(2);
  const ModelShape shape{3, 4, 4, 3};
  const auto p = random_parameters(shape, rng);
  const auto batch = forward_features(p, random_matrix(3, 3, rng), {0, 1, 2});
  auto rel = random_relational(3, 2, 4, rng);
  rel.valid[4] = rel.valid[5] = false;  // class 2 has no relational prototype
  auto cons = random_consistent(3, 4, rng);
  cons.supported[2] = false;
  const auto ctx = compute_normalizers(batch.z, rel, 0.05);
  CHECK_THROWS_AS(total_loss(batch, &rel, &cons, &ctx, p), Error);
  LossOptions skip;
  skip.skip_unsupported = true;
  const auto loss = total_loss(batch, &rel, &cons, &ctx, p, skip);
  CHECK(loss.grad_z.row(2).isZero(0));
  CHECK_FALSE(loss.grad_z.row(0).isZero(0));
}

TEST_CASE("composite gradient through the model matches finite differences") {
  std::mt19937_64 rng(2718);
  for (auto norm : {CpdrNorm::kL1, CpdrNorm::kL2}) {
    LossOptions options;
    options.cpdr_norm = norm;
    int checked = 0;
    double worst = 0;
    while (checked < 50) {
      const auto err = composite_gradient_error(rng, options);
      if (!err) continue;
      worst = std::max(worst, *err);
      ++checked;
    }
    CHECK(worst <= 1e-4);
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "hybf/numerics.hpp"
#include "hybf/oracles.hpp"

#include <cmath>
#include <random>

using namespace hybf;

namespace {

cmat randn_cmat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> n01;
  cmat m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = cxd(n01(rng), n01(rng));
  return m;
}

cmat random_hermitian(std::mt19937_64& rng, Eigen::Index n) {
  return herm(randn_cmat(rng, n, n));
}

// Well away from singular so the unregularized path is exercised.
cmat random_hpd(std::mt19937_64& rng, Eigen::Index n) {
  cmat g = randn_cmat(rng, n, n);
  return herm(g * g.adjoint() + 0.5 * cmat::Identity(n, n));
}

}  // namespace

TEST_CASE("cholesky_factor: identity, diagonal, reconstruction, failures") {
  cmat eye = cmat::Identity(3, 3);
  CHECK((cholesky_factor(eye) - eye).norm() < 1e-14);

  cmat d = cmat::Zero(2, 2);
  d(0, 0) = 4.0;
  d(1, 1) = 9.0;
  cmat l = cholesky_factor(d);
  CHECK(std::abs(l(0, 0) - cxd(2.0, 0.0)) < 1e-14);
  CHECK(std::abs(l(1, 1) - cxd(3.0, 0.0)) < 1e-14);

  std::mt19937_64 rng(7);
  cmat a = random_hpd(rng, 6);
  cmat lf = cholesky_factor(a);
  CHECK((lf * lf.adjoint() - a).norm() < 1e-12 * a.norm());

  cmat indef = cmat::Identity(2, 2);
  indef(1, 1) = -1.0;
  CHECK_THROWS_AS(cholesky_factor(indef), NotPositiveDefinite);
  CHECK_THROWS_AS(cholesky_factor(cmat::Zero(2, 3)), DimensionMismatch);
}

TEST_CASE("herm and herm_asymmetry") {
  std::mt19937_64 rng(11);
  cmat h = random_hermitian(rng, 4);
  CHECK((herm(h) - h).norm() < 1e-15 * h.norm());
  CHECK(herm_asymmetry(h) < 1e-15);

  cmat skew = h;
  skew(0, 1) += cxd(0.0, 0.5);
  CHECK(herm_asymmetry(skew) > 1e-3);
}

TEST_CASE("vec is column-major and unvec inverts it") {
  cmat m(2, 2);
  m(0, 0) = 1.0;
  m(1, 0) = 2.0;
  m(0, 1) = 3.0;
  m(1, 1) = 4.0;
  cvec v = vec(m);
  CHECK(std::abs(v(0) - cxd(1.0, 0.0)) < 1e-15);
  CHECK(std::abs(v(1) - cxd(2.0, 0.0)) < 1e-15);
  CHECK(std::abs(v(2) - cxd(3.0, 0.0)) < 1e-15);
  CHECK(std::abs(v(3) - cxd(4.0, 0.0)) < 1e-15);

  std::mt19937_64 rng(13);
  cmat x = randn_cmat(rng, 4, 3);
  CHECK((unvec(vec(x), 4, 3) - x).norm() == 0.0);
  CHECK_THROWS_AS(unvec(vec(x), 5, 3), DimensionMismatch);
}

TEST_CASE("kron satisfies vec(A X B) = (B^T kron A) vec(X)") {
  std::mt19937_64 rng(17);
  cmat a = randn_cmat(rng, 3, 4);
  cmat x = randn_cmat(rng, 4, 2);
  cmat b = randn_cmat(rng, 2, 5);
  cvec lhs = vec(cmat(a * x * b));
  cvec rhs = kron(b.transpose(), a) * vec(x);
  CHECK((lhs - rhs).norm() < 1e-12 * lhs.norm());

  cmat k = kron(a, b);
  CHECK(k.rows() == a.rows() * b.rows());
  CHECK(k.cols() == a.cols() * b.cols());
  CHECK(std::abs(k(0, 0) - a(0, 0) * b(0, 0)) < 1e-15);
}

TEST_CASE("gde: diagonal pencil picks the top eigenpairs, phases pinned") {
  cmat a = cmat::Zero(4, 4);
  a(0, 0) = 1.0;
  a(1, 1) = 5.0;
  a(2, 2) = 3.0;
  a(3, 3) = 2.0;
  GdeResult r = gde({a, cmat::Identity(4, 4)}, 2);
  CHECK(!r.flagged);
  CHECK(r.values(0) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(r.values(1) == doctest::Approx(3.0).epsilon(1e-12));
  // Phase convention: the dominant entry comes out real positive.
  CHECK(std::abs(r.vectors(1, 0) - cxd(1.0, 0.0)) < 1e-12);
  CHECK(std::abs(r.vectors(2, 1) - cxd(1.0, 0.0)) < 1e-12);
}

TEST_CASE("gde matches the dense reference on random pencils") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::Index n = 2 + Eigen::Index(rng() % 9);  // 2..10
    Eigen::Index d = 1 + Eigen::Index(rng() % std::min<Eigen::Index>(4, n));
    cmat a = random_hermitian(rng, n);
    cmat b = random_hpd(rng, n);
    GdeResult fast = gde({a, b}, d);
    GdeResult ref = oracle::gde_reference(a, b, d);
    CHECK(!fast.flagged);
    for (Eigen::Index k = 0; k < d; ++k) {
      CHECK(std::abs(fast.values(k) - ref.values(k)) <=
            1e-10 * std::max(1.0, std::abs(ref.values(k))));
      cvec av = a * fast.vectors.col(k);
      cvec resid = av - fast.values(k) * (b * fast.vectors.col(k));
      CHECK(resid.norm() <= 1e-8 * std::max(av.norm(), 1e-12));
    }
    CHECK(principal_angle(fast.vectors, ref.vectors) <= 1e-7);
  }
}

TEST_CASE("gde: scale invariance of the pencil") {
  std::mt19937_64 rng(29);
  cmat a = random_hermitian(rng, 5);
  cmat b = random_hpd(rng, 5);
  GdeResult base = gde({a, b}, 3);
  GdeResult scaled = gde({cmat(100.0 * a), cmat(100.0 * b)}, 3);
  CHECK((base.values - scaled.values).norm() < 1e-10 * base.values.norm());
  // Columns are normalized v^H b v = 1, so scaling b by c shrinks them sqrt(c).
  CHECK((base.vectors - 10.0 * scaled.vectors).norm() < 1e-8 * base.vectors.norm());
}

TEST_CASE("gde: rank-deficient numerator flags and pads") {
  std::mt19937_64 rng(31);
  cvec x = randn_cmat(rng, 4, 1).col(0);
  cmat a = herm(x * x.adjoint());
  GdeResult r = gde({a, cmat::Identity(4, 4)}, 3);
  CHECK(r.flagged);
  CHECK(r.values(0) == doctest::Approx(x.squaredNorm()).epsilon(1e-10));
  CHECK(r.vectors.allFinite());
  // Padding columns still come back b-orthonormal (here plain orthonormal).
  cmat gram = r.vectors.adjoint() * r.vectors;
  CHECK((gram - cmat::Identity(3, 3)).norm() < 1e-10);
}

TEST_CASE("gde: the all-zero pencil is regularized, not fatal") {
  GdeResult r = gde({cmat::Zero(3, 3), cmat::Zero(3, 3)}, 1);
  CHECK(r.flagged);
  CHECK(r.vectors.allFinite());
  CHECK(std::isfinite(r.values(0)));
}

TEST_CASE("gde: dimension errors throw") {
  cmat a3 = cmat::Identity(3, 3);
  cmat b2 = cmat::Identity(2, 2);
  CHECK_THROWS_AS(gde({a3, b2}, 1), DimensionMismatch);
  CHECK_THROWS_AS(gde({a3, a3}, 0), DimensionMismatch);
  CHECK_THROWS_AS(gde({a3, a3}, 4), DimensionMismatch);
}

TEST_CASE("positive_part clamps the spectrum and nothing else") {
  cmat d = cmat::Zero(3, 3);
  d(0, 0) = 1.0;
  d(1, 1) = -2.0;
  d(2, 2) = 3.0;
  cmat p = positive_part(d);
  CHECK(std::abs(p(0, 0) - cxd(1.0, 0.0)) < 1e-14);
  CHECK(std::abs(p(1, 1)) < 1e-14);
  CHECK(std::abs(p(2, 2) - cxd(3.0, 0.0)) < 1e-14);

  std::mt19937_64 rng(37);
  cmat g = randn_cmat(rng, 4, 4);
  cmat psd = herm(g * g.adjoint());
  CHECK((positive_part(psd) - psd).norm() < 1e-12 * psd.norm());
  cmat once = positive_part(random_hermitian(rng, 4));
  CHECK((positive_part(once) - once).norm() < 1e-12 * std::max(once.norm(), 1.0));

  // Known construction: Q diag(2,-1,0.5) Q^H clamps to Q diag(2,0,0.5) Q^H.
  Eigen::HouseholderQR<cmat> qr(randn_cmat(rng, 3, 3));
  cmat q = qr.householderQ();
  rvec ev(3);
  ev << 2.0, -1.0, 0.5;
  cmat x = herm(q * ev.asDiagonal().toDenseMatrix().cast<cxd>() * q.adjoint());
  rvec evp(3);
  evp << 2.0, 0.0, 0.5;
  cmat want = herm(q * evp.asDiagonal().toDenseMatrix().cast<cxd>() * q.adjoint());
  CHECK((positive_part(x) - want).norm() < 1e-10);
}

TEST_CASE("rediagonalize: descending singular values, trace preserved") {
  std::mt19937_64 rng(41);
  cmat g = randn_cmat(rng, 4, 4);
  cmat p = herm(g * g.adjoint());
  cmat d = rediagonalize(p);
  for (Eigen::Index i = 0; i < 4; ++i)
    for (Eigen::Index j = 0; j < 4; ++j)
      if (i != j) CHECK(std::abs(d(i, j)) == 0.0);
  for (Eigen::Index i = 0; i + 1 < 4; ++i)
    CHECK(d(i, i).real() >= d(i + 1, i + 1).real());
  CHECK(std::abs(d.trace() - p.trace()) < 1e-11 * std::abs(p.trace()));

  Eigen::SelfAdjointEigenSolver<cmat> eig(p);
  for (Eigen::Index i = 0; i < 4; ++i)
    CHECK(d(i, i).real() ==
          doctest::Approx(eig.eigenvalues()(3 - i)).epsilon(1e-11));
}

TEST_CASE("principal_angle: aligned, orthogonal, 45 degrees") {
  cmat e1 = cmat::Zero(3, 1);
  e1(0, 0) = 1.0;
  cmat e2 = cmat::Zero(3, 1);
  e2(1, 0) = 1.0;
  CHECK(principal_angle(e1, e1) < 1e-7);
  CHECK(principal_angle(e1, e2) == doctest::Approx(M_PI / 2).epsilon(1e-12));

  cmat y(3, 1);
  y << cxd(1.0, 0.0), cxd(1.0, 0.0), cxd(0.0, 0.0);
  CHECK(principal_angle(e1, y) == doctest::Approx(M_PI / 4).epsilon(1e-10));
}

TEST_CASE("fd_gradient recovers known matrix gradients") {
  std::mt19937_64 rng(43);
  cmat t0 = random_hpd(rng, 3);

  // Linear functional f(T) = Re tr(G0 T) has gradient exactly G0.
  cmat g0 = random_hermitian(rng, 3);
  auto flin = [&](const cmat& t) { return (g0 * t).trace().real(); };
  cmat g = oracle::fd_gradient(flin, t0);
  CHECK((g - g0).norm() < 1e-8 * g0.norm());

  // f(T) = lndet(I + T) has gradient (I + T)^-1 at Hermitian T.
  auto flogdet = [](const cmat& t) {
    Eigen::LLT<cmat> llt(cmat(cmat::Identity(t.rows(), t.rows()) + herm(t)));
    double acc = 0.0;
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      acc += 2.0 * std::log(std::abs(cxd(llt.matrixL()(i, i))));
    return acc;
  };
  cmat want = cmat(cmat::Identity(3, 3) + t0).inverse();
  cmat got = oracle::fd_gradient(flogdet, t0);
  CHECK((got - want).norm() < 1e-5 * want.norm());
}

TEST_CASE("mc_covariance recovers a known covariance") {
  std::mt19937_64 rng(47);
  cmat a = randn_cmat(rng, 3, 3);
  cmat truth = herm(a * a.adjoint());
  std::normal_distribution<double> n01;
  auto sampler = [&]() {
    cvec g(3);
    for (int i = 0; i < 3; ++i)
      g(i) = cxd(n01(rng), n01(rng)) / std::sqrt(2.0);  // unit-power entries
    return cvec(a * g);
  };
  oracle::McCovariance mc = oracle::mc_covariance(sampler, 40000);
  double err = (mc.cov - truth).norm();
  CHECK(err < 0.05 * truth.norm());
  CHECK(err < 5.0 * mc.standard_error);  // the attached SE is in the right ballpark
  CHECK(mc.standard_error < 0.05 * truth.norm());
  CHECK_THROWS_AS(oracle::mc_covariance(sampler, 10), NumericsError);
}

TEST_CASE("power_grid_search finds an interior maximizer") {
  auto f = [](const rvec& p) {
    return -(p(0) - 1.0) * (p(0) - 1.0) - (p(1) - 2.0) * (p(1) - 2.0);
  };
  oracle::GridSearchResult best = oracle::power_grid_search(f, 2, 4.0, 401);
  CHECK(best.powers(0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(best.powers(1) == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("kkt_residual_digital vanishes at the water-filling point") {
  // Stationarity of w lndet(I + X^H S1 X) - tr(X^H S2 X) in X is satisfied by
  // X = U diag(sqrt(p)) with U the top generalized eigenvectors of (S1, S2)
  // (S2-orthonormal) and p_i = max(w - 1/lambda_i, 0).
  std::mt19937_64 rng(53);
  cmat s2 = random_hpd(rng, 4);
  cmat g = randn_cmat(rng, 4, 4);
  cmat s1 = herm(g * g.adjoint() + 10.0 * cmat::Identity(4, 4));  // big lambdas
  const double w = 2.0;
  GdeResult r = gde({s1, s2}, 2);
  rvec p(2);
  for (int i = 0; i < 2; ++i) p(i) = std::max(w - 1.0 / r.values(i), 0.0);
  REQUIRE(p.minCoeff() > 0.0);
  cmat x = r.vectors * p.cwiseSqrt().asDiagonal();
  CHECK(oracle::kkt_residual_digital(s1, s2, x, w) < 1e-10);

  // And it notices a perturbed point.
  cmat xbad = x;
  xbad(0, 0) += 0.1;
  CHECK(oracle::kkt_residual_digital(s1, s2, xbad, w) > 1e-3);
}

TEST_CASE("slackness_residual") {
  CHECK(oracle::slackness_residual(0.0, 1.0, 0.3) == 0.0);
  CHECK(oracle::slackness_residual(2.0, 1.0, 1.0) == 0.0);
  CHECK(oracle::slackness_residual(2.0, 1.0, 0.5) == doctest::Approx(1.0));
}

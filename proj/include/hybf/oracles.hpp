#pragma once
/**
 * @file oracles.hpp
 * @brief Independent brute-force verifiers: dense generalized-eigensolver
 *        reference, finite-difference gradient checker, Monte-Carlo signal
 *        covariance estimator, power grid search and KKT/slackness residuals.
 *
 * Nothing in this file calls the fast paths it is meant to verify. The
 * eigensolver reference uses Eigen's one-shot generalized solver instead of
 * the library's whiten-then-eig route; the gradient checker and covariance
 * estimator work on caller-supplied evaluators/samplers, so they stay blind
 * to how the closed forms are assembled.
 */

#include "hybf/model.hpp"
#include "hybf/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace hybf::oracle {

/// One comparison: reference vs implementation at a stated tolerance.
struct OracleReport {
  std::string name;
  std::string instance;
  double reference = 0.0;
  double implementation = 0.0;
  double relative_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  std::string json_line() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "{\"oracle\":\"%s\",\"instance\":\"%s\",\"reference\":%.17g,"
                  "\"implementation\":%.17g,\"relative_error\":%.17g,"
                  "\"tolerance\":%.17g,\"pass\":%s}",
                  name.c_str(), instance.c_str(), reference, implementation,
                  relative_error, tolerance, pass ? "true" : "false");
    return buf;
  }
};

/// Dense reference for the top-d generalized eigenpairs of (a, b).
/// Different code path from gde(): Eigen's GeneralizedSelfAdjointEigenSolver.
inline GdeResult gde_reference(const cmat& a, const cmat& b, Eigen::Index d) {
  Eigen::GeneralizedSelfAdjointEigenSolver<cmat> eig(herm(a), herm(b));
  if (eig.info() != Eigen::Success)
    throw NumericsError("gde_reference: solver failed");
  const Eigen::Index n = a.rows();
  GdeResult out;
  out.vectors.resize(n, d);
  out.values.resize(d);
  for (Eigen::Index k = 0; k < d; ++k) {
    out.values(k) = eig.eigenvalues()(n - 1 - k);
    out.vectors.col(k) = eig.eigenvectors().col(n - 1 - k);
  }
  detail::fix_column_phases(out.vectors);
  return out;
}

/**
 * Central finite differences of a real scalar function of a Hermitian matrix,
 * assembled in the Hermitian basis: entry (i,j) of the result G satisfies
 * df = tr(G dT) for Hermitian perturbations dT. Off-diagonal directions are
 * the symmetric pair e_i e_j^T + e_j e_i^T and its i-scaled skew partner.
 */
inline cmat fd_gradient(const std::function<double(const cmat&)>& f,
                        const cmat& t0, double step = 0.0) {
  const Eigen::Index n = t0.rows();
  if (t0.cols() != n) throw DimensionMismatch("fd_gradient: variable not square");
  const double h = step > 0.0 ? step : 1e-6 * (1.0 + t0.norm());

  cmat g = cmat::Zero(n, n);
  cmat dir = cmat::Zero(n, n);
  auto central = [&](const cmat& d) {
    return (f(t0 + h * d) - f(t0 - h * d)) / (2.0 * h);
  };
  for (Eigen::Index i = 0; i < n; ++i) {
    dir.setZero();
    dir(i, i) = 1.0;
    g(i, i) = central(dir);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      dir.setZero();
      dir(i, j) = 1.0;
      dir(j, i) = 1.0;
      double re = central(dir);  // = 2 Re g_ij for Hermitian g
      dir(i, j) = cxd(0.0, 1.0);
      dir(j, i) = cxd(0.0, -1.0);
      double im = central(dir);  // = 2 Im g_ij
      g(i, j) = 0.5 * cxd(re, im);
      g(j, i) = std::conj(g(i, j));
    }
  }
  return g;
}

/// Sample covariance of a zero-mean complex signal plus a rough standard
/// error of its Frobenius norm, from per-entry second moments.
struct McCovariance {
  cmat cov;
  double standard_error = 0.0;
  long samples = 0;
};

inline McCovariance mc_covariance(const std::function<cvec()>& sampler,
                                  long samples) {
  if (samples < 10000)
    throw NumericsError("mc_covariance: need at least 10000 samples");
  cvec y0 = sampler();
  const Eigen::Index n = y0.size();
  cmat sum = cmat::Zero(n, n);
  rmat m2 = rmat::Zero(n, n);  // accumulates |y_i|^2 |y_j|^2
  auto accumulate = [&](const cvec& y) {
    sum.noalias() += y * y.adjoint();
    rvec p = y.cwiseAbs2();
    m2.noalias() += p * p.transpose();
  };
  accumulate(y0);
  for (long s = 1; s < samples; ++s) accumulate(sampler());

  McCovariance out;
  out.samples = samples;
  out.cov = herm(sum / double(samples));
  double var_sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      double v = m2(i, j) / double(samples) - std::norm(out.cov(i, j));
      var_sum += std::max(v, 0.0) / double(samples);
    }
  out.standard_error = std::sqrt(var_sum);
  return out;
}

/// Exhaustive grid search for a diagonal power matrix maximizing f.
/// Reference for the closed-form water-filling allocation on small cases.
struct GridSearchResult {
  rvec powers;
  double value = -std::numeric_limits<double>::infinity();
};

inline GridSearchResult power_grid_search(
    const std::function<double(const rvec&)>& f, Eigen::Index dims,
    double pmax, int points_per_dim) {
  if (dims < 1 || dims > 2)
    throw DimensionMismatch("power_grid_search: 1 or 2 dimensions only");
  GridSearchResult best;
  best.powers = rvec::Zero(dims);
  rvec p(dims);
  const double dp = pmax / double(points_per_dim - 1);
  if (dims == 1) {
    for (int i = 0; i < points_per_dim; ++i) {
      p(0) = i * dp;
      double v = f(p);
      if (v > best.value) { best.value = v; best.powers = p; }
    }
    return best;
  }
  for (int i = 0; i < points_per_dim; ++i)
    for (int j = 0; j < points_per_dim; ++j) {
      p(0) = i * dp;
      p(1) = j * dp;
      double v = f(p);
      if (v > best.value) { best.value = v; best.powers = p; }
    }
  return best;
}

/**
 * Stationarity residuals of the per-variable first-order conditions, fed with
 * explicitly assembled pencil matrices so the caller (not this file) decides
 * how those were built.
 *
 * Digital condition, UL or DL alike once the DL pencil is projected through
 * the analog beamformer: w s1 X (I + X^H s1 X)^-1 - s2 X = 0 where X is the
 * digital beamformer with powers folded in.
 */
inline double kkt_residual_digital(const cmat& s1, const cmat& s2,
                                   const cmat& x, double w) {
  const Eigen::Index d = x.cols();
  cmat inner = cmat::Identity(d, d) + x.adjoint() * s1 * x;
  cmat lhs = w * s1 * x * inner.inverse();
  cmat rhs = s2 * x;
  double scale = std::max({lhs.norm(), rhs.norm(), 1e-300});
  return (lhs - rhs).norm() / scale;
}

/// Analog-beamformer stationarity: sum_j (w_j s1_j W Y_j - s2_j W V_j V_j^H)
/// with Y_j = V_j (I + V_j^H W^H s1_j W V_j)^-1 V_j^H.
inline double kkt_residual_analog(const std::vector<cmat>& s1,
                                  const std::vector<cmat>& s2,
                                  const std::vector<cmat>& v,
                                  const std::vector<double>& w, const cmat& wb) {
  cmat acc = cmat::Zero(wb.rows(), wb.cols());
  double scale = 1e-300;
  for (size_t j = 0; j < v.size(); ++j) {
    const Eigen::Index d = v[j].cols();
    cmat inner =
        cmat::Identity(d, d) + v[j].adjoint() * wb.adjoint() * s1[j] * wb * v[j];
    cmat y = v[j] * inner.inverse() * v[j].adjoint();
    cmat lhs = w[j] * s1[j] * wb * y;
    cmat rhs = s2[j] * wb * v[j] * v[j].adjoint();
    acc += lhs - rhs;
    scale = std::max({scale, lhs.norm(), rhs.norm()});
  }
  return acc.norm() / scale;
}

/// Complementary slackness |mu * (budget - used)| normalized by the budget.
inline double slackness_residual(double multiplier, double budget, double used) {
  return std::abs(multiplier * (budget - used)) / std::max(budget, 1e-300);
}

// ---------------------------------------------------------------------------
// Signal-level Monte-Carlo reference for the received covariances. Samples
// the receive equations directly from the beamformer state and channels. The
// distortion terms need diag(tx covariance) and diag(Phi) as variances; both
// are estimated empirically in earlier passes, so nothing here touches the
// closed-form assembly under test.
// ---------------------------------------------------------------------------

namespace detail {

/// One network-wide shot of undistorted transmit signals.
struct NetShot {
  std::vector<cvec> x;                 // [c] BS emission, length M_c
  std::vector<std::vector<cvec>> t;    // [c][k] UL user emission
};

inline NetShot draw_shot(Rng& rng, const BeamformerState& s) {
  NetShot shot;
  const size_t bb = s.analog_tx.size();
  shot.x.resize(bb);
  shot.t.resize(bb);
  for (size_t c = 0; c < bb; ++c) {
    cvec x = cvec::Zero(s.analog_tx[c].rows());
    for (size_t j = 0; j < s.digital_dl[c].size(); ++j) {
      const cmat& v = s.digital_dl[c][j];
      cvec sym(v.cols());
      for (Eigen::Index i = 0; i < sym.size(); ++i)
        sym(i) = std::sqrt(s.power_dl[c][j](i)) * rng.cgauss();
      x.noalias() += s.analog_tx[c] * (v * sym);
    }
    shot.x[c] = x;
    shot.t[c].resize(s.digital_ul[c].size());
    for (size_t k = 0; k < s.digital_ul[c].size(); ++k) {
      const cmat& u = s.digital_ul[c][k];
      cvec sym(u.cols());
      for (Eigen::Index i = 0; i < sym.size(); ++i)
        sym(i) = std::sqrt(s.power_ul[c][k](i)) * rng.cgauss();
      shot.t[c][k] = u * sym;
    }
  }
  return shot;
}

/// Adds CN(0, coeff * diag_var) entrywise distortion to a signal.
inline cvec distort(Rng& rng, const cvec& sig, const rvec& diag_var, double coeff) {
  cvec out = sig;
  for (Eigen::Index i = 0; i < sig.size(); ++i)
    out(i) += std::sqrt(coeff * diag_var(i)) * rng.cgauss();
  return out;
}

/// Empirical per-entry powers of every transmit signal (pass one: the
/// variances that shape the transmit distortions).
struct TxDiagEstimate {
  std::vector<rvec> x;                 // [c]
  std::vector<std::vector<rvec>> t;    // [c][k]
};

inline TxDiagEstimate estimate_tx_diags(Rng& rng, const BeamformerState& s,
                                        long samples) {
  TxDiagEstimate est;
  const size_t bb = s.analog_tx.size();
  est.x.resize(bb);
  est.t.resize(bb);
  for (size_t c = 0; c < bb; ++c) {
    est.x[c] = rvec::Zero(s.analog_tx[c].rows());
    est.t[c].resize(s.digital_ul[c].size());
    for (size_t k = 0; k < s.digital_ul[c].size(); ++k)
      est.t[c][k] = rvec::Zero(s.digital_ul[c][k].rows());
  }
  for (long n = 0; n < samples; ++n) {
    NetShot shot = draw_shot(rng, s);
    for (size_t c = 0; c < bb; ++c) {
      est.x[c] += shot.x[c].cwiseAbs2();
      for (size_t k = 0; k < est.t[c].size(); ++k)
        est.t[c][k] += shot.t[c][k].cwiseAbs2();
    }
  }
  for (size_t c = 0; c < bb; ++c) {
    est.x[c] /= double(samples);
    for (size_t k = 0; k < est.t[c].size(); ++k) est.t[c][k] /= double(samples);
  }
  return est;
}

}  // namespace detail

/**
 * Monte-Carlo reference for the DL received covariance R_{j_b}. Pass one
 * estimates the transmit-signal diagonals (distortion shaping), pass two the
 * victim's undistorted received diagonal (receive-distortion shaping), pass
 * three accumulates the distorted received covariance.
 */
inline McCovariance mc_rx_cov_dl(Rng& rng, const BeamformerState& s,
                                 const ChannelSet& ch, const NoiseProfile& noise,
                                 int b, int j, long samples) {
  detail::TxDiagEstimate est = detail::estimate_tx_diags(rng, s, samples);
  const double sigma2 = noise.dl_sigma2[size_t(b)][size_t(j)];
  const double beta = noise.dl_rx_beta[size_t(b)][size_t(j)];
  const Eigen::Index ny = ch.dl(b, j).rows();

  auto propagate = [&](bool thermal) {
    detail::NetShot shot = detail::draw_shot(rng, s);
    cvec y = cvec::Zero(ny);
    for (int c = 0; c < ch.cells(); ++c) {
      const cmat& hb = (c == b) ? ch.dl(b, j) : ch.bs_dl(b, j, c);
      y.noalias() += hb * detail::distort(rng, shot.x[size_t(c)], est.x[size_t(c)],
                                          noise.bs_tx_k[size_t(c)]);
      for (int k = 0; k < ch.ul_users(); ++k)
        y.noalias() += ch.ci(b, j, c, k) *
                       detail::distort(rng, shot.t[size_t(c)][size_t(k)],
                                       est.t[size_t(c)][size_t(k)],
                                       noise.ul_tx_k[size_t(c)][size_t(k)]);
    }
    if (thermal)
      for (Eigen::Index i = 0; i < ny; ++i) y(i) += std::sqrt(sigma2) * rng.cgauss();
    return y;
  };

  // Pass two: diag(Phi), the undistorted received power per antenna.
  rvec phi_diag = rvec::Zero(ny);
  for (long n = 0; n < samples; ++n)
    phi_diag += propagate(noise.phi_includes_noise).cwiseAbs2();
  phi_diag /= double(samples);

  // Pass three: full receive equation with both distortion stages.
  auto sampler = [&]() {
    cvec y = propagate(true);
    return cvec(detail::distort(rng, y, phi_diag, beta));
  };
  return mc_covariance(sampler, samples);
}

/// Monte-Carlo reference for the UL covariances of BS b: antenna-level R^a
/// and RF-chain-level R (the latter includes the combiner's distortion).
struct McUlCov {
  McCovariance antenna;
  McCovariance rf;
};

inline McUlCov mc_rx_cov_ul(Rng& rng, const BeamformerState& s,
                            const ChannelSet& ch, const NoiseProfile& noise,
                            int b, long samples) {
  detail::TxDiagEstimate est = detail::estimate_tx_diags(rng, s, samples);
  const double sigma2 = noise.bs_sigma2[size_t(b)];
  const double beta = noise.bs_rx_beta[size_t(b)];
  const cmat f = s.analog_rx[size_t(b)];
  const Eigen::Index na = ch.si(b).rows();

  auto propagate = [&](bool thermal) {
    detail::NetShot shot = detail::draw_shot(rng, s);
    cvec y = cvec::Zero(na);
    for (int c = 0; c < ch.cells(); ++c) {
      const cmat& hb = (c == b) ? ch.si(b) : ch.bs_bs(b, c);
      y.noalias() += hb * detail::distort(rng, shot.x[size_t(c)], est.x[size_t(c)],
                                          noise.bs_tx_k[size_t(c)]);
      for (int k = 0; k < ch.ul_users(); ++k) {
        const cmat& hu = (c == b) ? ch.ul(b, k) : ch.ul_bs(b, c, k);
        y.noalias() += hu * detail::distort(rng, shot.t[size_t(c)][size_t(k)],
                                            est.t[size_t(c)][size_t(k)],
                                            noise.ul_tx_k[size_t(c)][size_t(k)]);
      }
    }
    if (thermal)
      for (Eigen::Index i = 0; i < na; ++i) y(i) += std::sqrt(sigma2) * rng.cgauss();
    return y;
  };

  McUlCov out;
  out.antenna = mc_covariance([&]() { return propagate(true); }, samples);

  // RF-level distortion shaping: diag of the undistorted combined signal.
  rvec phi_diag = rvec::Zero(f.cols());
  for (long n = 0; n < samples; ++n)
    phi_diag += cvec(f.adjoint() * propagate(noise.phi_includes_noise)).cwiseAbs2();
  phi_diag /= double(samples);

  auto rf_sampler = [&]() {
    cvec y = cvec(f.adjoint() * propagate(true));
    return cvec(detail::distort(rng, y, phi_diag, beta));
  };
  out.rf = mc_covariance(rf_sampler, samples);
  return out;
}

}  // namespace hybf::oracle

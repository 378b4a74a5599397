#pragma once
/**
 * @file model.hpp
 * @brief Beamformer state, limited-dynamic-range noise covariances,
 *        received-covariance assembly, weighted sum rate, and the analog
 *        constraint projections (unit modulus, discrete phases).
 *
 * Conventions that the rest of the library leans on:
 *  - Digital beamformers keep unit-norm columns; the diagonal power matrices
 *    are stored separately and folded in only when forming transmit
 *    covariances. Normalize-then-allocate is the update order everywhere.
 *  - The analog combiner F is stored tall (antennas x RF chains) and applied
 *    as F^H on receive.
 *  - Transmit distortion adds k * diag(tx covariance) at the emitter;
 *    receive distortion adds beta * diag(Phi) at the victim, where Phi is
 *    the undistorted received covariance. Phi includes the thermal term by
 *    default (NoiseProfile::phi_includes_noise); the received covariance R
 *    itself always includes it.
 *  - R - R_bar equals the own-signal term exactly, by construction: both
 *    share the same receive-distortion diagonal.
 */

#include "hybf/scenario.hpp"

namespace hybf {

struct SingularCovariance : NumericsError {
  using NumericsError::NumericsError;
};

/// Per-node distortion coefficients and thermal floors (linear units).
struct NoiseProfile {
  std::vector<double> bs_tx_k;    // [b] transmit distortion at BS b
  std::vector<double> bs_rx_beta; // [b] receive distortion at BS b
  std::vector<double> bs_sigma2;  // [b] thermal at the BS rx array
  std::vector<std::vector<double>> ul_tx_k;    // [b][k]
  std::vector<std::vector<double>> dl_rx_beta; // [b][j]
  std::vector<std::vector<double>> dl_sigma2;  // [b][j]
  bool phi_includes_noise = true;

  static NoiseProfile from_config(const NetworkConfig& cfg) {
    NoiseProfile np;
    const int bb = cfg.num_cells;
    np.bs_tx_k.assign(bb, cfg.ldr_tx_coeff());
    np.bs_rx_beta.assign(bb, cfg.ldr_rx_coeff());
    np.bs_sigma2.assign(bb, cfg.noise_variance());
    np.ul_tx_k.assign(bb, std::vector<double>(cfg.ul_users_per_cell, cfg.ldr_tx_coeff()));
    np.dl_rx_beta.assign(bb, std::vector<double>(cfg.dl_users_per_cell, cfg.ldr_rx_coeff()));
    np.dl_sigma2.assign(bb, std::vector<double>(cfg.dl_users_per_cell, cfg.noise_variance()));
    np.phi_includes_noise = cfg.options.phi_includes_noise;
    return np;
  }
};

/// Per-link rate weights.
struct Weights {
  std::vector<std::vector<double>> ul;  // [b][k]
  std::vector<std::vector<double>> dl;  // [b][j]

  static Weights from_config(const NetworkConfig& cfg) {
    Weights w;
    w.ul.assign(cfg.num_cells, std::vector<double>(cfg.ul_users_per_cell, cfg.rate_weight));
    w.dl.assign(cfg.num_cells, std::vector<double>(cfg.dl_users_per_cell, cfg.rate_weight));
    return w;
  }
};

/**
 * All optimization variables. Powers are the diagonals of the per-link
 * d x d power matrices; multipliers are the Lagrange duals of the UL user
 * and BS sum-power constraints.
 */
struct BeamformerState {
  std::vector<std::vector<cmat>> digital_ul;  // [b][k] M_k x d_k, unit columns
  std::vector<std::vector<cmat>> digital_dl;  // [b][j] M_rf x d_j, unit columns
  std::vector<cmat> analog_tx;                // [b] M_b x M_rf, unit modulus
  std::vector<cmat> analog_rx;                // [b] N_b x N_rf, unit modulus
  std::vector<std::vector<rvec>> power_ul;    // [b][k] length d_k
  std::vector<std::vector<rvec>> power_dl;    // [b][j] length d_j
  std::vector<std::vector<double>> multiplier_ul;  // [b][k]
  std::vector<double> multiplier_dl;               // [b]
};

/// Real nonnegative diagonal folded back into a complex matrix.
inline cmat diag_of(const cmat& m) {
  return cmat(m.diagonal().asDiagonal());
}

/// T_{k_b} = U P U^H, the UL user's transmit covariance.
inline cmat tx_cov_ul(const BeamformerState& s, int b, int k) {
  const cmat& u = s.digital_ul[size_t(b)][size_t(k)];
  const rvec& p = s.power_ul[size_t(b)][size_t(k)];
  if (p.size() != u.cols()) throw DimensionMismatch("tx_cov_ul: power length != streams");
  return u * p.asDiagonal() * u.adjoint();
}

/// Q_{j_b} = W V P V^H W^H, one DL user's transmit covariance at the antennas.
inline cmat tx_cov_dl(const BeamformerState& s, int b, int j) {
  const cmat& w = s.analog_tx[size_t(b)];
  const cmat& v = s.digital_dl[size_t(b)][size_t(j)];
  const rvec& p = s.power_dl[size_t(b)][size_t(j)];
  if (p.size() != v.cols()) throw DimensionMismatch("tx_cov_dl: power length != streams");
  if (w.cols() != v.rows()) throw DimensionMismatch("tx_cov_dl: analog/digital shape");
  cmat wv = w * v;
  return wv * p.asDiagonal() * wv.adjoint();
}

/// Q_b = sum_j Q_{j_b}, the whole BS emission before distortion.
inline cmat bs_tx_cov(const BeamformerState& s, int b) {
  const cmat& w = s.analog_tx[size_t(b)];
  cmat q = cmat::Zero(w.rows(), w.rows());
  for (size_t j = 0; j < s.digital_dl[size_t(b)].size(); ++j)
    q += tx_cov_dl(s, b, int(j));
  return q;
}

struct TxCovariances {
  std::vector<std::vector<cmat>> t;  // [b][k]
  std::vector<std::vector<cmat>> q;  // [b][j]
  std::vector<cmat> q_bs;            // [b]
};

inline TxCovariances tx_covariances(const BeamformerState& s) {
  TxCovariances out;
  const size_t bb = s.analog_tx.size();
  out.t.resize(bb);
  out.q.resize(bb);
  out.q_bs.resize(bb);
  for (size_t b = 0; b < bb; ++b) {
    out.t[b].resize(s.digital_ul[b].size());
    for (size_t k = 0; k < s.digital_ul[b].size(); ++k)
      out.t[b][k] = tx_cov_ul(s, int(b), int(k));
    out.q[b].resize(s.digital_dl[b].size());
    cmat acc = cmat::Zero(s.analog_tx[b].rows(), s.analog_tx[b].rows());
    for (size_t j = 0; j < s.digital_dl[b].size(); ++j) {
      out.q[b][j] = tx_cov_dl(s, int(b), int(j));
      acc += out.q[b][j];
    }
    out.q_bs[b] = acc;
  }
  return out;
}

/// What a node actually radiates: covariance plus its transmit distortion.
inline cmat emission(const cmat& tx_cov, double k_tx) {
  return tx_cov + k_tx * diag_of(tx_cov);
}

struct DlCovPair {
  cmat r;     // received covariance at the DL user
  cmat rbar;  // same minus the own-signal term
};

struct UlCovQuad {
  cmat r;       // RF-chain level, distortion included
  cmat rbar;
  cmat ra;      // antenna level, before the combiner
  cmat ra_bar;
};

namespace detail {

/// Everything cell c radiates into a victim with channel marks: BS part
/// through hb (victim x M_c), UL users through hu[k] (victim x M_k).
/// Shared by the DL and UL assemblies below.
inline void add_cell_emissions(cmat& acc, const TxCovariances& tx,
                               const NoiseProfile& noise, int c, const cmat& hb,
                               const std::vector<const cmat*>& hu) {
  acc.noalias() += hb * emission(tx.q_bs[size_t(c)], noise.bs_tx_k[size_t(c)]) * hb.adjoint();
  for (size_t k = 0; k < hu.size(); ++k)
    acc.noalias() += (*hu[k]) *
                     emission(tx.t[size_t(c)][k], noise.ul_tx_k[size_t(c)][k]) *
                     hu[k]->adjoint();
}

}  // namespace detail

/**
 * Received covariance pair at DL user j of cell b. The signal-plus-transmit-
 * distortion part S collects the serving BS (own signal included), all UL
 * users of every cell, and the other BSs. Then
 *   Phi  = S (+ sigma^2 I when the profile says so),
 *   R    = S + sigma^2 I + beta * diag(Phi),
 *   Rbar = R - H Q_j H^H.
 */
inline DlCovPair rx_cov_dl(int b, int j, const ChannelSet& ch,
                           const NoiseProfile& noise, const TxCovariances& tx) {
  const int bb = ch.cells(), uu = ch.ul_users();
  const cmat& hd = ch.dl(b, j);
  const Eigen::Index n = hd.rows();

  cmat sig = cmat::Zero(n, n);
  for (int c = 0; c < bb; ++c) {
    const cmat& hb = (c == b) ? hd : ch.bs_dl(b, j, c);
    std::vector<const cmat*> hu(static_cast<size_t>(uu));
    for (int k = 0; k < uu; ++k) hu[size_t(k)] = &ch.ci(b, j, c, k);
    detail::add_cell_emissions(sig, tx, noise, c, hb, hu);
  }

  const double sigma2 = noise.dl_sigma2[size_t(b)][size_t(j)];
  const double beta = noise.dl_rx_beta[size_t(b)][size_t(j)];
  cmat phi = sig;
  if (noise.phi_includes_noise) phi += sigma2 * cmat::Identity(n, n);
  cmat r = sig + sigma2 * cmat::Identity(n, n) + beta * diag_of(phi);
  cmat own = hd * tx.q[size_t(b)][size_t(j)] * hd.adjoint();
  DlCovPair out;
  out.r = herm(r);
  out.rbar = herm(r - own);
  return out;
}

inline DlCovPair rx_cov_dl(int b, int j, const BeamformerState& s,
                           const ChannelSet& ch, const NoiseProfile& noise) {
  return rx_cov_dl(b, j, ch, noise, tx_covariances(s));
}

/**
 * Antenna-level received covariance at BS b (identical for every UL user of
 * the cell): in-cell UL signals, the self-interference loop carrying the
 * whole BS emission, and every other cell's BS and UL users, plus thermal.
 */
inline cmat ul_antenna_cov(int b, const ChannelSet& ch, const NoiseProfile& noise,
                           const TxCovariances& tx) {
  const int bb = ch.cells(), uu = ch.ul_users();
  const Eigen::Index n = ch.si(b).rows();

  cmat sig = cmat::Zero(n, n);
  for (int c = 0; c < bb; ++c) {
    const cmat& hb = (c == b) ? ch.si(b) : ch.bs_bs(b, c);
    std::vector<const cmat*> hu(static_cast<size_t>(uu));
    for (int k = 0; k < uu; ++k)
      hu[size_t(k)] = (c == b) ? &ch.ul(b, k) : &ch.ul_bs(b, c, k);
    detail::add_cell_emissions(sig, tx, noise, c, hb, hu);
  }
  return herm(sig + noise.bs_sigma2[size_t(b)] * cmat::Identity(n, n));
}

/**
 * Received covariances for UL user k of cell b, antenna level and RF-chain
 * level. The combiner's receive distortion beta_b * diag(Phi_b) sits outside
 * F^H and is shared between R and Rbar, so R - Rbar = F^H H T H^H F exactly.
 * The antenna-level covariance ra is computed once per BS by the caller
 * (ul_antenna_cov) since it is user-independent.
 */
inline UlCovQuad rx_cov_ul(int b, int k, const ChannelSet& ch,
                           const NoiseProfile& noise, const TxCovariances& tx,
                           const cmat& f, const cmat& ra) {
  UlCovQuad out;
  out.ra = ra;
  const cmat& hk = ch.ul(b, k);
  cmat own = hk * tx.t[size_t(b)][size_t(k)] * hk.adjoint();
  out.ra_bar = herm(out.ra - own);

  const double beta = noise.bs_rx_beta[size_t(b)];
  cmat phi_rf;
  if (noise.phi_includes_noise) {
    phi_rf = f.adjoint() * out.ra * f;
  } else {
    const Eigen::Index n = out.ra.rows();
    cmat ra_no_noise = out.ra - noise.bs_sigma2[size_t(b)] * cmat::Identity(n, n);
    phi_rf = f.adjoint() * ra_no_noise * f;
  }
  cmat distort = beta * diag_of(phi_rf);
  out.r = herm(f.adjoint() * out.ra * f + distort);
  out.rbar = herm(f.adjoint() * out.ra_bar * f + distort);
  return out;
}

inline UlCovQuad rx_cov_ul(int b, int k, const BeamformerState& s,
                           const ChannelSet& ch, const NoiseProfile& noise) {
  TxCovariances tx = tx_covariances(s);
  cmat ra = ul_antenna_cov(b, ch, noise, tx);
  return rx_cov_ul(b, k, ch, noise, tx, s.analog_rx[size_t(b)], ra);
}

/// log det via Cholesky with one regularization retry.
inline double lndet_psd(const cmat& a) {
  auto attempt = [](const cmat& m) {
    cmat l = cholesky_factor(m);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < l.rows(); ++i)
      acc += 2.0 * std::log(l(i, i).real());
    return acc;
  };
  try {
    return attempt(a);
  } catch (const NotPositiveDefinite&) {
    const double eps = 1e-12 * a.real().trace() / double(a.rows());
    if (!(eps > 0.0))
      throw SingularCovariance("lndet: covariance has non-positive trace");
    try {
      return attempt(a + eps * cmat::Identity(a.rows(), a.cols()));
    } catch (const NotPositiveDefinite&) {
      throw SingularCovariance("lndet: covariance singular after regularization");
    }
  }
}

/// One link's rate in nats: lndet(R) - lndet(Rbar).
inline double rate_nats(const cmat& r, const cmat& rbar) {
  return lndet_psd(r) - lndet_psd(rbar);
}

/// Weighted sum rate over every UL and DL link in the network.
inline double wsr(const BeamformerState& s, const ChannelSet& ch,
                  const NoiseProfile& noise, const Weights& w) {
  const TxCovariances tx = tx_covariances(s);
  double acc = 0.0;
  for (int b = 0; b < ch.cells(); ++b) {
    if (ch.ul_users() > 0) {
      cmat ra = ul_antenna_cov(b, ch, noise, tx);
      for (int k = 0; k < ch.ul_users(); ++k) {
        UlCovQuad c = rx_cov_ul(b, k, ch, noise, tx, s.analog_rx[size_t(b)], ra);
        acc += w.ul[size_t(b)][size_t(k)] * rate_nats(c.r, c.rbar);
      }
    }
    for (int j = 0; j < ch.dl_users(); ++j) {
      DlCovPair c = rx_cov_dl(b, j, ch, noise, tx);
      acc += w.dl[size_t(b)][size_t(j)] * rate_nats(c.r, c.rbar);
    }
  }
  return acc;
}

/**
 * Entrywise phase projection. Zero entries have no phase; they are set to +1
 * and counted through zero_count (the paper-side derivation is silent on
 * them, and +1 keeps the matrix on the constraint set).
 */
inline cmat project_unit_modulus(const cmat& m, int* zero_count = nullptr) {
  cmat out(m.rows(), m.cols());
  int zeros = 0;
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      double mag = std::abs(m(i, j));
      if (mag == 0.0) {
        out(i, j) = 1.0;
        ++zeros;
      } else {
        out(i, j) = m(i, j) / mag;
      }
    }
  if (zero_count) *zero_count = zeros;
  return out;
}

/**
 * Snap unit-modulus entries to the 2^bits-point phase grid
 * { exp(i 2 pi l / 2^bits) }, nearest point, exact ties to the lower index.
 */
inline cmat quantize_phases(const cmat& m, int bits) {
  const long levels = 1L << bits;
  const double step = 2.0 * kPi / double(levels);
  cmat out(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      double theta = std::arg(m(i, j));  // (-pi, pi]
      if (theta < 0.0) theta += 2.0 * kPi;
      double q = theta / step;
      double nearest = std::floor(q + 0.5);
      if (q + 0.5 == nearest) nearest = std::floor(q);  // tie: lower index
      long l = long(nearest) % levels;
      out(i, j) = std::exp(cxd(0.0, step * double(l)));
    }
  return out;
}

/// Per-constraint residuals; negative power residuals mean strictly feasible.
struct ConstraintReport {
  std::vector<std::vector<double>> ul_power_residual;  // [b][k] tr(T) - budget
  std::vector<double> dl_power_residual;               // [b] tr(Q_b) - budget
  double max_modulus_error = 0.0;   // max | |entry| - 1 | over analog parts
  double max_grid_distance = 0.0;   // max phase distance to the quantizer grid
};

inline ConstraintReport check_constraints(const BeamformerState& s,
                                          const NetworkConfig& cfg) {
  ConstraintReport rep;
  const int bb = cfg.num_cells;
  rep.ul_power_residual.resize(size_t(bb));
  rep.dl_power_residual.resize(size_t(bb));
  for (int b = 0; b < bb; ++b) {
    rep.ul_power_residual[size_t(b)].resize(s.digital_ul[size_t(b)].size());
    for (size_t k = 0; k < s.digital_ul[size_t(b)].size(); ++k)
      rep.ul_power_residual[size_t(b)][k] =
          tx_cov_ul(s, b, int(k)).real().trace() - cfg.ul_power;
    rep.dl_power_residual[size_t(b)] =
        bs_tx_cov(s, b).real().trace() - cfg.bs_power;

    for (const cmat* a : {&s.analog_tx[size_t(b)], &s.analog_rx[size_t(b)]}) {
      cmat snapped = quantize_phases(project_unit_modulus(*a), cfg.phase_bits);
      for (Eigen::Index jj = 0; jj < a->cols(); ++jj)
        for (Eigen::Index ii = 0; ii < a->rows(); ++ii) {
          rep.max_modulus_error = std::max(
              rep.max_modulus_error, std::abs(std::abs((*a)(ii, jj)) - 1.0));
          double d = std::abs(std::arg((*a)(ii, jj) * std::conj(snapped(ii, jj))));
          rep.max_grid_distance = std::max(rep.max_grid_distance, d);
        }
    }
  }
  return rep;
}

namespace detail {

/// Top-d eigenvectors of a Hermitian PSD Gram matrix, unit columns.
inline cmat dominant_eigvecs(const cmat& gram, Eigen::Index d) {
  GdeResult r = gde({herm(gram), cmat::Identity(gram.rows(), gram.cols())}, d);
  cmat v = r.vectors;
  for (Eigen::Index c = 0; c < v.cols(); ++c) v.col(c) /= v.col(c).norm();
  return v;
}

}  // namespace detail

/**
 * Deterministic starting point: analog parts are phase projections of the
 * dominant eigenvectors of the summed served-channel Grams, digital parts
 * the dominant eigenvectors of their effective channel Grams, powers uniform
 * and meeting each budget with equality, multipliers zero.
 */
inline BeamformerState init_state(const NetworkConfig& cfg, const ChannelSet& ch) {
  const int bb = cfg.num_cells, dd = cfg.dl_users_per_cell, uu = cfg.ul_users_per_cell;
  BeamformerState s;
  s.digital_ul.resize(size_t(bb));
  s.digital_dl.resize(size_t(bb));
  s.analog_tx.resize(size_t(bb));
  s.analog_rx.resize(size_t(bb));
  s.power_ul.resize(size_t(bb));
  s.power_dl.resize(size_t(bb));
  s.multiplier_ul.assign(size_t(bb), std::vector<double>(size_t(uu), 0.0));
  s.multiplier_dl.assign(size_t(bb), 0.0);

  for (int b = 0; b < bb; ++b) {
    // Analog transmit: dominant directions of the summed DL channel Gram.
    cmat gram_tx = cmat::Zero(cfg.bs_tx_antennas, cfg.bs_tx_antennas);
    for (int j = 0; j < dd; ++j)
      gram_tx += ch.dl(b, j).adjoint() * ch.dl(b, j);
    if (dd == 0) gram_tx = cmat::Identity(cfg.bs_tx_antennas, cfg.bs_tx_antennas);
    s.analog_tx[size_t(b)] =
        project_unit_modulus(detail::dominant_eigvecs(gram_tx, cfg.bs_tx_rf));

    // Analog receive: dominant directions of the summed UL channel Gram.
    cmat gram_rx = cmat::Zero(cfg.bs_rx_antennas, cfg.bs_rx_antennas);
    for (int k = 0; k < uu; ++k)
      gram_rx += ch.ul(b, k) * ch.ul(b, k).adjoint();
    if (uu == 0) gram_rx = cmat::Identity(cfg.bs_rx_antennas, cfg.bs_rx_antennas);
    s.analog_rx[size_t(b)] =
        project_unit_modulus(detail::dominant_eigvecs(gram_rx, cfg.bs_rx_rf));

    // Digital UL: dominant eigenvectors of H^H H per user.
    s.digital_ul[size_t(b)].resize(size_t(uu));
    s.power_ul[size_t(b)].resize(size_t(uu));
    for (int k = 0; k < uu; ++k) {
      cmat gram = ch.ul(b, k).adjoint() * ch.ul(b, k);
      s.digital_ul[size_t(b)][size_t(k)] = detail::dominant_eigvecs(gram, cfg.ul_streams);
      s.power_ul[size_t(b)][size_t(k)] =
          rvec::Constant(cfg.ul_streams, cfg.ul_power / double(cfg.ul_streams));
    }

    // Digital DL: dominant eigenvectors of the analog-projected channel Gram.
    s.digital_dl[size_t(b)].resize(size_t(dd));
    s.power_dl[size_t(b)].resize(size_t(dd));
    double norm_acc = 0.0;
    for (int j = 0; j < dd; ++j) {
      cmat heff = ch.dl(b, j) * s.analog_tx[size_t(b)];
      s.digital_dl[size_t(b)][size_t(j)] =
          detail::dominant_eigvecs(cmat(heff.adjoint() * heff), cfg.dl_streams);
      for (int c = 0; c < cfg.dl_streams; ++c)
        norm_acc += (s.analog_tx[size_t(b)] *
                     s.digital_dl[size_t(b)][size_t(j)].col(c)).squaredNorm();
    }
    // One shared power level: trace of the BS emission meets the budget.
    double level = (norm_acc > 0.0) ? cfg.bs_power / norm_acc : 0.0;
    for (int j = 0; j < dd; ++j)
      s.power_dl[size_t(b)][size_t(j)] = rvec::Constant(cfg.dl_streams, level);
  }
  return s;
}

/// Random feasible state for tests and oracle instances: Haar-ish unit
/// columns, random phases on the analog parts, budgets met with equality.
inline BeamformerState random_feasible_state(Rng& rng, const NetworkConfig& cfg) {
  auto randn = [&rng](Eigen::Index r, Eigen::Index c) {
    cmat m(r, c);
    for (Eigen::Index jj = 0; jj < c; ++jj)
      for (Eigen::Index ii = 0; ii < r; ++ii) m(ii, jj) = rng.cgauss();
    return m;
  };
  auto unit_cols = [&](Eigen::Index r, Eigen::Index c) {
    Eigen::HouseholderQR<cmat> qr(randn(r, c));
    cmat q = cmat(qr.householderQ()).leftCols(c);
    return q;
  };
  auto phases = [&](Eigen::Index r, Eigen::Index c) {
    cmat m(r, c);
    for (Eigen::Index jj = 0; jj < c; ++jj)
      for (Eigen::Index ii = 0; ii < r; ++ii)
        m(ii, jj) = std::exp(cxd(0.0, rng.uniform(0.0, 2.0 * kPi)));
    return m;
  };

  const int bb = cfg.num_cells, dd = cfg.dl_users_per_cell, uu = cfg.ul_users_per_cell;
  BeamformerState s;
  s.digital_ul.resize(size_t(bb));
  s.digital_dl.resize(size_t(bb));
  s.analog_tx.resize(size_t(bb));
  s.analog_rx.resize(size_t(bb));
  s.power_ul.resize(size_t(bb));
  s.power_dl.resize(size_t(bb));
  s.multiplier_ul.assign(size_t(bb), std::vector<double>(size_t(uu), 0.0));
  s.multiplier_dl.assign(size_t(bb), 0.0);
  for (int b = 0; b < bb; ++b) {
    s.analog_tx[size_t(b)] = phases(cfg.bs_tx_antennas, cfg.bs_tx_rf);
    s.analog_rx[size_t(b)] = phases(cfg.bs_rx_antennas, cfg.bs_rx_rf);
    s.digital_ul[size_t(b)].resize(size_t(uu));
    s.power_ul[size_t(b)].resize(size_t(uu));
    for (int k = 0; k < uu; ++k) {
      s.digital_ul[size_t(b)][size_t(k)] = unit_cols(cfg.ul_user_antennas, cfg.ul_streams);
      rvec p(cfg.ul_streams);
      for (int i = 0; i < cfg.ul_streams; ++i) p(i) = rng.uniform(0.5, 1.5);
      s.power_ul[size_t(b)][size_t(k)] = p * (cfg.ul_power / p.sum());
    }
    s.digital_dl[size_t(b)].resize(size_t(dd));
    s.power_dl[size_t(b)].resize(size_t(dd));
    double acc = 0.0;
    std::vector<rvec> raw(static_cast<size_t>(dd));
    for (int j = 0; j < dd; ++j) {
      s.digital_dl[size_t(b)][size_t(j)] = unit_cols(cfg.bs_tx_rf, cfg.dl_streams);
      rvec p(cfg.dl_streams);
      for (int i = 0; i < cfg.dl_streams; ++i) p(i) = rng.uniform(0.5, 1.5);
      raw[size_t(j)] = p;
      for (int i = 0; i < cfg.dl_streams; ++i)
        acc += p(i) * (s.analog_tx[size_t(b)] *
                       s.digital_dl[size_t(b)][size_t(j)].col(i)).squaredNorm();
    }
    for (int j = 0; j < dd; ++j)
      s.power_dl[size_t(b)][size_t(j)] =
          (acc > 0.0) ? rvec(raw[size_t(j)] * (cfg.bs_power / acc)) : raw[size_t(j)];
  }
  return s;
}

}  // namespace hybf

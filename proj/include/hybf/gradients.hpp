#pragma once

/**
 * Interference gradients and minorization pencils.
 *
 * Every transmit covariance in the network leaks into every receiver, both
 * directly and through the transmit and receive distortion diagonals. The
 * weighted sum rate is minorized by keeping each link's own lndet term and
 * linearizing everything else; the linear coefficients are the eight
 * per-link gradient matrices assembled here. The same code also builds the
 * per-cell local variables used by the distributed solver, so feedback-based
 * and centralized pencils agree by construction.
 */

#include <vector>

#include "hybf/model.hpp"
#include "hybf/numerics.hpp"

namespace hybf {

/**
 * One full covariance snapshot of the network plus the derived quantities
 * every gradient row needs: inverses of the interference covariances and the
 * per-victim sensitivity matrices at the receiving antenna reference.
 *
 * For a victim with covariances (R, Rbar), the sensitivity is
 *   M + beta * diag(M),  M = Rbar^{-1} - R^{-1},
 * sandwiched by the combiner (F (..) F^H) for uplink victims so that all
 * leak computations happen at the transmitter-facing antenna level.
 */
struct NetworkCovariances {
  TxCovariances tx;
  std::vector<cmat> ra;                        // per BS, antenna level
  std::vector<std::vector<UlCovQuad>> ul;      // [cell][ul user]
  std::vector<std::vector<DlCovPair>> dl;      // [cell][dl user]
  std::vector<std::vector<cmat>> ul_rbar_inv;  // RF-chain level
  std::vector<std::vector<cmat>> dl_rbar_inv;  // user antenna level
  std::vector<std::vector<cmat>> ul_sens;      // BS antenna level
  std::vector<std::vector<cmat>> dl_sens;      // user antenna level
};

namespace detail {

/// Inverse of a Hermitian positive definite covariance via Cholesky.
inline cmat psd_inverse(const cmat& m) {
  Eigen::LLT<cmat> llt(m);
  if (llt.info() != Eigen::Success)
    throw SingularCovariance("psd_inverse: covariance not positive definite");
  return llt.solve(cmat::Identity(m.rows(), m.cols()));
}

/**
 * Gradient of one victim's weighted rate with respect to the transmit
 * covariance of an interfering link, taken with the minus sign used by the
 * minorizer:
 *   w * [A^H S A + k_tx * diag(A^H S A)]
 * where A carries the transmitter to the victim's antennas, S is the
 * victim's sensitivity and k_tx the transmitter's distortion coefficient.
 * The k_tx factor applies to the full sensitivity, so the result is the
 * exact derivative of the victim's rate including all distortion paths.
 */
inline cmat leak_gradient(double w, const cmat& a, const cmat& s, double k_tx) {
  cmat core = a.adjoint() * s * a;
  return w * (core + k_tx * diag_of(core));
}

}  // namespace detail

/// Snapshot used by all gradient assembly; one call covers a full sweep.
inline NetworkCovariances network_covariances(const BeamformerState& s,
                                              const ChannelSet& ch,
                                              const NoiseProfile& noise) {
  const int bb = ch.cells(), dd = ch.dl_users(), uu = ch.ul_users();
  NetworkCovariances nc;
  nc.tx = tx_covariances(s);
  nc.ra.resize(static_cast<size_t>(bb));
  nc.ul.resize(static_cast<size_t>(bb));
  nc.dl.resize(static_cast<size_t>(bb));
  nc.ul_rbar_inv.resize(static_cast<size_t>(bb));
  nc.dl_rbar_inv.resize(static_cast<size_t>(bb));
  nc.ul_sens.resize(static_cast<size_t>(bb));
  nc.dl_sens.resize(static_cast<size_t>(bb));

  for (int b = 0; b < bb; ++b) {
    nc.ra[size_t(b)] = ul_antenna_cov(b, ch, noise, nc.tx);
    nc.ul[size_t(b)].resize(static_cast<size_t>(uu));
    nc.ul_rbar_inv[size_t(b)].resize(static_cast<size_t>(uu));
    nc.ul_sens[size_t(b)].resize(static_cast<size_t>(uu));
    const cmat& f = s.analog_rx[size_t(b)];
    for (int k = 0; k < uu; ++k) {
      UlCovQuad q = rx_cov_ul(b, k, ch, noise, nc.tx, f, nc.ra[size_t(b)]);
      cmat r_inv = detail::psd_inverse(q.r);
      nc.ul_rbar_inv[size_t(b)][size_t(k)] = detail::psd_inverse(q.rbar);
      cmat m = herm(nc.ul_rbar_inv[size_t(b)][size_t(k)] - r_inv);
      double beta = noise.bs_rx_beta[size_t(b)];
      nc.ul_sens[size_t(b)][size_t(k)] = herm(f * (m + beta * diag_of(m)) * f.adjoint());
      nc.ul[size_t(b)][size_t(k)] = std::move(q);
    }

    nc.dl[size_t(b)].resize(static_cast<size_t>(dd));
    nc.dl_rbar_inv[size_t(b)].resize(static_cast<size_t>(dd));
    nc.dl_sens[size_t(b)].resize(static_cast<size_t>(dd));
    for (int j = 0; j < dd; ++j) {
      DlCovPair p = rx_cov_dl(b, j, ch, noise, nc.tx);
      cmat r_inv = detail::psd_inverse(p.r);
      nc.dl_rbar_inv[size_t(b)][size_t(j)] = detail::psd_inverse(p.rbar);
      cmat m = herm(nc.dl_rbar_inv[size_t(b)][size_t(j)] - r_inv);
      double beta = noise.dl_rx_beta[size_t(b)][size_t(j)];
      nc.dl_sens[size_t(b)][size_t(j)] = herm(m + beta * diag_of(m));
      nc.dl[size_t(b)][size_t(j)] = std::move(p);
    }
  }
  return nc;
}

/**
 * The four interference gradients of one link's transmit covariance, split
 * by victim population. Each is Hermitian PSD and sized like the transmit
 * covariance it differentiates (user antennas for UL links, BS transmit
 * antennas for DL links).
 */
struct GradientBundle {
  cmat ul_same_cell;
  cmat dl_same_cell;
  cmat ul_other_cells;
  cmat dl_other_cells;

  cmat sum() const {
    return herm(ul_same_cell + dl_same_cell + ul_other_cells + dl_other_cells);
  }
};

/**
 * Gradients of the minorizer with respect to T of UL user k in cell b.
 * Victims: the cell's other UL users (same channel into BS b, different
 * sensitivities), the cell's DL users (in-cell cross interference), and
 * every UL and DL user of the other cells.
 */
inline GradientBundle gradients_ul_user(int b, int k, const NetworkCovariances& nc,
                                        const ChannelSet& ch, const NoiseProfile& noise,
                                        const Weights& w) {
  const int bb = ch.cells(), dd = ch.dl_users(), uu = ch.ul_users();
  const Eigen::Index mk = ch.ul(b, k).cols();
  const double kt = noise.ul_tx_k[size_t(b)][size_t(k)];

  GradientBundle g;
  g.ul_same_cell = cmat::Zero(mk, mk);
  g.dl_same_cell = cmat::Zero(mk, mk);
  g.ul_other_cells = cmat::Zero(mk, mk);
  g.dl_other_cells = cmat::Zero(mk, mk);

  const cmat& h_bs = ch.ul(b, k);
  for (int m = 0; m < uu; ++m) {
    if (m == k) continue;
    g.ul_same_cell +=
        detail::leak_gradient(w.ul[size_t(b)][size_t(m)], h_bs,
                              nc.ul_sens[size_t(b)][size_t(m)], kt);
  }
  for (int j = 0; j < dd; ++j)
    g.dl_same_cell +=
        detail::leak_gradient(w.dl[size_t(b)][size_t(j)], ch.ci(b, j, b, k),
                              nc.dl_sens[size_t(b)][size_t(j)], kt);
  for (int c = 0; c < bb; ++c) {
    if (c == b) continue;
    for (int m = 0; m < uu; ++m)
      g.ul_other_cells +=
          detail::leak_gradient(w.ul[size_t(c)][size_t(m)], ch.ul_bs(c, b, k),
                                nc.ul_sens[size_t(c)][size_t(m)], kt);
    for (int j = 0; j < dd; ++j)
      g.dl_other_cells +=
          detail::leak_gradient(w.dl[size_t(c)][size_t(j)], ch.ci(c, j, b, k),
                                nc.dl_sens[size_t(c)][size_t(j)], kt);
  }
  g.ul_same_cell = herm(g.ul_same_cell);
  g.dl_same_cell = herm(g.dl_same_cell);
  g.ul_other_cells = herm(g.ul_other_cells);
  g.dl_other_cells = herm(g.dl_other_cells);
  return g;
}

/**
 * Gradients with respect to Q of DL user j in cell b. The transmitter is
 * BS b, so the leak channels are the self-interference loop (into own UL),
 * the direct channels of the cell's other DL users, and the BS-to-BS and
 * BS-to-DL channels into the other cells. Only the same-cell DL row depends
 * on j (it excludes the user itself).
 */
inline GradientBundle gradients_dl_user(int b, int j, const NetworkCovariances& nc,
                                        const ChannelSet& ch, const NoiseProfile& noise,
                                        const Weights& w) {
  const int bb = ch.cells(), dd = ch.dl_users(), uu = ch.ul_users();
  const Eigen::Index mb = nc.tx.q_bs[size_t(b)].rows();
  const double kt = noise.bs_tx_k[size_t(b)];

  GradientBundle g;
  g.ul_same_cell = cmat::Zero(mb, mb);
  g.dl_same_cell = cmat::Zero(mb, mb);
  g.ul_other_cells = cmat::Zero(mb, mb);
  g.dl_other_cells = cmat::Zero(mb, mb);

  for (int k = 0; k < uu; ++k)
    g.ul_same_cell +=
        detail::leak_gradient(w.ul[size_t(b)][size_t(k)], ch.si(b),
                              nc.ul_sens[size_t(b)][size_t(k)], kt);
  for (int l = 0; l < dd; ++l) {
    if (l == j) continue;
    g.dl_same_cell +=
        detail::leak_gradient(w.dl[size_t(b)][size_t(l)], ch.dl(b, l),
                              nc.dl_sens[size_t(b)][size_t(l)], kt);
  }
  for (int c = 0; c < bb; ++c) {
    if (c == b) continue;
    for (int k = 0; k < uu; ++k)
      g.ul_other_cells +=
          detail::leak_gradient(w.ul[size_t(c)][size_t(k)], ch.bs_bs(c, b),
                                nc.ul_sens[size_t(c)][size_t(k)], kt);
    for (int l = 0; l < dd; ++l)
      g.dl_other_cells +=
          detail::leak_gradient(w.dl[size_t(c)][size_t(l)], ch.bs_dl(c, l, b),
                                nc.dl_sens[size_t(c)][size_t(l)], kt);
  }
  g.ul_same_cell = herm(g.ul_same_cell);
  g.dl_same_cell = herm(g.dl_same_cell);
  g.ul_other_cells = herm(g.ul_other_cells);
  g.dl_other_cells = herm(g.dl_other_cells);
  return g;
}

/// Convenience overloads that build the covariance snapshot themselves.
inline GradientBundle gradients_ul_user(int b, int k, const BeamformerState& s,
                                        const ChannelSet& ch, const NoiseProfile& noise,
                                        const Weights& w) {
  return gradients_ul_user(b, k, network_covariances(s, ch, noise), ch, noise, w);
}
inline GradientBundle gradients_dl_user(int b, int j, const BeamformerState& s,
                                        const ChannelSet& ch, const NoiseProfile& noise,
                                        const Weights& w) {
  return gradients_dl_user(b, j, network_covariances(s, ch, noise), ch, noise, w);
}

/**
 * Signal and interference pencil of UL user k in cell b:
 *   first  = H^H F Rbar^{-1} F^H H   (own signal through the combiner)
 *   second = gradient sum + lambda I (everything the link hurts, plus the
 *            power price)
 * Both live at the user's antenna level, matching the digital beamformer.
 */
inline HermitianPencil sigma_pair_ul(int b, int k, const BeamformerState& s,
                                     const ChannelSet& ch, const NetworkCovariances& nc,
                                     const GradientBundle& g, double lambda) {
  const cmat& h = ch.ul(b, k);
  cmat fh = s.analog_rx[size_t(b)].adjoint() * h;
  HermitianPencil p;
  p.a = herm(fh.adjoint() * nc.ul_rbar_inv[size_t(b)][size_t(k)] * fh);
  p.b = herm(g.sum() + lambda * cmat::Identity(h.cols(), h.cols()));
  return p;
}

/**
 * Signal and interference pencil of DL user j in cell b at the BS antenna
 * level. Digital updates project it through the analog beamformer; the
 * analog update consumes it directly.
 */
inline HermitianPencil sigma_pair_dl(int b, int j, const ChannelSet& ch,
                                     const NetworkCovariances& nc,
                                     const GradientBundle& g, double psi) {
  const cmat& h = ch.dl(b, j);
  HermitianPencil p;
  p.a = herm(h.adjoint() * nc.dl_rbar_inv[size_t(b)][size_t(j)] * h);
  p.b = herm(g.sum() + psi * cmat::Identity(h.cols(), h.cols()));
  return p;
}

/**
 * Per-cell memory for the distributed solver, refreshed once per round from
 * the feedback snapshot. In-variables aggregate the gradients of the cell's
 * own victims, Out-variables those of every other cell's victims; cached
 * covariance inverses freeze the round-start interference state so each
 * cell can run its inner layers without further communication.
 */
struct LocalState {
  int cell = 0;
  int round = -1;
  std::vector<cmat> ul_in;        // per UL user, user antenna level
  std::vector<cmat> ul_out;
  std::vector<cmat> dl_in;        // per DL user, BS antenna level
  std::vector<cmat> dl_out;
  std::vector<cmat> ul_rbar_inv;  // RF-chain level, round start
  std::vector<cmat> dl_rbar_inv;  // user antenna level, round start
  cmat ra;                        // own BS antenna-level receive covariance
  std::vector<cmat> ra_bar;       // per UL user, antenna level
};

/**
 * Rebuild cell b's local variables from a global state snapshot (own current
 * slice plus the neighbors' latest reported one). Runs the exact same
 * gradient code as the centralized path, which is what makes feedback-based
 * and centralized pencils agree on identical snapshots.
 */
inline LocalState refresh_local_state(int b, const BeamformerState& global,
                                      const ChannelSet& ch, const NoiseProfile& noise,
                                      const Weights& w, int round) {
  const int dd = ch.dl_users(), uu = ch.ul_users();
  NetworkCovariances nc = network_covariances(global, ch, noise);

  LocalState ls;
  ls.cell = b;
  ls.round = round;
  ls.ul_in.resize(static_cast<size_t>(uu));
  ls.ul_out.resize(static_cast<size_t>(uu));
  ls.ul_rbar_inv.resize(static_cast<size_t>(uu));
  ls.ra_bar.resize(static_cast<size_t>(uu));
  ls.dl_in.resize(static_cast<size_t>(dd));
  ls.dl_out.resize(static_cast<size_t>(dd));
  ls.dl_rbar_inv.resize(static_cast<size_t>(dd));
  ls.ra = nc.ra[size_t(b)];

  for (int k = 0; k < uu; ++k) {
    GradientBundle g = gradients_ul_user(b, k, nc, ch, noise, w);
    ls.ul_in[size_t(k)] = herm(g.ul_same_cell + g.dl_same_cell);
    ls.ul_out[size_t(k)] = herm(g.ul_other_cells + g.dl_other_cells);
    ls.ul_rbar_inv[size_t(k)] = nc.ul_rbar_inv[size_t(b)][size_t(k)];
    ls.ra_bar[size_t(k)] = nc.ul[size_t(b)][size_t(k)].ra_bar;
  }
  for (int j = 0; j < dd; ++j) {
    GradientBundle g = gradients_dl_user(b, j, nc, ch, noise, w);
    ls.dl_in[size_t(j)] = herm(g.ul_same_cell + g.dl_same_cell);
    ls.dl_out[size_t(j)] = herm(g.ul_other_cells + g.dl_other_cells);
    ls.dl_rbar_inv[size_t(j)] = nc.dl_rbar_inv[size_t(b)][size_t(j)];
  }
  return ls;
}

/**
 * Pencils assembled from local memory only. With identical global snapshots
 * they equal the centralized sigma pairs; during a round they deliberately
 * hold the round-start interference state while the caller varies its own
 * beamformers and multipliers.
 */
inline HermitianPencil z_pencil_ul(const LocalState& ls, int k, const cmat& h,
                                   const cmat& f, double lambda) {
  cmat fh = f.adjoint() * h;
  HermitianPencil p;
  p.a = herm(fh.adjoint() * ls.ul_rbar_inv[size_t(k)] * fh);
  p.b = herm(ls.ul_in[size_t(k)] + ls.ul_out[size_t(k)] +
             lambda * cmat::Identity(h.cols(), h.cols()));
  return p;
}

inline HermitianPencil z_pencil_dl(const LocalState& ls, int j, const cmat& h,
                                   double psi) {
  HermitianPencil p;
  p.a = herm(h.adjoint() * ls.dl_rbar_inv[size_t(j)] * h);
  p.b = herm(ls.dl_in[size_t(j)] + ls.dl_out[size_t(j)] +
             psi * cmat::Identity(h.cols(), h.cols()));
  return p;
}

}  // namespace hybf

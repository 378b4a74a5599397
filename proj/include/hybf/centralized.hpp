#pragma once

/**
 * Centralized alternating solver.
 *
 * One outer iteration visits each base station and refreshes, in order, the
 * analog precoder, the downlink digital beamformers and powers under the
 * transmit budget, the uplink beamformers and powers under the per-user
 * budgets, and the analog combiner. Every direction update is a generalized
 * dominant eigenvector of a signal/price pencil; every power update is a
 * water-filling step whose price comes from a bisection on the dual
 * variable. The minorizer value is audited across each block so a broken
 * update surfaces as a counted violation instead of a silent quality loss.
 */

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "hybf/gradients.hpp"
#include "hybf/model.hpp"
#include "hybf/numerics.hpp"
#include "hybf/scenario.hpp"

namespace hybf {

/**
 * A water-filling projection stayed singular after one ridge retry. The side
 * tells the caller what the right limit is: a dead signal projection means
 * the link deserves no power, a dead price projection means the unconstrained
 * allocation is unbounded and the dual price must rise.
 */
struct SingularProjection : NumericsError {
  enum class Side { signal, price };
  Side side;
  SingularProjection(Side which, const std::string& msg)
      : NumericsError(msg), side(which) {}
};

/// The dual bracket stayed infeasible through the full doubling budget.
struct BracketFailure : NumericsError {
  using NumericsError::NumericsError;
};

/// Refused to materialize a Kronecker pencil larger than the configured cap.
struct PencilTooLarge : NumericsError {
  using NumericsError::NumericsError;
};

/// One outer iteration's worth of trace data.
struct IterationRecord {
  int iteration = 0;
  double wsr_nats = 0.0;
  double wall_analog_s = 0.0;
  double wall_digital_s = 0.0;
  double wall_power_s = 0.0;
  double wall_total_s = 0.0;
  // Worst relative budget miss over this iteration's bisections. A slack
  // constraint (price zero, allocation under budget) does not count.
  double power_residual = 0.0;
  // Worst relative complementary slackness |mu * (budget - allocated)|.
  double slackness = 0.0;
  // Worst | |entry| - 1 | over the analog parts; zero in fully digital mode.
  double phase_residual = 0.0;
  std::vector<double> psi;                  // transmit price per cell
  std::vector<std::vector<double>> lambda;  // uplink price per cell, per user
  // Payload bytes exchanged at this round's barrier, summed over pairwise
  // receivers; zero in the centralized solver.
  long long feedback_bytes = 0;
};

/// Full run record shared by the centralized and distributed solvers.
struct SolverTrace {
  std::vector<IterationRecord> iterations;
  double initial_wsr = 0.0;
  double final_wsr = 0.0;
  // Objective right before the final phase quantization; equal to final_wsr
  // when no quantization runs.
  double wsr_before_quantization = 0.0;
  bool converged = false;
  // Minorizer audit: each power block must not decrease the block minorizer
  // at frozen gradients. Audited only with exact_power_blocks, where every
  // block is a true coordinate maximization; the frozen-direction power
  // formula is a heuristic with no such guarantee. Checks are also skipped
  // when the entering point is infeasible (an analog update can overshoot
  // the budget transiently).
  int monotonicity_checks = 0;
  int monotonicity_violations = 0;
  double worst_monotonicity_dip = 0.0;  // most negative relative change seen
  int flagged_pencils = 0;
  int bisection_evaluations = 0;
  // Distributed-run accounting; the centralized solver leaves all of this
  // zero. Messages and bytes count the pairwise feedback exchange, the flop
  // figure is the dominant-term estimate for one round at the configured
  // worker count, and the trend triple is a soft audit of the round-level
  // objective (logged, never fatal; the per-block minorizer argument does
  // not transfer to simultaneous cross-cell updates).
  long long messages = 0;
  long long feedback_bytes = 0;
  double flops_per_round = 0.0;
  int round_trend_checks = 0;
  int round_trend_violations = 0;
  double worst_round_dip = 0.0;  // most negative relative round change seen
  double total_wall_s = 0.0;
};

/// Analog stages active, or pinned to identity with quantization skipped.
enum class AnalogMode { hybrid, fully_digital };

/// Result pair of a solver run.
struct SolverRun {
  BeamformerState state;
  SolverTrace trace;
};

namespace detail {

/// Top-d generalized eigenvectors of the pencil, columns scaled to unit norm.
inline cmat unit_gde_columns(const HermitianPencil& pencil, Eigen::Index d,
                             bool* flagged) {
  GdeResult g = gde(pencil, d);
  if (flagged) *flagged = g.flagged;
  cmat u = g.vectors;
  for (Eigen::Index c = 0; c < u.cols(); ++c) {
    const double n = u.col(c).norm();
    if (n > 0.0) u.col(c) /= n;
  }
  return u;
}

/// Largest absolute eigenvalue, used to seed the dual search bracket.
inline double spectral_max(const cmat& m) {
  Eigen::SelfAdjointEigenSolver<cmat> eig(herm(m));
  return eig.eigenvalues().cwiseAbs().maxCoeff();
}

/// PSD inverse with one ridge retry; failures become SingularProjection. A
/// non-finite inverse counts as a failure: a deep-underflow matrix can pass
/// its Cholesky yet divide out to infinities, which must not leak into the
/// power blocks as if they were valid prices.
inline cmat guarded_psd_inverse(const cmat& m, SingularProjection::Side side,
                                const char* what) {
  try {
    cmat inv = psd_inverse(m);
    if (inv.allFinite()) return inv;
  } catch (const SingularCovariance&) {
  }
  const double eps = 1e-12 * m.real().trace() / double(m.rows());
  if (eps > 0.0) {
    try {
      cmat inv =
          psd_inverse(cmat(m + eps * cmat::Identity(m.rows(), m.cols())));
      if (inv.allFinite()) return inv;
    } catch (const SingularCovariance&) {
    }
  }
  throw SingularProjection(side,
                           std::string(what) + ": singular after regularization");
}

/**
 * Block minorizer value of one link at frozen gradients, price excluded:
 *   w * lndet(I + P^{1/2} X^H A X P^{1/2}) - tr(P * X^H Bhat X)
 * with X the unit-column beamformer in the same domain as A and Bhat. This
 * is the quantity every power block maximizes subject to its budget, so it
 * is what the monotonicity audit compares.
 */
inline double minorizer_term(double w, const cmat& a, const cmat& bhat,
                             const cmat& x, const rvec& p) {
  const cmat s1 = herm(x.adjoint() * a * x);
  const cmat s2 = herm(x.adjoint() * bhat * x);
  const cvec root = p.cwiseMax(0.0).cwiseSqrt().cast<cxd>();
  const cmat core =
      cmat(root.asDiagonal()) * s1 * cmat(root.asDiagonal());
  double lin = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) lin += p(i) * s2(i, i).real();
  return w * lndet_psd(herm(cmat::Identity(core.rows(), core.cols()) + core)) -
         lin;
}

}  // namespace detail

/**
 * Uplink digital update: top-d generalized dominant eigenvectors of the
 * signal/price pencil from sigma_pair_ul, scaled to unit-norm columns.
 * Power lives in a separate diagonal, so the columns carry direction only.
 */
inline cmat update_digital_ul(const HermitianPencil& pencil, Eigen::Index d,
                              bool* flagged = nullptr) {
  return detail::unit_gde_columns(pencil, d, flagged);
}

/**
 * Downlink digital update, same machinery in the RF-chain domain: the caller
 * projects the antenna-level pencil through the analog precoder first
 * (W^H A W, W^H B W) and passes the projected pair here.
 */
inline cmat update_digital_dl(const HermitianPencil& pencil, Eigen::Index d,
                              bool* flagged = nullptr) {
  return detail::unit_gde_columns(pencil, d, flagged);
}

/**
 * Analog precoder update. The stationarity condition over all downlink users
 * of the cell vectorizes into one generalized eigenproblem
 *   [sum_j w_j (Y_j^T kron A_j)] vec(W) = eta [sum_j ((V_j V_j^H)^T kron B_j)] vec(W),
 *   Y_j = V_j (I + V_j^H W^H A_j W V_j)^{-1} V_j^H
 * with (A_j, B_j) the antenna-level signal/price pair of user j and W the
 * current precoder entering through Y_j. The dominant eigenvector is
 * unstacked to M x M_rf and projected entrywise to unit modulus;
 * pre_projection, when given, receives the unstacked matrix before the
 * projection so stationarity can be audited where it actually holds.
 */
inline cmat update_analog_beamformer(const std::vector<cmat>& v,
                                     const std::vector<HermitianPencil>& pencils,
                                     const std::vector<double>& weights,
                                     const cmat& w_now, Eigen::Index pencil_cap,
                                     bool* flagged = nullptr,
                                     cmat* pre_projection = nullptr) {
  if (v.size() != pencils.size() || v.size() != weights.size())
    throw DimensionMismatch("update_analog_beamformer: per-user lists disagree");
  const Eigen::Index rows = w_now.rows(), cols = w_now.cols();
  const Eigen::Index n = rows * cols;
  if (n > pencil_cap)
    throw PencilTooLarge("update_analog_beamformer: pencil side " +
                         std::to_string(n) + " exceeds cap " +
                         std::to_string(pencil_cap));

  cmat a = cmat::Zero(n, n), b = cmat::Zero(n, n);
  for (size_t j = 0; j < v.size(); ++j) {
    const cmat& vj = v[j];
    const cmat gram = herm(w_now.adjoint() * pencils[j].a * w_now);
    cmat inner = cmat::Identity(vj.cols(), vj.cols()) +
                 vj.adjoint() * gram * vj;
    Eigen::LLT<cmat> llt(herm(inner));
    if (llt.info() != Eigen::Success)
      throw NumericsError("update_analog_beamformer: inner solve failed");
    const cmat y = herm(vj * llt.solve(cmat(vj.adjoint())));
    a += weights[j] * kron(y.transpose(), pencils[j].a);
    b += kron(cmat(vj * vj.adjoint()).transpose(), pencils[j].b);
  }

  GdeResult g = gde({herm(a), herm(b)}, 1);
  if (flagged) *flagged = g.flagged;
  const cmat unstacked = unvec(g.vectors.col(0), rows, cols);
  if (pre_projection) *pre_projection = unstacked;
  return project_unit_modulus(unstacked);
}

/**
 * Analog combiner update on the weighted antenna-level covariance pair
 * (sum_k w_k R^a, sum_k w_k Rbar^a_k): the top-N_rf generalized dominant
 * eigenvectors, projected entrywise to unit modulus. Returned with antennas
 * on the rows; the combiner always acts as F^H. A degenerate pair (all
 * weights zero) keeps the previous combiner and reports a flag.
 * pre_projection, when given, receives the eigenvector columns before the
 * entrywise projection.
 */
inline cmat update_analog_combiner(const cmat& sum_ra, const cmat& sum_ra_bar,
                                   Eigen::Index n_rf, const cmat& f_prev,
                                   bool* flagged = nullptr,
                                   cmat* pre_projection = nullptr) {
  if (flagged) *flagged = false;
  if (sum_ra.cwiseAbs().maxCoeff() == 0.0 ||
      sum_ra_bar.cwiseAbs().maxCoeff() == 0.0) {
    if (flagged) *flagged = true;
    if (pre_projection) *pre_projection = f_prev;
    return f_prev;
  }
  GdeResult g = gde({herm(sum_ra), herm(sum_ra_bar)}, n_rf);
  if (flagged && g.flagged) *flagged = true;
  if (pre_projection) *pre_projection = g.vectors;
  return project_unit_modulus(g.vectors);
}

/**
 * Water-filling power step for one link: with s1 = X^H A X the signal
 * projection and s2 = X^H B X the price projection on the unit-column
 * beamformer X,
 *   P = (w * s2^{-1} - s1^{-1})^+
 * returned as a diagonal. When X solves the pencil, both projections are
 * diagonal and so is P; its stream order is kept, since stream i's power
 * must stay paired with column i for the stationarity conditions to hold.
 * At frozen directions the clamp can leave a rotated matrix; its singular
 * values then restore the diagonal form, descending.
 */
inline rvec allocate_power(double w, const cmat& s1, const cmat& s2) {
  if (s1.rows() != s1.cols() || s2.rows() != s2.cols() ||
      s1.rows() != s2.rows())
    throw DimensionMismatch("allocate_power: projections must be square and matched");
  const cmat inv_signal = detail::guarded_psd_inverse(
      s1, SingularProjection::Side::signal, "allocate_power: signal");
  const cmat inv_price = detail::guarded_psd_inverse(
      s2, SingularProjection::Side::price, "allocate_power: price");
  const cmat raw = positive_part(cmat(w * inv_price - inv_signal));
  cmat off = raw;
  off.diagonal().setZero();
  const double scale = std::max(raw.cwiseAbs().maxCoeff(), 1e-300);
  if (off.cwiseAbs().maxCoeff() <= 1e-10 * scale)
    return raw.diagonal().real().cwiseMax(0.0);
  return rediagonalize(raw).diagonal().real();
}

/// What a dual search settled on.
struct BisectionOutcome {
  double multiplier = 0.0;
  double allocated = 0.0;  // evaluator value at `multiplier`
  int evaluations = 0;
  int doublings = 0;  // bracket expansions that were needed
};

/**
 * Dual price search. `allocated` maps a price to the total power the link
 * group would spend at that price and must be non-increasing; +infinity is a
 * valid return for an unbounded allocation. The search first tries price
 * zero (constraint slack), then brackets [0, mu_max] with up to 40 doublings
 * of the upper end, then bisects until the feasible end meets the budget
 * within residual_tol and complementary slackness within slack_tol, both
 * relative to the budget. The returned price is always from the feasible
 * side, so the final allocation never overshoots the budget.
 */
inline BisectionOutcome bisect_multiplier(
    double budget, const std::function<double(double)>& allocated,
    double mu_max, double residual_tol = 1e-3, double slack_tol = 1e-9,
    int max_halvings = 200) {
  if (!(budget > 0.0))
    throw ConfigError("bisect_multiplier: budget must be positive");
  BisectionOutcome out;

  const double at_zero = allocated(0.0);
  ++out.evaluations;
  if (at_zero <= budget) {
    out.multiplier = 0.0;
    out.allocated = at_zero;
    return out;
  }

  // Feasibility tests are written as !(x <= budget) so a NaN allocation
  // (an evaluator blowing up at an extreme price) lands on the infeasible
  // side instead of silently becoming the returned solution.
  double hi = std::max(mu_max, 1e-12);
  double hi_alloc = allocated(hi);
  ++out.evaluations;
  while (!(hi_alloc <= budget) && out.doublings < 40) {
    hi *= 2.0;
    hi_alloc = allocated(hi);
    ++out.evaluations;
    ++out.doublings;
  }
  if (!(hi_alloc <= budget))
    throw BracketFailure("bisect_multiplier: allocation " +
                         std::to_string(hi_alloc) + " still above budget " +
                         std::to_string(budget) + " after 40 doublings");

  double lo = 0.0;
  for (int i = 0; i < max_halvings; ++i) {
    if (std::abs(budget - hi_alloc) <= residual_tol * budget &&
        std::abs(hi * (budget - hi_alloc)) <= slack_tol * budget)
      break;
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;  // interval exhausted in doubles
    const double mid_alloc = allocated(mid);
    ++out.evaluations;
    if (!(mid_alloc <= budget)) {
      lo = mid;
    } else {
      hi = mid;
      hi_alloc = mid_alloc;
    }
  }
  out.multiplier = hi;
  out.allocated = hi_alloc;
  return out;
}

namespace detail {

/**
 * Fully digital pinning: identity analog stages, downlink digital parts
 * re-seeded on the raw channel Grams (the hybrid recipe minus the analog
 * projection), powers uniform at the budget. Callers enforce RF = antennas.
 */
inline void pin_identity_analog(BeamformerState& s, const NetworkConfig& cfg,
                                const ChannelSet& ch) {
  for (int b = 0; b < cfg.num_cells; ++b) {
    s.analog_tx[size_t(b)] =
        cmat::Identity(cfg.bs_tx_antennas, cfg.bs_tx_rf);
    s.analog_rx[size_t(b)] =
        cmat::Identity(cfg.bs_rx_antennas, cfg.bs_rx_rf);
    double norm_acc = 0.0;
    for (int j = 0; j < cfg.dl_users_per_cell; ++j) {
      const cmat& h = ch.dl(b, j);
      s.digital_dl[size_t(b)][size_t(j)] =
          dominant_eigvecs(cmat(h.adjoint() * h), cfg.dl_streams);
      norm_acc += double(cfg.dl_streams);  // unit columns, identity stage
    }
    const double level =
        norm_acc > 0.0 ? cfg.bs_power / norm_acc : 0.0;
    for (int j = 0; j < cfg.dl_users_per_cell; ++j)
      s.power_dl[size_t(b)][size_t(j)] = rvec::Constant(cfg.dl_streams, level);
  }
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

/**
 * Per-stream view of a power block with frozen directions: the signal gain,
 * the price at multiplier zero, and the price slope in the multiplier. The
 * slope doubles as the stream's weight in the budget tally (one for uplink
 * columns, the projected analog Gram diagonal for downlink).
 */
struct FrozenStream {
  double weight = 0.0;
  double signal = 0.0;
  double price0 = 0.0;
  double price_slope = 0.0;
};

/// Closed-form allocation for one frozen stream at a trial multiplier.
/// A stream whose transmit gram through the analog stage is non-positive
/// (within roundoff) radiates nothing; its signal projection through the
/// same stage is bounded by that same roundoff, so the stream is dead and
/// gets zero power. Without this rule a tiny negative gram would price the
/// stream at -0 and the water level would blow up to infinity.
inline double frozen_stream_power(const FrozenStream& st, double mu) {
  if (st.price_slope <= 0.0) return 0.0;
  if (st.signal <= 0.0 || st.weight <= 0.0) return 0.0;
  const double price = st.price0 + mu * st.price_slope;
  if (price <= 0.0) return std::numeric_limits<double>::infinity();
  return std::max(0.0, st.weight / price - 1.0 / st.signal);
}

/**
 * Budget contract rescue for a collapsed dual search. Direction refreshes
 * inside the block evaluator make the allocation map jump wherever the
 * pencil's trailing eigenvalues cross, and the bisection interval can
 * collapse onto such a jump before the budget tolerances are met. The
 * rescue freezes the feasible-side directions, drops to the per-stream
 * closed form (exact at the freeze point since the projections are diagonal
 * there), and re-bisects the now continuous, strictly monotone map. The
 * budget tally only reads the diagonal projection weights, so the repaired
 * powers meet the true constraint as tightly as the bisection tolerance.
 * The multiplier moves only a sliver from the freeze point, so the
 * first-order Lagrangian terms cancel and the block minorizer keeps its
 * monotonicity up to second-order slop.
 *
 * `streams` is the flattened per-stream data; powers come back in the same
 * order. Returns the repaired bisection outcome.
 */
inline BisectionOutcome frozen_power_repair(
    double budget, const std::vector<FrozenStream>& streams, double mu_hi,
    std::vector<double>& powers) {
  auto alloc = [&](double mu) -> double {
    double total = 0.0;
    for (const FrozenStream& st : streams)
      total += frozen_stream_power(st, mu) * st.price_slope;
    return total;
  };
  BisectionOutcome out =
      bisect_multiplier(budget, alloc, std::max(mu_hi, 1e-12));
  powers.resize(streams.size());
  for (size_t i = 0; i < streams.size(); ++i)
    powers[i] = frozen_stream_power(streams[i], out.multiplier);
  return out;
}

/// True when a finished dual search satisfies the budget contract: either a
/// slack constraint at multiplier zero, or the allocation within 1e-3 of the
/// budget with complementary slackness within 1e-6, both relative.
inline bool budget_contract_met(double budget, const BisectionOutcome& out) {
  if (out.multiplier == 0.0) return out.allocated <= budget;
  return std::abs(budget - out.allocated) <= 1e-3 * budget &&
         std::abs(out.multiplier * (budget - out.allocated)) <= 1e-6 * budget;
}

}  // namespace detail

/**
 * Centralized solver loop.
 *
 * Per outer iteration and per cell: analog precoder GDE, downlink power
 * block (a bisection on the cell transmit price; each candidate price
 * recomputes every downlink direction and power when exact_power_blocks is
 * set, powers only otherwise, preceded by a separate direction pass), uplink
 * per-user blocks the same way under per-user budgets, analog combiner GDE.
 * Terminates on relative objective change below cfg.tol or on max_iters,
 * then quantizes the analog phases once and rescales downlink powers back
 * under the budget if the quantization pushed them over.
 *
 * The fully digital mode pins both analog stages to identity (RF counts must
 * equal antenna counts), skips their updates and the final quantization, and
 * reports a zero phase residual since no phase constraint exists there.
 */
inline SolverRun run_c_hybf(const NetworkConfig& cfg, const ChannelSet& ch,
                            AnalogMode mode = AnalogMode::hybrid) {
  cfg.validate();
  if (mode == AnalogMode::fully_digital &&
      (cfg.bs_tx_rf != cfg.bs_tx_antennas ||
       cfg.bs_rx_rf != cfg.bs_rx_antennas))
    throw ConfigError(
        "run_c_hybf: fully digital mode needs RF counts equal to antenna counts");

  const NoiseProfile noise = NoiseProfile::from_config(cfg);
  const Weights w = Weights::from_config(cfg);
  const int bb = cfg.num_cells;
  const int dd = cfg.dl_users_per_cell;
  const int uu = cfg.ul_users_per_cell;
  const bool exact = cfg.options.exact_power_blocks;
  const bool hybrid = mode == AnalogMode::hybrid;

  SolverRun run;
  BeamformerState& s = run.state;
  SolverTrace& tr = run.trace;
  s = init_state(cfg, ch);
  if (!hybrid) detail::pin_identity_analog(s, cfg, ch);

  tr.initial_wsr = wsr(s, ch, noise, w);
  double prev_wsr = tr.initial_wsr;

  auto audit_block = [&tr](double before, double after) {
    ++tr.monotonicity_checks;
    const double rel = (after - before) / std::max(1.0, std::abs(before));
    if (rel < -1e-8) {
      ++tr.monotonicity_violations;
      tr.worst_monotonicity_dip = std::min(tr.worst_monotonicity_dip, rel);
    }
  };

  const auto run_t0 = std::chrono::steady_clock::now();
  for (int it = 0; it < cfg.max_iters; ++it) {
    IterationRecord rec;
    rec.iteration = it;
    const auto iter_t0 = std::chrono::steady_clock::now();

    for (int b = 0; b < bb; ++b) {
      // Analog precoder on the current interference state.
      if (hybrid && dd > 0) {
        const auto t0 = std::chrono::steady_clock::now();
        NetworkCovariances nc = network_covariances(s, ch, noise);
        std::vector<cmat> v(static_cast<size_t>(dd));
        std::vector<HermitianPencil> pencils(static_cast<size_t>(dd));
        std::vector<double> weights(static_cast<size_t>(dd));
        for (int j = 0; j < dd; ++j) {
          GradientBundle g = gradients_dl_user(b, j, nc, ch, noise, w);
          pencils[size_t(j)] =
              sigma_pair_dl(b, j, ch, nc, g, s.multiplier_dl[size_t(b)]);
          v[size_t(j)] = s.digital_dl[size_t(b)][size_t(j)];
          weights[size_t(j)] = w.dl[size_t(b)][size_t(j)];
        }
        bool flagged = false;
        s.analog_tx[size_t(b)] =
            update_analog_beamformer(v, pencils, weights, s.analog_tx[size_t(b)],
                                     cfg.options.pencil_cap, &flagged);
        if (flagged) ++tr.flagged_pencils;
        rec.wall_analog_s += detail::seconds_since(t0);
      }

      // Separate downlink direction pass. The exact power block refreshes
      // directions at every candidate price, so it subsumes this pass.
      if (!exact) {
        for (int j = 0; j < dd; ++j) {
          const auto t0 = std::chrono::steady_clock::now();
          NetworkCovariances nc = network_covariances(s, ch, noise);
          GradientBundle g = gradients_dl_user(b, j, nc, ch, noise, w);
          HermitianPencil pen =
              sigma_pair_dl(b, j, ch, nc, g, s.multiplier_dl[size_t(b)]);
          const cmat& wb = s.analog_tx[size_t(b)];
          HermitianPencil proj{herm(wb.adjoint() * pen.a * wb),
                               herm(wb.adjoint() * pen.b * wb)};
          bool flagged = false;
          s.digital_dl[size_t(b)][size_t(j)] =
              update_digital_dl(proj, cfg.dl_streams, &flagged);
          if (flagged) ++tr.flagged_pencils;
          rec.wall_digital_s += detail::seconds_since(t0);
        }
      }

      // Downlink power block: one bisection on the cell transmit price.
      if (dd > 0) {
        const auto t0 = std::chrono::steady_clock::now();
        NetworkCovariances nc = network_covariances(s, ch, noise);
        const cmat& wb = s.analog_tx[size_t(b)];
        const cmat wgram = herm(wb.adjoint() * wb);
        std::vector<cmat> a_rf(static_cast<size_t>(dd)), bhat_rf(static_cast<size_t>(dd));
        double mu_seed = std::max(1e-9, 4.0 * s.multiplier_dl[size_t(b)]);
        for (int j = 0; j < dd; ++j) {
          GradientBundle g = gradients_dl_user(b, j, nc, ch, noise, w);
          HermitianPencil pen = sigma_pair_dl(b, j, ch, nc, g, 0.0);
          a_rf[size_t(j)] = herm(wb.adjoint() * pen.a * wb);
          bhat_rf[size_t(j)] = herm(wb.adjoint() * pen.b * wb);
          mu_seed = std::max(mu_seed, w.dl[size_t(b)][size_t(j)] *
                                          detail::spectral_max(a_rf[size_t(j)]));
        }

        const double budget = cfg.bs_power;
        double m_before = 0.0;
        for (int j = 0; j < dd; ++j)
          m_before += detail::minorizer_term(
              w.dl[size_t(b)][size_t(j)], a_rf[size_t(j)], bhat_rf[size_t(j)],
              s.digital_dl[size_t(b)][size_t(j)], s.power_dl[size_t(b)][size_t(j)]);
        const bool entering_feasible =
            bs_tx_cov(s, b).real().trace() <= budget * (1.0 + 1e-9);

        std::vector<cmat> cand_v(static_cast<size_t>(dd));
        std::vector<rvec> cand_p(static_cast<size_t>(dd));
        bool count_flags = false;
        auto alloc_at = [&](double psi) -> double {
          double total = 0.0;
          for (int j = 0; j < dd; ++j) {
            HermitianPencil pen{a_rf[size_t(j)],
                                herm(bhat_rf[size_t(j)] + psi * wgram)};
            cmat vj = s.digital_dl[size_t(b)][size_t(j)];
            if (exact) {
              bool flagged = false;
              vj = update_digital_dl(pen, cfg.dl_streams, &flagged);
              if (flagged && count_flags) ++tr.flagged_pencils;
            }
            rvec p;
            try {
              p = allocate_power(w.dl[size_t(b)][size_t(j)],
                                 herm(vj.adjoint() * pen.a * vj),
                                 herm(vj.adjoint() * pen.b * vj));
            } catch (const SingularProjection& e) {
              if (e.side == SingularProjection::Side::price)
                return std::numeric_limits<double>::infinity();
              p = rvec::Zero(cfg.dl_streams);
            }
            cand_v[size_t(j)] = vj;
            cand_p[size_t(j)] = p;
            for (Eigen::Index c = 0; c < p.size(); ++c)
              total += p(c) * std::real(vj.col(c).dot(wgram * vj.col(c)));
          }
          return total;
        };

        BisectionOutcome out = bisect_multiplier(budget, alloc_at, mu_seed);
        count_flags = true;
        out.allocated = alloc_at(out.multiplier);  // materialize candidates
        tr.bisection_evaluations += out.evaluations + 1;

        if (!detail::budget_contract_met(budget, out)) {
          std::vector<detail::FrozenStream> fro;
          for (int j = 0; j < dd; ++j) {
            const cmat& vj = cand_v[size_t(j)];
            const cmat sig = herm(vj.adjoint() * a_rf[size_t(j)] * vj);
            const cmat b0 = herm(vj.adjoint() * bhat_rf[size_t(j)] * vj);
            const cmat bw = herm(vj.adjoint() * wgram * vj);
            for (Eigen::Index c = 0; c < vj.cols(); ++c)
              fro.push_back({w.dl[size_t(b)][size_t(j)], std::real(sig(c, c)),
                             std::real(b0(c, c)), std::real(bw(c, c))});
          }
          std::vector<double> repaired;
          BisectionOutcome rep = detail::frozen_power_repair(
              budget, fro, out.multiplier, repaired);
          tr.bisection_evaluations += rep.evaluations;
          size_t at = 0;
          for (int j = 0; j < dd; ++j)
            for (Eigen::Index c = 0; c < cand_p[size_t(j)].size(); ++c)
              cand_p[size_t(j)](c) = repaired[at++];
          out.multiplier = rep.multiplier;
          out.allocated = rep.allocated;
        }

        for (int j = 0; j < dd; ++j) {
          s.digital_dl[size_t(b)][size_t(j)] = cand_v[size_t(j)];
          s.power_dl[size_t(b)][size_t(j)] = cand_p[size_t(j)];
        }
        s.multiplier_dl[size_t(b)] = out.multiplier;

        double m_after = 0.0;
        for (int j = 0; j < dd; ++j)
          m_after += detail::minorizer_term(
              w.dl[size_t(b)][size_t(j)], a_rf[size_t(j)], bhat_rf[size_t(j)],
              cand_v[size_t(j)], cand_p[size_t(j)]);
        if (exact && entering_feasible) audit_block(m_before, m_after);

        const double rr =
            out.multiplier > 0.0
                ? std::abs(budget - out.allocated) / budget
                : std::max(0.0, (out.allocated - budget) / budget);
        rec.power_residual = std::max(rec.power_residual, rr);
        rec.slackness =
            std::max(rec.slackness,
                     std::abs(out.multiplier * (budget - out.allocated)) / budget);
        rec.wall_power_s += detail::seconds_since(t0);
      }

      // Uplink blocks, one bisection per user.
      for (int k = 0; k < uu; ++k) {
        if (!exact) {
          const auto t0 = std::chrono::steady_clock::now();
          NetworkCovariances nc = network_covariances(s, ch, noise);
          GradientBundle g = gradients_ul_user(b, k, nc, ch, noise, w);
          HermitianPencil pen = sigma_pair_ul(b, k, s, ch, nc, g,
                                              s.multiplier_ul[size_t(b)][size_t(k)]);
          bool flagged = false;
          s.digital_ul[size_t(b)][size_t(k)] =
              update_digital_ul(pen, cfg.ul_streams, &flagged);
          if (flagged) ++tr.flagged_pencils;
          rec.wall_digital_s += detail::seconds_since(t0);
        }

        const auto t0 = std::chrono::steady_clock::now();
        NetworkCovariances nc = network_covariances(s, ch, noise);
        GradientBundle g = gradients_ul_user(b, k, nc, ch, noise, w);
        const HermitianPencil pen0 = sigma_pair_ul(b, k, s, ch, nc, g, 0.0);
        const double wk = w.ul[size_t(b)][size_t(k)];
        const double budget = cfg.ul_power;
        const Eigen::Index side = pen0.a.rows();

        const double m_before = detail::minorizer_term(
            wk, pen0.a, pen0.b, s.digital_ul[size_t(b)][size_t(k)],
            s.power_ul[size_t(b)][size_t(k)]);
        const bool entering_feasible =
            s.power_ul[size_t(b)][size_t(k)].sum() <= budget * (1.0 + 1e-9);

        cmat cand_u;
        rvec cand_p;
        bool count_flags = false;
        auto alloc_at = [&](double lam) -> double {
          HermitianPencil pen{pen0.a,
                              herm(pen0.b + lam * cmat::Identity(side, side))};
          cmat u = s.digital_ul[size_t(b)][size_t(k)];
          if (exact) {
            bool flagged = false;
            u = update_digital_ul(pen, cfg.ul_streams, &flagged);
            if (flagged && count_flags) ++tr.flagged_pencils;
          }
          rvec p;
          try {
            p = allocate_power(wk, herm(u.adjoint() * pen.a * u),
                               herm(u.adjoint() * pen.b * u));
          } catch (const SingularProjection& e) {
            if (e.side == SingularProjection::Side::price)
              return std::numeric_limits<double>::infinity();
            p = rvec::Zero(cfg.ul_streams);
          }
          cand_u = u;
          cand_p = p;
          return p.sum();
        };

        const double mu_seed =
            std::max({1e-9, 4.0 * s.multiplier_ul[size_t(b)][size_t(k)],
                      wk * detail::spectral_max(pen0.a)});
        BisectionOutcome out = bisect_multiplier(budget, alloc_at, mu_seed);
        count_flags = true;
        out.allocated = alloc_at(out.multiplier);
        tr.bisection_evaluations += out.evaluations + 1;

        if (!detail::budget_contract_met(budget, out)) {
          const cmat sig = herm(cand_u.adjoint() * pen0.a * cand_u);
          const cmat b0 = herm(cand_u.adjoint() * pen0.b * cand_u);
          const cmat bw = herm(cand_u.adjoint() * cand_u);
          std::vector<detail::FrozenStream> fro;
          for (Eigen::Index c = 0; c < cand_u.cols(); ++c)
            fro.push_back({wk, std::real(sig(c, c)), std::real(b0(c, c)),
                           std::real(bw(c, c))});
          std::vector<double> repaired;
          BisectionOutcome rep = detail::frozen_power_repair(
              budget, fro, out.multiplier, repaired);
          tr.bisection_evaluations += rep.evaluations;
          for (Eigen::Index c = 0; c < cand_p.size(); ++c)
            cand_p(c) = repaired[size_t(c)];
          out.multiplier = rep.multiplier;
          out.allocated = rep.allocated;
        }

        s.digital_ul[size_t(b)][size_t(k)] = cand_u;
        s.power_ul[size_t(b)][size_t(k)] = cand_p;
        s.multiplier_ul[size_t(b)][size_t(k)] = out.multiplier;

        const double m_after =
            detail::minorizer_term(wk, pen0.a, pen0.b, cand_u, cand_p);
        if (exact && entering_feasible) audit_block(m_before, m_after);

        const double rr =
            out.multiplier > 0.0
                ? std::abs(budget - out.allocated) / budget
                : std::max(0.0, (out.allocated - budget) / budget);
        rec.power_residual = std::max(rec.power_residual, rr);
        rec.slackness =
            std::max(rec.slackness,
                     std::abs(out.multiplier * (budget - out.allocated)) / budget);
        rec.wall_power_s += detail::seconds_since(t0);
      }

      // Analog combiner on the weighted receive covariances.
      if (hybrid && uu > 0 &&
          cfg.options.update_combiner == CombinerUpdate::per_iteration) {
        const auto t0 = std::chrono::steady_clock::now();
        NetworkCovariances nc = network_covariances(s, ch, noise);
        cmat sum_ra = cmat::Zero(cfg.bs_rx_antennas, cfg.bs_rx_antennas);
        cmat sum_ra_bar = sum_ra;
        for (int k = 0; k < uu; ++k) {
          sum_ra += w.ul[size_t(b)][size_t(k)] * nc.ra[size_t(b)];
          sum_ra_bar +=
              w.ul[size_t(b)][size_t(k)] * nc.ul[size_t(b)][size_t(k)].ra_bar;
        }
        bool flagged = false;
        s.analog_rx[size_t(b)] =
            update_analog_combiner(sum_ra, sum_ra_bar, cfg.bs_rx_rf,
                                   s.analog_rx[size_t(b)], &flagged);
        if (flagged) ++tr.flagged_pencils;
        rec.wall_analog_s += detail::seconds_since(t0);
      }
    }

    rec.wsr_nats = wsr(s, ch, noise, w);
    if (hybrid) {
      for (int b = 0; b < bb; ++b)
        for (const cmat* m : {&s.analog_tx[size_t(b)], &s.analog_rx[size_t(b)]})
          for (Eigen::Index c = 0; c < m->cols(); ++c)
            for (Eigen::Index r = 0; r < m->rows(); ++r)
              rec.phase_residual =
                  std::max(rec.phase_residual,
                           std::abs(std::abs((*m)(r, c)) - 1.0));
    }
    rec.psi = s.multiplier_dl;
    rec.lambda = s.multiplier_ul;
    rec.wall_total_s = detail::seconds_since(iter_t0);
    tr.iterations.push_back(rec);

    if (std::abs(rec.wsr_nats - prev_wsr) <
        cfg.tol * std::max(std::abs(prev_wsr), 1e-12)) {
      tr.converged = true;
      break;
    }
    prev_wsr = rec.wsr_nats;
  }

  tr.wsr_before_quantization =
      tr.iterations.empty() ? tr.initial_wsr : tr.iterations.back().wsr_nats;

  if (hybrid) {
    for (int b = 0; b < bb; ++b) {
      s.analog_tx[size_t(b)] = quantize_phases(s.analog_tx[size_t(b)], cfg.phase_bits);
      s.analog_rx[size_t(b)] = quantize_phases(s.analog_rx[size_t(b)], cfg.phase_bits);
    }
    // Snapping the phases moves the effective downlink column gains, so the
    // transmit budget can be overshot; scale the powers back down when it is.
    // Uplink budgets are untouched since user beamformers are not quantized.
    for (int b = 0; b < bb; ++b) {
      const double used = bs_tx_cov(s, b).real().trace();
      if (used > cfg.bs_power && used > 0.0) {
        const double scale = cfg.bs_power / used;
        for (int j = 0; j < dd; ++j) s.power_dl[size_t(b)][size_t(j)] *= scale;
      }
    }
  }

  tr.final_wsr = wsr(s, ch, noise, w);
  tr.total_wall_s = detail::seconds_since(run_t0);
  return run;
}

}  // namespace hybf

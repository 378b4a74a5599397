#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "hybf/centralized.hpp"
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

cmat random_hpd(std::mt19937_64& rng, Eigen::Index n) {
  cmat g = randn_cmat(rng, n, n);
  return herm(g * g.adjoint() + 0.5 * cmat::Identity(n, n));
}

cmat diag2(double a, double b) {
  cmat m = cmat::Zero(2, 2);
  m(0, 0) = a;
  m(1, 1) = b;
  return m;
}

/// Small fully digital single-cell setup, distortion effectively off.
NetworkConfig digital_config() {
  NetworkConfig cfg;
  cfg.num_cells = 1;
  cfg.dl_users_per_cell = 1;
  cfg.ul_users_per_cell = 1;
  cfg.bs_tx_antennas = 4;
  cfg.bs_rx_antennas = 4;
  cfg.bs_tx_rf = 4;
  cfg.bs_rx_rf = 4;
  cfg.ul_user_antennas = 3;
  cfg.dl_user_antennas = 3;
  cfg.dl_streams = 2;
  cfg.ul_streams = 2;
  cfg.paths = 2;
  cfg.snr_db = 10.0;
  cfg.ldr_tx_db = -300.0;
  cfg.ldr_rx_db = -300.0;
  cfg.tol = 1e-8;
  cfg.max_iters = 400;
  return cfg;
}

/// Two-cell hybrid setup small enough for a fast full run.
NetworkConfig hybrid_config() {
  NetworkConfig cfg;
  cfg.num_cells = 2;
  cfg.dl_users_per_cell = 1;
  cfg.ul_users_per_cell = 1;
  cfg.bs_tx_antennas = 8;
  cfg.bs_rx_antennas = 6;
  cfg.bs_tx_rf = 4;
  cfg.bs_rx_rf = 3;
  cfg.ul_user_antennas = 3;
  cfg.dl_user_antennas = 3;
  cfg.dl_streams = 2;
  cfg.ul_streams = 2;
  cfg.paths = 3;
  cfg.snr_db = 10.0;
  cfg.ldr_tx_db = -60.0;
  cfg.ldr_rx_db = -60.0;
  cfg.phase_bits = 6;
  cfg.tol = 1e-5;
  cfg.max_iters = 60;
  return cfg;
}

ChannelSet channels_for(const NetworkConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  return draw_network_channels(rng, cfg);
}

/// Combiner objective: weighted lndet gap between the full and the
/// interference-plus-noise receive covariances after the combiner.
double combiner_objective(const cmat& f, const cmat& ra, const cmat& ra_bar,
                          double w) {
  return w * (lndet_psd(herm(f.adjoint() * ra * f)) -
              lndet_psd(herm(f.adjoint() * ra_bar * f)));
}

}  // namespace

TEST_CASE("digital updates take the dominant pencil directions") {
  // A diagonal pencil against the identity: the top direction is the first
  // basis vector, and the phase pinning makes it exactly that.
  HermitianPencil diag_pencil{diag2(3.0, 1.0), cmat::Identity(2, 2)};
  bool flagged = true;
  cmat u = update_digital_ul(diag_pencil, 1, &flagged);
  CHECK_FALSE(flagged);
  CHECK((u - cmat::Identity(2, 2).col(0)).norm() < 1e-12);

  // Full dimension: columns are price-orthogonal and unit norm, so both
  // projections of the pencil come out diagonal.
  std::mt19937_64 rng(401);
  cmat a = random_hpd(rng, 3);
  cmat b = random_hpd(rng, 3);
  cmat full = update_digital_ul({a, b}, 3, &flagged);
  CHECK_FALSE(flagged);
  for (Eigen::Index c = 0; c < 3; ++c)
    CHECK(full.col(c).norm() == doctest::Approx(1.0).epsilon(1e-12));
  cmat pb = full.adjoint() * b * full;
  cmat pa = full.adjoint() * a * full;
  cmat off_b = pb, off_a = pa;
  off_b.diagonal().setZero();
  off_a.diagonal().setZero();
  CHECK(off_b.norm() < 1e-10 * pb.norm());
  CHECK(off_a.norm() < 1e-10 * pa.norm());

  // The downlink variant is the same machinery on a projected pencil.
  cmat wb = randn_cmat(rng, 5, 3);
  HermitianPencil proj{herm(wb.adjoint() * random_hpd(rng, 5) * wb),
                       herm(wb.adjoint() * random_hpd(rng, 5) * wb)};
  cmat v = update_digital_dl(proj, 2, &flagged);
  CHECK(v.rows() == 3);
  CHECK(v.cols() == 2);
  for (Eigen::Index c = 0; c < 2; ++c)
    CHECK(v.col(c).norm() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("directions with water filling satisfy the stationarity condition") {
  std::mt19937_64 rng(402);
  for (int trial = 0; trial < 5; ++trial) {
    // A strong signal pencil against a mild price keeps all streams active.
    cmat g = randn_cmat(rng, 3, 3);
    cmat a = herm(10.0 * g * g.adjoint() + cmat::Identity(3, 3));
    cmat b = random_hpd(rng, 3);
    const double w = 2.0;

    cmat u = update_digital_ul({a, b}, 2);
    rvec p = allocate_power(w, herm(u.adjoint() * a * u),
                            herm(u.adjoint() * b * u));
    REQUIRE(p.minCoeff() > 0.0);

    cmat x = u * p.cwiseSqrt().asDiagonal();
    CHECK(oracle::kkt_residual_digital(a, b, x, w) < 1e-9);

    // Contrast: an arbitrary beamformer is nowhere near stationary.
    cmat xr = randn_cmat(rng, 3, 2);
    CHECK(oracle::kkt_residual_digital(a, b, xr, w) > 1e-3);
  }
}

TEST_CASE("analog beamformer update is stationary before projection") {
  std::mt19937_64 rng(403);

  // Single stream, single RF chain: the stationarity condition pins the
  // direction, and the optimal scale of the unprojected solution closes it
  // exactly. The entrywise projection discards magnitudes, so the residual
  // is checked on the optimally scaled pre-projection matrix.
  for (int trial = 0; trial < 4; ++trial) {
    const bool matched = trial % 2 == 0;
    cmat s1 = random_hpd(rng, 4);
    cmat s2 = matched ? s1 : random_hpd(rng, 4);
    std::vector<cmat> v{cmat::Ones(1, 1)};
    std::vector<HermitianPencil> pencils{{s1, s2}};
    std::vector<double> weights{matched ? 2.0 : 8.0};
    cmat w_now = randn_cmat(rng, 4, 1);

    bool flagged = true;
    cmat pre;
    cmat wq = update_analog_beamformer(v, pencils, weights, w_now, 8192,
                                       &flagged, &pre);
    CHECK_FALSE(flagged);
    CHECK(wq.rows() == 4);
    CHECK(wq.cols() == 1);
    CHECK(wq.cwiseAbs().maxCoeff() == doctest::Approx(1.0).epsilon(1e-12));

    const double q1 = std::real((pre.adjoint() * s1 * pre)(0, 0));
    const double q2 = std::real((pre.adjoint() * s2 * pre)(0, 0));
    const double t2 = weights[0] / q2 - 1.0 / q1;
    REQUIRE(t2 > 0.0);
    cmat scaled = std::sqrt(t2) * pre;
    CHECK(oracle::kkt_residual_analog({s1}, {s2}, v, weights, scaled) < 1e-6);
  }

  // All-zero digital beamformers make the price side singular; the ridge
  // keeps the solve alive and the result is flagged.
  {
    std::vector<cmat> v{cmat::Zero(2, 1)};
    std::vector<HermitianPencil> pencils{{random_hpd(rng, 3), random_hpd(rng, 3)}};
    std::vector<double> weights{1.0};
    bool flagged = false;
    cmat w0 = randn_cmat(rng, 3, 2);
    cmat wq = update_analog_beamformer(v, pencils, weights, w0, 8192, &flagged);
    CHECK(flagged);
    CHECK(wq.rows() == 3);
    CHECK(wq.cols() == 2);
  }

  // The Kronecker stacking of the signal side acts on any stacked matrix
  // exactly like the matrix product it encodes.
  {
    cmat s1 = random_hpd(rng, 3);
    cmat vj = randn_cmat(rng, 2, 1);
    cmat w0 = randn_cmat(rng, 3, 2);
    cmat inner = cmat::Identity(1, 1) +
                 vj.adjoint() * w0.adjoint() * s1 * w0 * vj;
    cmat y = herm(vj * inner.inverse() * vj.adjoint());
    cmat a = kron(y.transpose(), s1);
    cmat probe = randn_cmat(rng, 3, 2);
    cvec lhs = a * vec(probe);
    cvec rhs = vec(cmat(s1 * probe * y));
    CHECK((lhs - rhs).norm() < 1e-10 * std::max(1.0, rhs.norm()));
  }

  // Oversized stacks are refused up front.
  {
    std::vector<cmat> v{cmat::Ones(2, 1)};
    std::vector<HermitianPencil> pencils{{random_hpd(rng, 4), random_hpd(rng, 4)}};
    std::vector<double> weights{1.0};
    cmat w0 = randn_cmat(rng, 4, 2);
    CHECK_THROWS_AS(
        update_analog_beamformer(v, pencils, weights, w0, 7, nullptr),
        PencilTooLarge);
  }
}

TEST_CASE("analog combiner aligns with the whitened principal subspace") {
  std::mt19937_64 rng(404);
  const double sigma2 = 0.5;
  cmat h = randn_cmat(rng, 6, 4);
  cmat ra = herm(sigma2 * cmat::Identity(6, 6) + h * h.adjoint());
  cmat ra_bar = sigma2 * cmat::Identity(6, 6);
  cmat f_prev = project_unit_modulus(randn_cmat(rng, 6, 3));
  const double w = 1.3;

  bool flagged = true;
  cmat pre;
  cmat f = update_analog_combiner(w * ra, w * ra_bar, 3, f_prev, &flagged, &pre);
  CHECK_FALSE(flagged);
  CHECK(f.rows() == 6);
  CHECK(f.cols() == 3);
  CHECK((f.cwiseAbs().array() - 1.0).abs().maxCoeff() < 1e-12);

  // With white residual covariance, the solution subspace is spanned by the
  // top left singular vectors of the user channel. The tolerance sits above
  // the acos resolution floor near zero angle, about 1.5e-8.
  Eigen::JacobiSVD<cmat> svd(h, Eigen::ComputeThinU);
  cmat top = svd.matrixU().leftCols(3);
  CHECK(principal_angle(pre, top) < 1e-6);

  // Pre-projection, the update strictly improves the combiner objective
  // over an arbitrary previous combiner.
  CHECK(combiner_objective(pre, ra, ra_bar, w) >
        combiner_objective(f_prev, ra, ra_bar, w) + 1e-6);

  // Zero weights degenerate the pair; the previous combiner is retained.
  cmat zero = cmat::Zero(6, 6);
  flagged = false;
  cmat kept = update_analog_combiner(zero, zero, 3, f_prev, &flagged);
  CHECK(flagged);
  CHECK((kept - f_prev).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("power allocation matches closed forms and the grid oracle") {
  // Scalar water level.
  cmat a1(1, 1), b1(1, 1);
  a1(0, 0) = 2.0;
  b1(0, 0) = 0.8;
  rvec p1 = allocate_power(1.0, a1, b1);
  CHECK(p1(0) == doctest::Approx(1.0 / 0.8 - 0.5).epsilon(1e-12));

  // Inactive link: price dominates the signal everywhere.
  rvec p0 = allocate_power(0.5, cmat::Identity(2, 2), cmat::Identity(2, 2));
  CHECK(p0.cwiseAbs().maxCoeff() == 0.0);

  // Stream pairing: a diagonal case whose optimal powers are ascending must
  // keep its stream order rather than sort them.
  rvec pp = allocate_power(1.0, diag2(1.2, 50.0), diag2(1.0, 0.5));
  CHECK(pp(0) == doctest::Approx(1.0 - 1.0 / 1.2).epsilon(1e-12));
  CHECK(pp(1) == doctest::Approx(2.0 - 1.0 / 50.0).epsilon(1e-12));

  // Two-stream case against an exhaustive grid of the unconstrained
  // objective w*ln(1 + a_i p_i) - b_i p_i per stream.
  const double w = 1.2;
  const rvec av = (rvec(2) << 3.0, 1.5).finished();
  const rvec bv = (rvec(2) << 1.1, 0.9).finished();
  rvec p = allocate_power(w, diag2(av(0), av(1)), diag2(bv(0), bv(1)));
  const double pmax = 2.0;
  const int points = 400;
  oracle::GridSearchResult grid = oracle::power_grid_search(
      [&](const rvec& q) {
        double val = 0.0;
        for (int i = 0; i < 2; ++i)
          val += w * std::log(1.0 + av(i) * q(i)) - bv(i) * q(i);
        return val;
      },
      2, pmax, points);
  const double dp = pmax / double(points - 1);
  CHECK(std::abs(p(0) - grid.powers(0)) <= dp + 1e-12);
  CHECK(std::abs(p(1) - grid.powers(1)) <= dp + 1e-12);

  // Singular projections report which side died.
  cmat dead = cmat::Zero(2, 2);
  cmat alive = cmat::Identity(2, 2);
  CHECK_THROWS_AS(allocate_power(1.0, dead, alive), SingularProjection);
  CHECK_THROWS_AS(allocate_power(1.0, alive, dead), SingularProjection);
  try {
    allocate_power(1.0, dead, alive);
  } catch (const SingularProjection& e) {
    CHECK(e.side == SingularProjection::Side::signal);
  }
  try {
    allocate_power(1.0, alive, dead);
  } catch (const SingularProjection& e) {
    CHECK(e.side == SingularProjection::Side::price);
  }
}

TEST_CASE("the dual bisection meets its budget and slackness contracts") {
  // Scalar link with a known closed-form price.
  const double c = 0.7, budget = 2.0;
  auto scalar_alloc = [&](double mu) {
    if (mu <= 0.0) return std::numeric_limits<double>::infinity();
    return std::max(0.0, 1.0 / mu - c);
  };
  BisectionOutcome out = bisect_multiplier(budget, scalar_alloc, 0.05);
  const double mu_star = 1.0 / (budget + c);
  CHECK(out.doublings >= 1);  // the seed bracket was deliberately too small
  CHECK(std::abs(out.multiplier - mu_star) < 1e-3);
  CHECK(out.allocated <= budget);
  CHECK(std::abs(out.allocated - budget) <= 1e-3 * budget);
  CHECK(oracle::slackness_residual(out.multiplier, budget, out.allocated) <= 1e-6);

  // Slack constraint: the unconstrained allocation already fits.
  BisectionOutcome slack =
      bisect_multiplier(1.0, [](double) { return 0.3; }, 1.0);
  CHECK(slack.multiplier == 0.0);
  CHECK(slack.allocated == doctest::Approx(0.3));
  CHECK(slack.evaluations == 1);

  // Multi-stream evaluator built from the water-filling step itself.
  std::mt19937_64 rng(405);
  cmat sa = random_hpd(rng, 3);
  cmat sb = 0.05 * random_hpd(rng, 3);
  auto alloc = [&](double mu) {
    try {
      return allocate_power(1.0, sa,
                            cmat(sb + mu * cmat::Identity(3, 3)))
          .sum();
    } catch (const SingularProjection&) {
      return std::numeric_limits<double>::infinity();
    }
  };
  const double small_budget = 0.5;
  REQUIRE(alloc(0.0) > small_budget);
  BisectionOutcome multi = bisect_multiplier(small_budget, alloc, 1.0);
  CHECK(multi.multiplier > 0.0);
  CHECK(multi.allocated <= small_budget);
  CHECK(std::abs(multi.allocated - small_budget) <= 1e-3 * small_budget);
  CHECK(oracle::slackness_residual(multi.multiplier, small_budget, multi.allocated) <=
        1e-6);

  // A bracket that can never close is an error, not a hang.
  CHECK_THROWS_AS(
      bisect_multiplier(1.0, [](double) { return 3.0; }, 1.0),
      BracketFailure);
}

TEST_CASE("fully digital run is monotone, feasible, and stationary") {
  NetworkConfig cfg = digital_config();
  cfg.seed = 7;
  // The downlink block runs before the uplink block inside an iteration, so
  // the final downlink variables lag the final-state pencils by one uplink
  // update. That drift shrinks linearly with the convergence tolerance, so
  // the stationarity check needs the run driven close to its fixed point.
  cfg.tol = 1e-12;
  ChannelSet ch = channels_for(cfg, cfg.seed);
  SolverRun run = run_c_hybf(cfg, ch, AnalogMode::fully_digital);

  REQUIRE(!run.trace.iterations.empty());
  CHECK(run.trace.monotonicity_checks > 0);
  CHECK(run.trace.monotonicity_violations == 0);
  CHECK(run.trace.worst_monotonicity_dip == 0.0);
  CHECK(run.trace.messages == 0);

  double prev = run.trace.initial_wsr;
  for (const IterationRecord& rec : run.trace.iterations) {
    CHECK(std::isfinite(rec.wsr_nats));
    CHECK(rec.wsr_nats >= prev - 1e-7 * std::max(1.0, std::abs(prev)));
    CHECK(rec.power_residual <= 1e-3);
    CHECK(rec.slackness <= 1e-6);
    CHECK(rec.phase_residual == 0.0);
    prev = rec.wsr_nats;
  }
  CHECK(run.trace.final_wsr >=
        run.trace.initial_wsr - 1e-9 * std::abs(run.trace.initial_wsr));
  CHECK(run.trace.final_wsr == run.trace.wsr_before_quantization);
  REQUIRE(run.trace.converged);

  // Post-convergence stationarity of every digital beamformer, powers
  // folded in, against pencils rebuilt from the final state.
  const NoiseProfile noise = NoiseProfile::from_config(cfg);
  const Weights w = Weights::from_config(cfg);
  const BeamformerState& s = run.state;
  NetworkCovariances nc = network_covariances(s, ch, noise);

  GradientBundle gu = gradients_ul_user(0, 0, nc, ch, noise, w);
  HermitianPencil pu =
      sigma_pair_ul(0, 0, s, ch, nc, gu, s.multiplier_ul[0][0]);
  cmat xu = s.digital_ul[0][0] * s.power_ul[0][0].cwiseSqrt().asDiagonal();
  CHECK(oracle::kkt_residual_digital(pu.a, pu.b, xu, w.ul[0][0]) < 1e-4);

  GradientBundle gd = gradients_dl_user(0, 0, nc, ch, noise, w);
  HermitianPencil pd = sigma_pair_dl(0, 0, ch, nc, gd, s.multiplier_dl[0]);
  cmat xd = s.digital_dl[0][0] * s.power_dl[0][0].cwiseSqrt().asDiagonal();
  CHECK(oracle::kkt_residual_digital(pd.a, pd.b, xd, w.dl[0][0]) < 1e-4);

  // Budgets are met from below.
  ConstraintReport rep = check_constraints(s, cfg);
  CHECK(rep.dl_power_residual[0] <= 1e-9);
  CHECK(rep.ul_power_residual[0][0] <= 1e-9);
}

TEST_CASE("same seed gives bitwise identical runs") {
  NetworkConfig cfg = digital_config();
  cfg.max_iters = 40;
  cfg.tol = 1e-6;

  ChannelSet ch1 = channels_for(cfg, 21);
  ChannelSet ch2 = channels_for(cfg, 21);
  SolverRun r1 = run_c_hybf(cfg, ch1, AnalogMode::fully_digital);
  SolverRun r2 = run_c_hybf(cfg, ch2, AnalogMode::fully_digital);

  REQUIRE(r1.trace.iterations.size() == r2.trace.iterations.size());
  CHECK(r1.trace.initial_wsr == r2.trace.initial_wsr);
  CHECK(r1.trace.final_wsr == r2.trace.final_wsr);
  for (size_t i = 0; i < r1.trace.iterations.size(); ++i) {
    CHECK(r1.trace.iterations[i].wsr_nats == r2.trace.iterations[i].wsr_nats);
    CHECK(r1.trace.iterations[i].power_residual ==
          r2.trace.iterations[i].power_residual);
  }
  CHECK((r1.state.digital_ul[0][0] - r2.state.digital_ul[0][0])
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK((r1.state.digital_dl[0][0] - r2.state.digital_dl[0][0])
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK((r1.state.power_ul[0][0] - r2.state.power_ul[0][0])
            .cwiseAbs()
            .maxCoeff() == 0.0);
  CHECK((r1.state.power_dl[0][0] - r2.state.power_dl[0][0])
            .cwiseAbs()
            .maxCoeff() == 0.0);
}

TEST_CASE("hybrid run lands on the quantizer grid within budget") {
  NetworkConfig cfg = hybrid_config();
  ChannelSet ch = channels_for(cfg, 33);
  SolverRun run = run_c_hybf(cfg, ch);

  REQUIRE(!run.trace.iterations.empty());
  CHECK(int(run.trace.iterations.size()) <= cfg.max_iters);
  for (const IterationRecord& rec : run.trace.iterations) {
    CHECK(std::isfinite(rec.wsr_nats));
    CHECK(rec.power_residual <= 1e-3);
    CHECK(rec.slackness <= 1e-6);
    CHECK(rec.phase_residual <= 1e-12);  // unit modulus until quantization
  }
  CHECK(std::isfinite(run.trace.final_wsr));
  CHECK(run.trace.messages == 0);

  ConstraintReport rep = check_constraints(run.state, cfg);
  CHECK(rep.max_modulus_error < 1e-12);
  CHECK(rep.max_grid_distance < 1e-9);  // phases snapped exactly
  for (int b = 0; b < cfg.num_cells; ++b) {
    CHECK(rep.dl_power_residual[size_t(b)] <= 1e-9);
    CHECK(rep.ul_power_residual[size_t(b)][0] <= 1e-9);
  }
}

TEST_CASE("combiner schedule switch freezes the receive stage") {
  NetworkConfig cfg = hybrid_config();
  cfg.options.update_combiner = CombinerUpdate::never;
  cfg.max_iters = 8;
  ChannelSet ch = channels_for(cfg, 34);

  BeamformerState initial = init_state(cfg, ch);
  SolverRun run = run_c_hybf(cfg, ch);
  for (int b = 0; b < cfg.num_cells; ++b) {
    cmat expected = quantize_phases(initial.analog_rx[size_t(b)], cfg.phase_bits);
    CHECK((run.state.analog_rx[size_t(b)] - expected).cwiseAbs().maxCoeff() ==
          0.0);
  }
}

TEST_CASE("degenerate topologies run without panicking") {
  // Downlink-only cell.
  {
    NetworkConfig cfg = hybrid_config();
    cfg.ul_users_per_cell = 0;
    cfg.num_cells = 1;
    cfg.max_iters = 3;
    ChannelSet ch = channels_for(cfg, 35);
    SolverRun run = run_c_hybf(cfg, ch);
    CHECK(std::isfinite(run.trace.final_wsr));
    CHECK(run.trace.final_wsr > 0.0);
  }
  // Uplink-only cell.
  {
    NetworkConfig cfg = hybrid_config();
    cfg.dl_users_per_cell = 0;
    cfg.num_cells = 1;
    cfg.max_iters = 3;
    ChannelSet ch = channels_for(cfg, 36);
    SolverRun run = run_c_hybf(cfg, ch);
    CHECK(std::isfinite(run.trace.final_wsr));
    CHECK(run.trace.final_wsr > 0.0);
  }
  // The fully digital mode insists on one RF chain per antenna.
  {
    NetworkConfig cfg = hybrid_config();
    ChannelSet ch = channels_for(cfg, 37);
    CHECK_THROWS_AS(run_c_hybf(cfg, ch, AnalogMode::fully_digital),
                    ConfigError);
  }
}

TEST_CASE("frozen-direction power blocks keep the run feasible") {
  NetworkConfig cfg = hybrid_config();
  cfg.options.exact_power_blocks = false;
  cfg.max_iters = 20;
  ChannelSet ch = channels_for(cfg, 38);
  SolverRun run = run_c_hybf(cfg, ch);

  REQUIRE(!run.trace.iterations.empty());
  CHECK(run.trace.monotonicity_checks == 0);  // audit needs exact blocks
  for (const IterationRecord& rec : run.trace.iterations) {
    CHECK(std::isfinite(rec.wsr_nats));
    CHECK(rec.power_residual <= 1e-3);
    CHECK(rec.slackness <= 1e-6);
  }
  ConstraintReport rep = check_constraints(run.state, cfg);
  for (int b = 0; b < cfg.num_cells; ++b)
    CHECK(rep.dl_power_residual[size_t(b)] <= 1e-9);
}

TEST_CASE("desk-scale sweep improves on its initialization") {
  NetworkConfig cfg;
  cfg.num_cells = 2;
  cfg.dl_users_per_cell = 1;
  cfg.ul_users_per_cell = 1;
  cfg.bs_tx_antennas = 16;
  cfg.bs_rx_antennas = 8;
  cfg.bs_tx_rf = 8;
  cfg.bs_rx_rf = 8;
  cfg.ul_user_antennas = 4;
  cfg.dl_user_antennas = 4;
  cfg.dl_streams = 2;
  cfg.ul_streams = 2;
  cfg.snr_db = 10.0;
  cfg.ldr_tx_db = -80.0;
  cfg.ldr_rx_db = -80.0;
  cfg.tol = 1e-3;
  cfg.max_iters = 12;

  int improved = 0;
  const int seeds = 100;
  for (int seed = 1; seed <= seeds; ++seed) {
    ChannelSet ch = channels_for(cfg, std::uint64_t(seed));
    SolverRun run = run_c_hybf(cfg, ch);
    REQUIRE(std::isfinite(run.trace.final_wsr));
    if (run.trace.final_wsr > run.trace.initial_wsr) ++improved;
  }
  CHECK(improved >= 95);
}

#pragma once

/**
 * Parallel and distributed solver.
 *
 * Each cell owns a worker that keeps its slice of the beamformer state plus
 * a LocalState of frozen interference variables. A round starts with a
 * barrier where every worker broadcasts its slice as an encoded feedback
 * message; workers then rebuild their local variables from the barrier
 * snapshot and solve two three-layer stacks on them, downlink first (digital
 * directions, analog precoder, common-price power bisection) and uplink
 * second (digital directions, per-user price bisections, analog combiner).
 * No worker reads another worker's memory; everything cross-cell flows
 * through the messages, so the result is independent of how the per-cell
 * tasks and the per-link sub-tasks are scheduled.
 *
 * The feedback codec is a fixed little-endian byte layout, documented at
 * encode_feedback, so a socket transport could replace the in-process bus
 * without touching the solver.
 */

#include <algorithm>
#include <cassert>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <exception>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "hybf/centralized.hpp"
#include "hybf/gradients.hpp"
#include "hybf/model.hpp"
#include "hybf/numerics.hpp"
#include "hybf/scenario.hpp"

namespace hybf {

/// A neighbor's feedback for the requested round is absent from the bus.
struct MissingFeedback : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/**
 * One cell's broadcast: its analog stages and every digital beamformer with
 * its power diagonal. Neighbors rebuild their Out-variables from this, so it
 * is exactly the state another cell's gradients depend on; multipliers stay
 * private. Round indices must increase per sender.
 */
struct FeedbackMessage {
  std::uint32_t sender = 0;
  std::uint32_t round = 0;
  cmat analog_tx;                 // M_b x M_rf
  cmat analog_rx;                 // N_b x N_rf
  std::vector<cmat> digital_ul;   // per UL user, M_k x d_k
  std::vector<rvec> power_ul;     // per UL user, length d_k
  std::vector<cmat> digital_dl;   // per DL user, M_rf x d_j
  std::vector<rvec> power_dl;     // per DL user, length d_j
};

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(std::uint8_t(v));
  out.push_back(std::uint8_t(v >> 8));
  out.push_back(std::uint8_t(v >> 16));
  out.push_back(std::uint8_t(v >> 24));
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(bits >> (8 * i)));
}

inline void put_cmat(std::vector<std::uint8_t>& out, const cmat& m) {
  put_u32(out, std::uint32_t(m.rows()));
  put_u32(out, std::uint32_t(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      put_f64(out, m(r, c).real());
      put_f64(out, m(r, c).imag());
    }
}

inline void put_rvec(std::vector<std::uint8_t>& out, const rvec& v) {
  put_u32(out, std::uint32_t(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(out, v(i));
}

/// Cursor over an encoded message; every read is bounds-checked.
struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  size_t at = 0;

  void need(size_t n) const {
    if (at + n > bytes.size())
      throw DimensionMismatch("feedback decode: truncated message");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = std::uint32_t(bytes[at]) |
                      std::uint32_t(bytes[at + 1]) << 8 |
                      std::uint32_t(bytes[at + 2]) << 16 |
                      std::uint32_t(bytes[at + 3]) << 24;
    at += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(bytes[at + size_t(i)]) << (8 * i);
    at += 8;
    double v = 0.0;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  cmat get_cmat() {
    const std::uint32_t rows = u32(), cols = u32();
    need(size_t(16) * rows * cols);
    cmat m(rows, cols);
    for (std::uint32_t c = 0; c < cols; ++c)
      for (std::uint32_t r = 0; r < rows; ++r) {
        const double re = f64(), im = f64();
        m(r, c) = cxd(re, im);
      }
    return m;
  }
  rvec get_rvec() {
    const std::uint32_t n = u32();
    need(size_t(8) * n);
    rvec v(n);
    for (std::uint32_t i = 0; i < n; ++i) v(i) = f64();
    return v;
  }
};

}  // namespace detail

/**
 * Wire codec for one feedback message. All integers are unsigned 32-bit
 * little-endian, all scalars IEEE float64 little-endian, no padding:
 *
 *   u32 sender, u32 round,
 *   matrix analog_tx, matrix analog_rx,
 *   u32 uplink user count, then per user: matrix digital, vector power,
 *   u32 downlink user count, then per user: matrix digital, vector power.
 *
 * A matrix is u32 rows, u32 cols, then rows*cols complex entries in column
 * major order, each as float64 real then float64 imaginary. A vector is
 * u32 length then that many float64 values.
 */
inline std::vector<std::uint8_t> encode_feedback(const FeedbackMessage& msg) {
  std::vector<std::uint8_t> out;
  detail::put_u32(out, msg.sender);
  detail::put_u32(out, msg.round);
  detail::put_cmat(out, msg.analog_tx);
  detail::put_cmat(out, msg.analog_rx);
  detail::put_u32(out, std::uint32_t(msg.digital_ul.size()));
  for (size_t k = 0; k < msg.digital_ul.size(); ++k) {
    detail::put_cmat(out, msg.digital_ul[k]);
    detail::put_rvec(out, msg.power_ul.at(k));
  }
  detail::put_u32(out, std::uint32_t(msg.digital_dl.size()));
  for (size_t j = 0; j < msg.digital_dl.size(); ++j) {
    detail::put_cmat(out, msg.digital_dl[j]);
    detail::put_rvec(out, msg.power_dl.at(j));
  }
  return out;
}

/// Inverse of encode_feedback; rejects truncated input and trailing bytes.
inline FeedbackMessage decode_feedback(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in{bytes};
  FeedbackMessage msg;
  msg.sender = in.u32();
  msg.round = in.u32();
  msg.analog_tx = in.get_cmat();
  msg.analog_rx = in.get_cmat();
  const std::uint32_t uu = in.u32();
  msg.digital_ul.resize(uu);
  msg.power_ul.resize(uu);
  for (std::uint32_t k = 0; k < uu; ++k) {
    msg.digital_ul[k] = in.get_cmat();
    msg.power_ul[k] = in.get_rvec();
  }
  const std::uint32_t dd = in.u32();
  msg.digital_dl.resize(dd);
  msg.power_dl.resize(dd);
  for (std::uint32_t j = 0; j < dd; ++j) {
    msg.digital_dl[j] = in.get_cmat();
    msg.power_dl[j] = in.get_rvec();
  }
  if (in.at != bytes.size())
    throw DimensionMismatch("feedback decode: trailing bytes");
  return msg;
}

/**
 * In-process message board, one slot per cell holding the latest encoded
 * broadcast. Senders encode once; every receiver decodes the stored bytes,
 * so the codec sits on the real data path and a transport swap cannot
 * change solver behavior. The caller separates posting and fetching with a
 * barrier; the bus itself is not synchronized for concurrent posting.
 */
class FeedbackBus {
 public:
  explicit FeedbackBus(int cells) : slots_(size_t(std::max(cells, 0))) {}

  /// Stores the encoded message, returns its payload size in bytes.
  size_t post(const FeedbackMessage& msg) {
    Slot& sl = slots_.at(msg.sender);
    assert(int(msg.round) > sl.round && "feedback rounds must increase per sender");
    sl.round = int(msg.round);
    sl.bytes = encode_feedback(msg);
    return sl.bytes.size();
  }

  /**
   * Decodes sender's message for the round. With allow_stale set, an older
   * round's message is accepted instead of failing, which models a BS that
   * keeps optimizing on the last feedback it heard.
   */
  FeedbackMessage fetch(int sender, int round, bool allow_stale = false) const {
    const Slot& sl = slots_.at(size_t(sender));
    if (sl.round == round || (allow_stale && sl.round >= 0 && sl.round < round))
      return decode_feedback(sl.bytes);
    throw MissingFeedback("no feedback from cell " + std::to_string(sender) +
                          " for round " + std::to_string(round));
  }

 private:
  struct Slot {
    int round = -1;
    std::vector<std::uint8_t> bytes;
  };
  std::vector<Slot> slots_;
};

namespace detail {

/**
 * Runs task(0..count-1) round-robin over at most `threads` lanes. Every
 * task writes only its own output slot, so lane assignment cannot change
 * any result bit; exceptions are captured per task and the lowest task
 * index rethrows after the join, which keeps failures deterministic too.
 */
inline void run_sharded(int count, int threads,
                        const std::function<void(int)>& task) {
  if (count <= 0) return;
  const int lanes = std::min(std::max(threads, 1), count);
  std::vector<std::exception_ptr> errors(static_cast<size_t>(count));
  auto lane = [&](int first) {
    for (int i = first; i < count; i += lanes) {
      try {
        task(i);
      } catch (...) {
        errors[size_t(i)] = std::current_exception();
      }
    }
  };
  if (lanes == 1) {
    lane(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(size_t(lanes));
    for (int t = 0; t < lanes; ++t) pool.emplace_back(lane, t);
    for (std::thread& th : pool) th.join();
  }
  for (int i = 0; i < count; ++i)
    if (errors[size_t(i)]) std::rethrow_exception(errors[size_t(i)]);
}

}  // namespace detail

/**
 * Per-cell solver memory: the cell's beamformer slice, its frozen local
 * variables, its private multipliers, and the size of the bounded pool its
 * per-link sub-tasks may run on. A worker mutates nothing but its own
 * fields; neighbor state enters only through decoded feedback.
 */
struct CellWorker {
  int cell = 0;
  int pool = 1;
  LocalState local;
  cmat analog_tx;
  cmat analog_rx;
  std::vector<cmat> digital_ul;
  std::vector<rvec> power_ul;
  std::vector<cmat> digital_dl;
  std::vector<rvec> power_dl;
  double psi = 0.0;                // transmit price, previous round's value
  std::vector<double> lambda;      // per-UL-user prices, previous round's
};

/// Per-round, per-cell accounting folded into the global trace.
struct CellRoundMetrics {
  double wall_analog_s = 0.0;
  double wall_digital_s = 0.0;
  double wall_power_s = 0.0;
  double power_residual = 0.0;
  double slackness = 0.0;
  int flagged_pencils = 0;
  int bisection_evaluations = 0;
};

namespace detail {

/**
 * Pins the scale of an unconstrained analog stage to entry RMS one. The
 * eigen-solver normalizes against the pencil, so the raw matrix inherits the
 * pencil's scale and can drift exponentially over rounds when the projection
 * is disabled. A scalar rescale is safe: the power layers re-bisect against
 * the scaled Gram and the combiner enters signal and noise identically, so
 * no rate changes.
 */
inline cmat pin_scale(cmat m) {
  const double n = m.norm();
  if (n > 0.0 && std::isfinite(n)) m *= std::sqrt(double(m.size())) / n;
  return m;
}

/// Containers shaped for the network, every matrix still empty.
inline BeamformerState blank_state(const NetworkConfig& cfg) {
  const size_t bb = size_t(cfg.num_cells);
  const size_t dd = size_t(cfg.dl_users_per_cell);
  const size_t uu = size_t(cfg.ul_users_per_cell);
  BeamformerState s;
  s.digital_ul.assign(bb, std::vector<cmat>(uu));
  s.digital_dl.assign(bb, std::vector<cmat>(dd));
  s.analog_tx.assign(bb, cmat());
  s.analog_rx.assign(bb, cmat());
  s.power_ul.assign(bb, std::vector<rvec>(uu));
  s.power_dl.assign(bb, std::vector<rvec>(dd));
  s.multiplier_ul.assign(bb, std::vector<double>(uu, 0.0));
  s.multiplier_dl.assign(bb, 0.0);
  return s;
}

inline CellWorker worker_from_state(const BeamformerState& s, int b, int pool) {
  CellWorker wk;
  wk.cell = b;
  wk.pool = pool;
  wk.analog_tx = s.analog_tx[size_t(b)];
  wk.analog_rx = s.analog_rx[size_t(b)];
  wk.digital_ul = s.digital_ul[size_t(b)];
  wk.power_ul = s.power_ul[size_t(b)];
  wk.digital_dl = s.digital_dl[size_t(b)];
  wk.power_dl = s.power_dl[size_t(b)];
  wk.psi = s.multiplier_dl[size_t(b)];
  wk.lambda = s.multiplier_ul[size_t(b)];
  return wk;
}

inline void overwrite_own_slice(BeamformerState& s, const CellWorker& wk) {
  const size_t b = size_t(wk.cell);
  s.analog_tx[b] = wk.analog_tx;
  s.analog_rx[b] = wk.analog_rx;
  s.digital_ul[b] = wk.digital_ul;
  s.power_ul[b] = wk.power_ul;
  s.digital_dl[b] = wk.digital_dl;
  s.power_dl[b] = wk.power_dl;
  s.multiplier_dl[b] = wk.psi;
  s.multiplier_ul[b] = wk.lambda;
}

inline FeedbackMessage worker_message(const CellWorker& wk, int round) {
  FeedbackMessage msg;
  msg.sender = std::uint32_t(wk.cell);
  msg.round = std::uint32_t(round);
  msg.analog_tx = wk.analog_tx;
  msg.analog_rx = wk.analog_rx;
  msg.digital_ul = wk.digital_ul;
  msg.power_ul = wk.power_ul;
  msg.digital_dl = wk.digital_dl;
  msg.power_dl = wk.power_dl;
  return msg;
}

inline void check_shape(bool ok, int sender, const char* what) {
  if (!ok)
    throw DimensionMismatch("feedback message from cell " +
                            std::to_string(sender) + ": bad " + what +
                            " dimensions");
}

/// Validates a decoded message against the config and installs its slice.
inline void install_message(BeamformerState& s, const FeedbackMessage& msg,
                            const NetworkConfig& cfg) {
  const int c = int(msg.sender);
  check_shape(c >= 0 && c < cfg.num_cells, c, "sender");
  check_shape(msg.analog_tx.rows() == cfg.bs_tx_antennas &&
                  msg.analog_tx.cols() == cfg.bs_tx_rf,
              c, "analog transmit");
  check_shape(msg.analog_rx.rows() == cfg.bs_rx_antennas &&
                  msg.analog_rx.cols() == cfg.bs_rx_rf,
              c, "analog receive");
  check_shape(int(msg.digital_ul.size()) == cfg.ul_users_per_cell &&
                  int(msg.power_ul.size()) == cfg.ul_users_per_cell,
              c, "uplink list");
  check_shape(int(msg.digital_dl.size()) == cfg.dl_users_per_cell &&
                  int(msg.power_dl.size()) == cfg.dl_users_per_cell,
              c, "downlink list");
  for (size_t k = 0; k < msg.digital_ul.size(); ++k) {
    check_shape(msg.digital_ul[k].rows() == cfg.ul_user_antennas &&
                    msg.digital_ul[k].cols() == cfg.ul_streams,
                c, "uplink beamformer");
    check_shape(msg.power_ul[k].size() == cfg.ul_streams, c, "uplink power");
  }
  for (size_t j = 0; j < msg.digital_dl.size(); ++j) {
    check_shape(msg.digital_dl[j].rows() == cfg.bs_tx_rf &&
                    msg.digital_dl[j].cols() == cfg.dl_streams,
                c, "downlink beamformer");
    check_shape(msg.power_dl[j].size() == cfg.dl_streams, c, "downlink power");
  }
  s.analog_tx[size_t(c)] = msg.analog_tx;
  s.analog_rx[size_t(c)] = msg.analog_rx;
  s.digital_ul[size_t(c)] = msg.digital_ul;
  s.power_ul[size_t(c)] = msg.power_ul;
  s.digital_dl[size_t(c)] = msg.digital_dl;
  s.power_dl[size_t(c)] = msg.power_dl;
}

/**
 * The global state as cell b sees it at a barrier: its own live slice plus
 * every neighbor's decoded broadcast for this round. Neighbor multipliers
 * are private and stay zero; nothing downstream reads them.
 */
inline BeamformerState assemble_snapshot(const CellWorker& wk,
                                         const FeedbackBus& bus, int round,
                                         const NetworkConfig& cfg,
                                         bool allow_stale) {
  BeamformerState s = blank_state(cfg);
  for (int c = 0; c < cfg.num_cells; ++c) {
    if (c == wk.cell) continue;
    install_message(s, bus.fetch(c, round, allow_stale), cfg);
  }
  overwrite_own_slice(s, wk);
  return s;
}

/**
 * Worst-case floating-point estimate for one round, from the dominant cost
 * terms of the three-layer stacks: per sharded link, the pencil assembly
 * over all cross links and the generalized eigensolve; per cell, one analog
 * precoder solve on the lifted pencil and one combiner solve. A pool at
 * least as wide as the user count makes the sharding factors one.
 */
inline double pd_flops_per_round(const NetworkConfig& cfg, int pool) {
  const double bb = cfg.num_cells;
  const double dd = cfg.dl_users_per_cell;
  const double uu = cfg.ul_users_per_cell;
  const double nj = cfg.dl_user_antennas;
  const double nk = cfg.ul_user_antennas;
  const double mrf = cfg.bs_tx_rf;
  const double nrf = cfg.bs_rx_rf;
  const double mb = cfg.bs_tx_antennas;
  const double nb = cfg.bs_rx_antennas;
  const double dj = cfg.dl_streams;
  const double dk = cfg.ul_streams;
  double total = 0.0;
  if (dd > 0) {
    const double rounds_per_proc = std::ceil(dd / std::min(double(pool), dd));
    total += rounds_per_proc *
                 (bb * dd * nj * nj * nj + bb * uu * nrf * nrf * nrf +
                  dj * mrf * mrf) +
             mrf * mrf * mb * mb;
  }
  if (uu > 0) {
    const double rounds_per_proc = std::ceil(uu / std::min(double(pool), uu));
    total += rounds_per_proc *
                 (bb * uu * nrf * nrf * nrf + bb * dd * nj * nj * nj +
                  dk * nk * nk) +
             nrf * nb * nb;
  }
  return total;
}

}  // namespace detail

/**
 * Downlink stack of one cell for one round. Bottom: every user's digital
 * directions from the frozen Z-pencils, projected through the current
 * analog stage, at the previous round's transmit price; the sub-tasks are
 * independent and run sharded. The cell then refreshes its own in-cell
 * variables (the new directions changed its emission) while the out-cell
 * variables stay frozen until the next barrier. Middle: one vectorized
 * analog solve over the refreshed pencils. Top: a bisection on the common
 * transmit price, every user's powers recomputed in parallel at frozen
 * directions per trial price, with the same budget contract and repair as
 * the centralized block.
 *
 * `snap` is this worker's barrier snapshot; its own slice is kept current
 * so the mid-stack refresh sees the new directions.
 */
inline CellRoundMetrics solve_dl_layers(CellWorker& wk, BeamformerState& snap,
                                        const NetworkConfig& cfg,
                                        const ChannelSet& ch,
                                        const NoiseProfile& noise,
                                        const Weights& w, AnalogMode mode) {
  CellRoundMetrics met;
  const int b = wk.cell;
  const int dd = cfg.dl_users_per_cell;
  if (dd == 0) return met;
  const bool hybrid = mode == AnalogMode::hybrid;

  // Bottom layer.
  {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> flags(size_t(dd), 0);
    const cmat wb = wk.analog_tx;
    detail::run_sharded(dd, wk.pool, [&](int j) {
      HermitianPencil zp = z_pencil_dl(wk.local, j, ch.dl(b, j), wk.psi);
      HermitianPencil proj{herm(wb.adjoint() * zp.a * wb),
                           herm(wb.adjoint() * zp.b * wb)};
      bool flagged = false;
      wk.digital_dl[size_t(j)] = update_digital_dl(proj, cfg.dl_streams, &flagged);
      if (flagged) flags[size_t(j)] = 1;
    });
    for (int j = 0; j < dd; ++j) met.flagged_pencils += flags[size_t(j)];
    detail::overwrite_own_slice(snap, wk);
    met.wall_digital_s += detail::seconds_since(t0);
  }

  // Mid-stack refresh of the cell's own variables.
  {
    const auto t0 = std::chrono::steady_clock::now();
    NetworkCovariances nc = network_covariances(snap, ch, noise);
    for (int j = 0; j < dd; ++j) {
      GradientBundle g = gradients_dl_user(b, j, nc, ch, noise, w);
      wk.local.dl_in[size_t(j)] = herm(g.ul_same_cell + g.dl_same_cell);
      wk.local.dl_rbar_inv[size_t(j)] = nc.dl_rbar_inv[size_t(b)][size_t(j)];
    }
    met.wall_digital_s += detail::seconds_since(t0);
  }

  // Middle layer.
  if (hybrid) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<cmat> v(static_cast<size_t>(dd));
    std::vector<HermitianPencil> pencils(static_cast<size_t>(dd));
    std::vector<double> weights(static_cast<size_t>(dd));
    for (int j = 0; j < dd; ++j) {
      pencils[size_t(j)] = z_pencil_dl(wk.local, j, ch.dl(b, j), wk.psi);
      v[size_t(j)] = wk.digital_dl[size_t(j)];
      weights[size_t(j)] = w.dl[size_t(b)][size_t(j)];
    }
    bool flagged = false;
    cmat unconstrained;
    const cmat projected =
        update_analog_beamformer(v, pencils, weights, wk.analog_tx,
                                 cfg.options.pencil_cap, &flagged, &unconstrained);
    wk.analog_tx = cfg.options.analog_projection ? projected
                                                 : detail::pin_scale(unconstrained);
    if (flagged) ++met.flagged_pencils;
    detail::overwrite_own_slice(snap, wk);
    met.wall_analog_s += detail::seconds_since(t0);
  }

  // Top layer.
  {
    const auto t0 = std::chrono::steady_clock::now();
    const cmat& wb = wk.analog_tx;
    const cmat wgram = herm(wb.adjoint() * wb);
    std::vector<cmat> s1(static_cast<size_t>(dd)), zbase(static_cast<size_t>(dd)), gram(static_cast<size_t>(dd));
    std::vector<double> seed_part(size_t(dd), 0.0);
    detail::run_sharded(dd, wk.pool, [&](int j) {
      HermitianPencil zp = z_pencil_dl(wk.local, j, ch.dl(b, j), 0.0);
      const cmat a_rf = herm(wb.adjoint() * zp.a * wb);
      const cmat b_rf = herm(wb.adjoint() * zp.b * wb);
      const cmat& vj = wk.digital_dl[size_t(j)];
      s1[size_t(j)] = herm(vj.adjoint() * a_rf * vj);
      zbase[size_t(j)] = herm(vj.adjoint() * b_rf * vj);
      gram[size_t(j)] = herm(vj.adjoint() * wgram * vj);
      seed_part[size_t(j)] =
          w.dl[size_t(b)][size_t(j)] * detail::spectral_max(a_rf);
    });
    double mu_seed = std::max(1e-9, 4.0 * wk.psi);
    for (int j = 0; j < dd; ++j) mu_seed = std::max(mu_seed, seed_part[size_t(j)]);

    const double budget = cfg.bs_power;
    std::vector<rvec> cand_p(static_cast<size_t>(dd));
    auto alloc_at = [&](double psi) -> double {
      std::vector<double> part(size_t(dd), 0.0);
      std::vector<int> unbounded(size_t(dd), 0);
      detail::run_sharded(dd, wk.pool, [&](int j) {
        rvec p;
        try {
          p = allocate_power(w.dl[size_t(b)][size_t(j)], s1[size_t(j)],
                             herm(zbase[size_t(j)] + psi * gram[size_t(j)]));
        } catch (const SingularProjection& e) {
          if (e.side == SingularProjection::Side::price) {
            unbounded[size_t(j)] = 1;
            cand_p[size_t(j)] = rvec::Zero(cfg.dl_streams);
            return;
          }
          p = rvec::Zero(cfg.dl_streams);
        }
        cand_p[size_t(j)] = p;
        double spent = 0.0;
        for (Eigen::Index c = 0; c < p.size(); ++c)
          spent += p(c) * std::real(gram[size_t(j)](c, c));
        part[size_t(j)] = spent;
      });
      for (int j = 0; j < dd; ++j)
        if (unbounded[size_t(j)]) return std::numeric_limits<double>::infinity();
      double total = 0.0;
      for (int j = 0; j < dd; ++j) total += part[size_t(j)];
      return total;
    };

    BisectionOutcome out = bisect_multiplier(budget, alloc_at, mu_seed);
    out.allocated = alloc_at(out.multiplier);  // materialize candidates
    met.bisection_evaluations += out.evaluations + 1;

    if (!detail::budget_contract_met(budget, out)) {
      std::vector<detail::FrozenStream> fro;
      for (int j = 0; j < dd; ++j)
        for (Eigen::Index c = 0; c < cand_p[size_t(j)].size(); ++c)
          fro.push_back({w.dl[size_t(b)][size_t(j)],
                         std::real(s1[size_t(j)](c, c)),
                         std::real(zbase[size_t(j)](c, c)),
                         std::real(gram[size_t(j)](c, c))});
      std::vector<double> repaired;
      BisectionOutcome rep =
          detail::frozen_power_repair(budget, fro, out.multiplier, repaired);
      met.bisection_evaluations += rep.evaluations;
      size_t at = 0;
      for (int j = 0; j < dd; ++j)
        for (Eigen::Index c = 0; c < cand_p[size_t(j)].size(); ++c)
          cand_p[size_t(j)](c) = repaired[at++];
      out.multiplier = rep.multiplier;
      out.allocated = rep.allocated;
    }

    wk.power_dl = cand_p;
    wk.psi = out.multiplier;
    detail::overwrite_own_slice(snap, wk);

    const double rr = out.multiplier > 0.0
                          ? std::abs(budget - out.allocated) / budget
                          : std::max(0.0, (out.allocated - budget) / budget);
    met.power_residual = std::max(met.power_residual, rr);
    met.slackness =
        std::max(met.slackness,
                 std::abs(out.multiplier * (budget - out.allocated)) / budget);
    met.wall_power_s += detail::seconds_since(t0);
  }
  return met;
}

/**
 * Uplink stack of one cell for one round. Bottom: every user's digital
 * directions from the frozen Z-pencils at the previous round's prices and
 * combiner, sharded. Middle: fully independent per-user price bisections at
 * the new directions, sharded, each with the centralized budget contract
 * and repair. Top: the receive covariances are rebuilt from the cell's
 * updated variables and one combiner solve runs on their weighted sums.
 */
inline CellRoundMetrics solve_ul_layers(CellWorker& wk, BeamformerState& snap,
                                        const NetworkConfig& cfg,
                                        const ChannelSet& ch,
                                        const NoiseProfile& noise,
                                        const Weights& w, AnalogMode mode) {
  CellRoundMetrics met;
  const int b = wk.cell;
  const int uu = cfg.ul_users_per_cell;
  if (uu == 0) return met;
  const bool hybrid = mode == AnalogMode::hybrid;

  // Bottom layer.
  {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> flags(size_t(uu), 0);
    detail::run_sharded(uu, wk.pool, [&](int k) {
      HermitianPencil zp = z_pencil_ul(wk.local, k, ch.ul(b, k), wk.analog_rx,
                                       wk.lambda[size_t(k)]);
      bool flagged = false;
      wk.digital_ul[size_t(k)] = update_digital_ul(zp, cfg.ul_streams, &flagged);
      if (flagged) flags[size_t(k)] = 1;
    });
    for (int k = 0; k < uu; ++k) met.flagged_pencils += flags[size_t(k)];
    detail::overwrite_own_slice(snap, wk);
    met.wall_digital_s += detail::seconds_since(t0);
  }

  // Middle layer.
  {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<double> residual(size_t(uu), 0.0), slack(size_t(uu), 0.0);
    std::vector<int> evals(size_t(uu), 0);
    detail::run_sharded(uu, wk.pool, [&](int k) {
      const cmat& u = wk.digital_ul[size_t(k)];
      HermitianPencil zp0 = z_pencil_ul(wk.local, k, ch.ul(b, k), wk.analog_rx, 0.0);
      const cmat s1 = herm(u.adjoint() * zp0.a * u);
      const cmat zbase = herm(u.adjoint() * zp0.b * u);
      const cmat ugram = herm(u.adjoint() * u);
      const double wk_weight = w.ul[size_t(b)][size_t(k)];
      const double budget = cfg.ul_power;

      rvec cand;
      auto alloc_at = [&](double lam) -> double {
        rvec p;
        try {
          p = allocate_power(wk_weight, s1, herm(zbase + lam * ugram));
        } catch (const SingularProjection& e) {
          if (e.side == SingularProjection::Side::price)
            return std::numeric_limits<double>::infinity();
          p = rvec::Zero(cfg.ul_streams);
        }
        cand = p;
        return p.sum();
      };

      const double mu_seed =
          std::max({1e-9, 4.0 * wk.lambda[size_t(k)],
                    wk_weight * detail::spectral_max(zp0.a)});
      BisectionOutcome out = bisect_multiplier(budget, alloc_at, mu_seed);
      out.allocated = alloc_at(out.multiplier);
      evals[size_t(k)] = out.evaluations + 1;

      if (!detail::budget_contract_met(budget, out)) {
        std::vector<detail::FrozenStream> fro;
        for (Eigen::Index c = 0; c < u.cols(); ++c)
          fro.push_back({wk_weight, std::real(s1(c, c)), std::real(zbase(c, c)),
                         std::real(ugram(c, c))});
        std::vector<double> repaired;
        BisectionOutcome rep =
            detail::frozen_power_repair(budget, fro, out.multiplier, repaired);
        evals[size_t(k)] += rep.evaluations;
        for (Eigen::Index c = 0; c < cand.size(); ++c)
          cand(c) = repaired[size_t(c)];
        out.multiplier = rep.multiplier;
        out.allocated = rep.allocated;
      }

      wk.power_ul[size_t(k)] = cand;
      wk.lambda[size_t(k)] = out.multiplier;
      residual[size_t(k)] =
          out.multiplier > 0.0
              ? std::abs(budget - out.allocated) / budget
              : std::max(0.0, (out.allocated - budget) / budget);
      slack[size_t(k)] =
          std::abs(out.multiplier * (budget - out.allocated)) / budget;
    });
    for (int k = 0; k < uu; ++k) {
      met.power_residual = std::max(met.power_residual, residual[size_t(k)]);
      met.slackness = std::max(met.slackness, slack[size_t(k)]);
      met.bisection_evaluations += evals[size_t(k)];
    }
    detail::overwrite_own_slice(snap, wk);
    met.wall_power_s += detail::seconds_since(t0);
  }

  // Top layer.
  if (hybrid && cfg.options.update_combiner == CombinerUpdate::per_iteration) {
    const auto t0 = std::chrono::steady_clock::now();
    NetworkCovariances nc = network_covariances(snap, ch, noise);
    wk.local.ra = nc.ra[size_t(b)];
    cmat sum_ra = cmat::Zero(cfg.bs_rx_antennas, cfg.bs_rx_antennas);
    cmat sum_ra_bar = sum_ra;
    for (int k = 0; k < uu; ++k) {
      wk.local.ra_bar[size_t(k)] = nc.ul[size_t(b)][size_t(k)].ra_bar;
      sum_ra += w.ul[size_t(b)][size_t(k)] * wk.local.ra;
      sum_ra_bar += w.ul[size_t(b)][size_t(k)] * wk.local.ra_bar[size_t(k)];
    }
    bool flagged = false;
    cmat unconstrained;
    const cmat projected =
        update_analog_combiner(sum_ra, sum_ra_bar, cfg.bs_rx_rf, wk.analog_rx,
                               &flagged, &unconstrained);
    wk.analog_rx = cfg.options.analog_projection ? projected
                                                 : detail::pin_scale(unconstrained);
    if (flagged) ++met.flagged_pencils;
    detail::overwrite_own_slice(snap, wk);
    met.wall_analog_s += detail::seconds_since(t0);
  }
  return met;
}

/**
 * Distributed solver loop. Per round: every worker broadcasts its slice
 * through the bus, rebuilds its local variables from the barrier snapshot,
 * and solves the downlink stack then the uplink stack; the main thread then
 * collects the slices, records the global objective, and applies the same
 * convergence rule as the centralized loop. Cells run sharded over at most
 * `workers` lanes and per-link sub-tasks over each worker's share; with the
 * barrier in place neither sharding changes any result bit. After the loop
 * the analog phases are quantized once and downlink powers rescaled back
 * under the budget where the snapping overshot it, exactly as in the
 * centralized solver; the unconstrained diagnostic mode skips both.
 */
inline SolverRun run_pd_hybf(const NetworkConfig& cfg, const ChannelSet& ch,
                             int workers = 1,
                             AnalogMode mode = AnalogMode::hybrid) {
  cfg.validate();
  if (workers < 1) throw ConfigError("run_pd_hybf: workers must be >= 1");
  if (mode == AnalogMode::fully_digital &&
      (cfg.bs_tx_rf != cfg.bs_tx_antennas ||
       cfg.bs_rx_rf != cfg.bs_rx_antennas))
    throw ConfigError(
        "run_pd_hybf: fully digital mode needs RF counts equal to antenna counts");

  const NoiseProfile noise = NoiseProfile::from_config(cfg);
  const Weights w = Weights::from_config(cfg);
  const int bb = cfg.num_cells;
  const int dd = cfg.dl_users_per_cell;
  const bool hybrid = mode == AnalogMode::hybrid;
  const bool project = cfg.options.analog_projection;
  const bool stale = cfg.options.stale_feedback;

  const int cell_lanes = std::min(workers, std::max(bb, 1));
  const int link_pool = std::max(1, workers / std::max(bb, 1));

  SolverRun run;
  BeamformerState& s = run.state;
  SolverTrace& tr = run.trace;
  s = init_state(cfg, ch);
  if (!hybrid) detail::pin_identity_analog(s, cfg, ch);

  tr.initial_wsr = wsr(s, ch, noise, w);
  tr.flops_per_round = detail::pd_flops_per_round(cfg, link_pool);
  double prev_wsr = tr.initial_wsr;

  std::vector<CellWorker> cells;
  cells.reserve(size_t(bb));
  for (int b = 0; b < bb; ++b)
    cells.push_back(detail::worker_from_state(s, b, link_pool));
  FeedbackBus bus(bb);

  const auto run_t0 = std::chrono::steady_clock::now();
  for (int round = 0; round < cfg.max_iters; ++round) {
    IterationRecord rec;
    rec.iteration = round;
    const auto iter_t0 = std::chrono::steady_clock::now();

    // Barrier: broadcast every cell's slice, once per pairwise receiver.
    for (int b = 0; b < bb; ++b) {
      const size_t payload = bus.post(detail::worker_message(cells[size_t(b)], round));
      rec.feedback_bytes += (long long)(payload) * (bb - 1);
    }
    tr.messages += (long long)(bb) * (bb - 1);
    tr.feedback_bytes += rec.feedback_bytes;

    // Cells in parallel on their frozen locals.
    std::vector<CellRoundMetrics> mets(static_cast<size_t>(bb));
    detail::run_sharded(bb, cell_lanes, [&](int b) {
      CellWorker& wk = cells[size_t(b)];
      BeamformerState snap =
          detail::assemble_snapshot(wk, bus, round, cfg, stale);
      const auto refresh_t0 = std::chrono::steady_clock::now();
      wk.local = refresh_local_state(b, snap, ch, noise, w, round);
      CellRoundMetrics m;
      m.wall_digital_s += detail::seconds_since(refresh_t0);
      const CellRoundMetrics dl = solve_dl_layers(wk, snap, cfg, ch, noise, w, mode);
      const CellRoundMetrics ul = solve_ul_layers(wk, snap, cfg, ch, noise, w, mode);
      m.wall_analog_s += dl.wall_analog_s + ul.wall_analog_s;
      m.wall_digital_s += dl.wall_digital_s + ul.wall_digital_s;
      m.wall_power_s += dl.wall_power_s + ul.wall_power_s;
      m.power_residual = std::max(dl.power_residual, ul.power_residual);
      m.slackness = std::max(dl.slackness, ul.slackness);
      m.flagged_pencils = dl.flagged_pencils + ul.flagged_pencils;
      m.bisection_evaluations = dl.bisection_evaluations + ul.bisection_evaluations;
      mets[size_t(b)] = m;
    });

    for (int b = 0; b < bb; ++b) {
      const CellRoundMetrics& m = mets[size_t(b)];
      rec.wall_analog_s += m.wall_analog_s;
      rec.wall_digital_s += m.wall_digital_s;
      rec.wall_power_s += m.wall_power_s;
      rec.power_residual = std::max(rec.power_residual, m.power_residual);
      rec.slackness = std::max(rec.slackness, m.slackness);
      tr.flagged_pencils += m.flagged_pencils;
      tr.bisection_evaluations += m.bisection_evaluations;
      detail::overwrite_own_slice(s, cells[size_t(b)]);
    }

    rec.wsr_nats = wsr(s, ch, noise, w);
    if (hybrid && project) {
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

    // Soft trend audit; simultaneous cross-cell updates carry no per-block
    // monotonicity guarantee, so dips are counted rather than fatal.
    ++tr.round_trend_checks;
    const double rel =
        (rec.wsr_nats - prev_wsr) / std::max(1.0, std::abs(prev_wsr));
    if (rel < -1e-6) {
      ++tr.round_trend_violations;
      tr.worst_round_dip = std::min(tr.worst_round_dip, rel);
    }

    if (std::abs(rec.wsr_nats - prev_wsr) <
        cfg.tol * std::max(std::abs(prev_wsr), 1e-12)) {
      tr.converged = true;
      break;
    }
    prev_wsr = rec.wsr_nats;
  }

  tr.wsr_before_quantization =
      tr.iterations.empty() ? tr.initial_wsr : tr.iterations.back().wsr_nats;

  if (hybrid && project) {
    for (int b = 0; b < bb; ++b) {
      s.analog_tx[size_t(b)] = quantize_phases(s.analog_tx[size_t(b)], cfg.phase_bits);
      s.analog_rx[size_t(b)] = quantize_phases(s.analog_rx[size_t(b)], cfg.phase_bits);
    }
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

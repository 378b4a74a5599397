#pragma once
/**
 * @file scenario.hpp
 * @brief Network configuration, seeded random generation, and synthesis of
 *        every channel matrix in the multicell full-duplex scenario:
 *        clustered mmWave links plus the near-field Rician self-interference
 *        channel between a base station's own transmit and receive arrays.
 *
 * Reproducibility contract: a ChannelSet is fully determined by (seed,
 * config). The generator is mt19937_64 with our own Box-Muller transform on
 * top, because std::normal_distribution is implementation-defined and would
 * break replay across standard libraries. Draw order is documented at
 * draw_network_channels and is part of the contract.
 */

#include "hybf/numerics.hpp"

#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace hybf {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// dB to linear power ratio; -inf dB means exactly off.
inline double db_to_linear(double db) {
  if (std::isinf(db) && db < 0.0) return 0.0;
  return std::pow(10.0, db / 10.0);
}

inline double deg_to_rad(double deg) { return deg * kPi / 180.0; }

enum class CombinerUpdate { per_iteration, never };
enum class HdPowerPolicy { full_power, split_power };

/// Solver behavior switches; all reachable from the config file.
struct SolverOptions {
  // Centralized solver recomputes directions at every candidate multiplier
  // inside the power bisections. Required for the monotonicity guarantee;
  // off reproduces the cheaper frozen-direction update.
  bool exact_power_blocks = true;
  CombinerUpdate update_combiner = CombinerUpdate::per_iteration;
  // Whether the interference-plus-noise covariances include the thermal
  // term. On matches the signal model; off isolates interference shaping.
  bool phi_includes_noise = true;
  HdPowerPolicy hd_power_policy = HdPowerPolicy::full_power;
  Eigen::Index pencil_cap = 8192;  // refuse Kronecker pencils larger than this
  int workers = 1;                 // worker threads for the distributed solver
  bool stale_feedback = false;     // reuse last round's neighbor state if set
  // Unit-modulus projection of the analog stages, plus the final phase
  // quantization. Off is a diagnostic mode: the unconstrained analog updates
  // are the ones the round-trend audit of the distributed solver reasons
  // about, so tests disable the projection when they assert on that trend.
  bool analog_projection = true;
};

/**
 * Full scenario description. Antenna counts, RF chains, and stream counts
 * are uniform across cells and users; the per-link containers in ChannelSet
 * still index per (cell, user) so a later relaxation stays local to this
 * struct and the parser.
 */
struct NetworkConfig {
  int num_cells = 2;
  int dl_users_per_cell = 1;
  int ul_users_per_cell = 1;

  int bs_tx_antennas = 32;  // M_b
  int bs_rx_antennas = 16;  // N_b
  int bs_tx_rf = 8;
  int bs_rx_rf = 8;
  int ul_user_antennas = 4;
  int dl_user_antennas = 4;
  int dl_streams = 2;
  int ul_streams = 2;
  int phase_bits = 10;  // quantizer resolution, 2^bits levels on the circle

  int paths = 3;  // clustered-channel path count
  double aoa_min_deg = -30.0;
  double aoa_max_deg = 30.0;
  double rician_kappa = 1.0;       // LoS-to-scatter power ratio of the SI link
  double array_separation_m = 0.2; // distance between own tx and rx arrays
  double array_angle_deg = 90.0;   // direction of the rx array offset
  double wavelength_m = 0.005;     // 60 GHz carrier

  double snr_db = 20.0;    // sets thermal noise against unit power budgets
  double ldr_tx_db = -80.0;  // transmit-chain distortion, relative to signal
  double ldr_rx_db = -80.0;  // receive-chain distortion
  double bs_power = 1.0;
  double ul_power = 1.0;
  double rate_weight = 1.0;

  std::uint64_t seed = 1;
  int realizations = 20;
  int max_iters = 200;
  double tol = 1e-4;  // relative weighted-sum-rate change at which to stop

  SolverOptions options;

  double noise_variance() const { return std::pow(10.0, -snr_db / 10.0); }
  double ldr_tx_coeff() const { return db_to_linear(ldr_tx_db); }
  double ldr_rx_coeff() const { return db_to_linear(ldr_rx_db); }

  /// Throws ConfigError on the first violated invariant.
  void validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("config: " + msg); };
    if (num_cells < 1) fail("num_cells must be >= 1");
    if (dl_users_per_cell < 0 || ul_users_per_cell < 0)
      fail("user counts must be >= 0");
    if (bs_tx_antennas < 1 || bs_rx_antennas < 1 || ul_user_antennas < 1 ||
        dl_user_antennas < 1)
      fail("antenna counts must be >= 1");
    if (bs_tx_rf < 1 || bs_rx_rf < 1) fail("RF chain counts must be >= 1");
    if (bs_tx_rf > bs_tx_antennas) fail("bs_tx_rf exceeds bs_tx_antennas");
    if (bs_rx_rf > bs_rx_antennas) fail("bs_rx_rf exceeds bs_rx_antennas");
    if (dl_streams < 1 || ul_streams < 1) fail("stream counts must be >= 1");
    if (dl_streams > std::min(bs_tx_rf, dl_user_antennas))
      fail("dl_streams exceeds min(bs_tx_rf, dl_user_antennas)");
    if (ul_streams > std::min(bs_rx_rf, ul_user_antennas))
      fail("ul_streams exceeds min(bs_rx_rf, ul_user_antennas)");
    if (phase_bits < 1) fail("phase_bits must be >= 1");
    if (paths < 1) fail("paths must be >= 1");
    if (!(aoa_min_deg <= aoa_max_deg)) fail("aoa_min_deg > aoa_max_deg");
    if (!(rician_kappa >= 0.0)) fail("rician_kappa must be >= 0");
    if (!(array_separation_m > 0.0)) fail("array_separation_m must be > 0");
    if (!(wavelength_m > 0.0)) fail("wavelength_m must be > 0");
    if (!(bs_power > 0.0) || !(ul_power > 0.0)) fail("power budgets must be > 0");
    if (!(rate_weight > 0.0)) fail("rate_weight must be > 0");
    if (realizations < 1) fail("realizations must be >= 1");
    if (max_iters < 1) fail("max_iters must be >= 1");
    if (!(tol > 0.0)) fail("tol must be > 0");
    if (options.pencil_cap < 1) fail("pencil_cap must be >= 1");
    if (options.workers < 1) fail("workers must be >= 1");
  }
};

/**
 * Seedable generator with pinned-down output: 64-bit Mersenne Twister for
 * bits, explicit Box-Muller for normals. One instance per realization,
 * seeded base_seed + realization index.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Uniform on [0, 1), 53-bit resolution.
  double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; second value of the pair is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = (double(gen_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1], log-safe
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * kPi * u2);
    have_spare_ = true;
    return r * std::cos(2.0 * kPi * u2);
  }

  /// Circular complex Gaussian with unit second moment E|z|^2 = 1.
  cxd cgauss() {
    double re = normal();
    double im = normal();
    return cxd(re, im) / std::sqrt(2.0);
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Half-wavelength ULA response: entry m = exp(i pi m sin(angle)).
inline cvec steering_vector(Eigen::Index num_antennas, double angle) {
  cvec a(num_antennas);
  const double s = std::sin(angle);
  for (Eigen::Index m = 0; m < num_antennas; ++m)
    a(m) = std::exp(cxd(0.0, kPi * double(m) * s));
  return a;
}

/**
 * Clustered mmWave channel: sqrt(1/n_paths) sum of n_paths rank-1 terms
 * alpha a_r(phi) a_t(theta)^T with alpha ~ CN(0,1) and both angles uniform
 * on [aoa_min_rad, aoa_max_rad]. Per path the draw order is amplitude,
 * arrival angle, departure angle. E ||H||_F^2 = n_r * n_t.
 */
inline cmat draw_cluster_channel(Rng& rng, Eigen::Index n_r, Eigen::Index n_t,
                                 int n_paths, double aoa_min_rad,
                                 double aoa_max_rad) {
  cmat h = cmat::Zero(n_r, n_t);
  for (int n = 0; n < n_paths; ++n) {
    cxd alpha = rng.cgauss();
    double phi = rng.uniform(aoa_min_rad, aoa_max_rad);
    double theta = rng.uniform(aoa_min_rad, aoa_max_rad);
    h.noalias() +=
        alpha * steering_vector(n_r, phi) * steering_vector(n_t, theta).transpose();
  }
  return std::sqrt(1.0 / double(n_paths)) * h;
}

/**
 * Near-field self-interference channel between a BS's own arrays:
 * sqrt(k/(k+1)) H_los + sqrt(1/(k+1)) H_scatter. Geometry: both ULAs lie
 * parallel to the x-axis at lambda/2 spacing; transmit element n sits at
 * (n lambda/2, 0), receive element m at D(cos T, sin T) + (m lambda/2, 0)
 * with separation D and offset angle T. Entry (m,n) of the LoS part is
 * (rho / r_mn) exp(-i 2 pi r_mn / lambda), rho scaled so the LoS Frobenius
 * norm squared is exactly M*N. The scatter part is one clustered draw, and
 * it is drawn even at kappa = inf so the consumed stream does not depend on
 * kappa.
 */
inline cmat draw_si_channel(Rng& rng, const NetworkConfig& cfg) {
  const Eigen::Index m_tx = cfg.bs_tx_antennas;
  const Eigen::Index n_rx = cfg.bs_rx_antennas;
  const double spacing = cfg.wavelength_m / 2.0;
  const double th = deg_to_rad(cfg.array_angle_deg);
  const double ox = cfg.array_separation_m * std::cos(th);
  const double oy = cfg.array_separation_m * std::sin(th);

  rmat dist(n_rx, m_tx);
  double inv_sq_sum = 0.0;
  for (Eigen::Index m = 0; m < n_rx; ++m)
    for (Eigen::Index n = 0; n < m_tx; ++n) {
      double dx = ox + double(m) * spacing - double(n) * spacing;
      double r = std::hypot(dx, oy);
      if (r == 0.0)
        throw GeometryError("si channel: tx and rx elements coincide");
      dist(m, n) = r;
      inv_sq_sum += 1.0 / (r * r);
    }
  const double rho = std::sqrt(double(m_tx * n_rx) / inv_sq_sum);

  cmat los(n_rx, m_tx);
  for (Eigen::Index m = 0; m < n_rx; ++m)
    for (Eigen::Index n = 0; n < m_tx; ++n) {
      double r = dist(m, n);
      los(m, n) = (rho / r) * std::exp(cxd(0.0, -2.0 * kPi * r / cfg.wavelength_m));
    }

  cmat scatter = draw_cluster_channel(rng, n_rx, m_tx, cfg.paths,
                                      deg_to_rad(cfg.aoa_min_deg),
                                      deg_to_rad(cfg.aoa_max_deg));
  double k = cfg.rician_kappa;
  double w_los = std::isinf(k) ? 1.0 : std::sqrt(k / (k + 1.0));
  double w_sc = std::isinf(k) ? 0.0 : std::sqrt(1.0 / (k + 1.0));
  return w_los * los + w_sc * scatter;
}

/// Channel roles, used for the access log and nothing else.
enum class ChannelRole : int {
  direct_dl = 0,  // BS b to its DL user j
  direct_ul,      // UL user k to its BS b
  ci,             // UL user to DL user, in-cell and out-cell alike
  bs_to_dl,       // other-cell BS to a DL user
  ul_to_bs,       // other-cell UL user to a BS
  bs_to_bs,       // BS to BS
  si,             // a BS's own tx array into its own rx array
};
inline constexpr int kNumChannelRoles = 7;

/**
 * Immutable channel collection for one realization. Accessors log reads per
 * role (relaxed atomics, safe under concurrent readers); the half-duplex
 * baseline's isolation test asserts that the roles it must not exploit were
 * never touched.
 */
class ChannelSet {
 public:
  const cmat& dl(int b, int j) const {
    touch(ChannelRole::direct_dl);
    return direct_dl_[size_t(b)][size_t(j)];
  }
  const cmat& ul(int b, int k) const {
    touch(ChannelRole::direct_ul);
    return direct_ul_[size_t(b)][size_t(k)];
  }
  /// UL user k in cell c into DL user j in cell b (c == b is in-cell).
  const cmat& ci(int b, int j, int c, int k) const {
    touch(ChannelRole::ci);
    return ci_[size_t(b)][size_t(j)][size_t(c)][size_t(k)];
  }
  /// BS c into DL user j of cell b, c != b.
  const cmat& bs_dl(int b, int j, int c) const {
    touch(ChannelRole::bs_to_dl);
    return bs_to_dl_[size_t(b)][size_t(j)][size_t(c)];
  }
  /// UL user k of cell c into BS b, c != b.
  const cmat& ul_bs(int b, int c, int k) const {
    touch(ChannelRole::ul_to_bs);
    return ul_to_bs_[size_t(b)][size_t(c)][size_t(k)];
  }
  /// BS c into BS b, c != b.
  const cmat& bs_bs(int b, int c) const {
    touch(ChannelRole::bs_to_bs);
    return bs_to_bs_[size_t(b)][size_t(c)];
  }
  const cmat& si(int b) const {
    touch(ChannelRole::si);
    return si_[size_t(b)];
  }

  int cells() const { return cells_; }
  int dl_users() const { return dl_users_; }
  int ul_users() const { return ul_users_; }

  /// Total number of stored matrices (directed links).
  int census() const {
    int same = cells_ * (dl_users_ + ul_users_ + dl_users_ * ul_users_ + 1);
    int pairs = cells_ * (cells_ - 1);
    int cross = pairs * (dl_users_ * ul_users_ + dl_users_ + ul_users_ + 1);
    return same + cross;
  }

  std::uint64_t access_count(ChannelRole role) const {
    return (*access_)[size_t(role)].load(std::memory_order_relaxed);
  }
  void reset_access_log() const {
    for (auto& c : *access_) c.store(0, std::memory_order_relaxed);
  }

  friend ChannelSet draw_network_channels(Rng& rng, const NetworkConfig& cfg);

 private:
  int cells_ = 0, dl_users_ = 0, ul_users_ = 0;
  std::vector<std::vector<cmat>> direct_dl_;                // [b][j]
  std::vector<std::vector<cmat>> direct_ul_;                // [b][k]
  std::vector<std::vector<std::vector<std::vector<cmat>>>> ci_;  // [b][j][c][k]
  std::vector<std::vector<std::vector<cmat>>> bs_to_dl_;    // [b][j][c], c != b
  std::vector<std::vector<std::vector<cmat>>> ul_to_bs_;    // [b][c][k], c != b
  std::vector<std::vector<cmat>> bs_to_bs_;                 // [b][c], c != b
  std::vector<cmat> si_;                                    // [b]

  using AccessLog = std::array<std::atomic<std::uint64_t>, kNumChannelRoles>;
  mutable std::unique_ptr<AccessLog> access_ = std::make_unique<AccessLog>();

  void touch(ChannelRole role) const {
    (*access_)[size_t(role)].fetch_add(1, std::memory_order_relaxed);
  }
};

/**
 * Draws every link of the network from a single stream. Fixed order, part
 * of the reproducibility contract: for each cell b ascending,
 *   1. direct DL channels, j ascending;
 *   2. direct UL channels, k ascending;
 *   3. in-cell cross interference, (j, k) lexicographic;
 *   4. for each other cell c ascending: out-cell cross interference (j, k),
 *      then BS c to DL users of b, then UL users of c to BS b, then BS c to
 *      BS b;
 *   5. the self-interference channel of b.
 */
inline ChannelSet draw_network_channels(Rng& rng, const NetworkConfig& cfg) {
  cfg.validate();
  const int bb = cfg.num_cells, dd = cfg.dl_users_per_cell,
            uu = cfg.ul_users_per_cell;
  const double lo = deg_to_rad(cfg.aoa_min_deg), hi = deg_to_rad(cfg.aoa_max_deg);
  auto cluster = [&](Eigen::Index nr, Eigen::Index nt) {
    return draw_cluster_channel(rng, nr, nt, cfg.paths, lo, hi);
  };

  ChannelSet cs;
  cs.cells_ = bb;
  cs.dl_users_ = dd;
  cs.ul_users_ = uu;
  cs.direct_dl_.assign(bb, std::vector<cmat>(dd));
  cs.direct_ul_.assign(bb, std::vector<cmat>(uu));
  cs.ci_.assign(bb, std::vector<std::vector<std::vector<cmat>>>(
                        dd, std::vector<std::vector<cmat>>(
                                bb, std::vector<cmat>(uu))));
  cs.bs_to_dl_.assign(bb, std::vector<std::vector<cmat>>(dd, std::vector<cmat>(bb)));
  cs.ul_to_bs_.assign(bb, std::vector<std::vector<cmat>>(bb, std::vector<cmat>(uu)));
  cs.bs_to_bs_.assign(bb, std::vector<cmat>(bb));
  cs.si_.resize(bb);

  for (int b = 0; b < bb; ++b) {
    for (int j = 0; j < dd; ++j)
      cs.direct_dl_[b][j] = cluster(cfg.dl_user_antennas, cfg.bs_tx_antennas);
    for (int k = 0; k < uu; ++k)
      cs.direct_ul_[b][k] = cluster(cfg.bs_rx_antennas, cfg.ul_user_antennas);
    for (int j = 0; j < dd; ++j)
      for (int k = 0; k < uu; ++k)
        cs.ci_[b][j][b][k] = cluster(cfg.dl_user_antennas, cfg.ul_user_antennas);
    for (int c = 0; c < bb; ++c) {
      if (c == b) continue;
      for (int j = 0; j < dd; ++j)
        for (int k = 0; k < uu; ++k)
          cs.ci_[b][j][c][k] = cluster(cfg.dl_user_antennas, cfg.ul_user_antennas);
      for (int j = 0; j < dd; ++j)
        cs.bs_to_dl_[b][j][c] = cluster(cfg.dl_user_antennas, cfg.bs_tx_antennas);
      for (int k = 0; k < uu; ++k)
        cs.ul_to_bs_[b][c][k] = cluster(cfg.bs_rx_antennas, cfg.ul_user_antennas);
      cs.bs_to_bs_[b][c] = cluster(cfg.bs_rx_antennas, cfg.bs_tx_antennas);
    }
    cs.si_[b] = draw_si_channel(rng, cfg);
  }
  return cs;
}

namespace detail {

inline void strip(std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  size_t b = s.find_last_not_of(" \t\r\n");
  s = (a == std::string::npos) ? std::string() : s.substr(a, b - a + 1);
}

inline int parse_int(const std::string& key, const std::string& v) {
  size_t pos = 0;
  long out = 0;
  try {
    out = std::stol(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  }
  if (pos != v.size() || out > INT32_MAX || out < INT32_MIN)
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  return int(out);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an unsigned integer");
  }
  if (pos != v.size())
    throw ConfigError("config key '" + key + "': '" + v + "' is not an unsigned integer");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
  if (pos != v.size())
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

}  // namespace detail

/**
 * Applies one key=value pair to a config. This is the single source of truth
 * for the key surface; the file parser and the CLI sweep overrides both call
 * it. Unknown keys throw ConfigError naming the key.
 */
inline void apply_config_entry(NetworkConfig& cfg, const std::string& key,
                               const std::string& value) {
  using detail::parse_bool;
  using detail::parse_double;
  using detail::parse_int;
  using detail::parse_u64;
  auto& o = cfg.options;
  if (key == "num_cells") cfg.num_cells = parse_int(key, value);
  else if (key == "dl_users_per_cell") cfg.dl_users_per_cell = parse_int(key, value);
  else if (key == "ul_users_per_cell") cfg.ul_users_per_cell = parse_int(key, value);
  else if (key == "bs_tx_antennas") cfg.bs_tx_antennas = parse_int(key, value);
  else if (key == "bs_rx_antennas") cfg.bs_rx_antennas = parse_int(key, value);
  else if (key == "bs_tx_rf") cfg.bs_tx_rf = parse_int(key, value);
  else if (key == "bs_rx_rf") cfg.bs_rx_rf = parse_int(key, value);
  else if (key == "ul_user_antennas") cfg.ul_user_antennas = parse_int(key, value);
  else if (key == "dl_user_antennas") cfg.dl_user_antennas = parse_int(key, value);
  else if (key == "dl_streams") cfg.dl_streams = parse_int(key, value);
  else if (key == "ul_streams") cfg.ul_streams = parse_int(key, value);
  else if (key == "phase_bits") cfg.phase_bits = parse_int(key, value);
  else if (key == "paths") cfg.paths = parse_int(key, value);
  else if (key == "aoa_min_deg") cfg.aoa_min_deg = parse_double(key, value);
  else if (key == "aoa_max_deg") cfg.aoa_max_deg = parse_double(key, value);
  else if (key == "rician_kappa") cfg.rician_kappa = parse_double(key, value);
  else if (key == "array_separation_m") cfg.array_separation_m = parse_double(key, value);
  else if (key == "array_angle_deg") cfg.array_angle_deg = parse_double(key, value);
  else if (key == "wavelength_m") cfg.wavelength_m = parse_double(key, value);
  else if (key == "snr_db") cfg.snr_db = parse_double(key, value);
  else if (key == "ldr_db") {  // convenience: both chains at once
    cfg.ldr_tx_db = parse_double(key, value);
    cfg.ldr_rx_db = cfg.ldr_tx_db;
  } else if (key == "ldr_tx_db") cfg.ldr_tx_db = parse_double(key, value);
  else if (key == "ldr_rx_db") cfg.ldr_rx_db = parse_double(key, value);
  else if (key == "bs_power") cfg.bs_power = parse_double(key, value);
  else if (key == "ul_power") cfg.ul_power = parse_double(key, value);
  else if (key == "rate_weight") cfg.rate_weight = parse_double(key, value);
  else if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "realizations") cfg.realizations = parse_int(key, value);
  else if (key == "max_iters") cfg.max_iters = parse_int(key, value);
  else if (key == "tol") cfg.tol = parse_double(key, value);
  else if (key == "exact_power_blocks") o.exact_power_blocks = parse_bool(key, value);
  else if (key == "update_combiner") {
    if (value == "per_iteration") o.update_combiner = CombinerUpdate::per_iteration;
    else if (value == "never") o.update_combiner = CombinerUpdate::never;
    else throw ConfigError("config key 'update_combiner': expected per_iteration or never");
  } else if (key == "phi_includes_noise") o.phi_includes_noise = parse_bool(key, value);
  else if (key == "hd_power_policy") {
    if (value == "full_power") o.hd_power_policy = HdPowerPolicy::full_power;
    else if (value == "split_power") o.hd_power_policy = HdPowerPolicy::split_power;
    else throw ConfigError("config key 'hd_power_policy': expected full_power or split_power");
  } else if (key == "pencil_cap") o.pencil_cap = parse_int(key, value);
  else if (key == "workers") o.workers = parse_int(key, value);
  else if (key == "stale_feedback") o.stale_feedback = parse_bool(key, value);
  else if (key == "analog_projection") o.analog_projection = parse_bool(key, value);
  else throw ConfigError("unknown config key '" + key + "'");
}

/**
 * key = value text format, one entry per line. '#' starts a comment, blank
 * lines are skipped. Duplicate keys are an error, as is combining the ldr_db
 * shorthand with a chain-specific ldr key in the same text. The result is
 * validated before being returned.
 */
inline NetworkConfig parse_config_text(const std::string& text) {
  NetworkConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    detail::strip(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    detail::strip(key);
    detail::strip(value);
    if (!seen.insert(key).second)
      throw ConfigError("duplicate config key '" + key + "'");
    apply_config_entry(cfg, key, value);
  }
  if (seen.count("ldr_db") && (seen.count("ldr_tx_db") || seen.count("ldr_rx_db")))
    throw ConfigError("ldr_db cannot be combined with ldr_tx_db/ldr_rx_db");
  cfg.validate();
  return cfg;
}

inline NetworkConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

}  // namespace hybf

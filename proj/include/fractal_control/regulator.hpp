#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fractal_control/control.hpp"
#include "fractal_control/diffusion.hpp"
#include "fractal_control/stats.hpp"

namespace fc {

/// minimize E[(a/2) int_0^1 u^2 dt + x(1)^2], dx = u dt + u d<W> + u dW, x(0) = 1.
struct RegulatorConfig {
  double a = 1.0;
  int level = 6;
  std::size_t paths = 100000;
  std::uint64_t seed = 0;
  int workers = 0;
  StartDistribution start;
  /// Checks and the adjoint regression use grid_intervals + 1 times.
  int grid_intervals = 32;
  /// The control interpolates theta/eta, and the adjoint is regressed, on a
  /// grid this many times finer. q is held constant over each regression
  /// interval, which biases it against -p on the coarse grid.
  int control_refinement = 4;
  double spike_t0 = 0.5;
  std::vector<double> spike_epsilons{0.125, 0.0625, 0.03125, 0.015625};
  /// Paths recorded for the adjoint regression; 0 means all.
  std::size_t adjoint_paths = 0;
  AdjointBasis basis;

  void validate() const;
  WalkConfig walk() const;
};

/// Phi(t) = exp(-2 W_t - <W>_t) at every step time of the path.
std::vector<double> phi_along_path(const PathSample& path);

/// -[Phi(1)/2 + (1/a) sum Phi(t_k) dt] averaged over paths.
Estimate estimate_theta0(const WalkModel& model, const RegulatorConfig& cfg);
/// Same for several weights on one path set.
std::vector<Estimate> estimate_theta0_family(const WalkModel& model, const RegulatorConfig& cfg,
                                             std::span<const double> weights);

/// Mean over paths of Phi(1) - 1 - sum (Phi d<W> - 2 Phi dW), per level.
struct PhiItoPoint {
  int level = 0;
  Estimate residual;
};
std::vector<PhiItoPoint> phi_ito_audit(std::span<const int> levels, std::size_t paths, std::uint64_t seed,
                                       int workers = 0);
/// Slope of log|mean residual| against log 5^m (negative when it shrinks).
double phi_ito_slope(std::span<const PhiItoPoint> points);

/// theta(t, v) and eta(t, v) at grid times, exact for the level-m chain:
/// theta_k(v) = -E_v[Phi_K/Phi_k / 2 + (1/a) sum_{i>=k} Phi_i/Phi_k dt],
/// computed backwards; eta is the conditional regression coefficient of the
/// increment of Phi theta - (1/a) int Phi on Phi dW, solved for eta.
class ThetaTable {
 public:
  double a() const { return a_; }
  double dt() const { return dt_; }
  std::size_t vertex_count() const { return nv_; }
  const std::vector<std::uint64_t>& grid_steps() const { return steps_; }
  std::vector<double> grid_times() const;
  std::size_t grid_size() const { return steps_.size(); }

  double theta(std::size_t j, int v) const { return theta_[at(coarse_[j], v)]; }
  /// theta one step after grid point j (j < last).
  double theta_next(std::size_t j, int v) const { return next_[at(coarse_[j], v)]; }
  double eta(std::size_t j, int v) const { return eta_[at(coarse_[j], v)]; }

  /// The finer control grid; it contains every grid point.
  const std::vector<std::uint64_t>& control_steps() const { return fine_; }
  double control_theta(std::size_t i, int v) const { return theta_[at(i, v)]; }
  double control_eta(std::size_t i, int v) const { return eta_[at(i, v)]; }

  /// Linear interpolation in t between control grid points.
  double theta_at(std::uint64_t k, int v) const;
  double eta_at(std::uint64_t k, int v) const;
  /// Control grid interval containing step k and the interpolation weight.
  std::pair<std::size_t, double> locate(std::uint64_t k) const;

  friend ThetaTable tabulate_theta_eta(const WalkModel& model, const RegulatorConfig& cfg);

 private:
  double a_ = 1.0;
  double dt_ = 1.0;
  std::size_t nv_ = 0;
  std::size_t at(std::size_t i, int v) const { return i * nv_ + static_cast<std::size_t>(v); }

  std::vector<std::uint64_t> steps_;
  std::vector<std::uint64_t> fine_;
  /// control grid index of each grid point
  std::vector<std::size_t> coarse_;
  std::vector<double> theta_;
  std::vector<double> next_;
  std::vector<double> eta_;
};

ThetaTable tabulate_theta_eta(const WalkModel& model, const RegulatorConfig& cfg);

/// Minimum number of sub-simulated walks per vertex.
inline constexpr std::size_t kMinSubsamples = 32;

/// Monte Carlo theta(t_j, v) by walks restarted at v at grid step j. Throws
/// CoverageError listing the vertices when n_sub < kMinSubsamples.
std::vector<Estimate> theta_by_subsimulation(const WalkModel& model, const RegulatorConfig& cfg,
                                             std::uint64_t step, std::span<const int> vertices, std::size_t n_sub);

/// Controls compared in the tournament and the spike experiments. Each is
/// a function of (t, p(t), theta, eta) along the path.
struct RegulatorControl {
  enum class Kind { optimal, constant, p_over_a, eta_theta_p, scaled, tilted, spike };
  enum class Channel { dt, bracket };

  std::string name;
  Kind kind = Kind::optimal;
  /// constant value, scale factor, or spike value
  double value = 0.0;
  /// spike: replace (shift = false) or add to (shift = true) the optimal
  /// control on `channel` over `steps`.
  Channel channel = Channel::dt;
  bool shift = false;
  StepSet steps;
  double epsilon = 0.0;
};

std::vector<RegulatorControl> default_competitors();
std::vector<RegulatorControl> spike_controls(const RegulatorConfig& cfg, double dt);

/// p(t) = exp(-W_t - <W>_t / 2) / theta(0, X_0).
double optimal_p(const ThetaTable& table, int start_vertex, double w, double qv);

/// The optimal control as a generic two-part policy.
ControlPolicy optimal_policy(const ThetaTable& table);
ControlPolicy regulator_policy(const RegulatorControl& control, const ThetaTable& table);

/// xbar, ubar and p along one path.
struct OptimalPath {
  std::vector<double> x;
  std::vector<double> u_ac;
  std::vector<double> u_sing;
  std::vector<double> p;
  double cost = 0.0;
};
OptimalPath optimal_pair(const ThetaTable& table, const PathSample& path);

/// Everything gathered from one pass over common paths.
struct RegulatorPass {
  std::vector<Estimate> cost;
  /// J(control) - J(first control), per path.
  std::vector<Estimate> difference;
  Estimate theta0_mc;
  /// Increments of Phi theta - (1/a) int Phi between grid points.
  std::vector<Estimate> drift;
  /// theta_{k+1} - theta_k - [dt/a + (2 eta - theta) d<W> + eta dW] at grid steps.
  std::vector<Estimate> bsde_residual;
  std::vector<double> exp_times;
  std::vector<Estimate> exp_martingale;
  /// xbar(1) + p(1)/2 (requires the first control to be optimal).
  Estimate terminal_gap;
  std::vector<AdjointSample> adjoint;
};

/// vertex_class is only read when record_adjoint is set.
RegulatorPass simulate_regulator(const WalkModel& model, const RegulatorConfig& cfg, const ThetaTable& table,
                                 std::span<const RegulatorControl> controls, bool record_adjoint = false,
                                 std::span<const int> vertex_class = {});

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct SpikeResult {
  std::string name;
  double epsilon = 0.0;
  Estimate cost;
  Estimate difference;
  double pooled = 0.0;
  bool pass = false;
};

struct RegulatorReport {
  double a = 1.0;
  int level = 0;
  std::size_t paths = 0;
  Estimate theta0;
  double theta0_exact_mean = 0.0;
  std::vector<std::string> names;
  std::vector<Estimate> cost;
  std::vector<Estimate> difference;
  std::vector<Estimate> p_plus_q;
  double max_abs_P_plus_2 = 0.0;
  double max_abs_Q = 0.0;
  double hamiltonian_gap = 0.0;
  std::vector<SpikeResult> spikes;
  std::vector<CheckResult> checks;

  bool all_pass() const;
};

/// Tournament of default_competitors() with all optimality audits.
RegulatorReport cost_tournament(const WalkModel& model, const RegulatorConfig& cfg, const ThetaTable& table,
                                std::span<const int> vertex_class);
/// Spike perturbations of the optimal control on both channels.
std::vector<SpikeResult> spike_necessity(const WalkModel& model, const RegulatorConfig& cfg, const ThetaTable& table);

/// Grid scan of H1, H2 along one optimal path with p from the closed form,
/// q = -p, P = -2. Returns the worst violation of ubar being the argmax.
double hamiltonian_scan(const ThetaTable& table, const PathSample& path, std::ostream* csv = nullptr);

/// {a, level, N, theta0: {est, se}, J: {name: {est, se}}, checks: {name: pass/fail}}.
void write_regulator_json(std::ostream& os, const RegulatorReport& r);

}  // namespace fc

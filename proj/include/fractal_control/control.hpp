#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fractal_control/diffusion.hpp"
#include "fractal_control/errors.hpp"
#include "fractal_control/stats.hpp"

namespace fc {

inline constexpr double kDifferenceStep = 1e-5;

/// phi(t, x, u) with optional analytic x-derivatives. A missing derivative
/// is taken by central differences with step kDifferenceStep.
struct Coefficient {
  using Fn = std::function<double(double, double, double)>;
  Fn f;
  Fn dx;
  Fn dxx;

  double operator()(double t, double x, double u) const { return f ? f(t, x, u) : 0.0; }
  double d1(double t, double x, double u) const;
  double d2(double t, double x, double u) const;

  static Coefficient zero() { return {}; }
  static Coefficient control() {
    return {[](double, double, double u) { return u; }, [](double, double, double) { return 0.0; },
            [](double, double, double) { return 0.0; }};
  }
};

struct TerminalCost {
  using Fn = std::function<double(double)>;
  Fn f;
  Fn dx;
  Fn dxx;

  double operator()(double x) const { return f ? f(x) : 0.0; }
  double d1(double x) const;
  double d2(double x) const;
};

/// b1, b2, sigma, f1, f2 and h of the controlled system; M is the
/// Lipschitz/bound constant, kept for the default discount rate.
struct CoefficientSet {
  Coefficient b1;
  Coefficient b2;
  Coefficient sigma;
  Coefficient f1;
  Coefficient f2;
  TerminalCost h;
  double M = 1.0;

  static CoefficientSet zero() { return {}; }
  /// dx = u dt + u d<W> + u dW, cost (a/2) int u^2 dt + x(1)^2.
  static CoefficientSet regulator(double a);
};

/// What a control may look at when choosing u at step k.
struct StepContext {
  std::size_t path = 0;
  std::uint64_t k = 0;
  double t = 0.0;
  double x = 0.0;
  int vertex = 0;
  int start_vertex = 0;
  double w = 0.0;
  double qv = 0.0;
};

/// Two-part control: `ac` drives the dt channel (b1, f1), `sing` the d<W>
/// and dW channels (b2, sigma, f2). An empty `sing` reuses `ac`.
struct ControlPolicy {
  using Fn = std::function<double(const StepContext&)>;
  Fn ac;
  Fn sing;

  double ac_at(const StepContext& c) const { return ac ? ac(c) : 0.0; }
  double sing_at(const StepContext& c) const { return sing ? sing(c) : ac_at(c); }

  static ControlPolicy constant(double u) {
    return {[u](const StepContext&) { return u; }, {}};
  }
  static ControlPolicy split(Fn ac, Fn sing) { return {std::move(ac), std::move(sing)}; }
};

/// Forward-Euler integrator of the controlled SDE, driven step by step by
/// walk increments. Usable as a simulate_paths observer.
class SdeIntegrator {
 public:
  SdeIntegrator(const CoefficientSet& c, const ControlPolicy& u, double x0, double dt, std::size_t path = 0,
                bool record = false);

  void step(std::uint64_t k, int v, double dq, double dw);
  void finish(int) {}

  double state() const { return x_; }
  /// Controls used by the last step.
  double last_ac() const { return last_ac_; }
  double last_sing() const { return last_sing_; }
  double running_dt() const { return run_dt_; }
  double running_bracket() const { return run_q_; }
  /// h(x(T)) + running costs; throws AdmissibilityError if non-finite.
  double cost() const;
  const std::vector<double>& states() const { return xs_; }

 private:
  const CoefficientSet* c_;
  const ControlPolicy* u_;
  double dt_;
  StepContext ctx_;
  double x_;
  double run_dt_ = 0.0;
  double run_q_ = 0.0;
  double last_ac_ = 0.0;
  double last_sing_ = 0.0;
  bool record_;
  std::vector<double> xs_;
};

struct Trajectory {
  std::vector<double> x;
  double running_dt = 0.0;
  double running_bracket = 0.0;
  double terminal = 0.0;

  double cost() const { return terminal + running_dt + running_bracket; }
};

Trajectory integrate_sde(const CoefficientSet& c, const ControlPolicy& u, const PathSample& path, double x0,
                         std::size_t path_index = 0);

/// Monte Carlo J(u) on cfg.paths fresh paths.
Estimate evaluate_cost(const CoefficientSet& c, const ControlPolicy& u, const WalkModel& model, const WalkConfig& cfg,
                       double x0);

/// J of several controls on common paths, with per-path differences
/// against the first control.
struct CostComparison {
  std::vector<Estimate> cost;
  std::vector<Estimate> difference;
};
CostComparison compare_costs(const CoefficientSet& c, std::span<const ControlPolicy> controls, const WalkModel& model,
                             const WalkConfig& cfg, double x0);

double pooled_se(const Estimate& a, const Estimate& b);

/// Steps k with [t_k, t_{k+1}) inside one of the pieces of I.
class StepSet {
 public:
  StepSet() = default;
  StepSet(const TimeSet& set, double dt);
  bool contains(std::uint64_t k) const;
  std::uint64_t count() const;
  const std::vector<std::pair<std::uint64_t, std::uint64_t>>& ranges() const { return ranges_; }

 private:
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges_;
};

/// Which channels the spike replaces inside I_eps: S1 is the dt channel
/// (u1 takes over `ac`), S2 the bracket channel (u2 takes over `sing`).
struct SpikeChannels {
  bool dt = true;
  bool bracket = true;
};

struct SpikeControl {
  ControlPolicy policy;
  StepSet steps;
  SpikeChannels channels;
  /// (t, omega) in E: some perturbed channel differs from ubar.
  std::function<bool(const StepContext&)> in_e;
};

SpikeControl spike_perturb(const ControlPolicy& ubar, const ControlPolicy& u1, const ControlPolicy& u2,
                           const TimeSet& interval, double dt, SpikeChannels channels = {});

/// xbar, x^eps and the first/second-order variations y^eps, z^eps along one
/// path; `qv` is the cumulative bracket.
struct VariationSeries {
  std::vector<double> xbar;
  std::vector<double> xeps;
  std::vector<double> y;
  std::vector<double> z;
  std::vector<double> qv;
};

VariationSeries integrate_variations(const CoefficientSet& c, const ControlPolicy& ubar, const SpikeControl& ueps,
                                     const PathSample& path, double x0, std::size_t path_index = 0);

/// One path's contribution to T_{2k}(phi):
/// sup_t |phi|^{2k} e_t^{-1} + int |phi|^{2k} e_t^{-1} d<W>, e_t = exp(kappa <W>_t).
double t2k_path(std::span<const double> phi, std::span<const double> qv, double k, double kappa);

double default_kappa(double k, double M);

struct VariationPoint {
  double epsilon = 0.0;
  Estimate t2_xi;
  Estimate t2_y;
  Estimate t2_xi_minus_y;
  Estimate t2_xi_minus_y_minus_z;
  Estimate t2_z;
  Estimate m1;
  /// Correlation over paths of xi^eps(T) and y^eps(T).
  double correlation = 0.0;
};

struct VariationReport {
  double k = 1.0;
  double kappa = 0.0;
  std::vector<VariationPoint> points;

  /// Log-log decay slope of a column against epsilon.
  double slope(Estimate VariationPoint::* column) const;
};

struct VariationConfig {
  double t0 = 0.125;
  std::vector<double> epsilons;
  double k = 1.0;
  /// <= 0 selects default_kappa(k, M).
  double kappa = 0.0;
  SpikeChannels channels;
  double x0 = 0.0;
};

VariationReport estimate_variation_orders(const CoefficientSet& c, const ControlPolicy& ubar, const ControlPolicy& u1,
                                          const ControlPolicy& u2, const WalkModel& model, const WalkConfig& cfg,
                                          const VariationConfig& vc);

/// "epsilon,T2_xi,T2_xi_minus_y,T2_xi_minus_y_minus_z,m1,stderr_xi,..." rows.
void write_variation_csv(std::ostream& os, const VariationReport& r);

struct AdjointValues {
  double p = 0.0;
  double q = 0.0;
  double P = 0.0;
  double Q = 0.0;
};

/// H1 = b1 p - f1 and H2 = b2 p + sigma q - f2 + (sigma(u) - sigma(ubar))^2 P / 2.
std::pair<double, double> hamiltonians(const CoefficientSet& c, const AdjointValues& adj, double t, double x, double u,
                                       double ubar_sing);

/// Data of one optimal path at the regression grid: grid values of the
/// state, (W, <W>), a vertex class, and per-interval integrals of the
/// adjoint coefficients.
struct AdjointSample {
  std::vector<double> x;
  std::vector<double> w;
  std::vector<double> qv;
  std::vector<int> cls;
  /// interval j -> [t_j, t_{j+1}): dW, d<W>, and the integrals
  /// int d_x b1 dt, int d_x f1 dt, int d_x^2 b1 dt, int d_x^2 f1 dt,
  /// int d_x b2 d<W>, int d_x sigma d<W>, int (d_x sigma)^2 d<W>,
  /// int d_x f2 d<W>, int d_x^2 b2 d<W>, int d_x^2 sigma d<W>, int d_x^2 f2 d<W>.
  std::vector<std::array<double, 13>> integrals;
};

enum AdjointIntegral : std::size_t {
  kDW = 0,
  kDQ,
  kB1x,
  kF1x,
  kB1xx,
  kF1xx,
  kB2x,
  kSx,
  kSx2,
  kF2x,
  kB2xx,
  kSxx,
  kF2xx,
};

/// Regression basis: indicator of the vertex class times polynomials of
/// total degree <= degree in (W, <W>).
struct AdjointBasis {
  int class_level = 3;
  int degree = 2;
};

/// Vertex class = rank of the level-min(3, m) prefix of the vertex's first cell.
std::vector<int> vertex_classes(const PreGasket& g, int class_level = 3);

/// Accumulates an AdjointSample while the optimal state is integrated.
class AdjointRecorder {
 public:
  AdjointRecorder(const CoefficientSet& c, const ControlPolicy& ubar, std::span<const std::uint64_t> grid_steps,
                  const std::vector<int>& vertex_class, double x0, double dt, std::size_t path = 0);
  void step(std::uint64_t k, int v, double dq, double dw);
  void finish(int v);
  const AdjointSample& sample() const { return s_; }
  double cost() const { return sde_.cost(); }

 private:
  const CoefficientSet* c_;
  const ControlPolicy* u_;
  std::span<const std::uint64_t> grid_;
  const std::vector<int>* cls_;
  SdeIntegrator sde_;
  double dt_;
  std::size_t next_ = 0;
  double w_ = 0.0;
  double qv_ = 0.0;
  std::array<double, 13> acc_{};
  AdjointSample s_;
  int start_ = -1;
};

/// Backward least-squares solve of both adjoint equations at the grid.
/// Result [path][grid index]. Throws BasisDegeneracyError naming the step.
/// `responses`, when given, receives the per-path regression targets; every
/// class fit keeps an intercept, so their path means equal those of the
/// fitted values and give honest standard errors for them.
std::vector<std::vector<AdjointValues>> solve_linear_adjoint(
    const CoefficientSet& c, std::span<const AdjointSample> paths, const AdjointBasis& basis = {},
    std::vector<std::vector<AdjointValues>>* responses = nullptr);

/// "t,u,H1,H2" rows.
void write_hamiltonian_scan_header(std::ostream& os);
void write_hamiltonian_scan_row(std::ostream& os, double t, double u, double h1, double h2);

}  // namespace fc

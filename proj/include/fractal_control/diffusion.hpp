#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fractal_control/gasket.hpp"
#include "fractal_control/parallel.hpp"
#include "fractal_control/stats.hpp"

namespace fc {

enum class StartKind { uniform, uniform_interior, point_mass };

/// Start law lambda of the walk. `uniform` draws from nu_m (the walk's
/// stationary law, corners at half weight); `uniform_interior` is nu_m
/// conditioned off the corners.
struct StartDistribution {
  StartKind kind = StartKind::uniform;
  int vertex = -1;

  static StartDistribution uniform() { return {}; }
  static StartDistribution uniform_interior() { return {StartKind::uniform_interior, -1}; }
  static StartDistribution at(int v) { return {StartKind::point_mass, v}; }
};

struct WalkConfig {
  int level = 6;
  double horizon = 1.0;
  StartDistribution start;
  std::uint64_t seed = 0;
  std::size_t paths = 100000;
  int workers = 0;

  void validate() const;
};

/// Per-vertex data touched by one walk step.
struct alignas(32) WalkNode {
  std::array<int, 4> next{};
  double dqv = 0.0;
  double sdw = 0.0;
};

/// Nearest-neighbour walk on V_m with time step 5^{-m}, carrying the bracket
/// increment 5^{-m} rho_m(v) and a fair-sign martingale increment
/// +-sqrt(bracket increment) at every step.
///
/// Each step consumes three bits of the path's engine: two pick one of four
/// neighbour slots (corners list their two neighbours twice), one the sign.
class WalkModel {
 public:
  WalkModel(const PreGasket& g, std::span<const double> density);

  /// Builds V_m and its Kusuoka vertex density.
  static WalkModel at_level(int m);

  int level() const { return level_; }
  double dt() const { return dt_; }
  std::size_t vertex_count() const { return nodes_.size(); }
  std::uint64_t steps_for(double horizon) const;
  /// Step index of a grid time; throws if t is not a multiple of dt.
  std::uint64_t step_of(double t) const;

  double density(int v) const { return density_[static_cast<std::size_t>(v)]; }
  double bracket_increment(int v) const { return nodes_[static_cast<std::size_t>(v)].dqv; }
  double nu_mass(int v) const { return nu_mass_[static_cast<std::size_t>(v)]; }
  bool is_corner(int v) const { return corner_[static_cast<std::size_t>(v)] != 0; }
  int degree(int v) const { return is_corner(v) ? 2 : 4; }
  const std::array<int, 4>& neighbor_slots(int v) const { return nodes_[static_cast<std::size_t>(v)].next; }

  int sample_start(const StartDistribution& start, std::mt19937_64& rng) const;

  /// Runs `steps` steps from `start`, calling visit(k, vertex, dqv, dw) with
  /// the vertex occupied on [t_k, t_{k+1}). Returns the vertex at t_steps.
  template <class Visitor>
  int walk(int start, std::uint64_t steps, std::mt19937_64& rng, Visitor&& visit) const {
    int v = start;
    std::uint64_t bits = 0;
    int avail = 0;
    for (std::uint64_t k = 0; k < steps; ++k) {
      if (avail < 3) {
        bits = rng();
        avail = 64;
      }
      const auto r = static_cast<unsigned>(bits & 7u);
      bits >>= 3;
      avail -= 3;
      const WalkNode& n = nodes_[static_cast<std::size_t>(v)];
      visit(k, v, n.dqv, n.sdw * sign_of(r));
      v = n.next[r & 3u];
    }
    return v;
  }

  /// Lockstep version of walk() over several independent paths; each lane
  /// consumes its engine exactly as walk() would. Observers provide
  /// step(k, vertex, dqv, dw) and finish(final_vertex).
  template <std::size_t Lanes, class Observer>
  void walk_lanes(std::array<int, Lanes> v, std::uint64_t steps, std::array<std::mt19937_64, Lanes>& rng,
                  std::array<Observer, Lanes>& obs) const {
    std::array<std::uint64_t, Lanes> bits{};
    int avail = 0;
    for (std::uint64_t k = 0; k < steps; ++k) {
      if (avail < 3) {
        for (std::size_t l = 0; l < Lanes; ++l) bits[l] = rng[l]();
        avail = 64;
      }
      for (std::size_t l = 0; l < Lanes; ++l) {
        const auto r = static_cast<unsigned>(bits[l] & 7u);
        bits[l] >>= 3;
        const WalkNode& n = nodes_[static_cast<std::size_t>(v[l])];
        obs[l].step(k, v[l], n.dqv, n.sdw * sign_of(r));
        v[l] = n.next[r & 3u];
      }
      avail -= 3;
    }
    for (std::size_t l = 0; l < Lanes; ++l) obs[l].finish(v[l]);
  }

 private:
  static double sign_of(unsigned r) { return static_cast<double>(static_cast<int>((r >> 1) & 2u) - 1); }

  int level_ = 0;
  double dt_ = 1.0;
  std::vector<WalkNode> nodes_;
  std::vector<double> density_;
  std::vector<double> nu_mass_;
  std::vector<unsigned char> corner_;
  std::vector<int> interior_;
  std::vector<int> slots_;
};

/// What to simulate: path count, streams, start law and step count.
struct PathPlan {
  std::size_t paths = 0;
  std::uint64_t seed = 0;
  StreamTag tag = StreamTag::walk;
  StartDistribution start;
  std::uint64_t steps = 0;
  int workers = 0;
};

inline constexpr std::size_t kWalkLanes = 4;

/// Simulates plan.paths paths, four at a time. make(i) builds the observer
/// of path i; consume(observer, partial) folds it in path-index order.
template <class Partial, class Make, class Consume, class Merge>
Partial simulate_paths(const WalkModel& model, const PathPlan& plan, const Partial& init, Make&& make,
                       Consume&& consume, Merge&& merge) {
  using Observer = std::decay_t<decltype(make(std::size_t{}))>;
  return reduce_blocks(
      plan.paths, plan.workers, init,
      [&](std::size_t begin, std::size_t end, Partial& partial) {
        std::size_t i = begin;
        for (; i + kWalkLanes <= end; i += kWalkLanes) {
          std::array<std::mt19937_64, kWalkLanes> rng;
          std::array<int, kWalkLanes> start{};
          std::array<Observer, kWalkLanes> obs{make(i), make(i + 1), make(i + 2), make(i + 3)};
          for (std::size_t l = 0; l < kWalkLanes; ++l) {
            rng[l] = make_stream(plan.seed, i + l, plan.tag);
            start[l] = model.sample_start(plan.start, rng[l]);
          }
          model.walk_lanes(start, plan.steps, rng, obs);
          for (auto& o : obs) consume(o, partial);
        }
        for (; i < end; ++i) {
          std::array<std::mt19937_64, 1> rng{make_stream(plan.seed, i, plan.tag)};
          std::array<int, 1> start{model.sample_start(plan.start, rng[0])};
          std::array<Observer, 1> obs{make(i)};
          model.walk_lanes(start, plan.steps, rng, obs);
          consume(obs[0], partial);
        }
      },
      std::forward<Merge>(merge));
}

struct StepRecord {
  int vertex = 0;
  double dqv = 0.0;
  double dw = 0.0;
};

/// One simulated trajectory. w and qv are cumulative (size K+1, starting at 0).
struct PathSample {
  double dt = 0.0;
  int start_vertex = 0;
  int final_vertex = 0;
  std::vector<StepRecord> steps;
  std::vector<double> w;
  std::vector<double> qv;

  std::size_t step_count() const { return steps.size(); }
  double time(std::size_t k) const { return static_cast<double>(k) * dt; }
};

PathSample sample_path(const WalkModel& model, const WalkConfig& cfg, std::uint64_t path_index);

/// "step,vertex,dW,dQV" rows.
void write_path_csv(std::ostream& os, const PathSample& path);

/// W_t, <W>_t and W_t^2 - <W>_t over paths at grid times.
struct BracketPoint {
  double t = 0.0;
  Estimate qv;
  Estimate w;
  Estimate w2;
  Estimate w2_minus_qv;
};
std::vector<BracketPoint> estimate_bracket(const WalkModel& model, const WalkConfig& cfg, std::span<const double> times);

/// Occupation estimate of the transition density w.r.t. nu:
/// P_x(X_t = y) / nu_m(y).
struct KernelPoint {
  double t = 0.0;
  Estimate p_hat;
};
std::vector<KernelPoint> estimate_kernel(const WalkModel& model, int x, int y, std::span<const double> times,
                                         std::size_t n_paths, std::uint64_t seed, int workers = 0);
std::vector<KernelPoint> estimate_kernel_on_diagonal(const WalkModel& model, int x, std::span<const double> times,
                                                     std::size_t n_paths, std::uint64_t seed, int workers = 0);

/// Finite union of half-open time intervals [a, b).
struct TimeSet {
  std::vector<std::pair<double, double>> pieces;

  static TimeSet interval(double a, double b) { return TimeSet{{{a, b}}}; }
  double length() const;
};

using StepPredicate = std::function<bool(std::uint64_t step, int vertex)>;

struct MomentReport {
  std::vector<double> ks;
  std::vector<TimeSet> sets;
  /// estimates[set][k]
  std::vector<std::vector<Estimate>> estimates;

  /// Slope of log m_k against log |I| over the family.
  double slope(std::size_t k_index) const;
  /// Slope of log(m_num / m_den) against log |I|.
  double ratio_slope(std::size_t num_index, std::size_t den_index) const;
};

/// m_{k,lambda}(I;E) = E[(sum of bracket increments over steps in I where E
/// holds)^k] for every (I, k). An empty predicate means E = always.
MomentReport estimate_moment(const WalkModel& model, const WalkConfig& cfg, std::span<const double> ks,
                             std::span<const TimeSet> sets, const StepPredicate& predicate = {});

/// Lorenz-type curve: entry j is the share of <W>_T carried by the j+1
/// heaviest of `bins` equal dt-bins, averaged over paths.
std::vector<double> singularity_profile(std::span<const PathSample> paths, std::size_t bins);
std::vector<double> estimate_singularity_profile(const WalkModel& model, const WalkConfig& cfg, std::size_t bins);
/// Share held by the top `fraction` of bins, interpolating the curve.
double top_share(std::span<const double> curve, double fraction);

/// E_lambda[exp(kappa <W>_t)] on N paths and on 2N paths.
struct ExpBracketCheck {
  double kappa = 0.0;
  double t = 0.0;
  Estimate estimate;
  Estimate doubled;
  bool stable = false;
};
ExpBracketCheck exp_bracket_check(const WalkModel& model, const WalkConfig& cfg, double kappa, double t);
/// Same path set for every kappa.
std::vector<Estimate> exp_bracket_moments(const WalkModel& model, const WalkConfig& cfg, std::span<const double> kappas,
                                          double t);

/// "name,value,stderr,n" row.
void write_estimate_row(std::ostream& os, const std::string& name, const Estimate& e);

}  // namespace fc

#include "fractal_control/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "fractal_control/dirichlet.hpp"

namespace fc {

void WalkConfig::validate() const {
  if (!(horizon > 0.0) || !std::isfinite(horizon)) throw std::invalid_argument("walk horizon must be positive");
  if (paths < 1) throw std::invalid_argument("walk needs at least one path");
  if (level < 0) throw std::invalid_argument("walk level must be nonnegative");
}

WalkModel::WalkModel(const PreGasket& g, std::span<const double> density)
    : level_(g.level()), dt_(std::pow(5.0, -g.level())) {
  const std::size_t n = g.vertex_count();
  if (density.size() != n) throw std::invalid_argument("WalkModel: density table size does not match V_m");
  nodes_.resize(n);
  density_.assign(density.begin(), density.end());
  corner_.assign(n, 0);
  nu_mass_ = vertex_nu_mass(g);
  for (std::size_t v = 0; v < n; ++v) {
    const auto& nb = g.neighbors(static_cast<int>(v));
    if (nb.size() != 2 && nb.size() != 4) throw std::logic_error("pre-gasket vertex with degree other than 2 or 4");
    auto& node = nodes_[v];
    for (std::size_t s = 0; s < 4; ++s) node.next[s] = nb[s % nb.size()];
    node.dqv = dt_ * density[v];
    node.sdw = std::sqrt(node.dqv);
    if (nb.size() == 2) corner_[v] = 1;
    else interior_.push_back(static_cast<int>(v));
  }
  // one slot per (cell, corner): a uniform slot is a nu_m-distributed vertex
  slots_.reserve(3 * g.cell_count());
  for (const auto& tri : g.cells()) slots_.insert(slots_.end(), tri.begin(), tri.end());
  // V_0 itself: every vertex has degree 2 and there is no interior
  if (interior_.empty()) {
    interior_.resize(n);
    std::iota(interior_.begin(), interior_.end(), 0);
  }
}

WalkModel WalkModel::at_level(int m) {
  const GasketTower tower(m);
  const auto density = vertex_density(tower, m);
  return WalkModel(tower.at(m), density);
}

std::uint64_t WalkModel::steps_for(double horizon) const {
  return static_cast<std::uint64_t>(std::ceil(horizon / dt_ - 1e-9));
}

std::uint64_t WalkModel::step_of(double t) const {
  const double k = std::round(t / dt_);
  if (std::abs(k * dt_ - t) > 1e-9 * std::max(1.0, t)) {
    throw std::invalid_argument("time " + format_number(t) + " is not a multiple of the step 5^-" +
                                std::to_string(level_));
  }
  return static_cast<std::uint64_t>(k);
}

int WalkModel::sample_start(const StartDistribution& start, std::mt19937_64& rng) const {
  switch (start.kind) {
    case StartKind::uniform:
      return slots_[uniform_below(rng, slots_.size())];
    case StartKind::uniform_interior:
      return interior_[uniform_below(rng, interior_.size())];
    case StartKind::point_mass:
      if (start.vertex < 0 || static_cast<std::size_t>(start.vertex) >= vertex_count()) {
        throw std::invalid_argument("start vertex " + std::to_string(start.vertex) + " is not in V_" +
                                    std::to_string(level_));
      }
      return start.vertex;
  }
  throw std::logic_error("unknown start kind");
}

PathSample sample_path(const WalkModel& model, const WalkConfig& cfg, std::uint64_t path_index) {
  cfg.validate();
  auto rng = make_stream(cfg.seed, path_index);
  PathSample path;
  path.dt = model.dt();
  path.start_vertex = model.sample_start(cfg.start, rng);
  const auto k_steps = model.steps_for(cfg.horizon);
  path.steps.reserve(k_steps);
  path.w.reserve(k_steps + 1);
  path.qv.reserve(k_steps + 1);
  path.w.push_back(0.0);
  path.qv.push_back(0.0);
  path.final_vertex = model.walk(path.start_vertex, k_steps, rng, [&](std::uint64_t, int v, double dq, double dw) {
    path.steps.push_back({v, dq, dw});
    path.w.push_back(path.w.back() + dw);
    path.qv.push_back(path.qv.back() + dq);
  });
  return path;
}

void write_path_csv(std::ostream& os, const PathSample& path) {
  os << "step,vertex,dW,dQV\n";
  for (std::size_t k = 0; k < path.steps.size(); ++k) {
    const auto& s = path.steps[k];
    os << k << ',' << s.vertex << ',' << format_number(s.dw) << ',' << format_number(s.dqv) << '\n';
  }
}

namespace {

PathPlan plan_of(const WalkConfig& cfg, std::uint64_t steps) {
  return PathPlan{cfg.paths, cfg.seed, StreamTag::walk, cfg.start, steps, cfg.workers};
}

// Sorted distinct step indices plus, for each query, its slot among them.
struct StepMarks {
  std::vector<std::uint64_t> steps;
  std::vector<std::size_t> slot;

  explicit StepMarks(std::vector<std::uint64_t> raw) {
    steps = raw;
    std::sort(steps.begin(), steps.end());
    steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
    for (auto s : raw) slot.push_back(index_of(s));
  }
  std::size_t index_of(std::uint64_t s) const {
    return static_cast<std::size_t>(std::lower_bound(steps.begin(), steps.end(), s) - steps.begin());
  }
  std::uint64_t last() const { return steps.empty() ? 0 : steps.back(); }
};

// Running (W, <W>) with snapshots at the marked step boundaries.
struct SnapshotObserver {
  const std::vector<std::uint64_t>* marks = nullptr;
  std::vector<double> w;
  std::vector<double> qv;
  std::size_t next = 0;
  double w_run = 0.0;
  double qv_run = 0.0;

  explicit SnapshotObserver(const std::vector<std::uint64_t>& m) : marks(&m), w(m.size()), qv(m.size()) {
    while (next < marks->size() && (*marks)[next] == 0) ++next;
  }
  void step(std::uint64_t k, int, double dq, double dw) {
    w_run += dw;
    qv_run += dq;
    while (next < marks->size() && (*marks)[next] == k + 1) {
      w[next] = w_run;
      qv[next] = qv_run;
      ++next;
    }
  }
  void finish(int) {}
};

template <class Acc>
void merge_stats(Acc& into, const Acc& from) {
  for (std::size_t j = 0; j < into.size(); ++j) into[j].merge(from[j]);
}

}  // namespace

std::vector<BracketPoint> estimate_bracket(const WalkModel& model, const WalkConfig& cfg, std::span<const double> times) {
  cfg.validate();
  std::vector<std::uint64_t> raw;
  for (double t : times) raw.push_back(model.step_of(t));
  const StepMarks marks(raw);
  const std::size_t n = times.size();
  // per time: qv, w, w^2, w^2 - qv
  using Acc = std::vector<RunningStats>;
  const Acc total = simulate_paths(
      model, plan_of(cfg, marks.last()), Acc(4 * n),
      [&](std::size_t) { return SnapshotObserver(marks.steps); },
      [&](const SnapshotObserver& o, Acc& acc) {
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t s = marks.slot[j];
          const double w = o.w[s];
          const double qv = o.qv[s];
          acc[4 * j].add(qv);
          acc[4 * j + 1].add(w);
          acc[4 * j + 2].add(w * w);
          acc[4 * j + 3].add(w * w - qv);
        }
      },
      merge_stats<Acc>);
  std::vector<BracketPoint> out;
  for (std::size_t j = 0; j < n; ++j) {
    out.push_back({times[j], total[4 * j].estimate(), total[4 * j + 1].estimate(), total[4 * j + 2].estimate(),
                   total[4 * j + 3].estimate()});
  }
  return out;
}

namespace {

struct HitObserver {
  const std::vector<std::uint64_t>* marks = nullptr;
  int target = 0;
  std::vector<unsigned char> hit;
  std::size_t next = 0;

  HitObserver(const std::vector<std::uint64_t>& m, int y) : marks(&m), target(y), hit(m.size(), 0) {}
  void step(std::uint64_t k, int v, double, double) {
    while (next < marks->size() && (*marks)[next] == k) hit[next++] = (v == target);
  }
  void finish(int v) {
    while (next < marks->size()) hit[next++] = (v == target);
  }
};

}  // namespace

std::vector<KernelPoint> estimate_kernel(const WalkModel& model, int x, int y, std::span<const double> times,
                                         std::size_t n_paths, std::uint64_t seed, int workers) {
  if (n_paths == 0) throw std::invalid_argument("kernel estimate needs at least one path");
  if (y < 0 || static_cast<std::size_t>(y) >= model.vertex_count()) {
    throw std::invalid_argument("kernel target vertex " + std::to_string(y) + " is not in V_" +
                                std::to_string(model.level()));
  }
  const double t_min = 10.0 * model.dt();
  std::vector<std::uint64_t> raw;
  for (double t : times) {
    if (t < t_min * (1.0 - 1e-12)) {
      throw std::invalid_argument("kernel time " + format_number(t) + " below the resolvable minimum " +
                                  format_number(t_min) + " = 10*5^-" + std::to_string(model.level()));
    }
    raw.push_back(static_cast<std::uint64_t>(std::llround(t / model.dt())));
  }
  const StepMarks marks(raw);
  const PathPlan plan{n_paths, seed, StreamTag::kernel, StartDistribution::at(x), marks.last(), workers};
  using Hits = std::vector<std::uint64_t>;
  const Hits total = simulate_paths(
      model, plan, Hits(marks.steps.size(), 0), [&](std::size_t) { return HitObserver(marks.steps, y); },
      [](const HitObserver& o, Hits& hits) {
        for (std::size_t j = 0; j < hits.size(); ++j) hits[j] += o.hit[j];
      },
      [](Hits& into, const Hits& from) {
        for (std::size_t j = 0; j < into.size(); ++j) into[j] += from[j];
      });
  const double nu_y = model.nu_mass(y);
  std::vector<KernelPoint> out;
  for (std::size_t j = 0; j < times.size(); ++j) {
    const double f = static_cast<double>(total[marks.slot[j]]) / static_cast<double>(n_paths);
    const double se = std::sqrt(f * (1.0 - f) / static_cast<double>(n_paths));
    out.push_back({times[j], Estimate{f / nu_y, se / nu_y, n_paths}});
  }
  return out;
}

std::vector<KernelPoint> estimate_kernel_on_diagonal(const WalkModel& model, int x, std::span<const double> times,
                                                     std::size_t n_paths, std::uint64_t seed, int workers) {
  return estimate_kernel(model, x, x, times, n_paths, seed, workers);
}

double TimeSet::length() const {
  double total = 0.0;
  for (const auto& [a, b] : pieces) total += std::max(0.0, b - a);
  return total;
}

double MomentReport::slope(std::size_t k_index) const {
  std::vector<double> x;
  std::vector<double> y;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    x.push_back(sets[s].length());
    y.push_back(estimates[s][k_index].value);
  }
  return fit_loglog_slope(x, y);
}

double MomentReport::ratio_slope(std::size_t num_index, std::size_t den_index) const {
  std::vector<double> x;
  std::vector<double> y;
  for (std::size_t s = 0; s < sets.size(); ++s) {
    x.push_back(sets[s].length());
    y.push_back(estimates[s][num_index].value / estimates[s][den_index].value);
  }
  return fit_loglog_slope(x, y);
}

MomentReport estimate_moment(const WalkModel& model, const WalkConfig& cfg, std::span<const double> ks,
                             std::span<const TimeSet> sets, const StepPredicate& predicate) {
  if (cfg.paths == 0) throw std::invalid_argument("estimate_moment: empty path set");
  cfg.validate();
  for (double k : ks) {
    if (!(k > 0.0)) throw std::invalid_argument("moment order k must be positive");
  }
  // step boundaries of every piece; a step k belongs to [a, b) when a <= t_k < b
  std::vector<std::uint64_t> bounds;
  for (const auto& set : sets) {
    for (const auto& [a, b] : set.pieces) {
      if (a < -1e-12 || b > cfg.horizon + 1e-12 || b < a) {
        throw std::invalid_argument("moment interval [" + format_number(a) + "," + format_number(b) +
                                    ") is not inside [0, T]");
      }
      bounds.push_back(model.steps_for(a));
      bounds.push_back(model.steps_for(b));
    }
  }
  std::sort(bounds.begin(), bounds.end());
  bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());
  auto bound_index = [&](std::uint64_t s) {
    return static_cast<std::size_t>(std::lower_bound(bounds.begin(), bounds.end(), s) - bounds.begin());
  };
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> set_bounds;
  for (const auto& set : sets) {
    auto& sb = set_bounds.emplace_back();
    for (const auto& [a, b] : set.pieces) sb.emplace_back(bound_index(model.steps_for(a)), bound_index(model.steps_for(b)));
  }
  const std::uint64_t k_steps = bounds.empty() ? 0 : bounds.back();

  struct MomentObserver {
    const std::vector<std::uint64_t>* bounds;
    const StepPredicate* predicate;
    std::vector<double> prefix;
    std::size_t next = 0;
    double running = 0.0;

    void step(std::uint64_t k, int v, double dq, double) {
      if (!*predicate || (*predicate)(k, v)) running += dq;
      while (next < bounds->size() && (*bounds)[next] == k + 1) prefix[next++] = running;
    }
    void finish(int) {}
  };

  using Acc = std::vector<RunningStats>;
  const std::size_t nk = ks.size();
  const Acc total = simulate_paths(
      model, plan_of(cfg, k_steps), Acc(sets.size() * nk),
      [&](std::size_t) {
        MomentObserver o{&bounds, &predicate, std::vector<double>(bounds.size(), 0.0)};
        while (o.next < bounds.size() && bounds[o.next] == 0) ++o.next;
        return o;
      },
      [&](const MomentObserver& o, Acc& acc) {
        for (std::size_t s = 0; s < sets.size(); ++s) {
          double mass = 0.0;
          for (const auto& [lo, hi] : set_bounds[s]) mass += o.prefix[hi] - o.prefix[lo];
          for (std::size_t j = 0; j < nk; ++j) acc[s * nk + j].add(std::pow(mass, ks[j]));
        }
      },
      merge_stats<Acc>);

  MomentReport report;
  report.ks.assign(ks.begin(), ks.end());
  report.sets.assign(sets.begin(), sets.end());
  for (std::size_t s = 0; s < sets.size(); ++s) {
    auto& row = report.estimates.emplace_back();
    for (std::size_t j = 0; j < nk; ++j) row.push_back(total[s * nk + j].estimate());
  }
  return report;
}

namespace {

void add_lorenz(std::span<double> bins, std::span<double> curve) {
  const double total = std::accumulate(bins.begin(), bins.end(), 0.0);
  if (!(total > 0.0)) return;
  std::sort(bins.begin(), bins.end(), std::greater<>());
  double running = 0.0;
  for (std::size_t j = 0; j < bins.size(); ++j) {
    running += bins[j];
    curve[j] += running / total;
  }
}

}  // namespace

std::vector<double> singularity_profile(std::span<const PathSample> paths, std::size_t bins) {
  if (bins == 0) throw std::invalid_argument("singularity_profile: bin count must be positive");
  std::vector<double> curve(bins, 0.0);
  std::vector<double> mass(bins);
  for (const auto& p : paths) {
    if (p.step_count() % bins != 0) {
      throw std::invalid_argument("bin count " + std::to_string(bins) + " does not divide the step count " +
                                  std::to_string(p.step_count()));
    }
    const std::size_t per_bin = p.step_count() / bins;
    std::fill(mass.begin(), mass.end(), 0.0);
    for (std::size_t k = 0; k < p.step_count(); ++k) mass[k / per_bin] += p.steps[k].dqv;
    add_lorenz(mass, curve);
  }
  for (double& c : curve) c /= static_cast<double>(paths.size());
  return curve;
}

std::vector<double> estimate_singularity_profile(const WalkModel& model, const WalkConfig& cfg, std::size_t bins) {
  cfg.validate();
  const std::uint64_t k_steps = model.steps_for(cfg.horizon);
  if (bins == 0 || k_steps % bins != 0) {
    throw std::invalid_argument("bin count " + std::to_string(bins) + " does not divide the step count " +
                                std::to_string(k_steps));
  }
  const std::uint64_t per_bin = k_steps / bins;
  struct BinObserver {
    std::uint64_t per_bin;
    std::vector<double> mass;
    void step(std::uint64_t k, int, double dq, double) { mass[k / per_bin] += dq; }
    void finish(int) {}
  };
  using Curve = std::vector<double>;
  Curve curve = simulate_paths(
      model, plan_of(cfg, k_steps), Curve(bins, 0.0),
      [&](std::size_t) { return BinObserver{per_bin, std::vector<double>(bins, 0.0)}; },
      [](BinObserver& o, Curve& acc) { add_lorenz(o.mass, acc); },
      [](Curve& into, const Curve& from) {
        for (std::size_t j = 0; j < into.size(); ++j) into[j] += from[j];
      });
  for (double& c : curve) c /= static_cast<double>(cfg.paths);
  return curve;
}

double top_share(std::span<const double> curve, double fraction) {
  if (curve.empty()) throw std::invalid_argument("top_share of an empty curve");
  const double pos = fraction * static_cast<double>(curve.size());
  if (pos <= 0.0) return 0.0;
  if (pos >= static_cast<double>(curve.size())) return curve.back();
  const auto whole = static_cast<std::size_t>(std::floor(pos));
  const double below = whole == 0 ? 0.0 : curve[whole - 1];
  return below + (pos - static_cast<double>(whole)) * (curve[whole] - below);
}

std::vector<Estimate> exp_bracket_moments(const WalkModel& model, const WalkConfig& cfg, std::span<const double> kappas,
                                          double t) {
  cfg.validate();
  for (double kappa : kappas) {
    if (!(kappa >= 0.0)) throw std::invalid_argument("kappa must be nonnegative");
  }
  if (!(t > 0.0)) throw std::invalid_argument("exponential bracket moment needs t > 0");
  const std::uint64_t k_steps = model.steps_for(t);
  struct QvObserver {
    double qv = 0.0;
    void step(std::uint64_t, int, double dq, double) { qv += dq; }
    void finish(int) {}
  };
  using Acc = std::vector<RunningStats>;
  const Acc total = simulate_paths(
      model, plan_of(cfg, k_steps), Acc(kappas.size()), [](std::size_t) { return QvObserver{}; },
      [&](const QvObserver& o, Acc& acc) {
        for (std::size_t j = 0; j < kappas.size(); ++j) acc[j].add(std::exp(kappas[j] * o.qv));
      },
      merge_stats<Acc>);
  std::vector<Estimate> out;
  for (const auto& s : total) out.push_back(s.estimate());
  return out;
}

ExpBracketCheck exp_bracket_check(const WalkModel& model, const WalkConfig& cfg, double kappa, double t) {
  ExpBracketCheck check;
  check.kappa = kappa;
  check.t = t;
  const double kappas[] = {kappa};
  check.estimate = exp_bracket_moments(model, cfg, kappas, t).front();
  WalkConfig doubled = cfg;
  doubled.paths = 2 * cfg.paths;
  check.doubled = exp_bracket_moments(model, doubled, kappas, t).front();
  check.stable = std::isfinite(check.doubled.value) &&
                 std::abs(check.doubled.value - check.estimate.value) <= 2.0 * check.estimate.half_width();
  return check;
}

void write_estimate_row(std::ostream& os, const std::string& name, const Estimate& e) {
  os << name << ',' << format_number(e.value) << ',' << format_number(e.se) << ',' << e.n << '\n';
}

}  // namespace fc

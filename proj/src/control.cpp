#include "fractal_control/control.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>

namespace fc {

double Coefficient::d1(double t, double x, double u) const {
  if (dx) return dx(t, x, u);
  if (!f) return 0.0;
  const double h = kDifferenceStep;
  return (f(t, x + h, u) - f(t, x - h, u)) / (2.0 * h);
}

double Coefficient::d2(double t, double x, double u) const {
  if (dxx) return dxx(t, x, u);
  if (!f) return 0.0;
  const double h = kDifferenceStep;
  return (f(t, x + h, u) - 2.0 * f(t, x, u) + f(t, x - h, u)) / (h * h);
}

double TerminalCost::d1(double x) const {
  if (dx) return dx(x);
  if (!f) return 0.0;
  const double h = kDifferenceStep;
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

double TerminalCost::d2(double x) const {
  if (dxx) return dxx(x);
  if (!f) return 0.0;
  const double h = kDifferenceStep;
  return (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
}

CoefficientSet CoefficientSet::regulator(double a) {
  if (!(a > 0.0)) throw std::invalid_argument("regulator weight a must be positive");
  CoefficientSet c;
  c.b1 = Coefficient::control();
  c.b2 = Coefficient::control();
  c.sigma = Coefficient::control();
  c.f1 = {[a](double, double, double u) { return 0.5 * a * u * u; }, [](double, double, double) { return 0.0; },
          [](double, double, double) { return 0.0; }};
  c.f2 = {[](double, double, double) { return 0.0; }, [](double, double, double) { return 0.0; },
          [](double, double, double) { return 0.0; }};
  c.h = {[](double x) { return x * x; }, [](double x) { return 2.0 * x; }, [](double) { return 2.0; }};
  c.M = 1.0;
  return c;
}

SdeIntegrator::SdeIntegrator(const CoefficientSet& c, const ControlPolicy& u, double x0, double dt, std::size_t path,
                             bool record)
    : c_(&c), u_(&u), dt_(dt), x_(x0), record_(record) {
  ctx_.path = path;
  ctx_.start_vertex = -1;
  if (record_) xs_.push_back(x0);
}

void SdeIntegrator::step(std::uint64_t k, int v, double dq, double dw) {
  if (ctx_.start_vertex < 0) ctx_.start_vertex = v;
  ctx_.k = k;
  ctx_.t = static_cast<double>(k) * dt_;
  ctx_.x = x_;
  ctx_.vertex = v;
  const double ua = u_->ac_at(ctx_);
  const double us = u_->sing_at(ctx_);
  last_ac_ = ua;
  last_sing_ = us;
  const double t = ctx_.t;
  run_dt_ += c_->f1(t, x_, ua) * dt_;
  if (dq != 0.0) run_q_ += c_->f2(t, x_, us) * dq;
  x_ += c_->b1(t, x_, ua) * dt_ + c_->b2(t, x_, us) * dq + c_->sigma(t, x_, us) * dw;
  if (!std::isfinite(x_)) throw IntegrationBlowupError("controlled state", k);
  ctx_.w += dw;
  ctx_.qv += dq;
  if (record_) xs_.push_back(x_);
}

double SdeIntegrator::cost() const {
  const double terminal = c_->h(x_);
  if (!std::isfinite(terminal) || !std::isfinite(run_dt_) || !std::isfinite(run_q_)) {
    throw AdmissibilityError("cost accumulators are not finite (h = " + format_number(terminal) +
                             ", dt part = " + format_number(run_dt_) + ", bracket part = " + format_number(run_q_) +
                             ")");
  }
  return terminal + run_dt_ + run_q_;
}

Trajectory integrate_sde(const CoefficientSet& c, const ControlPolicy& u, const PathSample& path, double x0,
                         std::size_t path_index) {
  SdeIntegrator sde(c, u, x0, path.dt, path_index, true);
  for (std::size_t k = 0; k < path.steps.size(); ++k) {
    const auto& s = path.steps[k];
    sde.step(k, s.vertex, s.dqv, s.dw);
  }
  Trajectory tr;
  tr.x = sde.states();
  tr.running_dt = sde.running_dt();
  tr.running_bracket = sde.running_bracket();
  tr.terminal = c.h(sde.state());
  return tr;
}

namespace {

PathPlan control_plan(const WalkModel& model, const WalkConfig& cfg) {
  return PathPlan{cfg.paths, cfg.seed, StreamTag::control, cfg.start, model.steps_for(cfg.horizon), cfg.workers};
}

}  // namespace

Estimate evaluate_cost(const CoefficientSet& c, const ControlPolicy& u, const WalkModel& model, const WalkConfig& cfg,
                       double x0) {
  cfg.validate();
  const RunningStats total = simulate_paths(
      model, control_plan(model, cfg), RunningStats{},
      [&](std::size_t i) { return SdeIntegrator(c, u, x0, model.dt(), i); },
      [](const SdeIntegrator& s, RunningStats& acc) { acc.add(s.cost()); },
      [](RunningStats& into, const RunningStats& from) { into.merge(from); });
  return total.estimate();
}

CostComparison compare_costs(const CoefficientSet& c, std::span<const ControlPolicy> controls, const WalkModel& model,
                             const WalkConfig& cfg, double x0) {
  cfg.validate();
  if (controls.empty()) throw std::invalid_argument("compare_costs needs at least one control");
  struct Multi {
    std::vector<SdeIntegrator> sde;
    void step(std::uint64_t k, int v, double dq, double dw) {
      for (auto& s : sde) s.step(k, v, dq, dw);
    }
    void finish(int) {}
  };
  const std::size_t n = controls.size();
  using Acc = std::vector<RunningStats>;
  const Acc total = simulate_paths(
      model, control_plan(model, cfg), Acc(2 * n),
      [&](std::size_t i) {
        Multi m;
        m.sde.reserve(n);
        for (const auto& u : controls) m.sde.emplace_back(c, u, x0, model.dt(), i);
        return m;
      },
      [&](const Multi& m, Acc& acc) {
        const double base = m.sde[0].cost();
        for (std::size_t j = 0; j < n; ++j) {
          const double J = j == 0 ? base : m.sde[j].cost();
          acc[j].add(J);
          acc[n + j].add(J - base);
        }
      },
      [](Acc& into, const Acc& from) {
        for (std::size_t j = 0; j < into.size(); ++j) into[j].merge(from[j]);
      });
  CostComparison out;
  for (std::size_t j = 0; j < n; ++j) {
    out.cost.push_back(total[j].estimate());
    out.difference.push_back(total[n + j].estimate());
  }
  return out;
}

double pooled_se(const Estimate& a, const Estimate& b) { return std::sqrt(a.se * a.se + b.se * b.se); }

StepSet::StepSet(const TimeSet& set, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("StepSet needs a positive step");
  for (const auto& [a, b] : set.pieces) {
    if (b <= a) continue;
    const auto lo = static_cast<std::uint64_t>(std::max(0.0, std::ceil(a / dt - 1e-9)));
    const auto hi = static_cast<std::uint64_t>(std::max(0.0, std::floor(b / dt + 1e-9)));
    if (hi > lo) ranges_.emplace_back(lo, hi);
  }
  std::sort(ranges_.begin(), ranges_.end());
}

bool StepSet::contains(std::uint64_t k) const {
  for (const auto& [lo, hi] : ranges_) {
    if (k >= lo && k < hi) return true;
  }
  return false;
}

std::uint64_t StepSet::count() const {
  // overlapping pieces count once
  std::uint64_t total = 0;
  std::uint64_t reach = 0;
  for (const auto& [lo, hi] : ranges_) {
    const std::uint64_t from = std::max(lo, reach);
    if (hi > from) total += hi - from;
    reach = std::max(reach, hi);
  }
  return total;
}

SpikeControl spike_perturb(const ControlPolicy& ubar, const ControlPolicy& u1, const ControlPolicy& u2,
                           const TimeSet& interval, double dt, SpikeChannels channels) {
  SpikeControl s;
  s.steps = StepSet(interval, dt);
  s.channels = channels;
  const StepSet steps = s.steps;
  s.policy.ac = [ubar, u1, steps, channels](const StepContext& c) {
    return channels.dt && steps.contains(c.k) ? u1.ac_at(c) : ubar.ac_at(c);
  };
  s.policy.sing = [ubar, u2, steps, channels](const StepContext& c) {
    return channels.bracket && steps.contains(c.k) ? u2.sing_at(c) : ubar.sing_at(c);
  };
  s.in_e = [ubar, u1, u2, channels](const StepContext& c) {
    return (channels.dt && ubar.ac_at(c) != u1.ac_at(c)) || (channels.bracket && ubar.sing_at(c) != u2.sing_at(c));
  };
  return s;
}

namespace {

// Running pieces of T_{2k}: sup and integral parts.
struct T2Acc {
  double sup = 0.0;
  double integral = 0.0;

  void add(double phi, double discount, double dq, double k) {
    const double v = std::pow(std::abs(phi), 2.0 * k) * discount;
    sup = std::max(sup, v);
    integral += v * dq;
  }
  void close(double phi, double discount, double k) {
    sup = std::max(sup, std::pow(std::abs(phi), 2.0 * k) * discount);
  }
  double value() const { return sup + integral; }
};

// One step of xbar, x^eps, y^eps, z^eps from the left-endpoint coefficients.
struct VariationState {
  double xeps = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct ReferenceStep {
  double t;
  double xbar;
  double ua;
  double us;
  double b1x, b2x, sx, b1xx, b2xx, sxx;
};

ReferenceStep reference_step(const CoefficientSet& c, const ControlPolicy& ubar, const StepContext& ctx) {
  ReferenceStep r{};
  r.t = ctx.t;
  r.xbar = ctx.x;
  r.ua = ubar.ac_at(ctx);
  r.us = ubar.sing_at(ctx);
  r.b1x = c.b1.d1(r.t, r.xbar, r.ua);
  r.b2x = c.b2.d1(r.t, r.xbar, r.us);
  r.sx = c.sigma.d1(r.t, r.xbar, r.us);
  r.b1xx = c.b1.d2(r.t, r.xbar, r.ua);
  r.b2xx = c.b2.d2(r.t, r.xbar, r.us);
  r.sxx = c.sigma.d2(r.t, r.xbar, r.us);
  return r;
}

// Advances one perturbed state; `ea`, `es` are u^eps on the dt and bracket channels.
void advance_variation(const CoefficientSet& c, const ReferenceStep& r, double ea, double es, double dt, double dq,
                       double dw, std::uint64_t k, VariationState& s) {
  const double t = r.t;
  const double y = s.y;
  const double z = s.z;
  double db1 = 0.0, db2 = 0.0, ds = 0.0, dsx = 0.0;
  if (ea != r.ua) db1 = c.b1(t, r.xbar, ea) - c.b1(t, r.xbar, r.ua);
  if (es != r.us) {
    db2 = c.b2(t, r.xbar, es) - c.b2(t, r.xbar, r.us);
    ds = c.sigma(t, r.xbar, es) - c.sigma(t, r.xbar, r.us);
    dsx = c.sigma.d1(t, r.xbar, es) - r.sx;
  }
  const double xe = s.xeps;
  s.xeps = xe + c.b1(t, xe, ea) * dt + c.b2(t, xe, es) * dq + c.sigma(t, xe, es) * dw;
  s.y = y + r.b1x * y * dt + r.b2x * y * dq + (ds + r.sx * y) * dw;
  s.z = z + (r.b1x * z + db1 + 0.5 * r.b1xx * y * y) * dt + (r.b2x * z + db2 + 0.5 * r.b2xx * y * y) * dq +
        (r.sx * z + dsx * y + 0.5 * r.sxx * y * y) * dw;
  if (!std::isfinite(s.xeps) || !std::isfinite(s.y) || !std::isfinite(s.z)) {
    throw IntegrationBlowupError("variation process", k);
  }
}

}  // namespace

VariationSeries integrate_variations(const CoefficientSet& c, const ControlPolicy& ubar, const SpikeControl& ueps,
                                     const PathSample& path, double x0, std::size_t path_index) {
  VariationSeries out;
  const std::size_t n = path.steps.size();
  out.xbar.reserve(n + 1);
  out.xbar.push_back(x0);
  out.xeps.push_back(x0);
  out.y.push_back(0.0);
  out.z.push_back(0.0);
  out.qv.push_back(0.0);
  StepContext ctx;
  ctx.path = path_index;
  ctx.start_vertex = path.start_vertex;
  ctx.x = x0;
  VariationState s{x0, 0.0, 0.0};
  for (std::size_t k = 0; k < n; ++k) {
    const auto& st = path.steps[k];
    ctx.k = k;
    ctx.t = static_cast<double>(k) * path.dt;
    ctx.vertex = st.vertex;
    const ReferenceStep r = reference_step(c, ubar, ctx);
    const bool spiked = ueps.steps.contains(k);
    const double ea = spiked && ueps.channels.dt ? ueps.policy.ac_at(ctx) : r.ua;
    const double es = spiked && ueps.channels.bracket ? ueps.policy.sing_at(ctx) : r.us;
    advance_variation(c, r, ea, es, path.dt, st.dqv, st.dw, k, s);
    ctx.x += c.b1(r.t, r.xbar, r.ua) * path.dt + c.b2(r.t, r.xbar, r.us) * st.dqv + c.sigma(r.t, r.xbar, r.us) * st.dw;
    if (!std::isfinite(ctx.x)) throw IntegrationBlowupError("reference state", k);
    ctx.w += st.dw;
    ctx.qv += st.dqv;
    out.xbar.push_back(ctx.x);
    out.xeps.push_back(s.xeps);
    out.y.push_back(s.y);
    out.z.push_back(s.z);
    out.qv.push_back(ctx.qv);
  }
  return out;
}

double t2k_path(std::span<const double> phi, std::span<const double> qv, double k, double kappa) {
  if (phi.size() != qv.size() || phi.empty()) throw std::invalid_argument("t2k_path: series sizes differ");
  T2Acc acc;
  for (std::size_t i = 0; i + 1 < phi.size(); ++i) acc.add(phi[i], std::exp(-kappa * qv[i]), qv[i + 1] - qv[i], k);
  acc.close(phi.back(), std::exp(-kappa * qv.back()), k);
  return acc.value();
}

double default_kappa(double k, double M) { return 8.0 * k * k * (M + 1.0) * (M + 1.0); }

double VariationReport::slope(Estimate VariationPoint::* column) const {
  std::vector<double> x;
  std::vector<double> y;
  for (const auto& p : points) {
    x.push_back(p.epsilon);
    y.push_back((p.*column).value);
  }
  return fit_loglog_slope(x, y);
}

VariationReport estimate_variation_orders(const CoefficientSet& c, const ControlPolicy& ubar, const ControlPolicy& u1,
                                          const ControlPolicy& u2, const WalkModel& model, const WalkConfig& cfg,
                                          const VariationConfig& vc) {
  cfg.validate();
  if (vc.epsilons.empty()) throw std::invalid_argument("variation experiment needs an epsilon grid");
  const double kappa = vc.kappa > 0.0 ? vc.kappa : default_kappa(vc.k, c.M);
  std::vector<SpikeControl> spikes;
  for (double eps : vc.epsilons) {
    if (!(eps > 0.0) || vc.t0 + eps > cfg.horizon + 1e-12) {
      throw std::invalid_argument("spike interval [" + format_number(vc.t0) + "," + format_number(vc.t0 + eps) +
                                  ") is not inside [0, T]");
    }
    spikes.push_back(spike_perturb(ubar, u1, u2, TimeSet::interval(vc.t0, vc.t0 + eps), model.dt(), vc.channels));
  }
  const std::size_t ne = spikes.size();
  const double dt = model.dt();
  const double k2 = vc.k;

  struct PerEps {
    VariationState s;
    T2Acc xi, y, xy, xyz, z;
    double m1 = 0.0;
  };
  // per epsilon: xi, y, xi-y, xi-y-z, z, m1, then xi(T), y(T), xi*y, xi^2, y^2
  constexpr std::size_t kCols = 11;
  using Acc = std::vector<RunningStats>;

  struct Runner {
    const CoefficientSet* c;
    const ControlPolicy* ubar;
    const std::vector<SpikeControl>* spikes;
    double dt, kappa, k2;
    std::vector<PerEps> e;
    StepContext ctx;

    void step(std::uint64_t k, int v, double dq, double dw) {
      if (k == 0) ctx.start_vertex = v;
      ctx.k = k;
      ctx.t = static_cast<double>(k) * dt;
      ctx.vertex = v;
      const ReferenceStep r = reference_step(*c, *ubar, ctx);
      const double discount = std::exp(-kappa * ctx.qv);
      for (std::size_t j = 0; j < e.size(); ++j) {
        auto& pe = e[j];
        const auto& sp = (*spikes)[j];
        const double xi = pe.s.xeps - ctx.x;
        pe.xi.add(xi, discount, dq, k2);
        pe.y.add(pe.s.y, discount, dq, k2);
        pe.xy.add(xi - pe.s.y, discount, dq, k2);
        pe.xyz.add(xi - pe.s.y - pe.s.z, discount, dq, k2);
        pe.z.add(pe.s.z, discount, dq, k2);
        const bool spiked = sp.steps.contains(k);
        if (spiked && sp.in_e(ctx)) pe.m1 += dq;
        const double ea = spiked && sp.channels.dt ? sp.policy.ac_at(ctx) : r.ua;
        const double es = spiked && sp.channels.bracket ? sp.policy.sing_at(ctx) : r.us;
        advance_variation(*c, r, ea, es, dt, dq, dw, k, pe.s);
      }
      ctx.x += (*c).b1(r.t, r.xbar, r.ua) * dt + (*c).b2(r.t, r.xbar, r.us) * dq + (*c).sigma(r.t, r.xbar, r.us) * dw;
      if (!std::isfinite(ctx.x)) throw IntegrationBlowupError("reference state", k);
      ctx.w += dw;
      ctx.qv += dq;
    }
    void finish(int) {
      const double discount = std::exp(-kappa * ctx.qv);
      for (auto& pe : e) {
        const double xi = pe.s.xeps - ctx.x;
        pe.xi.close(xi, discount, k2);
        pe.y.close(pe.s.y, discount, k2);
        pe.xy.close(xi - pe.s.y, discount, k2);
        pe.xyz.close(xi - pe.s.y - pe.s.z, discount, k2);
        pe.z.close(pe.s.z, discount, k2);
      }
    }
  };

  const PathPlan plan{cfg.paths, cfg.seed, StreamTag::control, cfg.start, model.steps_for(cfg.horizon), cfg.workers};
  const Acc total = simulate_paths(
      model, plan, Acc(kCols * ne),
      [&](std::size_t i) {
        Runner r{&c, &ubar, &spikes, dt, kappa, k2, std::vector<PerEps>(ne), StepContext{}};
        r.ctx.path = i;
        r.ctx.x = vc.x0;
        for (auto& pe : r.e) pe.s = VariationState{vc.x0, 0.0, 0.0};
        return r;
      },
      [&](const Runner& r, Acc& acc) {
        for (std::size_t j = 0; j < ne; ++j) {
          const auto& pe = r.e[j];
          RunningStats* a = &acc[kCols * j];
          a[0].add(pe.xi.value());
          a[1].add(pe.y.value());
          a[2].add(pe.xy.value());
          a[3].add(pe.xyz.value());
          a[4].add(pe.z.value());
          a[5].add(pe.m1);
          const double xi = pe.s.xeps - r.ctx.x;
          a[6].add(xi);
          a[7].add(pe.s.y);
          a[8].add(xi * pe.s.y);
          a[9].add(xi * xi);
          a[10].add(pe.s.y * pe.s.y);
        }
      },
      [](Acc& into, const Acc& from) {
        for (std::size_t j = 0; j < into.size(); ++j) into[j].merge(from[j]);
      });

  VariationReport report;
  report.k = vc.k;
  report.kappa = kappa;
  for (std::size_t j = 0; j < ne; ++j) {
    const RunningStats* a = &total[kCols * j];
    VariationPoint p;
    p.epsilon = vc.epsilons[j];
    p.t2_xi = a[0].estimate();
    p.t2_y = a[1].estimate();
    p.t2_xi_minus_y = a[2].estimate();
    p.t2_xi_minus_y_minus_z = a[3].estimate();
    p.t2_z = a[4].estimate();
    p.m1 = a[5].estimate();
    const double cov = a[8].mean() - a[6].mean() * a[7].mean();
    const double vx = a[9].mean() - a[6].mean() * a[6].mean();
    const double vy = a[10].mean() - a[7].mean() * a[7].mean();
    p.correlation = vx > 0.0 && vy > 0.0 ? cov / std::sqrt(vx * vy) : 0.0;
    report.points.push_back(p);
  }
  return report;
}

void write_variation_csv(std::ostream& os, const VariationReport& r) {
  os << "epsilon,T2_xi,T2_xi_minus_y,T2_xi_minus_y_minus_z,m1,stderr_xi,stderr_xi_minus_y,stderr_xi_minus_y_minus_z,"
        "stderr_m1,T2_y,T2_z,corr_xi_y\n";
  for (const auto& p : r.points) {
    os << format_number(p.epsilon) << ',' << format_number(p.t2_xi.value) << ','
       << format_number(p.t2_xi_minus_y.value) << ',' << format_number(p.t2_xi_minus_y_minus_z.value) << ','
       << format_number(p.m1.value) << ',' << format_number(p.t2_xi.se) << ',' << format_number(p.t2_xi_minus_y.se)
       << ',' << format_number(p.t2_xi_minus_y_minus_z.se) << ',' << format_number(p.m1.se) << ','
       << format_number(p.t2_y.value) << ',' << format_number(p.t2_z.value) << ',' << format_number(p.correlation)
       << '\n';
  }
}

std::pair<double, double> hamiltonians(const CoefficientSet& c, const AdjointValues& adj, double t, double x, double u,
                                       double ubar_sing) {
  const double h1 = c.b1(t, x, u) * adj.p - c.f1(t, x, u);
  const double ds = c.sigma(t, x, u) - c.sigma(t, x, ubar_sing);
  const double h2 = c.b2(t, x, u) * adj.p + c.sigma(t, x, u) * adj.q - c.f2(t, x, u) + 0.5 * ds * ds * adj.P;
  return {h1, h2};
}

std::vector<int> vertex_classes(const PreGasket& g, int class_level) {
  if (class_level < 0) throw std::invalid_argument("class level must be nonnegative");
  const int level = std::min(class_level, g.level());
  std::size_t div = 1;
  for (int i = level; i < g.level(); ++i) div *= 3;
  std::vector<int> out(g.vertex_count());
  for (std::size_t v = 0; v < out.size(); ++v) out[v] = static_cast<int>(g.cells_of(static_cast<int>(v)).front() / div);
  return out;
}

AdjointRecorder::AdjointRecorder(const CoefficientSet& c, const ControlPolicy& ubar,
                                 std::span<const std::uint64_t> grid_steps, const std::vector<int>& vertex_class,
                                 double x0, double dt, std::size_t path)
    : c_(&c), u_(&ubar), grid_(grid_steps), cls_(&vertex_class), sde_(c, ubar, x0, dt, path), dt_(dt) {
  if (grid_.empty() || grid_.front() != 0) throw std::invalid_argument("adjoint grid must start at step 0");
  s_.x.reserve(grid_.size());
  s_.integrals.reserve(grid_.size());
}

void AdjointRecorder::step(std::uint64_t k, int v, double dq, double dw) {
  const double x = sde_.state();
  if (next_ < grid_.size() && grid_[next_] == k) {
    if (next_ > 0) s_.integrals.push_back(acc_);
    acc_.fill(0.0);
    s_.x.push_back(x);
    s_.w.push_back(w_);
    s_.qv.push_back(qv_);
    s_.cls.push_back((*cls_)[static_cast<std::size_t>(v)]);
    ++next_;
  }
  sde_.step(k, v, dq, dw);
  const double t = static_cast<double>(k) * dt_;
  const double ua = sde_.last_ac();
  const double us = sde_.last_sing();
  const auto& c = *c_;
  acc_[kDW] += dw;
  acc_[kDQ] += dq;
  acc_[kB1x] += c.b1.d1(t, x, ua) * dt_;
  acc_[kF1x] += c.f1.d1(t, x, ua) * dt_;
  acc_[kB1xx] += c.b1.d2(t, x, ua) * dt_;
  acc_[kF1xx] += c.f1.d2(t, x, ua) * dt_;
  const double sx = c.sigma.d1(t, x, us);
  acc_[kB2x] += c.b2.d1(t, x, us) * dq;
  acc_[kSx] += sx * dq;
  acc_[kSx2] += sx * sx * dq;
  acc_[kF2x] += c.f2.d1(t, x, us) * dq;
  acc_[kB2xx] += c.b2.d2(t, x, us) * dq;
  acc_[kSxx] += c.sigma.d2(t, x, us) * dq;
  acc_[kF2xx] += c.f2.d2(t, x, us) * dq;
  w_ += dw;
  qv_ += dq;
}

void AdjointRecorder::finish(int v) {
  if (next_ != grid_.size() - 1) throw std::logic_error("adjoint grid does not end at the horizon");
  s_.integrals.push_back(acc_);
  s_.x.push_back(sde_.state());
  s_.w.push_back(w_);
  s_.qv.push_back(qv_);
  s_.cls.push_back((*cls_)[static_cast<std::size_t>(v)]);
  ++next_;
}

namespace {

// Conditional expectation by per-class least squares at one grid index.
class ClassRegression {
 public:
  ClassRegression(std::span<const AdjointSample> paths, std::size_t j, int degree, const std::string& where) {
    int n_cls = 0;
    for (const auto& p : paths) n_cls = std::max(n_cls, p.cls[j] + 1);
    members_.assign(static_cast<std::size_t>(n_cls), {});
    for (std::size_t i = 0; i < paths.size(); ++i) members_[static_cast<std::size_t>(paths[i].cls[j])].push_back(i);
    for (int a = 0; a <= degree; ++a) {
      for (int b = 0; a + b <= degree; ++b) powers_.emplace_back(a, b);
    }
    fits_.resize(members_.size());
    for (std::size_t c = 0; c < members_.size(); ++c) {
      const auto& m = members_[c];
      if (m.empty()) continue;
      auto& fit = fits_[c];
      // keep the intercept and every monomial that is not constant on the class
      for (std::size_t col = 0; col < powers_.size(); ++col) {
        double lo = 0.0, hi = 0.0;
        for (std::size_t r = 0; r < m.size(); ++r) {
          const double v = monomial(paths[m[r]], j, col);
          if (r == 0 || v < lo) lo = v;
          if (r == 0 || v > hi) hi = v;
        }
        const double scale = std::max({1.0, std::abs(lo), std::abs(hi)});
        if (col == 0 || hi - lo > 1e-12 * scale) fit.cols.push_back(col);
      }
      fit.X.resize(static_cast<Eigen::Index>(m.size()), static_cast<Eigen::Index>(fit.cols.size()));
      for (std::size_t r = 0; r < m.size(); ++r) {
        for (std::size_t q = 0; q < fit.cols.size(); ++q) {
          fit.X(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(q)) = monomial(paths[m[r]], j, fit.cols[q]);
        }
      }
      fit.qr.compute(fit.X);
      if (fit.qr.rank() < static_cast<Eigen::Index>(fit.cols.size())) {
        throw BasisDegeneracyError("adjoint regression basis is rank deficient at " + where + " (class " +
                                   std::to_string(c) + ", " + std::to_string(m.size()) + " paths, rank " +
                                   std::to_string(fit.qr.rank()) + " of " + std::to_string(fit.cols.size()) + ")");
      }
    }
    paths_ = paths;
    j_ = j;
  }

  /// Fitted values of y (indexed by path).
  std::vector<double> fit(const std::vector<double>& y) const {
    std::vector<double> out(y.size(), 0.0);
    for (std::size_t c = 0; c < members_.size(); ++c) {
      const auto& m = members_[c];
      if (m.empty()) continue;
      bool constant = true;
      for (std::size_t r = 1; r < m.size() && constant; ++r) constant = y[m[r]] == y[m[0]];
      if (constant) {
        for (auto i : m) out[i] = y[m[0]];
        continue;
      }
      const auto& f = fits_[c];
      Eigen::VectorXd rhs(static_cast<Eigen::Index>(m.size()));
      for (std::size_t r = 0; r < m.size(); ++r) rhs(static_cast<Eigen::Index>(r)) = y[m[r]];
      const Eigen::VectorXd beta = f.qr.solve(rhs);
      const Eigen::VectorXd yhat = f.X * beta;
      for (std::size_t r = 0; r < m.size(); ++r) out[m[r]] = yhat(static_cast<Eigen::Index>(r));
    }
    return out;
  }

 private:
  struct Fit {
    std::vector<std::size_t> cols;
    Eigen::MatrixXd X;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr;
  };

  double monomial(const AdjointSample& p, std::size_t j, std::size_t col) const {
    const auto [a, b] = powers_[col];
    return std::pow(p.w[j], a) * std::pow(p.qv[j], b);
  }

  std::span<const AdjointSample> paths_;
  std::size_t j_ = 0;
  std::vector<std::pair<int, int>> powers_;
  std::vector<std::vector<std::size_t>> members_;
  std::vector<Fit> fits_;
};

}  // namespace

std::vector<std::vector<AdjointValues>> solve_linear_adjoint(const CoefficientSet& c,
                                                            std::span<const AdjointSample> paths,
                                                            const AdjointBasis& basis,
                                                            std::vector<std::vector<AdjointValues>>* responses) {
  if (paths.empty()) throw std::invalid_argument("adjoint solve needs at least one path");
  if (basis.degree < 0) throw std::invalid_argument("adjoint basis degree must be nonnegative");
  const std::size_t n_grid = paths.front().x.size();
  if (n_grid < 2) throw std::invalid_argument("adjoint grid needs at least two points");
  for (const auto& p : paths) {
    if (p.x.size() != n_grid || p.w.size() != n_grid || p.qv.size() != n_grid || p.cls.size() != n_grid ||
        p.integrals.size() != n_grid - 1) {
      throw std::invalid_argument("adjoint samples have inconsistent grids");
    }
  }
  const std::size_t n = paths.size();
  std::vector<std::vector<AdjointValues>> out(n, std::vector<AdjointValues>(n_grid));
  const std::size_t last = n_grid - 1;
  for (std::size_t i = 0; i < n; ++i) {
    out[i][last].p = -c.h.d1(paths[i].x[last]);
    out[i][last].P = -c.h.d2(paths[i].x[last]);
  }

  // Multi-step responses: xi carries the realized p_K and drivers back along
  // each path, so fitting errors of later steps never enter q.
  std::vector<double> xi(n), big_xi(n), q_num(n), qq_num(n);
  if (responses) *responses = out;
  for (std::size_t i = 0; i < n; ++i) {
    xi[i] = out[i][last].p;
    big_xi[i] = out[i][last].P;
  }
  for (std::size_t jj = last; jj-- > 0;) {
    const ClassRegression reg(paths, jj, basis.degree, "grid step " + std::to_string(jj));
    const auto p_mean = reg.fit(xi);
    const auto P_mean = reg.fit(big_xi);
    // dW is a time change of fair signs independent of the vertex path, so
    // E[dM dW / d<W> | F_j] = q_j
    for (std::size_t i = 0; i < n; ++i) {
      const auto& I = paths[i].integrals[jj];
      const double r = I[kDQ] > 0.0 ? I[kDW] / I[kDQ] : 0.0;
      q_num[i] = (xi[i] - p_mean[i]) * r;
      qq_num[i] = (big_xi[i] - P_mean[i]) * r;
    }
    const auto q = reg.fit(q_num);
    const auto Q = reg.fit(qq_num);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& I = paths[i].integrals[jj];
      const double p_next = xi[i];
      xi[i] = p_next * (1.0 + I[kB1x] + I[kB2x]) - I[kF1x] - I[kF2x] + q[i] * I[kSx];
      big_xi[i] = big_xi[i] * (1.0 + 2.0 * I[kB1x] + 2.0 * I[kB2x] + I[kSx2]) + p_next * (I[kB1xx] + I[kB2xx]) -
                  I[kF1xx] - I[kF2xx] + Q[i] * I[kSx] + q[i] * I[kSxx];
    }
    const auto p_fit = reg.fit(xi);
    const auto P_fit = reg.fit(big_xi);
    for (std::size_t i = 0; i < n; ++i) {
      auto& a = out[i][jj];
      a.q = q[i];
      a.Q = Q[i];
      a.p = p_fit[i];
      a.P = P_fit[i];
      if (responses) (*responses)[i][jj] = {xi[i], q_num[i], big_xi[i], qq_num[i]};
    }
  }
  // q, Q are defined on intervals; the terminal point repeats the last one
  for (auto* table : {&out, responses}) {
    if (!table) continue;
    for (auto& row : *table) {
      row[last].q = row[last - 1].q;
      row[last].Q = row[last - 1].Q;
    }
  }
  return out;
}

void write_hamiltonian_scan_header(std::ostream& os) { os << "t,u,H1,H2\n"; }

void write_hamiltonian_scan_row(std::ostream& os, double t, double u, double h1, double h2) {
  os << format_number(t) << ',' << format_number(u) << ',' << format_number(h1) << ',' << format_number(h2) << '\n';
}

}  // namespace fc

#include <doctest.h>

#include <cmath>

#include "fractal_control/control.hpp"

using namespace fc;

namespace {

WalkConfig small_walk(int m, std::size_t paths) {
  WalkConfig cfg;
  cfg.level = m;
  cfg.paths = paths;
  return cfg;
}

std::vector<AdjointSample> record_adjoint(const CoefficientSet& c, const ControlPolicy& ubar, const WalkModel& model,
                                          const WalkConfig& cfg, std::span<const std::uint64_t> grid,
                                          const std::vector<int>& cls, double x0) {
  std::vector<AdjointSample> out;
  for (std::size_t i = 0; i < cfg.paths; ++i) {
    const PathSample p = sample_path(model, cfg, i);
    AdjointRecorder rec(c, ubar, grid, cls, x0, model.dt(), i);
    for (std::size_t k = 0; k < p.steps.size(); ++k) rec.step(k, p.steps[k].vertex, p.steps[k].dqv, p.steps[k].dw);
    rec.finish(p.final_vertex);
    out.push_back(rec.sample());
  }
  return out;
}

}  // namespace

TEST_SUITE("control") {

TEST_CASE("finite-difference derivatives agree with analytic ones") {
  Coefficient s{[](double, double x, double u) { return std::sin(x) * u; }, {}, {}};
  CHECK(s.d1(0.0, 0.7, 2.0) == doctest::Approx(2.0 * std::cos(0.7)).epsilon(1e-8));
  CHECK(s.d2(0.0, 0.7, 2.0) == doctest::Approx(-2.0 * std::sin(0.7)).epsilon(1e-4));
  TerminalCost h{[](double x) { return std::exp(x); }, {}, {}};
  CHECK(h.d1(0.3) == doctest::Approx(std::exp(0.3)).epsilon(1e-8));
  CHECK(Coefficient::zero().d1(0.0, 1.0, 1.0) == 0.0);
  CHECK_THROWS_AS(CoefficientSet::regulator(0.0), std::invalid_argument);
}

TEST_CASE("constant control on the regulator integrates in closed form") {
  const WalkModel model = WalkModel::at_level(3);
  const PathSample p = sample_path(model, small_walk(3, 1), 2);
  const double a = 1.5, c = 0.4;
  const CoefficientSet reg = CoefficientSet::regulator(a);
  const Trajectory tr = integrate_sde(reg, ControlPolicy::constant(c), p, 1.0);
  const double x1 = 1.0 + c * (1.0 + p.qv.back() + p.w.back());
  CHECK(tr.x.back() == doctest::Approx(x1).epsilon(1e-12));
  CHECK(tr.cost() == doctest::Approx(x1 * x1 + 0.5 * a * c * c).epsilon(1e-12));
}

TEST_CASE("zero control costs exactly one") {
  const WalkModel model = WalkModel::at_level(3);
  const Estimate e = evaluate_cost(CoefficientSet::regulator(1.0), ControlPolicy::constant(0.0), model,
                                   small_walk(3, 500), 1.0);
  CHECK(e.value == 1.0);
  CHECK(e.se == 0.0);
}

TEST_CASE("common-path comparison matches single evaluations") {
  const WalkModel model = WalkModel::at_level(3);
  const WalkConfig cfg = small_walk(3, 800);
  const CoefficientSet reg = CoefficientSet::regulator(1.0);
  const std::vector<ControlPolicy> us{ControlPolicy::constant(-0.2), ControlPolicy::constant(0.1)};
  const CostComparison cmp = compare_costs(reg, us, model, cfg, 1.0);
  for (std::size_t j = 0; j < us.size(); ++j) {
    const Estimate e = evaluate_cost(reg, us[j], model, cfg, 1.0);
    CHECK(cmp.cost[j].value == doctest::Approx(e.value).epsilon(1e-12));
  }
  CHECK(cmp.difference[0].value == 0.0);
  CHECK(cmp.difference[1].value == doctest::Approx(cmp.cost[1].value - cmp.cost[0].value).epsilon(1e-9));
  CHECK(cmp.difference[0].se == 0.0);
}

TEST_CASE("step sets hold whole steps only and count overlaps once") {
  const double dt = 1.0 / 25.0;
  const StepSet s(TimeSet::interval(0.25, 0.5), dt);
  CHECK_FALSE(s.contains(6));
  CHECK(s.contains(7));
  CHECK(s.contains(11));
  CHECK_FALSE(s.contains(12));
  CHECK(s.count() == 5);
  const StepSet u(TimeSet{{{0.0, 0.2}, {0.12, 0.4}}}, dt);
  CHECK(u.count() == 10);
  CHECK(StepSet(TimeSet::interval(0.3, 0.3), dt).count() == 0);
}

TEST_CASE("spike perturbation switches channels inside the interval only") {
  const auto ubar = ControlPolicy::constant(0.0);
  const auto u1 = ControlPolicy::constant(1.0);
  const auto u2 = ControlPolicy::constant(2.0);
  const double dt = 0.01;
  StepContext in;
  in.k = 55;
  StepContext out;
  out.k = 70;
  const SpikeControl both = spike_perturb(ubar, u1, u2, TimeSet::interval(0.5, 0.6), dt);
  CHECK(both.policy.ac_at(in) == 1.0);
  CHECK(both.policy.sing_at(in) == 2.0);
  CHECK(both.policy.ac_at(out) == 0.0);
  CHECK(both.policy.sing_at(out) == 0.0);
  // E is where a channel would change; the interval is applied separately
  CHECK(both.in_e(in));
  CHECK(both.in_e(out));
  const SpikeControl s2 = spike_perturb(ubar, u1, u2, TimeSet::interval(0.5, 0.6), dt, {false, true});
  CHECK(s2.policy.ac_at(in) == 0.0);
  CHECK(s2.policy.sing_at(in) == 2.0);
  // a spike equal to the reference never leaves E empty-handed
  const SpikeControl same = spike_perturb(ubar, ubar, ubar, TimeSet::interval(0.5, 0.6), dt);
  CHECK_FALSE(same.in_e(in));
}

TEST_CASE("state-independent coefficients: y + z is the exact increment") {
  const WalkModel model = WalkModel::at_level(3);
  const PathSample p = sample_path(model, small_walk(3, 1), 4);
  const CoefficientSet reg = CoefficientSet::regulator(1.0);
  const auto ubar = ControlPolicy::constant(0.3);
  const SpikeControl s =
      spike_perturb(ubar, ControlPolicy::constant(-1.0), ControlPolicy::constant(2.0), TimeSet::interval(0.2, 0.4),
                    model.dt());
  const VariationSeries v = integrate_variations(reg, ubar, s, p, 1.0);
  for (std::size_t k = 0; k < v.xbar.size(); ++k) {
    CHECK(v.xeps[k] - v.xbar[k] == doctest::Approx(v.y[k] + v.z[k]).scale(1.0).epsilon(1e-12));
  }
}

TEST_CASE("T_2k of a constant series") {
  const std::vector<double> phi(5, 2.0);
  const std::vector<double> qv{0.0, 0.1, 0.2, 0.3, 0.4};
  const double kappa = 1.0;
  double integral = 0.0;
  for (int i = 0; i < 4; ++i) integral += 4.0 * std::exp(-kappa * qv[static_cast<std::size_t>(i)]) * 0.1;
  CHECK(t2k_path(phi, qv, 1.0, kappa) == doctest::Approx(4.0 + integral));
  CHECK(t2k_path(phi, qv, 1.0, 0.0) == doctest::Approx(4.0 + 1.6));
  CHECK_THROWS_AS(t2k_path(phi, std::vector<double>{0.0}, 1.0, 1.0), std::invalid_argument);
  CHECK(default_kappa(1.0, 1.0) > 0.0);
}

TEST_CASE("log-log slope of a power law") {
  VariationReport r;
  for (double e : {0.25, 0.125, 0.0625}) {
    VariationPoint p;
    p.epsilon = e;
    p.t2_xi.value = 3.0 * e * e;
    r.points.push_back(p);
  }
  CHECK(r.slope(&VariationPoint::t2_xi) == doctest::Approx(2.0));
}

TEST_CASE("regulator Hamiltonians are the analytic quadratics") {
  const double a = 2.0;
  const CoefficientSet reg = CoefficientSet::regulator(a);
  const AdjointValues adj{0.7, -0.7, -2.0, 0.0};
  for (double u : {-1.0, 0.0, 0.35, 1.3}) {
    const auto [h1, h2] = hamiltonians(reg, adj, 0.5, 0.1, u, 0.35);
    CHECK(h1 == doctest::Approx(u * adj.p - 0.5 * a * u * u));
    CHECK(h2 == doctest::Approx(u * (adj.p + adj.q) - (u - 0.35) * (u - 0.35)));
  }
}

TEST_CASE("vertex classes") {
  const PreGasket g = build_pregasket(4);
  const auto cls = vertex_classes(g, 3);
  REQUIRE(cls.size() == g.vertex_count());
  for (int c : cls) CHECK((c >= 0 && c < 27));
  const PreGasket g1 = build_pregasket(1);
  for (int c : vertex_classes(g1, 3)) CHECK((c >= 0 && c < 3));
  CHECK_THROWS_AS(vertex_classes(g, -1), std::invalid_argument);
}

TEST_CASE("adjoint of a deterministic linear flow") {
  // dx = alpha x dt, h(x) = x: p(t_j) = -prod (1 + alpha |interval|), q = 0
  const double alpha = 0.8;
  CoefficientSet c;
  c.b1 = {[alpha](double, double x, double) { return alpha * x; }, [alpha](double, double, double) { return alpha; },
          [](double, double, double) { return 0.0; }};
  c.h = {[](double x) { return x; }, [](double) { return 1.0; }, [](double) { return 0.0; }};
  const WalkModel model = WalkModel::at_level(3);
  const WalkConfig cfg = small_walk(3, 300);
  const PreGasket g = build_pregasket(3);
  const std::vector<std::uint64_t> grid{0, 25, 50, 100, 125};
  const auto samples = record_adjoint(c, ControlPolicy::constant(0.0), model, cfg, grid, vertex_classes(g, 1), 1.0);
  const auto adj = solve_linear_adjoint(c, samples);
  std::vector<double> exact(grid.size(), -1.0);
  for (std::size_t j = grid.size() - 1; j-- > 0;) {
    exact[j] = exact[j + 1] * (1.0 + alpha * static_cast<double>(grid[j + 1] - grid[j]) * model.dt());
  }
  for (const auto& path : adj) {
    for (std::size_t j = 0; j < grid.size(); ++j) {
      CHECK(path[j].p == doctest::Approx(exact[j]).epsilon(1e-12));
      CHECK(path[j].q == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
      CHECK(path[j].P == 0.0);
    }
  }
}

TEST_CASE("adjoint of x = x0 + W with quadratic terminal cost") {
  // p(t) = -2 x(t), q = -2, P = -2, Q = 0
  CoefficientSet c;
  c.sigma = {[](double, double, double) { return 1.0; }, [](double, double, double) { return 0.0; },
             [](double, double, double) { return 0.0; }};
  c.h = {[](double x) { return x * x; }, [](double x) { return 2.0 * x; }, [](double) { return 2.0; }};
  const WalkModel model = WalkModel::at_level(3);
  const WalkConfig cfg = small_walk(3, 4000);
  const PreGasket g = build_pregasket(3);
  const std::vector<std::uint64_t> grid{0, 25, 50, 75, 100, 125};
  const double x0 = 0.5;
  const auto samples = record_adjoint(c, ControlPolicy::constant(0.0), model, cfg, grid, vertex_classes(g), x0);
  const auto adj = solve_linear_adjoint(c, samples);
  for (std::size_t j = 0; j + 1 < grid.size(); ++j) {
    RunningStats q, p_err;
    for (std::size_t i = 0; i < adj.size(); ++i) {
      q.add(adj[i][j].q);
      p_err.add(adj[i][j].p + 2.0 * samples[i].x[j]);
      CHECK(adj[i][j].P == -2.0);
      CHECK(adj[i][j].Q == 0.0);
    }
    CHECK(q.mean() == doctest::Approx(-2.0).epsilon(0.05));
    CHECK(std::abs(p_err.mean()) < 0.05);
  }
}

TEST_CASE("adjoint solve rejects malformed input") {
  const CoefficientSet c = CoefficientSet::regulator(1.0);
  CHECK_THROWS_AS(solve_linear_adjoint(c, std::vector<AdjointSample>{}), std::invalid_argument);
  AdjointSample a;
  a.x = {1.0, 1.0};
  a.w = {0.0, 0.1};
  a.qv = {0.0, 0.1};
  a.cls = {0, 0};
  CHECK_THROWS_AS(solve_linear_adjoint(c, std::vector<AdjointSample>{a}), std::invalid_argument);
  CHECK_THROWS_AS(solve_linear_adjoint(c, std::vector<AdjointSample>{a}, AdjointBasis{3, -1}), std::invalid_argument);
}

}

#include <doctest.h>

#include <sstream>

#include <json.hpp>

#include "fractal_control/regulator.hpp"

using namespace fc;

namespace {

RegulatorConfig small(int m, std::size_t paths, double a = 1.0) {
  RegulatorConfig cfg;
  cfg.level = m;
  cfg.paths = paths;
  cfg.a = a;
  cfg.workers = 1;
  cfg.grid_intervals = 5;
  return cfg;
}

// Optimal cost of the level-m chain regulator over all adapted controls:
// V_k(x, v) = A_k(v) x^2 minimized step by step, with
// x' = x + u (dt + dq + dW), dW = +-sqrt(dq) independent of the move.
double discrete_riccati_cost(const WalkModel& model, double a) {
  const std::size_t nv = model.vertex_count();
  const double dt = model.dt();
  std::vector<double> A(nv, 1.0), next(nv);
  for (std::uint64_t k = model.steps_for(1.0); k-- > 0;) {
    for (std::size_t v = 0; v < nv; ++v) {
      double avg = 0.0;
      for (int u : model.neighbor_slots(static_cast<int>(v))) avg += A[static_cast<std::size_t>(u)];
      avg /= 4.0;
      const double d = model.bracket_increment(static_cast<int>(v));
      const double s = dt + d;
      next[v] = avg - avg * avg * s * s / (0.5 * a * dt + avg * (s * s + d));
    }
    A.swap(next);
  }
  double j = 0.0;
  for (std::size_t v = 0; v < nv; ++v) j += model.nu_mass(static_cast<int>(v)) * A[v];
  return j;
}

}  // namespace

TEST_SUITE("regulator") {

TEST_CASE("Phi starts at one and follows exp(-2W - <W>)") {
  const WalkModel model = WalkModel::at_level(3);
  const PathSample p = sample_path(model, small(3, 1).walk(), 7);
  const auto phi = phi_along_path(p);
  REQUIRE(phi.size() == p.w.size());
  CHECK(phi.front() == 1.0);
  for (std::size_t k = 0; k < phi.size(); ++k) CHECK(phi[k] == doctest::Approx(std::exp(-2.0 * p.w[k] - p.qv[k])));
}

TEST_CASE("theta table: terminal value, grid and interpolation") {
  const WalkModel model = WalkModel::at_level(3);
  const ThetaTable t = tabulate_theta_eta(model, small(3, 10));
  const std::size_t last = t.grid_size() - 1;
  CHECK(t.grid_steps().front() == 0);
  CHECK(t.grid_steps().back() == 125);
  for (int v = 0; v < static_cast<int>(t.vertex_count()); ++v) {
    CHECK(t.theta(last, v) == -0.5);
    CHECK(t.theta(0, v) < -0.5);
    CHECK(t.theta_at(t.grid_steps()[2], v) == t.theta(2, v));
  }
  const auto [j, w] = t.locate(t.grid_steps()[1] + 1);
  CHECK(t.control_steps()[j] == t.grid_steps()[1]);
  CHECK(t.control_steps().size() == 4 * (t.grid_size() - 1) + 1);
  CHECK(w > 0.0);
  CHECK(w < 1.0);
}

TEST_CASE("theta table agrees with restarted walks") {
  const WalkModel model = WalkModel::at_level(3);
  const RegulatorConfig cfg = small(3, 10);
  const ThetaTable t = tabulate_theta_eta(model, cfg);
  const std::vector<int> vs{0, 5, 17};
  for (std::size_t j : {std::size_t{0}, std::size_t{3}}) {
    const auto est = theta_by_subsimulation(model, cfg, t.grid_steps()[j], vs, 20000);
    for (std::size_t i = 0; i < vs.size(); ++i) {
      const double exact = t.theta(j, vs[i]);
      CHECK(std::abs(est[i].value - exact) <= 4.0 * est[i].se);
    }
  }
  CHECK_THROWS_AS(theta_by_subsimulation(model, cfg, 0, vs, kMinSubsamples - 1), CoverageError);
}

TEST_CASE("theta(0) increases with the control weight") {
  const WalkModel model = WalkModel::at_level(3);
  double prev = -1e300;
  for (double a : {0.5, 1.0, 2.0, 4.0}) {
    const ThetaTable t = tabulate_theta_eta(model, small(3, 10, a));
    CHECK(t.theta(0, 3) > prev);
    prev = t.theta(0, 3);
  }
}

TEST_CASE("Monte Carlo theta(0) matches the chain value") {
  const WalkModel model = WalkModel::at_level(3);
  const RegulatorConfig cfg = small(3, 20000);
  const ThetaTable t = tabulate_theta_eta(model, cfg);
  double exact = 0.0;
  for (int v = 0; v < static_cast<int>(t.vertex_count()); ++v) exact += model.nu_mass(v) * t.theta(0, v);
  const Estimate e = estimate_theta0(model, cfg);
  CHECK(std::abs(e.value - exact) <= 4.0 * e.se);
}

TEST_CASE("discrete Ito residual of Phi shrinks with the level") {
  const std::vector<int> levels{2, 3, 4, 5};
  const auto pts = phi_ito_audit(levels, 4000, 0, 1);
  REQUIRE(pts.size() == levels.size());
  CHECK(phi_ito_slope(pts) < 0.0);
}

TEST_CASE("optimal pair along a path") {
  const WalkModel model = WalkModel::at_level(3);
  const RegulatorConfig cfg = small(3, 10, 2.0);
  const ThetaTable t = tabulate_theta_eta(model, cfg);
  const PathSample p = sample_path(model, cfg.walk(), 1);
  const OptimalPath o = optimal_pair(t, p);
  CHECK(o.x.front() == 1.0);
  CHECK(o.p.front() == doctest::Approx(1.0 / t.theta(0, p.start_vertex)));
  for (std::size_t k = 0; k < o.u_ac.size(); ++k) {
    CHECK(o.p[k] == doctest::Approx(optimal_p(t, p.start_vertex, p.w[k], p.qv[k])));
    CHECK(o.u_ac[k] == doctest::Approx(o.p[k] / 2.0));
  }
  CHECK(o.cost >= 0.0);
  CHECK(hamiltonian_scan(t, p) <= 1e-12);
}

TEST_CASE("competitor and spike lists") {
  const auto c = default_competitors();
  REQUIRE(c.size() >= 3);
  CHECK(c[0].kind == RegulatorControl::Kind::optimal);
  CHECK(c[1].name == "zero");
  RegulatorConfig cfg = small(4, 10);
  const auto s = spike_controls(cfg, 1.0 / 625.0);
  CHECK(s.size() == 4 * cfg.spike_epsilons.size());
  for (const auto& x : s) CHECK(x.steps.count() > 0);
}

TEST_CASE("optimal control is above the discrete optimum and beats zero") {
  const int m = 3;
  const WalkModel model = WalkModel::at_level(m);
  const RegulatorConfig cfg = small(m, 20000);
  const ThetaTable t = tabulate_theta_eta(model, cfg);
  std::vector<RegulatorControl> controls(2);
  controls[0].name = "optimal";
  controls[1].name = "zero";
  controls[1].kind = RegulatorControl::Kind::constant;
  const RegulatorPass pass = simulate_regulator(model, cfg, t, controls);
  const double jstar = discrete_riccati_cost(model, cfg.a);
  CHECK(jstar > 0.0);
  CHECK(jstar < 1.0);
  CHECK(pass.cost[0].value >= jstar - 3.0 * pass.cost[0].se);
  CHECK(pass.cost[1].value == 1.0);
  CHECK(pass.difference[1].value > 0.0);
}

TEST_CASE("Phi theta - (1/a) int Phi is an exact martingale of the chain") {
  const WalkModel model = WalkModel::at_level(3);
  const RegulatorConfig cfg = small(3, 20000);
  const ThetaTable t = tabulate_theta_eta(model, cfg);
  std::vector<RegulatorControl> controls(1);
  const RegulatorPass pass = simulate_regulator(model, cfg, t, controls);
  REQUIRE(pass.drift.size() == t.grid_size() - 1);
  for (const auto& e : pass.drift) CHECK(std::abs(e.value) <= 4.0 * e.se + 1e-12);
}

TEST_CASE("BSDE residual and terminal consistency at a fine level") {
  // both are continuum identities; the chain carries an O(dq^2) bias per step
  const WalkModel model = WalkModel::at_level(5);
  RegulatorConfig cfg = small(5, 20000);
  cfg.grid_intervals = RegulatorConfig{}.grid_intervals;
  const ThetaTable t = tabulate_theta_eta(model, cfg);
  std::vector<RegulatorControl> controls(1);
  const RegulatorPass pass = simulate_regulator(model, cfg, t, controls);
  for (const auto& e : pass.bsde_residual) CHECK(std::abs(e.value) <= 4.0 * e.se + 1e-12);
  CHECK(std::abs(pass.terminal_gap.value) <= 4.0 * pass.terminal_gap.se);
}

TEST_CASE("report json layout") {
  RegulatorReport r;
  r.a = 1.0;
  r.level = 3;
  r.paths = 10;
  r.names = {"optimal"};
  r.cost = {Estimate{0.2, 0.01, 10}};
  r.difference = {Estimate{0.0, 0.0, 10}};
  r.checks = {{"theta1_exact", true, ""}, {"tournament", false, "x"}};
  std::ostringstream os;
  write_regulator_json(os, r);
  const auto j = nlohmann::json::parse(os.str());
  for (const char* k : {"a", "level", "N", "theta0", "J", "checks"}) CHECK(j.contains(k));
  CHECK(j["checks"]["theta1_exact"] == "pass");
  CHECK(j["checks"]["tournament"] == "fail");
  CHECK_FALSE(r.all_pass());
}

TEST_CASE("config validation") {
  RegulatorConfig cfg;
  cfg.a = 0.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = RegulatorConfig{};
  cfg.grid_intervals = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

}

#include "fractal_control/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "fractal_control/dirichlet.hpp"
#include "fractal_control/errors.hpp"
#include "fractal_control/gasket.hpp"
#include "fractal_control/regulator.hpp"

#ifndef FRACTAL_CONTROL_VERSION
#define FRACTAL_CONTROL_VERSION "unknown"
#endif

namespace fc {

using json = nlohmann::ordered_json;

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{"geometry-audit", "measures",          "kernel-slope", "bracket-moments",
                                              "singularity",    "variation-orders", "regulator"};
  return names;
}

std::string ExperimentConfig::output_format() const {
  if (!format.empty()) return format;
  return experiment == "regulator" ? "json" : "csv";
}

std::string ExperimentConfig::output_path() const {
  return out.empty() ? experiment + "." + output_format() : out;
}

ParseResult parse_config(int argc, const char* const* argv) {
  ParseResult result;
  ExperimentConfig& cfg = result.config;
  CLI::App app{"Sierpinski gasket stochastic-control experiments", "fractal_control"};
  app.add_option("--experiment", cfg.experiment, "experiment to run")
      ->required()
      ->check(CLI::IsMember(experiment_names()));
  app.add_option("--level", cfg.level, "pre-gasket level m")->capture_default_str();
  app.add_option("--paths", cfg.paths, "Monte Carlo paths N")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--seed", cfg.seed, "master seed")->capture_default_str();
  app.add_option("--horizon", cfg.horizon, "time horizon T")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--a", cfg.a, "control-cost weight of the regulator")->capture_default_str()->check(CLI::PositiveNumber);
  app.add_option("--workers", cfg.workers, "worker threads (0 = all cores)")->capture_default_str()->check(CLI::NonNegativeNumber);
  app.add_option("--out", cfg.out, "result file (default <experiment>.<format>)");
  app.add_option("--format", cfg.format, "csv or json")->check(CLI::IsMember({"csv", "json"}));
  app.set_config("--config", "", "key=value file; flags take precedence");
  app.allow_config_extras(CLI::config_extras_mode::error);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    result.help = true;
    result.text = app.help();
    return result;
  } catch (const CLI::ParseError& e) {
    throw UsageError(std::string(e.what()) + "\n\n" + app.help());
  }
  if (cfg.level < 0 || cfg.level > max_level()) {
    throw UsageError("--level: " + std::to_string(cfg.level) + " is outside [0, " + std::to_string(max_level()) +
                     "] (raise FRACTAL_CONTROL_MAX_LEVEL to allow more)\n\n" + app.help());
  }
  return result;
}

namespace {

// Rows of numbers or strings; CSV and JSON views of the same data.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<json>> rows;
  std::vector<std::pair<std::string, json>> summary;

  void add(std::vector<json> row) { rows.push_back(std::move(row)); }
  void note(std::string key, json value) { summary.emplace_back(std::move(key), std::move(value)); }
};

std::string cell_text(const json& v) {
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  if (v.is_number()) return format_number(v.get<double>());
  if (v.is_boolean()) return v.get<bool>() ? "1" : "0";
  return v.get<std::string>();
}

std::string render(const Table& t, const std::string& format) {
  std::ostringstream os;
  if (format == "json") {
    json j;
    j["columns"] = t.columns;
    j["rows"] = t.rows;
    json s = json::object();
    for (const auto& [k, v] : t.summary) s[k] = v;
    j["summary"] = s;
    os << j.dump(2) << '\n';
    return os.str();
  }
  for (std::size_t i = 0; i < t.columns.size(); ++i) os << (i ? "," : "") << t.columns[i];
  os << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << cell_text(row[i]);
    os << '\n';
  }
  for (const auto& [k, v] : t.summary) os << k << ',' << cell_text(v) << '\n';
  return os.str();
}

WalkConfig walk_config(const ExperimentConfig& cfg) {
  WalkConfig w;
  w.level = cfg.level;
  w.horizon = cfg.horizon;
  w.seed = cfg.seed;
  w.paths = cfg.paths;
  w.workers = cfg.workers;
  return w;
}

Table geometry_audit(const ExperimentConfig& cfg, bool& ok) {
  Table t;
  t.columns = {"level", "vertices", "edges", "cells", "expected_vertices", "expected_edges", "expected_cells", "match"};
  std::uint64_t p3 = 3;  // 3^{m+1}
  for (int m = 0; m <= cfg.level; ++m, p3 *= 3) {
    const PreGasket g = build_pregasket(m);
    const std::uint64_t ev = (p3 + 3) / 2;
    const std::uint64_t ee = p3;
    const std::uint64_t ec = p3 / 3;
    const bool match = g.vertex_count() == ev && g.edge_count() == ee && g.cell_count() == ec;
    ok &= match;
    t.add({m, g.vertex_count(), g.edge_count(), g.cell_count(), ev, ee, ec, match});
  }
  t.note("all_match", ok);
  return t;
}

Table measures(const ExperimentConfig& cfg) {
  if (cfg.level > kExactLevelLimit) {
    throw UsageError("--level: the exact measure table is limited to level " + std::to_string(kExactLevelLimit));
  }
  const GasketTower tower(cfg.level);
  const auto table = build_measure_table<Rational>(tower, cfg.level);
  Table t;
  t.columns = {"word", "nu", "mu", "mu1", "mu2", "mu3"};
  Rational total(0);
  const std::size_t n = tower.at(cfg.level).cell_count();
  for (std::size_t c = 0; c < n; ++c) {
    const Word w = Word::from_index(c, cfg.level);
    total += table.mu_of(w);
    t.add({w.str(), to_fraction_string(table.nu_of(w)), to_fraction_string(table.mu_of(w)),
           to_fraction_string(table.mu_i_of(1, w)), to_fraction_string(table.mu_i_of(2, w)),
           to_fraction_string(table.mu_i_of(3, w))});
  }
  t.note("total_mu", to_fraction_string(total));
  return t;
}

Table kernel_slope(const ExperimentConfig& cfg) {
  const PreGasket g = build_pregasket(cfg.level);
  const WalkModel model = WalkModel::at_level(cfg.level);
  const auto times = kernel_times(model, std::min(0.1, cfg.horizon));
  const int x = interior_probe_vertex(g);
  const auto points = estimate_kernel_on_diagonal(model, x, times, cfg.paths, cfg.seed, cfg.workers);
  Table t;
  t.columns = {"t", "p_hat", "stderr"};
  std::vector<double> ts;
  std::vector<double> ps;
  for (const auto& p : points) {
    t.add({p.t, p.p_hat.value, p.p_hat.se});
    if (p.p_hat.value > 0.0) {
      ts.push_back(p.t);
      ps.push_back(p.p_hat.value);
    }
  }
  if (ts.size() < 2) throw NumericalError("kernel estimate vanished at all but one time");
  t.note("slope", fit_loglog_slope(ts, ps));
  return t;
}

Table bracket_moments(const ExperimentConfig& cfg) {
  const WalkModel model = WalkModel::at_level(cfg.level);
  std::vector<TimeSet> sets;
  for (int j = 2; j <= 7; ++j) {
    const double e = std::ldexp(1.0, -j);
    if (e > cfg.horizon) continue;
    sets.push_back(TimeSet::interval(0.0, e));
  }
  if (sets.size() < 2) throw UsageError("--horizon: needs room for at least two windows 2^-j");
  const double ks[] = {1.0, 2.0};
  const MomentReport r = estimate_moment(model, walk_config(cfg), ks, sets);
  Table t;
  t.columns = {"epsilon", "m1", "stderr_m1", "m2", "stderr_m2"};
  for (std::size_t s = 0; s < sets.size(); ++s) {
    t.add({sets[s].length(), r.estimates[s][0].value, r.estimates[s][0].se, r.estimates[s][1].value,
           r.estimates[s][1].se});
  }
  t.note("slope_m1", r.slope(0));
  t.note("slope_m2", r.slope(1));
  t.note("ratio_slope_m2_m1", r.ratio_slope(1, 0));
  return t;
}

Table singularity(const ExperimentConfig& cfg) {
  Table t;
  t.columns = {"level", "bins", "top_decile_share", "top_half_share"};
  constexpr std::size_t kBins = 125;
  const int lo = std::max(3, cfg.level - 3);
  double previous = -1.0;
  bool increasing = true;
  for (int m = lo; m <= cfg.level; ++m) {
    const WalkModel model = WalkModel::at_level(m);
    WalkConfig w = walk_config(cfg);
    w.level = m;
    w.horizon = 1.0;
    const auto curve = estimate_singularity_profile(model, w, kBins);
    const double share = top_share(curve, 0.1);
    increasing &= share > previous;
    previous = share;
    t.add({m, kBins, share, top_share(curve, 0.5)});
  }
  t.note("strictly_increasing", increasing);
  return t;
}

std::string variation_orders(const ExperimentConfig& cfg, const std::string& format) {
  const WalkModel model = WalkModel::at_level(cfg.level);
  const VariationProblem prob = variation_test_problem();
  WalkConfig w = walk_config(cfg);
  w.horizon = prob.horizon;
  const VariationReport r =
      estimate_variation_orders(prob.coefficients, prob.ubar, prob.u1, prob.u2, model, w, prob.variation);
  const double s_xi = r.slope(&VariationPoint::t2_xi);
  const double s_xy = r.slope(&VariationPoint::t2_xi_minus_y);
  const double s_xyz = r.slope(&VariationPoint::t2_xi_minus_y_minus_z);
  std::ostringstream os;
  if (format == "json") {
    json j;
    j["k"] = r.k;
    j["kappa"] = r.kappa;
    json pts = json::array();
    for (const auto& p : r.points) {
      auto e = [](const Estimate& x) { return json{{"est", x.value}, {"se", x.se}}; };
      pts.push_back({{"epsilon", p.epsilon},
                     {"T2_xi", e(p.t2_xi)},
                     {"T2_xi_minus_y", e(p.t2_xi_minus_y)},
                     {"T2_xi_minus_y_minus_z", e(p.t2_xi_minus_y_minus_z)},
                     {"m1", e(p.m1)},
                     {"T2_y", e(p.t2_y)},
                     {"T2_z", e(p.t2_z)},
                     {"corr_xi_y", p.correlation}});
    }
    j["points"] = pts;
    j["slope_xi"] = s_xi;
    j["slope_xi_minus_y"] = s_xy;
    j["slope_xi_minus_y_minus_z"] = s_xyz;
    os << j.dump(2) << '\n';
  } else {
    write_variation_csv(os, r);
    os << "slope_xi," << format_number(s_xi) << '\n';
    os << "slope_xi_minus_y," << format_number(s_xy) << '\n';
    os << "slope_xi_minus_y_minus_z," << format_number(s_xyz) << '\n';
  }
  return os.str();
}

std::string regulator(const ExperimentConfig& cfg, const std::string& format, bool& ok) {
  RegulatorConfig rc;
  rc.a = cfg.a;
  rc.level = cfg.level;
  rc.paths = cfg.paths;
  rc.seed = cfg.seed;
  rc.workers = cfg.workers;
  const PreGasket g = build_pregasket(cfg.level);
  const WalkModel model = WalkModel::at_level(cfg.level);
  const ThetaTable table = tabulate_theta_eta(model, rc);
  RegulatorReport r = cost_tournament(model, rc, table, vertex_classes(g, rc.basis.class_level));
  r.spikes = spike_necessity(model, rc, table);
  r.checks.push_back({"spike_necessity",
                      std::all_of(r.spikes.begin(), r.spikes.end(), [](const SpikeResult& s) { return s.pass; }),
                      "J(u_eps) - J(ubar) >= -2 pooled SE"});
  ok = r.all_pass();
  std::ostringstream os;
  if (format == "json") {
    write_regulator_json(os, r);
    return os.str();
  }
  os << "name,value,stderr,n\n";
  write_estimate_row(os, "theta0", r.theta0);
  for (std::size_t i = 0; i < r.names.size(); ++i) write_estimate_row(os, "J_" + r.names[i], r.cost[i]);
  for (const auto& s : r.spikes) write_estimate_row(os, "J_" + s.name, s.cost);
  for (const auto& c : r.checks) os << "check_" << c.name << ',' << (c.pass ? "pass" : "fail") << ",,\n";
  return os.str();
}

std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string experiment_output(const ExperimentConfig& cfg, bool& ok) {
  ok = true;
  const std::string format = cfg.output_format();
  const std::string& e = cfg.experiment;
  if (e == "geometry-audit") return render(geometry_audit(cfg, ok), format);
  if (e == "measures") return render(measures(cfg), format);
  if (e == "kernel-slope") return render(kernel_slope(cfg), format);
  if (e == "bracket-moments") return render(bracket_moments(cfg), format);
  if (e == "singularity") {
    Table t = singularity(cfg);
    ok = t.summary.back().second.get<bool>();
    return render(t, format);
  }
  if (e == "variation-orders") return variation_orders(cfg, format);
  if (e == "regulator") return regulator(cfg, format, ok);
  throw UsageError("--experiment: unknown experiment '" + e + "'");
}

int run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  const auto start = std::chrono::steady_clock::now();
  json manifest;
  manifest["config"] = {{"experiment", cfg.experiment}, {"level", cfg.level},   {"paths", cfg.paths},
                        {"seed", cfg.seed},             {"horizon", cfg.horizon}, {"a", cfg.a},
                        {"workers", cfg.workers},       {"out", cfg.output_path()}, {"format", cfg.output_format()}};
  manifest["version"] = FRACTAL_CONTROL_VERSION;
  manifest["started"] = now_utc();

  int status = 0;
  std::string error;
  bool ok = true;
  try {
    const std::string body = experiment_output(cfg, ok);
    std::ofstream out(cfg.output_path(), std::ios::binary);
    if (!out) throw UsageError("--out: cannot write " + cfg.output_path());
    out << body;
    if (!out.flush()) throw UsageError("--out: write to " + cfg.output_path() + " failed");
    if (!ok) {
      status = 1;
      error = "one or more checks failed";
    }
  } catch (const UsageError& e) {
    status = 2;
    error = e.what();
  } catch (const std::invalid_argument& e) {
    status = 2;
    error = e.what();
  } catch (const ResourceLimitError& e) {
    status = 2;
    error = e.what();
  } catch (const NumericalError& e) {
    status = 1;
    error = e.what();
  }
  if (!error.empty()) log << "fractal_control: " << error << '\n';

  manifest["exit_code"] = status;
  manifest["error"] = error;
  manifest["wall_time_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ofstream m(cfg.manifest_path(), std::ios::binary);
  m << manifest.dump(2) << '\n';
  if (!m.flush()) {
    log << "fractal_control: cannot write manifest " << cfg.manifest_path() << '\n';
    if (status == 0) status = 2;
  }
  return status;
}

VariationProblem variation_test_problem() {
  VariationProblem p;
  auto& c = p.coefficients;
  c.b1 = {[](double, double x, double u) { return 0.5 * std::sin(x) + u; },
          [](double, double x, double) { return 0.5 * std::cos(x); },
          [](double, double x, double) { return -0.5 * std::sin(x); }};
  c.b2 = {[](double, double x, double u) { return 0.3 * std::cos(x) * u + 0.2 * std::sin(x); },
          [](double, double x, double u) { return -0.3 * std::sin(x) * u + 0.2 * std::cos(x); },
          [](double, double x, double u) { return -0.3 * std::cos(x) * u - 0.2 * std::sin(x); }};
  c.sigma = {[](double, double x, double u) { return 0.4 * std::cos(x) + u * (0.5 + 0.2 * std::sin(x)); },
             [](double, double x, double u) { return -0.4 * std::sin(x) + 0.2 * u * std::cos(x); },
             [](double, double x, double u) { return -0.4 * std::cos(x) - 0.2 * u * std::sin(x); }};
  c.f1 = Coefficient::zero();
  c.f2 = Coefficient::zero();
  c.h = {[](double x) { return x * x; }, [](double x) { return 2.0 * x; }, [](double) { return 2.0; }};
  c.M = 1.0;
  p.ubar = ControlPolicy::constant(0.0);
  p.u1 = ControlPolicy::constant(1.0);
  p.u2 = ControlPolicy::constant(1.0);
  p.variation.t0 = 0.125;
  for (int j = 2; j <= 7; ++j) p.variation.epsilons.push_back(std::ldexp(1.0, -j));
  p.horizon = 0.5;
  return p;
}

std::vector<double> kernel_times(const WalkModel& model, double t_max, std::size_t count) {
  const double dt = model.dt();
  const double t_min = 10.0 * dt;
  if (!(t_max > t_min) || count < 2) throw std::invalid_argument("kernel time range is empty at this level");
  std::vector<double> out;
  for (std::size_t i = 0; i < count; ++i) {
    const double t = t_min * std::pow(t_max / t_min, static_cast<double>(i) / static_cast<double>(count - 1));
    const double k = std::round(t / dt);
    if (out.empty() || k * dt > out.back()) out.push_back(k * dt);
  }
  return out;
}

int interior_probe_vertex(const PreGasket& g) {
  if (g.level() >= 3) {
    const int v = g.find_vertex(ExactPoint::make(3, 1, 3));
    if (v >= 0) return v;
  }
  for (std::size_t v = 0; v < g.vertex_count(); ++v) {
    if (!g.is_corner(static_cast<int>(v))) return static_cast<int>(v);
  }
  throw std::invalid_argument("level-0 gasket has no interior vertex");
}

}  // namespace fc

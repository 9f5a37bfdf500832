#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "fractal_control/control.hpp"
#include "fractal_control/diffusion.hpp"

namespace fc {

/// Bad command line or config file; the runner exits with status 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string>& experiment_names();

struct ExperimentConfig {
  std::string experiment;
  int level = 6;
  std::size_t paths = 100000;
  std::uint64_t seed = 0;
  double horizon = 1.0;
  double a = 1.0;
  /// 0 = available parallelism
  int workers = 0;
  /// empty = "<experiment>.<format>" in the working directory
  std::string out;
  /// empty = json for regulator, csv otherwise
  std::string format;

  std::string output_path() const;
  std::string output_format() const;
  std::string manifest_path() const { return output_path() + ".manifest.json"; }
};

struct ParseResult {
  ExperimentConfig config;
  /// --help was given; `text` holds the usage.
  bool help = false;
  std::string text;
};

/// Flags, optionally on top of a key=value file named by --config. Throws
/// UsageError carrying the message and the usage text.
ParseResult parse_config(int argc, const char* const* argv);

/// Runs the experiment, writes the result file and the manifest sidecar.
/// Returns 0 on success, 1 on numerical failure, 2 on usage errors.
int run_experiment(const ExperimentConfig& cfg, std::ostream& log);

/// The result of one experiment, already serialized.
std::string experiment_output(const ExperimentConfig& cfg, bool& ok);

/// Smooth test problem for the variation-order experiment: nonlinear b1, b2,
/// sigma, reference control 0 and spike value 1 on both channels.
struct VariationProblem {
  CoefficientSet coefficients;
  ControlPolicy ubar;
  ControlPolicy u1;
  ControlPolicy u2;
  VariationConfig variation;
  double horizon = 0.5;
};
VariationProblem variation_test_problem();

/// log-spaced step-aligned times in [10 dt, t_max].
std::vector<double> kernel_times(const WalkModel& model, double t_max, std::size_t count = 12);

/// A non-corner vertex away from the outer edges: (3/8, sqrt(3)/8) when
/// present, else the first non-corner vertex.
int interior_probe_vertex(const PreGasket& g);

}  // namespace fc

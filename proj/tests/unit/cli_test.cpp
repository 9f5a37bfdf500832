#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <json.hpp>

#include "fractal_control/experiments.hpp"

using namespace fc;
namespace fs = std::filesystem;

namespace {

ParseResult parse(std::vector<std::string> args) {
  args.insert(args.begin(), "fractal_control");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return parse_config(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("fc_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(FC_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("flags parse into the config") {
  const auto r = parse({"--experiment", "regulator", "--a", "2", "--level", "4", "--paths", "50", "--seed", "9"});
  CHECK_FALSE(r.help);
  CHECK(r.config.experiment == "regulator");
  CHECK(r.config.a == 2.0);
  CHECK(r.config.level == 4);
  CHECK(r.config.paths == 50);
  CHECK(r.config.seed == 9);
  CHECK(r.config.output_format() == "json");
  CHECK(r.config.output_path() == "regulator.json");
  CHECK(r.config.manifest_path() == "regulator.json.manifest.json");
}

TEST_CASE("defaults") {
  const auto r = parse({"--experiment", "singularity"});
  CHECK(r.config.level == 6);
  CHECK(r.config.paths == 100000);
  CHECK(r.config.horizon == 1.0);
  CHECK(r.config.output_format() == "csv");
}

TEST_CASE("usage errors") {
  CHECK_THROWS_AS(parse({"--experiment", "nosuch"}), UsageError);
  CHECK_THROWS_AS(parse({}), UsageError);
  CHECK_THROWS_AS(parse({"--experiment", "measures", "--a", "-1"}), UsageError);
  CHECK_THROWS_AS(parse({"--experiment", "measures", "--format", "xml"}), UsageError);
  CHECK_THROWS_AS(parse({"--experiment", "measures", "--bogus", "1"}), UsageError);
  CHECK_THROWS_AS(parse({"--experiment", "measures", "--level", "99"}), UsageError);
  CHECK(parse({"--help"}).help);
}

TEST_CASE("config file values yield to flags") {
  TempDir d;
  const fs::path file = d.path / "run.cfg";
  std::ofstream(file) << "experiment=measures\nlevel=5\nseed=3\n";
  const auto r = parse({"--config", file.string(), "--level", "7"});
  CHECK(r.config.experiment == "measures");
  CHECK(r.config.level == 7);
  CHECK(r.config.seed == 3);
  std::ofstream(d.path / "bad.cfg") << "experiment=measures\nnot_a_key=1\n";
  CHECK_THROWS_AS(parse({"--config", (d.path / "bad.cfg").string()}), UsageError);
}

TEST_CASE("exit codes") {
  TempDir d;
  const std::string out = (d.path / "g.csv").string();
  CHECK(run_cli("--experiment geometry-audit --level 3 --out " + out) == 0);
  CHECK(run_cli("--experiment nosuch") == 2);
  CHECK(run_cli("--experiment measures --level 13 --out " + out) == 2);
  CHECK(run_cli("--experiment measures --paths 0") == 2);
  CHECK(run_cli("--help") == 0);
  // too few paths per vertex class for the adjoint regression
  CHECK(run_cli("--experiment regulator --level 2 --paths 40 --out " + out) == 1);
}

TEST_CASE("manifest sidecar echoes the config") {
  TempDir d;
  const fs::path out = d.path / "g.csv";
  REQUIRE(run_cli("--experiment geometry-audit --level 2 --seed 4 --out " + out.string()) == 0);
  const auto m = nlohmann::json::parse(slurp(out.string() + ".manifest.json"));
  CHECK(m["config"]["experiment"] == "geometry-audit");
  CHECK(m["config"]["level"] == 2);
  CHECK(m["config"]["seed"] == 4);
  CHECK(m["exit_code"] == 0);
  CHECK(m["version"].get<std::string>().rfind("0.1.0", 0) == 0);
  CHECK(m["wall_time_seconds"].get<double>() >= 0.0);
}

TEST_CASE("output is byte-identical across runs and worker counts") {
  TempDir d;
  const std::string a = (d.path / "a.csv").string();
  const std::string b = (d.path / "b.csv").string();
  const std::string common = "--experiment bracket-moments --level 3 --paths 2000 --seed 5 ";
  REQUIRE(run_cli(common + "--workers 1 --out " + a) == 0);
  REQUIRE(run_cli(common + "--workers 3 --out " + b) == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK_FALSE(slurp(a).empty());
}

TEST_CASE("level guard can be raised from the environment") {
  ::setenv("FRACTAL_CONTROL_MAX_LEVEL", "14", 1);
  CHECK(parse({"--experiment", "measures", "--level", "14"}).config.level == 14);
  ::setenv("FRACTAL_CONTROL_MAX_LEVEL", "4", 1);
  CHECK_THROWS_AS(parse({"--experiment", "measures", "--level", "5"}), UsageError);
  ::unsetenv("FRACTAL_CONTROL_MAX_LEVEL");
  CHECK_THROWS_AS(parse({"--experiment", "measures", "--level", "13"}), UsageError);
}

}

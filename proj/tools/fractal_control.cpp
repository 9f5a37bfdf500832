#include <iostream>

#include "fractal_control/experiments.hpp"

int main(int argc, char** argv) {
  fc::ParseResult parsed;
  try {
    parsed = fc::parse_config(argc, argv);
  } catch (const fc::UsageError& e) {
    std::cerr << e.what();
    return 2;
  }
  if (parsed.help) {
    std::cout << parsed.text;
    return 0;
  }
  return fc::run_experiment(parsed.config, std::cerr);
}

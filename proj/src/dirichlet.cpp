#include "fractal_control/dirichlet.hpp"

#include <cmath>
#include <ostream>

namespace fc {

GasketTower::GasketTower(int m) {
  if (m < 0) throw std::invalid_argument("GasketTower: level must be nonnegative");
  levels_.reserve(static_cast<std::size_t>(m) + 1);
  for (int j = 0; j <= m; ++j) levels_.push_back(build_pregasket(j));
}

const PreGasket& GasketTower::at(int level) const {
  if (level < 0 || level > top_level()) {
    throw std::invalid_argument("gasket tower has no level " + std::to_string(level));
  }
  return levels_[static_cast<std::size_t>(level)];
}

Rational kusuoka_cell(const Word& w) {
  const GasketTower tower(w.level());
  Rational sum(0);
  for (int i = 0; i < 3; ++i) {
    BoundaryTriple<Rational> b{Rational(0), Rational(0), Rational(0)};
    b[static_cast<std::size_t>(i)] = 1;
    sum += energy_measure_cell(harmonic_extend<Rational>(b, tower, w.level()), tower, w);
  }
  return sum / 3;
}

std::vector<double> vertex_density(const GasketTower& tower, int m) {
  std::vector<double> out;
  if (m <= kExactLevelLimit) {
    const auto t = build_measure_table<Rational>(tower, m);
    out.reserve(t.density.size());
    for (const auto& r : t.density) out.push_back(to_double(r));
  } else {
    out = build_measure_table<double>(tower, m).density;
  }
  return out;
}

std::vector<double> vertex_nu_mass(const PreGasket& g) {
  const double cell_mass = std::pow(3.0, -g.level());
  std::vector<double> out(g.vertex_count());
  for (std::size_t v = 0; v < out.size(); ++v) {
    out[v] = static_cast<double>(g.cells_of(static_cast<int>(v)).size()) * cell_mass / 3.0;
  }
  return out;
}

void write_measure_csv(std::ostream& os, const CellMeasureTable<Rational>& t, int level) {
  os << "word,nu,mu,mu1,mu2,mu3\n";
  const auto n = t.mu[static_cast<std::size_t>(level)].size();
  for (std::size_t c = 0; c < n; ++c) {
    const Word w = Word::from_index(c, level);
    os << w.str() << ',' << to_fraction_string(t.nu_of(w)) << ',' << to_fraction_string(t.mu_of(w));
    for (int i = 1; i <= 3; ++i) os << ',' << to_fraction_string(t.mu_i_of(i, w));
    os << '\n';
  }
}

}  // namespace fc

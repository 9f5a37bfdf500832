#pragma once

#include <array>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fractal_control/gasket.hpp"
#include "fractal_control/rational.hpp"

namespace fc {

/// Highest level at which measure tables are built in exact arithmetic.
inline constexpr int kExactLevelLimit = 8;

/// Pre-gaskets V_0, ..., V_m built once and shared.
class GasketTower {
 public:
  explicit GasketTower(int m);
  int top_level() const { return static_cast<int>(levels_.size()) - 1; }
  const PreGasket& at(int level) const;

 private:
  std::vector<PreGasket> levels_;
};

template <class Scalar>
using BoundaryTriple = std::array<Scalar, 3>;

template <class Scalar>
Scalar energy_scale(int level) {
  Scalar s(1);
  for (int j = 0; j < level; ++j) s = s * Scalar(5) / Scalar(3);
  return s;
}

/// Harmonic values at the midpoints (p1p2, p1p3, p2p3) of a cell as a linear
/// map of its corner values: the stationarity equations of the level-1
/// energy, solved exactly.
template <class Scalar>
Eigen::Matrix<Scalar, 3, 3> midpoint_operator() {
  Eigen::Matrix<Scalar, 3, 3> stiffness;
  stiffness << Scalar(4), Scalar(-1), Scalar(-1),
               Scalar(-1), Scalar(4), Scalar(-1),
               Scalar(-1), Scalar(-1), Scalar(4);
  // right-hand side: each midpoint couples to the two corners of its edge
  Eigen::Matrix<Scalar, 3, 3> coupling;
  coupling << Scalar(1), Scalar(1), Scalar(0),
              Scalar(1), Scalar(0), Scalar(1),
              Scalar(0), Scalar(1), Scalar(1);
  return stiffness.fullPivLu().solve(coupling);
}

/// (5/3)^m sum over edges of (u(x)-u(y))^2.
template <class Scalar>
Scalar graph_energy(const PreGasket& g, std::span<const Scalar> values) {
  if (values.size() != g.vertex_count()) {
    throw std::invalid_argument("graph_energy: expected " + std::to_string(g.vertex_count()) +
                                " vertex values at level " + std::to_string(g.level()) + ", got " +
                                std::to_string(values.size()));
  }
  Scalar sum(0);
  for (const auto& [a, b] : g.edges()) {
    const Scalar d = values[static_cast<std::size_t>(a)] - values[static_cast<std::size_t>(b)];
    sum += d * d;
  }
  return energy_scale<Scalar>(g.level()) * sum;
}

/// Energy minimizer with prescribed values on V_0, tabulated on V_0..V_m.
template <class Scalar>
class HarmonicTable {
 public:
  HarmonicTable(BoundaryTriple<Scalar> boundary, std::vector<std::vector<Scalar>> levels)
      : boundary_(std::move(boundary)), levels_(std::move(levels)) {}

  const BoundaryTriple<Scalar>& boundary() const { return boundary_; }
  int top_level() const { return static_cast<int>(levels_.size()) - 1; }
  const std::vector<Scalar>& values(int level) const {
    if (level < 0 || level > top_level()) {
      throw std::invalid_argument("harmonic table not tabulated at level " + std::to_string(level) +
                                  " (top level " + std::to_string(top_level()) + ")");
    }
    return levels_[static_cast<std::size_t>(level)];
  }

 private:
  BoundaryTriple<Scalar> boundary_;
  std::vector<std::vector<Scalar>> levels_;
};

/// Level-by-level cell-wise extension: each cell's midpoints are fixed by its
/// corners through midpoint_operator().
template <class Scalar>
HarmonicTable<Scalar> harmonic_extend(const BoundaryTriple<Scalar>& b, const GasketTower& tower, int m) {
  if (m < 0 || m > tower.top_level()) {
    throw std::invalid_argument("harmonic_extend: level " + std::to_string(m) + " outside the gasket tower");
  }
  const Eigen::Matrix<Scalar, 3, 3> mid = midpoint_operator<Scalar>();
  constexpr int kEdgeOf[3][3] = {{-1, 0, 1}, {0, -1, 2}, {1, 2, -1}};

  std::vector<std::vector<Scalar>> levels;
  levels.reserve(static_cast<std::size_t>(m) + 1);
  {
    const PreGasket& g0 = tower.at(0);
    std::vector<Scalar> v0(g0.vertex_count());
    for (std::size_t i = 0; i < 3; ++i) v0[static_cast<std::size_t>(g0.corner_ids()[i])] = b[i];
    levels.push_back(std::move(v0));
  }
  for (int j = 0; j < m; ++j) {
    const PreGasket& coarse = tower.at(j);
    const PreGasket& fine = tower.at(j + 1);
    const std::vector<Scalar>& parent = levels.back();
    std::vector<Scalar> child(fine.vertex_count());
    for (std::size_t c = 0; c < coarse.cell_count(); ++c) {
      const auto& tri = coarse.cell(c);
      Eigen::Matrix<Scalar, 3, 1> corners;
      for (int i = 0; i < 3; ++i) corners(i) = parent[static_cast<std::size_t>(tri[static_cast<std::size_t>(i)])];
      const Eigen::Matrix<Scalar, 3, 1> mids = mid * corners;
      for (int i = 0; i < 3; ++i) {
        const auto& sub = fine.cell(3 * c + static_cast<std::size_t>(i));
        for (int k = 0; k < 3; ++k) {
          child[static_cast<std::size_t>(sub[static_cast<std::size_t>(k)])] =
              (k == i) ? corners(i) : mids(kEdgeOf[i][k]);
        }
      }
    }
    levels.push_back(std::move(child));
  }
  return HarmonicTable<Scalar>(b, std::move(levels));
}

/// (5/3)^{|w|} times the sum of squared differences of h over the three
/// edges of cell w. Exact energy measure of K_w for harmonic h.
template <class Scalar>
Scalar energy_measure_cell(const HarmonicTable<Scalar>& h, const GasketTower& tower, const Word& w) {
  if (w.level() > h.top_level() || w.level() > tower.top_level()) {
    throw std::invalid_argument("energy_measure_cell: level " + std::to_string(w.level()) + " not tabulated");
  }
  const auto& values = h.values(w.level());
  const auto& tri = tower.at(w.level()).cell(w);
  const Scalar& a = values[static_cast<std::size_t>(tri[0])];
  const Scalar& b = values[static_cast<std::size_t>(tri[1])];
  const Scalar& c = values[static_cast<std::size_t>(tri[2])];
  return energy_scale<Scalar>(w.level()) * ((a - b) * (a - b) + (a - c) * (a - c) + (b - c) * (b - c));
}

/// Cell masses of nu, mu_1, mu_2, mu_3 and mu = (mu_1+mu_2+mu_3)/3 on every
/// level 0..m, plus the level-m vertex density rho_m = dmu/dnu.
template <class Scalar>
struct CellMeasureTable {
  int level = 0;
  // indexed [level][word rank]
  std::vector<std::vector<Scalar>> nu;
  std::array<std::vector<std::vector<Scalar>>, 3> mu_i;
  std::vector<std::vector<Scalar>> mu;
  // level-m vertex density, indexed by vertex id
  std::vector<Scalar> density;

  const Scalar& mu_of(const Word& w) const { return at(mu, w); }
  const Scalar& nu_of(const Word& w) const { return at(nu, w); }
  const Scalar& mu_i_of(int i, const Word& w) const { return at(mu_i[static_cast<std::size_t>(i - 1)], w); }

 private:
  const Scalar& at(const std::vector<std::vector<Scalar>>& table, const Word& w) const {
    if (w.level() > level) {
      throw std::invalid_argument("measure table built to level " + std::to_string(level) + ", word '" + w.str() +
                                  "' is deeper");
    }
    return table[static_cast<std::size_t>(w.level())][w.index()];
  }
};

template <class Scalar>
CellMeasureTable<Scalar> build_measure_table(const GasketTower& tower, int m) {
  CellMeasureTable<Scalar> t;
  t.level = m;
  std::array<HarmonicTable<Scalar>, 3> h{
      harmonic_extend<Scalar>({Scalar(1), Scalar(0), Scalar(0)}, tower, m),
      harmonic_extend<Scalar>({Scalar(0), Scalar(1), Scalar(0)}, tower, m),
      harmonic_extend<Scalar>({Scalar(0), Scalar(0), Scalar(1)}, tower, m)};
  Scalar cell_nu(1);
  for (int j = 0; j <= m; ++j) {
    const std::size_t n = tower.at(j).cell_count();
    t.nu.emplace_back(n, cell_nu);
    for (std::size_t i = 0; i < 3; ++i) t.mu_i[i].emplace_back(n);
    t.mu.emplace_back(n);
    for (std::size_t c = 0; c < n; ++c) {
      const Word w = Word::from_index(c, j);
      Scalar sum(0);
      for (std::size_t i = 0; i < 3; ++i) {
        t.mu_i[i].back()[c] = energy_measure_cell(h[i], tower, w);
        sum += t.mu_i[i].back()[c];
      }
      t.mu.back()[c] = sum / Scalar(3);
    }
    cell_nu = cell_nu / Scalar(3);
  }
  const PreGasket& g = tower.at(m);
  t.density.resize(g.vertex_count());
  for (std::size_t v = 0; v < g.vertex_count(); ++v) {
    Scalar mu_sum(0);
    Scalar nu_sum(0);
    for (std::size_t c : g.cells_of(static_cast<int>(v))) {
      mu_sum += t.mu.back()[c];
      nu_sum += t.nu.back()[c];
    }
    t.density[v] = mu_sum / nu_sum;
  }
  return t;
}

/// Kusuoka mass mu(K_w), exact.
Rational kusuoka_cell(const Word& w);

/// rho_m(v): mu-to-nu mass ratio of the level-m cells containing v.
template <class Scalar>
const Scalar& kusuoka_vertex_density(const CellMeasureTable<Scalar>& t, int v) {
  if (v < 0 || static_cast<std::size_t>(v) >= t.density.size()) {
    throw std::invalid_argument("unknown vertex id " + std::to_string(v) + " at level " + std::to_string(t.level));
  }
  return t.density[static_cast<std::size_t>(v)];
}

/// rho_m as doubles: exact arithmetic through kExactLevelLimit, doubles above.
std::vector<double> vertex_density(const GasketTower& tower, int m);

/// nu_m(v) = sum over cells containing v of nu(K_w)/3.
std::vector<double> vertex_nu_mass(const PreGasket& g);

/// CSV rows "word,nu,mu,mu1,mu2,mu3" for level-m cells, masses as num/den.
void write_measure_csv(std::ostream& os, const CellMeasureTable<Rational>& t, int level);

}  // namespace fc

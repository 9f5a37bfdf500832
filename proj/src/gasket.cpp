#include "fractal_control/gasket.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <ostream>
#include <unordered_map>

namespace fc {

int max_level() {
  const char* env = std::getenv("FRACTAL_CONTROL_MAX_LEVEL");
  if (env == nullptr || *env == '\0') return kDefaultMaxLevel;
  int value = 0;
  const std::string_view text(env);
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || value < 0) {
    throw std::invalid_argument("FRACTAL_CONTROL_MAX_LEVEL must be a nonnegative integer, got '" +
                                std::string(text) + "'");
  }
  return value;
}

Word::Word(std::string_view symbols) : symbols_(symbols) {
  for (char c : symbols_) {
    if (c < '1' || c > '3') {
      throw std::invalid_argument("word symbols must be in {1,2,3}, got '" + symbols_ + "'");
    }
  }
}

Word Word::from_index(std::size_t index, int level) {
  Word w;
  w.symbols_.assign(static_cast<std::size_t>(level), '1');
  for (int j = level - 1; j >= 0; --j) {
    w.symbols_[static_cast<std::size_t>(j)] = static_cast<char>('1' + index % 3);
    index /= 3;
  }
  return w;
}

Word Word::child(int i) const {
  if (i < 1 || i > 3) throw std::invalid_argument("child symbol must be in {1,2,3}");
  Word w = *this;
  w.symbols_.push_back(static_cast<char>('0' + i));
  return w;
}

Word Word::prefix(int level) const {
  Word w;
  w.symbols_ = symbols_.substr(0, static_cast<std::size_t>(level));
  return w;
}

std::size_t Word::index() const {
  std::size_t idx = 0;
  for (char c : symbols_) idx = idx * 3 + static_cast<std::size_t>(c - '1');
  return idx;
}

ExactPoint ExactPoint::make(std::int64_t x_num, std::int64_t y_num, int shift) {
  while (shift > 0 && x_num % 2 == 0 && y_num % 2 == 0) {
    x_num /= 2;
    y_num /= 2;
    --shift;
  }
  return ExactPoint{x_num, y_num, shift};
}

Rational ExactPoint::x() const { return Rational(x_num) / Rational(std::int64_t{1} << shift); }
Rational ExactPoint::y_sqrt3() const { return Rational(y_num) / Rational(std::int64_t{1} << shift); }
double ExactPoint::x_double() const { return std::ldexp(static_cast<double>(x_num), -shift); }
double ExactPoint::y_double() const { return std::ldexp(static_cast<double>(y_num), -shift) * std::sqrt(3.0); }

const std::array<ExactPoint, 3>& corner_points() {
  static const std::array<ExactPoint, 3> corners{
      ExactPoint{0, 0, 0}, ExactPoint{1, 0, 0}, ExactPoint{1, 1, 1}};
  return corners;
}

namespace {

ExactPoint contract(const ExactPoint& x, const ExactPoint& p) {
  const int s = std::max(x.shift, p.shift);
  const std::int64_t xn = (x.x_num << (s - x.shift)) + (p.x_num << (s - p.shift));
  const std::int64_t yn = (x.y_num << (s - x.shift)) + (p.y_num << (s - p.shift));
  return ExactPoint::make(xn, yn, s + 1);
}

std::uint64_t point_key(const ExactPoint& p, int scale_shift) {
  const auto xs = static_cast<std::uint64_t>(p.x_num << (scale_shift - p.shift));
  const auto ys = static_cast<std::uint64_t>(p.y_num << (scale_shift - p.shift));
  return (xs << 32) | ys;
}

}  // namespace

ExactPoint cell_map(const Word& w, const ExactPoint& x) {
  ExactPoint y = x;
  for (int j = w.level() - 1; j >= 0; --j) y = contract(y, corner_points()[static_cast<std::size_t>(w[j] - 1)]);
  return y;
}

Rational hausdorff_mass(const Word& w) {
  Rational mass(1);
  for (int j = 0; j < w.level(); ++j) mass /= 3;
  return mass;
}

const std::array<int, 3>& PreGasket::cell(const Word& w) const {
  if (w.level() != level_) {
    throw std::invalid_argument("word '" + w.str() + "' is not a level-" + std::to_string(level_) + " cell");
  }
  return cells_[w.index()];
}

bool PreGasket::is_corner(int v) const {
  return v == corner_ids_[0] || v == corner_ids_[1] || v == corner_ids_[2];
}

const std::vector<std::size_t>& PreGasket::cells_of(int v) const {
  if (v < 0 || static_cast<std::size_t>(v) >= vertices_.size()) {
    throw std::invalid_argument("unknown vertex id " + std::to_string(v) + " at level " + std::to_string(level_));
  }
  return vertex_cells_[static_cast<std::size_t>(v)];
}

int PreGasket::find_vertex(const ExactPoint& p) const {
  for (const auto& v : vertices_) {
    if (v.coords == p) return v.id;
  }
  return -1;
}

PreGasket build_pregasket(int m) {
  if (m < 0) throw std::invalid_argument("level must be nonnegative");
  const int limit = max_level();
  if (m > limit) {
    throw ResourceLimitError("level " + std::to_string(m) + " exceeds the maximum level " + std::to_string(limit) +
                             " (set FRACTAL_CONTROL_MAX_LEVEL to raise it)");
  }
  PreGasket g;
  g.level_ = m;
  std::size_t n_cells = 1;
  for (int j = 0; j < m; ++j) n_cells *= 3;
  const std::size_t n_vertices = (3 * n_cells + 3) / 2;
  g.vertices_.reserve(n_vertices);
  g.cells_.resize(n_cells);
  g.edges_.reserve(3 * n_cells);

  std::unordered_map<std::uint64_t, int> ids;
  ids.reserve(n_vertices * 2);
  const int scale_shift = m + 1;
  for (std::size_t c = 0; c < n_cells; ++c) {
    const Word w = Word::from_index(c, m);
    auto& tri = g.cells_[c];
    for (std::size_t i = 0; i < 3; ++i) {
      const ExactPoint p = cell_map(w, corner_points()[i]);
      auto [it, inserted] = ids.try_emplace(point_key(p, scale_shift), static_cast<int>(g.vertices_.size()));
      if (inserted) g.vertices_.push_back(Vertex{it->second, p, p.shift});
      tri[i] = it->second;
    }
    g.edges_.push_back({tri[0], tri[1]});
    g.edges_.push_back({tri[0], tri[2]});
    g.edges_.push_back({tri[1], tri[2]});
  }

  g.adjacency_.resize(g.vertices_.size());
  for (const auto& [a, b] : g.edges_) {
    g.adjacency_[static_cast<std::size_t>(a)].push_back(b);
    g.adjacency_[static_cast<std::size_t>(b)].push_back(a);
  }
  g.vertex_cells_.resize(g.vertices_.size());
  for (std::size_t c = 0; c < n_cells; ++c) {
    for (int v : g.cells_[c]) g.vertex_cells_[static_cast<std::size_t>(v)].push_back(c);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    g.corner_ids_[i] = ids.at(point_key(corner_points()[i], scale_shift));
  }
  return g;
}

std::vector<Word> cells_containing(int v, const PreGasket& g) {
  std::vector<Word> words;
  for (std::size_t c : g.cells_of(v)) words.push_back(Word::from_index(c, g.level()));
  return words;
}

void write_graph_csv(std::ostream& os, const PreGasket& g) {
  for (const auto& v : g.vertices()) {
    os << v.id << ',' << to_fraction_string(v.coords.x()) << ',' << to_fraction_string(v.coords.y_sqrt3()) << '\n';
  }
  for (const auto& [a, b] : g.edges()) os << a << ',' << b << '\n';
}

}  // namespace fc

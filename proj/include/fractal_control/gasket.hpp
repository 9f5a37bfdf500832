#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fractal_control/rational.hpp"

namespace fc {

inline constexpr int kDefaultMaxLevel = 12;

/// Level guard for pre-gasket construction. Reads FRACTAL_CONTROL_MAX_LEVEL
/// when set, otherwise kDefaultMaxLevel.
int max_level();

class ResourceLimitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Address of a gasket cell K_w: a string over {1,2,3}. The empty word is the
/// whole gasket.
class Word {
 public:
  Word() = default;
  explicit Word(std::string_view symbols);

  static Word from_index(std::size_t index, int level);

  int level() const { return static_cast<int>(symbols_.size()); }
  bool empty() const { return symbols_.empty(); }
  int operator[](int i) const { return symbols_[static_cast<std::size_t>(i)] - '0'; }
  const std::string& str() const { return symbols_; }

  Word child(int i) const;
  Word prefix(int level) const;
  /// Rank among all words of the same level in lexicographic order.
  std::size_t index() const;

  friend bool operator==(const Word&, const Word&) = default;
  friend auto operator<=>(const Word&, const Word&) = default;

 private:
  std::string symbols_;
};

/// Point of the plane with coordinates (x, y*sqrt(3)) where x and y are dyadic
/// rationals x_num/2^shift, y_num/2^shift. Kept in lowest terms so equality
/// is exact identity of points.
struct ExactPoint {
  std::int64_t x_num = 0;
  std::int64_t y_num = 0;
  int shift = 0;

  static ExactPoint make(std::int64_t x_num, std::int64_t y_num, int shift);

  Rational x() const;
  /// Coefficient of sqrt(3) in the second coordinate.
  Rational y_sqrt3() const;
  double x_double() const;
  double y_double() const;

  friend bool operator==(const ExactPoint&, const ExactPoint&) = default;
};

/// p_1, p_2, p_3 of V_0.
const std::array<ExactPoint, 3>& corner_points();

/// F_w = F_{w_1} o ... o F_{w_m} with F_i(x) = (x + p_i)/2.
ExactPoint cell_map(const Word& w, const ExactPoint& x);

/// nu(K_w) = 3^{-|w|}.
Rational hausdorff_mass(const Word& w);

struct Vertex {
  int id = 0;
  ExactPoint coords;
  int birth_level = 0;
};

/// Level-m graph approximating the gasket. Vertex ids follow the
/// lexicographic order of (word, corner) of first appearance.
class PreGasket {
 public:
  int level() const { return level_; }
  std::size_t vertex_count() const { return vertices_.size(); }
  std::size_t edge_count() const { return edges_.size(); }
  std::size_t cell_count() const { return cells_.size(); }

  const std::vector<Vertex>& vertices() const { return vertices_; }
  const std::vector<std::array<int, 2>>& edges() const { return edges_; }
  /// Corner vertex ids of cell w; corner i is F_w(p_i).
  const std::array<int, 3>& cell(const Word& w) const;
  const std::array<int, 3>& cell(std::size_t index) const { return cells_[index]; }
  const std::vector<std::array<int, 3>>& cells() const { return cells_; }
  const std::vector<int>& neighbors(int v) const { return adjacency_.at(static_cast<std::size_t>(v)); }
  int degree(int v) const { return static_cast<int>(neighbors(v).size()); }
  /// Ids of p_1, p_2, p_3.
  const std::array<int, 3>& corner_ids() const { return corner_ids_; }
  bool is_corner(int v) const;
  /// Indices (word ranks) of the one or two level-m cells containing v.
  const std::vector<std::size_t>& cells_of(int v) const;
  int find_vertex(const ExactPoint& p) const;

  friend PreGasket build_pregasket(int m);

 private:
  int level_ = 0;
  std::vector<Vertex> vertices_;
  std::vector<std::array<int, 2>> edges_;
  std::vector<std::array<int, 3>> cells_;
  std::vector<std::vector<int>> adjacency_;
  std::vector<std::vector<std::size_t>> vertex_cells_;
  std::array<int, 3> corner_ids_{};
};

/// Throws ResourceLimitError when m exceeds max_level().
PreGasket build_pregasket(int m);

/// Words of the level-m cells containing v.
std::vector<Word> cells_containing(int v, const PreGasket& g);

/// Vertex rows "id,xnum/xden,ynum/yden" (y is the sqrt(3) coefficient)
/// followed by edge rows "id1,id2".
void write_graph_csv(std::ostream& os, const PreGasket& g);

}  // namespace fc

#include <doctest.h>

#include <cstdlib>
#include <set>
#include <sstream>

#include "fractal_control/gasket.hpp"

using namespace fc;

TEST_SUITE("gasket") {

TEST_CASE("vertex, edge and cell counts through level 8") {
  std::uint64_t p3 = 3;
  for (int m = 0; m <= 8; ++m, p3 *= 3) {
    const PreGasket g = build_pregasket(m);
    CHECK(g.vertex_count() == (p3 + 3) / 2);
    CHECK(g.edge_count() == p3);
    CHECK(g.cell_count() == p3 / 3);
  }
}

TEST_CASE("level 0 is the triangle p1 p2 p3") {
  const PreGasket g = build_pregasket(0);
  REQUIRE(g.vertex_count() == 3);
  const auto& c = corner_points();
  CHECK(c[0] == ExactPoint::make(0, 0, 0));
  CHECK(c[1] == ExactPoint::make(1, 0, 0));
  CHECK(c[2] == ExactPoint::make(1, 1, 1));
  for (int i = 0; i < 3; ++i) CHECK(g.vertices()[static_cast<std::size_t>(g.corner_ids()[static_cast<std::size_t>(i)])].coords == c[static_cast<std::size_t>(i)]);
}

TEST_CASE("corners have degree 2, every other vertex degree 4") {
  for (int m = 1; m <= 5; ++m) {
    const PreGasket g = build_pregasket(m);
    for (std::size_t v = 0; v < g.vertex_count(); ++v) {
      const int id = static_cast<int>(v);
      CHECK(g.degree(id) == (g.is_corner(id) ? 2 : 4));
      CHECK(g.cells_of(id).size() == (g.is_corner(id) ? 1u : 2u));
    }
  }
}

TEST_CASE("cell vertices are mutually adjacent and edges have length 2^-m") {
  const int m = 4;
  const PreGasket g = build_pregasket(m);
  std::set<std::pair<int, int>> edges;
  for (const auto& e : g.edges()) edges.insert({std::min(e[0], e[1]), std::max(e[0], e[1])});
  CHECK(edges.size() == g.edge_count());
  for (const auto& tri : g.cells()) {
    for (int a = 0; a < 3; ++a) {
      for (int b = a + 1; b < 3; ++b) {
        const int u = tri[static_cast<std::size_t>(a)];
        const int v = tri[static_cast<std::size_t>(b)];
        CHECK(edges.count({std::min(u, v), std::max(u, v)}) == 1);
      }
    }
  }
  for (const auto& e : g.edges()) {
    const auto& p = g.vertices()[static_cast<std::size_t>(e[0])].coords;
    const auto& q = g.vertices()[static_cast<std::size_t>(e[1])].coords;
    const Rational dx = p.x() - q.x();
    const Rational dy = p.y_sqrt3() - q.y_sqrt3();
    CHECK(dx * dx + 3 * dy * dy == Rational(1, 1 << (2 * m)));
  }
}

TEST_CASE("coordinates are dyadic with denominator dividing 2^(m+1)") {
  const PreGasket g = build_pregasket(5);
  for (const auto& v : g.vertices()) {
    CHECK(v.coords.shift <= 6);
    CHECK(denominator(v.coords.x() * 64) == 1);
    CHECK(denominator(v.coords.y_sqrt3() * 64) == 1);
  }
}

TEST_CASE("level-2 vertex set matches the address enumeration oracle") {
  // (x, y/sqrt3) pairs of V_2 from enumerating all words of length 2
  const std::set<std::pair<std::string, std::string>> expected{
      {"0/1", "0/1"}, {"1/4", "0/1"}, {"1/8", "1/8"}, {"1/2", "0/1"}, {"3/8", "1/8"}, {"1/4", "1/4"},
      {"3/4", "0/1"}, {"5/8", "1/8"}, {"1/1", "0/1"}, {"7/8", "1/8"}, {"3/4", "1/4"}, {"3/8", "3/8"},
      {"5/8", "3/8"}, {"1/2", "1/2"}, {"1/2", "1/4"}};
  const PreGasket g = build_pregasket(2);
  std::set<std::pair<std::string, std::string>> got;
  for (const auto& v : g.vertices()) got.insert({to_fraction_string(v.coords.x()), to_fraction_string(v.coords.y_sqrt3())});
  CHECK(got == expected);
}

TEST_CASE("words: validation, ranks and prefixes") {
  CHECK_THROWS_AS(Word("124"), std::invalid_argument);
  CHECK(Word().empty());
  const Word w("231");
  CHECK(w.level() == 3);
  CHECK(w[0] == 2);
  CHECK(w.prefix(2) == Word("23"));
  CHECK(w.child(3) == Word("2313"));
  for (std::size_t i = 0; i < 27; ++i) CHECK(Word::from_index(i, 3).index() == i);
  CHECK(Word::from_index(0, 2) == Word("11"));
  CHECK(Word::from_index(8, 2) == Word("33"));
}

TEST_CASE("cell maps contract towards the fixed points") {
  const auto& p = corner_points();
  for (int i = 1; i <= 3; ++i) {
    const Word w(std::string(1, static_cast<char>('0' + i)));
    CHECK(cell_map(w, p[static_cast<std::size_t>(i - 1)]) == p[static_cast<std::size_t>(i - 1)]);
  }
  CHECK(cell_map(Word("12"), p[0]) == ExactPoint::make(1, 0, 2));
  CHECK(hausdorff_mass(Word("123")) == Rational(1, 27));
}

TEST_CASE("cells_containing lists one cell at a corner and two elsewhere") {
  const PreGasket g = build_pregasket(2);
  CHECK(cells_containing(g.corner_ids()[0], g) == std::vector<Word>{Word("11")});
  const int mid = g.find_vertex(ExactPoint::make(1, 0, 1));
  REQUIRE(mid >= 0);
  CHECK(cells_containing(mid, g).size() == 2);
}

TEST_CASE("level guard honours FRACTAL_CONTROL_MAX_LEVEL") {
  ::setenv("FRACTAL_CONTROL_MAX_LEVEL", "3", 1);
  CHECK(max_level() == 3);
  CHECK_NOTHROW(build_pregasket(3));
  CHECK_THROWS_AS(build_pregasket(4), ResourceLimitError);
  ::unsetenv("FRACTAL_CONTROL_MAX_LEVEL");
  CHECK(max_level() == kDefaultMaxLevel);
  CHECK_THROWS_AS(build_pregasket(-1), std::invalid_argument);
}

TEST_CASE("graph CSV has one row per vertex and per edge") {
  const PreGasket g = build_pregasket(1);
  std::ostringstream os;
  write_graph_csv(os, g);
  std::size_t lines = 0;
  for (char c : os.str()) lines += c == '\n';
  CHECK(lines == g.vertex_count() + g.edge_count());
}

}

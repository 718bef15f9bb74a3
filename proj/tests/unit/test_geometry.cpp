#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>
#include <tuple>

#include "atomkit/geometry.hpp"
#include "graph_oracle.hpp"
#include "support.hpp"

using namespace atomkit;

namespace {

using graphoracle::brute_force_edges;
using graphoracle::keys;

AtomicSystem two_atom_cubic() {
  AtomicSystem s;
  s.atom_numbers = {1, 1};
  s.lattice = Lattice::Identity() * 3.0;
  s.positions = Positions(2, 3);
  s.positions << 0, 0, 0, 1.5, 1.5, 1.5;
  return s;
}

}  // namespace

TEST(Lattice, FracCartExamples) {
  Positions s(1, 3);
  s << 0.25, 0.5, 0.75;
  EXPECT_TRUE(frac_to_cart(s, Lattice::Identity()).isApprox(s));
  Lattice d = Eigen::Vector3d(2, 3, 4).asDiagonal();
  s << 0.5, 0.5, 0.5;
  EXPECT_LT((frac_to_cart(s, d) - Eigen::RowVector3d(1.0, 1.5, 2.0)).norm(), 1e-15);
}

TEST(Lattice, RandomRoundtrip) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 3);
  for (int t = 0; t < 200; ++t) {
    Lattice L = testsupport::random_lattice(rng);
    Positions x(5, 3);
    for (int k = 0; k < 15; ++k) x(k / 3, k % 3) = n(rng);
    EXPECT_LT((frac_to_cart(cart_to_frac(x, L), L) - x).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Lattice, SingularRejected) {
  Lattice L = Lattice::Identity();
  L.row(2) = L.row(1);
  EXPECT_THROW(cart_to_frac(Positions::Zero(1, 3), L), std::invalid_argument);
  EXPECT_THROW(wrap_to_cell(Positions::Zero(1, 3), L), std::invalid_argument);
}

TEST(Lattice, VolumeTripleProduct) {
  EXPECT_DOUBLE_EQ(cell_volume(Lattice::Identity() * 3.0), 27.0);
  EXPECT_DOUBLE_EQ(cell_volume(Lattice::Identity()), 1.0);
  std::mt19937_64 rng(11);
  for (int t = 0; t < 100; ++t) {
    Lattice L = testsupport::random_lattice(rng);
    Eigen::Vector3d a = L.row(0), b = L.row(1), c = L.row(2);
    EXPECT_NEAR(cell_volume(L), std::abs(a.dot(b.cross(c))), 1e-12 * cell_volume(L));
  }
}

TEST(Wrap, Examples) {
  Lattice L = Lattice::Identity() * 3.0;
  Positions x(2, 3);
  x << 1.0, 2.0, 0.5, 4.5, -1.5, 0.0;
  auto w = wrap_to_cell(x, L);
  EXPECT_LT((w.row(0) - x.row(0)).norm(), 1e-15);
  EXPECT_LT((w.row(1) - Eigen::RowVector3d(1.5, 1.5, 0.0)).norm(), 1e-12);
}

TEST(Wrap, RandomPointsLandInCell) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-30, 30);
  Lattice L = testsupport::random_lattice(rng);
  Positions x(1000, 3);
  for (Eigen::Index k = 0; k < x.size(); ++k) x(k) = u(rng);
  auto w = wrap_to_cell(x, L);
  auto f = cart_to_frac(w, L);
  for (Eigen::Index k = 0; k < f.size(); ++k) {
    EXPECT_GE(f(k), -1e-12);
    EXPECT_LT(f(k), 1.0);
  }
  // congruent modulo the lattice
  auto d = cart_to_frac(w - x, L);
  EXPECT_LT((d.array() - d.array().round()).abs().maxCoeff(), 1e-9);
}

TEST(MolecularGraph, Examples) {
  AtomicSystem s;
  s.atom_numbers = {1, 1};
  s.positions = Positions(2, 3);
  s.positions << 0, 0, 0, 1, 0, 0;
  auto g = build_molecular_graph(s);
  ASSERT_EQ(g.edges.size(), 2u);
  EXPECT_LT((g.edges[0].displacement - Eigen::Vector3d(-1, 0, 0)).norm(), 1e-15);  // x0 - x1
  s.positions(1, 0) = 13.0;
  EXPECT_EQ(build_molecular_graph(s, 12.0).edges.size(), 0u);
}

TEST(MolecularGraph, AllPairsOracle) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 20; ++t) {
    auto s = testsupport::random_molecule(rng, 4, 5.0);
    auto g = build_molecular_graph(s, 3.0);
    std::size_t expected = 0;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j)
        if (i != j && (s.positions.row(i) - s.positions.row(j)).norm() <= 3.0) ++expected;
    EXPECT_EQ(g.edges.size(), expected);
    for (const auto& e : g.edges) {
      EXPECT_LT((e.displacement.transpose() - (s.positions.row(e.src) - s.positions.row(e.dst))).norm(), 1e-15);
    }
  }
}

TEST(MolecularGraph, TranslationLeavesDisplacements) {
  std::mt19937_64 rng(4);
  auto s = testsupport::random_molecule(rng, 5);
  auto g1 = build_molecular_graph(s);
  s.positions.rowwise() += Eigen::RowVector3d(10.0, -3.0, 2.5);
  auto g2 = build_molecular_graph(s);
  ASSERT_EQ(g1.edges.size(), g2.edges.size());
  for (std::size_t k = 0; k < g1.edges.size(); ++k) {
    EXPECT_LT((g1.edges[k].displacement - g2.edges[k].displacement).norm(), 1e-12);
  }
}

TEST(CrystalGraph, SingleAtomOnlySelfLoops) {
  AtomicSystem s;
  s.atom_numbers = {1};
  s.lattice = Lattice::Identity() * 3.0;
  s.positions = Positions::Zero(1, 3);
  auto g = build_crystal_graph(s, {12.0, 0});
  EXPECT_EQ(g.num_cutoff_edges(), 0u);
  ASSERT_EQ(g.edges.size(), 3u);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(g.edges[k].kind, EdgeKind::SelfLoop);
    EXPECT_TRUE(g.edges[k].displacement.isApprox(s.lattice->row(k).transpose()));
  }
  EXPECT_EQ(g.avg_degree, 0.0);
}

TEST(CrystalGraph, SelfImagesFlag) {
  AtomicSystem s;
  s.atom_numbers = {1};
  s.lattice = Lattice::Identity() * 3.0;
  s.positions = Positions::Zero(1, 3);
  CrystalGraphOptions opt{12.0, 0, true, true};
  EXPECT_EQ(build_crystal_graph(s, opt).num_cutoff_edges(), 26u);
}

TEST(CrystalGraph, TwoAtomBodyCentre) {
  auto s = two_atom_cubic();
  auto g = build_crystal_graph(s, {12.0, 0});
  EXPECT_EQ(g.num_cutoff_edges(), 54u);
  EXPECT_EQ(g.edges.size(), 60u);
  EXPECT_DOUBLE_EQ(g.avg_degree, 27.0);
}

TEST(CrystalGraph, CapKeepsNearest) {
  auto s = two_atom_cubic();
  auto g = build_crystal_graph(s, {12.0, 20});
  EXPECT_EQ(g.num_cutoff_edges(), 40u);
  // sort-and-truncate oracle for atom 0
  std::vector<std::pair<double, int>> d;
  for (int k = 0; k < 27; ++k) {
    Eigen::RowVector3d r = s.positions.row(0) - s.positions.row(1) + image_shifts()[k].cast<double>().transpose() * *s.lattice;
    d.emplace_back(r.norm(), k);
  }
  std::stable_sort(d.begin(), d.end());
  std::vector<int> expect_img;
  for (int k = 0; k < 20; ++k) expect_img.push_back(d[k].second);
  std::sort(expect_img.begin(), expect_img.end());
  std::vector<int> got;
  for (const auto& e : g.edges) {
    if (e.src != 0 || e.kind != EdgeKind::Cutoff) continue;
    for (int k = 0; k < 27; ++k)
      if (image_shifts()[k] == e.image) got.push_back(k);
  }
  EXPECT_EQ(got, expect_img);
}

TEST(CrystalGraph, BruteForceEquivalence) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 100; ++t) {
    auto s = testsupport::random_crystal(rng, 1 + t % 6);
    const double rc = 2.0 + (t % 7);
    auto g = build_crystal_graph(s, {rc, 0});
    EXPECT_EQ(keys(g), brute_force_edges(s, rc));
    for (const auto& e : g.edges) {
      if (e.kind == EdgeKind::Cutoff) {
        EXPECT_NE(e.src, e.dst);
        EXPECT_LE(e.length(), rc);
      }
    }
  }
}

TEST(CrystalGraph, DeterministicOrder) {
  std::mt19937_64 rng(1);
  auto s = testsupport::random_crystal(rng, 4);
  std::ostringstream a, b;
  write_edge_list(a, build_crystal_graph(s));
  write_edge_list(b, build_crystal_graph(s));
  EXPECT_EQ(a.str(), b.str());
  EXPECT_FALSE(a.str().empty());
}

TEST(CrystalGraph, MissingLattice) {
  AtomicSystem s;
  s.atom_numbers = {1};
  s.positions = Positions::Zero(1, 3);
  EXPECT_THROW(build_crystal_graph(s), std::invalid_argument);
}

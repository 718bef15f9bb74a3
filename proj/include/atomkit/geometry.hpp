#pragma once

// Lattice algebra and periodic geometric-graph construction.
//
// Conventions: positions are N x 3 (one atom per row), lattices hold lattice
// vectors as rows, fractional coordinates S map to Cartesian X = S * L.
// Edge displacements follow r_ij = x_i - x_j (+ image shift), i.e. they point
// from the neighbour j towards the centre atom i.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "atomkit/structio.hpp"

namespace atomkit {

inline constexpr double kSingularLatticeTol = 1e-12;

inline void require_invertible(const Lattice& lattice) {
  const double det = lattice.determinant();
  const double scale = lattice.rowwise().norm().prod();
  if (!std::isfinite(det) || std::abs(det) <= kSingularLatticeTol * std::max(scale, 1e-300)) {
    throw std::invalid_argument("singular lattice");
  }
}

inline Positions frac_to_cart(const Positions& frac, const Lattice& lattice) {
  require_invertible(lattice);
  return frac * lattice;
}

inline Positions cart_to_frac(const Positions& cart, const Lattice& lattice) {
  require_invertible(lattice);
  // Solve S * L = X for S, i.e. L^T S^T = X^T.
  return lattice.transpose().partialPivLu().solve(cart.transpose()).transpose();
}

inline double cell_volume(const Lattice& lattice) { return std::abs(lattice.determinant()); }

inline Positions wrap_to_cell(const Positions& cart, const Lattice& lattice) {
  Positions frac = cart_to_frac(cart, lattice);
  for (Eigen::Index i = 0; i < frac.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      double f = frac(i, c) - std::floor(frac(i, c));
      if (f >= 1.0) f = 0.0;  // floor rounding at -tiny values
      frac(i, c) = f;
    }
  }
  return frac * lattice;
}

enum class EdgeKind { Cutoff, SelfLoop };

struct Edge {
  int src = 0;  // centre atom i
  int dst = 0;  // neighbour j
  Eigen::Vector3d displacement = Eigen::Vector3d::Zero();
  EdgeKind kind = EdgeKind::Cutoff;
  Eigen::Vector3i image = Eigen::Vector3i::Zero();

  double length() const { return displacement.norm(); }
};

struct GeometricGraph {
  AtomicSystem system;
  std::vector<Edge> edges;
  double r_cut = 12.0;
  double avg_degree = 0.0;

  std::size_t num_atoms() const { return system.size(); }
  std::size_t num_cutoff_edges() const {
    return static_cast<std::size_t>(
        std::count_if(edges.begin(), edges.end(), [](const Edge& e) { return e.kind == EdgeKind::Cutoff; }));
  }
};

struct CrystalGraphOptions {
  double r_cut = 12.0;
  std::size_t max_neighbors = 20;  // per source atom; 0 means uncapped
  bool include_self_images = false;
  bool self_loops = true;
};

inline GeometricGraph build_molecular_graph(const AtomicSystem& system, double r_cut = 12.0) {
  GeometricGraph g;
  g.system = system;
  g.r_cut = r_cut;
  const int n = static_cast<int>(system.size());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      Eigen::Vector3d r = (system.positions.row(i) - system.positions.row(j)).transpose();
      if (r.norm() <= r_cut) g.edges.push_back(Edge{i, j, r, EdgeKind::Cutoff, Eigen::Vector3i::Zero()});
    }
  }
  g.avg_degree = n ? static_cast<double>(g.edges.size()) / n : 0.0;
  return g;
}

// Image shifts z in {-1,0,1}^3 in lexicographic order; index 13 is z = 0.
inline const std::array<Eigen::Vector3i, 27>& image_shifts() {
  static const std::array<Eigen::Vector3i, 27> shifts = [] {
    std::array<Eigen::Vector3i, 27> s;
    int k = 0;
    for (int a = -1; a <= 1; ++a)
      for (int b = -1; b <= 1; ++b)
        for (int c = -1; c <= 1; ++c) s[k++] = Eigen::Vector3i(a, b, c);
    return s;
  }();
  return shifts;
}

inline GeometricGraph build_crystal_graph(const AtomicSystem& system, const CrystalGraphOptions& opt = {}) {
  if (!system.lattice) throw std::invalid_argument("build_crystal_graph requires a lattice");
  const Lattice& lat = *system.lattice;
  const auto& shifts = image_shifts();
  GeometricGraph g;
  g.system = system;
  g.r_cut = opt.r_cut;
  const int n = static_cast<int>(system.size());

  struct Candidate {
    double dist;
    int j;
    int image;
    Eigen::Vector3d r;
  };
  std::size_t cutoff_count = 0;
  std::vector<Candidate> cand;
  for (int i = 0; i < n; ++i) {
    cand.clear();
    for (int k = 0; k < 27; ++k) {
      const Eigen::RowVector3d shift = shifts[k].cast<double>().transpose() * lat;
      for (int j = 0; j < n; ++j) {
        if (i == j && (!opt.include_self_images || k == 13)) continue;
        Eigen::Vector3d r = (system.positions.row(i) - system.positions.row(j) + shift).transpose();
        const double d = r.norm();
        if (d <= opt.r_cut) cand.push_back(Candidate{d, j, k, r});
      }
    }
    if (opt.max_neighbors > 0 && cand.size() > opt.max_neighbors) {
      std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
        if (a.dist != b.dist) return a.dist < b.dist;
        if (a.j != b.j) return a.j < b.j;
        return a.image < b.image;
      });
      cand.resize(opt.max_neighbors);
    }
    std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
      if (a.image != b.image) return a.image < b.image;
      return a.j < b.j;
    });
    for (const auto& c : cand) g.edges.push_back(Edge{i, c.j, c.r, EdgeKind::Cutoff, shifts[c.image]});
    cutoff_count += cand.size();
    if (opt.self_loops) {
      for (int k = 0; k < 3; ++k) {
        Eigen::Vector3i e = Eigen::Vector3i::Zero();
        e(k) = 1;
        g.edges.push_back(Edge{i, i, lat.row(k).transpose(), EdgeKind::SelfLoop, e});
      }
    }
  }
  g.avg_degree = n ? static_cast<double>(cutoff_count) / n : 0.0;
  return g;
}

inline GeometricGraph build_graph(const AtomicSystem& system, const CrystalGraphOptions& opt = {}) {
  return system.periodic() ? build_crystal_graph(system, opt) : build_molecular_graph(system, opt.r_cut);
}

// Debug dump: one line per edge, "i j dx dy dz kind".
inline void write_edge_list(std::ostream& out, const GeometricGraph& g) {
  for (const auto& e : g.edges) {
    out << e.src << ' ' << e.dst << ' ' << detail::format_double(e.displacement.x()) << ' '
        << detail::format_double(e.displacement.y()) << ' ' << detail::format_double(e.displacement.z()) << ' '
        << (e.kind == EdgeKind::Cutoff ? "cutoff" : "self_loop") << '\n';
  }
}

}  // namespace atomkit

#pragma once

// Shared generators for tests: random rotations, random periodic systems.

#include <Eigen/Dense>

#include <random>
#include <vector>

#include "atomkit/structio.hpp"

namespace testsupport {

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Matrix3d a;
  for (int i = 0; i < 9; ++i) a(i / 3, i % 3) = n(rng);
  Eigen::HouseholderQR<Eigen::Matrix3d> qr(a);
  Eigen::Matrix3d q = qr.householderQ();
  if (q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

inline Eigen::Vector3d random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Vector3d v(n(rng), n(rng), n(rng));
  return v.normalized();
}

// Random right-handed, reasonably conditioned lattice with lengths in [lo, hi].
inline atomkit::Lattice random_lattice(std::mt19937_64& rng, double lo = 3.0, double hi = 6.0) {
  std::uniform_real_distribution<double> len(lo, hi), skew(-0.25, 0.25);
  atomkit::Lattice l = atomkit::Lattice::Zero();
  for (int r = 0; r < 3; ++r) {
    l(r, r) = len(rng);
    for (int c = 0; c < 3; ++c) {
      if (c != r) l(r, c) = skew(rng) * l(r, r);
    }
  }
  if (l.determinant() < 0) l.row(0) *= -1.0;
  return l;
}

inline atomkit::AtomicSystem random_crystal(std::mt19937_64& rng, int n, double lo = 3.0, double hi = 6.0,
                                            std::vector<int> species = {1, 6, 8, 26}) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, species.size() - 1);
  atomkit::AtomicSystem s;
  s.lattice = random_lattice(rng, lo, hi);
  s.positions.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    s.atom_numbers.push_back(species[pick(rng)]);
    Eigen::RowVector3d f(u(rng), u(rng), u(rng));
    s.positions.row(i) = f * *s.lattice;
  }
  return s;
}

inline atomkit::AtomicSystem random_molecule(std::mt19937_64& rng, int n, double box = 4.0,
                                             std::vector<int> species = {1, 6, 8}) {
  std::uniform_real_distribution<double> u(0.0, box);
  std::uniform_int_distribution<std::size_t> pick(0, species.size() - 1);
  atomkit::AtomicSystem s;
  s.positions.resize(n, 3);
  for (int i = 0; i < n; ++i) {
    s.atom_numbers.push_back(species[pick(rng)]);
    s.positions.row(i) = Eigen::RowVector3d(u(rng), u(rng), u(rng));
  }
  return s;
}

}  // namespace testsupport

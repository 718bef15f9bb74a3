#pragma once

// Real spherical harmonics, Wigner-D matrices in the real basis, edge-aligned
// rotation frames and the discretized S^2 grid used by the grid activation.
//
// Basis convention: orthonormal real harmonics without the Condon-Shortley
// phase, coefficient index k = l*l + l + m with m running -l..l. For l = 1
// this gives (Y_{1,-1}, Y_{1,0}, Y_{1,1}) proportional to (y, z, x).
// Rotations are active: coefficients of a rotated signal are D(R) * c, and
// Y_l(R v) = D_l(R) Y_l(v).

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace atomkit {

inline constexpr int kMaxDegree = 6;

inline constexpr int sh_index(int l, int m) { return l * l + l + m; }
inline constexpr int sh_size(int lmax) { return (lmax + 1) * (lmax + 1); }

// All real harmonics up to degree lmax at unit direction v, in sh_index order.
inline Eigen::VectorXd real_sph_harm_all(int lmax, const Eigen::Vector3d& v) {
  if (lmax < 0 || lmax > kMaxDegree) throw std::invalid_argument("degree out of supported range");
  const double x = v.x(), y = v.y(), z = v.z();
  Eigen::VectorXd out(sh_size(lmax));
  // Q[l][m] = P_l^m(z) / sin^m(theta), no Condon-Shortley phase.
  double q[kMaxDegree + 1][kMaxDegree + 1] = {};
  for (int m = 0; m <= lmax; ++m) {
    double qmm = 1.0;
    for (int k = 1; k <= m; ++k) qmm *= (2.0 * k - 1.0);
    q[m][m] = qmm;
    if (m + 1 <= lmax) q[m + 1][m] = z * (2.0 * m + 1.0) * qmm;
    for (int l = m + 2; l <= lmax; ++l) {
      q[l][m] = ((2.0 * l - 1.0) * z * q[l - 1][m] - (l + m - 1.0) * q[l - 2][m]) / (l - m);
    }
  }
  // (x + i y)^m = sin^m(theta) e^{i m phi}
  std::complex<double> pw(1.0, 0.0);
  std::complex<double> xy(x, y);
  std::complex<double> powers[kMaxDegree + 1];
  for (int m = 0; m <= lmax; ++m) {
    powers[m] = pw;
    pw *= xy;
  }
  for (int l = 0; l <= lmax; ++l) {
    for (int m = 0; m <= l; ++m) {
      double ratio = 1.0;  // (l-m)!/(l+m)!
      for (int k = l - m + 1; k <= l + m; ++k) ratio /= k;
      const double norm = std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi) * ratio);
      if (m == 0) {
        out(sh_index(l, 0)) = norm * q[l][0];
      } else {
        out(sh_index(l, m)) = std::numbers::sqrt2 * norm * q[l][m] * powers[m].real();
        out(sh_index(l, -m)) = std::numbers::sqrt2 * norm * q[l][m] * powers[m].imag();
      }
    }
  }
  return out;
}

inline double real_sph_harm(int l, int m, const Eigen::Vector3d& direction) {
  if (l < 0 || std::abs(m) > l) throw std::invalid_argument("spherical harmonic requires |m| <= l");
  return real_sph_harm_all(l, direction)(sh_index(l, m));
}

namespace detail {

// Ivanic-Ruedenberg recursion helper; prev holds D_{l-1}, r1 holds D_1, both
// indexed with offsets so that entry (m, m') sits at (m + l, m' + l).
inline double ir_p(int i, int l, int a, int b, const Eigen::MatrixXd& r1, const Eigen::MatrixXd& prev) {
  const int lp = l - 1;
  auto R = [&](int u, int v) { return r1(u + 1, v + 1); };
  auto P = [&](int u, int v) { return prev(u + lp, v + lp); };
  if (b == l) return R(i, 1) * P(a, l - 1) - R(i, -1) * P(a, -l + 1);
  if (b == -l) return R(i, 1) * P(a, -l + 1) + R(i, -1) * P(a, l - 1);
  return R(i, 0) * P(a, b);
}

}  // namespace detail

inline std::vector<Eigen::MatrixXd> wigner_d_all(int lmax, const Eigen::Matrix3d& rotation) {
  if (lmax < 0 || lmax > kMaxDegree) throw std::invalid_argument("degree out of supported range");
  const Eigen::Matrix3d should_be_identity = rotation.transpose() * rotation;
  if ((should_be_identity - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-8 ||
      std::abs(rotation.determinant() - 1.0) > 1e-8) {
    throw std::invalid_argument("wigner_d requires a proper orthonormal rotation");
  }
  std::vector<Eigen::MatrixXd> out;
  out.push_back(Eigen::MatrixXd::Ones(1, 1));
  if (lmax == 0) return out;
  // Real l=1 basis is (y, z, x).
  const int perm[3] = {1, 2, 0};
  Eigen::MatrixXd r1(3, 3);
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) r1(a, b) = rotation(perm[a], perm[b]);
  out.push_back(r1);
  for (int l = 2; l <= lmax; ++l) {
    const Eigen::MatrixXd& prev = out.back();
    Eigen::MatrixXd d(2 * l + 1, 2 * l + 1);
    for (int m = -l; m <= l; ++m) {
      for (int mp = -l; mp <= l; ++mp) {
        const double denom = (std::abs(mp) < l) ? double((l + mp) * (l - mp)) : double((2 * l) * (2 * l - 1));
        const int am = std::abs(m);
        const double d_m0 = (m == 0) ? 1.0 : 0.0;
        const double u = std::sqrt((l + m) * (l - m) / denom);
        const double v = 0.5 * std::sqrt((1.0 + d_m0) * (l + am - 1.0) * (l + am) / denom) * (1.0 - 2.0 * d_m0);
        const double w = -0.5 * std::sqrt((l - am - 1.0) * (l - am) / denom) * (1.0 - d_m0);
        double val = 0.0;
        if (u != 0.0) val += u * detail::ir_p(0, l, m, mp, r1, prev);
        if (v != 0.0) {
          double vv;
          if (m == 0) {
            vv = detail::ir_p(1, l, 1, mp, r1, prev) + detail::ir_p(-1, l, -1, mp, r1, prev);
          } else if (m > 0) {
            const double d1 = (m == 1) ? 1.0 : 0.0;
            vv = detail::ir_p(1, l, m - 1, mp, r1, prev) * std::sqrt(1.0 + d1) -
                 detail::ir_p(-1, l, -m + 1, mp, r1, prev) * (1.0 - d1);
          } else {
            const double d1 = (m == -1) ? 1.0 : 0.0;
            vv = detail::ir_p(1, l, m + 1, mp, r1, prev) * (1.0 - d1) +
                 detail::ir_p(-1, l, -m - 1, mp, r1, prev) * std::sqrt(1.0 + d1);
          }
          val += v * vv;
        }
        if (w != 0.0) {
          double ww;
          if (m > 0) {
            ww = detail::ir_p(1, l, m + 1, mp, r1, prev) + detail::ir_p(-1, l, -m - 1, mp, r1, prev);
          } else {
            ww = detail::ir_p(1, l, m - 1, mp, r1, prev) - detail::ir_p(-1, l, -m + 1, mp, r1, prev);
          }
          val += w * ww;
        }
        d(m + l, mp + l) = val;
      }
    }
    out.push_back(std::move(d));
  }
  return out;
}

inline Eigen::MatrixXd wigner_d(int l, const Eigen::Matrix3d& rotation) { return wigner_d_all(l, rotation).back(); }

// Block-diagonal Wigner-D over all degrees 0..lmax, size sh_size(lmax).
inline Eigen::MatrixXd wigner_d_block(int lmax, const Eigen::Matrix3d& rotation) {
  auto blocks = wigner_d_all(lmax, rotation);
  const int k = sh_size(lmax);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(k, k);
  for (int l = 0; l <= lmax; ++l) d.block(l * l, l * l, 2 * l + 1, 2 * l + 1) = blocks[static_cast<std::size_t>(l)];
  return d;
}

// Rows of the returned matrix are the frame axes; the third row is the edge
// direction, so the matrix rotates the edge direction onto +z.
inline Eigen::Matrix3d rotation_from_edge(const Eigen::Vector3d& edge, const Eigen::Vector3d& aux = Eigen::Vector3d(0, 1, 0)) {
  const double len = edge.norm();
  if (!(len > 0.0) || !std::isfinite(len)) throw std::invalid_argument("rotation_from_edge: zero-length edge");
  const Eigen::Vector3d e3 = edge / len;
  auto parallel = [&](const Eigen::Vector3d& a) {
    const double an = a.norm();
    return !(an > 0.0) || std::abs(e3.dot(a) / an) > 1.0 - 1e-6;
  };
  Eigen::Vector3d helper = aux;
  if (parallel(helper)) helper = Eigen::Vector3d(0, 1, 0);
  if (parallel(helper)) helper = Eigen::Vector3d(1, 0, 0);
  const Eigen::Vector3d e1 = e3.cross(helper).normalized();
  const Eigen::Vector3d e2 = e3.cross(e1);
  Eigen::Matrix3d frame;
  frame.row(0) = e1.transpose();
  frame.row(1) = e2.transpose();
  frame.row(2) = e3.transpose();
  return frame;
}

// Uniform R x R grid over (theta, phi) with Fejer-type polar weights, which
// integrate polynomials in cos(theta) of degree < R exactly.
struct SphericalGrid {
  int resolution = 2;
  std::vector<double> theta;    // per point
  std::vector<double> phi;      // per point
  std::vector<double> weights;  // per point, sum to 4*pi

  explicit SphericalGrid(int r = 2) : resolution(r) {
    if (r < 1) throw std::invalid_argument("grid resolution must be >= 1");
    const double pi = std::numbers::pi;
    std::vector<double> polar(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
      const double t = (i + 0.5) * pi / r;
      double s = 0.0;
      for (int k = 1; k <= r / 2; ++k) s += std::cos(2.0 * k * t) / (4.0 * k * k - 1.0);
      polar[static_cast<std::size_t>(i)] = (2.0 / r) * (1.0 - 2.0 * s);
    }
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < r; ++j) {
        theta.push_back((i + 0.5) * pi / r);
        phi.push_back(j * 2.0 * pi / r);
        weights.push_back(polar[static_cast<std::size_t>(i)] * 2.0 * pi / r);
      }
    }
  }

  std::size_t size() const { return weights.size(); }

  Eigen::Vector3d direction(std::size_t k) const {
    return Eigen::Vector3d(std::sin(theta[k]) * std::cos(phi[k]), std::sin(theta[k]) * std::sin(phi[k]), std::cos(theta[k]));
  }
};

// Debug dump: "theta phi weight" per point.
inline void write_grid(std::ostream& out, const SphericalGrid& grid) {
  out.precision(17);
  for (std::size_t k = 0; k < grid.size(); ++k) out << grid.theta[k] << ' ' << grid.phi[k] << ' ' << grid.weights[k] << '\n';
}

// Spectral <-> spatial transforms for a fixed (lmax, grid) pair.
struct GridTransform {
  int lmax = 0;
  int resolution = 0;
  Eigen::MatrixXd to;    // points x coefficients
  Eigen::MatrixXd from;  // coefficients x points (quadrature projection)

  GridTransform(int l, const SphericalGrid& grid) : lmax(l), resolution(grid.resolution) {
    const auto p = static_cast<Eigen::Index>(grid.size());
    to.resize(p, sh_size(l));
    for (Eigen::Index k = 0; k < p; ++k) {
      to.row(k) = real_sph_harm_all(l, grid.direction(static_cast<std::size_t>(k))).transpose();
    }
    from = to.transpose();
    for (Eigen::Index k = 0; k < p; ++k) from.col(k) *= grid.weights[static_cast<std::size_t>(k)];
  }
};

inline std::shared_ptr<const GridTransform> grid_transform(int lmax, int resolution) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, std::shared_ptr<const GridTransform>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_pair(lmax, resolution);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto t = std::make_shared<const GridTransform>(lmax, SphericalGrid(resolution));
  cache.emplace(key, t);
  return t;
}

// block: sh_size(L) x C coefficients. Returns points x C.
inline Eigen::MatrixXd to_grid(const Eigen::MatrixXd& block, const SphericalGrid& grid, int lmax) {
  return GridTransform(lmax, grid).to * block;
}

inline Eigen::MatrixXd from_grid(const Eigen::MatrixXd& signal, const SphericalGrid& grid, int lmax) {
  return GridTransform(lmax, grid).from * signal;
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

// Separable grid activation on one block (sh_size(L) x C). Channels
// [0, direct_channels) carry scalars only and get a pointwise SiLU on their
// l=0 coefficient; the remaining channels go spectral -> grid -> SiLU ->
// spectral over all degrees.
inline Eigen::MatrixXd s2_activation(const Eigen::MatrixXd& block, const SphericalGrid& grid, int lmax, int direct_channels) {
  const GridTransform t(lmax, grid);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(block.rows(), block.cols());
  for (Eigen::Index c = 0; c < block.cols(); ++c) {
    if (c < direct_channels) {
      out(0, c) = silu(block(0, c));
    } else {
      Eigen::VectorXd s = t.to * block.col(c);
      for (Eigen::Index k = 0; k < s.size(); ++k) s(k) = silu(s(k));
      out.col(c) = t.from * s;
    }
  }
  return out;
}

}  // namespace atomkit

#pragma once

// Evaluation metrics: regression errors, R^2, binary classification with
// rank AUC, and a tolerance-based periodic structure matcher.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "atomkit/geometry.hpp"
#include "atomkit/structio.hpp"

namespace atomkit {

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}

}  // namespace detail

// eV totals in, meV/atom out.
inline double mae_energy_per_atom(const std::vector<double>& preds, const std::vector<double>& truths,
                                  const std::vector<int>& atom_counts) {
  detail::require_same_length(preds.size(), truths.size(), "mae_energy_per_atom");
  detail::require_same_length(preds.size(), atom_counts.size(), "mae_energy_per_atom");
  if (preds.empty()) throw std::invalid_argument("mae_energy_per_atom: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (atom_counts[i] <= 0) throw std::invalid_argument("mae_energy_per_atom: atom count must be positive");
    s += std::abs(preds[i] - truths[i]) / atom_counts[i];
  }
  return 1000.0 * s / static_cast<double>(preds.size());
}

inline double mae_property(const std::vector<double>& preds, const std::vector<double>& truths) {
  detail::require_same_length(preds.size(), truths.size(), "mae_property");
  if (preds.empty()) throw std::invalid_argument("mae_property: no samples");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += std::abs(preds[i] - truths[i]);
  return s / static_cast<double>(preds.size());
}

// RMSE over all M*D scalar components; rows are samples (or atoms).
inline double rmse_components(const Eigen::MatrixXd& preds, const Eigen::MatrixXd& truths, int d) {
  if (d != 1 && d != 3) throw std::invalid_argument("rmse_components: D must be 1 or 3");
  if (preds.rows() != truths.rows() || preds.cols() != truths.cols() || preds.cols() != d)
    throw std::invalid_argument("rmse_components: shape mismatch");
  if (preds.size() == 0) throw std::invalid_argument("rmse_components: no samples");
  return std::sqrt((preds - truths).squaredNorm() / static_cast<double>(preds.size()));
}

inline double r_squared(const std::vector<double>& preds, const std::vector<double>& truths) {
  detail::require_same_length(preds.size(), truths.size(), "r_squared");
  if (truths.size() < 2) throw std::invalid_argument("r_squared: need at least 2 samples");
  const double mean = std::accumulate(truths.begin(), truths.end(), 0.0) / static_cast<double>(truths.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    ss_res += (truths[i] - preds[i]) * (truths[i] - preds[i]);
    ss_tot += (truths[i] - mean) * (truths[i] - mean);
  }
  if (ss_tot == 0.0) throw std::invalid_argument("r_squared: truths have zero variance");
  return 1.0 - ss_res / ss_tot;
}

struct ConfusionCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

struct ClassificationReport {
  ConfusionCounts counts;
  double precision = 0.0, recall = 0.0, f1 = 0.0, accuracy = 0.0;
  double auc = 0.0;
};

// Precision/recall/F1 from counts; an empty denominator gives 0.
inline void fill_rates(ClassificationReport& r) {
  const auto& c = r.counts;
  r.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  r.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  const long n = c.tp + c.fp + c.fn + c.tn;
  r.accuracy = n > 0 ? static_cast<double>(c.tp + c.tn) / static_cast<double>(n) : 0.0;
}

inline ClassificationReport rates_from_counts(const ConfusionCounts& c) {
  ClassificationReport r;
  r.counts = c;
  fill_rates(r);
  return r;
}

// Mann-Whitney statistic with mid-ranks; ties between a positive and a
// negative earn half credit.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  detail::require_same_length(scores.size(), labels.size(), "roc_auc");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;  // ranks doubled to stay integral
  long npos = 0, nneg = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid2 = static_cast<double>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) pos_rank_sum += mid2;
    i = j;
  }
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("roc_auc: labels must be 0 or 1");
    (y ? npos : nneg)++;
  }
  if (npos == 0 || nneg == 0) throw std::invalid_argument("roc_auc: undefined for a single-class label set");
  const double u2 = pos_rank_sum - static_cast<double>(npos) * static_cast<double>(npos + 1);
  return u2 / (2.0 * static_cast<double>(npos) * static_cast<double>(nneg));
}

// Predicted positive when score > threshold.
inline ClassificationReport classification_metrics(const std::vector<double>& scores, const std::vector<int>& labels,
                                                   double threshold = 0.5) {
  detail::require_same_length(scores.size(), labels.size(), "classification_metrics");
  ClassificationReport r;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw std::invalid_argument("classification_metrics: non-finite score");
    const bool pred = scores[i] > threshold;
    if (labels[i] == 1) (pred ? r.counts.tp : r.counts.fn)++;
    else if (labels[i] == 0) (pred ? r.counts.fp : r.counts.tn)++;
    else throw std::invalid_argument("classification_metrics: labels must be 0 or 1");
  }
  fill_rates(r);
  r.auc = roc_auc(scores, labels);
  return r;
}

// ---------------------------------------------------------------------------
// Structure matching

struct MatchTolerances {
  double stol = 0.5;
  double angle_tol = 10.0;  // degrees
  double ltol = 0.3;

  void validate() const {
    if (!(stol > 0) || !(angle_tol > 0) || !(ltol > 0)) throw std::invalid_argument("match tolerances must be positive");
  }
};

struct MatchReport {
  bool matched = false;
  std::optional<double> site_rmse_normalized;
  bool composition_ok = false;
  bool lattice_ok = false;
  bool sites_ok = false;
  double length_deviation = std::numeric_limits<double>::infinity();  // best max relative length error
  double angle_deviation = std::numeric_limits<double>::infinity();   // degrees
  double max_site_displacement = std::numeric_limits<double>::infinity();  // normalized
  std::string reason;
};

namespace detail {

inline std::array<double, 6> lattice_parameters(const Lattice& l) {
  const Eigen::Vector3d a = l.row(0), b = l.row(1), c = l.row(2);
  auto ang = [](const Eigen::Vector3d& u, const Eigen::Vector3d& v) {
    return std::acos(std::clamp(u.dot(v) / (u.norm() * v.norm()), -1.0, 1.0)) * 180.0 / M_PI;
  };
  return {a.norm(), b.norm(), c.norm(), ang(b, c), ang(a, c), ang(a, b)};
}

// Greedy length reduction followed by the Niggli sign convention (all
// pairwise dot products positive, or all non-positive) and right-handedness.
inline Lattice reduce_lattice(const Lattice& in) {
  require_invertible(in);
  Lattice b = in;
  const double scale = b.rowwise().squaredNorm().maxCoeff();
  auto shorter = [&](const Eigen::RowVector3d& cand, const Eigen::RowVector3d& cur) {
    return cand.squaredNorm() < cur.squaredNorm() - 1e-12 * scale;
  };
  for (int iter = 0; iter < 1000; ++iter) {
    std::array<int, 3> idx{0, 1, 2};
    std::sort(idx.begin(), idx.end(), [&](int x, int y) { return b.row(x).squaredNorm() < b.row(y).squaredNorm(); });
    Lattice s;
    for (int k = 0; k < 3; ++k) s.row(k) = b.row(idx[static_cast<std::size_t>(k)]);
    b = s;
    bool changed = false;
    for (int i = 1; i < 3; ++i) {
      for (int j = 0; j < i; ++j) {
        const double mu = std::round(b.row(i).dot(b.row(j)) / b.row(j).squaredNorm());
        if (mu == 0.0) continue;
        const Eigen::RowVector3d cand = b.row(i) - mu * b.row(j);
        if (shorter(cand, b.row(i))) {
          b.row(i) = cand;
          changed = true;
        }
      }
    }
    for (int sa = -1; sa <= 1; ++sa) {
      for (int sb = -1; sb <= 1; ++sb) {
        const Eigen::RowVector3d cand = b.row(2) + sa * b.row(0) + sb * b.row(1);
        if (shorter(cand, b.row(2))) {
          b.row(2) = cand;
          changed = true;
        }
      }
    }
    if (!changed) break;
  }
  const double ab = b.row(0).dot(b.row(1)), ac = b.row(0).dot(b.row(2)), bc = b.row(1).dot(b.row(2));
  if (ab * ac * bc > 0) {
    if (ab < 0 && ac < 0) b.row(0) *= -1;
    else if (ab < 0 && bc < 0) b.row(1) *= -1;
    else if (ac < 0 && bc < 0) b.row(2) *= -1;
  } else if (ab * ac * bc < 0) {
    if (ab > 0 && ac > 0) b.row(0) *= -1;
    else if (ab > 0 && bc > 0) b.row(1) *= -1;
    else if (ac > 0 && bc > 0) b.row(2) *= -1;
  }
  if (b.determinant() < 0) b = -b;
  return b;
}

// Minimum-cost perfect assignment on a square matrix; returns row -> column.
inline std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0), v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = 0;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n));
  for (int j = 1; j <= n; ++j) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

inline std::map<int, int> reduced_counts(const std::vector<int>& z) {
  std::map<int, int> c;
  for (int x : z) c[x]++;
  int g = 0;
  for (const auto& [k, n] : c) g = std::gcd(g, n);
  if (g > 1)
    for (auto& [k, n] : c) n /= g;
  return c;
}

// Shortest periodic image of a fractional displacement under metric g.
inline Eigen::RowVector3d min_image(Eigen::RowVector3d d, const Eigen::Matrix3d& g) {
  for (int k = 0; k < 3; ++k) d(k) -= std::round(d(k));
  Eigen::RowVector3d best = d;
  double best2 = d * g * d.transpose();
  for (const auto& s : image_shifts()) {
    const Eigen::RowVector3d cand = d + s.cast<double>().transpose();
    const double c2 = cand * g * cand.transpose();
    if (c2 < best2) {
      best2 = c2;
      best = cand;
    }
  }
  return best;
}

struct SiteFit {
  double rmse = std::numeric_limits<double>::infinity();
  double max_disp = std::numeric_limits<double>::infinity();
};

// Best anchored-translation assignment of s2 sites onto s1 sites given
// fractional coordinates in bases sharing (approximately) one metric.
inline SiteFit fit_sites(const std::vector<int>& z1, const Positions& f1, const std::vector<int>& z2, const Positions& f2,
                         const Eigen::Matrix3d& g, double norm, double stol) {
  const std::size_t n = z1.size();
  std::map<int, std::vector<std::size_t>> by1, by2;
  for (std::size_t i = 0; i < n; ++i) {
    by1[z1[i]].push_back(i);
    by2[z2[i]].push_back(i);
  }
  int anchor_z = by1.begin()->first;
  for (const auto& [z, v] : by1)
    if (v.size() < by1[anchor_z].size()) anchor_z = z;
  const std::size_t anchor = by1[anchor_z].front();

  auto evaluate = [&](const Eigen::RowVector3d& t, std::vector<std::size_t>& perm) {
    // perm[i] = s2 index assigned to s1 site i
    for (const auto& [z, rows] : by1) {
      const auto& cols = by2[z];
      Eigen::MatrixXd cost(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
      for (std::size_t a = 0; a < rows.size(); ++a) {
        for (std::size_t b = 0; b < cols.size(); ++b) {
          const Eigen::RowVector3d d = min_image(f2.row(static_cast<Eigen::Index>(cols[b])) + t - f1.row(static_cast<Eigen::Index>(rows[a])), g);
          cost(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = d * g * d.transpose();
        }
      }
      const auto assign = hungarian(cost);
      for (std::size_t a = 0; a < rows.size(); ++a) perm[rows[a]] = cols[static_cast<std::size_t>(assign[a])];
    }
  };
  auto displacements = [&](const Eigen::RowVector3d& t, const std::vector<std::size_t>& perm) {
    Positions d(static_cast<Eigen::Index>(n), 3);
    for (std::size_t i = 0; i < n; ++i)
      d.row(static_cast<Eigen::Index>(i)) = min_image(f2.row(static_cast<Eigen::Index>(perm[i])) + t - f1.row(static_cast<Eigen::Index>(i)), g);
    return d;
  };
  auto score = [&](const Positions& d) {
    SiteFit s;
    double sum2 = 0.0, mx = 0.0;
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      const double r2 = d.row(i) * g * d.row(i).transpose();
      sum2 += r2;
      mx = std::max(mx, std::sqrt(r2));
    }
    s.rmse = std::sqrt(sum2 / static_cast<double>(d.rows())) / norm;
    s.max_disp = mx / norm;
    return s;
  };

  SiteFit best;
  bool best_ok = false;
  for (std::size_t j : by2[anchor_z]) {
    Eigen::RowVector3d t = f1.row(static_cast<Eigen::Index>(anchor)) - f2.row(static_cast<Eigen::Index>(j));
    std::vector<std::size_t> perm(n);
    evaluate(t, perm);
    // least-squares translation refinement, then one re-assignment
    for (int pass = 0; pass < 2; ++pass) {
      const Positions d = displacements(t, perm);
      t -= d.colwise().mean();
      if (pass == 0) evaluate(t, perm);
    }
    const SiteFit s = score(displacements(t, perm));
    const bool ok = s.max_disp <= stol;
    if ((ok && (!best_ok || s.rmse < best.rmse)) || (!best_ok && !ok && s.max_disp < best.max_disp)) {
      best = s;
      best_ok = ok;
    }
  }
  return best;
}

struct DirectedResult {
  bool lattice_ok = false;
  bool sites_ok = false;
  double rmse = std::numeric_limits<double>::infinity();
  double max_disp = std::numeric_limits<double>::infinity();
  double length_dev = std::numeric_limits<double>::infinity();
  double angle_dev = std::numeric_limits<double>::infinity();
};

// Fix the reduced basis of s1; search unimodular bases of s2 whose lengths
// and angles agree, then fit sites in each.
inline DirectedResult match_directed(const AtomicSystem& s1, const AtomicSystem& s2, const MatchTolerances& tol) {
  DirectedResult out;
  const Lattice l1 = reduce_lattice(*s1.lattice);
  const Lattice l2 = reduce_lattice(*s2.lattice);
  const auto p1 = lattice_parameters(l1);
  auto rel = [](double x, double y) { return std::abs(x - y) / std::min(x, y); };

  struct Vec {
    Eigen::Vector3i n;
    Eigen::RowVector3d v;
    double len;
  };
  std::vector<Vec> vecs;
  constexpr int kRange = 2;
  for (int a = -kRange; a <= kRange; ++a)
    for (int b = -kRange; b <= kRange; ++b)
      for (int c = -kRange; c <= kRange; ++c) {
        if (a == 0 && b == 0 && c == 0) continue;
        Eigen::Vector3i n(a, b, c);
        Eigen::RowVector3d v = n.cast<double>().transpose() * l2;
        vecs.push_back({n, v, v.norm()});
      }
  std::array<std::vector<const Vec*>, 3> pick;
  for (const auto& v : vecs)
    for (int k = 0; k < 3; ++k)
      if (rel(v.len, p1[static_cast<std::size_t>(k)]) <= tol.ltol) pick[static_cast<std::size_t>(k)].push_back(&v);

  // diagnostics when nothing qualifies: compare reduced cells directly
  {
    const auto p2 = lattice_parameters(l2);
    out.length_dev = std::max({rel(p1[0], p2[0]), rel(p1[1], p2[1]), rel(p1[2], p2[2])});
    out.angle_dev = std::max({std::abs(p1[3] - p2[3]), std::abs(p1[4] - p2[4]), std::abs(p1[5] - p2[5])});
  }

  const std::size_t n = s1.size();
  const Positions f1 = cart_to_frac(s1.positions, l1);
  const Eigen::Matrix3d g1 = l1 * l1.transpose();
  auto angle = [](const Eigen::RowVector3d& u, const Eigen::RowVector3d& v) {
    return std::acos(std::clamp(u.dot(v) / (u.norm() * v.norm()), -1.0, 1.0)) * 180.0 / M_PI;
  };
  for (const Vec* va : pick[0]) {
    for (const Vec* vb : pick[1]) {
      const double gam = angle(va->v, vb->v);
      if (std::abs(gam - p1[5]) > tol.angle_tol) continue;
      for (const Vec* vc : pick[2]) {
        Eigen::Matrix3i m;
        m.row(0) = va->n.transpose();
        m.row(1) = vb->n.transpose();
        m.row(2) = vc->n.transpose();
        const int det = m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
                        m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
        if (det != 1 && det != -1) continue;
        const double al = angle(vb->v, vc->v), be = angle(va->v, vc->v);
        if (std::abs(al - p1[3]) > tol.angle_tol || std::abs(be - p1[4]) > tol.angle_tol) continue;
        Lattice b2;
        b2.row(0) = va->v;
        b2.row(1) = vb->v;
        b2.row(2) = vc->v;
        const double ldev = std::max({rel(va->len, p1[0]), rel(vb->len, p1[1]), rel(vc->len, p1[2])});
        const double adev = std::max({std::abs(al - p1[3]), std::abs(be - p1[4]), std::abs(gam - p1[5])});
        if (!out.lattice_ok || ldev + adev / 180.0 < out.length_dev + out.angle_dev / 180.0) {
          out.length_dev = ldev;
          out.angle_dev = adev;
        }
        out.lattice_ok = true;
        const Positions f2 = cart_to_frac(s2.positions, b2);
        const Eigen::Matrix3d g = 0.5 * (g1 + b2 * b2.transpose());
        const double vol = std::sqrt(std::max(g.determinant(), 0.0));
        const double norm = std::cbrt(vol / static_cast<double>(n));
        const SiteFit fit = fit_sites(s1.atom_numbers, f1, s2.atom_numbers, f2, g, norm, tol.stol);
        const bool ok = fit.max_disp <= tol.stol;
        if ((ok && (!out.sites_ok || fit.rmse < out.rmse)) || (!out.sites_ok && !ok && fit.max_disp < out.max_disp)) {
          out.rmse = fit.rmse;
          out.max_disp = fit.max_disp;
          out.sites_ok = ok;
        }
      }
    }
  }
  return out;
}

}  // namespace detail

// Symmetric: both directions are tried and the better matching one reported.
inline MatchReport structure_match(const AtomicSystem& s1, const AtomicSystem& s2, const MatchTolerances& tol = {}) {
  tol.validate();
  if (!s1.lattice || !s2.lattice) throw std::invalid_argument("structure_match needs periodic structures");
  MatchReport r;
  if (detail::reduced_counts(s1.atom_numbers) != detail::reduced_counts(s2.atom_numbers)) {
    r.reason = "composition";
    return r;
  }
  r.composition_ok = true;
  if (s1.size() != s2.size()) {
    r.reason = "atom count";
    return r;
  }
  const auto a = detail::match_directed(s1, s2, tol);
  const auto b = detail::match_directed(s2, s1, tol);
  auto rank = [](const detail::DirectedResult& d) { return std::make_tuple(!(d.lattice_ok && d.sites_ok), !d.lattice_ok, d.rmse, d.max_disp); };
  const auto& best = rank(b) < rank(a) ? b : a;
  r.lattice_ok = best.lattice_ok;
  r.sites_ok = best.sites_ok;
  r.length_deviation = best.length_dev;
  r.angle_deviation = best.angle_dev;
  r.max_site_displacement = best.max_disp;
  r.matched = best.lattice_ok && best.sites_ok;
  if (r.matched) r.site_rmse_normalized = best.rmse;
  else r.reason = best.lattice_ok ? "sites" : "lattice";
  return r;
}

struct MatchSummary {
  double match_rate_percent = 0.0;
  std::optional<double> mean_rmse;  // over matched pairs
  std::size_t matched = 0;
  std::size_t total = 0;
};

inline MatchSummary summarize_matches(const std::vector<MatchReport>& reports) {
  MatchSummary s;
  s.total = reports.size();
  double sum = 0.0;
  for (const auto& r : reports) {
    if (!r.matched) continue;
    ++s.matched;
    sum += *r.site_rmse_normalized;
  }
  if (s.total > 0) s.match_rate_percent = 100.0 * static_cast<double>(s.matched) / static_cast<double>(s.total);
  if (s.matched > 0) s.mean_rmse = sum / static_cast<double>(s.matched);
  return s;
}

inline std::vector<MatchReport> match_pairs(const std::vector<AtomicSystem>& preds, const std::vector<AtomicSystem>& truths,
                                            const MatchTolerances& tol = {}, int threads = 1) {
  detail::require_same_length(preds.size(), truths.size(), "match_pairs");
  std::vector<MatchReport> out(preds.size());
  const std::size_t nt = static_cast<std::size_t>(std::max(1, threads));
  if (nt == 1 || preds.size() < 2) {
    for (std::size_t i = 0; i < preds.size(); ++i) out[i] = structure_match(preds[i], truths[i], tol);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(nt);
  for (std::size_t w = 0; w < nt; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t i = w; i < preds.size(); i += nt) out[i] = structure_match(preds[i], truths[i], tol);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

inline MatchSummary match_rate_and_rmse(const std::vector<AtomicSystem>& preds, const std::vector<AtomicSystem>& truths,
                                        const MatchTolerances& tol = {}, int threads = 1) {
  return summarize_matches(match_pairs(preds, truths, tol, threads));
}

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  std::string name;
  double value = 0.0;
  std::size_t count = 0;
};

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "metric,value,count\n";
  out.precision(10);
  for (const auto& r : rows) out << r.name << ',' << r.value << ',' << r.count << '\n';
}

inline nlohmann::json metrics_summary(const std::vector<MetricRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) j.push_back({{"metric", r.name}, {"value", r.value}, {"count", r.count}});
  return j;
}

}  // namespace atomkit

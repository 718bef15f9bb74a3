#pragma once

// Elemental references, formation energies, distance to the convex hull by
// linear programming over competing phases, and the stability gate.

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "atomkit/elements.hpp"
#include "atomkit/structio.hpp"

namespace atomkit {

struct Composition {
  std::map<int, int> counts;  // Z -> atoms

  int total() const {
    int n = 0;
    for (const auto& [z, c] : counts) n += c;
    return n;
  }

  double fraction(int z) const {
    auto it = counts.find(z);
    return it == counts.end() ? 0.0 : static_cast<double>(it->second) / total();
  }

  std::set<int> elements() const {
    std::set<int> e;
    for (const auto& [z, c] : counts) e.insert(z);
    return e;
  }

  // Elements in increasing Z, count omitted when 1.
  std::string formula() const {
    std::string out;
    for (const auto& [z, c] : counts) {
      out += element_symbol(z);
      if (c != 1) out += std::to_string(c);
    }
    return out;
  }

  void validate() const {
    if (counts.empty()) throw std::invalid_argument("empty composition");
    for (const auto& [z, c] : counts)
      if (c <= 0) throw std::invalid_argument("composition counts must be positive");
  }

  static Composition of(const AtomicSystem& s) {
    Composition c;
    for (int z : s.atom_numbers) ++c.counts[z];
    return c;
  }

  bool operator==(const Composition&) const = default;
};

// "Hf3ZrRe8", "O2", "FeO". Integer counts only.
inline Composition parse_formula(const std::string& text) {
  Composition c;
  std::size_t i = 0;
  while (i < text.size()) {
    if (!std::isupper(static_cast<unsigned char>(text[i]))) throw std::invalid_argument("bad formula '" + text + "'");
    std::string sym(1, text[i++]);
    while (i < text.size() && std::islower(static_cast<unsigned char>(text[i]))) sym += text[i++];
    auto z = atomic_number(sym);
    if (!z) throw std::invalid_argument("unknown element '" + sym + "' in formula '" + text + "'");
    int count = 0;
    bool digits = false;
    while (i < text.size() && std::isdigit(static_cast<unsigned char>(text[i]))) {
      count = count * 10 + (text[i++] - '0');
      digits = true;
    }
    if (!digits) count = 1;
    if (count <= 0) throw std::invalid_argument("zero count in formula '" + text + "'");
    c.counts[*z] += count;
  }
  c.validate();
  return c;
}

struct PhaseEntry {
  std::string name;
  Composition composition;
  double energy_per_atom = 0.0;  // formation-energy scale, eV/atom
  std::string source;
};

// ------------------------------------------------------------ references

struct ReferenceFit {
  std::map<int, double> mu;  // eV/atom per element
  double rms_residual = 0.0;
  double max_residual = 0.0;
};

inline ReferenceFit fit_references(const std::vector<std::pair<Composition, double>>& data) {
  if (data.empty()) throw std::invalid_argument("no records to fit references");
  std::set<int> all;
  for (const auto& [c, e] : data)
    for (int z : c.elements()) all.insert(z);
  std::vector<int> elems(all.begin(), all.end());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(data.size()), static_cast<Eigen::Index>(elems.size()));
  Eigen::VectorXd y(static_cast<Eigen::Index>(data.size()));
  for (std::size_t r = 0; r < data.size(); ++r) {
    for (std::size_t k = 0; k < elems.size(); ++k) {
      auto it = data[r].first.counts.find(elems[k]);
      if (it != data[r].first.counts.end()) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = it->second;
    }
    y(static_cast<Eigen::Index>(r)) = data[r].second;
  }
  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  lu.setThreshold(1e-10);
  if (lu.rank() < a.cols()) {
    Eigen::MatrixXd ker = lu.kernel();
    std::string names;
    for (std::size_t k = 0; k < elems.size(); ++k) {
      if (ker.row(static_cast<Eigen::Index>(k)).cwiseAbs().maxCoeff() > 1e-9) {
        if (!names.empty()) names += ", ";
        names += element_symbol(elems[k]);
      }
    }
    throw std::invalid_argument("reference energies not identifiable for: " + names);
  }
  Eigen::VectorXd mu = a.colPivHouseholderQr().solve(y);
  ReferenceFit fit;
  for (std::size_t k = 0; k < elems.size(); ++k) fit.mu[elems[k]] = mu(static_cast<Eigen::Index>(k));
  Eigen::VectorXd res = a * mu - y;
  fit.rms_residual = std::sqrt(res.squaredNorm() / static_cast<double>(res.size()));
  fit.max_residual = res.cwiseAbs().maxCoeff();
  return fit;
}

inline double formation_energy(double total_energy, const Composition& c, const std::map<int, double>& mu) {
  c.validate();
  double ref = 0.0;
  for (const auto& [z, n] : c.counts) {
    auto it = mu.find(z);
    if (it == mu.end()) throw std::invalid_argument(std::string("no reference energy for ") + std::string(element_symbol(z)));
    ref += n * it->second;
  }
  return (total_energy - ref) / c.total();
}

// ------------------------------------------------------------ linear programming

struct LpSolution {
  Eigen::VectorXd x;
  double objective = 0.0;
};

// min c.x subject to A x = b, x >= 0. Two-phase tableau simplex with Bland's
// rule; the final basis is re-solved directly for accuracy. nullopt if infeasible.
inline std::optional<LpSolution> solve_lp(const Eigen::MatrixXd& a_in, const Eigen::VectorXd& b_in, const Eigen::VectorXd& c) {
  const Eigen::Index m = a_in.rows(), n = a_in.cols();
  Eigen::MatrixXd a = a_in;
  Eigen::VectorXd b = b_in;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (b(i) < 0) {
      a.row(i) *= -1.0;
      b(i) *= -1.0;
    }
  }
  const double eps = 1e-11;
  // columns: n structural, m artificial, then rhs
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(m + 1, n + m + 1);
  t.topLeftCorner(m, n) = a;
  t.block(0, n, m, m).setIdentity();
  t.col(n + m).head(m) = b;
  std::vector<Eigen::Index> basis(static_cast<std::size_t>(m));
  for (Eigen::Index i = 0; i < m; ++i) basis[static_cast<std::size_t>(i)] = n + i;

  auto pivot = [&](Eigen::Index r, Eigen::Index col) {
    t.row(r) /= t(r, col);
    for (Eigen::Index i = 0; i <= m; ++i) {
      if (i != r && t(i, col) != 0.0) t.row(i) -= t(i, col) * t.row(r);
    }
    basis[static_cast<std::size_t>(r)] = col;
  };
  // Reduced costs live in row m; allowed columns limited to [0, ncols).
  auto run = [&](Eigen::Index ncols) {
    for (int iter = 0; iter < 10000; ++iter) {
      Eigen::Index enter = -1;
      for (Eigen::Index j = 0; j < ncols; ++j) {
        if (t(m, j) < -eps) {
          enter = j;
          break;
        }
      }
      if (enter < 0) return true;
      Eigen::Index leave = -1;
      double best = 0.0;
      for (Eigen::Index i = 0; i < m; ++i) {
        if (t(i, enter) > eps) {
          const double ratio = t(i, n + m) / t(i, enter);
          if (leave < 0 || ratio < best - 1e-15 ||
              (std::abs(ratio - best) <= 1e-15 && basis[static_cast<std::size_t>(i)] < basis[static_cast<std::size_t>(leave)])) {
            leave = i;
            best = ratio;
          }
        }
      }
      if (leave < 0) return false;  // unbounded
      pivot(leave, enter);
    }
    throw std::runtime_error("simplex iteration limit reached");
  };

  // phase 1: minimise the sum of artificials
  t.row(m).setZero();
  for (Eigen::Index i = 0; i < m; ++i) t.row(m) -= t.row(i);
  for (Eigen::Index i = 0; i < m; ++i) t(m, n + i) = 0.0;
  run(n + m);
  if (-t(m, n + m) > 1e-9) return std::nullopt;
  // drive remaining artificials out of the basis where possible
  std::vector<bool> redundant(static_cast<std::size_t>(m), false);
  for (Eigen::Index i = 0; i < m; ++i) {
    if (basis[static_cast<std::size_t>(i)] < n) continue;
    Eigen::Index col = -1;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (std::abs(t(i, j)) > 1e-9) {
        col = j;
        break;
      }
    }
    if (col >= 0) {
      pivot(i, col);
    } else {
      redundant[static_cast<std::size_t>(i)] = true;
    }
  }
  // phase 2
  t.row(m).setZero();
  t.row(m).head(n) = c.transpose();
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index bj = basis[static_cast<std::size_t>(i)];
    if (bj < n && t(m, bj) != 0.0) t.row(m) -= t(m, bj) * t.row(i);
  }
  if (!run(n)) throw std::runtime_error("linear program is unbounded");

  // re-solve the basic system for a clean answer
  std::vector<Eigen::Index> cols, rows;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (redundant[static_cast<std::size_t>(i)]) continue;
    cols.push_back(basis[static_cast<std::size_t>(i)]);
  }
  Eigen::MatrixXd bm(m, static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) bm.col(static_cast<Eigen::Index>(k)) = a.col(cols[k]);
  Eigen::VectorXd xb = bm.colPivHouseholderQr().solve(b);
  LpSolution sol;
  sol.x = Eigen::VectorXd::Zero(n);
  for (std::size_t k = 0; k < cols.size(); ++k) sol.x(cols[k]) = std::max(0.0, xb(static_cast<Eigen::Index>(k)));
  sol.objective = c.dot(sol.x);
  return sol;
}

// ------------------------------------------------------------ hull

struct HullResult {
  double e_hull = 0.0;
  double hull_energy = 0.0;  // eV/atom of the optimal mixture
  std::vector<std::string> phases;
  std::vector<double> weights;  // atom-fraction weights
  std::vector<std::size_t> indices;  // into the reference list
};

inline HullResult energy_above_hull(const PhaseEntry& candidate, const std::vector<PhaseEntry>& refs, bool include_self = false) {
  candidate.composition.validate();
  if (!std::isfinite(candidate.energy_per_atom)) throw std::invalid_argument("candidate energy is not finite");
  const auto elems = candidate.composition.elements();
  std::vector<std::size_t> pool;
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto& r = refs[k];
    if (!include_self && !candidate.name.empty() && r.name == candidate.name) continue;
    bool subset = true;
    for (int z : r.composition.elements()) subset = subset && elems.count(z) > 0;
    if (subset) pool.push_back(k);
  }
  std::vector<const PhaseEntry*> entries;
  for (auto k : pool) entries.push_back(&refs[k]);
  if (include_self) entries.push_back(&candidate);

  const std::vector<int> ev(elems.begin(), elems.end());
  Eigen::MatrixXd a(static_cast<Eigen::Index>(ev.size()), static_cast<Eigen::Index>(entries.size()));
  Eigen::VectorXd b(static_cast<Eigen::Index>(ev.size())), cost(static_cast<Eigen::Index>(entries.size()));
  for (std::size_t i = 0; i < ev.size(); ++i) {
    b(static_cast<Eigen::Index>(i)) = candidate.composition.fraction(ev[i]);
    for (std::size_t k = 0; k < entries.size(); ++k) a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = entries[k]->composition.fraction(ev[i]);
  }
  for (std::size_t k = 0; k < entries.size(); ++k) cost(static_cast<Eigen::Index>(k)) = entries[k]->energy_per_atom;
  auto sol = entries.empty() ? std::nullopt : solve_lp(a, b, cost);
  if (!sol) throw std::invalid_argument("no reference combination reaches composition " + candidate.composition.formula());
  HullResult h;
  h.hull_energy = sol->objective;
  h.e_hull = candidate.energy_per_atom - sol->objective;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const double w = sol->x(static_cast<Eigen::Index>(k));
    if (w <= 1e-14) continue;
    h.phases.push_back(entries[k]->name.empty() ? entries[k]->composition.formula() : entries[k]->name);
    h.weights.push_back(w);
    h.indices.push_back(k < pool.size() ? pool[k] : refs.size());
  }
  return h;
}

// ------------------------------------------------------------ stability

struct StabilityThresholds {
  double e_form_max = 0.0;
  double e_hull_max = 0.05;
};

struct StabilityVerdict {
  bool pass = false;
  std::vector<std::string> reasons;
};

inline StabilityVerdict stability_filter(double e_form, double e_hull, const StabilityThresholds& th = {}) {
  if (!std::isfinite(e_form) || !std::isfinite(e_hull)) throw std::invalid_argument("stability inputs must be finite");
  StabilityVerdict v;
  if (!(e_form < th.e_form_max)) {
    std::ostringstream r;
    r << "formation energy " << e_form << " not below " << th.e_form_max;
    v.reasons.push_back(r.str());
  }
  if (!(e_hull < th.e_hull_max)) {
    std::ostringstream r;
    r << "hull distance " << e_hull << " not below " << th.e_hull_max;
    v.reasons.push_back(r.str());
  }
  v.pass = v.reasons.empty();
  return v;
}

// ------------------------------------------------------------ files

// CSV with header formula,energy_per_atom,source. '#' lines and blanks skipped.
inline std::vector<PhaseEntry> read_reference_csv(std::istream& in) {
  std::vector<PhaseEntry> out;
  std::string line;
  int lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(t);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(detail::trim(cell));
    if (!header) {
      header = true;
      if (f.size() < 2 || f[0] != "formula" || f[1] != "energy_per_atom") throw ParseError(lineno, "expected header formula,energy_per_atom,source");
      continue;
    }
    if (f.size() < 2) throw ParseError(lineno, "expected formula,energy_per_atom[,source]");
    PhaseEntry e;
    try {
      e.composition = parse_formula(f[0]);
    } catch (const std::invalid_argument& ex) {
      throw ParseError(lineno, ex.what());
    }
    auto v = detail::to_double(f[1]);
    if (!v || !std::isfinite(*v)) throw ParseError(lineno, "bad energy '" + f[1] + "'");
    e.name = f[0];
    e.energy_per_atom = *v;
    if (f.size() > 2) e.source = f[2];
    out.push_back(e);
  }
  return out;
}

struct HullReportRow {
  std::string formula;
  double e_form = 0.0;
  HullResult hull;
};

inline void write_hull_report(std::ostream& out, const std::vector<HullReportRow>& rows) {
  out << "formula,e_form,e_hull,phases,weights\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.formula << ',' << r.e_form << ',' << r.hull.e_hull << ',';
    for (std::size_t k = 0; k < r.hull.phases.size(); ++k) out << (k ? ";" : "") << r.hull.phases[k];
    out << ',';
    for (std::size_t k = 0; k < r.hull.weights.size(); ++k) out << (k ? ";" : "") << r.hull.weights[k];
    out << '\n';
  }
}

}  // namespace atomkit

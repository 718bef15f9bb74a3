#pragma once

// Superconductivity formulas: Allen-Dynes Tc, the composite candidate score,
// and the demagnetization correction for measured susceptibility.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace atomkit {

struct EPCInputs {
  double lambda = 0.0;
  double omega_log = 0.0;  // K
  double mu_star = 0.1;

  void validate() const {
    if (!std::isfinite(lambda) || !std::isfinite(omega_log) || !std::isfinite(mu_star))
      throw std::invalid_argument("EPC inputs must be finite");
    if (omega_log < 0.0) throw std::invalid_argument("omega_log must be >= 0");
    if (mu_star < 0.0 || mu_star > 0.3) throw std::invalid_argument("mu_star must lie in [0, 0.3]");
  }
};

// Returns 0 in the non-superconducting regime (denominator <= 0).
inline double allen_dynes_tc(const EPCInputs& in) {
  in.validate();
  const double den = in.lambda - in.mu_star * (1.0 + 0.62 * in.lambda);
  if (den <= 0.0 || in.omega_log == 0.0) return 0.0;
  return in.omega_log / 1.2 * std::exp(-1.04 * (1.0 + in.lambda) / den);
}

struct CandidateScoreRow {
  std::string identifier;
  double tc_pred = 0.0;      // K
  double e_form = 0.0;       // eV/atom
  double e_hull = 0.0;       // eV/atom
  double confidence = 0.0;
};

// Fixed normalization bounds, used instead of the batch min/max when given.
struct ScoreBounds {
  std::array<double, 2> tc{0.0, 1.0};
  std::array<double, 2> e_form{0.0, 1.0};
  std::array<double, 2> e_hull{0.0, 1.0};
};

namespace detail {

inline std::vector<double> minmax_column(const std::vector<double>& v, const std::optional<std::array<double, 2>>& fixed) {
  double lo, hi;
  if (fixed) {
    lo = (*fixed)[0];
    hi = (*fixed)[1];
  } else {
    lo = *std::min_element(v.begin(), v.end());
    hi = *std::max_element(v.begin(), v.end());
  }
  std::vector<double> out(v.size(), 0.0);
  if (!(hi > lo)) return out;  // constant column
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = (v[i] - lo) / (hi - lo);
    if (fixed) x = std::clamp(x, 0.0, 1.0);
    out[i] = x;
  }
  return out;
}

}  // namespace detail

inline std::vector<double> composite_score(const std::vector<CandidateScoreRow>& rows,
                                           const std::optional<ScoreBounds>& bounds = std::nullopt) {
  if (rows.empty()) return {};
  std::vector<double> tc, ef, eh;
  for (const auto& r : rows) {
    if (!std::isfinite(r.tc_pred) || !std::isfinite(r.e_form) || !std::isfinite(r.e_hull))
      throw std::invalid_argument("non-finite score input for " + r.identifier);
    tc.push_back(r.tc_pred);
    ef.push_back(r.e_form);
    eh.push_back(r.e_hull);
  }
  using B = std::optional<std::array<double, 2>>;
  const auto ntc = detail::minmax_column(tc, bounds ? B(bounds->tc) : B());
  const auto nef = detail::minmax_column(ef, bounds ? B(bounds->e_form) : B());
  const auto neh = detail::minmax_column(eh, bounds ? B(bounds->e_hull) : B());
  std::vector<double> s(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) s[i] = 0.5 * ntc[i] - 0.25 * nef[i] - 0.25 * neh[i];
  return s;
}

// Indices sorted by descending score; ties keep input order.
inline std::vector<std::size_t> rank_by_score(const std::vector<double>& score) {
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return idx;
}

inline void write_score_csv(std::ostream& out, const std::vector<CandidateScoreRow>& rows, const std::vector<double>& score) {
  if (rows.size() != score.size()) throw std::invalid_argument("score/row length mismatch");
  out << "identifier,tc_pred,e_form,e_hull,confidence,score\n";
  out.precision(10);
  for (std::size_t i : rank_by_score(score)) {
    const auto& r = rows[i];
    out << r.identifier << ',' << r.tc_pred << ',' << r.e_form << ',' << r.e_hull << ',' << r.confidence << ','
        << score[i] << '\n';
  }
}

// Axial demagnetization factor of a cylinder of height h and diameter d.
inline double demag_factor(double h, double d) {
  if (!(h > 0.0) || !(d > 0.0)) throw std::invalid_argument("demag_factor needs positive dimensions");
  return 1.0 / (1.0 + 1.6 * h / d);
}

// chi in 4*pi*chi units.
inline double correct_susceptibility(double chi_obs, double n) {
  const double den = 1.0 - n * chi_obs;
  if (std::abs(den) < 1e-12) throw std::domain_error("singular demagnetization correction");
  return chi_obs / den;
}

}  // namespace atomkit

#pragma once

// Cartesian diffusion for crystals with a size-aware prior: positions drift
// to (mu/2) * ones, lattices to mu * I with scale sigma. Reverse process is a
// Langevin corrector on positions followed by a deterministic predictor.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "atomkit/eqcore.hpp"
#include "atomkit/geometry.hpp"
#include "atomkit/structio.hpp"
#include "atomkit/train.hpp"

namespace atomkit {

enum class ScheduleKind { Cosine, Linear };

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "cosine") return ScheduleKind::Cosine;
  if (s == "linear") return ScheduleKind::Linear;
  throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

struct DiffusionSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::Cosine;
  std::vector<double> alpha;      // index 0..T, alpha[0] = 1
  std::vector<double> alpha_bar;  // index 0..T, alpha_bar[0] = 1
};

inline DiffusionSchedule make_schedule(int steps, ScheduleKind kind = ScheduleKind::Cosine) {
  if (steps < 1) throw std::invalid_argument("schedule needs at least one step");
  DiffusionSchedule s;
  s.steps = steps;
  s.kind = kind;
  s.alpha.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  if (kind == ScheduleKind::Linear) {
    // DDPM betas, 1e-4 .. 0.02, independent of the step count
    for (int t = 1; t <= steps; ++t) {
      const double beta = steps == 1 ? 1e-4 : 1e-4 + (0.02 - 1e-4) * (t - 1) / (steps - 1);
      s.alpha[static_cast<std::size_t>(t)] = 1.0 - beta;
    }
  } else {
    const double off = 0.008;
    auto f = [&](int t) {
      const double c = std::cos((static_cast<double>(t) / steps + off) / (1.0 + off) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 1; t <= steps; ++t) {
      double beta = 1.0 - f(t) / f(t - 1);
      beta = std::clamp(beta, 1e-8, 0.999);
      s.alpha[static_cast<std::size_t>(t)] = 1.0 - beta;
    }
  }
  s.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  for (int t = 1; t <= steps; ++t)
    s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t - 1)] * s.alpha[static_cast<std::size_t>(t)];
  return s;
}

inline constexpr double kLatticeDensityDefault = 2.0;
inline const double kLatticeDensityAlt = std::pow(0.5, 2.0 / 3.0);
inline const double kLatticeDiversityDefault = std::pow(0.0075, 2.0 / 3.0);

struct LimitParams {
  double mu = 0.0;     // mean shift, Angstrom
  double sigma = 0.0;  // lattice noise scale
  double c = kLatticeDensityDefault;
  double nu = kLatticeDiversityDefault;
  int n = 0;
};

inline LimitParams limit_params(int n, double c = kLatticeDensityDefault, double nu = kLatticeDiversityDefault) {
  if (n < 1) throw std::invalid_argument("atom count must be >= 1");
  if (!(c > 0) || !(nu > 0)) throw std::invalid_argument("c and nu must be positive");
  LimitParams p;
  p.c = c;
  p.nu = nu;
  p.n = n;
  p.mu = std::cbrt(c * n);
  p.sigma = std::cbrt(nu * n);
  return p;
}

struct ForwardSample {
  Positions x;
  Lattice lattice;
  Matrix eps_x;  // N x 3
  Matrix eps_l;  // 3 x 3
};

inline Matrix standard_normal(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

inline void check_step(int t, const DiffusionSchedule& s, int lo) {
  if (t < lo || t > s.steps) throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " + std::to_string(s.steps) + "]");
}

// Closed-form forward marginal at step t given explicit noise.
inline ForwardSample forward_with_noise(const Positions& x0, const Lattice& l0, int t, const DiffusionSchedule& s, const LimitParams& p,
                                        const Matrix& eps_x, const Matrix& eps_l) {
  check_step(t, s, 0);
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  ForwardSample f;
  f.eps_x = eps_x;
  f.eps_l = eps_l;
  f.lattice = a * l0 + (1.0 - a) * p.mu * Lattice::Identity() + b * p.sigma * eps_l;
  f.x = a * x0;
  f.x.array() += (1.0 - a) * p.mu / 2.0;
  f.x += b * eps_x;
  return f;
}

// t = 0 is the identity with zero noise.
inline ForwardSample forward_sample(const Positions& x0, const Lattice& l0, int t, const DiffusionSchedule& s, const LimitParams& p,
                                    std::mt19937_64& rng) {
  check_step(t, s, 0);
  if (t == 0) return forward_with_noise(x0, l0, 0, s, p, Matrix::Zero(x0.rows(), 3), Matrix::Zero(3, 3));
  Matrix ex = standard_normal(rng, x0.rows(), 3);
  Matrix el = standard_normal(rng, 3, 3);
  return forward_with_noise(x0, l0, t, s, p, ex, el);
}

inline double corrector_step_size(int t, const DiffusionSchedule& s, double ratio = 0.05) {
  return ratio * (1.0 - s.alpha_bar[static_cast<std::size_t>(t)]);
}

inline Positions corrector_step(const Positions& x, const Matrix& eps_hat, double delta, const Matrix& eta) {
  if (delta < 0) throw std::invalid_argument("corrector step size must be >= 0");
  Positions out = x - delta * eps_hat;
  out += std::sqrt(2.0 * delta) * eta;
  return out;
}

inline Positions corrector_step(const Positions& x, const Matrix& eps_hat, double delta, std::mt19937_64& rng) {
  return corrector_step(x, eps_hat, delta, standard_normal(rng, x.rows(), 3));
}

inline std::pair<Positions, Lattice> predictor_step(const Positions& x, const Lattice& l, const Matrix& eps_pos, const Matrix& eps_cell, int t,
                                                    const DiffusionSchedule& s, const LimitParams& p) {
  check_step(t, s, 1);
  const double a = s.alpha[static_cast<std::size_t>(t)];
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double k = (1.0 - a) / std::sqrt(1.0 - ab);
  const double inv = 1.0 / std::sqrt(a);
  Positions centred = x.array() - p.mu / 2.0;
  Positions nx = inv * (centred - k * eps_pos);
  nx.array() += p.mu / 2.0;
  Lattice mi = p.mu * Lattice::Identity();
  Lattice nl = mi + inv * (l - mi - k * p.sigma * eps_cell);
  return {nx, nl};
}

// Prior sample L_T ~ N(mu I, sigma^2), redrawn while det <= 0.
inline Lattice sample_prior_lattice(const LimitParams& p, std::mt19937_64& rng, int* rejected = nullptr) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    Lattice l = p.mu * Lattice::Identity() + p.sigma * Lattice(standard_normal(rng, 3, 3));
    if (l.determinant() > 0) return l;
    if (rejected) ++*rejected;
  }
  throw std::runtime_error("could not draw a positive-determinant prior lattice");
}

struct NoisePrediction {
  Matrix pos;   // N x 3
  Matrix cell;  // 3 x 3
};

// Denoiser query: current (unwrapped) positions, lattice, species, step t.
using Denoiser = std::function<NoisePrediction(const Positions&, const Lattice&, const std::vector<int>&, int)>;

struct TraceRow {
  int t = 0;
  double mean_eps_norm = 0.0;
  double det = 0.0;
};

struct GenerateOptions {
  double corrector_ratio = 0.05;
  bool corrector = true;
};

struct GenerateResult {
  AtomicSystem system;
  std::vector<TraceRow> trace;
};

inline void require_finite_noise(const NoisePrediction& e, int t) {
  if (!e.pos.allFinite() || !e.cell.allFinite()) throw std::runtime_error("denoiser produced non-finite noise at step " + std::to_string(t));
}

inline GenerateResult generate(const std::vector<int>& species, const Denoiser& model, const DiffusionSchedule& s, const LimitParams& p,
                               std::mt19937_64& rng, const GenerateOptions& opt = {}) {
  if (species.empty()) throw std::invalid_argument("composition is empty");
  const auto n = static_cast<Eigen::Index>(species.size());
  Lattice l = sample_prior_lattice(p, rng);
  Positions x = standard_normal(rng, n, 3);
  x.array() += p.mu / 2.0;
  GenerateResult out;
  for (int t = s.steps; t >= 1; --t) {
    if (opt.corrector) {
      auto e = model(x, l, species, t);
      require_finite_noise(e, t);
      x = corrector_step(x, e.pos, corrector_step_size(t, s, opt.corrector_ratio), rng);
    }
    auto e = model(x, l, species, t);  // re-queried after the corrector moved x
    require_finite_noise(e, t);
    std::tie(x, l) = predictor_step(x, l, e.pos, e.cell, t, s, p);
    if (!x.allFinite() || !l.allFinite()) throw std::runtime_error("non-finite state at step " + std::to_string(t));
    out.trace.push_back({t, e.pos.rowwise().norm().mean(), l.determinant()});
  }
  // -L spans the same point lattice; a left-handed basis is flipped, a flat one is a failure
  const double det = l.determinant();
  if (!(std::abs(det) > 1e-8)) throw std::runtime_error("generated lattice is degenerate");
  if (det < 0) l = -l;
  out.system.atom_numbers = species;
  out.system.lattice = l;
  out.system.positions = wrap_to_cell(x, l);
  return out;
}

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  out << "t,mean_eps_norm,det_lattice\n";
  out.precision(10);
  for (const auto& r : trace) out << r.t << ',' << r.mean_eps_norm << ',' << r.det << '\n';
}

// ------------------------------------------------------------ model glue

// Network as denoiser: the graph is built on a wrapped copy (the network
// only sees displacements), time enters as t / T.
inline Denoiser model_denoiser(const Model& model, const DiffusionSchedule& s) {
  return [&model, steps = s.steps](const Positions& x, const Lattice& l, const std::vector<int>& z, int t) {
    AtomicSystem sys;
    sys.atom_numbers = z;
    sys.lattice = l;
    sys.positions = wrap_to_cell(x, l);
    auto b = model.predict(sys, HeadSet::from_mode(HeadMode::Denoise), "", static_cast<double>(t) / steps);
    return NoisePrediction{*b.pos_noise, *b.cell_noise};
  };
}

// Training examples for the denoiser: uniform t, forward sample, true noise as target.
// Draws with a non-positive noisy lattice are redrawn.
inline SamplePrep diffusion_prep(const ModelConfig& cfg, const DiffusionSchedule& s, double c = kLatticeDensityDefault,
                                 double nu = kLatticeDiversityDefault) {
  return [cfg, s, c, nu](const Sample& smp, std::mt19937_64& rng) {
    if (!smp.system.lattice) throw std::invalid_argument("diffusion training needs periodic structures");
    const auto p = limit_params(static_cast<int>(smp.system.size()), c, nu);
    std::uniform_int_distribution<int> pick(1, s.steps);
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const int t = pick(rng);
      auto f = forward_sample(smp.system.positions, *smp.system.lattice, t, s, p, rng);
      if (!(f.lattice.determinant() > 0)) continue;
      AtomicSystem noisy;
      noisy.atom_numbers = smp.system.atom_numbers;
      noisy.lattice = f.lattice;
      noisy.positions = wrap_to_cell(f.x, f.lattice);
      PreparedSample out{prepare_system(noisy, cfg), smp.targets, static_cast<double>(t) / s.steps};
      out.targets.pos_noise = f.eps_x;
      out.targets.cell_noise = f.eps_l;
      return out;
    }
    throw std::runtime_error("could not draw a positive-determinant noisy lattice");
  };
}

}  // namespace atomkit

// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
// `acceptance 5 6` runs a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "atomkit/diffusion.hpp"
#include "atomkit/eqcore.hpp"
#include "atomkit/geometry.hpp"
#include "atomkit/harmonics.hpp"
#include "atomkit/metrics.hpp"
#include "atomkit/pipeline.hpp"
#include "atomkit/structio.hpp"
#include "atomkit/superprop.hpp"
#include "atomkit/thermo.hpp"
#include "atomkit/train.hpp"
#include "graph_oracle.hpp"
#include "hull_oracle.hpp"
#include "support.hpp"

using namespace atomkit;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double max_abs(const Matrix& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

std::string fmt(double x) {
  std::ostringstream o;
  o.precision(3);
  o << x;
  return o.str();
}

struct Outcome {
  bool pass = true;
  std::vector<std::string> notes;

  void require(bool ok, const std::string& what) {
    if (!ok) pass = false;
    notes.push_back(std::string(ok ? "" : "!") + what);
  }
};

AtomicSystem rotated(const AtomicSystem& s, const Eigen::Matrix3d& q) {
  AtomicSystem out = s;
  out.positions = s.positions * q.transpose();
  if (s.lattice) out.lattice = Lattice(*s.lattice * q.transpose());
  return out;
}

// ---------------------------------------------------------------- 1
Outcome graph_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  int mismatched = 0;
  std::size_t edges = 0;
  for (int t = 0; t < 200; ++t) {
    auto s = testsupport::random_crystal(rng, 1 + t % 6);
    const double rc = 2.0 + 0.03 * t;  // 2 .. 8 A
    auto g = build_crystal_graph(s, {rc, 0});
    auto got = graphoracle::keys(g);
    edges += got.size();
    if (got != graphoracle::brute_force_edges(s, rc)) ++mismatched;
  }
  const double el = seconds_since(t0);
  o.require(mismatched == 0, "mismatched systems " + std::to_string(mismatched) + "/200 (" + std::to_string(edges) + " edges)");
  o.require(el < 10.0, "runtime " + fmt(el) + " s < 10 s");
  return o;
}

// ---------------------------------------------------------------- 2
ModelConfig equivariance_config(int grid) {
  ModelConfig c;
  c.lmax = 2;
  c.channels = 16;
  c.blocks = 2;
  c.r_cut = 5.0;
  c.grid_resolution = grid;
  return c;
}

struct RotationCase {
  AtomicSystem s;
  Eigen::Matrix3d q;
};

// worst energy and force deviation over the cases
std::pair<double, double> equivariance_error(const Model& m, const std::vector<RotationCase>& cases) {
  double de = 0.0, df = 0.0;
  for (const auto& c : cases) {
    auto a = m.predict(c.s, HeadSet::from_mode(HeadMode::Potential));
    auto b = m.predict(rotated(c.s, c.q), HeadSet::from_mode(HeadMode::Potential));
    de = std::max(de, std::abs(*a.energy - *b.energy));
    df = std::max(df, max_abs(*b.forces - *a.forces * c.q.transpose()));
  }
  return {de, df};
}

Outcome equivariance() {
  Outcome o;
  std::mt19937_64 rng(202);
  std::vector<RotationCase> cases;
  for (int t = 0; t < 50; ++t) {
    auto s = t % 2 ? testsupport::random_crystal(rng, 3) : testsupport::random_molecule(rng, 5);
    cases.push_back({s, testsupport::random_rotation(rng)});
  }
  {
    Model m(equivariance_config(18), 7);
    auto [de, df] = equivariance_error(m, cases);
    o.require(de < 1e-6, "R=18 energy " + fmt(de) + " < 1e-6");
    o.require(df < 1e-6, "R=18 forces " + fmt(df) + " < 1e-6");
  }
  // same weights, same rotations, only the grid changes
  std::vector<RotationCase> curve_cases(cases.begin(), cases.begin() + 10);
  std::string curve;
  double prev = 1e300;
  bool monotone = true;
  for (int r : {2, 4, 8, 12, 18}) {
    Model m(equivariance_config(r), 7);
    auto [de, df] = equivariance_error(m, curve_cases);
    const double err = std::max(de, df);
    if (err > prev) monotone = false;
    prev = err;
    curve += (curve.empty() ? "" : " ") + std::to_string(r) + ":" + fmt(err);
  }
  o.require(monotone, "degradation curve {" + curve + "} non-increasing");

  // rotations by 2 pi / R about z map the R=2 grid onto itself
  const Eigen::Matrix3d rz = Eigen::AngleAxisd(M_PI, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  std::normal_distribution<double> nd(0, 1);
  double act = 0.0;
  SphericalGrid g2(2);
  for (int t = 0; t < 20; ++t) {
    Eigen::MatrixXd h(9, 4);
    for (Eigen::Index k = 0; k < h.size(); ++k) h(k) = nd(rng);
    auto d = wigner_d_block(2, rz);
    act = std::max(act, max_abs(s2_activation(d * h, g2, 2, 1) - d * s2_activation(h, g2, 2, 1)));
  }
  Model coarse(equivariance_config(2), 7);
  std::vector<RotationCase> az;
  for (const auto& c : curve_cases) az.push_back({c.s, rz});
  auto [ae, af] = equivariance_error(coarse, az);
  o.require(act < 1e-9, "R=2 azimuthal activation " + fmt(act) + " < 1e-9");
  o.require(std::max(ae, af) < 1e-9, "R=2 azimuthal model " + fmt(std::max(ae, af)) + " < 1e-9");
  return o;
}

// ---------------------------------------------------------------- 3
Outcome gradient_check() {
  Outcome o;
  std::mt19937_64 rng(303);
  ModelConfig c;
  c.lmax = 1;
  c.channels = 4;
  c.blocks = 1;
  c.heads = 2;
  c.r_cut = 4.0;
  c.radial_basis = 6;
  c.grid_resolution = 4;
  c.property_dim = 2;
  Model m(c, 17);
  auto s = testsupport::random_crystal(rng, 3, 2.5, 3.5);
  auto g = prepare_system(s, c);
  std::normal_distribution<double> nd;
  auto randm = [&](int r, int k) {
    Matrix x(r, k);
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = nd(rng);
    return x;
  };
  Targets t;
  t.energy = 1.3;
  t.forces = randm(3, 3);
  t.pos_noise = randm(3, 3);
  t.cell_noise = randm(3, 3);
  t.property = Eigen::VectorXd(2);
  *t.property << 0.4, 0.0;
  t.property_mask = Eigen::VectorXd(2);
  *t.property_mask << 1.0, 0.0;
  t.label = 1.0;
  auto loss = [&] { return multitask_loss(m.heads(m.forward(g), g, HeadSet::all()), t, 3, m.normalizer).total; };
  auto& store = m.params();
  const Eigen::VectorXd grad = ad::gradients(loss, store);
  const Eigen::VectorXd p = store.flat_values();

  // every head gets its own share of the sample, the trunk fills the rest
  const std::vector<std::string> groups = {"head.energy_crys.", "head.force.", "head.pos.", "head.cell.", "head.property.", "head.class."};
  std::map<std::string, std::vector<Eigen::Index>> live;
  for (Eigen::Index k = 0; k < grad.size(); ++k) {
    if (std::abs(grad(k)) <= 1e-4) continue;
    const std::string who = store.owner(static_cast<std::size_t>(k));
    std::string key = "trunk";
    for (const auto& gname : groups)
      if (who.rfind(gname, 0) == 0) key = gname;
    live[key].push_back(k);
  }
  std::vector<Eigen::Index> sample;
  std::string dead;
  for (const auto& gname : groups) {
    auto& v = live[gname];
    std::shuffle(v.begin(), v.end(), rng);
    if (v.empty()) dead += " " + gname;
    for (std::size_t i = 0; i < std::min<std::size_t>(v.size(), 12); ++i) sample.push_back(v[i]);
  }
  auto& trunk = live["trunk"];
  std::shuffle(trunk.begin(), trunk.end(), rng);
  for (std::size_t i = 0; i < trunk.size() && sample.size() < 120; ++i) sample.push_back(trunk[i]);

  const double h = 1e-4;
  double worst = 0.0;
  for (Eigen::Index k : sample) {
    Eigen::VectorXd q = p;
    q(k) += h;
    store.set_flat_values(q);
    const double up = loss().scalar();
    q(k) -= 2 * h;
    store.set_flat_values(q);
    const double dn = loss().scalar();
    const double fd = (up - dn) / (2 * h);
    worst = std::max(worst, std::abs(fd - grad(k)) / std::max(std::abs(fd), std::abs(grad(k))));
  }
  store.set_flat_values(p);
  ad::gradients(loss, store);
  const Matrix& w = store.get("head.property.proj.w").grad();
  const double masked = w.col(1).cwiseAbs().maxCoeff();
  o.require(dead.empty(), dead.empty() ? "all six head groups sampled" : "no live coordinates in" + dead);
  o.require(sample.size() >= 100, std::to_string(sample.size()) + " coordinates");
  o.require(worst < 1e-4, "worst relative error " + fmt(worst) + " < 1e-4");
  o.require(masked == 0.0, "masked property column gradient " + fmt(masked));
  return o;
}

// ---------------------------------------------------------------- 4
// Exact noise that would have produced the current state from (x0, l0).
Denoiser oracle_denoiser(const Positions& x0, const Lattice& l0, const DiffusionSchedule& s, const LimitParams& p) {
  return [=](const Positions& x, const Lattice& l, const std::vector<int>&, int t) {
    const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Matrix ex = x - a * x0;
    ex.array() -= (1.0 - a) * p.mu / 2.0;
    Matrix el = l - a * l0 - (1.0 - a) * p.mu * Lattice::Identity();
    return NoisePrediction{ex / b, el / (b * p.sigma)};
  };
}

Outcome diffusion_consistency() {
  Outcome o;
  std::mt19937_64 rng(404);
  {
    auto x = testsupport::random_crystal(rng, 2);
    auto s = make_schedule(1000);
    auto p = limit_params(2);
    const int draws = 10000;
    int off = 0, checks = 0;
    for (int t : {250, 500, 1000}) {
      const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
      const double a = std::sqrt(ab);
      std::vector<double> l00(draws), l01(draws), x12(draws);
      for (int k = 0; k < draws; ++k) {
        auto f = forward_sample(x.positions, *x.lattice, t, s, p, rng);
        l00[k] = f.lattice(0, 0);
        l01[k] = f.lattice(0, 1);
        x12[k] = f.x(1, 2);
      }
      auto check = [&](const std::vector<double>& v, double mean, double var) {
        double m = 0, q = 0;
        for (double y : v) m += y;
        m /= draws;
        for (double y : v) q += (y - m) * (y - m);
        q /= draws - 1;
        checks += 2;
        if (std::abs(m - mean) > 3.0 * std::sqrt(var / draws)) ++off;
        if (std::abs(q - var) > 3.0 * var * std::sqrt(2.0 / (draws - 1))) ++off;
      };
      check(l00, a * (*x.lattice)(0, 0) + (1 - a) * p.mu, (1 - ab) * p.sigma * p.sigma);
      check(l01, a * (*x.lattice)(0, 1), (1 - ab) * p.sigma * p.sigma);
      check(x12, a * x.positions(1, 2) + (1 - a) * p.mu / 2, 1 - ab);
    }
    o.require(off == 0, "marginal moments outside 3 SE: " + std::to_string(off) + "/" + std::to_string(checks));
  }
  {
    auto s = make_schedule(1000);
    double worst = 0.0;
    for (int n = 1; n <= 8; ++n) {
      auto x = testsupport::random_crystal(rng, n);
      auto p = limit_params(n);
      auto den = oracle_denoiser(x.positions, *x.lattice, s, p);
      auto f = forward_sample(x.positions, *x.lattice, s.steps, s, p, rng);
      Positions cx = f.x;
      Lattice cl = f.lattice;
      for (int t = s.steps; t >= 1; --t) {
        auto e = den(cx, cl, x.atom_numbers, t);
        std::tie(cx, cl) = predictor_step(cx, cl, e.pos, e.cell, t, s, p);
      }
      worst = std::max({worst, max_abs(cx - x.positions), max_abs(cl - *x.lattice)});
    }
    o.require(worst < 1e-6, "oracle chain recovery N<=8 " + fmt(worst) + " < 1e-6");
  }
  {
    auto s = make_schedule(20);
    auto p = limit_params(4);
    auto target = testsupport::random_crystal(rng, 4);
    auto guide = oracle_denoiser(target.positions, *target.lattice, s, p);
    int outside = 0;
    Denoiser spy = [&](const Positions& x, const Lattice& l, const std::vector<int>& z, int t) {
      auto f = cart_to_frac(x, l);
      if ((f.array() < 0.0).any() || (f.array() >= 1.0).any()) ++outside;
      return guide(x, l, z, t);
    };
    auto out = generate(target.atom_numbers, spy, s, p, rng);
    auto f = cart_to_frac(out.system.positions, *out.system.lattice);
    const bool final_in = (f.array() >= 0.0).all() && (f.array() < 1.0).all();
    o.require(outside > 0 && final_in,
              "intermediate states outside the cell at " + std::to_string(outside) + "/20 steps, final wrapped");
  }
  return o;
}

// ---------------------------------------------------------------- 5
Outcome toy_csp() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(0, 1), len(2.6, 3.6);
  const int species[] = {3, 8, 12, 26, 29, 40};
  std::vector<Sample> data;
  std::set<std::map<int, int>> seen;
  while (data.size() < 20) {
    const int n = 1 + static_cast<int>(u(rng) * 4);
    AtomicSystem s;
    Lattice l = Lattice::Zero();
    for (int k = 0; k < 3; ++k) l(k, k) = len(rng);
    s.lattice = l;
    s.positions.resize(n, 3);
    std::map<int, int> comp;
    for (int i = 0; i < n; ++i) {
      const int z = species[static_cast<int>(u(rng) * 6)];
      s.atom_numbers.push_back(z);
      comp[z]++;
      Eigen::RowVector3d f(u(rng), u(rng), u(rng));
      if (i == 0) f.setZero();
      s.positions.row(i) = f * l;
    }
    if (!seen.insert(comp).second) continue;  // one structure per composition
    data.push_back({s, {}});
  }
  ModelConfig cfg;
  cfg.lmax = 1;
  cfg.channels = 16;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.r_cut = 5.0;
  cfg.max_neighbors = 20;
  cfg.radial_basis = 16;
  cfg.time_conditioning = true;
  Model model(cfg, 1);
  auto sched = make_schedule(100);
  TrainOptions opt;
  opt.epochs = 4000;
  opt.lr = 3e-3;
  opt.batch_size = 4;
  opt.mode = HeadMode::Denoise;
  opt.prep = diffusion_prep(cfg, sched);
  opt.seed = 3;
  // plateau: mean loss over the first and last 200 epochs
  std::vector<double> losses;
  opt.on_epoch = [&](int, const std::map<std::string, double>& m) { losses.push_back(m.at("total")); };
  train(model, data, opt);
  auto window = [&](std::size_t from) {
    double acc = 0;
    for (std::size_t k = from; k < from + 200; ++k) acc += losses[k];
    return acc / 200;
  };
  std::vector<AtomicSystem> preds, truths;
  std::mt19937_64 grng(5);
  int failed = 0;
  for (auto& d : data) {
    try {
      auto g = generate(d.system.atom_numbers, model_denoiser(model, sched), sched, limit_params(static_cast<int>(d.system.size())), grng);
      preds.push_back(g.system);
    } catch (const std::exception&) {
      ++failed;
      preds.push_back(AtomicSystem{});
    }
    truths.push_back(d.system);
  }
  int matched = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i].lattice && structure_match(preds[i], truths[i], MatchTolerances{0.5, 10.0, 0.3}).matched) ++matched;
  const double el = seconds_since(t0);
  const double mr = 100.0 * matched / static_cast<double>(data.size());
  o.notes.push_back("loss " + fmt(window(0)) + " -> " + fmt(window(losses.size() - 200)));
  o.require(mr >= 80.0, "match rate " + fmt(mr) + "% (" + std::to_string(matched) + "/20, " + std::to_string(failed) + " failed) >= 80%");
  o.require(el < 1800.0, "runtime " + fmt(el) + " s < 1800 s");
  return o;
}

// ---------------------------------------------------------------- 6
Outcome toy_tc() {
  Outcome o;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  const int species[] = {5, 13, 22, 41, 73, 75};
  const double weight[] = {3.0, -1.0, 1.5, 6.0, 2.0, 4.5};
  std::vector<Sample> data;
  for (int k = 0; k < 500; ++k) {
    const int n = 2 + static_cast<int>(u(rng) * 3);
    const double vpa = 10.0 + 10.0 * u(rng);
    const double a = std::cbrt(vpa * n);
    AtomicSystem s;
    Lattice l;
    l << a * (0.9 + 0.2 * u(rng)), 0, 0, 0.2 * u(rng), a * (0.9 + 0.2 * u(rng)), 0, 0.2 * u(rng), 0.2 * u(rng), a;
    l *= std::cbrt(vpa * n / l.determinant());
    s.lattice = l;
    s.positions.resize(n, 3);
    // label: mean species weight plus a linear volume-per-atom term
    double tc = 0;
    for (int i = 0; i < n; ++i) {
      const int pick = static_cast<int>(u(rng) * 6);
      s.atom_numbers.push_back(species[pick]);
      tc += weight[pick] / n;
      Eigen::RowVector3d f(u(rng), u(rng), u(rng));
      s.positions.row(i) = f * l;
    }
    tc += 0.4 * (vpa - 15.0);
    Sample smp{s, {}};
    smp.targets.property = Eigen::VectorXd::Constant(1, tc);
    data.push_back(smp);
  }
  std::vector<Sample> train_set(data.begin(), data.begin() + 400), test_set(data.begin() + 400, data.end());
  ModelConfig cfg;
  cfg.lmax = 1;
  cfg.channels = 16;
  cfg.blocks = 2;
  cfg.heads = 2;
  cfg.r_cut = 5.0;
  cfg.radial_basis = 16;
  Model model(cfg, 1);
  TrainOptions opt;
  opt.epochs = 60;
  opt.lr = 3e-3;
  opt.mode = HeadMode::Property;
  opt.seed = 2;
  train(model, train_set, opt);
  std::vector<double> p, y;
  for (const auto& smp : test_set) {
    p.push_back((*model.predict(smp.system, HeadSet::from_mode(HeadMode::Property)).property)(0));
    y.push_back((*smp.targets.property)(0));
  }
  const double r2 = r_squared(p, y);
  o.require(r2 >= 0.9, "held-out R2 " + fmt(r2) + " >= 0.9 (100 structures)");

  // every per-atom feature row twice over: the mean-pooled head must not move
  double dup = 0.0;
  HeadSet hs;
  hs.property = hs.class_logit = true;
  for (int k = 0; k < 10; ++k) {
    auto g = prepare_system(test_set[static_cast<std::size_t>(k)].system, cfg);
    Matrix f = model.forward(g).value();
    GraphTensors twice = g;
    twice.n_atoms = 2 * g.n_atoms;
    Matrix ff(2 * f.rows(), f.cols());
    ff << f, f;
    auto a = model.heads(ad::constant(f), g, hs);
    auto b = model.heads(ad::constant(ff), twice, hs);
    dup = std::max({dup, max_abs(b.property.value() - a.property.value()), std::abs(b.class_logit.scalar() - a.class_logit.scalar())});
  }
  o.require(dup <= 1e-12, "duplication deviation " + fmt(dup) + " (rounding only)");
  return o;
}

// ---------------------------------------------------------------- 7
PhaseEntry phase(const std::string& f, double e) { return PhaseEntry{f, parse_formula(f), e, ""}; }

Outcome hull() {
  Outcome o;
  std::mt19937_64 rng(707);
  double worst = 0.0;
  for (int t = 0; t < 500; ++t) {
    auto sys = hulloracle::random_system(rng, 2 + t % 2);
    const double got = energy_above_hull(sys.candidate, sys.refs).hull_energy;
    worst = std::max(worst, std::abs(got - hulloracle::brute_force_hull(sys.candidate, sys.refs)));
  }
  o.require(worst <= 1e-9, "500 systems, worst deviation " + fmt(worst) + " <= 1e-9");
  std::vector<PhaseEntry> refs = {phase("Li", 0.0), phase("O", 0.0), phase("LiO", -0.5)};
  const double e = energy_above_hull(phase("LiO3", -0.1), refs).e_hull;
  o.require(std::abs(e - 0.15) < 1e-12, "worked example E_hull " + fmt(e) + " eV/atom");
  return o;
}

// ---------------------------------------------------------------- 8
Outcome allen_dynes() {
  Outcome o;
  // hand evaluation of omega/1.2 exp(-1.04 (1 + l) / (l - mu (1 + 0.62 l)))
  const double hand = 300.0 / 1.2 * std::exp(-1.04 * 2.0 / (1.0 - 0.1 * 1.62));
  const double tc = allen_dynes_tc({1.0, 300.0, 0.1});
  o.require(std::abs(tc - 20.89) <= 0.01 && std::abs(tc - hand) < 1e-12, "(1.0, 300 K, 0.1) -> " + fmt(tc) + " K");
  int violations = 0;
  for (double mu : {0.0, 0.1, 0.2, 0.3}) {
    for (double w = 10.0; w <= 1000.0; w += 90.0) {
      double prev = -1.0;
      for (double lam = 0.0; lam <= 3.0; lam += 0.05) {
        const double v = allen_dynes_tc({lam, w, mu});
        if (v < prev) ++violations;
        if (v > allen_dynes_tc({lam, w + 1.0, mu})) ++violations;
        prev = v;
      }
    }
  }
  o.require(violations == 0, "monotonicity grid violations " + std::to_string(violations));
  const bool clamp = allen_dynes_tc({0.05, 300.0, 0.1}) == 0.0 && allen_dynes_tc({0.1 / (1.0 - 0.062), 300.0, 0.1}) == 0.0;
  o.require(clamp, "non-positive denominator returns 0");
  return o;
}

// ---------------------------------------------------------------- 9
Outcome paper_numbers() {
  Outcome o;
  auto r = rates_from_counts({153, 7, 2, 154});
  auto three = [](double x) { return std::lround(x * 1000.0); };
  o.require(three(r.precision) == 956 && three(r.recall) == 987 && three(r.f1) == 971,
            "precision " + fmt(r.precision) + " recall " + fmt(r.recall) + " F1 " + fmt(r.f1));
  const double n1 = demag_factor(0.4836, 1.0);
  const double c1 = correct_susceptibility(-2.00, n1);
  const double c2 = correct_susceptibility(-0.033, 0.053);
  o.require(std::abs(c1 + 0.94) <= 0.005, "-2.00 -> " + fmt(c1) + " (N " + fmt(n1) + ")");
  o.require(std::abs(c2 + 0.03) <= 0.005, "-0.033 -> " + fmt(c2) + " (N 0.053)");
  return o;
}

// ---------------------------------------------------------------- 10
Predictors label_predictors() {
  Predictors p;
  p.tc = [](const AtomicSystem& s) { return *s.labels.scalar("tc"); };
  p.confidence = [](const AtomicSystem& s) { return *s.labels.scalar("conf"); };
  p.stability = [](const AtomicSystem& s, const std::string&) { return StabilityEstimate{*s.labels.scalar("ef"), *s.labels.scalar("eh")}; };
  return p;
}

ScreenCandidate labelled(const std::string& id, double tc, double conf, double ef, double eh) {
  std::mt19937_64 rng(0);
  ScreenCandidate c;
  c.identifier = id;
  c.system = testsupport::random_crystal(rng, 2);
  c.system->labels.scalars = {{"tc", tc}, {"conf", conf}, {"ef", ef}, {"eh", eh}};
  return c;
}

Outcome screening() {
  Outcome o;
  struct Row {
    const char* id;
    double tc, conf, ef, eh;
  };
  const std::vector<Row> batch = {{"c0", 12.0, 0.90, -0.40, 0.000}, {"c1", 7.5, 0.80, -0.90, 0.010}, {"c2", 25.0, 0.60, -0.10, 0.030},
                                  {"c3", 5.0, 0.95, -1.20, 0.000}, {"c4", 18.0, 0.70, -0.55, 0.045}, {"c5", 9.0, 0.85, -0.25, 0.020},
                                  {"c6", 31.0, 0.99, -0.05, 0.040}, {"c7", 4.5, 0.55, -0.70, 0.005}, {"c8", 14.0, 0.65, -0.30, 0.015},
                                  {"c9", 21.0, 0.75, -0.80, 0.025}};
  std::vector<ScreenCandidate> cands;
  for (const auto& r : batch) cands.push_back(labelled(r.id, r.tc, r.conf, r.ef, r.eh));
  auto rep = screen(cands, label_predictors());
  // spreadsheet column: 0.5 norm(tc) - 0.25 norm(ef) - 0.25 norm(eh), min-max over the batch
  auto col = [&](double Row::*m) {
    double lo = 1e300, hi = -1e300;
    for (const auto& r : batch) lo = std::min(lo, r.*m), hi = std::max(hi, r.*m);
    std::vector<double> v;
    for (const auto& r : batch) v.push_back((r.*m - lo) / (hi - lo));
    return v;
  };
  const auto ntc = col(&Row::tc), nef = col(&Row::ef), neh = col(&Row::eh);
  std::vector<std::pair<double, std::size_t>> sheet;
  double worst = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double s = 0.5 * ntc[i] - 0.25 * nef[i] - 0.25 * neh[i];
    sheet.emplace_back(-s, i);
    if (i < rep.score.size()) worst = std::max(worst, std::abs(rep.score[i] - s));
  }
  std::stable_sort(sheet.begin(), sheet.end());
  std::vector<std::size_t> want;
  for (const auto& [s, i] : sheet) want.push_back(i);
  o.require(rep.accepted() == 10 && rep.ranked == want && worst < 1e-12, "10-candidate ranking, score deviation " + fmt(worst));

  std::vector<ScreenCandidate> edge = {labelled("tc", 4.0, 0.9, -0.5, 0.0), labelled("conf", 5.0, 0.5, -0.5, 0.0),
                                       labelled("hull", 5.0, 0.9, -0.5, 0.05), labelled("ok", 5.0, 0.9, -0.5, 0.0)};
  auto b = screen(edge, label_predictors());
  const bool boundary = b.verdicts[0].rejection == "tc" && b.verdicts[1].rejection == "confidence" && b.verdicts[2].rejection == "stability" &&
                        b.verdicts[3].high_confidence && b.accepted() == 1;
  o.require(boundary, "tc=4.0, conf=0.5, E_hull=0.05 rejected");

  std::mt19937_64 rng(1010);
  std::uniform_real_distribution<double> tc(0, 12), conf(0, 1), ef(-1, 0.3), eh(0, 0.2), loosen(0, 1);
  std::vector<ScreenCandidate> pool;
  for (int i = 0; i < 40; ++i) pool.push_back(labelled("p" + std::to_string(i), tc(rng), conf(rng), ef(rng), eh(rng)));
  const auto p = label_predictors();
  int violations = 0;
  for (int t = 0; t < 100; ++t) {
    ScreenThresholds a{tc(rng), conf(rng), ef(rng) - 0.3, eh(rng)};
    ScreenThresholds l = a;
    switch (t % 4) {
      case 0: l.tc_min -= loosen(rng) * 5; break;
      case 1: l.confidence_min -= loosen(rng) * 0.5; break;
      case 2: l.e_form_max += loosen(rng) * 0.5; break;
      default: l.e_hull_max += loosen(rng) * 0.1; break;
    }
    const auto ra = screen(pool, p, a), rl = screen(pool, p, l);
    for (std::size_t i = 0; i < pool.size(); ++i)
      if (ra.verdicts[i].high_confidence && !rl.verdicts[i].high_confidence) ++violations;
  }
  o.require(violations == 0, "100 loosened thresholds, lost acceptances " + std::to_string(violations));
  return o;
}

// ---------------------------------------------------------------- 11
Outcome poscar_roundtrip() {
  Outcome o;
  std::mt19937_64 rng(1111);
  int z_bad = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    auto s = testsupport::random_crystal(rng, 1 + trial % 8, 2.0, 9.0, {1, 3, 8, 26, 79});
    std::sort(s.atom_numbers.begin(), s.atom_numbers.end());  // written order equals input order
    auto r = parse_poscar(write_poscar(s, trial % 2 ? CoordinateMode::Cartesian : CoordinateMode::Direct));
    if (r.atom_numbers != s.atom_numbers) ++z_bad;
    worst = std::max({worst, max_abs(r.positions - s.positions), max_abs(*r.lattice - *s.lattice)});
  }
  o.require(z_bad == 0, "species mismatches " + std::to_string(z_bad) + "/100");
  o.require(worst < 1e-8, "worst coordinate/lattice deviation " + fmt(worst) + " A < 1e-8");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"graph oracle equivalence", graph_oracle},
      {"equivariance suite", equivariance},
      {"gradient check", gradient_check},
      {"diffusion consistency", diffusion_consistency},
      {"toy CSP overfit", toy_csp},
      {"toy Tc regression", toy_tc},
      {"hull correctness", hull},
      {"Allen-Dynes", allen_dynes},
      {"published classification and demagnetization numbers", paper_numbers},
      {"composite score and screening", screening},
      {"POSCAR roundtrip", poscar_roundtrip},
  };
  std::set<int> only;
  for (int k = 1; k < argc; ++k) only.insert(std::atoi(argv[k]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.require(false, std::string("threw: ") + e.what());
    }
    std::string detail;
    for (const auto& n : o.notes) detail += (detail.empty() ? "" : "; ") + n;
    std::printf("%s %2d %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), seconds_since(t0), detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  std::printf("%d criteria failed\n", failed);
  return failed ? 1 : 0;
}

#pragma once

// Screening skills and the batch screening loop: gates (generate, stability,
// Tc, confidence), verdict bookkeeping and the ranked candidate report.

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "atomkit/diffusion.hpp"
#include "atomkit/eqcore.hpp"
#include "atomkit/structio.hpp"
#include "atomkit/superprop.hpp"
#include "atomkit/thermo.hpp"

namespace atomkit {

struct ScreenThresholds {
  double tc_min = 4.0;  // K
  double confidence_min = 0.5;
  double e_form_max = 0.0;   // eV/atom
  double e_hull_max = 0.05;  // eV/atom

  void validate() const {
    if (!std::isfinite(tc_min) || !std::isfinite(confidence_min) || !std::isfinite(e_form_max) || !std::isfinite(e_hull_max))
      throw std::invalid_argument("screen thresholds must be finite");
  }
};

struct StabilityEstimate {
  double e_form = 0.0;
  double e_hull = 0.0;
};

// Everything the skills need, as plain callables so a batch can be driven by
// trained networks or by fixed tables.
struct Predictors {
  std::function<double(const AtomicSystem&)> tc;
  std::function<double(const AtomicSystem&)> confidence;
  std::function<StabilityEstimate(const AtomicSystem&, const std::string&)> stability;  // optional
  std::function<AtomicSystem(const Composition&, std::mt19937_64&)> generator;        // formula skill only
};

// Failure inside a stage, tagged with the stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what) : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct Verdict {
  std::string identifier;
  std::optional<bool> generated;
  std::optional<double> e_form;
  std::optional<double> e_hull;
  std::optional<bool> stable;
  std::optional<double> tc_pred;
  std::optional<double> confidence;
  bool high_confidence = false;
  std::string rejection;  // first failed gate: generate | stability | tc | confidence | error
  std::string error;

  bool rejected() const { return !high_confidence; }
};

namespace detail {

inline void run_stability(Verdict& v, const AtomicSystem& s, const Predictors& p, const ScreenThresholds& th) {
  StabilityEstimate e;
  try {
    e = p.stability(s, v.identifier);
  } catch (const std::exception& ex) {
    throw StageError("stability", ex.what());
  }
  v.e_form = e.e_form;
  v.e_hull = e.e_hull;
  v.stable = stability_filter(e.e_form, e.e_hull, {th.e_form_max, th.e_hull_max}).pass;
}

inline double run_stage(const char* stage, const std::function<double(const AtomicSystem&)>& f, const AtomicSystem& s) {
  if (!f) throw StageError(stage, "no predictor available");
  double x;
  try {
    x = f(s);
  } catch (const std::exception& ex) {
    throw StageError(stage, ex.what());
  }
  if (!std::isfinite(x)) throw StageError(stage, "non-finite prediction");
  return x;
}

}  // namespace detail

// Property stage on a given structure. Stability is evaluated and recorded
// when a predictor exists; it gates only when gate_stability is set.
inline Verdict skill_structure(const AtomicSystem& s, const std::string& id, const Predictors& p, const ScreenThresholds& th = {},
                               bool gate_stability = false) {
  th.validate();
  Verdict v;
  v.identifier = id;
  if (p.stability) detail::run_stability(v, s, p, th);
  if (gate_stability && v.stable && !*v.stable) {
    v.rejection = "stability";
    return v;
  }
  v.tc_pred = detail::run_stage("tc", p.tc, s);
  v.confidence = detail::run_stage("confidence", p.confidence, s);
  if (!(*v.tc_pred > th.tc_min)) v.rejection = "tc";
  else if (!(*v.confidence > th.confidence_min)) v.rejection = "confidence";
  else v.high_confidence = true;
  return v;
}

// generate -> stability -> property. A failed stability gate leaves the
// Tc and confidence fields empty.
inline Verdict skill_formula(const Composition& c, const std::string& id, const Predictors& p, const ScreenThresholds& th,
                             std::mt19937_64& rng, AtomicSystem* generated = nullptr) {
  th.validate();
  if (!p.generator) throw StageError("generate", "no generator available");
  AtomicSystem s;
  try {
    s = p.generator(c, rng);
  } catch (const std::exception& ex) {
    throw StageError("generate", ex.what());
  }
  if (generated) *generated = s;
  Verdict v;
  v.identifier = id;
  v.generated = true;
  if (!p.stability) throw StageError("stability", "no stability predictor available");
  detail::run_stability(v, s, p, th);
  if (!*v.stable) {
    v.rejection = "stability";
    return v;
  }
  Verdict prop = skill_structure(s, id, Predictors{p.tc, p.confidence, {}, {}}, th);
  v.tc_pred = prop.tc_pred;
  v.confidence = prop.confidence;
  v.high_confidence = prop.high_confidence;
  v.rejection = prop.rejection;
  return v;
}

// ------------------------------------------------------------ model adapters

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline std::map<int, double> elemental_references(const std::vector<PhaseEntry>& refs) {
  std::map<int, double> mu;
  for (const auto& r : refs) {
    if (r.composition.counts.size() != 1) continue;
    const int z = r.composition.counts.begin()->first;
    auto it = mu.find(z);
    if (it == mu.end() || r.energy_per_atom < it->second) mu[z] = r.energy_per_atom;
  }
  return mu;
}

// Stability from a potential model plus a reference table whose energies
// are per atom on the model's scale; elemental rows fix the chemical potentials.
inline std::function<StabilityEstimate(const AtomicSystem&, const std::string&)> model_stability(const Model& m, std::vector<PhaseEntry> refs,
                                                                                              std::string tag = "") {
  auto mu = elemental_references(refs);
  return [&m, refs = std::move(refs), mu = std::move(mu), tag = std::move(tag)](const AtomicSystem& s, const std::string& id) {
    HeadSet h;
    h.energy = true;
    const double e = *m.predict(s, h, tag).energy;
    const auto c = Composition::of(s);
    StabilityEstimate out;
    out.e_form = formation_energy(e, c, mu);
    // prefixed so a reference row that happens to share the id still counts as a competitor
    out.e_hull = energy_above_hull(PhaseEntry{"candidate:" + id, c, e / static_cast<double>(s.size()), "candidate"}, refs).e_hull;
    return out;
  };
}

inline std::function<double(const AtomicSystem&)> model_tc(const Model& m) {
  return [&m](const AtomicSystem& s) {
    HeadSet h;
    h.property = true;
    return (*m.predict(s, h).property)(0);
  };
}

inline std::function<double(const AtomicSystem&)> model_confidence(const Model& m) {
  return [&m](const AtomicSystem& s) {
    HeadSet h;
    h.class_logit = true;
    return sigmoid(*m.predict(s, h).class_logit);
  };
}

inline std::vector<int> expand_species(const Composition& c) {
  std::vector<int> z;
  for (const auto& [el, n] : c.counts) z.insert(z.end(), static_cast<std::size_t>(n), el);
  return z;
}

inline std::function<AtomicSystem(const Composition&, std::mt19937_64&)> model_generator(const Model& m, DiffusionSchedule sched,
                                                                                        GenerateOptions opt = {}) {
  return [&m, sched = std::move(sched), opt](const Composition& c, std::mt19937_64& rng) {
    const auto z = expand_species(c);
    auto p = limit_params(static_cast<int>(z.size()));
    return generate(z, model_denoiser(m, sched), sched, p, rng, opt).system;
  };
}

// ------------------------------------------------------------ screening

struct ScreenCandidate {
  std::string identifier;
  std::optional<AtomicSystem> system;    // structure mode
  std::optional<Composition> formula;    // formula mode
  std::string load_error;                // set when the record could not be read
};

struct ScreenReport {
  std::vector<Verdict> verdicts;     // input order
  std::vector<std::size_t> ranked;   // accepted verdict indices, best first
  std::vector<double> score;         // per verdict; meaningful for accepted ones
  std::map<std::string, int> rejection_counts;
  int failures = 0;

  std::size_t accepted() const { return ranked.size(); }
  int exit_code() const { return failures > 0 ? 2 : 0; }
};

// Manifest records are loaded one by one so a bad file becomes a recorded
// failure instead of aborting the batch.
inline std::vector<ScreenCandidate> load_screen_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const auto records = parse_manifest(ss.str());
  std::vector<ScreenCandidate> out;
  for (const auto& r : records) {
    ScreenCandidate c;
    c.identifier = r.labels.id;
    const auto path = r.path.is_absolute() ? r.path : manifest.parent_path() / r.path;
    try {
      c.system = read_poscar_file(path);
      c.system->labels = r.labels;
    } catch (const std::exception& e) {
      c.load_error = e.what();
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline ScreenReport screen(const std::vector<ScreenCandidate>& candidates, const Predictors& p, const ScreenThresholds& th = {},
                           std::uint64_t seed = 0, int threads = 1) {
  th.validate();
  ScreenReport rep;
  rep.verdicts.resize(candidates.size());
  auto run_one = [&](std::size_t i) {
    const auto& c = candidates[i];
    Verdict& v = rep.verdicts[i];
    try {
      if (!c.load_error.empty()) throw StageError("load", c.load_error);
      if (c.system) {
        v = skill_structure(*c.system, c.identifier, p, th, true);
      } else if (c.formula) {
        std::seed_seq sq{seed, static_cast<std::uint64_t>(i)};
        std::mt19937_64 rng(sq);
        v = skill_formula(*c.formula, c.identifier, p, th, rng);
      } else {
        throw StageError("load", "candidate has neither a structure nor a formula");
      }
    } catch (const StageError& e) {
      v = Verdict{};
      v.identifier = c.identifier;
      v.rejection = e.stage() == "generate" ? "generate" : "error";
      if (e.stage() == "generate") v.generated = false;
      v.error = e.what();
    } catch (const std::exception& e) {
      v = Verdict{};
      v.identifier = c.identifier;
      v.rejection = "error";
      v.error = e.what();
    }
  };
  const std::size_t nt = static_cast<std::size_t>(std::max(1, threads));
  if (nt == 1 || candidates.size() < 2) {
    for (std::size_t i = 0; i < candidates.size(); ++i) run_one(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < nt; ++w)
      pool.emplace_back([&, w]() {
        for (std::size_t i = w; i < candidates.size(); i += nt) run_one(i);
      });
    for (auto& t : pool) t.join();
  }

  std::vector<CandidateScoreRow> rows;
  std::vector<std::size_t> accepted;
  for (std::size_t i = 0; i < rep.verdicts.size(); ++i) {
    const auto& v = rep.verdicts[i];
    if (!v.error.empty()) ++rep.failures;
    if (v.high_confidence) {
      accepted.push_back(i);
      rows.push_back({v.identifier, *v.tc_pred, v.e_form.value_or(0.0), v.e_hull.value_or(0.0), *v.confidence});
    } else {
      rep.rejection_counts[v.rejection]++;
    }
  }
  rep.score.assign(rep.verdicts.size(), std::nan(""));
  const auto s = composite_score(rows);
  for (std::size_t k = 0; k < accepted.size(); ++k) rep.score[accepted[k]] = s[k];
  for (std::size_t k : rank_by_score(s)) rep.ranked.push_back(accepted[k]);
  return rep;
}

namespace detail {

inline std::string opt_str(const std::optional<double>& x) {
  if (!x) return "";
  std::ostringstream o;
  o.precision(10);
  o << *x;
  return o.str();
}

inline std::string csv_field(std::string s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch == '\n' ? ' ' : ch;
  }
  return q + "\"";
}

}  // namespace detail

// Accepted candidates by rank, then rejected ones in input order.
inline void write_screen_csv(std::ostream& out, const ScreenReport& r) {
  out << "rank,identifier,decision,reason,tc_pred,confidence,e_form,e_hull,score,error\n";
  auto row = [&](const std::string& rank, std::size_t i) {
    const auto& v = r.verdicts[i];
    out << rank << ',' << detail::csv_field(v.identifier) << ',' << (v.high_confidence ? "high_confidence" : "rejected") << ','
        << v.rejection << ',' << detail::opt_str(v.tc_pred) << ',' << detail::opt_str(v.confidence) << ',' << detail::opt_str(v.e_form)
        << ',' << detail::opt_str(v.e_hull) << ',' << (v.high_confidence ? detail::opt_str(r.score[i]) : "") << ','
        << detail::csv_field(v.error) << '\n';
  };
  for (std::size_t k = 0; k < r.ranked.size(); ++k) row(std::to_string(k + 1), r.ranked[k]);
  for (std::size_t i = 0; i < r.verdicts.size(); ++i)
    if (!r.verdicts[i].high_confidence) row("", i);
}

inline std::string screen_summary(const ScreenReport& r) {
  std::ostringstream o;
  o << "screened " << r.verdicts.size() << ": accepted " << r.accepted();
  for (const char* k : {"generate", "stability", "tc", "confidence", "error"}) {
    auto it = r.rejection_counts.find(k);
    o << ' ' << k << '=' << (it == r.rejection_counts.end() ? 0 : it->second);
  }
  return o.str();
}

}  // namespace atomkit

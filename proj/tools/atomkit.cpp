// atomkit command-line front end.
//
// Exit codes: 0 clean, 2 some candidates/records failed, 1 fatal.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "atomkit/diffusion.hpp"
#include "atomkit/geometry.hpp"
#include "atomkit/metrics.hpp"
#include "atomkit/pipeline.hpp"
#include "atomkit/structio.hpp"
#include "atomkit/superprop.hpp"
#include "atomkit/thermo.hpp"
#include "atomkit/train.hpp"

namespace fs = std::filesystem;
using namespace atomkit;
using nlohmann::json;

namespace {

constexpr int kClean = 0;
constexpr int kFatal = 1;
constexpr int kPartial = 2;

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string out = ".";
  int threads = 1;
  std::optional<double> tc_min, confidence_min, e_form_max, e_hull_max;
};

json load_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return json::parse(in);
}

json config_json(const Common& c) { return c.config.empty() ? json::object() : load_json(c.config); }

fs::path out_dir(const Common& c) {
  fs::path d(c.out);
  fs::create_directories(d);
  return d;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream o(p);
  if (!o) throw std::runtime_error("cannot write " + p.string());
  return o;
}

// config "thresholds" first, explicit flags win
ScreenThresholds thresholds(const Common& c, const json& cfg) {
  ScreenThresholds th;
  if (cfg.contains("thresholds")) {
    const auto& t = cfg["thresholds"];
    th.tc_min = t.value("tc_min", th.tc_min);
    th.confidence_min = t.value("confidence_min", th.confidence_min);
    th.e_form_max = t.value("e_form_max", th.e_form_max);
    th.e_hull_max = t.value("e_hull_max", th.e_hull_max);
  }
  if (c.tc_min) th.tc_min = *c.tc_min;
  if (c.confidence_min) th.confidence_min = *c.confidence_min;
  if (c.e_form_max) th.e_form_max = *c.e_form_max;
  if (c.e_hull_max) th.e_hull_max = *c.e_hull_max;
  th.validate();
  return th;
}

struct DiffusionSettings {
  int steps = 100;
  ScheduleKind kind = ScheduleKind::Cosine;
  double c = kLatticeDensityDefault;
  double nu = kLatticeDiversityDefault;
  GenerateOptions gen;

  DiffusionSchedule schedule() const { return make_schedule(steps, kind); }
};

DiffusionSettings diffusion_settings(const json& j) {
  DiffusionSettings d;
  if (j.is_null()) return d;
  d.steps = j.value("steps", d.steps);
  d.kind = parse_schedule_kind(j.value("schedule", std::string("cosine")));
  d.c = j.value("lattice_density", d.c);
  d.nu = j.value("lattice_diversity", d.nu);
  d.gen.corrector = j.value("corrector", d.gen.corrector);
  d.gen.corrector_ratio = j.value("corrector_ratio", d.gen.corrector_ratio);
  return d;
}

json diffusion_json(const DiffusionSettings& d) {
  return {{"steps", d.steps},
          {"schedule", d.kind == ScheduleKind::Cosine ? "cosine" : "linear"},
          {"lattice_density", d.c},
          {"lattice_diversity", d.nu},
          {"corrector", d.gen.corrector},
          {"corrector_ratio", d.gen.corrector_ratio}};
}

// Checkpoint plus whatever diffusion settings it was trained with.
struct LoadedModel {
  Model model;
  DiffusionSettings diffusion;
};

LoadedModel load_model(const fs::path& p) {
  auto j = load_json(p);
  return LoadedModel{model_from_checkpoint(j), diffusion_settings(j.contains("diffusion") ? j["diffusion"] : json())};
}

Targets targets_from_labels(const Labels& l, const std::string& tag, std::size_t n_atoms) {
  Targets t;
  t.tag = tag;
  if (auto e = l.scalar("energy")) t.energy = *e;
  if (auto it = l.vectors.find("forces"); it != l.vectors.end()) {
    if (it->second.size() != 3 * n_atoms) throw std::runtime_error("label 'forces' for " + l.id + " needs 3N values");
    Matrix f(static_cast<Eigen::Index>(n_atoms), 3);
    for (std::size_t k = 0; k < it->second.size(); ++k) f(static_cast<Eigen::Index>(k / 3), static_cast<Eigen::Index>(k % 3)) = it->second[k];
    t.forces = f;
  }
  if (auto it = l.vectors.find("property"); it != l.vectors.end()) {
    t.property = Eigen::Map<const Eigen::VectorXd>(it->second.data(), static_cast<Eigen::Index>(it->second.size()));
  } else if (auto p = l.scalar("property")) {
    t.property = Eigen::VectorXd::Constant(1, *p);
  } else if (auto tc = l.scalar("tc")) {
    t.property = Eigen::VectorXd::Constant(1, *tc);
  }
  if (auto y = l.scalar("label")) t.label = *y;
  return t;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) f.push_back(detail::trim(cell));
  return f;
}

// Simple numeric table: header row, then one record per line.
struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name, bool required = true) const {
    for (std::size_t k = 0; k < header.size(); ++k)
      if (header[k] == name) return static_cast<int>(k);
    if (required) throw std::runtime_error("missing column '" + name + "'");
    return -1;
  }
};

Table read_table(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  Table t;
  std::string line;
  while (std::getline(in, line)) {
    const auto s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    if (t.header.empty()) t.header = split_csv_line(s);
    else t.rows.push_back(split_csv_line(s));
  }
  if (t.header.empty()) throw std::runtime_error("empty table " + p.string());
  return t;
}

double cell_number(const std::vector<std::string>& row, int col, std::size_t line) {
  if (col < 0 || static_cast<std::size_t>(col) >= row.size()) throw std::runtime_error("row " + std::to_string(line) + ": missing field");
  auto v = detail::to_double(row[static_cast<std::size_t>(col)]);
  if (!v || !std::isfinite(*v)) throw std::runtime_error("row " + std::to_string(line) + ": bad number '" + row[static_cast<std::size_t>(col)] + "'");
  return *v;
}

std::string stem_of(const std::string& path) {
  auto s = fs::path(path).stem().string();
  return s.empty() ? fs::path(path).filename().string() : s;
}

// ------------------------------------------------------------ parse

int cmd_parse(const Common& c, const std::vector<std::string>& files, bool cartesian, bool write) {
  int failed = 0;
  for (const auto& f : files) {
    try {
      auto s = read_poscar_file(f);
      json j = {{"file", f}, {"formula", Composition::of(s).formula()}, {"n_atoms", s.size()}, {"periodic", s.periodic()}};
      if (s.lattice) j["volume"] = cell_volume(*s.lattice);
      if (write) {
        auto o = open_out(out_dir(c) / (stem_of(f) + ".vasp"));
        o << write_poscar(s, cartesian ? CoordinateMode::Cartesian : CoordinateMode::Direct);
      }
      std::cout << j.dump() << '\n';
    } catch (const std::exception& e) {
      ++failed;
      std::cerr << f << ": " << e.what() << '\n';
    }
  }
  return failed ? kPartial : kClean;
}

// ------------------------------------------------------------ graph

int cmd_graph(const Common& c, const std::vector<std::string>& files, CrystalGraphOptions opt) {
  int failed = 0;
  for (const auto& f : files) {
    try {
      auto s = read_poscar_file(f);
      auto g = build_graph(s, opt);
      auto o = open_out(out_dir(c) / (stem_of(f) + ".edges.csv"));
      write_edge_list(o, g);
      json j = {{"file", f}, {"n_atoms", g.num_atoms()}, {"edges", g.edges.size()}, {"cutoff_edges", g.num_cutoff_edges()}, {"avg_degree", g.avg_degree}};
      std::cout << j.dump() << '\n';
    } catch (const std::exception& e) {
      ++failed;
      std::cerr << f << ": " << e.what() << '\n';
    }
  }
  return failed ? kPartial : kClean;
}

// ------------------------------------------------------------ train

int cmd_train(const Common& c, const std::string& manifest, std::string mode) {
  const json cfg = config_json(c);
  ModelConfig mc = cfg.contains("model") ? ModelConfig::from_json(cfg["model"]) : ModelConfig{};
  const json tj = cfg.contains("train") ? cfg["train"] : json::object();
  TrainOptions opt;
  opt.epochs = tj.value("epochs", opt.epochs);
  opt.lr = tj.value("lr", opt.lr);
  opt.warmup_frac = tj.value("warmup_frac", opt.warmup_frac);
  opt.weight_decay = tj.value("weight_decay", opt.weight_decay);
  opt.clip_norm = tj.value("clip_norm", opt.clip_norm);
  opt.batch_size = tj.value("batch_size", opt.batch_size);
  opt.sigma_pos = tj.value("sigma_pos", opt.sigma_pos);
  opt.sigma_cell = tj.value("sigma_cell", opt.sigma_cell);
  if (tj.contains("weights")) {
    const auto& w = tj["weights"];
    opt.weights.pos = w.value("pos", opt.weights.pos);
    opt.weights.cell = w.value("cell", opt.weights.cell);
    opt.weights.energy = w.value("energy", opt.weights.energy);
    opt.weights.force = w.value("force", opt.weights.force);
    opt.weights.property = w.value("property", opt.weights.property);
    opt.weights.classify = w.value("classify", opt.weights.classify);
  }
  if (mode.empty()) mode = tj.value("mode", std::string("potential"));
  opt.mode = parse_head_mode(mode);
  opt.seed = c.seed;

  std::optional<DiffusionSettings> diff;
  if (cfg.contains("diffusion")) diff = diffusion_settings(cfg["diffusion"]);
  if (opt.mode == HeadMode::Denoise && diff) {
    mc.time_conditioning = true;
    opt.prep = diffusion_prep(mc, diff->schedule(), diff->c, diff->nu);
  }

  std::vector<Sample> data;
  for (auto& r : load_manifest(manifest)) data.push_back({r.system, targets_from_labels(r.labels, r.tag, r.system.size())});

  Model model(mc, c.seed);
  opt.on_epoch = [&](int e, const std::map<std::string, double>& m) {
    std::cerr << "epoch " << e;
    for (const auto& [k, v] : m) std::cerr << ' ' << k << '=' << v;
    std::cerr << '\n';
  };
  auto rep = train(model, data, opt);

  const auto dir = out_dir(c);
  auto ck = checkpoint_json(model);
  if (diff) ck["diffusion"] = diffusion_json(*diff);
  open_out(dir / "checkpoint.json") << ck.dump() << '\n';
  auto lo = open_out(dir / "loss.csv");
  write_loss_csv(lo, rep);
  std::cout << "trained " << data.size() << " samples, " << rep.steps << " steps -> " << (dir / "checkpoint.json").string() << '\n';
  return kClean;
}

// ------------------------------------------------------------ predict

json matrix_json(const Matrix& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index k = 0; k < m.cols(); ++k) row[static_cast<std::size_t>(k)] = m(r, k);
    rows.push_back(row);
  }
  return rows;
}

int cmd_predict(const Common& c, const std::string& checkpoint, const std::string& mode, const std::string& tag,
                const std::vector<std::string>& files) {
  auto lm = load_model(checkpoint);
  const HeadSet heads = mode == "all" ? HeadSet::all() : HeadSet::from_mode(parse_head_mode(mode));
  json out = json::array();
  int failed = 0;
  for (const auto& f : files) {
    json j = {{"file", f}};
    try {
      auto s = read_poscar_file(f);
      auto b = lm.model.predict(s, heads, tag);
      if (b.energy) j["energy"] = *b.energy;
      if (b.forces) j["forces"] = matrix_json(*b.forces);
      if (b.pos_noise) j["pos_noise"] = matrix_json(*b.pos_noise);
      if (b.cell_noise) j["cell_noise"] = matrix_json(*b.cell_noise);
      if (b.property) j["property"] = std::vector<double>(b.property->data(), b.property->data() + b.property->size());
      if (b.class_logit) {
        j["class_logit"] = *b.class_logit;
        j["confidence"] = sigmoid(*b.class_logit);
      }
    } catch (const std::exception& e) {
      ++failed;
      j["error"] = e.what();
    }
    out.push_back(j);
  }
  open_out(out_dir(c) / "predictions.json") << out.dump(2) << '\n';
  std::cout << "predicted " << files.size() - static_cast<std::size_t>(failed) << "/" << files.size() << '\n';
  return failed ? kPartial : kClean;
}

// ------------------------------------------------------------ generate

int cmd_generate(const Common& c, const std::string& checkpoint, const std::vector<std::string>& formulas, int count) {
  auto lm = load_model(checkpoint);
  const json cfg = config_json(c);
  auto d = cfg.contains("diffusion") ? diffusion_settings(cfg["diffusion"]) : lm.diffusion;
  const auto sched = d.schedule();
  const auto dir = out_dir(c);
  int failed = 0, made = 0;
  for (std::size_t fi = 0; fi < formulas.size(); ++fi) {
    Composition comp;
    try {
      comp = parse_formula(formulas[fi]);
    } catch (const std::exception& e) {
      std::cerr << formulas[fi] << ": " << e.what() << '\n';
      failed += count;
      continue;
    }
    const auto z = expand_species(comp);
    const auto p = limit_params(static_cast<int>(z.size()), d.c, d.nu);
    for (int k = 0; k < count; ++k) {
      std::seed_seq sq{c.seed, static_cast<std::uint64_t>(fi), static_cast<std::uint64_t>(k)};
      std::mt19937_64 rng(sq);
      const std::string name = comp.formula() + "_" + std::to_string(k);
      try {
        auto g = generate(z, model_denoiser(lm.model, sched), sched, p, rng, d.gen);
        open_out(dir / (name + ".vasp")) << write_poscar(g.system);
        auto tr = open_out(dir / (name + ".trace.csv"));
        write_trace_csv(tr, g.trace);
        ++made;
      } catch (const std::exception& e) {
        ++failed;
        std::cerr << name << ": " << e.what() << '\n';
      }
    }
  }
  std::cout << "generated " << made << ", failed " << failed << '\n';
  return failed ? kPartial : kClean;
}

// ------------------------------------------------------------ hull

std::vector<PhaseEntry> read_phase_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return read_reference_csv(in);
}

int cmd_hull(const Common& c, const std::string& refs_path, const std::string& cands_path, bool include_self) {
  const auto refs = read_phase_csv(refs_path);
  const auto cands = read_phase_csv(cands_path);
  const auto mu = elemental_references(refs);
  std::vector<HullReportRow> rows;
  int failed = 0;
  for (std::size_t k = 0; k < cands.size(); ++k) {
    // a reference row with the same formula is a competing phase, not the candidate itself
    PhaseEntry cand = cands[k];
    cand.name = "candidate#" + std::to_string(k + 1);
    try {
      HullReportRow r;
      r.formula = cands[k].name;
      r.e_form = formation_energy(cand.energy_per_atom * cand.composition.total(), cand.composition, mu);
      r.hull = energy_above_hull(cand, refs, include_self);
      rows.push_back(r);
    } catch (const std::exception& e) {
      ++failed;
      std::cerr << cands[k].name << ": " << e.what() << '\n';
    }
  }
  auto o = open_out(out_dir(c) / "hull.csv");
  write_hull_report(o, rows);
  std::cout << "hull: " << rows.size() << " candidates, " << failed << " failed\n";
  return failed ? kPartial : kClean;
}

// ------------------------------------------------------------ score

int cmd_score(const Common& c, const std::string& input) {
  const auto t = read_table(input);
  const int ci = t.column("identifier"), ct = t.column("tc_pred"), cf = t.column("e_form"), ch = t.column("e_hull"),
            cc = t.column("confidence");
  std::vector<CandidateScoreRow> rows;
  int failed = 0;
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    const auto& r = t.rows[k];
    try {
      if (static_cast<std::size_t>(ci) >= r.size()) throw std::runtime_error("row " + std::to_string(k + 1) + ": missing identifier");
      rows.push_back({r[static_cast<std::size_t>(ci)], cell_number(r, ct, k + 1), cell_number(r, cf, k + 1), cell_number(r, ch, k + 1),
                      cell_number(r, cc, k + 1)});
    } catch (const std::exception& e) {
      ++failed;
      std::cerr << e.what() << '\n';
    }
  }
  const auto s = composite_score(rows);
  auto o = open_out(out_dir(c) / "scores.csv");
  write_score_csv(o, rows, s);
  std::cout << "scored " << rows.size() << ", skipped " << failed << '\n';
  return failed ? kPartial : kClean;
}

// ------------------------------------------------------------ screen

struct ScreenSources {
  std::string manifest;
  std::string formulas;
  bool from_labels = false;
  std::string tc_model, confidence_model, energy_model, generator, references;
  std::string energy_tag;
};

double label_or_throw(const AtomicSystem& s, const char* key) {
  auto v = s.labels.scalar(key);
  if (!v) throw std::runtime_error(std::string("no '") + key + "' label");
  return *v;
}

// "<id> <formula>" or just "<formula>" per line
std::vector<ScreenCandidate> read_formula_list(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::vector<ScreenCandidate> out;
  std::string line;
  while (std::getline(in, line)) {
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    ScreenCandidate c;
    c.identifier = tok[0];
    const std::string f = tok.size() > 1 ? tok[1] : tok[0];
    try {
      c.formula = parse_formula(f);
    } catch (const std::exception& e) {
      c.load_error = e.what();
    }
    out.push_back(std::move(c));
  }
  return out;
}

int cmd_screen(const Common& c, const ScreenSources& src) {
  const json cfg = config_json(c);
  const auto th = thresholds(c, cfg);
  std::vector<ScreenCandidate> cands;
  if (!src.manifest.empty()) cands = load_screen_manifest(src.manifest);
  if (!src.formulas.empty()) {
    auto f = read_formula_list(src.formulas);
    cands.insert(cands.end(), f.begin(), f.end());
  }

  // models outlive the predictors that reference them
  std::optional<LoadedModel> tc_m, conf_m, energy_m, gen_m;
  Predictors p;
  if (src.from_labels) {
    p.tc = [](const AtomicSystem& s) { return label_or_throw(s, "tc"); };
    p.confidence = [](const AtomicSystem& s) { return label_or_throw(s, "confidence"); };
    p.stability = [](const AtomicSystem& s, const std::string&) {
      return StabilityEstimate{label_or_throw(s, "e_form"), label_or_throw(s, "e_hull")};
    };
  }
  if (!src.tc_model.empty()) {
    tc_m.emplace(load_model(src.tc_model));
    p.tc = model_tc(tc_m->model);
  }
  if (!src.confidence_model.empty()) {
    conf_m.emplace(load_model(src.confidence_model));
    p.confidence = model_confidence(conf_m->model);
  }
  if (!src.energy_model.empty()) {
    if (src.references.empty()) throw std::runtime_error("--energy-model needs --references");
    energy_m.emplace(load_model(src.energy_model));
    p.stability = model_stability(energy_m->model, read_phase_csv(src.references), src.energy_tag);
  }
  if (!src.generator.empty()) {
    gen_m.emplace(load_model(src.generator));
    p.generator = model_generator(gen_m->model, gen_m->diffusion.schedule(), gen_m->diffusion.gen);
  }

  auto rep = screen(cands, p, th, c.seed, c.threads);
  auto o = open_out(out_dir(c) / "screen.csv");
  write_screen_csv(o, rep);
  std::cout << screen_summary(rep) << '\n';
  return rep.exit_code();
}

// ------------------------------------------------------------ metrics

int cmd_metrics(const Common& c, const std::string& kind, const std::string& input, double threshold) {
  std::vector<MetricRow> rows;
  int failed = 0;
  if (kind == "regression") {
    const auto t = read_table(input);
    const int cp = t.column("pred"), ct = t.column("truth"), cn = t.column("n_atoms", false);
    std::vector<double> p, y, n;
    for (std::size_t k = 0; k < t.rows.size(); ++k) {
      p.push_back(cell_number(t.rows[k], cp, k + 1));
      y.push_back(cell_number(t.rows[k], ct, k + 1));
      if (cn >= 0) n.push_back(cell_number(t.rows[k], cn, k + 1));
    }
    const std::size_t count = p.size();
    rows.push_back({"mae", mae_property(p, y), count});
    const auto ne = static_cast<Eigen::Index>(count);
    Eigen::MatrixXd pm = Eigen::Map<Eigen::VectorXd>(p.data(), ne), ym = Eigen::Map<Eigen::VectorXd>(y.data(), ne);
    rows.push_back({"rmse", rmse_components(pm, ym, 1), count});
    rows.push_back({"r2", r_squared(p, y), count});
    if (cn >= 0) {
      std::vector<int> na;
      for (double v : n) na.push_back(static_cast<int>(std::llround(v)));
      rows.push_back({"mae_energy_per_atom_mev", mae_energy_per_atom(p, y, na), count});
    }
  } else if (kind == "classification") {
    const auto t = read_table(input);
    const int cs = t.column("score"), cl = t.column("label");
    std::vector<double> s;
    std::vector<int> l;
    for (std::size_t k = 0; k < t.rows.size(); ++k) {
      s.push_back(cell_number(t.rows[k], cs, k + 1));
      l.push_back(static_cast<int>(std::llround(cell_number(t.rows[k], cl, k + 1))));
    }
    auto r = classification_metrics(s, l, threshold);
    const std::size_t count = s.size();
    rows.push_back({"precision", r.precision, count});
    rows.push_back({"recall", r.recall, count});
    rows.push_back({"f1", r.f1, count});
    rows.push_back({"accuracy", r.accuracy, count});
    rows.push_back({"auc", r.auc, count});
  } else if (kind == "match") {
    // one "pred.vasp truth.vasp" pair per line, relative to the list file
    std::ifstream in(input);
    if (!in) throw std::runtime_error("cannot read " + input);
    const auto base = fs::path(input).parent_path();
    std::vector<AtomicSystem> preds, truths;
    std::string line;
    while (std::getline(in, line)) {
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      auto tok = detail::split_ws(line);
      if (tok.empty()) continue;
      try {
        if (tok.size() != 2) throw std::runtime_error("expected two paths per line");
        auto resolve = [&](const std::string& s) { return fs::path(s).is_absolute() ? fs::path(s) : base / s; };
        auto a = read_poscar_file(resolve(tok[0]));
        auto b = read_poscar_file(resolve(tok[1]));
        preds.push_back(std::move(a));
        truths.push_back(std::move(b));
      } catch (const std::exception& e) {
        ++failed;
        std::cerr << line << ": " << e.what() << '\n';
      }
    }
    auto s = match_rate_and_rmse(preds, truths, {}, c.threads);
    rows.push_back({"match_rate_percent", s.match_rate_percent, s.total});
    if (s.mean_rmse) rows.push_back({"mean_rmse", *s.mean_rmse, s.matched});
  } else {
    throw std::runtime_error("unknown metrics kind '" + kind + "'");
  }
  auto o = open_out(out_dir(c) / "metrics.csv");
  write_metrics_csv(o, rows);
  std::cout << metrics_summary(rows).dump() << '\n';
  return failed ? kPartial : kClean;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"atomkit: periodic graphs, equivariant heads, crystal diffusion and screening"};
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  app.add_option("--seed", common.seed, "random seed");
  app.add_option("--config", common.config, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", common.out, "output directory");
  app.add_option("--threads", common.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--tc_min,--tc-min", common.tc_min, "screening: Tc must exceed this (K)");
  app.add_option("--confidence_min,--confidence-min", common.confidence_min, "screening: confidence must exceed this");
  app.add_option("--e_form_max,--e-form-max", common.e_form_max, "screening: formation energy must be below this (eV/atom)");
  app.add_option("--e_hull_max,--e-hull-max", common.e_hull_max, "screening: hull distance must be below this (eV/atom)");

  std::vector<std::string> files;
  int rc = kClean;

  auto* parse = app.add_subcommand("parse", "read POSCAR files, print a summary, optionally rewrite them");
  bool cartesian = false, rewrite = false;
  parse->add_option("files", files, "POSCAR files")->required();
  parse->add_flag("--cartesian", cartesian, "write Cartesian coordinates");
  parse->add_flag("--write", rewrite, "write normalised POSCARs to --out");
  parse->callback([&] { rc = cmd_parse(common, files, cartesian, rewrite); });

  auto* graph = app.add_subcommand("graph", "build the periodic graph and write its edge list");
  CrystalGraphOptions gopt;
  bool no_self_loops = false;
  graph->add_option("files", files, "POSCAR files")->required();
  graph->add_option("--r-cut,--r_cut", gopt.r_cut, "cutoff radius (A)");
  graph->add_option("--max-neighbors,--max_neighbors", gopt.max_neighbors, "per-atom neighbour cap, 0 = none");
  graph->add_flag("--self-images", gopt.include_self_images, "connect atoms to their own periodic images");
  graph->add_flag("--no-self-loops", no_self_loops, "omit lattice-vector self-loop edges");
  graph->callback([&] {
    gopt.self_loops = !no_self_loops;
    rc = cmd_graph(common, files, gopt);
  });

  auto* trn = app.add_subcommand("train", "train a model from a manifest");
  std::string manifest, mode;
  trn->add_option("--manifest", manifest, "manifest: <path> <tag> [key=value ...]")->required()->check(CLI::ExistingFile);
  trn->add_option("--mode", mode, "potential | denoise | property | classify");
  trn->callback([&] { rc = cmd_train(common, manifest, mode); });

  auto* pred = app.add_subcommand("predict", "run a checkpoint on structures");
  std::string checkpoint, tag;
  std::string pmode = "potential";
  pred->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  pred->add_option("--mode", pmode, "potential | denoise | property | classify | all");
  pred->add_option("--tag", tag, "energy standardisation tag");
  pred->add_option("files", files, "POSCAR files")->required();
  pred->callback([&] { rc = cmd_predict(common, checkpoint, pmode, tag, files); });

  auto* gen = app.add_subcommand("generate", "sample crystals for given compositions");
  std::vector<std::string> formulas;
  int count = 1;
  gen->add_option("--checkpoint", checkpoint, "denoiser checkpoint")->required()->check(CLI::ExistingFile);
  gen->add_option("--formula", formulas, "composition, e.g. Li2O (repeatable)")->required();
  gen->add_option("--count", count, "samples per composition")->check(CLI::PositiveNumber);
  gen->callback([&] { rc = cmd_generate(common, checkpoint, formulas, count); });

  auto* hull = app.add_subcommand("hull", "formation energy and hull distance of candidates");
  std::string refs, cands;
  hull->add_option("--references", refs, "CSV formula,energy_per_atom,source")->required()->check(CLI::ExistingFile);
  hull->add_option("--candidates", cands, "CSV in the same format")->required()->check(CLI::ExistingFile);
  bool include_self = false;
  hull->add_flag("--include-self", include_self, "add the candidate to its own reference set");
  hull->callback([&] { rc = cmd_hull(common, refs, cands, include_self); });

  auto* score = app.add_subcommand("score", "composite score and ranking of a candidate table");
  std::string input;
  score->add_option("--input", input, "CSV identifier,tc_pred,e_form,e_hull,confidence")->required()->check(CLI::ExistingFile);
  score->callback([&] { rc = cmd_score(common, input); });

  auto* scr = app.add_subcommand("screen", "gate and rank candidates");
  ScreenSources src;
  scr->add_option("--manifest", src.manifest, "structure manifest")->check(CLI::ExistingFile);
  scr->add_option("--formulas", src.formulas, "formula list, one '<id> <formula>' per line")->check(CLI::ExistingFile);
  scr->add_flag("--from-labels", src.from_labels, "take tc, confidence, e_form, e_hull from manifest labels");
  scr->add_option("--tc-model", src.tc_model, "property checkpoint")->check(CLI::ExistingFile);
  scr->add_option("--confidence-model", src.confidence_model, "classifier checkpoint")->check(CLI::ExistingFile);
  scr->add_option("--energy-model", src.energy_model, "potential checkpoint")->check(CLI::ExistingFile);
  scr->add_option("--energy-tag", src.energy_tag, "energy standardisation tag");
  scr->add_option("--references", src.references, "reference phases CSV")->check(CLI::ExistingFile);
  scr->add_option("--generator", src.generator, "denoiser checkpoint for formula candidates")->check(CLI::ExistingFile);
  scr->callback([&] {
    if (src.manifest.empty() && src.formulas.empty()) throw CLI::ValidationError("screen", "give --manifest and/or --formulas");
    rc = cmd_screen(common, src);
  });

  auto* met = app.add_subcommand("metrics", "evaluation metrics from prediction tables");
  std::string kind;
  double threshold = 0.5;
  met->add_option("kind", kind, "regression | classification | match")->required()->check(CLI::IsMember({"regression", "classification", "match"}));
  met->add_option("--input", input, "pred,truth[,n_atoms] | score,label | pair list")->required()->check(CLI::ExistingFile);
  met->add_option("--threshold", threshold, "classification threshold (score > threshold is positive)");
  met->callback([&] { rc = cmd_metrics(common, kind, input, threshold); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kClean : kFatal;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFatal;
  }
  return rc;
}

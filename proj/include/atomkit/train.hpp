#pragma once

// Training loop (AdamW-style moments, cosine schedule with linear warmup,
// global-norm clipping), energy normaliser fitting, checkpoints, loss CSV.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "atomkit/eqcore.hpp"
#include "json.hpp"

namespace atomkit {

struct Sample {
  AtomicSystem system;
  Targets targets;
};

// What one optimisation step actually sees for one sample.
struct PreparedSample {
  GraphTensors graph;
  Targets targets;
  std::optional<double> time;
};

// Turns a dataset entry into a training example; may draw noise from rng.
using SamplePrep = std::function<PreparedSample(const Sample&, std::mt19937_64&)>;

struct TrainOptions {
  int epochs = 20;
  double lr = 1e-3;
  double warmup_frac = 0.1;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 10.0;  // < 0 disables; 0 freezes the parameters
  int batch_size = 4;
  std::uint64_t seed = 0;
  HeadMode mode = HeadMode::Potential;
  LossWeights weights;
  LossMask mask;
  double sigma_pos = 0.3;
  double sigma_cell = 0.3;
  bool fit_normalizer = true;
  double divergence = 1e6;
  SamplePrep prep;  // unset: static graph, or denoising noise in Denoise mode
  std::function<void(int, const std::map<std::string, double>&)> on_epoch;
};

struct LossRecord {
  int epoch = 0;
  std::string term;
  double value = 0.0;
};

struct TrainReport {
  std::vector<LossRecord> curve;
  int steps = 0;
  int all_masked_batches = 0;

  std::vector<double> series(const std::string& term) const {
    std::vector<double> out;
    for (const auto& r : curve)
      if (r.term == term) out.push_back(r.value);
    return out;
  }
};

inline EnergyNormalizer fit_energy_normalizer(const std::vector<Sample>& data) {
  std::map<std::string, std::vector<double>> per_tag;
  for (const auto& s : data)
    if (s.targets.energy) per_tag[s.targets.tag].push_back(*s.targets.energy / static_cast<double>(s.system.size()));
  EnergyNormalizer n;
  for (const auto& [tag, v] : per_tag) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 1.0;
    if (!(sd > 1e-8)) sd = 1.0;
    n.stats[tag] = {m, sd};
  }
  return n;
}

// Learning-rate multiplier at 0-based step s of total.
inline double lr_schedule(int step, int total, double warmup_frac) {
  const int warm = static_cast<int>(std::ceil(warmup_frac * total));
  if (step < warm) return static_cast<double>(step + 1) / warm;
  const int rest = std::max(1, total - warm);
  const double progress = static_cast<double>(step - warm) / rest;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline SamplePrep default_prep(const Model& model, const TrainOptions& opt) {
  const ModelConfig cfg = model.config();
  if (opt.mode == HeadMode::Denoise) {
    const double sp = opt.sigma_pos, sc = opt.sigma_cell;
    return [cfg, sp, sc](const Sample& s, std::mt19937_64& rng) {
      auto p = perturb(s.system, rng, sp, sc);
      PreparedSample out{prepare_system(p.system, cfg), s.targets, std::nullopt};
      out.targets.pos_noise = p.eps_pos;
      if (p.eps_cell) out.targets.cell_noise = *p.eps_cell;
      return out;
    };
  }
  auto cache = std::make_shared<std::map<const Sample*, GraphTensors>>();
  return [cfg, cache](const Sample& s, std::mt19937_64&) {
    auto it = cache->find(&s);
    if (it == cache->end()) it = cache->emplace(&s, prepare_system(s.system, cfg)).first;
    return PreparedSample{it->second, s.targets, std::nullopt};
  };
}

// Mean loss over a batch of prepared samples.
inline LossResult batch_loss(const Model& model, const std::vector<PreparedSample>& batch, HeadSet heads,
                             const LossWeights& w, const LossMask& mask) {
  LossResult out;
  std::vector<Var> totals;
  for (const auto& ps : batch) {
    auto hv = model.heads(model.forward(ps.graph, ps.time), ps.graph, heads);
    auto r = multitask_loss(hv, ps.targets, static_cast<std::size_t>(ps.graph.n_atoms), model.normalizer, w, mask);
    if (!r.all_masked) out.all_masked = false;
    for (const auto& [k, v] : r.terms) out.terms[k] += v / static_cast<double>(batch.size());
    totals.push_back(r.total);
  }
  out.total = ad::scale(ad::add_sum(totals), 1.0 / static_cast<double>(batch.size()));
  return out;
}

inline TrainReport train(Model& model, const std::vector<Sample>& data, const TrainOptions& opt) {
  if (data.empty()) throw std::invalid_argument("training set is empty");
  if (opt.epochs < 0 || opt.batch_size < 1) throw std::invalid_argument("bad epoch or batch settings");
  if (opt.fit_normalizer) model.normalizer = fit_energy_normalizer(data);
  const SamplePrep prep = opt.prep ? opt.prep : default_prep(model, opt);
  const HeadSet heads = HeadSet::from_mode(opt.mode);
  auto& store = model.params();
  const auto n = static_cast<Eigen::Index>(store.flat_size());
  Eigen::VectorXd m1 = Eigen::VectorXd::Zero(n), m2 = Eigen::VectorXd::Zero(n);

  const int per_epoch = static_cast<int>((data.size() + static_cast<std::size_t>(opt.batch_size) - 1) / static_cast<std::size_t>(opt.batch_size));
  const int total_steps = std::max(1, per_epoch * opt.epochs);
  std::mt19937_64 rng(opt.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;

  TrainReport report;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    std::map<std::string, double> sums;
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
      std::vector<PreparedSample> batch;
      for (std::size_t k = start; k < std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size)); ++k)
        batch.push_back(prep(data[order[k]], rng));
      LossResult res;
      Eigen::VectorXd g = ad::gradients(
          [&] {
            res = batch_loss(model, batch, heads, opt.weights, opt.mask);
            return res.total;
          },
          store);
      const double value = res.total.scalar();
      if (!std::isfinite(value) || value > opt.divergence) {
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + " (loss " + std::to_string(value) + ")");
      }
      if (res.all_masked) {
        ++report.all_masked_batches;
        std::cerr << "warning: every loss term masked in a batch at epoch " << epoch << "\n";
      }
      const double frac = static_cast<double>(batch.size()) / static_cast<double>(data.size());
      total += value * frac;
      for (const auto& [k, v] : res.terms) sums[k] += v * frac;

      const double lr = opt.lr * lr_schedule(report.steps, total_steps, opt.warmup_frac);
      ++report.steps;
      if (opt.clip_norm == 0.0) continue;  // clipped to nothing: no movement
      const double gn = g.norm();
      if (opt.clip_norm > 0 && gn > opt.clip_norm) g *= opt.clip_norm / gn;
      m1 = opt.beta1 * m1 + (1 - opt.beta1) * g;
      m2 = opt.beta2 * m2 + (1 - opt.beta2) * g.cwiseProduct(g);
      const double b1 = 1 - std::pow(opt.beta1, report.steps), b2 = 1 - std::pow(opt.beta2, report.steps);
      Eigen::VectorXd p = store.flat_values();
      Eigen::VectorXd step = (m1 / b1).array() / ((m2 / b2).array().sqrt() + opt.adam_eps);
      p -= lr * (step + opt.weight_decay * p);
      store.set_flat_values(p);
    }
    report.curve.push_back({epoch, "total", total});
    for (const auto& [k, v] : sums) report.curve.push_back({epoch, k, v});
    sums["total"] = total;
    if (opt.on_epoch) opt.on_epoch(epoch, sums);
  }
  return report;
}

inline void write_loss_csv(std::ostream& out, const TrainReport& r) {
  out << "epoch,term,value\n";
  out.precision(10);
  for (const auto& rec : r.curve) out << rec.epoch << ',' << rec.term << ',' << rec.value << '\n';
}

// ---------------------------------------------------------------- checkpoints

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_json(const Model& model) {
  nlohmann::json j;
  j["format"] = "atomkit-checkpoint";
  j["version"] = kCheckpointVersion;
  j["config"] = model.config().to_json();
  j["config_hash"] = model.config().hash();
  nlohmann::json norm = nlohmann::json::object();
  for (const auto& [tag, ms] : model.normalizer.stats) norm[tag] = {ms.first, ms.second};
  j["normalizer"] = norm;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& p : model.params().all()) {
    const Matrix& v = p.var.value();
    std::vector<double> data(v.size());
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c) data[static_cast<std::size_t>(r * v.cols() + c)] = v(r, c);
    tensors.push_back({{"name", p.name}, {"shape", {v.rows(), v.cols()}}, {"data", data}});
  }
  j["tensors"] = tensors;
  return j;
}

inline Model model_from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", "") != "atomkit-checkpoint") throw std::runtime_error("not a checkpoint file");
  if (j.value("version", 0) != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
  auto cfg = ModelConfig::from_json(j.at("config"));
  if (cfg.hash() != j.at("config_hash").get<std::string>()) throw std::runtime_error("checkpoint config hash mismatch");
  Model model(cfg);
  for (const auto& [tag, ms] : j.at("normalizer").items()) model.normalizer.stats[tag] = {ms.at(0).get<double>(), ms.at(1).get<double>()};
  std::size_t seen = 0;
  for (const auto& t : j.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    if (!model.params().contains(name)) throw std::runtime_error("checkpoint tensor not in model: " + name);
    Matrix& v = model.params().get(name).mutable_value();
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    const auto data = t.at("data").get<std::vector<double>>();
    if (shape.size() != 2 || shape[0] != v.rows() || shape[1] != v.cols() || data.size() != static_cast<std::size_t>(v.size())) {
      throw std::runtime_error("checkpoint tensor shape mismatch: " + name);
    }
    for (Eigen::Index r = 0; r < v.rows(); ++r)
      for (Eigen::Index c = 0; c < v.cols(); ++c) v(r, c) = data[static_cast<std::size_t>(r * v.cols() + c)];
    ++seen;
  }
  if (seen != model.params().all().size()) throw std::runtime_error("checkpoint is missing tensors");
  return model;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << checkpoint_json(model).dump() << '\n';
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return model_from_checkpoint(nlohmann::json::parse(in));
}

}  // namespace atomkit

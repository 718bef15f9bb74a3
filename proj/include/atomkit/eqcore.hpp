#pragma once

// Toy-scale equivariant graph network: atom and edge-degree embeddings,
// attention blocks built from SO(2) convolutions in edge-aligned frames,
// long-range residuals, and the output heads.
//
// Feature layout: one (K x C) block per atom stacked row-wise, K = (L+1)^2,
// row index = atom * K + sh_index(l, m).

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "atomkit/autodiff.hpp"
#include "atomkit/geometry.hpp"
#include "atomkit/harmonics.hpp"
#include "json.hpp"

namespace atomkit {

using ad::Matrix;
using ad::Var;

enum class HeadMode { Potential, Denoise, Property, Classify };

inline HeadMode parse_head_mode(const std::string& s) {
  if (s == "potential") return HeadMode::Potential;
  if (s == "denoise") return HeadMode::Denoise;
  if (s == "property") return HeadMode::Property;
  if (s == "classify") return HeadMode::Classify;
  throw std::invalid_argument("unknown head mode '" + s + "'");
}

inline std::string head_mode_name(HeadMode m) {
  switch (m) {
    case HeadMode::Potential: return "potential";
    case HeadMode::Denoise: return "denoise";
    case HeadMode::Property: return "property";
    case HeadMode::Classify: return "classify";
  }
  return "?";
}

struct ModelConfig {
  int lmax = 2;
  int channels = 16;
  int blocks = 2;
  int heads = 2;
  double r_cut = 12.0;
  std::size_t max_neighbors = 20;
  int grid_resolution = 2;
  std::optional<std::vector<int>> lrc_layers;  // 1-based block indices; unset = last two
  int radial_basis = 32;
  int property_dim = 1;
  bool time_conditioning = false;
  int direct_channels = -1;  // l=0 channels activated pointwise; -1 = half
  double init_gain = 1.0;
  double norm_init = 0.5;  // initial per-degree gain of the RMS norms; keeps grid inputs small

  std::vector<int> effective_lrc() const {
    if (lrc_layers) return *lrc_layers;
    std::vector<int> out;
    for (int t = std::max(1, blocks - 1); t <= blocks; ++t) out.push_back(t);
    return out;
  }

  int effective_direct() const { return direct_channels < 0 ? channels / 2 : direct_channels; }

  void validate() const {
    if (lmax < 0 || lmax > kMaxDegree) throw std::invalid_argument("lmax out of range");
    if (channels < 1) throw std::invalid_argument("channels must be >= 1");
    if (blocks < 0) throw std::invalid_argument("blocks must be >= 0");
    if (heads < 1 || channels % heads != 0) throw std::invalid_argument("heads must divide channels");
    if (grid_resolution < 1) throw std::invalid_argument("grid resolution must be >= 1");
    if (!(r_cut > 0)) throw std::invalid_argument("cutoff must be positive");
    if (radial_basis < 1) throw std::invalid_argument("radial basis count must be >= 1");
    if (property_dim < 1) throw std::invalid_argument("property_dim must be >= 1");
    if (effective_direct() > channels) throw std::invalid_argument("direct_channels exceeds channels");
    for (int t : effective_lrc()) {
      if (t < 1 || t > blocks) throw std::invalid_argument("lrc layer " + std::to_string(t) + " outside 1..blocks");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["lmax"] = lmax;
    j["channels"] = channels;
    j["blocks"] = blocks;
    j["heads"] = heads;
    j["r_cut"] = r_cut;
    j["max_neighbors"] = max_neighbors;
    j["grid_resolution"] = grid_resolution;
    j["lrc_layers"] = effective_lrc();
    j["radial_basis"] = radial_basis;
    j["property_dim"] = property_dim;
    j["time_conditioning"] = time_conditioning;
    j["direct_channels"] = effective_direct();
    j["init_gain"] = init_gain;
    j["norm_init"] = norm_init;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.lmax = j.value("lmax", c.lmax);
    c.channels = j.value("channels", c.channels);
    c.blocks = j.value("blocks", c.blocks);
    c.heads = j.value("heads", c.heads);
    c.r_cut = j.value("r_cut", c.r_cut);
    c.max_neighbors = j.value("max_neighbors", c.max_neighbors);
    c.grid_resolution = j.value("grid_resolution", c.grid_resolution);
    if (j.contains("lrc_layers")) c.lrc_layers = j.at("lrc_layers").get<std::vector<int>>();
    c.radial_basis = j.value("radial_basis", c.radial_basis);
    c.property_dim = j.value("property_dim", c.property_dim);
    c.time_conditioning = j.value("time_conditioning", c.time_conditioning);
    c.direct_channels = j.value("direct_channels", c.direct_channels);
    c.init_gain = j.value("init_gain", c.init_gain);
    c.norm_init = j.value("norm_init", c.norm_init);
    c.validate();
    return c;
  }

  // FNV-1a over the canonical JSON text.
  std::string hash() const {
    const std::string text = to_json().dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
      h ^= ch;
      h *= 1099511628211ull;
    }
    std::ostringstream out;
    out << std::hex << h;
    return out.str();
  }

  CrystalGraphOptions graph_options() const {
    CrystalGraphOptions o;
    o.r_cut = r_cut;
    o.max_neighbors = max_neighbors;
    return o;
  }
};

// Per-dataset energy standardisation: y = (E - N*mean) / std with mean/std of
// E/N over the training records carrying that tag.
struct EnergyNormalizer {
  std::map<std::string, std::pair<double, double>> stats;

  std::pair<double, double> get(const std::string& tag) const {
    auto it = stats.find(tag);
    return it == stats.end() ? std::make_pair(0.0, 1.0) : it->second;
  }
  double standardize(double energy, std::size_t n, const std::string& tag) const {
    auto [m, s] = get(tag);
    return (energy - static_cast<double>(n) * m) / s;
  }
  double restore(double y, std::size_t n, const std::string& tag) const {
    auto [m, s] = get(tag);
    return y * s + static_cast<double>(n) * m;
  }
};

// Everything about a graph the network needs, computed once per structure.
// U in L = P U with P symmetric positive definite (rows of L are lattice vectors)
inline Matrix polar_rotation(const Lattice& l) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(l * l.transpose());
  const Eigen::Vector3d ev = es.eigenvalues();
  if (!(ev.minCoeff() > 0)) throw std::invalid_argument("polar_rotation: singular lattice");
  const Eigen::Matrix3d inv_sqrt = es.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
  return inv_sqrt * l;
}

struct GraphTensors {
  int n_atoms = 0;
  int n_edges = 0;
  std::vector<int> z;
  std::shared_ptr<const std::vector<int>> src;
  std::shared_ptr<const std::vector<int>> dst;
  std::shared_ptr<const std::vector<Matrix>> wigner;  // per edge, block-diagonal D(frame)
  Matrix rbf;                                          // E x radial_basis
  double avg_degree = 1.0;
  bool periodic = false;
  Lattice lattice = Lattice::Identity();
};

inline Matrix gaussian_rbf(const std::vector<double>& dist, int count, double r_cut) {
  Matrix out(static_cast<Eigen::Index>(dist.size()), count);
  const double width = count > 1 ? r_cut / (count - 1) : r_cut;
  for (std::size_t e = 0; e < dist.size(); ++e) {
    for (int k = 0; k < count; ++k) {
      const double mu = count > 1 ? r_cut * k / (count - 1) : 0.0;
      const double t = (dist[e] - mu) / width;
      out(static_cast<Eigen::Index>(e), k) = std::exp(-0.5 * t * t);
    }
  }
  return out;
}

inline GraphTensors prepare_graph(const GeometricGraph& g, const ModelConfig& cfg) {
  GraphTensors t;
  t.n_atoms = static_cast<int>(g.num_atoms());
  t.n_edges = static_cast<int>(g.edges.size());
  t.z = g.system.atom_numbers;
  auto src = std::make_shared<std::vector<int>>();
  auto dst = std::make_shared<std::vector<int>>();
  auto wig = std::make_shared<std::vector<Matrix>>();
  std::vector<double> dist;
  for (const auto& e : g.edges) {
    src->push_back(e.src);
    dst->push_back(e.dst);
    dist.push_back(e.length());
    wig->push_back(wigner_d_block(cfg.lmax, rotation_from_edge(e.displacement)));
  }
  t.src = src;
  t.dst = dst;
  t.wigner = wig;
  t.rbf = gaussian_rbf(dist, cfg.radial_basis, cfg.r_cut);
  t.avg_degree = g.avg_degree > 0 ? g.avg_degree : 1.0;
  t.periodic = g.system.periodic();
  if (t.periodic) t.lattice = *g.system.lattice;
  return t;
}

inline GraphTensors prepare_system(const AtomicSystem& s, const ModelConfig& cfg) {
  return prepare_graph(build_graph(s, cfg.graph_options()), cfg);
}

struct HeadSet {
  bool energy = false;
  bool forces = false;
  bool pos_noise = false;
  bool cell_noise = false;
  bool property = false;
  bool class_logit = false;

  static HeadSet from_mode(HeadMode m) {
    HeadSet h;
    switch (m) {
      case HeadMode::Potential: h.energy = h.forces = true; break;
      case HeadMode::Denoise: h.pos_noise = h.cell_noise = true; break;
      case HeadMode::Property: h.property = true; break;
      case HeadMode::Classify: h.class_logit = true; break;
    }
    return h;
  }
  static HeadSet all() { return {true, true, true, true, true, true}; }
};

// Differentiable head outputs. energy is in standardised units.
struct HeadVars {
  Var energy;       // 1 x 1
  Var forces;       // N x 3
  Var pos_noise;    // N x 3
  Var cell_noise;   // 3 x 3, crystals only
  Var property;     // 1 x property_dim
  Var class_logit;  // 1 x 1
};

struct PredictionBundle {
  std::optional<double> energy;  // eV
  std::optional<Matrix> forces;
  std::optional<Matrix> pos_noise;
  std::optional<Matrix> cell_noise;
  std::optional<Eigen::VectorXd> property;
  std::optional<double> class_logit;
};

class Model {
 public:
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    build_params(rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  EnergyNormalizer normalizer;

  int block_size() const { return sh_size(cfg_.lmax); }

  Var embed(const GraphTensors& g, std::optional<double> t = std::nullopt) const {
    const int k = block_size(), c = cfg_.channels, n = g.n_atoms;
    // atom embedding at l = 0
    auto zi = std::make_shared<const std::vector<int>>(g.z);
    Var atom = ad::add_row(ad::gather_rows(p("embed.atom.w"), zi), p("embed.atom.b"));
    if (cfg_.time_conditioning) {
      Matrix enc = timestep_encoding(t.value_or(0.0), c);
      Var te = ad::add_row(ad::matmul(ad::constant(enc), p("embed.time.w")), p("embed.time.b"));
      // the limit lattice scales with N, so the atom count rides along with t
      te = ad::add(te, ad::scale(p("embed.size.w"), std::log(static_cast<double>(n))));
      auto zeros = std::make_shared<const std::vector<int>>(static_cast<std::size_t>(n), 0);
      atom = ad::add(atom, ad::gather_rows(te, zeros));
    }
    Var h = place_order_zero(atom, n, 1, c);  // (N*K x C), only l=0 rows
    if (g.n_edges == 0) return h;

    // edge-degree embedding: phi(|r|, a_i, a_j) at m = 0, rotated back, summed, / avg degree
    std::vector<int> zs, zd;
    for (int e = 0; e < g.n_edges; ++e) {
      zs.push_back(g.z[static_cast<std::size_t>((*g.src)[e])]);
      zd.push_back(g.z[static_cast<std::size_t>((*g.dst)[e])]);
    }
    Var zsrc = ad::gather_rows(p("embed.radial.zemb"), std::make_shared<const std::vector<int>>(zs));
    Var zdst = ad::gather_rows(p("embed.radial.zemb"), std::make_shared<const std::vector<int>>(zd));
    Var in = ad::concat_cols(ad::concat_cols(ad::constant(g.rbf), zsrc), zdst);
    Var hid = ad::silu(ad::add_row(ad::matmul(in, p("embed.radial.w1")), p("embed.radial.b1")));
    Var msg = ad::add_row(ad::matmul(hid, p("embed.radial.w2")), p("embed.radial.b2"));  // E x (L+1)C
    Var g_edge = place_order_zero(msg, g.n_edges, cfg_.lmax + 1, c);
    Var rotated = ad::block_left_each(g.wigner, g_edge, true);
    Var agg = ad::segment_sum_blocks(rotated, g.src, n, k);
    return ad::add(h, ad::scale(agg, 1.0 / g.avg_degree));
  }

  // Final features after all blocks, the last normalisation and grid activation.
  Var forward(const GraphTensors& g, std::optional<double> t = std::nullopt) const {
    Var h0 = embed(g, t);
    Var x = h0;
    const auto lrc = cfg_.effective_lrc();
    const std::set<int> lrc_set(lrc.begin(), lrc.end());
    for (int b = 1; b <= cfg_.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      Var y = ad::rms_norm_degrees(x, p(pre + "norm1"), cfg_.lmax);
      Var a = attention(pre + "attn.", y, g);
      x = ad::add(x, a);
      Var y2 = ad::rms_norm_degrees(x, p(pre + "norm2"), cfg_.lmax);
      x = ad::add(x, ffn(pre + "ffn.", y2));
      if (lrc_set.count(b)) x = ad::add(x, h0);
      if (!x.value().allFinite()) throw std::runtime_error("non-finite features after block " + std::to_string(b));
    }
    if (cfg_.blocks == 0) return x;
    Var out = s2_act(ad::rms_norm_degrees(x, p("final.norm"), cfg_.lmax));
    if (!out.value().allFinite()) throw std::runtime_error("non-finite features after final normalisation");
    return out;
  }

  HeadVars heads(const Var& features, const GraphTensors& g, HeadSet which) const {
    HeadVars out;
    const int n = g.n_atoms;
    if (which.energy) {
      const std::string pre = g.periodic ? "head.energy_crys." : "head.energy_mol.";
      out.energy = ad::sum(scalar_head(pre, features, n));
    }
    if (which.forces) out.forces = vector_head("head.force.", features, g);
    if (which.pos_noise) out.pos_noise = vector_head("head.pos.", features, g);
    if (which.cell_noise && g.periodic) {
      // eps = A L~ + C U with L~ = P U (P = (L~ L~^T)^(1/2)). A and C are summed
      // per-atom invariants indexed by lattice vector; U carries the orientation.
      Var m18 = ad::sum_rows(scalar_head("head.cell.", features, n));  // 1 x 18
      std::vector<int> ia(9), ic(9);
      for (int k = 0; k < 9; ++k) {
        ia[static_cast<std::size_t>(k)] = k;
        ic[static_cast<std::size_t>(k)] = 9 + k;
      }
      Var a = ad::remap(m18, 3, 3, std::make_shared<const std::vector<int>>(ia));
      Var c = ad::remap(m18, 3, 3, std::make_shared<const std::vector<int>>(ic));
      out.cell_noise = ad::add(ad::matmul(a, ad::constant(g.lattice)), ad::matmul(c, ad::constant(polar_rotation(g.lattice))));
    }
    if (which.property) out.property = ad::mean_rows(scalar_head("head.property.", features, n));
    if (which.class_logit) out.class_logit = ad::mean_rows(scalar_head("head.class.", features, n));
    return out;
  }

  // Inference on one structure. t is the diffusion time fraction in [0, 1].
  PredictionBundle predict(const AtomicSystem& s, HeadSet which, const std::string& tag = "",
                           std::optional<double> t = std::nullopt) const {
    auto g = prepare_system(s, cfg_);
    return predict_graph(g, which, tag, t);
  }

  PredictionBundle predict_graph(const GraphTensors& g, HeadSet which, const std::string& tag = "",
                                 std::optional<double> t = std::nullopt) const {
    auto hv = heads(forward(g, t), g, which);
    PredictionBundle b;
    if (hv.energy.defined()) b.energy = normalizer.restore(hv.energy.scalar(), static_cast<std::size_t>(g.n_atoms), tag);
    if (hv.forces.defined()) b.forces = hv.forces.value();
    if (hv.pos_noise.defined()) b.pos_noise = hv.pos_noise.value();
    if (hv.cell_noise.defined()) b.cell_noise = hv.cell_noise.value();
    if (hv.property.defined()) b.property = hv.property.value().row(0).transpose();
    if (hv.class_logit.defined()) b.class_logit = hv.class_logit.scalar();
    return b;
  }

  // Grid activation on (M*K x C) features: channels [0, Cd) get a pointwise
  // SiLU on their l=0 coefficient, the rest go through the sphere.
  Var s2_act(const Var& x) const {
    const int c = static_cast<int>(x.cols());
    const int cd = std::min(cfg_.effective_direct(), c);
    const int k = block_size();
    auto gt = grid_transform(cfg_.lmax, cfg_.grid_resolution);
    auto to = std::make_shared<const Matrix>(gt->to);
    auto from = std::make_shared<const Matrix>(gt->from);
    std::optional<Var> direct, spectral;
    if (cd > 0) {
      Matrix mask = Matrix::Zero(x.rows(), cd);
      for (Eigen::Index r = 0; r < x.rows(); r += k) mask.row(r).setOnes();
      direct = ad::silu(ad::mul(ad::slice_cols(x, 0, cd), ad::constant(std::move(mask))));
    }
    if (cd < c) {
      Var sig = ad::block_left(to, ad::slice_cols(x, cd, c - cd));
      spectral = ad::block_left(from, ad::silu(sig));
    }
    if (direct && spectral) return ad::concat_cols(*direct, *spectral);
    return direct ? *direct : *spectral;
  }

 private:
  ModelConfig cfg_;
  ad::ParamStore params_;

  Var p(const std::string& name) const { return params_.get(name); }

  static Matrix timestep_encoding(double t, int dim) {
    Matrix enc(1, dim);
    const double pos = 1000.0 * t;
    for (int k = 0; k < dim; ++k) {
      const double freq = std::pow(10000.0, -static_cast<double>(k / 2 * 2) / dim);
      enc(0, k) = (k % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
    return enc;
  }

  // Scatter an (M x rows*C) matrix of m=0 coefficients into (M*K x C) blocks;
  // column block l lands on row sh_index(l, 0).
  Var place_order_zero(const Var& packed, int m, int degrees, int c) const {
    const int k = block_size();
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(m * k * c), -1);
    const int pc = degrees * c;
    for (int e = 0; e < m; ++e)
      for (int l = 0; l < degrees; ++l)
        for (int ch = 0; ch < c; ++ch) {
          (*idx)[static_cast<std::size_t>((e * k + l * l + l) * c + ch)] = e * pc + l * c + ch;
        }
    return ad::remap(packed, static_cast<Eigen::Index>(m) * k, c, idx);
  }

  Var order_zero_rows(const Var& x, int m) const {
    const int k = block_size();
    auto idx = std::make_shared<std::vector<int>>();
    for (int e = 0; e < m; ++e) idx->push_back(e * k);
    return ad::gather_rows(x, idx);
  }

  Var lin(const std::string& pre, const Var& x) const {
    std::vector<Var> w;
    for (int l = 0; l <= cfg_.lmax; ++l) w.push_back(p(pre + "w" + std::to_string(l)));
    return ad::degree_linear(x, w, p(pre + "b"), cfg_.lmax);
  }

  Var so2(const std::string& pre, const Var& x) const {
    std::vector<Var> w1, w2;
    for (int m = 1; m <= cfg_.lmax; ++m) {
      w1.push_back(p(pre + "re" + std::to_string(m)));
      w2.push_back(p(pre + "im" + std::to_string(m)));
    }
    return ad::so2_linear(x, p(pre + "m0"), w1, w2, cfg_.lmax);
  }

  Var ffn(const std::string& pre, const Var& x) const { return lin(pre + "lin2.", s2_act(lin(pre + "lin1.", x))); }

  // Equivariant graph attention; output width is set by the "out." weights.
  Var attention(const std::string& pre, const Var& x, const GraphTensors& g) const {
    const int k = block_size(), c = cfg_.channels, n = g.n_atoms;
    if (g.n_edges == 0) return lin(pre + "out.", ad::constant(Matrix::Zero(static_cast<Eigen::Index>(n) * k, c)));
    Var xi = ad::gather_blocks(x, g.src, k);
    Var xj = ad::gather_blocks(x, g.dst, k);
    Var edge = ad::block_left_each(g.wigner, ad::concat_cols(xi, xj), false);  // into the edge frame
    Var rad = ad::silu(ad::add_row(ad::matmul(ad::constant(g.rbf), p(pre + "rad.w1")), p(pre + "rad.b1")));
    Var gate = ad::add_row(ad::matmul(rad, p(pre + "rad.w2")), p(pre + "rad.b2"));  // E x 2C
    edge = ad::scale_blocks(edge, gate);
    Var v = so2(pre + "conv1.", edge);
    Var u = ad::silu(ad::add_row(ad::matmul(ad::pack_order_zero(edge, cfg_.lmax), p(pre + "u.w")), p(pre + "u.b")));
    Var logits = ad::matmul(u, p(pre + "alpha"));  // E x heads
    Var v2 = so2(pre + "conv2.", s2_act(v));
    Var back = ad::block_left_each(g.wigner, v2, true);
    Var alpha = ad::segment_softmax(logits, g.src, n);
    const int per_head = c / cfg_.heads;
    auto idx = std::make_shared<std::vector<int>>();
    for (int e = 0; e < g.n_edges; ++e)
      for (int ch = 0; ch < c; ++ch) idx->push_back(e * cfg_.heads + ch / per_head);
    Var weights = ad::remap(alpha, g.n_edges, c, idx);
    Var agg = ad::segment_sum_blocks(ad::scale_blocks(back, weights), g.src, n, k);
    return lin(pre + "out.", agg);
  }

  // Per-atom scalars: linear, grid activation, l=0 rows, dense projection.
  Var scalar_head(const std::string& pre, const Var& x, int n) const {
    Var h = s2_act(lin(pre + "lin1.", x));
    return ad::add_row(ad::matmul(order_zero_rows(h, n), p(pre + "proj.w")), p(pre + "proj.b"));
  }

  // Attention head reduced to one channel; degree-1 coefficients as (x, y, z).
  Var vector_head(const std::string& pre, const Var& x, const GraphTensors& g) const {
    Var out = attention(pre + "attn.", x, g);  // N*K x 1
    const int k = block_size();
    auto idx = std::make_shared<std::vector<int>>();
    for (int e = 0; e < g.n_atoms; ++e) {
      idx->push_back(e * k + sh_index(1, 1));   // x
      idx->push_back(e * k + sh_index(1, -1));  // y
      idx->push_back(e * k + sh_index(1, 0));   // z
    }
    if (cfg_.lmax < 1) return ad::constant(Matrix::Zero(g.n_atoms, 3));
    return ad::remap(out, g.n_atoms, 3, idx);
  }

  // ------------------------------------------------------------ parameters

  Matrix init(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double fan_in) {
    std::normal_distribution<double> nd(0.0, cfg_.init_gain / std::sqrt(std::max(1.0, fan_in)));
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = nd(rng);
    return m;
  }

  void add_lin(std::mt19937_64& rng, const std::string& pre, int cin, int cout) {
    for (int l = 0; l <= cfg_.lmax; ++l) params_.add(pre + "w" + std::to_string(l), init(rng, cin, cout, cin));
    params_.add(pre + "b", Matrix::Zero(1, cout));
  }

  void add_so2(std::mt19937_64& rng, const std::string& pre, int cin, int cout) {
    const int d = cfg_.lmax + 1;
    params_.add(pre + "m0", init(rng, d * cin, d * cout, d * cin));
    for (int m = 1; m <= cfg_.lmax; ++m) {
      const int dm = cfg_.lmax - m + 1;
      params_.add(pre + "re" + std::to_string(m), init(rng, dm * cin, dm * cout, 2.0 * dm * cin));
      params_.add(pre + "im" + std::to_string(m), init(rng, dm * cin, dm * cout, 2.0 * dm * cin));
    }
  }

  void add_dense(std::mt19937_64& rng, const std::string& pre, int cin, int cout) {
    params_.add(pre + "w", init(rng, cin, cout, cin));
    params_.add(pre + "b", Matrix::Zero(1, cout));
  }

  void add_attention(std::mt19937_64& rng, const std::string& pre, int cout) {
    const int c = cfg_.channels, d = cfg_.lmax + 1;
    params_.add(pre + "rad.w1", init(rng, cfg_.radial_basis, c, cfg_.radial_basis));
    params_.add(pre + "rad.b1", Matrix::Zero(1, c));
    params_.add(pre + "rad.w2", init(rng, c, 2 * c, c));
    params_.add(pre + "rad.b2", Matrix::Constant(1, 2 * c, 1.0));
    add_so2(rng, pre + "conv1.", 2 * c, c);
    params_.add(pre + "u.w", init(rng, d * 2 * c, c, d * 2 * c));
    params_.add(pre + "u.b", Matrix::Zero(1, c));
    params_.add(pre + "alpha", init(rng, c, cfg_.heads, c));
    add_so2(rng, pre + "conv2.", c, c);
    add_lin(rng, pre + "out.", c, cout);
  }

  void add_scalar_head(std::mt19937_64& rng, const std::string& pre, int cout) {
    add_lin(rng, pre + "lin1.", cfg_.channels, cfg_.channels);
    add_dense(rng, pre + "proj.", cfg_.channels, cout);
  }

  void build_params(std::mt19937_64& rng) {
    const int c = cfg_.channels, d = cfg_.lmax + 1;
    const int zdim = 8;
    params_.add("embed.atom.w", init(rng, kMaxAtomicNumber + 1, c, 1.0));
    params_.add("embed.atom.b", Matrix::Zero(1, c));
    if (cfg_.time_conditioning) {
      add_dense(rng, "embed.time.", c, c);
      params_.add("embed.size.w", init(rng, 1, c, 1.0));
    }
    params_.add("embed.radial.zemb", init(rng, kMaxAtomicNumber + 1, zdim, 1.0));
    params_.add("embed.radial.w1", init(rng, cfg_.radial_basis + 2 * zdim, c, cfg_.radial_basis + 2 * zdim));
    params_.add("embed.radial.b1", Matrix::Zero(1, c));
    params_.add("embed.radial.w2", init(rng, c, d * c, c));
    params_.add("embed.radial.b2", Matrix::Zero(1, d * c));
    for (int b = 1; b <= cfg_.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      params_.add(pre + "norm1", Matrix::Constant(d, c, cfg_.norm_init));
      add_attention(rng, pre + "attn.", c);
      params_.add(pre + "norm2", Matrix::Constant(d, c, cfg_.norm_init));
      add_lin(rng, pre + "ffn.lin1.", c, c);
      add_lin(rng, pre + "ffn.lin2.", c, c);
    }
    params_.add("final.norm", Matrix::Constant(d, c, cfg_.norm_init));
    add_scalar_head(rng, "head.energy_mol.", 1);
    add_scalar_head(rng, "head.energy_crys.", 1);
    add_attention(rng, "head.force.attn.", 1);
    add_attention(rng, "head.pos.attn.", 1);
    add_scalar_head(rng, "head.cell.", 18);
    add_scalar_head(rng, "head.property.", cfg_.property_dim);
    add_scalar_head(rng, "head.class.", 1);
  }
};

// ---------------------------------------------------------------- noise

struct Perturbation {
  AtomicSystem system;
  Matrix eps_pos;                  // N x 3
  std::optional<Matrix> eps_cell;  // 3 x 3, crystals only
};

// x~ = x + s_pos * eps, l~ = l + s_cell * eps; the drawn eps is returned for supervision.
inline Perturbation perturb(const AtomicSystem& s, std::mt19937_64& rng, double sigma_pos = 0.3, double sigma_cell = 0.3) {
  if (sigma_pos < 0 || sigma_cell < 0) throw std::invalid_argument("noise scale must be >= 0");
  std::normal_distribution<double> nd(0.0, 1.0);
  Perturbation p;
  p.system = s;
  p.eps_pos.resize(static_cast<Eigen::Index>(s.size()), 3);
  for (Eigen::Index i = 0; i < p.eps_pos.rows(); ++i)
    for (int c = 0; c < 3; ++c) p.eps_pos(i, c) = nd(rng);
  p.system.positions += sigma_pos * p.eps_pos;
  if (s.lattice) {
    Matrix e(3, 3);
    for (int k = 0; k < 9; ++k) e(k / 3, k % 3) = nd(rng);
    *p.system.lattice += sigma_cell * e;
    p.eps_cell = e;
  }
  return p;
}

// ---------------------------------------------------------------- loss

struct LossWeights {
  double pos = 1.0;
  double cell = 1.0;
  double energy = 5.0;
  double force = 20.0;
  double property = 1.0;
  double classify = 1.0;

  void validate() const {
    for (double w : {pos, cell, energy, force, property, classify})
      if (!(w >= 0)) throw std::invalid_argument("loss weights must be nonnegative");
  }
};

// Supervision for one structure. Missing entries simply stay unset.
struct Targets {
  std::optional<double> energy;  // eV, total
  std::string tag;               // dataset tag for energy standardisation
  std::optional<Matrix> forces;
  std::optional<Matrix> pos_noise;
  std::optional<Matrix> cell_noise;
  std::optional<Eigen::VectorXd> property;
  std::optional<Eigen::VectorXd> property_mask;  // 1 = defined; zero-padded entries carry 0
  std::optional<double> label;                   // 0/1
};

// Per-term switch on top of target presence.
struct LossMask {
  bool pos = true;
  bool cell = true;
  bool energy = true;
  bool force = true;
  bool property = true;
  bool classify = true;
};

struct LossResult {
  Var total;
  std::map<std::string, double> terms;  // weighted contributions
  bool all_masked = true;
};

inline LossResult multitask_loss(const HeadVars& h, const Targets& t, std::size_t n_atoms, const EnergyNormalizer& norm,
                                 const LossWeights& w = {}, const LossMask& mask = {}) {
  w.validate();
  LossResult r;
  std::vector<Var> parts;
  auto push = [&](const std::string& name, double weight, Var term) {
    Var v = ad::scale(term, weight);
    r.terms[name] = v.scalar();
    parts.push_back(v);
    r.all_masked = false;
  };
  if (mask.pos && t.pos_noise && h.pos_noise.defined()) push("pos", w.pos, ad::masked_mae(h.pos_noise, *t.pos_noise));
  if (mask.cell && t.cell_noise && h.cell_noise.defined()) push("cell", w.cell, ad::masked_mae(h.cell_noise, *t.cell_noise));
  if (mask.energy && t.energy && h.energy.defined()) {
    Matrix y(1, 1);
    y(0, 0) = norm.standardize(*t.energy, n_atoms, t.tag);
    push("energy", w.energy, ad::masked_mae(h.energy, y));
  }
  if (mask.force && t.forces && h.forces.defined()) push("force", w.force, ad::masked_mae(h.forces, *t.forces));
  if (mask.property && t.property && h.property.defined()) {
    Matrix y = t.property->transpose();
    Matrix m = t.property_mask ? Matrix(t.property_mask->transpose()) : Matrix::Ones(1, y.cols());
    push("property", w.property, ad::masked_mae(h.property, y, m));
  }
  if (mask.classify && t.label && h.class_logit.defined()) {
    push("classify", w.classify, ad::bce_with_logits(h.class_logit, Matrix::Constant(1, 1, *t.label)));
  }
  r.total = parts.empty() ? ad::constant(Matrix::Zero(1, 1)) : ad::add_sum(parts);
  return r;
}

}  // namespace atomkit

#pragma once

// Structure containers and text formats: VASP-5 POSCAR and the line-oriented
// dataset manifest.

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "atomkit/elements.hpp"

namespace atomkit {

using Positions = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using Lattice = Eigen::Matrix3d;  // rows are lattice vectors

struct Labels {
  std::string id;
  std::map<std::string, double> scalars;
  std::map<std::string, std::vector<double>> vectors;

  std::optional<double> scalar(const std::string& key) const {
    auto it = scalars.find(key);
    if (it == scalars.end()) return std::nullopt;
    return it->second;
  }
};

struct AtomicSystem {
  std::vector<int> atom_numbers;
  Positions positions;
  std::optional<Lattice> lattice;
  Labels labels;

  std::size_t size() const { return atom_numbers.size(); }
  bool periodic() const { return lattice.has_value(); }

  void validate() const {
    if (atom_numbers.empty()) throw std::invalid_argument("atomic system has no atoms");
    if (static_cast<std::size_t>(positions.rows()) != atom_numbers.size()) {
      throw std::invalid_argument("positions/atom count mismatch");
    }
    for (int z : atom_numbers) {
      if (z < 1 || z > kMaxAtomicNumber) {
        throw std::invalid_argument("atomic number out of range: " + std::to_string(z));
      }
    }
    if (!positions.allFinite()) throw std::invalid_argument("non-finite atomic position");
    if (lattice && !(lattice->determinant() > 0.0)) {
      throw std::invalid_argument("lattice determinant must be strictly positive");
    }
  }
};

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

namespace detail {

inline std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

// Locale-independent number parsing.
inline std::optional<double> to_double(std::string_view s) {
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::optional<long> to_long(std::string_view s) {
  long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::scientific, 15);
  if (ec != std::errc()) throw std::runtime_error("number formatting failed");
  return std::string(buf, p);
}

inline std::string trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

}  // namespace detail

inline AtomicSystem parse_poscar(std::string_view text) {
  std::vector<std::string> lines;
  {
    std::size_t start = 0;
    while (start <= text.size()) {
      std::size_t end = text.find('\n', start);
      if (end == std::string_view::npos) end = text.size();
      std::string line(text.substr(start, end - start));
      if (!line.empty() && line.back() == '\r') line.pop_back();
      lines.push_back(std::move(line));
      if (end == text.size()) break;
      start = end + 1;
    }
  }
  auto need = [&](std::size_t idx, const char* what) -> const std::string& {
    if (idx >= lines.size()) throw ParseError(static_cast<int>(idx) + 1, std::string("missing ") + what);
    return lines[idx];
  };
  auto number = [](const std::string& tok, int line, const char* what) {
    auto v = detail::to_double(tok);
    if (!v || !std::isfinite(*v)) throw ParseError(line, std::string("invalid ") + what + " '" + tok + "'");
    return *v;
  };

  need(0, "comment line");

  auto scale_tok = detail::split_ws(need(1, "scale line"));
  if (scale_tok.empty()) throw ParseError(2, "missing universal scale");
  const double scale = number(scale_tok[0], 2, "scale");
  if (!(scale > 0.0)) throw ParseError(2, "universal scale must be positive");

  Lattice lattice;
  for (int r = 0; r < 3; ++r) {
    auto tok = detail::split_ws(need(2 + r, "lattice row"));
    if (tok.size() < 3) throw ParseError(3 + r, "lattice row needs 3 numbers");
    for (int c = 0; c < 3; ++c) lattice(r, c) = scale * number(tok[c], 3 + r, "lattice component");
  }

  auto species = detail::split_ws(need(5, "species line"));
  if (species.empty()) throw ParseError(6, "empty species line");
  if (detail::to_long(species[0])) {
    throw ParseError(6, "species line missing (VASP 4 format is not supported)");
  }
  std::vector<int> species_z;
  for (const auto& s : species) {
    auto z = atomic_number(s);
    if (!z) throw ParseError(6, "unknown element symbol '" + s + "'");
    species_z.push_back(*z);
  }

  auto counts_tok = detail::split_ws(need(6, "counts line"));
  if (counts_tok.size() != species_z.size()) throw ParseError(7, "species/count length mismatch");
  std::vector<int> atom_numbers;
  for (std::size_t s = 0; s < counts_tok.size(); ++s) {
    auto n = detail::to_long(counts_tok[s]);
    if (!n || *n <= 0) throw ParseError(7, "invalid atom count '" + counts_tok[s] + "'");
    atom_numbers.insert(atom_numbers.end(), static_cast<std::size_t>(*n), species_z[s]);
  }

  std::string mode = detail::trim(need(7, "coordinate mode line"));
  if (mode.empty()) throw ParseError(8, "empty coordinate mode line");
  const char m0 = static_cast<char>(std::tolower(static_cast<unsigned char>(mode[0])));
  if (m0 == 's') throw ParseError(8, "selective dynamics is not supported");
  bool direct;
  if (m0 == 'd') {
    direct = true;
  } else if (m0 == 'c' || m0 == 'k') {
    direct = false;
  } else {
    throw ParseError(8, "expected 'Direct' or 'Cartesian', got '" + mode + "'");
  }

  const std::size_t n = atom_numbers.size();
  Positions coords(static_cast<Eigen::Index>(n), 3);
  for (std::size_t i = 0; i < n; ++i) {
    const int line_no = static_cast<int>(8 + i) + 1;
    if (8 + i >= lines.size()) throw ParseError(line_no, "count mismatch: expected " + std::to_string(n) + " coordinate rows");
    auto tok = detail::split_ws(lines[8 + i]);
    if (tok.size() < 3) throw ParseError(line_no, "count mismatch: coordinate row needs 3 numbers");
    for (int c = 0; c < 3; ++c) coords(static_cast<Eigen::Index>(i), c) = number(tok[c], line_no, "coordinate");
  }
  for (std::size_t k = 8 + n; k < lines.size(); ++k) {
    if (!detail::trim(lines[k]).empty()) {
      throw ParseError(static_cast<int>(k) + 1, "unexpected trailing block (velocity/extra blocks are not supported)");
    }
  }

  AtomicSystem sys;
  sys.atom_numbers = std::move(atom_numbers);
  sys.positions = direct ? Positions(coords * lattice) : Positions(coords * scale);
  sys.lattice = lattice;
  if (!(lattice.determinant() > 0.0)) throw ParseError(3, "lattice determinant must be strictly positive");
  return sys;
}

enum class CoordinateMode { Direct, Cartesian };

// Species are grouped contiguously in first-appearance order; the atom order
// of the output is therefore the stable grouping of the input order.
inline std::string write_poscar(const AtomicSystem& system, CoordinateMode mode = CoordinateMode::Direct,
                                const std::string& comment = "atomkit") {
  if (!system.lattice) throw std::invalid_argument("write_poscar requires a lattice");
  const Lattice& lat = *system.lattice;

  std::vector<int> order_z;
  for (int z : system.atom_numbers) {
    if (std::find(order_z.begin(), order_z.end(), z) == order_z.end()) order_z.push_back(z);
  }
  std::vector<std::size_t> perm;
  std::vector<std::size_t> counts;
  for (int z : order_z) {
    std::size_t c = 0;
    for (std::size_t i = 0; i < system.atom_numbers.size(); ++i) {
      if (system.atom_numbers[i] == z) {
        perm.push_back(i);
        ++c;
      }
    }
    counts.push_back(c);
  }

  std::ostringstream out;
  out << (comment.find('\n') == std::string::npos ? comment : std::string("atomkit")) << '\n';
  out << "1.0\n";
  for (int r = 0; r < 3; ++r) {
    out << "  " << detail::format_double(lat(r, 0)) << ' ' << detail::format_double(lat(r, 1)) << ' '
        << detail::format_double(lat(r, 2)) << '\n';
  }
  for (std::size_t s = 0; s < order_z.size(); ++s) out << (s ? " " : "") << element_symbol(order_z[s]);
  out << '\n';
  for (std::size_t s = 0; s < counts.size(); ++s) out << (s ? " " : "") << counts[s];
  out << '\n';
  out << (mode == CoordinateMode::Direct ? "Direct\n" : "Cartesian\n");
  const Eigen::Matrix3d inv = lat.inverse();
  for (std::size_t i : perm) {
    Eigen::RowVector3d x = system.positions.row(static_cast<Eigen::Index>(i));
    if (mode == CoordinateMode::Direct) x = x * inv;
    out << "  " << detail::format_double(x(0)) << ' ' << detail::format_double(x(1)) << ' '
        << detail::format_double(x(2)) << '\n';
  }
  return out.str();
}

inline AtomicSystem read_poscar_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open structure file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_poscar(ss.str());
}

struct ManifestRecord {
  std::filesystem::path path;
  std::string tag;
  Labels labels;
};

struct LoadedRecord {
  AtomicSystem system;
  Labels labels;
  std::string tag;
};

// One record per line: "<path> <tag> [key=value ...]". Values are numbers, or
// comma-separated number lists for vector labels. '#' starts a comment. The
// record identifier is the "id" key when present, otherwise the path.
inline std::vector<ManifestRecord> parse_manifest(std::string_view text) {
  std::vector<ManifestRecord> records;
  std::set<std::string> ids;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    auto tok = detail::split_ws(line);
    if (tok.empty()) continue;
    if (tok.size() < 2) throw ParseError(line_no, "manifest record needs a path and a dataset tag");
    ManifestRecord rec;
    rec.path = tok[0];
    rec.tag = tok[1];
    rec.labels.id = tok[0];
    for (std::size_t k = 2; k < tok.size(); ++k) {
      auto eq = tok[k].find('=');
      if (eq == std::string::npos || eq == 0) throw ParseError(line_no, "expected key=value, got '" + tok[k] + "'");
      std::string key = tok[k].substr(0, eq);
      std::string value = tok[k].substr(eq + 1);
      if (key == "id") {
        rec.labels.id = value;
        continue;
      }
      if (value.find(',') != std::string::npos) {
        std::vector<double> vec;
        std::size_t s = 0;
        while (s <= value.size()) {
          std::size_t e = value.find(',', s);
          if (e == std::string::npos) e = value.size();
          auto v = detail::to_double(std::string_view(value).substr(s, e - s));
          if (!v) throw ParseError(line_no, "invalid number in vector label '" + key + "'");
          vec.push_back(*v);
          s = e + 1;
        }
        rec.labels.vectors[key] = std::move(vec);
      } else {
        auto v = detail::to_double(value);
        if (!v) throw ParseError(line_no, "invalid number for label '" + key + "'");
        rec.labels.scalars[key] = *v;
      }
    }
    if (!ids.insert(rec.labels.id).second) throw ParseError(line_no, "duplicate record identifier '" + rec.labels.id + "'");
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<LoadedRecord> load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw std::runtime_error("cannot open manifest: " + manifest_path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto records = parse_manifest(ss.str());
  const auto base = manifest_path.parent_path();
  std::vector<LoadedRecord> out;
  out.reserve(records.size());
  for (auto& rec : records) {
    auto p = rec.path.is_absolute() ? rec.path : base / rec.path;
    if (!std::filesystem::exists(p)) throw std::runtime_error("missing structure file: " + p.string());
    LoadedRecord lr{read_poscar_file(p), rec.labels, rec.tag};
    lr.system.labels = rec.labels;
    out.push_back(std::move(lr));
  }
  return out;
}

}  // namespace atomkit

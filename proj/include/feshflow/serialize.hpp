#pragma once

// JSON schemas for the basis, operators, and kernels (oracle cross-checks
// and reproducible artifacts), plus CSV table writers.

#include <fstream>
#include <json.hpp>

#include "feshflow/kernels.hpp"

namespace feshflow {

using nlohmann::json;

inline json basis_to_json(const FockBasis& b) {
  json j;
  j["delta"] = b.grid().delta();
  j["max_mode"] = b.grid().max_mode();
  j["n_max"] = b.n_max();
  j["states"] = b.states();
  return j;
}

inline FockBasis basis_from_json(const json& j) {
  ModeGrid grid(j.at("delta").get<double>(), j.at("max_mode").get<int>());
  FockBasis b(grid, j.at("n_max").get<int>());
  const auto states = j.at("states").get<std::vector<Occupation>>();
  if (states != b.states())
    throw std::runtime_error("basis_from_json: state list does not match the parameters");
  return b;
}

inline json complex_to_json(const cx& v) { return json::array({v.real(), v.imag()}); }
inline cx complex_from_json(const json& j) { return cx(j.at(0).get<double>(), j.at(1).get<double>()); }

inline json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(complex_to_json(m(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat matrix_from_json(const json& j) {
  const int rows = static_cast<int>(j.size());
  const int cols = rows == 0 ? 0 : static_cast<int>(j.at(0).size());
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = complex_from_json(j.at(r).at(c));
  return m;
}

inline json linop_to_json(const LinOp& op) {
  json j;
  j["range"] = op.range_mask().indices();
  j["domain"] = op.domain_mask().indices();
  j["entries"] = matrix_to_json(op.entries());
  return j;
}

inline LinOp linop_from_json(const json& j, const FockBasis& b) {
  return LinOp(&b, Mask(j.at("range").get<std::vector<int>>()),
               Mask(j.at("domain").get<std::vector<int>>()),
               matrix_from_json(j.at("entries")));
}

inline json kernel_to_json(const KernelSeq& w) {
  json j;
  j["mode_window"] = w.mode_window();
  j["m_max"] = w.m_max();
  j["zdeg"] = w.zdeg();
  j["z_scale"] = w.z_scale();
  j["r_grid"] = w.rgrid().pts;
  json comps = json::array();
  for (const auto& comp : w.components()) {
    json jc;
    jc["m"] = comp.m;
    jc["n"] = comp.n;
    json combos = json::array(), vals = json::array(), drvs = json::array();
    for (size_t c = 0; c < comp.combos.size(); ++c) {
      combos.push_back(json{{"js", comp.combos[c].js}, {"ls", comp.combos[c].ls}});
      vals.push_back(matrix_to_json(comp.val[c]));
      drvs.push_back(matrix_to_json(comp.drv[c]));
    }
    jc["combos"] = std::move(combos);
    jc["val"] = std::move(vals);
    jc["drv"] = std::move(drvs);
    comps.push_back(std::move(jc));
  }
  j["components"] = std::move(comps);
  return j;
}

inline KernelSeq kernel_from_json(const json& j, const FockBasis& b) {
  RGrid rg;
  rg.pts = j.at("r_grid").get<std::vector<double>>();
  rg.slot_of_state.resize(b.dim());
  for (int i = 0; i < b.dim(); ++i) {
    const int s = rg.slot_near(b.hph_value(i), 1e-9);
    if (s < 0) throw std::runtime_error("kernel_from_json: r-grid misses an eigenvalue");
    rg.slot_of_state[i] = s;
  }
  KernelSeq w(&b, rg, j.at("mode_window").get<int>(), j.at("m_max").get<int>(),
              j.at("zdeg").get<int>(), j.at("z_scale").get<double>());
  const auto& comps = j.at("components");
  if (comps.size() < w.components().size())
    throw std::runtime_error("kernel_from_json: missing components");
  // Combos may have been reduced (identifiable gauge); rebuild per file.
  for (size_t ci = 0; ci < w.components().size(); ++ci) {
    auto& comp = w.components()[ci];
    const auto& jc = comps.at(ci);
    if (jc.at("m").get<int>() != comp.m || jc.at("n").get<int>() != comp.n)
      throw std::runtime_error("kernel_from_json: component order mismatch");
    comp.combos.clear();
    comp.val.clear();
    comp.drv.clear();
    const auto& combos = jc.at("combos");
    for (size_t c = 0; c < combos.size(); ++c) {
      comp.combos.push_back(Combo{combos.at(c).at("js").get<std::vector<int>>(),
                                  combos.at(c).at("ls").get<std::vector<int>>()});
      comp.val.push_back(matrix_from_json(jc.at("val").at(c)));
      comp.drv.push_back(matrix_from_json(jc.at("drv").at(c)));
    }
  }
  return w;
}

// --- CSV ------------------------------------------------------------------

class CsvWriter {
public:
  explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}
  void add_row(const std::vector<std::string>& row) {
    if (row.size() != header_.size()) throw std::invalid_argument("CsvWriter: column count");
    rows_.push_back(row);
  }
  std::string str() const {
    std::string out = join(header_);
    for (const auto& r : rows_) out += join(r);
    return out;
  }
  void write(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("CsvWriter: cannot open " + path);
    f << str();
  }

private:
  static std::string join(const std::vector<std::string>& row) {
    std::string line;
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) line += ',';
      line += row[i];
    }
    line += '\n';
    return line;
  }
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Atomic-ish file write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc | std::ios::binary);
    if (!f) throw std::runtime_error("write_file_atomic: cannot open " + tmp);
    f << content;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("write_file_atomic: rename failed for " + path);
}

}  // namespace feshflow

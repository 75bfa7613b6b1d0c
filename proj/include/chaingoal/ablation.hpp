#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "chaingoal/common.hpp"

namespace chaingoal {

// Ablation axes are named after the quantity they vary; each maps to one
// config key, and every cell is the base config with exactly that key
// replaced. Sweeping several axes produces per-axis variants, not a cross
// product.
inline const std::vector<std::pair<std::string, std::string>>& ablation_axes() {
  static const std::vector<std::pair<std::string, std::string>> axes = {
      {"H", "hierarchy.horizon"},
      {"k", "hierarchy.k"},
      {"causal_mixer_mode", "hierarchy.causal_mixer_mode"},
      {"order", "hierarchy.generation_order"},
      {"teacher_forcing", "hierarchy.teacher_forcing"},
      {"beta", "weights.beta"},
      {"lambda_h", "weights.lambda_h"},
  };
  return axes;
}

inline nlohmann::json default_matrix() {
  return {{"H", {0, 1, 2, 5, 10}},
          {"k", {5, 10, 25, 50}},
          {"causal_mixer_mode", {"learnable", "fixed_average", "none"}},
          {"order", {"reverse", "forward"}},
          {"teacher_forcing", {true, false}},
          {"beta", {1, 3, 10}},
          {"lambda_h", {0.02, 0.04, 0.1, 1.0}}};
}

struct AblationCell {
  std::string axis;        // e.g. "H"
  std::string config_key;  // e.g. "hierarchy.horizon"
  nlohmann::json value;

  std::string value_text() const {
    return value.is_string() ? value.get<std::string>() : value.dump();
  }
  std::string label() const { return axis + "=" + value_text(); }
};

inline std::vector<AblationCell> expand_matrix(const nlohmann::json& matrix) {
  if (!matrix.is_object()) throw ConfigError("ablation: matrix must be a JSON object");
  std::vector<AblationCell> cells;
  for (auto it = matrix.begin(); it != matrix.end(); ++it) {
    auto axis = std::find_if(ablation_axes().begin(), ablation_axes().end(),
                             [&](const auto& a) { return a.first == it.key(); });
    if (axis == ablation_axes().end()) {
      std::string valid;
      for (const auto& [name, key] : ablation_axes()) valid += (valid.empty() ? "" : ", ") + name;
      throw ConfigError("ablation: unknown axis '" + it.key() + "'; valid axes: " + valid);
    }
    if (!it->is_array() || it->empty())
      throw ConfigError("ablation: axis '" + it.key() + "' must be a non-empty array");
    for (const auto& v : *it) cells.push_back({axis->first, axis->second, v});
  }
  if (cells.empty()) throw ConfigError("ablation: matrix has no cells");
  return cells;
}

struct CellResult {
  AblationCell cell;
  std::vector<double> seed_success;  // final mean success per completed seed
  std::vector<std::string> errors;   // one entry per failed seed
  bool failed() const { return !errors.empty(); }

  double mean() const {
    if (seed_success.empty()) return std::nan("");
    double s = 0;
    for (double v : seed_success) s += v;
    return s / static_cast<double>(seed_success.size());
  }

  // Sample standard deviation over seeds; a single seed reports 0.
  double stddev() const {
    if (seed_success.size() < 2) return 0.0;
    double m = mean(), s = 0;
    for (double v : seed_success) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(seed_success.size() - 1));
  }
};

inline std::string summary_csv(const std::vector<CellResult>& results) {
  std::string out = "axis,value,seeds,mean_success,std_success,status\n";
  char buf[64];
  for (const CellResult& r : results) {
    out += r.cell.axis + "," + r.cell.value_text() + "," +
           std::to_string(r.seed_success.size()) + ",";
    if (!r.seed_success.empty()) {
      std::snprintf(buf, sizeof(buf), "%.9g,%.9g", r.mean(), r.stddev());
      out += buf;
    } else {
      out += ",";
    }
    out += r.failed() ? ",failed" : ",ok";
    out += "\n";
  }
  return out;
}

// Plain-text table, one row per cell, mean +- std formatted to one decimal.
inline std::string summary_table(const std::vector<CellResult>& results) {
  std::vector<std::array<std::string, 3>> rows;
  rows.push_back({"variant", "success", "status"});
  char buf[64];
  for (const CellResult& r : results) {
    std::string success = "-";
    if (!r.seed_success.empty()) {
      std::snprintf(buf, sizeof(buf), "%.1f +- %.1f", r.mean(), r.stddev());
      success = buf;
    }
    rows.push_back({r.cell.label(), success,
                    r.failed() ? "failed (" + std::to_string(r.errors.size()) + " seeds)"
                               : "ok"});
  }
  std::size_t w0 = 0, w1 = 0;
  for (const auto& row : rows) {
    w0 = std::max(w0, row[0].size());
    w1 = std::max(w1, row[1].size());
  }
  std::string out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::string line = rows[i][0] + std::string(w0 - rows[i][0].size() + 2, ' ') + rows[i][1] +
                       std::string(w1 - rows[i][1].size() + 2, ' ') + rows[i][2];
    out += line + "\n";
    if (i == 0) out += std::string(line.size(), '-') + "\n";
  }
  return out;
}

}  // namespace chaingoal

#pragma once

// Experiment configuration: one JSON document drives every suite, and a run
// is a pure function of (config, seed).

#include <json.hpp>

#include "feshflow/ensemble.hpp"
#include "feshflow/flow.hpp"

namespace feshflow {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& all_suites() {
  static const std::vector<std::string> names = {
      "family",    "isospectrality", "ind",         "trade",
      "reexpress", "sharp-embed",    "bounds",      "sandwich",
      "hat-semigroup", "fixed-point", "cocycle-flow", "iterate"};
  return names;
}

struct ExperimentConfig {
  double delta = std::log(2.0);
  int max_mode = 6;
  int n_max = 2;
  FlowConfig flow;                 // tolerances, norms, fit protocol
  EnsembleConfig ensemble;         // seed, count, interaction scale
  double cocycle_scale = 1e-5;     // interaction scale of the composed-flow suite
  PolydiscSpec polydisc{0.05, 2.0, 2.0};
  int iterate_steps = 5;
  int iterate_m = 1;
  std::vector<std::string> suites;  // empty selects every suite

  void validate() const {
    if (!(delta > 0.0)) throw ConfigError("grid.delta must be positive");
    if (max_mode < 1) throw ConfigError("grid.J must be at least 1");
    if (n_max < 0) throw ConfigError("basis.n_max must be nonnegative");
    try {
      flow.norms.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("norms: ") + e.what());
    }
    if (!(flow.r_Z > 0.0 && flow.r_Z < 0.25))
      throw ConfigError("flow.r_Z must lie in (0, 1/4)");
    if (flow.identity_tol <= 0 || flow.fp_tol <= 0 || flow.svd_threshold <= 0)
      throw ConfigError("flow tolerances must be positive");
    if (ensemble.count < 1) throw ConfigError("ensemble.count must be at least 1");
    if (!(ensemble.interaction_scale > 0))
      throw ConfigError("ensemble.interaction_scale must be positive");
    const bool needs_lattice = selected("sandwich") || selected("hat-semigroup") ||
                               selected("fixed-point") || selected("cocycle-flow") ||
                               selected("iterate") || selected("bounds");
    if (needs_lattice && delta < std::log(2.0) - 1e-12)
      throw ConfigError(
          "grid.delta must be at least ln 2 for the flow suites (composition law of the "
          "cutoff family is exact only on that lattice)");
    for (const auto& s : suites)
      if (std::find(all_suites().begin(), all_suites().end(), s) == all_suites().end())
        throw ConfigError("unknown suite: " + s);
  }

  bool selected(const std::string& name) const {
    if (suites.empty()) return true;
    return std::find(suites.begin(), suites.end(), name) != suites.end();
  }
  std::vector<std::string> selected_suites() const {
    return suites.empty() ? all_suites() : suites;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{
      {"grid", {{"delta", c.delta}, {"J", c.max_mode}}},
      {"basis", {{"n_max", c.n_max}}},
      {"norms", {{"xi", c.flow.norms.xi}, {"mu", c.flow.norms.mu},
                 {"z_ring_samples", c.flow.norms.z_ring_samples}}},
      {"flow",
       {{"r_Z", c.flow.r_Z},
        {"identity_tol", c.flow.identity_tol},
        {"fp_tol", c.flow.fp_tol},
        {"svd_threshold", c.flow.svd_threshold},
        {"max_iters", c.flow.max_fp_iters}}},
      {"fit",
       {{"ring_radius", c.flow.fit_ring_radius},
        {"degree", c.flow.fit_degree},
        {"ring_samples", c.flow.fit_ring_samples},
        {"abort_threshold", c.flow.fit_abort_threshold}}},
      {"ensemble",
       {{"seed", c.ensemble.seed},
        {"count", c.ensemble.count},
        {"interaction_scale", c.ensemble.interaction_scale},
        {"free_deviation", c.ensemble.free_deviation},
        {"cocycle_scale", c.cocycle_scale}}},
      {"polydisc", {{"a_I", c.polydisc.a_I}, {"a_R", c.polydisc.a_R}, {"a_Z", c.polydisc.a_Z}}},
      {"iterate", {{"steps", c.iterate_steps}, {"m", c.iterate_m}}},
      {"suites", c.suites}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  auto get = [&](const char* sec, const char* key, auto& dst) {
    if (j.contains(sec) && j.at(sec).contains(key)) j.at(sec).at(key).get_to(dst);
  };
  get("grid", "delta", c.delta);
  get("grid", "J", c.max_mode);
  get("basis", "n_max", c.n_max);
  get("norms", "xi", c.flow.norms.xi);
  get("norms", "mu", c.flow.norms.mu);
  get("norms", "z_ring_samples", c.flow.norms.z_ring_samples);
  get("flow", "r_Z", c.flow.r_Z);
  get("flow", "identity_tol", c.flow.identity_tol);
  get("flow", "fp_tol", c.flow.fp_tol);
  get("flow", "svd_threshold", c.flow.svd_threshold);
  get("flow", "max_iters", c.flow.max_fp_iters);
  get("fit", "ring_radius", c.flow.fit_ring_radius);
  get("fit", "degree", c.flow.fit_degree);
  get("fit", "ring_samples", c.flow.fit_ring_samples);
  get("fit", "abort_threshold", c.flow.fit_abort_threshold);
  get("ensemble", "seed", c.ensemble.seed);
  get("ensemble", "count", c.ensemble.count);
  get("ensemble", "interaction_scale", c.ensemble.interaction_scale);
  get("ensemble", "free_deviation", c.ensemble.free_deviation);
  get("ensemble", "cocycle_scale", c.cocycle_scale);
  get("polydisc", "a_I", c.polydisc.a_I);
  get("polydisc", "a_R", c.polydisc.a_R);
  get("polydisc", "a_Z", c.polydisc.a_Z);
  get("iterate", "steps", c.iterate_steps);
  get("iterate", "m", c.iterate_m);
  if (j.contains("suites")) j.at("suites").get_to(c.suites);
}

inline std::string canonical_config_dump(const ExperimentConfig& c) {
  nlohmann::json j = c;
  return j.dump();
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  // FNV-1a over the canonical dump
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : canonical_config_dump(c)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace feshflow

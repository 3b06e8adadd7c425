#pragma once

// Structured verdicts from the verification suites: one record per checked
// identity or bound, plus the numerically evaluated hypotheses that gate
// conditional checks. A check skipped because its hypotheses fail is
// recorded distinctly from a failure.

#include <json.hpp>

#include <map>
#include <string>
#include <vector>

namespace feshflow {

struct HypothesisRecord {
  std::string name;
  double value = 0.0;   // evaluated left side
  double bound = 0.0;   // required right side
  bool strict = true;   // value < bound vs value <= bound
  bool satisfied = false;

  static HypothesisRecord make(std::string name, double value, double bound,
                               bool strict = true) {
    HypothesisRecord h;
    h.name = std::move(name);
    h.value = value;
    h.bound = bound;
    h.strict = strict;
    h.satisfied = strict ? (value < bound) : (value <= bound);
    return h;
  }
};

struct CheckRecord {
  std::string id;            // stable machine-parsable identifier
  std::string description;   // the identity or bound, in formula form
  double lhs = 0.0;          // scale of the left side (norm)
  double rhs = 0.0;          // scale of the right side (norm)
  double residual = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  bool skipped = false;      // hypotheses not satisfied; not a failure
  std::string skip_reason;
  std::map<std::string, double> extra;

  static CheckRecord residual_check(std::string id, std::string description, double residual,
                                    double tol, double lhs = 0.0, double rhs = 0.0) {
    CheckRecord c;
    c.id = std::move(id);
    c.description = std::move(description);
    c.residual = residual;
    c.tolerance = tol;
    c.lhs = lhs;
    c.rhs = rhs;
    c.pass = residual <= tol;
    return c;
  }

  static CheckRecord bound_check(std::string id, std::string description, double value,
                                 double bound) {
    // value <= bound with the margin reported; residual = violation amount.
    CheckRecord c;
    c.id = std::move(id);
    c.description = std::move(description);
    c.lhs = value;
    c.rhs = bound;
    c.residual = std::max(0.0, value - bound);
    c.tolerance = 0.0;
    c.pass = value <= bound;
    c.extra["margin"] = bound - value;
    return c;
  }

  static CheckRecord flag_check(std::string id, std::string description, bool ok) {
    CheckRecord c;
    c.id = std::move(id);
    c.description = std::move(description);
    c.pass = ok;
    return c;
  }

  static CheckRecord skipped_check(std::string id, std::string description,
                                   std::string reason) {
    CheckRecord c;
    c.id = std::move(id);
    c.description = std::move(description);
    c.skipped = true;
    c.pass = true;  // does not fail the suite; counted separately
    c.skip_reason = std::move(reason);
    return c;
  }
};

struct FlowReport {
  std::string suite;
  std::vector<HypothesisRecord> hypotheses;
  std::vector<CheckRecord> checks;

  void add(CheckRecord c) { checks.push_back(std::move(c)); }
  void add(std::vector<CheckRecord> cs) {
    for (auto& c : cs) checks.push_back(std::move(c));
  }
  void add_hypothesis(HypothesisRecord h) { hypotheses.push_back(std::move(h)); }
  void merge(const FlowReport& other) {
    for (const auto& h : other.hypotheses) hypotheses.push_back(h);
    for (const auto& c : other.checks) checks.push_back(c);
  }

  bool pass() const {
    for (const auto& c : checks)
      if (!c.skipped && !c.pass) return false;
    return true;
  }
  int passed_count() const {
    int n = 0;
    for (const auto& c : checks) n += (!c.skipped && c.pass) ? 1 : 0;
    return n;
  }
  int failed_count() const {
    int n = 0;
    for (const auto& c : checks) n += (!c.skipped && !c.pass) ? 1 : 0;
    return n;
  }
  int skipped_count() const {
    int n = 0;
    for (const auto& c : checks) n += c.skipped ? 1 : 0;
    return n;
  }
};

inline void to_json(nlohmann::json& j, const HypothesisRecord& h) {
  j = nlohmann::json{{"name", h.name},
                     {"value", h.value},
                     {"bound", h.bound},
                     {"strict", h.strict},
                     {"satisfied", h.satisfied}};
}

inline void to_json(nlohmann::json& j, const CheckRecord& c) {
  j = nlohmann::json{{"id", c.id},           {"description", c.description},
                     {"lhs", c.lhs},         {"rhs", c.rhs},
                     {"residual", c.residual}, {"tolerance", c.tolerance},
                     {"pass", c.pass},       {"skipped", c.skipped}};
  if (!c.skip_reason.empty()) j["skip_reason"] = c.skip_reason;
  if (!c.extra.empty()) j["extra"] = c.extra;
}

inline void to_json(nlohmann::json& j, const FlowReport& r) {
  j = nlohmann::json{{"suite", r.suite},
                     {"hypotheses", r.hypotheses},
                     {"checks", r.checks},
                     {"pass", r.pass()},
                     {"counts",
                      {{"passed", r.passed_count()},
                       {"failed", r.failed_count()},
                       {"skipped", r.skipped_count()}}}};
}

}  // namespace feshflow

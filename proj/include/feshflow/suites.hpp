#pragma once

// The verification suites the runner exposes: each one is a pure function
// of the experiment configuration and produces a structured report.

#include <random>

#include "feshflow/config.hpp"
#include "feshflow/serialize.hpp"

namespace feshflow {

struct SuiteEnv {
  ExperimentConfig cfg;
  FockBasis basis;
  RGrid rgrid;
  Mask all;
  SmoothFamily family;

  explicit SuiteEnv(const ExperimentConfig& c)
      : cfg(c), basis(ModeGrid(c.delta, c.max_mode), c.n_max), rgrid(build_rgrid(basis)),
        all(Mask::full(basis.dim())) {
    cfg.validate();
  }

  double alpha(int m) const { return m * cfg.delta; }

  std::vector<KernelSeq> kernels(double scale, int count, std::uint64_t salt = 0) const {
    EnsembleConfig ec = cfg.ensemble;
    ec.seed ^= salt;
    ec.count = count;
    ec.interaction_scale = scale;
    return gen_ensemble(basis, rgrid, all, basis.grid().max_mode(), ec, cfg.flow.norms);
  }

  LinOp random_matrix(std::mt19937_64& rng, double scale) const {
    Mat a(basis.dim(), basis.dim());
    for (int i = 0; i < basis.dim(); ++i)
      for (int j = 0; j < basis.dim(); ++j)
        a(i, j) = scale * cx(detail::sym_uniform(rng), detail::sym_uniform(rng));
    return LinOp(&basis, all, all, a);
  }

  LinOp shifted_hph(cx z) const {
    Vec d(basis.dim());
    for (int i = 0; i < basis.dim(); ++i) d(i) = basis.hph_value(i) + z;
    return LinOp::diagonal(basis, all, d);
  }
};

// --- cutoff family ------------------------------------------------------------

inline FlowReport suite_family(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "family";
  const double LN2 = std::log(2.0);
  std::vector<double> grid(10000);
  for (size_t i = 0; i < grid.size(); ++i) grid[i] = 1.5 * static_cast<double>(i) / (grid.size() - 1);
  for (double a : {LN2, 2 * LN2})
    for (double b : {LN2, 2 * LN2}) {
      FlowReport frag = verify_family(env.family, a, b, grid, 1e-12);
      const std::string tag =
          "[a=" + std::to_string(a == LN2 ? 1 : 2) + ",b=" + std::to_string(b == LN2 ? 1 : 2) + "]";
      for (auto c : frag.checks) {
        c.id += tag;
        rep.add(std::move(c));
      }
      // scalar overlap functions on a thousand-point grid
      OverlapFunctions ov = overlap_functions(env.family, a, b);
      double pyth = 0.0, falta = 0.0;
      for (int i = 0; i < 1000; ++i) {
        const double r = 1.2 * i / 999.0;
        auto [x, xb] = ov.both(r);
        pyth = std::max(pyth, std::abs(x * x + xb * xb - 1.0));
        falta = std::max(
            falta, std::abs(env.family.chibar(b, std::exp(a) * r) * env.family.chi(a, r) -
                            x * env.family.chibar(a + b, r)));
        falta = std::max(falta, std::abs(env.family.chibar(a, r) -
                                         xb * env.family.chibar(a + b, r)));
      }
      rep.add(CheckRecord::residual_check("family.overlap_pythagoras" + tag,
                                          "X(r)^2 + Xbar(r)^2 = 1", pyth, 1e-12));
      rep.add(CheckRecord::residual_check(
          "family.overlap_factorization" + tag,
          "chibar_b(e^a r) chi_a = X chibar_{a+b} and chibar_a = Xbar chibar_{a+b}", falta,
          1e-12));
    }
  return rep;
}

// --- smooth map theorem suites ---------------------------------------------------

inline FlowReport suite_isospectrality(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "isospectrality";
  CutoffPair pair = chi_operator(env.family, env.alpha(1), env.basis, env.all);
  LinOp T = env.shifted_hph(cx(0.3, 0.0));
  std::mt19937_64 rng(env.cfg.ensemble.seed ^ 0xA5F152C3ULL);

  for (int trial = 0; trial < 50; ++trial) {
    LinOp H = T + env.random_matrix(rng, 0.01);
    FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces, env.cfg.flow.svd_threshold};
    FlowReport frag = isospectrality_check(in, 1e-10);
    for (auto c : frag.checks) {
      c.id += "[" + std::to_string(trial) + "]";
      rep.add(std::move(c));
    }
  }

  // constructed singular members: rank-1 defect supported on the plateau
  const Mask plateau = mask_diff(env.all, pair.subspaces.chibar_support);
  for (int trial = 0; trial < 5 && trial < plateau.size(); ++trial) {
    Vec psi = Vec::Zero(env.basis.dim());
    psi(plateau[trial]) = cx(1, 0);
    Mat rank1 = (T.entries() * psi) * psi.adjoint();
    LinOp H = T - LinOp(&env.basis, env.all, env.all, rank1);
    FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces, env.cfg.flow.svd_threshold};
    FlowReport frag = isospectrality_check(in, 1e-10);
    for (auto c : frag.checks) {
      c.id += "[singular " + std::to_string(trial) + "]";
      rep.add(std::move(c));
    }
  }
  return rep;
}

inline FlowReport suite_ind(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "ind";
  CutoffPair pair = chi_operator(env.family, env.alpha(1), env.basis, env.all);
  std::mt19937_64 rng(env.cfg.ensemble.seed ^ 0xB7E98A11ULL);
  for (int trial = 0; trial < 50; ++trial) {
    LinOp T = env.shifted_hph(cx(0.15 + 0.2 * std::abs(detail::sym_uniform(rng)), 0.05));
    LinOp H = T + env.random_matrix(rng, 0.01);
    // S agrees with T on the overlap, arbitrary elsewhere (kept invertible
    // on the chibar support)
    Vec d(env.basis.dim());
    for (int i = 0; i < env.basis.dim(); ++i) {
      d(i) = T.entry_global(i, i);
      if (!pair.subspaces.overlap_support.contains(i))
        d(i) += cx(0.5 * detail::sym_uniform(rng), 0.2 * detail::sym_uniform(rng));
    }
    LinOp S = LinOp::diagonal(env.basis, env.all, d);
    FlowReport frag = ind_check(H, T, S, pair, 1e-11, env.cfg.flow.svd_threshold);
    for (auto c : frag.checks) {
      c.id += "[" + std::to_string(trial) + "]";
      rep.add(std::move(c));
    }
    if (trial % 10 == 0) {
      // the restriction S = T 1_{chibar support}
      Vec dp(env.basis.dim());
      for (int i = 0; i < env.basis.dim(); ++i)
        dp(i) = pair.subspaces.chibar_support.contains(i) ? T.entry_global(i, i) : cx(0, 0);
      LinOp Sp = LinOp::diagonal(env.basis, env.all, dp);
      FlowReport frag2 = ind_check(H, T, Sp, pair, 1e-11, env.cfg.flow.svd_threshold);
      for (auto c : frag2.checks) {
        c.id += "[restricted " + std::to_string(trial) + "]";
        rep.add(std::move(c));
      }
    }
  }
  return rep;
}

inline FlowReport suite_trade(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "trade";
  CutoffPair pair = chi_operator(env.family, env.alpha(1), env.basis, env.all);
  std::mt19937_64 rng(env.cfg.ensemble.seed ^ 0xC61D22F5ULL);
  for (int trial = 0; trial < 50; ++trial) {
    Vec dt(env.basis.dim()), ds(env.basis.dim());
    for (int i = 0; i < env.basis.dim(); ++i) {
      dt(i) = cx(1.0 + 0.5 * detail::sym_uniform(rng), 0);
      ds(i) = cx(1.0 + 0.5 * detail::sym_uniform(rng), 0);
    }
    LinOp T = LinOp::diagonal(env.basis, env.all, dt);
    LinOp S = LinOp::diagonal(env.basis, env.all, ds);
    LinOp H = T + env.random_matrix(rng, 0.02);
    FlowReport frag = trade_identity_check(H, T, S, pair, 1e-10, env.cfg.flow.svd_threshold);
    for (auto c : frag.checks) {
      c.id += "[" + std::to_string(trial) + "]";
      rep.add(std::move(c));
    }
  }
  return rep;
}

inline FlowReport suite_reexpress(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "reexpress";
  std::mt19937_64 rng(env.cfg.ensemble.seed ^ 0xD3A0917BULL);
  for (int m : {1, 2}) {
    CutoffPair pair = chi_operator(env.family, env.alpha(m), env.basis, env.all);
    for (int trial = 0; trial < 25; ++trial) {
      Vec dt(env.basis.dim()), ds(env.basis.dim());
      for (int i = 0; i < env.basis.dim(); ++i) {
        dt(i) = cx(1.0 + 0.4 * detail::sym_uniform(rng), 0.1 * detail::sym_uniform(rng));
        ds(i) = cx(1.0 + 0.4 * detail::sym_uniform(rng), 0.1 * detail::sym_uniform(rng));
      }
      LinOp T = LinOp::diagonal(env.basis, env.all, dt);
      LinOp S = LinOp::diagonal(env.basis, env.all, ds);
      LinOp H = T + env.random_matrix(rng, 0.02);
      FlowReport frag = reexpress_check(H, T, S, pair, 1e-10, env.cfg.flow.svd_threshold);
      for (auto c : frag.checks) {
        c.id += "[m=" + std::to_string(m) + "," + std::to_string(trial) + "]";
        rep.add(std::move(c));
      }
    }
  }
  // kernel-flavored instance: T = H_ph + z, S = w00(H_ph)
  auto ks = env.kernels(env.cfg.ensemble.interaction_scale, 3, /*salt=*/0x51ULL);
  CutoffPair pair = chi_operator(env.family, env.alpha(1), env.basis, env.all);
  for (size_t i = 0; i < ks.size(); ++i) {
    const cx z(0.08, 0.03);
    LinOp H = quantize(ks[i], z, env.all);
    LinOp T = env.shifted_hph(z);
    LinOp S = quantize_free(ks[i], z, env.all);
    FlowReport frag = reexpress_check(H, T, S, pair, 1e-10, env.cfg.flow.svd_threshold);
    for (auto c : frag.checks) {
      c.id += "[kernel " + std::to_string(i) + "]";
      rep.add(std::move(c));
    }
  }
  return rep;
}

inline FlowReport suite_sharp_embed(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "sharp-embed";
  CutoffPair pair = chi_operator(env.family, env.alpha(1), env.basis, env.all);
  LinOp T = env.shifted_hph(cx(0.3, 0.05));
  std::mt19937_64 rng(env.cfg.ensemble.seed ^ 0xE8B3C977ULL);
  for (int trial = 0; trial < 50; ++trial) {
    LinOp H = T + env.random_matrix(rng, 0.02);
    FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces, env.cfg.flow.svd_threshold};
    FlowReport frag = sharp_embed_check(in, 1e-14, 1e-12, 1e-10);
    for (auto c : frag.checks) {
      c.id += "[" + std::to_string(trial) + "]";
      rep.add(std::move(c));
    }
  }
  return rep;
}

// --- kernel-space suites -----------------------------------------------------------

inline FlowReport suite_bounds(const SuiteEnv& env, CsvWriter* norm_table = nullptr) {
  FlowReport rep;
  rep.suite = "bounds";
  auto ks = env.kernels(env.cfg.ensemble.interaction_scale, env.cfg.ensemble.count);
  for (size_t i = 0; i < ks.size(); ++i) {
    const std::string tag = "[" + std::to_string(i) + "]";
    // quantization bounds per component
    const cx zq(0.05, 0.02);
    for (auto c : quantization_bound_check(ks[i], zq, env.all, env.cfg.flow.norms)) {
      if (norm_table != nullptr)
        norm_table->add_row({std::to_string(i), c.id, fmt_double(c.lhs), fmt_double(c.rhs),
                             fmt_double(c.extra.count("margin") ? c.extra.at("margin") : 0)});
      c.id += tag;
      rep.add(std::move(c));
    }
    // inverse-norm bounds at lattice levels
    for (int m : {1, 2}) {
      const double ema = std::exp(-env.alpha(m));
      for (cx z : {0.2 * ema * cx(1, 0), 0.25 * ema * cx(0, 1)}) {
        FlowReport frag = bound_suite(ks[i], m, z, env.family, env.all, env.cfg.flow);
        for (auto h : frag.hypotheses) rep.add_hypothesis(std::move(h));
        for (auto c : frag.checks) {
          c.id += tag + "[m=" + std::to_string(m) + "]";
          rep.add(std::move(c));
        }
      }
    }
  }
  return rep;
}

inline FlowReport suite_sandwich(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "sandwich";
  auto ks = env.kernels(env.cfg.ensemble.interaction_scale, env.cfg.ensemble.count);
  for (size_t i = 0; i < ks.size(); ++i)
    for (auto [ma, mb] : {std::pair{1, 1}, std::pair{1, 2}, std::pair{2, 1}}) {
      const cx z = 0.2 * std::exp(-env.alpha(ma)) * cx(0.6, -0.4);
      FlowReport frag = sandwich_suite(ks[i], ma, mb, z, env.family, env.all, env.cfg.flow);
      const std::string tag =
          "[" + std::to_string(i) + "," + std::to_string(ma) + "+" + std::to_string(mb) + "]";
      for (auto c : frag.checks) {
        c.id += tag;
        rep.add(std::move(c));
      }
    }
  return rep;
}

inline FlowReport suite_hat_semigroup(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "hat-semigroup";
  auto ks = env.kernels(env.cfg.ensemble.interaction_scale, env.cfg.ensemble.count);
  for (size_t i = 0; i < ks.size(); ++i)
    for (auto [ma, mb] : {std::pair{1, 1}, std::pair{1, 2}, std::pair{2, 1}}) {
      const cx z = 0.2 * std::exp(-env.alpha(ma + mb)) * cx(0.8, 0.3);
      FlowReport frag =
          verify_hat_semigroup(ks[i], ma, mb, z, env.family, env.all, env.cfg.flow);
      const std::string tag =
          "[" + std::to_string(i) + "," + std::to_string(ma) + "+" + std::to_string(mb) + "]";
      for (auto c : frag.checks) {
        c.id += tag;
        rep.add(std::move(c));
      }
    }
  return rep;
}

inline FlowReport suite_fixed_point(const SuiteEnv& env, CsvWriter* trace_csv = nullptr) {
  FlowReport rep;
  rep.suite = "fixed-point";
  auto ks = env.kernels(env.cfg.ensemble.interaction_scale, env.cfg.ensemble.count);
  const double scale = env.cfg.flow.r_Z / 0.2;
  const std::vector<cx> zetas = {scale * cx(0.1, 0.05), scale * cx(-0.15, 0.1),
                                 scale * cx(0.0, 0.19)};
  for (size_t i = 0; i < ks.size(); ++i) {
    for (int m : {1, 2}) {
      const std::string tag = "[" + std::to_string(i) + ",m=" + std::to_string(m) + "]";
      for (size_t zi = 0; zi < zetas.size(); ++zi) {
        FixedPointTrace tr = solve_E(ks[i], m, zetas[zi], env.family, env.all, env.cfg.flow);
        for (const auto& h : tr.conditions) rep.add_hypothesis(h);
        const std::string zt = tag + "[z" + std::to_string(zi) + "]";
        rep.add(CheckRecord::flag_check("fixed_point.converged" + zt,
                                        "contraction iteration converged", tr.converged));
        if (tr.preconditions_ok) {
          rep.add(CheckRecord::bound_check("fixed_point.ratio" + zt,
                                           "measured contraction ratio <= 1/8",
                                           tr.contraction_ratio, 0.125));
        } else {
          rep.add(CheckRecord::skipped_check("fixed_point.ratio" + zt,
                                             "measured contraction ratio <= 1/8",
                                             "hypotheses not satisfied"));
        }
        rep.add(CheckRecord::residual_check("fixed_point.inverse" + zt,
                                            "|Q_a(E_a(zeta)) - zeta| small",
                                            std::abs(tr.q_recheck - zetas[zi]),
                                            env.cfg.flow.fp_tol));
        rep.add(CheckRecord::flag_check("fixed_point.disc" + zt,
                                        "fixed point inside the strengthened disc",
                                        tr.inside_strengthened_disc));
        if (trace_csv != nullptr)
          for (size_t k = 0; k < tr.residuals.size(); ++k)
            trace_csv->add_row({std::to_string(i), std::to_string(m), std::to_string(zi),
                                std::to_string(k), fmt_double(std::abs(tr.iterates[k])),
                                fmt_double(tr.residuals[k])});
      }
      const double dE = e_derivative_fd(ks[i], m, scale * cx(0.05, 0.02), env.family,
                                        env.all, env.cfg.flow);
      rep.add(CheckRecord::bound_check("fixed_point.derivative" + tag,
                                       "|dE/dzeta| <= 2 by centered differences", dE, 2.0));
      for (auto c : containment_check(ks[i], m, env.family, env.all, env.cfg.flow)) {
        c.id += tag;
        rep.add(std::move(c));
      }
    }
  }
  return rep;
}

inline FlowReport suite_cocycle_flow(const SuiteEnv& env) {
  FlowReport rep;
  rep.suite = "cocycle-flow";
  auto ks = env.kernels(env.cfg.cocycle_scale, std::min(env.cfg.ensemble.count, 3),
                        /*salt=*/0x77ULL);
  const double scale = env.cfg.flow.r_Z / 0.2;
  const std::vector<cx> zetas = {scale * cx(0.1, 0.05), scale * cx(-0.12, 0.08)};
  for (size_t i = 0; i < ks.size(); ++i)
    for (auto [ma, mb] : {std::pair{1, 1}, std::pair{1, 2}}) {
      FlowReport frag = verify_cocycle_and_flow(ks[i], ma, mb, zetas, env.family, env.all,
                                                env.basis.grid().max_mode(), env.cfg.flow);
      const std::string tag =
          "[" + std::to_string(i) + "," + std::to_string(ma) + "+" + std::to_string(mb) + "]";
      for (auto h : frag.hypotheses) rep.add_hypothesis(std::move(h));
      for (auto c : frag.checks) {
        c.id += tag;
        rep.add(std::move(c));
      }
    }
  return rep;
}

inline FlowReport suite_iterate(const SuiteEnv& env, CsvWriter* trace_csv = nullptr) {
  FlowReport rep;
  rep.suite = "iterate";
  auto ks = env.kernels(env.cfg.ensemble.interaction_scale, std::min(env.cfg.ensemble.count, 3),
                        /*salt=*/0x99ULL);
  for (size_t i = 0; i < ks.size(); ++i) {
    IterateTrace tr = iterate_flow(ks[i], env.cfg.iterate_m, env.cfg.iterate_steps,
                                   env.family, env.all, env.basis.grid().max_mode(),
                                   env.cfg.polydisc, env.cfg.flow);
    const std::string tag = "[" + std::to_string(i) + "]";
    rep.add(CheckRecord::flag_check("iterate.completed" + tag,
                                    "all steps ran (domain and extraction stayed valid)",
                                    tr.completed));
    bool monotone = true;
    for (size_t k = 1; k < tr.steps.size(); ++k)
      monotone &= tr.steps[k].interaction_norm < tr.steps[k - 1].interaction_norm;
    auto c = CheckRecord::flag_check("iterate.monotone" + tag,
                                     "interaction norm strictly decreasing along the orbit",
                                     monotone && tr.steps.size() >= 2);
    if (!tr.steps.empty())
      c.extra["final_over_initial"] =
          tr.steps.back().interaction_norm / std::max(1e-300, tr.steps[0].interaction_norm);
    rep.add(std::move(c));
    if (trace_csv != nullptr)
      for (size_t k = 0; k < tr.steps.size(); ++k) {
        const auto& s = tr.steps[k];
        trace_csv->add_row({std::to_string(i), std::to_string(k),
                            fmt_double(s.interaction_norm), fmt_double(s.ratio),
                            fmt_double(s.fit_residual_op), fmt_double(s.recenter_size),
                            s.polydisc_member ? "1" : "0", fmt_double(s.dr_minus),
                            fmt_double(s.dz_minus)});
      }
  }
  return rep;
}

// --- dispatch ------------------------------------------------------------------------

struct SuiteArtifacts {
  FlowReport report;
  std::map<std::string, std::string> csv_files;  // name -> content
};

inline SuiteArtifacts run_suite(const SuiteEnv& env, const std::string& name) {
  SuiteArtifacts out;
  if (name == "family") {
    out.report = suite_family(env);
  } else if (name == "isospectrality") {
    out.report = suite_isospectrality(env);
  } else if (name == "ind") {
    out.report = suite_ind(env);
  } else if (name == "trade") {
    out.report = suite_trade(env);
  } else if (name == "reexpress") {
    out.report = suite_reexpress(env);
  } else if (name == "sharp-embed") {
    out.report = suite_sharp_embed(env);
  } else if (name == "bounds") {
    CsvWriter csv({"kernel", "check", "value", "bound", "margin"});
    out.report = suite_bounds(env, &csv);
    out.csv_files["bounds_norm_table.csv"] = csv.str();
  } else if (name == "sandwich") {
    out.report = suite_sandwich(env);
  } else if (name == "hat-semigroup") {
    out.report = suite_hat_semigroup(env);
  } else if (name == "fixed-point") {
    CsvWriter csv({"kernel", "m", "zeta", "iter", "abs_z", "residual"});
    out.report = suite_fixed_point(env, &csv);
    out.csv_files["fixed_point_trace.csv"] = csv.str();
  } else if (name == "cocycle-flow") {
    out.report = suite_cocycle_flow(env);
  } else if (name == "iterate") {
    CsvWriter csv({"kernel", "step", "interaction_norm", "ratio", "fit_residual",
                   "recenter", "polydisc_member", "dr_minus", "dz_minus"});
    out.report = suite_iterate(env, &csv);
    out.csv_files["iterate_trace.csv"] = csv.str();
  } else {
    throw ConfigError("unknown suite: " + name);
  }
  return out;
}

}  // namespace feshflow

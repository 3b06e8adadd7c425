#pragma once

// Scaling transformation, the rescaled smooth Feshbach-Schur map, the
// renormalization of the spectral parameter by contraction iteration, the
// renormalization map, and the verification suites for the norm bounds,
// the sandwich identities, the semigroup law, and the composed flow.
//
// Conventions fixed here:
//  * the auxiliary operator of every map in this module is T = H_ph
//    (the spectral parameter z lives inside the kernel, w00(z,0) = z);
//  * alpha runs on the lattice m * delta so the dilation is an exact index
//    shift (exactness requires delta >= ln 2, the transition width of the
//    cutoff profile);
//  * the map is evaluated on the closed mask {H_ph <= e^{-alpha}}, where
//    the formula degenerates to the H_ph-block on the chi = 0 slice; this
//    keeps compositions well-defined on the boundary atoms the truncation
//    creates (in the continuum that slice has measure zero).

#include "feshflow/fsmap.hpp"
#include "feshflow/kernels.hpp"

namespace feshflow {

struct NoConvergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FitResidualTooLarge : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FlowConfig {
  double r_Z = 0.2;             // spectral-parameter disc radius, in (0, 1/4)
  double identity_tol = 1e-9;
  double fp_tol = 1e-10;
  double svd_threshold = 1e-12;
  int max_fp_iters = 200;
  NormConfig norms;
  // kernel extraction protocol for the composed-flow suites
  double fit_ring_radius = 0.2;
  int fit_degree = 24;
  int fit_ring_samples = 56;
  double fit_abort_threshold = 1e-6;

  void validate(const ModeGrid& grid) const {
    if (!(r_Z > 0.0 && r_Z < 0.25))
      throw std::invalid_argument("FlowConfig: r_Z must be in (0, 1/4)");
    if (grid.delta() < std::log(2.0) - 1e-12)
      throw std::invalid_argument(
          "FlowConfig: the lattice step must be at least ln 2, the transition width of "
          "the cutoff profile, for the composition law to be exact");
    norms.validate();
  }
};

// --- dilation and scaling -----------------------------------------------------

// Partial isometry shifting every occupied mode down by m (frequencies up
// by e^{m delta}); states that would leave the truncation map to zero.
inline LinOp dilation(const FockBasis& b, int m) {
  if (m < 0) throw std::invalid_argument("dilation: m must be >= 0");
  Mat a = Mat::Zero(b.dim(), b.dim());
  for (int t = 0; t < b.dim(); ++t) {
    const int s = b.shifted_down_index(t, m);
    if (s >= 0) a(s, t) = 1.0;
  }
  const Mask full = Mask::full(b.dim());
  return LinOp(&b, full, full, std::move(a));
}

inline Mask shift_mask_down(const FockBasis& b, const Mask& mask, int m) {
  return Mask::where(b.dim(), [&](int s) {
    const int u = b.shifted_up_index(s, m);
    return u >= 0 && mask.contains(u);
  });
}

// Gamma_m A Gamma_m^* as an exact index shift; masks follow the shift.
inline LinOp dilate_conj(const LinOp& A, int m) {
  const FockBasis& b = A.basis();
  const Mask rows = shift_mask_down(b, A.range_mask(), m);
  const Mask cols = shift_mask_down(b, A.domain_mask(), m);
  Mat out(rows.size(), cols.size());
  for (int i = 0; i < rows.size(); ++i)
    for (int j = 0; j < cols.size(); ++j)
      out(i, j) = A.entry_global(b.shifted_up_index(rows[i], m), b.shifted_up_index(cols[j], m));
  return LinOp(&b, rows, cols, std::move(out));
}

// Scaling transformation S_alpha(A) = e^{m delta} Gamma_m A Gamma_m^*.
inline LinOp rescale(const LinOp& A, int m) {
  return std::exp(m * A.basis().grid().delta()) * dilate_conj(A, m);
}

// --- rescaled map --------------------------------------------------------------

// Closed support mask {H_ph <= e^{-alpha}} within the ambient mask.
inline Mask chi_closed_mask(const FockBasis& b, const Mask& ambient, int m) {
  const double edge = (m <= b.grid().max_mode()) ? b.grid().omega(m)
                                                 : std::exp(-m * b.grid().delta());
  return Mask::where(b.dim(), [&](int s) {
    return ambient.contains(s) && leq_tol(b.hph_value(s), edge);
  });
}

inline FeshbachInput make_flow_input(const LinOp& H, const SmoothFamily& fam, int m,
                                     double svd_threshold) {
  const FockBasis& b = H.basis();
  const Mask& V = H.range_mask();
  const double alpha = m * b.grid().delta();
  CutoffPair pair = chi_operator(fam, alpha, b, V);
  return FeshbachInput{H, hph(b, V), pair.chi, pair.chibar, pair.subspaces, svd_threshold};
}

struct RescaledResult {
  LinOp op;          // S_alpha(F_{chi_alpha, H_ph}(H)), on the shifted closed mask
  FeshbachResult fs;
  Mask out_mask;
};

inline RescaledResult rescaled_fs_operator(const LinOp& H, const SmoothFamily& fam, int m,
                                           double svd_threshold) {
  const FockBasis& b = H.basis();
  FeshbachInput in = make_flow_input(H, fam, m, svd_threshold);
  const Mask closed = chi_closed_mask(b, H.range_mask(), m);
  FeshbachResult fs = fs_map(in, closed);
  RescaledResult out{rescale(fs.F, m), std::move(fs), Mask{}};
  out.out_mask = out.op.range_mask();
  return out;
}

inline RescaledResult rescaled_fs(const KernelSeq& w, cx z, int m, const SmoothFamily& fam,
                                  const Mask& V, double svd_threshold = 1e-12) {
  return rescaled_fs_operator(quantize(w, z, V), fam, m, svd_threshold);
}

// --- vacuum expectation map Q_alpha --------------------------------------------

// Closed form e^alpha ( z - < W chibar (H_{chibar,H_ph})^{-1} chibar W >_vac );
// the diagonal deviation of H[w] from H_ph drops out at the vacuum because
// chibar(0) = 0 and w00(z,0) = z.
inline cx q_alpha_closed(const KernelSeq& w, int m, cx z, const SmoothFamily& fam,
                         const Mask& V, double svd_threshold = 1e-12) {
  const FockBasis& b = w.basis();
  const double alpha = m * b.grid().delta();
  LinOp H = quantize(w, z, V);
  FeshbachInput in = make_flow_input(H, fam, m, svd_threshold);
  LinOp hbar = hbar_op(in);
  LinOp W = quantize_interaction(w, z, V);
  const Mask& bm = in.sub.chibar_support;
  const int vac = V.position(b.vacuum_index());
  Vec wcol = W.entries().col(vac), wrow = W.entries().row(vac);
  Vec u(bm.size()), vleft(bm.size());
  for (int k = 0; k < bm.size(); ++k) {
    const int p = V.position(bm[k]);
    const cx cb = in.chibar.entries()(p, p);
    u(k) = cb * wcol(p);
    vleft(k) = wrow(p) * cb;
  }
  Vec x = hbar.entries().partialPivLu().solve(u);
  const cx corr = (vleft.transpose() * x).value();
  return std::exp(alpha) * (z - corr);
}

// Q through the full map, for cross-checking the closed form.
inline cx q_alpha_full(const KernelSeq& w, int m, cx z, const SmoothFamily& fam, const Mask& V,
                       double svd_threshold = 1e-12) {
  RescaledResult r = rescaled_fs(w, z, m, fam, V, svd_threshold);
  return vacuum_expectation(r.op);
}

// --- spectral parameter renormalization ----------------------------------------

struct FixedPointTrace {
  std::vector<cx> iterates;
  std::vector<double> residuals;
  double contraction_ratio = 0.0;  // max ratio of successive residuals
  cx z_final{0, 0};
  cx q_recheck{0, 0};
  bool converged = false;
  bool preconditions_ok = false;
  std::vector<HypothesisRecord> conditions;
  double strengthened_disc_bound = 0.0;  // (1/2)(1/4 + r_Z) e^{-alpha}
  bool inside_strengthened_disc = false;
};

// Numerically evaluated hypotheses gating the contraction argument.
inline std::vector<HypothesisRecord> contraction_conditions(const KernelSeq& w, int m,
                                                            const FlowConfig& cfg) {
  const double alpha = m * w.basis().grid().delta();
  const double ea = std::exp(alpha);
  std::vector<HypothesisRecord> out;
  const double wi = xi_norm_Z(w, cfg.norms, /*interaction_only=*/true);
  const double wz = xi_norm_Z(w, cfg.norms);
  const double xiwi = cfg.norms.xi * wi;
  out.push_back(HypothesisRecord::make("contraction.main",
                                       std::pow(10.0 * ea, 2) * xiwi * xiwi * (2.0 + wz),
                                       0.125));
  out.push_back(HypothesisRecord::make("contraction.disc", xiwi * xiwi,
                                       std::exp(-2.0 * alpha) / 20.0 * (0.25 - cfg.r_Z)));
  PartialNorms dev = partial_norms(subtract_free(w), cfg.norms);
  out.push_back(HypothesisRecord::make("inverse_bound.dr", dev.dr_full, 0.1));
  out.push_back(HypothesisRecord::make("inverse_bound.interaction", wi,
                                       std::exp(-alpha) / 100.0, /*strict=*/false));
  return out;
}

// Fixed point of h(z) = e^{-alpha} zeta + < W chibar (H_{chibar})^{-1} chibar W >_vac,
// started at the free-kernel answer z0 = e^{-alpha} zeta.
inline FixedPointTrace solve_E(const KernelSeq& w, int m, cx zeta, const SmoothFamily& fam,
                               const Mask& V, const FlowConfig& cfg) {
  const double alpha = m * w.basis().grid().delta();
  const double emalpha = std::exp(-alpha);
  FixedPointTrace tr;
  tr.conditions = contraction_conditions(w, m, cfg);
  tr.preconditions_ok = true;
  for (const auto& h : tr.conditions) tr.preconditions_ok &= h.satisfied;
  tr.strengthened_disc_bound = 0.5 * (0.25 + cfg.r_Z) * emalpha;

  cx z = emalpha * zeta;
  tr.iterates.push_back(z);
  for (int it = 0; it < cfg.max_fp_iters; ++it) {
    const cx q = q_alpha_closed(w, m, z, fam, V, cfg.svd_threshold);
    const cx znext = z + emalpha * zeta - emalpha * q;  // h(z)
    const double res = std::abs(znext - z);
    tr.iterates.push_back(znext);
    tr.residuals.push_back(res);
    if (tr.residuals.size() >= 2) {
      const double prev = tr.residuals[tr.residuals.size() - 2];
      if (prev > 1e-14 && res > 1e-16)
        tr.contraction_ratio = std::max(tr.contraction_ratio, res / prev);
    }
    z = znext;
    if (res <= cfg.fp_tol * 0.1) {
      tr.converged = true;
      break;
    }
  }
  tr.z_final = z;
  tr.q_recheck = q_alpha_closed(w, m, z, fam, V, cfg.svd_threshold);
  tr.inside_strengthened_disc =
      std::abs(z) <= tr.strengthened_disc_bound * (1.0 + 1e-9) + cfg.fp_tol;
  return tr;
}

struct RenormResult {
  LinOp op;                  // R_alpha(H[w])(zeta) on the shifted closed mask
  FixedPointTrace trace;
  double vacuum_law_residual = 0.0;  // | <op>_vac - zeta |
};

inline RenormResult renorm_map(const KernelSeq& w, int m, cx zeta, const SmoothFamily& fam,
                               const Mask& V, const FlowConfig& cfg) {
  RenormResult out;
  out.trace = solve_E(w, m, zeta, fam, V, cfg);
  if (!out.trace.converged)
    throw NoConvergence("renorm_map: fixed point did not converge within " +
                        std::to_string(cfg.max_fp_iters) + " iterations");
  RescaledResult r = rescaled_fs(w, out.trace.z_final, m, fam, V, cfg.svd_threshold);
  out.op = std::move(r.op);
  out.vacuum_law_residual = std::abs(vacuum_expectation(out.op) - zeta);
  return out;
}

// --- norm bound suite -----------------------------------------------------------

inline FlowReport bound_suite(const KernelSeq& w, int m, cx z, const SmoothFamily& fam,
                              const Mask& V, const FlowConfig& cfg) {
  FlowReport rep;
  rep.suite = "bounds";
  const FockBasis& b = w.basis();
  const double alpha = m * b.grid().delta();
  const double ea = std::exp(alpha);

  const double wi = xi_norm_Z(w, cfg.norms, /*interaction_only=*/true);
  const double dr_dev = partial_norms(subtract_free(w), cfg.norms).dr_full;

  auto hz = HypothesisRecord::make("bounds.z_disc", std::abs(z), 0.25 * std::exp(-alpha),
                                   /*strict=*/false);
  auto h1 = HypothesisRecord::make("bounds.dr_half", dr_dev, 0.5);
  auto h2 = HypothesisRecord::make("bounds.neumann", 4.0 * cfg.norms.xi * wi * ea,
                                   1.0 - 2.0 * dr_dev);
  auto c1 = HypothesisRecord::make("bounds.dr_tenth", dr_dev, 0.1);
  auto c2 = HypothesisRecord::make("bounds.interaction_small", wi, std::exp(-alpha) / 100.0,
                                   /*strict=*/false);
  for (auto h : {hz, h1, h2, c1, c2}) rep.add_hypothesis(h);
  const bool lemma_ok = hz.satisfied && h1.satisfied && h2.satisfied;
  const bool cor_ok = hz.satisfied && c1.satisfied && c2.satisfied;

  LinOp H = quantize(w, z, V);
  FeshbachInput in = make_flow_input(H, fam, m, cfg.svd_threshold);
  const Mask& bm = in.sub.chibar_support;

  // Delta restricted to the chibar support is diagonal; its inverse norm is
  // both 1/sigma_min and the reciprocal of the smallest |delta_z(r)|.
  LinOp w00 = quantize_free(w, z, V);
  LinOp delta = delta_op(in.T, w00, in.chi, in.chibar);
  LinOp delta_bar = delta.compress(bm, bm);
  double delta_inv_norm = 0.0, delta_inv_diag = 0.0;
  bool delta_invertible = true;
  try {
    delta_inv_norm = op_norm(bounded_inverse(delta_bar, cfg.svd_threshold).inverse);
    double mn = 1e300;
    for (int k = 0; k < bm.size(); ++k) mn = std::min(mn, std::abs(delta_bar.entries()(k, k)));
    delta_inv_diag = 1.0 / mn;
    rep.add(CheckRecord::residual_check(
        "bounds.delta_diag_crosscheck",
        "||(Delta|chibar)^{-1}|| = 1 / min_r |delta_z(r)| over the chibar support",
        std::abs(delta_inv_norm - delta_inv_diag), 1e-9 * std::max(1.0, delta_inv_diag)));
  } catch (const SingularOperator&) {
    delta_invertible = false;
  }

  if (lemma_ok && delta_invertible) {
    rep.add(CheckRecord::bound_check("bounds.delta_lemma",
                                     "||(Delta|chibar)^{-1}|| <= 4 e^a / (1 - 2||w-r||_dr)",
                                     delta_inv_norm, 4.0 * ea / (1.0 - 2.0 * dr_dev)));
  } else {
    rep.add(CheckRecord::skipped_check("bounds.delta_lemma",
                                       "||(Delta|chibar)^{-1}|| <= 4 e^a / (1 - 2||w-r||_dr)",
                                       delta_invertible ? "hypotheses not satisfied"
                                                        : "Delta singular"));
  }
  if (cor_ok && delta_invertible) {
    rep.add(CheckRecord::bound_check("bounds.delta_simple",
                                     "||(Delta|chibar)^{-1}|| <= 5 e^a", delta_inv_norm,
                                     5.0 * ea));
  } else {
    rep.add(CheckRecord::skipped_check("bounds.delta_simple",
                                       "||(Delta|chibar)^{-1}|| <= 5 e^a",
                                       "hypotheses not satisfied"));
  }

  DomainVerdict dv = check_domain(in);
  if (dv.in_domain) {
    if (lemma_ok) {
      rep.add(CheckRecord::bound_check(
          "bounds.hbar_lemma",
          "||(H_chibar)^{-1}|| <= 4 e^a / (1 - 2||w-r||_dr - 4 xi ||w_I|| e^a)",
          dv.inv_norm_hbar,
          4.0 * ea / (1.0 - 2.0 * dr_dev - 4.0 * cfg.norms.xi * wi * ea)));
    } else {
      rep.add(CheckRecord::skipped_check("bounds.hbar_lemma", "lemma-grade inverse bound",
                                         "hypotheses not satisfied"));
    }
    if (cor_ok) {
      rep.add(CheckRecord::bound_check("bounds.hbar_simple", "||(H_chibar)^{-1}|| <= 10 e^a",
                                       dv.inv_norm_hbar, 10.0 * ea));
    } else {
      rep.add(CheckRecord::skipped_check("bounds.hbar_simple",
                                         "||(H_chibar)^{-1}|| <= 10 e^a",
                                         "hypotheses not satisfied"));
    }
  } else {
    rep.add(CheckRecord::flag_check("bounds.hbar_domain",
                                    "H_chibar invertible under the stated hypotheses",
                                    !(lemma_ok || cor_ok)));
  }

  // Half-plane invertibility of H[w(z)].
  const double re_threshold = cfg.norms.xi * wi * 2.0 * ea;
  if (z.real() >= re_threshold) {
    rep.add(CheckRecord::flag_check("bounds.halfplane_invertible",
                                    "H[w(z)] invertible when Re z >= 2 xi ||w_I|| e^a",
                                    is_invertible(H, cfg.svd_threshold)));
  } else {
    rep.add(CheckRecord::skipped_check("bounds.halfplane_invertible",
                                       "H[w(z)] invertible when Re z >= 2 xi ||w_I|| e^a",
                                       "Re z below the threshold"));
  }

  // Re w00(z,r) >= Re z pointwise on the grid (needs ||w-r||_dr <= 1).
  if (dr_dev <= 1.0) {
    double worst = 0.0;
    const Eigen::VectorXcd vals = w.components()[0].val[0] * w.zpow(z);
    for (int i = 0; i < vals.size(); ++i)
      worst = std::max(worst, z.real() - vals(i).real());
    rep.add(CheckRecord::residual_check("bounds.real_part", "Re w00(z,r) >= Re z on the grid",
                                        worst, 1e-12));
  } else {
    rep.add(CheckRecord::skipped_check("bounds.real_part", "Re w00(z,r) >= Re z on the grid",
                                       "||w-r||_dr exceeds 1"));
  }
  return rep;
}

// --- sandwich suite --------------------------------------------------------------

// Operator-level identities of the composition step: the sandwiched kernel
// w^{a+b}, the overlap operators X, Xbar, and the headline conjugation
// identity relating the rescaled map at level a to the map with cutoff X at
// level a+b.
inline FlowReport sandwich_suite(const KernelSeq& w, int m_a, int m_b, cx z,
                                 const SmoothFamily& fam, const Mask& V,
                                 const FlowConfig& cfg) {
  FlowReport rep;
  rep.suite = "sandwich";
  const FockBasis& b = w.basis();
  const double delta = b.grid().delta();
  const double alpha = m_a * delta, beta = m_b * delta, gamma = alpha + beta;
  const double tol = cfg.identity_tol;

  CutoffPair pa = chi_operator(fam, alpha, b, V);
  CutoffPair pg = chi_operator(fam, gamma, b, V);
  OverlapFunctions ov = overlap_functions(fam, alpha, beta);

  // X, Xbar lifted to diagonal operators
  Vec dx(V.size()), dxb(V.size());
  std::vector<int> xsup, xbsup, xov;
  for (int k = 0; k < V.size(); ++k) {
    auto [xv, xbv] = ov.both(b.hph_value(V[k]));
    dx(k) = xv;
    dxb(k) = xbv;
    if (xv > kSupportEps) xsup.push_back(V[k]);
    if (xbv > kSupportEps) xbsup.push_back(V[k]);
    if (xv > kSupportEps && xbv > kSupportEps) xov.push_back(V[k]);
  }
  CutoffPair px{LinOp::diagonal(b, V, dx), LinOp::diagonal(b, V, dxb),
                SubspaceTriple{Mask(xsup), Mask(xbsup), Mask(xov)}};

  rep.add(CheckRecord::flag_check("sandwich.xbar_support",
                                  "supp Xbar(H_ph) = supp chibar_a(H_ph)",
                                  px.subspaces.chibar_support == pa.subspaces.chibar_support));
  rep.add(CheckRecord::residual_check(
      "sandwich.x_pythagoras", "X^2 + Xbar^2 = 1 as operators",
      op_norm(px.chi * px.chi + px.chibar * px.chibar - LinOp::identity(b, V)), tol));

  KernelSeq wg = sandwich_kernel(w, fam, gamma);
  LinOp H = quantize(w, z, V);
  LinOp Hg = quantize(wg, z, V);
  LinOp T = hph(b, V);

  FeshbachInput in_g{H, T, pg.chi, pg.chibar, pg.subspaces, cfg.svd_threshold};
  FeshbachInput in_a{H, T, pa.chi, pa.chibar, pa.subspaces, cfg.svd_threshold};

  // sandwiched kernel reproduces H_{chibar_{a+b}, H_ph} on its support
  {
    const Mask& sm = pg.subspaces.chibar_support;
    LinOp lhs = hbar_op(in_g);
    LinOp rhs = Hg.compress(sm, sm);
    rep.add(CheckRecord::residual_check(
        "sandwich.kernel_matches_block",
        "H[w]_{chibar_{a+b}, H_ph} = H[w^{a+b}] on the chibar_{a+b} support",
        op_norm(lhs - rhs), tol, op_norm(lhs), op_norm(rhs)));
  }

  // level-a block equals the X-block of the sandwiched operator
  {
    const Mask& sm = pa.subspaces.chibar_support;
    LinOp lhs = hbar_op(in_a);
    FeshbachInput in_x{Hg, T, px.chi, px.chibar, px.subspaces, cfg.svd_threshold};
    LinOp rhs = hbar_op(in_x);
    rep.add(CheckRecord::residual_check(
        "sandwich.block_transport",
        "H[w]_{chibar_a, H_ph} = H[w^{a+b}]_{Xbar, H_ph}",
        op_norm(lhs - rhs.to_masks(sm, sm)), tol, op_norm(lhs), op_norm(rhs)));
  }

  // Delta and f transport
  LinOp w00 = quantize_free(w, z, V);
  LinOp wg00 = quantize_free(wg, z, V);
  {
    LinOp d1 = delta_op(T, w00, pa.chi, pa.chibar);
    LinOp d2 = delta_op(T, wg00, px.chi, px.chibar);
    rep.add(CheckRecord::residual_check("sandwich.delta_transport",
                                        "Delta_{chi_a,H_ph}[w00] = Delta_{X,H_ph}[w00^{a+b}]",
                                        op_norm(d1 - d2), tol, op_norm(d1), op_norm(d2)));
    TradeOperator f1 = f_op(T, w00, pa, cfg.svd_threshold);
    TradeOperator f2 = f_op(T, wg00, px, cfg.svd_threshold);
    rep.add(CheckRecord::residual_check("sandwich.f_transport",
                                        "f_{chi_a,H_ph}[w00] = f_{X,H_ph}[w00^{a+b}]",
                                        op_norm(f1.f - f2.f), tol));
  }

  // headline identity: H_ph chi_b^2 + chibar_b R_a(H) chibar_b
  //                    = e^a Gamma_a F_{X,H_ph}(H[w^{a+b}]) Gamma_a^*
  {
    RescaledResult ra = rescaled_fs_operator(H, fam, m_a, cfg.svd_threshold);
    const Mask& Vout = ra.out_mask;
    CutoffPair pb_out = chi_operator(fam, beta, b, Vout);
    LinOp lhs = hph(b, Vout) * pb_out.chi * pb_out.chi +
                pb_out.chibar * ra.op.to_masks(Vout, Vout) * pb_out.chibar;

    FeshbachInput in_x{Hg, T, px.chi, px.chibar, px.subspaces, cfg.svd_threshold};
    const Mask closed_x = chi_closed_mask(b, V, m_a);
    LinOp fx = fs_map(in_x, closed_x).F;
    LinOp rhs = rescale(fx, m_a).to_masks(Vout, Vout);
    rep.add(CheckRecord::residual_check(
        "sandwich.conjugation",
        "H_ph chi_b^2 + chibar_b Rhat_a(H) chibar_b = e^a Gamma_a F_{X,H_ph}(H[w^{a+b}]) "
        "Gamma_a^*",
        op_norm(lhs - rhs), tol, op_norm(lhs), op_norm(rhs)));
  }
  return rep;
}

// --- semigroup suite --------------------------------------------------------------

inline FlowReport verify_hat_semigroup(const KernelSeq& w, int m_a, int m_b, cx z,
                                       const SmoothFamily& fam, const Mask& V,
                                       const FlowConfig& cfg) {
  FlowReport rep;
  rep.suite = "hat-semigroup";
  const FockBasis& b = w.basis();
  const double delta = b.grid().delta();
  const double tol = cfg.identity_tol;

  LinOp H = quantize(w, z, V);
  RescaledResult ra = rescaled_fs_operator(H, fam, m_a, cfg.svd_threshold);
  RescaledResult rba = rescaled_fs_operator(ra.op, fam, m_b, cfg.svd_threshold);
  RescaledResult rab = rescaled_fs_operator(H, fam, m_a + m_b, cfg.svd_threshold);

  rep.add(CheckRecord::flag_check("semigroup.masks",
                                  "composed and one-shot maps live on the same subspace",
                                  rba.op.range_mask() == rab.op.range_mask()));
  rep.add(CheckRecord::residual_check(
      "semigroup.compose", "Rhat_b(Rhat_a(H[w])) = Rhat_{a+b}(H[w])",
      op_norm(rba.op - rab.op.to_masks(rba.op.range_mask(), rba.op.domain_mask())), tol,
      op_norm(rba.op), op_norm(rab.op)));

  // reversed order
  RescaledResult rb = rescaled_fs_operator(H, fam, m_b, cfg.svd_threshold);
  RescaledResult rab2 = rescaled_fs_operator(rb.op, fam, m_a, cfg.svd_threshold);
  rep.add(CheckRecord::residual_check(
      "semigroup.commute", "Rhat_a(Rhat_b(H[w])) = Rhat_{a+b}(H[w])",
      op_norm(rab2.op - rab.op.to_masks(rab2.op.range_mask(), rab2.op.domain_mask())), tol));

  // inverse route, valid when 0 is in the resolvent set of H[w]
  if (is_invertible(H, cfg.svd_threshold)) {
    const Mask& M2 = rba.op.range_mask();
    LinOp direct = bounded_inverse(rba.op, cfg.svd_threshold).inverse;

    // through level a:
    //   e^{-b} Gamma_b [ chi_b Rhat_a^{-1} chi_b + chibar_b H_ph^{-1} chibar_b ] Gamma_b^*
    const Mask& V1 = ra.out_mask;
    CutoffPair pb1 = chi_operator(fam, m_b * delta, b, V1);
    LinOp ra_inv = bounded_inverse(ra.op, cfg.svd_threshold).inverse;
    LinOp mid = pb1.chi * ra_inv * pb1.chi +
                func_calc(
                    [&](double r) {
                      const double cb = fam.chibar(m_b * delta, r);
                      return r <= 1e-14 ? cx(0, 0) : cx(cb * cb / r, 0);
                    },
                    hph(b, V1));
    LinOp route_a = (std::exp(-m_b * delta) * dilate_conj(mid, m_b)).to_masks(M2, M2);
    rep.add(CheckRecord::residual_check(
        "semigroup.inverse_step",
        "[Rhat_b(Rhat_a(H))]^{-1} = e^{-b} Gamma_b [chi_b Rhat_a^{-1} chi_b + chibar_b "
        "H_ph^{-1} chibar_b] Gamma_b^*",
        op_norm(direct - route_a), tol, op_norm(direct), op_norm(route_a)));

    // collapsed route at level a+b
    const int m_g = m_a + m_b;
    CutoffPair pgv = chi_operator(fam, m_g * delta, b, V);
    LinOp hinv = bounded_inverse(H, cfg.svd_threshold).inverse;
    LinOp inner = pgv.chi * hinv * pgv.chi +
                  func_calc(
                      [&](double r) {
                        const double cb = fam.chibar(m_g * delta, r);
                        return r <= 1e-14 ? cx(0, 0) : cx(cb * cb / r, 0);
                      },
                      hph(b, V));
    LinOp route_ab = (std::exp(-m_g * delta) * dilate_conj(inner, m_g)).to_masks(M2, M2);
    rep.add(CheckRecord::residual_check(
        "semigroup.inverse_collapsed",
        "[Rhat_b(Rhat_a(H))]^{-1} = e^{-(a+b)} Gamma_{a+b} [chi_{a+b} H^{-1} chi_{a+b} + "
        "H_ph^{-1} chibar_{a+b}^2] Gamma_{a+b}^*",
        op_norm(direct - route_ab), tol));
  } else {
    rep.add(CheckRecord::skipped_check("semigroup.inverse_step", "inverse composition route",
                                       "H[w] not invertible at this z"));
  }
  return rep;
}

// --- spectral-parameter diagnostics -----------------------------------------------

// Centered complex finite-difference estimate of |d E_alpha / d zeta|.
inline double e_derivative_fd(const KernelSeq& w, int m, cx zeta, const SmoothFamily& fam,
                              const Mask& V, const FlowConfig& cfg) {
  const double alpha = m * w.basis().grid().delta();
  const double h = std::exp(-alpha) * cfg.r_Z / 100.0;
  auto E = [&](cx zt) { return solve_E(w, m, zt, fam, V, cfg).z_final; };
  const cx dre = (E(zeta + h) - E(zeta - h)) / (2.0 * h);
  const cx dim = (E(zeta + cx(0, h)) - E(zeta - cx(0, h))) / cx(0, 2.0 * h);
  return std::max(std::abs(dre), std::abs(dim));
}

// Image containment: every z in D(e^{-a} r_Z - 10 e^a (xi ||w_I||)^2) has
// Q_alpha(z) in D(r_Z), hence lies in the image of the inverse map.
inline std::vector<CheckRecord> containment_check(const KernelSeq& w, int m,
                                                  const SmoothFamily& fam, const Mask& V,
                                                  const FlowConfig& cfg) {
  std::vector<CheckRecord> out;
  const double alpha = m * w.basis().grid().delta();
  const double xiwi = cfg.norms.xi * xi_norm_Z(w, cfg.norms, /*interaction_only=*/true);
  const double rho = std::exp(-alpha) * cfg.r_Z - 10.0 * std::exp(alpha) * xiwi * xiwi;
  if (!(10.0 * std::exp(alpha) * xiwi * xiwi < std::exp(-alpha) * cfg.r_Z)) {
    out.push_back(CheckRecord::skipped_check("fixed_point.containment",
                                             "D(e^{-a} r_Z - 10 e^a (xi ||w_I||)^2) inside "
                                             "the image of the spectral-parameter map",
                                             "hypothesis not satisfied"));
    return out;
  }
  double worst = 0.0;
  for (double frac : {0.999, 0.5}) {
    for (cx z : z_ring(12, rho * frac)) {
      const cx q = q_alpha_closed(w, m, z, fam, V, cfg.svd_threshold);
      worst = std::max(worst, std::abs(q) - cfg.r_Z);
    }
  }
  auto c = CheckRecord::residual_check("fixed_point.containment",
                                       "|Q_a(z)| < r_Z on D(e^{-a} r_Z - 10 e^a (xi "
                                       "||w_I||)^2)",
                                       std::max(0.0, worst), 0.0);
  c.extra["ring_radius"] = rho;
  out.push_back(std::move(c));
  return out;
}

// --- kernel extraction of the renormalized operator --------------------------------

struct FlowFit {
  KernelSeq kernel;   // kernel of z -> R_alpha(H[w])(z) on the rescaled subspace
  Mask out_mask;
  int out_window = 0;
  double residual_fro = 0.0;  // fit residual over the sampling ring
  double residual_op = 0.0;   // operator-norm residual at the validation points
  double recenter_size = 0.0;
  int active_dofs = 0;
  int pruned_dofs = 0;
};

inline FlowFit fit_renormalized_kernel(const KernelSeq& w, int m, const SmoothFamily& fam,
                                       const Mask& V, int window, const FlowConfig& cfg,
                                       double validation_radius) {
  const FockBasis& b = w.basis();
  const Mask V1 = shift_mask_down(b, V, m);
  const int window1 = window - m;
  if (window1 < 0) throw std::invalid_argument("fit_renormalized_kernel: window exhausted");

  KernelSeq shape = make_fit_template(b, w.rgrid(), window1, w.m_max(), cfg.fit_degree, cfg.fit_ring_radius);
  auto target = [&](cx z) -> LinOp {
    RenormResult r = renorm_map(w, m, z, fam, V, cfg);
    if (r.op.range_mask() != V1)
      throw std::logic_error("fit_renormalized_kernel: unexpected output mask");
    return r.op;
  };
  std::vector<cx> zs = z_ring(cfg.fit_ring_samples, cfg.fit_ring_radius);
  FitResult fit = fit_kernel(
      zs, [&](cx z) { return target(z).entries(); }, shape, V1);

  FlowFit out;
  out.kernel = std::move(fit.kernel);
  out.out_mask = V1;
  out.out_window = window1;
  out.residual_fro = fit.max_residual;
  out.recenter_size = fit.recenter_size;
  out.active_dofs = fit.active_dofs;
  out.pruned_dofs = fit.pruned_dofs;

  std::vector<cx> val = z_ring(6, validation_radius);
  val.push_back(cx(0, 0));
  val.push_back(cx(0.5 * validation_radius, 0.25 * validation_radius));
  for (cx z : val) {
    LinOp t = target(z);
    out.residual_op = std::max(out.residual_op, op_norm(quantize(out.kernel, z, V1) - t));
  }
  if (out.residual_op > cfg.fit_abort_threshold)
    throw FitResidualTooLarge("fit_renormalized_kernel: validation residual " +
                              std::to_string(out.residual_op));
  return out;
}

// --- composed flow -------------------------------------------------------------------

// Composition law of the spectral-parameter maps and the flow property of
// the renormalization map, through an extracted kernel for the level-a
// output. Fit-induced slack is propagated explicitly: first-order operator
// sensitivity times the measured fit residual.
inline FlowReport verify_cocycle_and_flow(const KernelSeq& w, int m_a, int m_b,
                                          const std::vector<cx>& zeta_set,
                                          const SmoothFamily& fam, const Mask& V, int window,
                                          const FlowConfig& cfg) {
  FlowReport rep;
  rep.suite = "cocycle-flow";
  const FockBasis& b = w.basis();
  const double delta = b.grid().delta();
  const double beta = m_b * delta;
  const double eb = std::exp(beta);

  for (auto& h : contraction_conditions(w, m_a, cfg)) rep.add_hypothesis(h);
  for (auto& h : contraction_conditions(w, m_a + m_b, cfg)) rep.add_hypothesis(h);

  FlowFit ft = fit_renormalized_kernel(w, m_a, fam, V, window, cfg,
                                       0.25 * std::exp(-beta) * 1.05);
  {
    auto c = CheckRecord::residual_check("flow.fit_residual",
                                         "H[w~(z)] = R_a(H[w])(z) on the sampling disc",
                                         ft.residual_op, cfg.fit_abort_threshold);
    c.extra["residual_fro"] = ft.residual_fro;
    c.extra["recenter_size"] = ft.recenter_size;
    c.extra["active_dofs"] = ft.active_dofs;
    rep.add(std::move(c));
  }
  for (auto& h : contraction_conditions(ft.kernel, m_b, cfg)) rep.add_hypothesis(h);
  {
    const double xiwi =
        cfg.norms.xi * xi_norm_Z(ft.kernel, cfg.norms, /*interaction_only=*/true);
    rep.add_hypothesis(HypothesisRecord::make(
        "flow.image_hypothesis", 10.0 * eb * xiwi * xiwi + 2.0 * eb * xiwi,
        std::exp(-beta) * cfg.r_Z));
  }

  const Mask& V1 = ft.out_mask;
  for (size_t i = 0; i < zeta_set.size(); ++i) {
    const cx zeta = zeta_set[i];
    const std::string tag = "[" + std::to_string(i) + "]";

    FixedPointTrace tb = solve_E(ft.kernel, m_b, zeta, fam, V1, cfg);
    FixedPointTrace ta = solve_E(w, m_a, tb.z_final, fam, V, cfg);
    FixedPointTrace tab = solve_E(w, m_a + m_b, zeta, fam, V, cfg);
    if (!(tb.converged && ta.converged && tab.converged)) {
      rep.add(CheckRecord::flag_check("flow.converged" + tag,
                                      "spectral-parameter fixed points converged", false));
      continue;
    }

    // fit slack through the vacuum-expectation map
    const cx zp = tb.z_final;
    LinOp Wt = quantize_interaction(ft.kernel, zp, V1);
    FeshbachInput inb = make_flow_input(quantize(ft.kernel, zp, V1), fam, m_b,
                                        cfg.svd_threshold);
    DomainVerdict dvb = check_domain(inb);
    const double wn = op_norm(Wt), gn = dvb.inv_norm_hbar;
    const double kappa = 2.0 * wn * gn + wn * wn * gn * gn;
    const double slack_E = 2.0 * eb * kappa * ft.residual_op;

    auto ce = CheckRecord::residual_check(
        "flow.parameter_composition" + tag, "E_{a+b,w} = E_{a,w} o E_{b,w~}",
        std::abs(tab.z_final - ta.z_final), cfg.fp_tol + slack_E);
    ce.extra["slack"] = slack_E;
    rep.add(std::move(ce));

    // flow property at the operator level
    RenormResult r_comp = renorm_map(ft.kernel, m_b, zeta, fam, V1, cfg);
    RenormResult r_direct = renorm_map(w, m_a + m_b, zeta, fam, V, cfg);
    rep.add(CheckRecord::flag_check("flow.masks" + tag,
                                    "composed and one-shot maps share the subspace",
                                    r_comp.op.range_mask() == r_direct.op.range_mask()));

    const double h = std::exp(-beta) * cfg.r_Z / 100.0;
    LinOp pert = rescaled_fs(ft.kernel, zp + h, m_b, fam, V1, cfg.svd_threshold).op;
    LinOp base = rescaled_fs(ft.kernel, zp, m_b, fam, V1, cfg.svd_threshold).op;
    const double lz = op_norm(pert - base) / h;
    const double slack_R =
        eb * (1.0 + wn * gn) * (1.0 + wn * gn) * ft.residual_op + lz * slack_E;

    auto cf = CheckRecord::residual_check(
        "flow.operator_composition" + tag, "R_b o R_a (H[w]) = R_{a+b}(H[w])",
        op_norm(r_comp.op -
                r_direct.op.to_masks(r_comp.op.range_mask(), r_comp.op.domain_mask())),
        cfg.identity_tol + slack_R);
    cf.extra["slack"] = slack_R;
    rep.add(std::move(cf));

    rep.add(CheckRecord::residual_check("flow.vacuum_law" + tag,
                                        "<R_{a+b}(H[w])(zeta)>_vac = zeta",
                                        r_direct.vacuum_law_residual, cfg.fp_tol));
    rep.add(CheckRecord::residual_check("flow.vacuum_law_composed" + tag,
                                        "<R_b(H[w~])(zeta)>_vac = zeta",
                                        r_comp.vacuum_law_residual, cfg.fp_tol + slack_E));
  }
  return rep;
}

// --- iteration experiment --------------------------------------------------------------

struct IterateStep {
  double interaction_norm = 0.0;  // ||(w_k)_I||^(xi) over the z-disc
  double ratio = 0.0;             // interaction_norm / previous
  double fit_residual_op = 0.0;
  double recenter_size = 0.0;
  bool polydisc_member = false;
  double dr_minus = 0.0, dz_minus = 0.0;  // deviation sups on r in [0, 1/2]
};

struct IterateTrace {
  std::vector<IterateStep> steps;
  bool completed = false;
  std::string stop_reason;
};

inline IterateTrace iterate_flow(const KernelSeq& w0, int m, int n_steps,
                                 const SmoothFamily& fam, const Mask& V0, int window0,
                                 const PolydiscSpec& disc, const FlowConfig& cfg) {
  IterateTrace tr;
  KernelSeq w = w0;
  Mask V = V0;
  int window = window0;
  auto record = [&](const KernelSeq& wk, double fit_res, double recenter) {
    IterateStep s;
    s.interaction_norm = xi_norm_Z(wk, cfg.norms, /*interaction_only=*/true);
    s.ratio = tr.steps.empty() ? 0.0
                               : s.interaction_norm / tr.steps.back().interaction_norm;
    s.fit_residual_op = fit_res;
    s.recenter_size = recenter;
    s.polydisc_member = polydisc_member(wk, disc, cfg.norms).member;
    PartialNorms dev = partial_norms(subtract_free(wk), cfg.norms);
    s.dr_minus = dev.dr_minus;
    s.dz_minus = dev.dz_minus;
    tr.steps.push_back(std::move(s));
  };
  record(w, 0.0, 0.0);
  for (int k = 0; k < n_steps; ++k) {
    try {
      FlowFit ft = fit_renormalized_kernel(w, m, fam, V, window, cfg,
                                           0.25 * std::exp(-m * w0.basis().grid().delta()));
      w = std::move(ft.kernel);
      V = ft.out_mask;
      window = ft.out_window;
      record(w, ft.residual_op, ft.recenter_size);
    } catch (const std::exception& e) {
      tr.stop_reason = e.what();
      return tr;
    }
  }
  tr.completed = true;
  return tr;
}

}  // namespace feshflow

#pragma once

// The smooth Feshbach-Schur map
//
//   F_{chi,T}(H) = T_chi + chi W chi
//                  - chi W chibar (H_{chibar,T})^{-1} chibar W chi,
//   W = H - T,  H_{chibar,T} = T_chibar + chibar W chibar,
//
// together with its domain checks, isospectrality machinery, the
// independence of F from T off the overlap Ran(chi chibar), the
// re-expression of F in terms of W_S = H - S, and the embedding that
// reduces the smooth map to the projection-based (sharp) map on the
// doubled space h_chi (+) h_chibar.
//
// All cutoffs are diagonal in the occupation basis, so subspaces are
// coordinate masks and the formulas are assembled as masked dense blocks.

#include "feshflow/cutoffs.hpp"
#include "feshflow/linop.hpp"
#include "feshflow/report.hpp"

namespace feshflow {

struct NotInDomain : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct PreconditionViolated : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FeshbachInput {
  LinOp H;         // square on the ambient mask
  LinOp T;         // diagonal, commuting with chi and chibar
  LinOp chi;       // diagonal, >= 0
  LinOp chibar;    // diagonal, >= 0, chi^2 + chibar^2 = 1
  SubspaceTriple sub;
  double svd_threshold = 1e-12;  // relative invertibility margin
  double commute_tol = 1e-12;

  const Mask& ambient() const { return H.range_mask(); }
  LinOp W() const { return H - T; }
};

namespace detail {

inline void require_diagonal(const LinOp& op, const char* what) {
  const Mat& a = op.entries();
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c)
      if (r != c && a(r, c) != cx(0, 0))
        throw PreconditionViolated(std::string(what) + ": operator must be diagonal");
}

inline double commutator_norm(const LinOp& a, const LinOp& b) { return op_norm(a * b - b * a); }

}  // namespace detail

// Hypothesis checks shared by every entry point: chi, chibar self-adjoint
// positive diagonal with chi^2 + chibar^2 = 1; T commutes with both;
// T restricted to h_chibar is invertible with margin.
inline void validate_feshbach_input(const FeshbachInput& in) {
  detail::require_diagonal(in.chi, "chi");
  detail::require_diagonal(in.chibar, "chibar");
  const Mat& c = in.chi.entries();
  const Mat& cb = in.chibar.entries();
  for (int i = 0; i < c.rows(); ++i) {
    if (c(i, i).imag() != 0.0 || c(i, i).real() < 0.0)
      throw PreconditionViolated("chi must be positive");
    if (cb(i, i).imag() != 0.0 || cb(i, i).real() < 0.0)
      throw PreconditionViolated("chibar must be positive");
  }
  const double pyth = op_norm(in.chi * in.chi + in.chibar * in.chibar -
                              LinOp::identity(in.H.basis(), in.ambient()));
  if (pyth > 1e-12)
    throw PreconditionViolated("chi^2 + chibar^2 = 1 violated: " + std::to_string(pyth));
  const double tscale = std::max(1.0, op_norm(in.T));
  if (detail::commutator_norm(in.chi, in.T) > in.commute_tol * tscale ||
      detail::commutator_norm(in.chibar, in.T) > in.commute_tol * tscale)
    throw PreconditionViolated("T does not commute with the cutoff pair");
  LinOp tbar = in.T.compress(in.sub.chibar_support, in.sub.chibar_support);
  if (!is_invertible(tbar, in.svd_threshold))
    throw PreconditionViolated("T restricted to h_chibar is not invertible");
}

// H_{chibar,T} = T_chibar + chibar W chibar as an operator on h_chibar.
inline LinOp hbar_op(const FeshbachInput& in) {
  const Mask& m = in.sub.chibar_support;
  LinOp w = in.W();
  return in.T.compress(m, m) + (in.chibar * w * in.chibar).compress(m, m);
}

// Same operator zero-embedded into the ambient mask.
inline LinOp hbar_embedded(const FeshbachInput& in) {
  return hbar_op(in).embed(in.ambient(), in.ambient());
}

struct DomainVerdict {
  bool in_domain = false;
  double hbar_margin = 0.0;     // smallest singular value of H_{chibar,T}
  double inv_norm_hbar = 0.0;   // ||(H_{chibar,T})^{-1}||
  double coupling_norm = 0.0;   // ||chibar (H_{chibar,T})^{-1} chibar W chi||
  std::string reason;
};

inline DomainVerdict check_domain(const FeshbachInput& in) {
  validate_feshbach_input(in);
  DomainVerdict v;
  LinOp hbar = hbar_op(in);
  try {
    InverseResult inv = bounded_inverse(hbar, in.svd_threshold);
    v.in_domain = true;
    v.hbar_margin = inv.sigma_min;
    v.inv_norm_hbar = op_norm(inv.inverse);
    const Mask& amb = in.ambient();
    LinOp ginv = inv.inverse.embed(amb, amb);
    v.coupling_norm = op_norm(in.chibar * ginv * in.chibar * in.W() * in.chi);
  } catch (const SingularOperator& e) {
    v.in_domain = false;
    v.reason = e.what();
  }
  return v;
}

struct FeshbachResult {
  LinOp F;                  // on the chi support (or the mask requested)
  DomainVerdict verdict;
  double inv_norm_hbar = 0.0;
  double formula_residual = 0.0;  // independent re-assembly of the formula
};

// Smooth Feshbach-Schur map, assembled on `out_mask` (defaults to the chi
// support; callers may pass a larger coordinate mask on which chi vanishes,
// where the formula degenerates to the T-block).
inline FeshbachResult fs_map(const FeshbachInput& in,
                             std::optional<Mask> out_mask = std::nullopt) {
  DomainVerdict v = check_domain(in);
  if (!v.in_domain) throw NotInDomain("fs_map: " + v.reason);
  const Mask& amb = in.ambient();
  const Mask mask = out_mask.value_or(in.sub.chi_support);

  LinOp w = in.W();
  LinOp hbar = hbar_op(in);
  InverseResult inv = bounded_inverse(hbar, in.svd_threshold);
  LinOp ginv = inv.inverse.embed(amb, amb);
  LinOp left = in.chi * w * in.chibar;
  LinOp right = in.chibar * w * in.chi;
  LinOp full = in.T + in.chi * w * in.chi - left * ginv * right;
  FeshbachResult res;
  res.F = full.compress(mask, mask);
  res.verdict = v;
  res.inv_norm_hbar = op_norm(inv.inverse);

  // Re-assembly through linear solves instead of the explicit inverse.
  LinOp rc = right.compress(in.sub.chibar_support, mask);
  Mat x = hbar.entries().partialPivLu().solve(rc.entries());
  LinOp lc = left.compress(mask, in.sub.chibar_support);
  Mat f2 = in.T.compress(mask, mask).entries() +
           (in.chi * w * in.chi).compress(mask, mask).entries() - lc.entries() * x;
  res.formula_residual = op_norm(Mat(res.F.entries() - f2));
  return res;
}

// Projection-based (sharp) map: P is a 0/1 coordinate mask inside the
// ambient mask of H; returns the Schur complement on Ran(P).
inline LinOp sharp_fs_map(const LinOp& H, const Mask& p, double svd_threshold = 1e-12) {
  if (!H.square()) throw std::invalid_argument("sharp_fs_map: H must be square");
  if (!p.subset_of(H.range_mask()))
    throw std::invalid_argument("sharp_fs_map: P must be contained in the ambient mask");
  const Mask pc = mask_diff(H.range_mask(), p);
  LinOp hpp = H.compress(p, p);
  if (pc.size() == 0) return hpp;
  LinOp hcc = H.compress(pc, pc);
  InverseResult inv = bounded_inverse(hcc, svd_threshold);
  return hpp - H.compress(p, pc) * inv.inverse * H.compress(pc, p);
}

// ---------------------------------------------------------------------------
// Theorem suites
// ---------------------------------------------------------------------------

// Invertibility equivalence, the closed-form inverse of F, and kernel
// dimension equality.
inline FlowReport isospectrality_check(const FeshbachInput& in, double tol) {
  FlowReport rep;
  rep.suite = "isospectrality";
  FeshbachResult fr = fs_map(in);
  const Mask& cm = in.sub.chi_support;
  const Mask& amb = in.ambient();

  const bool h_inv = is_invertible(in.H, in.svd_threshold);
  const bool f_inv = is_invertible(fr.F, in.svd_threshold);
  rep.add(CheckRecord::flag_check("isospec.equivalence",
                                  "H invertible <=> F(H) invertible on h_chi",
                                  h_inv == f_inv));
  if (h_inv && f_inv) {
    LinOp hinv = bounded_inverse(in.H, in.svd_threshold).inverse;
    LinOp tbar_inv = bounded_inverse(in.T.compress(in.sub.chibar_support, in.sub.chibar_support),
                                     in.svd_threshold)
                         .inverse.embed(amb, amb);
    LinOp formula =
        (in.chi * hinv * in.chi + in.chibar * tbar_inv * in.chibar).compress(cm, cm);
    const double resid =
        op_norm(fr.F * formula - LinOp::identity(in.H.basis(), cm));
    rep.add(CheckRecord::residual_check(
        "isospec.inverse_formula",
        "F(H) [chi H^{-1} chi + chibar T^{-1} chibar]|_{h_chi} = 1", resid, tol));
  } else {
    const int kh = kernel_dimension(in.H, in.svd_threshold);
    const int kf = kernel_dimension(fr.F, in.svd_threshold);
    auto c = CheckRecord::flag_check("isospec.kernel_dim", "dim ker H = dim ker F(H)", kh == kf);
    c.extra["dim_ker_H"] = kh;
    c.extra["dim_ker_F"] = kf;
    rep.add(std::move(c));
  }
  return rep;
}

// F_{chi,S}(H) = F_{chi,T}(H) whenever S = T on the overlap support,
// including the proof's intermediate identities.
inline FlowReport ind_check(const LinOp& H, const LinOp& T, const LinOp& S,
                            const CutoffPair& pair, double tol,
                            double svd_threshold = 1e-12) {
  FlowReport rep;
  rep.suite = "ind";
  const Mask& ov = pair.subspaces.overlap_support;
  double dev = 0.0;
  for (int idx : ov.indices())
    dev = std::max(dev, std::abs(S.entry_global(idx, idx) - T.entry_global(idx, idx)));
  const double scale = std::max(1.0, op_norm(T));
  if (dev > 1e-12 * scale)
    throw PreconditionViolated("ind_check: S != T on the overlap support, deviation " +
                               std::to_string(dev));

  FeshbachInput it{H, T, pair.chi, pair.chibar, pair.subspaces, svd_threshold};
  FeshbachInput is{H, S, pair.chi, pair.chibar, pair.subspaces, svd_threshold};
  DomainVerdict vt = check_domain(it), vs = check_domain(is);
  rep.add(CheckRecord::flag_check("ind.domain_agreement",
                                  "H in dom F_{chi,S} <=> H in dom F_{chi,T}",
                                  vt.in_domain == vs.in_domain));
  if (!vt.in_domain || !vs.in_domain) return rep;

  LinOp wt = H - T, ws = H - S;
  rep.add(CheckRecord::residual_check("ind.cross_terms",
                                      "chi W_T chibar = chi W_S chibar",
                                      op_norm(pair.chi * wt * pair.chibar -
                                              pair.chi * ws * pair.chibar),
                                      tol));
  rep.add(CheckRecord::residual_check("ind.hbar_equal", "H_{chibar,S} = H_{chibar,T}",
                                      op_norm(hbar_op(is) - hbar_op(it)), tol));
  LinOp ft = fs_map(it).F, fsm = fs_map(is).F;
  rep.add(CheckRecord::residual_check("ind.map_equal", "F_{chi,S}(H) = F_{chi,T}(H)",
                                      op_norm(fsm - ft), tol, op_norm(ft), op_norm(fsm)));
  return rep;
}

// Delta_{chi,T}(S) = T chi^2 + S chibar^2 on the ambient mask.
inline LinOp delta_op(const LinOp& T, const LinOp& S, const LinOp& chi, const LinOp& chibar,
                      double commute_tol = 1e-12) {
  const double scale = std::max({1.0, op_norm(T), op_norm(S)});
  if (detail::commutator_norm(T, S) > commute_tol * scale ||
      detail::commutator_norm(T, chi) > commute_tol * scale ||
      detail::commutator_norm(S, chi) > commute_tol * scale)
    throw PreconditionViolated("delta_op: T, S, chi must commute pairwise");
  return T * chi * chi + S * chibar * chibar;
}

struct TradeOperator {
  LinOp f;            // on the ambient mask: (T Delta^{-1})|_{h_chibar} (+) 1
  LinOp delta;        // Delta_{chi,T}(S) on the ambient mask
  LinOp delta_inv;    // (Delta|_{h_chibar})^{-1}, zero-embedded
  double margin = 0;  // invertibility margin of Delta|_{h_chibar}
};

inline TradeOperator f_op(const LinOp& T, const LinOp& S, const CutoffPair& pair,
                          double svd_threshold = 1e-12) {
  TradeOperator out;
  out.delta = delta_op(T, S, pair.chi, pair.chibar);
  const Mask& m = pair.subspaces.chibar_support;
  const Mask& amb = out.delta.range_mask();
  InverseResult inv = bounded_inverse(out.delta.compress(m, m), svd_threshold);
  out.margin = inv.sigma_min;
  out.delta_inv = inv.inverse.embed(amb, amb);
  const Mask comp = mask_diff(amb, m);
  LinOp fsub = T.compress(m, m) * inv.inverse;
  out.f = fsub.embed(amb, amb) + LinOp::identity(T.basis(), comp).embed(amb, amb);
  return out;
}

// The four identities that trade W_T for W_S inside the map.
inline FlowReport trade_identity_check(const LinOp& H, const LinOp& T, const LinOp& S,
                                       const CutoffPair& pair, double tol,
                                       double svd_threshold = 1e-12) {
  FlowReport rep;
  rep.suite = "trade";
  FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces, svd_threshold};
  DomainVerdict v = check_domain(in);
  if (!v.in_domain) throw NotInDomain("trade_identity_check: " + v.reason);
  TradeOperator tr = f_op(T, S, pair, svd_threshold);

  const LinOp& chi = pair.chi;
  const LinOp& chibar = pair.chibar;
  const Mask& amb = in.ambient();
  LinOp wt = H - T, ws = H - S;
  LinOp hbar = hbar_embedded(in);
  LinOp hbar_inv =
      bounded_inverse(hbar_op(in), svd_threshold).inverse.embed(amb, amb);
  LinOp st = S - T;
  LinOp one = LinOp::identity(H.basis(), amb);

  rep.add(CheckRecord::residual_check(
      "trade.left_swap",
      "chibar W_T - chibar W_S f = H_{chibar,T} (S - T) Delta^{-1} chibar",
      op_norm(chibar * wt - chibar * ws * tr.f - hbar * st * tr.delta_inv * chibar), tol));
  rep.add(CheckRecord::residual_check(
      "trade.right_swap",
      "W_T chibar - f W_S chibar = (S - T) Delta^{-1} chibar H_{chibar,T}",
      op_norm(wt * chibar - tr.f * ws * chibar - st * tr.delta_inv * chibar * hbar), tol));
  rep.add(CheckRecord::residual_check(
      "trade.one_minus_f", "1 - f = chibar (S - T) Delta^{-1} chibar",
      op_norm(one - tr.f - chibar * st * tr.delta_inv * chibar), tol));
  LinOp lhs_long = chi * wt * chibar * hbar_inv * chibar * wt * chi -
                   chi * tr.f * ws * chibar * hbar_inv * chibar * ws * tr.f * chi;
  LinOp rhs_long = chi * tr.f * ws * (one - tr.f) * chi + chi * (one - tr.f) * wt * chi;
  rep.add(CheckRecord::residual_check(
      "trade.quadratic",
      "quadratic W_T term - quadratic W_S term = chi f W_S (1-f) chi + chi (1-f) W_T chi",
      op_norm(lhs_long - rhs_long), tol));
  return rep;
}

// F_{chi,T}(H) expressed through W_S.
inline FlowReport reexpress_check(const LinOp& H, const LinOp& T, const LinOp& S,
                                  const CutoffPair& pair, double tol,
                                  double svd_threshold = 1e-12) {
  FlowReport rep;
  rep.suite = "reexpress";
  FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces, svd_threshold};
  FeshbachResult fr = fs_map(in);
  TradeOperator tr = f_op(T, S, pair, svd_threshold);
  const Mask& amb = in.ambient();
  const Mask& cm = pair.subspaces.chi_support;
  LinOp ws = H - S;
  LinOp hbar_inv =
      bounded_inverse(hbar_op(in), svd_threshold).inverse.embed(amb, amb);
  LinOp rhs = S * tr.f + pair.chi * tr.f * ws * tr.f * pair.chi -
              pair.chi * tr.f * ws * pair.chibar * hbar_inv * pair.chibar * ws * tr.f * pair.chi;
  const double resid = op_norm(fr.F - rhs.compress(cm, cm));
  rep.add(CheckRecord::residual_check(
      "reexpress.main",
      "F_{chi,T}(H) = S f + chi f W_S f chi - chi f W_S chibar H_{chibar,T}^{-1} chibar W_S f chi",
      resid, tol, op_norm(fr.F), op_norm(rhs)));
  return rep;
}

// Embedding J phi = (chi phi, chibar phi) into h_chi (+) h_chibar and the
// reduction of the smooth map to the sharp map on the doubled space.
inline FlowReport sharp_embed_check(const FeshbachInput& in, double tol_isometry,
                                    double tol_conjugation, double tol_map) {
  FlowReport rep;
  rep.suite = "sharp-embed";
  const Mask& amb = in.ambient();
  const Mask& cm = in.sub.chi_support;
  const Mask& bm = in.sub.chibar_support;
  const int nc = cm.size(), nb = bm.size(), na = amb.size();

  Mat jmat = Mat::Zero(nc + nb, na);
  for (int k = 0; k < nc; ++k) {
    const int g = cm[k];
    jmat(k, amb.position(g)) = in.chi.entry_global(g, g);
  }
  for (int k = 0; k < nb; ++k) {
    const int g = bm[k];
    jmat(nc + k, amb.position(g)) = in.chibar.entry_global(g, g);
  }
  rep.add(CheckRecord::residual_check("embed.isometry", "J* J = 1",
                                      op_norm(Mat(jmat.adjoint() * jmat - Mat::Identity(na, na))),
                                      tol_isometry));

  LinOp w = in.W();
  Mat hhat = Mat::Zero(nc + nb, nc + nb);
  hhat.topLeftCorner(nc, nc) =
      in.T.compress(cm, cm).entries() + (in.chi * w * in.chi).compress(cm, cm).entries();
  hhat.topRightCorner(nc, nb) = (in.chi * w * in.chibar).compress(cm, bm).entries();
  hhat.bottomLeftCorner(nb, nc) = (in.chibar * w * in.chi).compress(bm, cm).entries();
  hhat.bottomRightCorner(nb, nb) =
      in.T.compress(bm, bm).entries() + (in.chibar * w * in.chibar).compress(bm, bm).entries();

  rep.add(CheckRecord::residual_check(
      "embed.conjugation", "J* H_hat J = H",
      op_norm(Mat(jmat.adjoint() * hhat * jmat - in.H.entries())), tol_conjugation));

  // Sharp map on the doubled space with P_hat = the h_chi block.
  Mat hcc = hhat.bottomRightCorner(nb, nb);
  Eigen::JacobiSVD<Mat> svd(hcc, Eigen::ComputeThinU | Eigen::ComputeThinV);
  if (svd.singularValues()(nb - 1) <= in.svd_threshold * svd.singularValues()(0))
    throw SingularOperator("sharp_embed_check: H_hat block not invertible");
  Mat hcc_inv =
      svd.matrixV() * svd.singularValues().cwiseInverse().asDiagonal() * svd.matrixU().adjoint();
  Mat fhat = hhat.topLeftCorner(nc, nc) -
             hhat.topRightCorner(nc, nb) * hcc_inv * hhat.bottomLeftCorner(nb, nc);
  LinOp fsmooth = fs_map(in).F;
  auto c = CheckRecord::residual_check("embed.sharp_equals_smooth",
                                       "F_{P_hat}(H_hat) = F_{chi,T}(H) on h_chi",
                                       op_norm(Mat(fhat - fsmooth.entries())), tol_map);
  c.extra["overlap_redundancy"] = nc + nb - na;
  rep.add(std::move(c));
  return rep;
}

}  // namespace feshflow

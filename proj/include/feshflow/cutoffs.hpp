#pragma once

// Smooth cutoff families {chi_alpha, chibar_alpha} generated from a
// decreasing profile eta (1 on [0,1/2], 0 on [1,inf)) through
//
//   chi_alpha(r)    = sin(pi/2 * eta(e^alpha r) / eta(r))
//   chibar_alpha(r) = cos(pi/2 * eta(e^alpha r) / eta(r))
//
// with the zero branch chi = 0, chibar = 1 wherever eta(r) = 0. The pair
// satisfies chi^2 + chibar^2 = 1 identically, chi_alpha == 1 on
// [0, e^{-alpha}/2], and the composition law
// chi_{alpha+beta}(r) = chi_beta(e^alpha r) chi_alpha(r) exactly whenever
// min(alpha, beta) >= ln 2, the log-width of the profile's transition zone.
// Lattice configurations downstream keep alpha on multiples of
// delta >= ln 2 for this reason.

#include <functional>

#include "feshflow/linop.hpp"
#include "feshflow/report.hpp"

namespace feshflow {

// Positivity cutoff deciding support membership of cutoff values; absorbs
// sin/cos roundoff at plateau boundaries (exact zeros evaluate to ~1e-17).
inline constexpr double kSupportEps = 1e-13;

// Smoothstep profile on [1/2, 1]; degree 3 is C^1, 5 is C^2, 7 is C^3.
class Profile {
public:
  explicit Profile(int degree = 5) : degree_(degree) {
    if (degree != 3 && degree != 5 && degree != 7)
      throw std::invalid_argument("Profile: degree must be 3, 5 or 7");
  }
  int degree() const { return degree_; }

  double eta(double r) const {
    if (r <= 0.5) return 1.0;
    if (r >= 1.0) return 0.0;
    return 1.0 - smoothstep(2.0 * r - 1.0);
  }
  double deta(double r) const {
    if (r <= 0.5 || r >= 1.0) return 0.0;
    return -2.0 * dsmoothstep(2.0 * r - 1.0);
  }

private:
  double smoothstep(double s) const {
    switch (degree_) {
      case 3: return s * s * (3.0 - 2.0 * s);
      case 5: return s * s * s * (10.0 + s * (-15.0 + 6.0 * s));
      default: return s * s * s * s * (35.0 + s * (-84.0 + s * (70.0 - 20.0 * s)));
    }
  }
  double dsmoothstep(double s) const {
    switch (degree_) {
      case 3: return 6.0 * s * (1.0 - s);
      case 5: return 30.0 * s * s * (1.0 + s * (-2.0 + s));
      default: return 140.0 * s * s * s * (1.0 + s * (-3.0 + s * (3.0 - s)));
    }
  }
  int degree_;
};

class SmoothFamily {
public:
  explicit SmoothFamily(Profile profile = Profile()) : profile_(profile) {}
  const Profile& profile() const { return profile_; }

  double chi(double alpha, double r) const {
    const double er = profile_.eta(r);
    if (er <= 0.0) return 0.0;
    return std::sin(M_PI_2 * profile_.eta(std::exp(alpha) * r) / er);
  }
  double chibar(double alpha, double r) const {
    const double er = profile_.eta(r);
    if (er <= 0.0) return 1.0;
    return std::cos(M_PI_2 * profile_.eta(std::exp(alpha) * r) / er);
  }

  // d/dr of chi_alpha and chibar_alpha (closed form; zero on the zero branch,
  // where the functions are locally constant).
  double dchi(double alpha, double r) const {
    const double er = profile_.eta(r);
    if (er <= 0.0) return 0.0;
    const double ea = std::exp(alpha);
    const double q = profile_.eta(ea * r) / er;
    const double dq = (ea * profile_.deta(ea * r) * er - profile_.eta(ea * r) * profile_.deta(r)) /
                      (er * er);
    return std::cos(M_PI_2 * q) * M_PI_2 * dq;
  }
  double dchibar(double alpha, double r) const {
    const double er = profile_.eta(r);
    if (er <= 0.0) return 0.0;
    const double ea = std::exp(alpha);
    const double q = profile_.eta(ea * r) / er;
    const double dq = (ea * profile_.deta(ea * r) * er - profile_.eta(ea * r) * profile_.deta(r)) /
                      (er * er);
    return -std::sin(M_PI_2 * q) * M_PI_2 * dq;
  }

private:
  Profile profile_;
};

inline double eval_chi(const SmoothFamily& f, double alpha, double r) {
  if (!(alpha > 0.0)) throw std::invalid_argument("eval_chi: alpha must be positive");
  return f.chi(alpha, r);
}
inline double eval_chibar(const SmoothFamily& f, double alpha, double r) {
  if (!(alpha > 0.0)) throw std::invalid_argument("eval_chibar: alpha must be positive");
  return f.chibar(alpha, r);
}

// ---------------------------------------------------------------------------

struct SubspaceTriple {
  Mask chi_support;
  Mask chibar_support;
  Mask overlap_support;
};

struct CutoffPair {
  LinOp chi;
  LinOp chibar;
  SubspaceTriple subspaces;
};

// Diagonal lift chi_alpha(H_ph) on a masked sub-basis, with the coordinate
// subspaces h_chi = {chi > 0}, h_chibar = {chibar > 0} and their overlap.
inline CutoffPair chi_operator(const SmoothFamily& f, double alpha, const FockBasis& b,
                               const Mask& ambient) {
  if (!(alpha > 0.0)) throw std::invalid_argument("chi_operator: alpha must be positive");
  Vec dchi(ambient.size()), dchibar(ambient.size());
  std::vector<int> schi, schibar, sboth;
  for (int k = 0; k < ambient.size(); ++k) {
    const double r = b.hph_value(ambient[k]);
    const double c = f.chi(alpha, r);
    const double cb = f.chibar(alpha, r);
    dchi(k) = c;
    dchibar(k) = cb;
    const bool in_chi = c > kSupportEps;
    const bool in_chibar = cb > kSupportEps;
    if (in_chi) schi.push_back(ambient[k]);
    if (in_chibar) schibar.push_back(ambient[k]);
    if (in_chi && in_chibar) sboth.push_back(ambient[k]);
  }
  return CutoffPair{LinOp::diagonal(b, ambient, dchi), LinOp::diagonal(b, ambient, dchibar),
                    SubspaceTriple{Mask(schi), Mask(schibar), Mask(sboth)}};
}

inline CutoffPair chi_operator(const SmoothFamily& f, double alpha, const FockBasis& b) {
  return chi_operator(f, alpha, b, Mask::full(b.dim()));
}

// ---------------------------------------------------------------------------

// Overlap functions of the composition step:
//   X(r)    = chibar_beta(e^alpha r) chi_alpha(r) / chibar_{alpha+beta}(r)
//   Xbar(r) = chibar_alpha(r) / chibar_{alpha+beta}(r)
// with (X, Xbar) := (1, 0) wherever chibar_{alpha+beta}(r) vanishes.
struct OverlapFunctions {
  SmoothFamily family;
  double alpha = 0.0;
  double beta = 0.0;

  // Near the lower support edge chibar_{a+b} and both numerators vanish at
  // the same cubic rate and the plain ratios are 0/0 up to roundoff; there
  // the denominator is replaced by hypot of the numerators, which equals
  // chibar_{a+b} identically on the lattice (chibar^2_{a+b} =
  // (chibar_b(e^a r) chi_a)^2 + chibar_a^2).
  std::pair<double, double> both(double r) const {
    const double a = family.chibar(beta, std::exp(alpha) * r) * family.chi(alpha, r);
    const double b = family.chibar(alpha, r);
    double denom = family.chibar(alpha + beta, r);
    if (denom < 1e-3) denom = std::hypot(a, b);
    if (denom <= kSupportEps) return {1.0, 0.0};
    return {a / denom, b / denom};
  }
  double X(double r) const { return both(r).first; }
  double Xbar(double r) const { return both(r).second; }
};

inline OverlapFunctions overlap_functions(const SmoothFamily& f, double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0))
    throw std::invalid_argument("overlap_functions: alpha, beta must be positive");
  return OverlapFunctions{f, alpha, beta};
}

// ---------------------------------------------------------------------------

// Residuals of the defining family identities on an r-grid.
inline FlowReport verify_family(const SmoothFamily& f, double alpha, double beta,
                                const std::vector<double>& r_grid, double tol) {
  FlowReport rep;
  rep.suite = "family";
  const double ea = std::exp(alpha);
  double cocycle = 0.0, pyth = 0.0, plateau = 0.0, mono = 0.0;
  const double plateau_edge = 0.5 * std::exp(-alpha);
  for (double r : r_grid) {
    const double lhs = f.chi(alpha + beta, r);
    const double rhs = f.chi(beta, ea * r) * f.chi(alpha, r);
    cocycle = std::max(cocycle, std::abs(lhs - rhs));
    const double c = f.chi(alpha, r), cb = f.chibar(alpha, r);
    pyth = std::max(pyth, std::abs(c * c + cb * cb - 1.0));
    if (r <= plateau_edge) plateau = std::max(plateau, std::abs(c - 1.0));
    // alpha -> chi_alpha(r) non-increasing along the tested pair
    mono = std::max(mono, std::max(0.0, f.chi(alpha + beta, r) - f.chi(alpha, r)));
  }
  rep.add(CheckRecord::residual_check(
      "family.cocycle", "chi_{a+b}(r) = chi_b(e^a r) chi_a(r)", cocycle, tol));
  rep.add(CheckRecord::residual_check("family.pythagoras", "chi_a(r)^2 + chibar_a(r)^2 = 1",
                                      pyth, tol));
  rep.add(CheckRecord::residual_check("family.plateau", "chi_a(r) = 1 on [0, e^{-a}/2]",
                                      plateau, tol));
  rep.add(CheckRecord::residual_check("family.monotone", "chi_{a+b}(r) <= chi_a(r)", mono, tol));
  return rep;
}

}  // namespace feshflow

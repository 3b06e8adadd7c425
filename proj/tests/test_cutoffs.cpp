#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "feshflow/cutoffs.hpp"

using namespace feshflow;

namespace {
std::vector<double> uniform_grid(double lo, double hi, int n) {
  std::vector<double> g(n);
  for (int i = 0; i < n; ++i) g[i] = lo + (hi - lo) * i / (n - 1);
  return g;
}
const double LN2 = std::log(2.0);
}  // namespace

TEST_CASE("profile eta: plateau, support, monotonicity, C1 junctions") {
  for (int degree : {3, 5, 7}) {
    Profile p(degree);
    REQUIRE(p.eta(0.0) == 1.0);
    REQUIRE(p.eta(0.5) == 1.0);
    REQUIRE(p.eta(1.0) == 0.0);
    REQUIRE(p.eta(2.0) == 0.0);
    double prev = 1.0;
    for (double r : uniform_grid(0.0, 1.2, 500)) {
      REQUIRE(p.eta(r) <= prev + 1e-15);
      prev = p.eta(r);
    }
    // derivative channel consistent with finite differences away from junctions
    for (double r : uniform_grid(0.55, 0.95, 41)) {
      const double h = 1e-6;
      const double fd = (p.eta(r + h) - p.eta(r - h)) / (2 * h);
      REQUIRE(p.deta(r) == Catch::Approx(fd).margin(1e-8));
    }
    // C1 at the junctions
    REQUIRE(std::abs(p.deta(0.5 + 1e-9)) < 1e-6);
    REQUIRE(std::abs(p.deta(1.0 - 1e-9)) < 1e-6);
  }
}

TEST_CASE("chi evaluations at the distinguished points") {
  SmoothFamily fam;
  for (double alpha : {LN2, 2 * LN2, 0.3, 1.7}) {
    REQUIRE(eval_chi(fam, alpha, 0.0) == 1.0);
    REQUIRE(eval_chi(fam, alpha, 1.0) == 0.0);
    REQUIRE(eval_chibar(fam, alpha, 1.0) == 1.0);
    REQUIRE(eval_chi(fam, alpha, 1.5) == 0.0);
    // plateau endpoint r = e^{-alpha}/2
    REQUIRE(eval_chi(fam, alpha, 0.5 * std::exp(-alpha)) ==
            Catch::Approx(1.0).margin(1e-15));
  }
  REQUIRE_THROWS_AS(eval_chi(fam, 0.0, 0.1), std::invalid_argument);
}

TEST_CASE("family identities on the lattice") {
  SmoothFamily fam;
  auto grid = uniform_grid(0.0, 1.5, 10000);
  for (double alpha : {LN2, 2 * LN2})
    for (double beta : {LN2, 2 * LN2}) {
      FlowReport rep = verify_family(fam, alpha, beta, grid, 1e-12);
      for (const auto& c : rep.checks) {
        INFO(c.id << " residual " << c.residual);
        REQUIRE(c.pass);
      }
    }
}

TEST_CASE("pythagoras holds pointwise for any alpha") {
  SmoothFamily fam;
  for (double alpha : {0.1, 0.35, LN2, 1.9})
    for (double r : uniform_grid(0.0, 1.3, 2000)) {
      const double c = fam.chi(alpha, r), cb = fam.chibar(alpha, r);
      REQUIRE(std::abs(c * c + cb * cb - 1.0) <= 1e-15);
    }
}

TEST_CASE("alpha-monotonicity pointwise") {
  SmoothFamily fam;
  for (double r : uniform_grid(0.0, 1.2, 300)) {
    double prev = 1.0;
    for (double alpha : {0.2, 0.4, LN2, 1.0, 2 * LN2, 1.4}) {
      const double c = fam.chi(alpha, r);
      REQUIRE(c <= prev + 1e-14);
      prev = c;
    }
  }
}

TEST_CASE("derivative evaluators match finite differences") {
  SmoothFamily fam;
  for (double alpha : {LN2, 2 * LN2})
    for (double r : uniform_grid(0.01, 1.1, 101)) {
      const double h = 1e-6;
      const double fd_chi = (fam.chi(alpha, r + h) - fam.chi(alpha, r - h)) / (2 * h);
      const double fd_chibar = (fam.chibar(alpha, r + h) - fam.chibar(alpha, r - h)) / (2 * h);
      REQUIRE(fam.dchi(alpha, r) == Catch::Approx(fd_chi).margin(2e-7));
      REQUIRE(fam.dchibar(alpha, r) == Catch::Approx(fd_chibar).margin(2e-7));
    }
}

TEST_CASE("diagonal lift and subspace triple") {
  SmoothFamily fam;
  ModeGrid g(LN2, 5);
  FockBasis b = build_basis(g, 2);
  for (double alpha : {LN2, 2 * LN2}) {
    CutoffPair pair = chi_operator(fam, alpha, b);
    REQUIRE(pair.chi.entry_global(b.vacuum_index(), b.vacuum_index()) == cx(1, 0));
    // chi^2 + chibar^2 = 1 as operators
    const double pyth = op_norm(pair.chi * pair.chi + pair.chibar * pair.chibar -
                                LinOp::identity(b, Mask::full(b.dim())));
    REQUIRE(pyth <= 1e-14);
    // support structure
    REQUIRE(pair.subspaces.overlap_support ==
            mask_and(pair.subspaces.chi_support, pair.subspaces.chibar_support));
    REQUIRE(mask_or(pair.subspaces.chi_support, pair.subspaces.chibar_support) ==
            Mask::full(b.dim()));
    for (int i = 0; i < b.dim(); ++i) {
      const double r = b.hph_value(i);
      if (r >= std::exp(-alpha)) REQUIRE(!pair.subspaces.chi_support.contains(i));
    }
  }
}

TEST_CASE("overlap functions: conventions, pythagoras, support laws") {
  SmoothFamily fam;
  for (double alpha : {LN2, 2 * LN2})
    for (double beta : {LN2, 2 * LN2}) {
      OverlapFunctions ov = overlap_functions(fam, alpha, beta);
      // r >= 1: chi_alpha = 0 so X = 0, Xbar = 1
      REQUIRE(ov.X(1.0) == 0.0);
      REQUIRE(ov.Xbar(1.0) == Catch::Approx(1.0).margin(1e-15));
      // zero branch of the denominator
      const double deep = 0.25 * std::exp(-(alpha + beta));
      REQUIRE(ov.X(deep) == 1.0);
      REQUIRE(ov.Xbar(deep) == 0.0);
      double pyth = 0.0, falta1 = 0.0, falta2 = 0.0;
      for (double r : uniform_grid(0.0, 1.2, 1000)) {
        const double x = ov.X(r), xb = ov.Xbar(r);
        pyth = std::max(pyth, std::abs(x * x + xb * xb - 1.0));
        const double cbab = fam.chibar(alpha + beta, r);
        falta1 = std::max(falta1, std::abs(fam.chibar(beta, std::exp(alpha) * r) *
                                               fam.chi(alpha, r) -
                                           x * cbab));
        falta2 = std::max(falta2, std::abs(fam.chibar(alpha, r) - xb * cbab));
        if (cbab == 0.0) REQUIRE(fam.chibar(alpha, r) <= 1e-15);
      }
      REQUIRE(pyth <= 1e-12);
      REQUIRE(falta1 <= 1e-12);
      REQUIRE(falta2 <= 1e-12);

      // stress the lower support edge where the plain ratios are 0/0
      const double edge = 0.5 * std::exp(-(alpha + beta));
      for (int k = 2; k <= 12; ++k) {
        const double r = edge * (1.0 + std::pow(10.0, -k));
        const double x = ov.X(r), xb = ov.Xbar(r);
        REQUIRE(std::abs(x * x + xb * xb - 1.0) <= 1e-12);
        REQUIRE(std::abs(fam.chibar(beta, std::exp(alpha) * r) * fam.chi(alpha, r) -
                         x * fam.chibar(alpha + beta, r)) <= 1e-12);
      }
    }
}

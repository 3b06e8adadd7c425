#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "feshflow/fsmap.hpp"

using namespace feshflow;

namespace {

const double LN2 = std::log(2.0);

struct Fixture {
  ModeGrid grid{LN2, 5};
  FockBasis basis{grid, 2};
  SmoothFamily fam;
  Mask all;
  Fixture() : all(Mask::full(basis.dim())) {}

  CutoffPair cutoffs(double alpha) const { return chi_operator(fam, alpha, basis); }

  LinOp random_matrix(std::mt19937_64& rng, double scale) const {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Mat a(basis.dim(), basis.dim());
    for (int i = 0; i < basis.dim(); ++i)
      for (int j = 0; j < basis.dim(); ++j) a(i, j) = scale * cx(u(rng), u(rng));
    return LinOp(&basis, all, all, a);
  }

  LinOp shifted_hph(cx z) const {
    Vec d(basis.dim());
    for (int i = 0; i < basis.dim(); ++i) d(i) = basis.hph_value(i) + z;
    return LinOp::diagonal(basis, all, d);
  }
};

}  // namespace

TEST_CASE("domain check: free case, perturbative case, singular case") {
  Fixture fx;
  CutoffPair pair = fx.cutoffs(LN2);
  LinOp T = fx.shifted_hph(cx(0.1, 0.05));

  // W = 0: H_{chibar,T} = T|_chibar, inverse norm = 1/min|T| on the support
  FeshbachInput in0{T, T, pair.chi, pair.chibar, pair.subspaces};
  DomainVerdict v0 = check_domain(in0);
  REQUIRE(v0.in_domain);
  double mn = 1e300;
  for (int i : pair.subspaces.chibar_support.indices())
    mn = std::min(mn, std::abs(T.entry_global(i, i)));
  REQUIRE(v0.inv_norm_hbar == Catch::Approx(1.0 / mn).epsilon(1e-10));
  REQUIRE(v0.coupling_norm == Catch::Approx(0.0).margin(1e-14));

  // small perturbation stays in the domain (Neumann regime)
  std::mt19937_64 rng(3);
  LinOp W = fx.random_matrix(rng, 0.002);
  FeshbachInput in1{T + W, T, pair.chi, pair.chibar, pair.subspaces};
  REQUIRE(check_domain(in1).in_domain);

  // a zero diagonal entry of T on the chibar support violates the hypotheses
  Vec d(fx.basis.dim());
  for (int i = 0; i < fx.basis.dim(); ++i) d(i) = fx.basis.hph_value(i) + cx(0.1, 0);
  const int bad = pair.subspaces.chibar_support[0];
  d(bad) = cx(0, 0);
  LinOp Tbad = LinOp::diagonal(fx.basis, fx.all, d);
  FeshbachInput in2{Tbad, Tbad, pair.chi, pair.chibar, pair.subspaces};
  REQUIRE_THROWS_AS(check_domain(in2), PreconditionViolated);
}

TEST_CASE("fs_map: W = 0 gives T restricted to the chi support") {
  Fixture fx;
  CutoffPair pair = fx.cutoffs(LN2);
  LinOp T = fx.shifted_hph(cx(0.07, -0.02));
  FeshbachInput in{T, T, pair.chi, pair.chibar, pair.subspaces};
  FeshbachResult r = fs_map(in);
  const Mask& cm = pair.subspaces.chi_support;
  REQUIRE(op_norm(r.F - T.compress(cm, cm)) <= 1e-14);
  REQUIRE(r.formula_residual <= 1e-12);
}

TEST_CASE("fs_map with a sharp projection equals the sharp Schur complement") {
  Fixture fx;
  // chi = indicator of H_ph < 1/2, chibar the complement
  Mask low = Mask::where(fx.basis.dim(), [&](int i) { return fx.basis.hph_value(i) < 0.5; });
  Mask high = mask_diff(fx.all, low);
  Vec dc = Vec::Zero(fx.basis.dim()), db = Vec::Zero(fx.basis.dim());
  for (int i = 0; i < fx.basis.dim(); ++i)
    (low.contains(i) ? dc(i) : db(i)) = cx(1, 0);
  CutoffPair pair{LinOp::diagonal(fx.basis, fx.all, dc), LinOp::diagonal(fx.basis, fx.all, db),
                  SubspaceTriple{low, high, Mask{}}};
  LinOp T = fx.shifted_hph(cx(0.3, 0.0));
  std::mt19937_64 rng(5);
  LinOp H = T + fx.random_matrix(rng, 0.02);
  FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces};
  LinOp F = fs_map(in).F;
  LinOp Fp = sharp_fs_map(H, low);
  REQUIRE(op_norm(F - Fp) <= 1e-12);
}

TEST_CASE("sharp map hand oracles") {
  // 2x2 Schur complement a - b d^{-1} c on a tiny two-state basis
  ModeGrid g(LN2, 0);
  FockBasis b(g, 1);  // states: vacuum, one boson at mode 0
  REQUIRE(b.dim() == 2);
  Mask all = Mask::full(2);
  Mat h(2, 2);
  h << cx(2.0, 0.3), cx(0.7, -0.1), cx(0.4, 0.2), cx(1.5, 0.0);
  LinOp H(&b, all, all, h);
  Mask p({0});
  LinOp f = sharp_fs_map(H, p);
  const cx expect = h(0, 0) - h(0, 1) * h(1, 0) / h(1, 1);
  REQUIRE(std::abs(f.entries()(0, 0) - expect) < 1e-14);

  // P = identity: F = H
  REQUIRE(op_norm(sharp_fs_map(H, all) - H) == 0.0);

  // block-diagonal H: F = PHP
  Mat hb = h;
  hb(0, 1) = hb(1, 0) = cx(0, 0);
  LinOp Hb(&b, all, all, hb);
  REQUIRE(std::abs(sharp_fs_map(Hb, p).entries()(0, 0) - hb(0, 0)) == 0.0);
}

TEST_CASE("isospectrality: invertible case, formula residual, kernel dimension") {
  Fixture fx;
  CutoffPair pair = fx.cutoffs(LN2);
  LinOp T = fx.shifted_hph(cx(0.25, 0.1));
  std::mt19937_64 rng(17);

  // H = T: F = T|chi, trivially equivalent, formula residual tiny
  FeshbachInput in0{T, T, pair.chi, pair.chibar, pair.subspaces};
  FlowReport rep0 = isospectrality_check(in0, 1e-12);
  REQUIRE(rep0.pass());

  // randomized in-domain scan
  for (int trial = 0; trial < 50; ++trial) {
    LinOp H = T + fx.random_matrix(rng, 0.01);
    FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces};
    FlowReport rep = isospectrality_check(in, 1e-10);
    INFO("trial " << trial);
    REQUIRE(rep.pass());
  }

  // constructed one-dimensional kernel: H = T - (T psi) psi^* with psi in the
  // plateau region (chibar psi = 0), so H_{chibar,T} = T|_chibar stays valid
  Mask plateau = mask_diff(fx.all, pair.subspaces.chibar_support);
  REQUIRE(plateau.size() > 0);
  Vec psi = Vec::Zero(fx.basis.dim());
  psi(plateau[0]) = cx(1, 0);
  Mat rank1 = (T.entries() * psi) * psi.adjoint();
  LinOp H = T - LinOp(&fx.basis, fx.all, fx.all, rank1);
  FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces};
  REQUIRE(kernel_dimension(H) == 1);
  FlowReport rep = isospectrality_check(in, 1e-10);
  REQUIRE(rep.pass());
  LinOp F = fs_map(in).F;
  REQUIRE(kernel_dimension(F) == 1);
}

TEST_CASE("independence of T off the overlap") {
  Fixture fx;
  CutoffPair pair = fx.cutoffs(LN2);
  LinOp T = fx.shifted_hph(cx(0.2, 0.05));
  std::mt19937_64 rng(23);
  LinOp H = T + fx.random_matrix(rng, 0.01);

  SECTION("S = T everywhere") {
    FlowReport rep = ind_check(H, T, T, pair, 1e-13);
    REQUIRE(rep.pass());
    for (const auto& c : rep.checks)
      if (c.id == "ind.map_equal") REQUIRE(c.residual <= 1e-14);
  }

  SECTION("S = T on the overlap, shifted on the pure-chibar states") {
    Vec d(fx.basis.dim());
    for (int i = 0; i < fx.basis.dim(); ++i) {
      d(i) = T.entry_global(i, i);
      const bool pure_chibar = pair.subspaces.chibar_support.contains(i) &&
                               !pair.subspaces.chi_support.contains(i);
      if (pure_chibar) d(i) += cx(1.0, 0);
    }
    LinOp S = LinOp::diagonal(fx.basis, fx.all, d);
    FlowReport rep = ind_check(H, T, S, pair, 1e-12);
    REQUIRE(rep.pass());
  }

  SECTION("corollary: S = T restricted to the chibar support") {
    Vec d(fx.basis.dim());
    for (int i = 0; i < fx.basis.dim(); ++i)
      d(i) = pair.subspaces.chibar_support.contains(i) ? T.entry_global(i, i) : cx(0, 0);
    // S vanishes off h_chibar; still satisfies the hypotheses (invertible on
    // h_chibar) and agrees with T on the overlap
    LinOp S = LinOp::diagonal(fx.basis, fx.all, d);
    FlowReport rep = ind_check(H, T, S, pair, 1e-12);
    REQUIRE(rep.pass());
  }

  SECTION("violating the overlap condition throws") {
    LinOp S = fx.shifted_hph(cx(0.9, 0.0));
    REQUIRE_THROWS_AS(ind_check(H, T, S, pair, 1e-12), PreconditionViolated);
  }
}

TEST_CASE("delta and f operators: degenerate cases and diagonal formula") {
  Fixture fx;
  CutoffPair pair = fx.cutoffs(LN2);
  LinOp T = fx.shifted_hph(cx(0.3, 0.0));

  SECTION("S = T gives f = 1") {
    LinOp delta = delta_op(T, T, pair.chi, pair.chibar);
    REQUIRE(op_norm(delta - T) <= 1e-13);
    TradeOperator tr = f_op(T, T, pair);
    REQUIRE(op_norm(tr.f - LinOp::identity(fx.basis, fx.all)) <= 1e-12);
  }

  SECTION("diagonal evaluation per entry") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    Vec dt(fx.basis.dim()), ds(fx.basis.dim());
    for (int i = 0; i < fx.basis.dim(); ++i) {
      dt(i) = cx(u(rng), 0);
      ds(i) = cx(u(rng), 0);
    }
    LinOp Td = LinOp::diagonal(fx.basis, fx.all, dt);
    LinOp Sd = LinOp::diagonal(fx.basis, fx.all, ds);
    LinOp delta = delta_op(Td, Sd, pair.chi, pair.chibar);
    TradeOperator tr = f_op(Td, Sd, pair);
    for (int i = 0; i < fx.basis.dim(); ++i) {
      const double c = pair.chi.entry_global(i, i).real();
      const double cb = pair.chibar.entry_global(i, i).real();
      const cx expect_delta = dt(i) * c * c + ds(i) * cb * cb;
      REQUIRE(std::abs(delta.entry_global(i, i) - expect_delta) < 1e-13);
      const bool on_chibar = pair.subspaces.chibar_support.contains(i);
      const cx expect_f = on_chibar ? dt(i) / expect_delta : cx(1, 0);
      REQUIRE(std::abs(tr.f.entry_global(i, i) - expect_f) < 1e-12);
    }
  }

  SECTION("chi = 0 gives delta = S and f = T S^{-1}") {
    Vec zero = Vec::Zero(fx.basis.dim()), one = Vec::Ones(fx.basis.dim());
    CutoffPair degen{LinOp::diagonal(fx.basis, fx.all, zero),
                     LinOp::diagonal(fx.basis, fx.all, one),
                     SubspaceTriple{Mask{}, fx.all, Mask{}}};
    LinOp S = fx.shifted_hph(cx(0.8, 0.0));
    LinOp delta = delta_op(T, S, degen.chi, degen.chibar);
    REQUIRE(op_norm(delta - S) <= 1e-13);
    TradeOperator tr = f_op(T, S, degen);
    LinOp expect = T * bounded_inverse(S).inverse;
    REQUIRE(op_norm(tr.f - expect) <= 1e-12);
  }
}

TEST_CASE("trade identities and the re-expression theorem") {
  Fixture fx;
  CutoffPair pair = fx.cutoffs(LN2);
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(0.5, 1.5);

  for (int trial = 0; trial < 20; ++trial) {
    Vec dt(fx.basis.dim()), ds(fx.basis.dim());
    for (int i = 0; i < fx.basis.dim(); ++i) {
      dt(i) = cx(u(rng), 0);
      ds(i) = cx(u(rng), 0);
    }
    LinOp T = LinOp::diagonal(fx.basis, fx.all, dt);
    LinOp S = LinOp::diagonal(fx.basis, fx.all, ds);
    LinOp H = T + fx.random_matrix(rng, 0.02);
    FlowReport tr = trade_identity_check(H, T, S, pair, 1e-11);
    INFO("trial " << trial);
    REQUIRE(tr.pass());
    FlowReport re = reexpress_check(H, T, S, pair, 1e-10);
    REQUIRE(re.pass());
  }

  SECTION("S = T collapses every identity to 0 = 0") {
    LinOp T = fx.shifted_hph(cx(0.4, 0.0));
    std::mt19937_64 r2(37);
    LinOp H = T + fx.random_matrix(r2, 0.02);
    FlowReport tr = trade_identity_check(H, T, T, pair, 1e-12);
    REQUIRE(tr.pass());
    FlowReport re = reexpress_check(H, T, T, pair, 1e-11);
    REQUIRE(re.pass());
  }

  SECTION("W_S = 0: F_{chi,T}(S) = S f") {
    std::mt19937_64 r3(41);
    Vec dt(fx.basis.dim()), ds(fx.basis.dim());
    for (int i = 0; i < fx.basis.dim(); ++i) {
      dt(i) = cx(u(r3), 0);
      ds(i) = cx(u(r3), 0);
    }
    LinOp T = LinOp::diagonal(fx.basis, fx.all, dt);
    LinOp S = LinOp::diagonal(fx.basis, fx.all, ds);
    FeshbachInput in{S, T, pair.chi, pair.chibar, pair.subspaces};
    LinOp F = fs_map(in).F;
    TradeOperator trop = f_op(T, S, pair);
    const Mask& cm = pair.subspaces.chi_support;
    REQUIRE(op_norm(F - (S * trop.f).compress(cm, cm)) <= 1e-11);
  }
}

TEST_CASE("sharp embedding of the smooth map") {
  Fixture fx;
  std::mt19937_64 rng(43);

  SECTION("smooth cutoff with nonempty overlap") {
    CutoffPair pair = fx.cutoffs(LN2);
    REQUIRE(pair.subspaces.overlap_support.size() > 0);
    LinOp T = fx.shifted_hph(cx(0.3, 0.05));
    LinOp H = T + fx.random_matrix(rng, 0.02);
    FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces};
    FlowReport rep = sharp_embed_check(in, 1e-14, 1e-12, 1e-10);
    REQUIRE(rep.pass());
    for (const auto& c : rep.checks)
      if (c.id == "embed.sharp_equals_smooth")
        REQUIRE(c.extra.at("overlap_redundancy") ==
                Catch::Approx(pair.subspaces.overlap_support.size()));
  }

  SECTION("projection cutoff: block form, zero residuals") {
    Mask low = Mask::where(fx.basis.dim(), [&](int i) { return fx.basis.hph_value(i) < 0.5; });
    Mask high = mask_diff(fx.all, low);
    Vec dc = Vec::Zero(fx.basis.dim()), db = Vec::Zero(fx.basis.dim());
    for (int i = 0; i < fx.basis.dim(); ++i) (low.contains(i) ? dc(i) : db(i)) = cx(1, 0);
    CutoffPair pair{LinOp::diagonal(fx.basis, fx.all, dc),
                    LinOp::diagonal(fx.basis, fx.all, db), SubspaceTriple{low, high, Mask{}}};
    LinOp T = fx.shifted_hph(cx(0.3, 0.0));
    LinOp H = T + fx.random_matrix(rng, 0.02);
    FeshbachInput in{H, T, pair.chi, pair.chibar, pair.subspaces};
    FlowReport rep = sharp_embed_check(in, 1e-14, 1e-13, 1e-12);
    REQUIRE(rep.pass());
  }

  SECTION("W = 0: the sharp map reduces to T on h_chi") {
    CutoffPair pair = fx.cutoffs(LN2);
    LinOp T = fx.shifted_hph(cx(0.3, 0.0));
    FeshbachInput in{T, T, pair.chi, pair.chibar, pair.subspaces};
    FlowReport rep = sharp_embed_check(in, 1e-14, 1e-13, 1e-12);
    REQUIRE(rep.pass());
  }
}

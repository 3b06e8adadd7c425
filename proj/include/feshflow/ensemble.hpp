#pragma once

// Deterministic randomized kernel ensembles for the verification suites:
// free part z + r + eps * bump(r), smooth low-order interaction profiles on
// every component with m + n <= 2, scaled to a configured interaction norm.

#include "feshflow/kernels.hpp"

namespace feshflow {

struct EnsembleConfig {
  std::uint64_t seed = 1234;
  int count = 10;
  double interaction_scale = 1.25e-3;  // target ||w_I||^(xi)
  double free_deviation = 0.02;        // scale of the bump added to w00
  int m_max = 2;
};

namespace detail {

// Portable uniform double in [-1, 1) from the raw generator stream.
inline double sym_uniform(std::mt19937_64& rng) {
  return 2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0;
}

}  // namespace detail

// One seeded kernel: deterministic function of (seed, index).
inline KernelSeq gen_kernel(const FockBasis& basis, const RGrid& rgrid, const Mask& V,
                            int window, const EnsembleConfig& cfg, int index,
                            const NormConfig& norms) {
  std::mt19937_64 rng(cfg.seed ^ (0x9E3779B97F4A7C15ULL * (index + 1)));
  KernelSeq w(&basis, rgrid, window, cfg.m_max, /*zdeg=*/1);
  drop_same_mode_pairs(w);

  // w00(z, r) = z + r + eps * b(r), b(r) = r^2 (1 - r)^2 vanishing at 0
  const double eps = cfg.free_deviation * (0.5 + 0.5 * std::abs(detail::sym_uniform(rng)));
  w.set_free_affine(
      [eps](double r) { return r + eps * r * r * (1 - r) * (1 - r); },
      [eps](double r) { return 1.0 + eps * 2 * r * (1 - r) * (1 - 2 * r); });

  // smooth random interaction profiles, quadratic in r, z-independent
  for (const auto& comp : w.components()) {
    if (comp.m + comp.n == 0) continue;
    for (const auto& combo : comp.combos) {
      const cx a(detail::sym_uniform(rng), detail::sym_uniform(rng));
      const cx bq(detail::sym_uniform(rng), detail::sym_uniform(rng));
      const cx c(detail::sym_uniform(rng), detail::sym_uniform(rng));
      w.set_profile(comp.m, comp.n, combo,
                    [a, bq, c](double r) { return a + bq * r + c * r * r; },
                    [bq, c](double r) { return bq + 2.0 * c * r; });
    }
  }

  canonicalize_to_reachable(w, V);
  const double cur = xi_norm_Z(w, norms, /*interaction_only=*/true);
  if (cur > 0.0) w.scale_interaction(cfg.interaction_scale / cur);
  return w;
}

inline std::vector<KernelSeq> gen_ensemble(const FockBasis& basis, const RGrid& rgrid,
                                           const Mask& V, int window,
                                           const EnsembleConfig& cfg,
                                           const NormConfig& norms) {
  std::vector<KernelSeq> out;
  out.reserve(cfg.count);
  for (int i = 0; i < cfg.count; ++i)
    out.push_back(gen_kernel(basis, rgrid, V, window, cfg, i, norms));
  return out;
}

}  // namespace feshflow

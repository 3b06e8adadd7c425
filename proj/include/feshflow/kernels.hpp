#pragma once

// Sampled kernel sequences w = (w_{m,n})_{m+n <= m_max} and their
// quantization
//
//   H[w(z)] = w_{0,0}(z, H_ph)
//             + sum_{m+n>=1} sum_{modes} gamma's a*...a* w_{m,n}(z,H_ph;...) a...a
//
// over the truncated basis, together with the weighted kernel norms, the
// expansion-parameter norms, polydisc membership, and kernel extraction
// from a target operator family by least squares.
//
// Representation: each component carries sorted mode combos (block
// permutation symmetry is structural), per-combo r-profiles sampled on a
// shared grid (the reachable H_ph eigenvalues united with a uniform
// auxiliary grid), an explicit d/dr channel, and polynomial z-dependence
// in the scaled variable t = z / z_scale, so the d/dz channel is exact.

#include <map>
#include <numeric>
#include <random>

#include "feshflow/cutoffs.hpp"
#include "feshflow/linop.hpp"
#include "feshflow/report.hpp"

namespace feshflow {

struct RankDeficientFit : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NormConfig {
  double xi = 0.5;        // expansion parameter, in (0,1)
  double mu = 0.5;        // infrared regularization exponent, > 0
  int z_ring_samples = 24;  // samples of |z| = 1/4 for the disc-sup norms

  void validate() const {
    if (!(xi > 0.0 && xi < 1.0)) throw std::invalid_argument("NormConfig: xi must be in (0,1)");
    if (!(mu > 0.0)) throw std::invalid_argument("NormConfig: mu must be positive");
  }
};

// --- r-grid ------------------------------------------------------------------

// Union of the reachable H_ph eigenvalues and a uniform auxiliary grid on
// [0,1]. Operators only ever evaluate kernels at eigenvalue slots; norm
// suprema run over the whole grid.
struct RGrid {
  std::vector<double> pts;            // sorted, pts.front() == 0.0
  std::vector<int> slot_of_state;     // eigenvalue slot per basis state

  int size() const { return static_cast<int>(pts.size()); }
  int zero_slot() const { return 0; }

  int slot_near(double r, double tol = 1e-9) const {
    auto it = std::lower_bound(pts.begin(), pts.end(), r - tol);
    if (it == pts.end() || std::abs(*it - r) > tol) return -1;
    return static_cast<int>(it - pts.begin());
  }
};

inline RGrid build_rgrid(const FockBasis& basis, int aux_points = 65) {
  std::vector<double> pts;
  for (int i = 0; i < basis.dim(); ++i) pts.push_back(basis.hph_value(i));
  for (int k = 0; k < aux_points; ++k) pts.push_back(static_cast<double>(k) / (aux_points - 1));
  std::sort(pts.begin(), pts.end());
  const double merge_tol = 1e-10;
  std::vector<double> merged;
  for (double p : pts)
    if (merged.empty() || p - merged.back() > merge_tol) merged.push_back(p);
  RGrid g;
  g.pts = std::move(merged);
  if (g.pts.front() != 0.0) g.pts.front() = 0.0;
  g.slot_of_state.resize(basis.dim());
  for (int i = 0; i < basis.dim(); ++i) {
    const int s = g.slot_near(basis.hph_value(i), merge_tol * 2);
    if (s < 0) throw std::logic_error("build_rgrid: missing eigenvalue slot");
    g.slot_of_state[i] = s;
  }
  return g;
}

// Centered non-uniform finite differences, second order in the interior.
inline Eigen::VectorXcd fd_derivative(const std::vector<double>& pts,
                                      const Eigen::VectorXcd& v) {
  const int n = static_cast<int>(pts.size());
  Eigen::VectorXcd d(n);
  if (n == 1) {
    d(0) = cx(0, 0);
    return d;
  }
  for (int i = 0; i < n; ++i) {
    if (i == 0) {
      d(i) = (v(1) - v(0)) / (pts[1] - pts[0]);
    } else if (i == n - 1) {
      d(i) = (v(n - 1) - v(n - 2)) / (pts[n - 1] - pts[n - 2]);
    } else {
      const double hl = pts[i] - pts[i - 1], hr = pts[i + 1] - pts[i];
      d(i) = (hl * hl * v(i + 1) - hr * hr * v(i - 1) + (hr * hr - hl * hl) * v(i)) /
             (hl * hr * (hl + hr));
    }
  }
  return d;
}

// --- kernel data -------------------------------------------------------------

struct Combo {
  std::vector<int> js, ls;  // sorted mode indices of the creation/annihilation legs
  bool operator==(const Combo& o) const { return js == o.js && ls == o.ls; }
};

// Number of ordered leg tuples represented by a sorted combo.
inline double ordered_multiplicity(const std::vector<int>& sorted) {
  double fact = 1.0;
  for (size_t i = 1; i <= sorted.size(); ++i) fact *= static_cast<double>(i);
  size_t i = 0;
  while (i < sorted.size()) {
    size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    double rep = 1.0;
    for (size_t k = 1; k <= j - i; ++k) rep *= static_cast<double>(k);
    fact /= rep;
    i = j;
  }
  return fact;
}

struct KernelComponent {
  int m = 0, n = 0;
  std::vector<Combo> combos;
  // val[c], drv[c]: (n_r x (zdeg+1)) coefficient matrices in t = z/z_scale
  std::vector<Mat> val, drv;
};

class KernelSeq {
public:
  KernelSeq() = default;
  KernelSeq(const FockBasis* basis, RGrid rgrid, int mode_window, int m_max, int zdeg,
            double z_scale = 0.25)
      : basis_(basis), rgrid_(std::move(rgrid)), window_(mode_window), m_max_(m_max),
        zdeg_(zdeg), z_scale_(z_scale) {
    if (window_ > basis->grid().max_mode())
      throw std::invalid_argument("KernelSeq: window exceeds the grid");
    // free part
    KernelComponent free;
    free.m = free.n = 0;
    free.combos.push_back(Combo{});
    free.val.push_back(Mat::Zero(rgrid_.size(), zdeg_ + 1));
    free.drv.push_back(Mat::Zero(rgrid_.size(), zdeg_ + 1));
    comps_.push_back(std::move(free));
    for (int m = 0; m <= m_max; ++m)
      for (int n = 0; n + m <= m_max; ++n) {
        if (m + n == 0) continue;
        KernelComponent c;
        c.m = m;
        c.n = n;
        enumerate_combos(c);
        comps_.push_back(std::move(c));
      }
  }

  const FockBasis& basis() const { return *basis_; }
  const RGrid& rgrid() const { return rgrid_; }
  int mode_window() const { return window_; }
  int m_max() const { return m_max_; }
  int zdeg() const { return zdeg_; }
  double z_scale() const { return z_scale_; }
  const std::vector<KernelComponent>& components() const { return comps_; }
  std::vector<KernelComponent>& components() { return comps_; }

  int component_index(int m, int n) const {
    for (size_t i = 0; i < comps_.size(); ++i)
      if (comps_[i].m == m && comps_[i].n == n) return static_cast<int>(i);
    return -1;
  }

  Eigen::VectorXcd zpow(cx z) const {
    Eigen::VectorXcd p(zdeg_ + 1);
    const cx t = z / z_scale_;
    p(0) = cx(1, 0);
    for (int k = 1; k <= zdeg_; ++k) p(k) = p(k - 1) * t;
    return p;
  }

  // w_{0,0}(z, r) at a grid slot
  cx free_value(cx z, int slot) const { return (comps_[0].val[0].row(slot) * zpow(z)).value(); }

  // --- builders ---

  // w_{0,0}(z, r) = f0(r) + z
  void set_free_affine(const std::function<double(double)>& f0,
                       const std::function<double(double)>& df0) {
    if (zdeg_ < 1) throw std::invalid_argument("set_free_affine: zdeg must be >= 1");
    auto& c = comps_[0];
    c.val[0].setZero();
    c.drv[0].setZero();
    for (int i = 0; i < rgrid_.size(); ++i) {
      c.val[0](i, 0) = cx(f0(rgrid_.pts[i]), 0);
      c.val[0](i, 1) = cx(z_scale_, 0);
      c.drv[0](i, 0) = cx(df0(rgrid_.pts[i]), 0);
    }
  }

  void set_profile(int m, int n, const Combo& combo, const std::function<cx(double)>& f,
                   const std::function<cx(double)>& df, int z_power = 0) {
    const int ci = component_index(m, n);
    if (ci < 0) throw std::invalid_argument("set_profile: no such component");
    auto& c = comps_[ci];
    auto it = std::find(c.combos.begin(), c.combos.end(), combo);
    if (it == c.combos.end()) throw std::invalid_argument("set_profile: no such combo");
    const int k = static_cast<int>(it - c.combos.begin());
    const double zs = std::pow(z_scale_, z_power);
    for (int i = 0; i < rgrid_.size(); ++i) {
      c.val[k](i, z_power) = f(rgrid_.pts[i]) * zs;
      c.drv[k](i, z_power) = df(rgrid_.pts[i]) * zs;
    }
  }

  void scale_interaction(double s) {
    for (size_t i = 1; i < comps_.size(); ++i)
      for (size_t c = 0; c < comps_[i].combos.size(); ++c) {
        comps_[i].val[c] *= s;
        comps_[i].drv[c] *= s;
      }
  }

private:
  void enumerate_combos(KernelComponent& c) {
    std::vector<std::vector<int>> jsets = sorted_tuples(c.m), lsets = sorted_tuples(c.n);
    for (const auto& js : jsets)
      for (const auto& ls : lsets) {
        c.combos.push_back(Combo{js, ls});
        c.val.push_back(Mat::Zero(rgrid_.size(), zdeg_ + 1));
        c.drv.push_back(Mat::Zero(rgrid_.size(), zdeg_ + 1));
      }
  }
  std::vector<std::vector<int>> sorted_tuples(int len) const {
    std::vector<std::vector<int>> out;
    std::vector<int> cur;
    build_tuples(len, 0, cur, out);
    return out;
  }
  void build_tuples(int len, int from, std::vector<int>& cur,
                    std::vector<std::vector<int>>& out) const {
    if (static_cast<int>(cur.size()) == len) {
      out.push_back(cur);
      return;
    }
    for (int j = from; j <= window_; ++j) {
      cur.push_back(j);
      build_tuples(len, j, cur, out);
      cur.pop_back();
    }
  }

  const FockBasis* basis_ = nullptr;
  RGrid rgrid_;
  int window_ = 0;
  int m_max_ = 0;
  int zdeg_ = 0;
  double z_scale_ = 0.25;
  std::vector<KernelComponent> comps_;
};

inline KernelSeq make_free_kernel(const FockBasis& basis, const RGrid& rgrid, int window,
                                  int m_max = 2, int zdeg = 1) {
  KernelSeq w(&basis, rgrid, window, m_max, zdeg);
  w.set_free_affine([](double r) { return r; }, [](double) { return 1.0; });
  return w;
}

// Removes the same-mode (1,1) combos (j; j). Their quantization acts on the
// diagonal only, where it is not separable from the free channel by any
// finite family of operators, so extraction templates and flow-grade
// kernels work in the gauge where that content lives in w00.
inline void drop_same_mode_pairs(KernelSeq& w) {
  const int ci = w.component_index(1, 1);
  if (ci < 0) return;
  auto& comp = w.components()[ci];
  for (int k = static_cast<int>(comp.combos.size()) - 1; k >= 0; --k) {
    if (comp.combos[k].js == comp.combos[k].ls) {
      comp.combos.erase(comp.combos.begin() + k);
      comp.val.erase(comp.val.begin() + k);
      comp.drv.erase(comp.drv.begin() + k);
    }
  }
}

// Extraction template: every component with m + n <= m_max over the window,
// in the identifiable gauge.
inline KernelSeq make_fit_template(const FockBasis& basis, const RGrid& rgrid, int window,
                                   int m_max, int zdeg, double z_scale) {
  KernelSeq w(&basis, rgrid, window, m_max, zdeg, z_scale);
  drop_same_mode_pairs(w);
  return w;
}

// --- quantization -----------------------------------------------------------

namespace detail {

// Shared traversal of every interaction term: calls
//   f(comp_idx, combo_idx, slot, row_local, col_local, coeff)
// for each nonzero matrix element the quantization produces on the mask V.
template <class F>
void for_each_interaction_term(const KernelSeq& w, const Mask& V, F&& f) {
  const FockBasis& b = w.basis();
  const auto& grid = b.grid();
  const auto& comps = w.components();
  for (size_t ci = 1; ci < comps.size(); ++ci) {
    const auto& comp = comps[ci];
    for (size_t k = 0; k < comp.combos.size(); ++k) {
      const Combo& combo = comp.combos[k];
      double weight = ordered_multiplicity(combo.js) * ordered_multiplicity(combo.ls);
      for (int j : combo.js) weight *= grid.coupling_weight(j);
      for (int l : combo.ls) weight *= grid.coupling_weight(l);
      for (int col = 0; col < V.size(); ++col) {
        Occupation occ = b.state(V[col]);
        double amp = 1.0;
        bool dead = false;
        for (int l : combo.ls) {
          if (occ[l] == 0) {
            dead = true;
            break;
          }
          amp *= std::sqrt(static_cast<double>(occ[l]));
          occ[l] -= 1;
        }
        if (dead) continue;
        const int mid = b.index_of(occ);
        if (mid < 0) continue;  // cannot happen: removing bosons stays inside
        const int slot = w.rgrid().slot_of_state[mid];
        for (int j : combo.js) {
          amp *= std::sqrt(static_cast<double>(occ[j] + 1));
          occ[j] += 1;
        }
        const int fin = b.index_of(occ);
        if (fin < 0) continue;  // image left the truncation
        const int row = V.position(fin);
        if (row < 0) continue;
        f(static_cast<int>(ci), static_cast<int>(k), slot, row, col, weight * amp);
      }
    }
  }
}

}  // namespace detail

// Diagonal free part w_{0,0}(z, H_ph) on the mask V.
inline LinOp quantize_free(const KernelSeq& w, cx z, const Mask& V) {
  const FockBasis& b = w.basis();
  const Eigen::VectorXcd zp = w.zpow(z);
  Vec d(V.size());
  const Mat& coeff = w.components()[0].val[0];
  for (int k = 0; k < V.size(); ++k)
    d(k) = (coeff.row(w.rgrid().slot_of_state[V[k]]) * zp).value();
  return LinOp::diagonal(b, V, d);
}

// Interaction part W[w(z)] = sum_{m+n>=1} H_{m,n}[w_{m,n}(z)] on the mask V.
inline LinOp quantize_interaction(const KernelSeq& w, cx z, const Mask& V) {
  const auto zp = w.zpow(z);
  Mat a = Mat::Zero(V.size(), V.size());
  const auto& comps = w.components();
  detail::for_each_interaction_term(
      w, V, [&](int ci, int k, int slot, int row, int col, double coeff) {
        a(row, col) += coeff * (comps[ci].val[k].row(slot) * zp).value();
      });
  return LinOp(&w.basis(), V, V, std::move(a));
}

// Single component H_{m,n}[w_{m,n}(z)] on the mask V.
inline LinOp quantize_component(const KernelSeq& w, int m, int n, cx z, const Mask& V) {
  if (m == 0 && n == 0) return quantize_free(w, z, V);
  const int want = w.component_index(m, n);
  if (want < 0) throw std::invalid_argument("quantize_component: no such component");
  const auto zp = w.zpow(z);
  Mat a = Mat::Zero(V.size(), V.size());
  const auto& comps = w.components();
  detail::for_each_interaction_term(
      w, V, [&](int ci, int k, int slot, int row, int col, double coeff) {
        if (ci != want) return;
        a(row, col) += coeff * (comps[ci].val[k].row(slot) * zp).value();
      });
  return LinOp(&w.basis(), V, V, std::move(a));
}

// Full quantization H[w(z)] on the mask V.
inline LinOp quantize(const KernelSeq& w, cx z, const Mask& V) {
  if (std::abs(z) > 0.25 * (1.0 + 1e-9) && std::abs(z) > 0.5)
    throw std::invalid_argument("quantize: |z| out of range");
  return quantize_free(w, z, V) + quantize_interaction(w, z, V);
}

inline LinOp quantize(const KernelSeq& w, cx z) {
  return quantize(w, z, Mask::full(w.basis().dim()));
}

// --- derivative and difference kernels ---------------------------------------

inline KernelSeq deriv_z(const KernelSeq& w) {
  KernelSeq d = w;
  for (auto& comp : d.components())
    for (size_t c = 0; c < comp.combos.size(); ++c) {
      Mat nv = Mat::Zero(comp.val[c].rows(), comp.val[c].cols());
      Mat nd = Mat::Zero(comp.drv[c].rows(), comp.drv[c].cols());
      for (int k = 0; k + 1 < comp.val[c].cols(); ++k) {
        nv.col(k) = comp.val[c].col(k + 1) * static_cast<double>(k + 1) / w.z_scale();
        nd.col(k) = comp.drv[c].col(k + 1) * static_cast<double>(k + 1) / w.z_scale();
      }
      comp.val[c] = std::move(nv);
      comp.drv[c] = std::move(nd);
    }
  return d;
}

inline KernelSeq deriv_r(const KernelSeq& w) {
  KernelSeq d = w;
  for (auto& comp : d.components())
    for (size_t c = 0; c < comp.combos.size(); ++c) {
      comp.val[c] = comp.drv[c];
      Mat nd(comp.drv[c].rows(), comp.drv[c].cols());
      for (int k = 0; k < comp.drv[c].cols(); ++k)
        nd.col(k) = fd_derivative(w.rgrid().pts, comp.drv[c].col(k));
      comp.drv[c] = std::move(nd);
    }
  return d;
}

// w - (r + z): subtracts the free kernel from the (0,0) component.
inline KernelSeq subtract_free(const KernelSeq& w) {
  KernelSeq d = w;
  auto& c = d.components()[0];
  for (int i = 0; i < d.rgrid().size(); ++i) {
    c.val[0](i, 0) -= cx(d.rgrid().pts[i], 0);
    if (d.zdeg() >= 1) c.val[0](i, 1) -= cx(d.z_scale(), 0);
    c.drv[0](i, 0) -= cx(1, 0);
  }
  return d;
}

// --- norms -------------------------------------------------------------------

// || w_{m,n}(z) ||: quadrature of the squared C^1 profile norms against the
// infrared-weighted mode measure.
inline double wmn_norm(const KernelSeq& w, int comp_idx, cx z, const NormConfig& cfg) {
  cfg.validate();
  const auto& comp = w.components().at(comp_idx);
  const auto zp = w.zpow(z);
  const auto& grid = w.basis().grid();
  double sum = 0.0;
  for (size_t c = 0; c < comp.combos.size(); ++c) {
    double mode_weight =
        ordered_multiplicity(comp.combos[c].js) * ordered_multiplicity(comp.combos[c].ls);
    for (int j : comp.combos[c].js) mode_weight *= grid.norm_weight(j, cfg.mu);
    for (int l : comp.combos[c].ls) mode_weight *= grid.norm_weight(l, cfg.mu);
    const cx at0 = (comp.val[c].row(w.rgrid().zero_slot()) * zp).value();
    double dmax = 0.0;
    Eigen::VectorXcd dr = comp.drv[c] * zp;
    for (int i = 0; i < dr.size(); ++i) dmax = std::max(dmax, std::abs(dr(i)));
    const double c1 = std::abs(at0) + dmax;
    sum += mode_weight * c1 * c1;
  }
  return std::sqrt(sum);
}

inline double wmn_norm(const KernelSeq& w, int m, int n, cx z, const NormConfig& cfg) {
  const int ci = w.component_index(m, n);
  if (ci < 0) throw std::invalid_argument("wmn_norm: no such component");
  return wmn_norm(w, ci, z, cfg);
}

// || w(z) ||^(xi) = sum over components of xi^{-(m+n)} || w_{m,n}(z) ||.
inline double xi_norm(const KernelSeq& w, cx z, const NormConfig& cfg,
                      bool interaction_only = false) {
  double sum = 0.0;
  for (size_t i = 0; i < w.components().size(); ++i) {
    const auto& comp = w.components()[i];
    if (interaction_only && comp.m + comp.n == 0) continue;
    sum += std::pow(cfg.xi, -(comp.m + comp.n)) * wmn_norm(w, static_cast<int>(i), z, cfg);
  }
  return sum;
}

inline std::vector<cx> z_ring(int samples, double radius = 0.25) {
  std::vector<cx> zs;
  zs.reserve(samples);
  for (int k = 0; k < samples; ++k) {
    const double th = 2.0 * M_PI * k / samples;
    zs.emplace_back(radius * std::cos(th), radius * std::sin(th));
  }
  return zs;
}

// Disc-sup norm max_{|z|<=1/4} ( ||w(z)||^(xi) + ||dz w(z)||^(xi) );
// the max of these subharmonic quantities is attained on the ring.
inline double xi_norm_Z(const KernelSeq& w, const NormConfig& cfg,
                        bool interaction_only = false) {
  KernelSeq dz = deriv_z(w);
  double mx = 0.0;
  for (cx z : z_ring(cfg.z_ring_samples))
    mx = std::max(mx, xi_norm(w, z, cfg, interaction_only) +
                          xi_norm(dz, z, cfg, interaction_only));
  return mx;
}

struct PartialNorms {
  double dr_full = 0.0;   // sup |dr w00(z,r)|, r in [0,1]
  double dz_full = 0.0;   // sup |dz w00(z,r)|, r in [0,1]
  double dr_minus = 0.0;  // same, restricted to r in [0,1/2]
  double dz_minus = 0.0;
};

inline PartialNorms partial_norms(const KernelSeq& w, const NormConfig& cfg) {
  PartialNorms out;
  KernelSeq dz = deriv_z(w);
  const auto& pts = w.rgrid().pts;
  for (cx z : z_ring(cfg.z_ring_samples)) {
    const auto zp = w.zpow(z);
    Eigen::VectorXcd dr = w.components()[0].drv[0] * zp;
    Eigen::VectorXcd dzv = dz.components()[0].val[0] * zp;
    for (int i = 0; i < dr.size(); ++i) {
      out.dr_full = std::max(out.dr_full, std::abs(dr(i)));
      out.dz_full = std::max(out.dz_full, std::abs(dzv(i)));
      if (pts[i] <= 0.5 + 1e-12) {
        out.dr_minus = std::max(out.dr_minus, std::abs(dr(i)));
        out.dz_minus = std::max(out.dz_minus, std::abs(dzv(i)));
      }
    }
  }
  return out;
}

// sup_z ( ||w||^(xi) + ||dz w||^(xi) + ||dr w||^(xi) ), the combined norm
// used for the polydisc interaction bound.
inline double combined_xi_norm(const KernelSeq& w, const NormConfig& cfg,
                               bool interaction_only) {
  KernelSeq dz = deriv_z(w), dr = deriv_r(w);
  double mx = 0.0;
  for (cx z : z_ring(cfg.z_ring_samples))
    mx = std::max(mx, xi_norm(w, z, cfg, interaction_only) +
                          xi_norm(dz, z, cfg, interaction_only) +
                          xi_norm(dr, z, cfg, interaction_only));
  return mx;
}

struct PolydiscSpec {
  double a_I = 0.0, a_R = 0.0, a_Z = 0.0;
  void validate() const {
    if (!(a_I > 0 && a_R > 0 && a_Z > 0))
      throw std::invalid_argument("PolydiscSpec: components must be positive");
  }
};

struct PolydiscVerdict {
  bool member = false;
  double margin_I = 0.0, margin_R = 0.0, margin_Z = 0.0;
  double norm_I = 0.0, norm_R = 0.0, norm_Z = 0.0;
};

inline PolydiscVerdict polydisc_member(const KernelSeq& w, const PolydiscSpec& spec,
                                       const NormConfig& cfg) {
  spec.validate();
  KernelSeq dev = subtract_free(w);
  PolydiscVerdict v;
  v.norm_I = combined_xi_norm(dev, cfg, /*interaction_only=*/true);
  PartialNorms p = partial_norms(dev, cfg);
  v.norm_R = p.dr_full;
  v.norm_Z = p.dz_full;
  v.margin_I = spec.a_I - v.norm_I;
  v.margin_R = spec.a_R - v.norm_R;
  v.margin_Z = spec.a_Z - v.norm_Z;
  v.member = v.margin_I >= 0 && v.margin_R >= 0 && v.margin_Z >= 0;
  return v;
}

// --- quantization bound ------------------------------------------------------

// ||H_{m,n}[w_{m,n}]|| <= ||w_{m,n}|| / sqrt(m^m n^n) per component, and the
// aggregate bounds ||H[w]|| <= ||w||^(xi), ||W[w]|| <= xi ||w_I||^(xi).
inline std::vector<CheckRecord> quantization_bound_check(const KernelSeq& w, cx z,
                                                         const Mask& V,
                                                         const NormConfig& cfg) {
  std::vector<CheckRecord> out;
  for (size_t i = 0; i < w.components().size(); ++i) {
    const auto& comp = w.components()[i];
    const double mm = (comp.m == 0 ? 1.0 : std::pow(comp.m, comp.m)) *
                      (comp.n == 0 ? 1.0 : std::pow(comp.n, comp.n));
    const double bound = wmn_norm(w, static_cast<int>(i), z, cfg) / std::sqrt(mm);
    const double nrm = op_norm(quantize_component(w, comp.m, comp.n, z, V));
    auto c = CheckRecord::bound_check(
        "kernels.component_bound." + std::to_string(comp.m) + std::to_string(comp.n),
        "||H_mn[w_mn]|| <= ||w_mn|| / sqrt(m^m n^n)", nrm, bound + 1e-12 * std::max(1.0, bound));
    c.extra["m"] = comp.m;
    c.extra["n"] = comp.n;
    out.push_back(std::move(c));
  }
  out.push_back(CheckRecord::bound_check("kernels.aggregate_bound", "||H[w]|| <= ||w||^(xi)",
                                         op_norm(quantize(w, z, V)),
                                         xi_norm(w, z, cfg) + 1e-12));
  out.push_back(CheckRecord::bound_check(
      "kernels.interaction_bound", "||W[w]|| <= xi ||w_I||^(xi)",
      op_norm(quantize_interaction(w, z, V)),
      cfg.xi * xi_norm(w, z, cfg, /*interaction_only=*/true) + 1e-12));
  return out;
}

// --- sandwiched kernel -------------------------------------------------------

// The kernel of H[w]_{chibar_gamma, H_ph}: free part r chi^2 + w00 chibar^2
// and interaction chibar H[w_I] chibar pulled through the creation and
// annihilation legs, so each combo's r-profile is multiplied by
// chibar(r + sum omega_js) chibar(r + sum omega_ls).
inline KernelSeq sandwich_kernel(const KernelSeq& w, const SmoothFamily& fam, double gamma) {
  KernelSeq out = w;
  const auto& pts = out.rgrid().pts;
  const auto& grid = w.basis().grid();

  auto& free = out.components()[0];
  for (int i = 0; i < out.rgrid().size(); ++i) {
    const double r = pts[i];
    const double c = fam.chi(gamma, r), cb = fam.chibar(gamma, r);
    const double dc = fam.dchi(gamma, r), dcb = fam.dchibar(gamma, r);
    for (int k = 0; k <= out.zdeg(); ++k) {
      const cx v = free.val[0](i, k), dv = free.drv[0](i, k);
      const cx base = (k == 0 ? cx(r * c * c, 0) : cx(0, 0));
      const cx dbase = (k == 0 ? cx(c * c + 2.0 * r * c * dc, 0) : cx(0, 0));
      free.val[0](i, k) = base + v * (cb * cb);
      free.drv[0](i, k) = dbase + dv * (cb * cb) + v * (2.0 * cb * dcb);
    }
  }

  for (size_t ci = 1; ci < out.components().size(); ++ci) {
    auto& comp = out.components()[ci];
    for (size_t c = 0; c < comp.combos.size(); ++c) {
      double oj = 0.0, ol = 0.0;
      for (int j : comp.combos[c].js) oj += grid.omega(j);
      for (int l : comp.combos[c].ls) ol += grid.omega(l);
      for (int i = 0; i < out.rgrid().size(); ++i) {
        const double r = pts[i];
        const double gj = fam.chibar(gamma, r + oj), gl = fam.chibar(gamma, r + ol);
        const double dgj = fam.dchibar(gamma, r + oj), dgl = fam.dchibar(gamma, r + ol);
        for (int k = 0; k <= out.zdeg(); ++k) {
          const cx v = comp.val[c](i, k), dv = comp.drv[c](i, k);
          comp.val[c](i, k) = v * (gj * gl);
          comp.drv[c](i, k) = dv * (gj * gl) + v * (dgj * gl + gj * dgl);
        }
      }
    }
  }
  return out;
}

// --- template shape projection ------------------------------------------------

// Slots the quantization on V can actually reach, per (component, combo).
inline std::vector<std::vector<std::vector<int>>> reachable_slots(const KernelSeq& w,
                                                                  const Mask& V) {
  std::vector<std::vector<std::vector<int>>> reach(w.components().size());
  for (size_t ci = 0; ci < w.components().size(); ++ci)
    reach[ci].resize(w.components()[ci].combos.size());
  for (int k = 0; k < V.size(); ++k)
    reach[0][0].push_back(w.rgrid().slot_of_state[V[k]]);
  detail::for_each_interaction_term(w, V,
                                    [&](int ci, int k, int slot, int, int, double) {
                                      reach[ci][k].push_back(slot);
                                    });
  for (auto& comp : reach)
    for (auto& slots : comp) {
      std::sort(slots.begin(), slots.end());
      slots.erase(std::unique(slots.begin(), slots.end()), slots.end());
    }
  return reach;
}

// Projects a kernel onto the shape the extraction can represent: values on
// unreachable slots come from piecewise-linear interpolation of reachable
// ones (flat beyond the hull), and the d/dr channel is rebuilt by centered
// finite differences. Kernels produced this way are exact fixed points of
// fit_kernel applied to their own quantization.
inline void canonicalize_to_reachable(KernelSeq& w, const Mask& V) {
  const auto reach = reachable_slots(w, V);
  const auto& pts = w.rgrid().pts;
  auto& comps = w.components();
  for (size_t ci = 0; ci < comps.size(); ++ci) {
    auto& comp = comps[ci];
    for (size_t c = 0; c < comp.combos.size(); ++c) {
      const auto& known = reach[ci][c];
      if (known.empty()) {
        comp.val[c].setZero();
        comp.drv[c].setZero();
        continue;
      }
      for (int i = 0; i < w.rgrid().size(); ++i) {
        if (std::binary_search(known.begin(), known.end(), i)) continue;
        auto hi = std::upper_bound(known.begin(), known.end(), i);
        if (hi == known.begin()) {
          comp.val[c].row(i) = comp.val[c].row(known.front());
        } else if (hi == known.end()) {
          comp.val[c].row(i) = comp.val[c].row(known.back());
        } else {
          const int a = *(hi - 1), d = *hi;
          const double t = (pts[i] - pts[a]) / (pts[d] - pts[a]);
          comp.val[c].row(i) = (1.0 - t) * comp.val[c].row(a) + t * comp.val[c].row(d);
        }
      }
      for (int k = 0; k < comp.val[c].cols(); ++k)
        comp.drv[c].col(k) = fd_derivative(pts, comp.val[c].col(k));
    }
  }
}

// Largest coefficient deviation between two kernels of identical shape.
inline double kernel_max_diff(const KernelSeq& a, const KernelSeq& b) {
  double mx = 0.0;
  for (size_t ci = 0; ci < a.components().size(); ++ci)
    for (size_t c = 0; c < a.components()[ci].combos.size(); ++c)
      mx = std::max(mx, (a.components()[ci].val[c] - b.components()[ci].val[c])
                            .cwiseAbs()
                            .maxCoeff());
  return mx;
}

// --- kernel extraction -------------------------------------------------------

struct FitResult {
  KernelSeq kernel;
  std::vector<double> per_sample_residual;  // relative Frobenius per z sample
  double max_residual = 0.0;
  double recenter_size = 0.0;  // |w00(z,0) - z| removed by re-centering
  int active_dofs = 0;
  int pruned_dofs = 0;  // unreachable degrees of freedom, fixed to zero
};

// Least-squares kernel extraction: finds the kernel (within the template's
// component and window shape) whose quantization matches the targets on the
// mask V for each z sample; z samples on a ring are projected onto the
// polynomial z-basis. The w00 channel is re-centered so w00(z, 0) = z.
inline FitResult fit_kernel(const std::vector<cx>& zs,
                            const std::function<Mat(cx)>& target_entries,
                            const KernelSeq& shape, const Mask& V,
                            double rank_threshold = 3e-7, bool recenter = true) {
  if (zs.size() < static_cast<size_t>(shape.zdeg()) + 1)
    throw std::invalid_argument("fit_kernel: not enough z samples for the degree");
  const FockBasis& b = shape.basis();
  const RGrid& rg = shape.rgrid();

  // Degrees of freedom: (component, combo, slot) triples that the
  // quantization can reach on V. Free slots are those arising as H_ph
  // eigenvalues of V-states.
  std::map<std::tuple<int, int, int>, int> dof_id;
  std::vector<std::tuple<int, int, int>> dofs;
  auto intern = [&](int ci, int combo, int slot) {
    auto key = std::make_tuple(ci, combo, slot);
    auto it = dof_id.find(key);
    if (it != dof_id.end()) return it->second;
    const int id = static_cast<int>(dofs.size());
    dof_id.emplace(key, id);
    dofs.push_back(key);
    return id;
  };

  struct Trip {
    int entry;
    int dof;
    double coeff;
  };
  std::vector<Trip> trips;
  const int nv = V.size();
  for (int col = 0; col < nv; ++col) {
    const int slot = rg.slot_of_state[V[col]];
    trips.push_back({col * nv + col, intern(0, 0, slot), 1.0});
  }
  detail::for_each_interaction_term(
      shape, V, [&](int ci, int k, int slot, int row, int col, double coeff) {
        trips.push_back({col * nv + row, intern(ci, k, slot), coeff});
      });

  const int nd = static_cast<int>(dofs.size());
  int total_dofs = 0;
  for (const auto& comp : shape.components())
    total_dofs += static_cast<int>(comp.combos.size()) * rg.size();

  // Normal equations (the design is real and shared across z samples),
  // column-equilibrated so the rank test is insensitive to the soft-mode
  // weight spread.
  std::sort(trips.begin(), trips.end(), [](const Trip& a, const Trip& c) {
    return a.entry < c.entry;
  });
  Eigen::MatrixXd ntn = Eigen::MatrixXd::Zero(nd, nd);
  {
    size_t i = 0;
    while (i < trips.size()) {
      size_t j = i;
      while (j < trips.size() && trips[j].entry == trips[i].entry) ++j;
      for (size_t a = i; a < j; ++a)
        for (size_t c = i; c < j; ++c) ntn(trips[a].dof, trips[c].dof) += trips[a].coeff * trips[c].coeff;
      i = j;
    }
  }
  Eigen::VectorXd scale(nd);
  for (int i = 0; i < nd; ++i) scale(i) = 1.0 / std::sqrt(ntn(i, i));
  ntn = scale.asDiagonal() * ntn * scale.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ntn);
  const auto& ev = es.eigenvalues();
  const double cut = rank_threshold * rank_threshold * ev(nd - 1);
  int deficiency = 0;
  for (int i = 0; i < nd; ++i)
    if (!(ev(i) > cut)) ++deficiency;
  if (deficiency > 0)
    throw RankDeficientFit("fit_kernel: design matrix rank-deficient by " +
                           std::to_string(deficiency) + " of " + std::to_string(nd));

  FitResult out;
  out.kernel = shape;
  for (auto& comp : out.kernel.components())
    for (size_t c = 0; c < comp.combos.size(); ++c) {
      comp.val[c].setZero();
      comp.drv[c].setZero();
    }
  out.active_dofs = nd;
  out.pruned_dofs = total_dofs - nd;

  // Solve per sample, then project the per-dof sample values onto the
  // polynomial z-basis (ring samples make this a discrete Fourier
  // projection).
  const int ns = static_cast<int>(zs.size());
  const Eigen::MatrixXd evec = es.eigenvectors();
  Mat dof_values(nd, ns);
  for (int s = 0; s < ns; ++s) {
    Mat t = target_entries(zs[s]);
    if (t.rows() != nv || t.cols() != nv)
      throw std::invalid_argument("fit_kernel: target shape mismatch");
    Vec rhs = Vec::Zero(nd);
    for (const auto& tr : trips)
      rhs(tr.dof) += tr.coeff * t(tr.entry % nv, tr.entry / nv);
    rhs = scale.cast<cx>().asDiagonal() * rhs;
    Vec proj = evec.transpose().cast<cx>() * rhs;
    for (int i = 0; i < nd; ++i) proj(i) /= ev(i);
    Vec x = scale.cast<cx>().asDiagonal() * (evec.cast<cx>() * proj);
    dof_values.col(s) = x;

    // relative Frobenius residual, counting unreachable target content
    Mat pred = Mat::Zero(nv, nv);
    for (const auto& tr : trips) pred(tr.entry % nv, tr.entry / nv) += tr.coeff * x(tr.dof);
    const double denom = std::max(1.0, t.norm());
    out.per_sample_residual.push_back((pred - t).norm() / denom);
  }
  out.max_residual =
      *std::max_element(out.per_sample_residual.begin(), out.per_sample_residual.end());

  // z-polynomial coefficients by least squares over the samples.
  Mat vand(ns, shape.zdeg() + 1);
  for (int s = 0; s < ns; ++s) vand.row(s) = shape.zpow(zs[s]).transpose();
  Eigen::ColPivHouseholderQR<Mat> qr(vand);
  Mat coeffs = qr.solve(dof_values.transpose());  // (zdeg+1) x nd

  auto& comps = out.kernel.components();
  for (int d = 0; d < nd; ++d) {
    auto [ci, combo, slot] = dofs[d];
    for (int k = 0; k <= shape.zdeg(); ++k) comps[ci].val[combo](slot, k) = coeffs(k, d);
  }

  if (recenter) {
    // Enforce w00(z, 0) = z exactly: subtract the constant-in-r defect.
    const int z0 = rg.zero_slot();
    Eigen::RowVectorXcd defect = comps[0].val[0].row(z0);
    if (shape.zdeg() >= 1) defect(1) -= cx(shape.z_scale(), 0);
    double mag = 0.0;
    for (cx z : z_ring(16)) mag = std::max(mag, std::abs((defect * out.kernel.zpow(z)).value()));
    out.recenter_size = mag;
    for (int i = 0; i < rg.size(); ++i) comps[0].val[0].row(i) -= defect;
  }

  canonicalize_to_reachable(out.kernel, V);
  return out;
}

}  // namespace feshflow

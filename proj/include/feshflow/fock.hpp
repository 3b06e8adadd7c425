#pragma once

// Truncated bosonic Fock space over a geometric grid of radial modes.
//
// The one-particle space is reduced to rotation-invariant shells of the
// unit ball: one mode per shell, frequencies omega_j = e^{-j*delta}.
// The basis keeps occupation vectors with total boson number <= n_max and
// free energy H_ph <= 1, so the low-energy reduction is built in.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace feshflow {

using cx = std::complex<double>;

// Tolerance used when float sums sit on a spectral boundary (e.g. dyadic
// occupation energies summing to exactly 1).
inline constexpr double kBoundaryTol = 1e-12;

inline bool leq_tol(double a, double b) { return a <= b * (1.0 + kBoundaryTol) + 1e-300; }

class ModeGrid {
public:
  ModeGrid(double delta, int max_mode) : delta_(delta), max_mode_(max_mode) {
    if (!(delta > 0.0)) throw std::invalid_argument("ModeGrid: delta must be positive");
    if (max_mode < 0) throw std::invalid_argument("ModeGrid: max mode must be >= 0");
    const double ratio = std::exp(-delta);
    omega_.resize(max_mode + 1);
    omega_[0] = 1.0;
    for (int j = 1; j <= max_mode; ++j) omega_[j] = omega_[j - 1] * ratio;
    // Radial shell volume of the unit ball, 4*pi*omega^2 * (shell width),
    // with log-uniform shells of width 2*sinh(delta/2)*omega.
    measure_c0_ = 8.0 * M_PI * std::sinh(delta / 2.0);
  }

  double delta() const { return delta_; }
  int max_mode() const { return max_mode_; }
  int mode_count() const { return max_mode_ + 1; }
  double omega(int j) const { return omega_.at(j); }

  // Quadrature weight of mode j, discretizing \int_B d^3k over the shell.
  double measure_weight(int j) const { return measure_c0_ * cube(omega_.at(j)); }
  // Per-leg coupling weight: discretizes d^3k/|k|^{1/2} against unit-normalized
  // mode operators, gamma_j = sqrt(c_j / omega_j).
  double coupling_weight(int j) const { return std::sqrt(measure_weight(j) / omega_.at(j)); }
  // Weight of mode j in the kernel norm, c_j * omega_j^{-(3+2mu)}.
  double norm_weight(int j, double mu) const {
    return measure_weight(j) * std::pow(omega_.at(j), -(3.0 + 2.0 * mu));
  }

  bool operator==(const ModeGrid& o) const {
    return delta_ == o.delta_ && max_mode_ == o.max_mode_;
  }

private:
  static double cube(double x) { return x * x * x; }
  double delta_;
  int max_mode_;
  std::vector<double> omega_;
  double measure_c0_;
};

using Occupation = std::vector<int>;

class FockBasis {
public:
  FockBasis(const ModeGrid& grid, int n_max) : grid_(grid), n_max_(n_max) {
    if (n_max < 0) throw std::invalid_argument("FockBasis: n_max must be >= 0");
    Occupation occ(grid.mode_count(), 0);
    enumerate(occ, 0, 0, 0.0);
    vacuum_index_ = index_of(Occupation(grid.mode_count(), 0));
    if (vacuum_index_ < 0) throw std::logic_error("FockBasis: vacuum missing");
  }

  const ModeGrid& grid() const { return grid_; }
  int n_max() const { return n_max_; }
  int dim() const { return static_cast<int>(states_.size()); }
  int vacuum_index() const { return vacuum_index_; }
  const Occupation& state(int i) const { return states_.at(i); }
  const std::vector<Occupation>& states() const { return states_; }
  double hph_value(int i) const { return hph_.at(i); }
  const std::vector<double>& hph_values() const { return hph_; }

  // Index of an occupation vector, -1 if outside the truncation.
  int index_of(const Occupation& occ) const {
    auto it = std::lower_bound(states_.begin(), states_.end(), occ);
    if (it == states_.end() || *it != occ) return -1;
    return static_cast<int>(it - states_.begin());
  }

  // Index of the state with every occupied mode shifted down by m
  // (frequency scaled by e^{m*delta}); -1 if the image leaves the basis.
  int shifted_down_index(int i, int m) const {
    if (m == 0) return i;
    const Occupation& s = states_.at(i);
    Occupation t(s.size(), 0);
    for (int j = 0; j < static_cast<int>(s.size()); ++j) {
      if (s[j] == 0) continue;
      if (j - m < 0) return -1;
      t[j - m] = s[j];
    }
    return index_of(t);
  }

  // Index of the state shifted up by m (frequency scaled by e^{-m*delta}).
  int shifted_up_index(int i, int m) const {
    if (m == 0) return i;
    const Occupation& s = states_.at(i);
    Occupation t(s.size(), 0);
    for (int j = 0; j < static_cast<int>(s.size()); ++j) {
      if (s[j] == 0) continue;
      if (j + m > grid_.max_mode()) return -1;
      t[j + m] = s[j];
    }
    return index_of(t);
  }

  int max_occupied_mode(int i) const {
    const Occupation& s = states_.at(i);
    for (int j = static_cast<int>(s.size()) - 1; j >= 0; --j)
      if (s[j] > 0) return j;
    return -1;  // vacuum
  }

  int total_bosons(int i) const {
    const Occupation& s = states_.at(i);
    int n = 0;
    for (int v : s) n += v;
    return n;
  }

  bool operator==(const FockBasis& o) const {
    return grid_ == o.grid_ && n_max_ == o.n_max_ && states_ == o.states_;
  }

private:
  void enumerate(Occupation& occ, int mode, int used, double energy) {
    if (mode == grid_.mode_count()) {
      states_.push_back(occ);
      hph_.push_back(energy);
      return;
    }
    const double w = grid_.omega(mode);
    for (int n = 0;; ++n) {
      occ[mode] = n;
      const int total = used + n;
      const double e = energy + n * w;
      if (total > n_max_ || !leq_tol(e, 1.0)) break;
      enumerate(occ, mode + 1, total, e);
    }
    occ[mode] = 0;
  }

  ModeGrid grid_;
  int n_max_;
  std::vector<Occupation> states_;
  std::vector<double> hph_;
  int vacuum_index_;
};

inline FockBasis build_basis(const ModeGrid& grid, int n_max) { return FockBasis(grid, n_max); }

}  // namespace feshflow

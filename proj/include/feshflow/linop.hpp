#pragma once

// Dense operators over a truncated Fock basis with coordinate-subspace
// bookkeeping. Every cutoff used downstream is diagonal in the occupation
// basis, so the subspaces h_chi, h_chibar, h_{chi chibar} are index masks
// and restrictions/embeddings are exact.

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <functional>
#include <optional>
#include <utility>

#include "feshflow/fock.hpp"

namespace feshflow {

using Mat = Eigen::MatrixXcd;
using Vec = Eigen::VectorXcd;

struct SingularOperator : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Strictly increasing list of basis indices.
class Mask {
public:
  Mask() = default;
  explicit Mask(std::vector<int> idx) : idx_(std::move(idx)) {
    for (size_t k = 1; k < idx_.size(); ++k)
      if (idx_[k - 1] >= idx_[k]) throw std::invalid_argument("Mask: indices not increasing");
  }
  static Mask full(int n) {
    std::vector<int> v(n);
    for (int i = 0; i < n; ++i) v[i] = i;
    return Mask(std::move(v));
  }
  static Mask where(int n, const std::function<bool(int)>& pred) {
    std::vector<int> v;
    for (int i = 0; i < n; ++i)
      if (pred(i)) v.push_back(i);
    return Mask(std::move(v));
  }

  int size() const { return static_cast<int>(idx_.size()); }
  int operator[](int k) const { return idx_[k]; }
  const std::vector<int>& indices() const { return idx_; }
  bool contains(int global) const { return position(global) >= 0; }
  int position(int global) const {
    auto it = std::lower_bound(idx_.begin(), idx_.end(), global);
    if (it == idx_.end() || *it != global) return -1;
    return static_cast<int>(it - idx_.begin());
  }
  bool operator==(const Mask& o) const { return idx_ == o.idx_; }
  bool operator!=(const Mask& o) const { return !(*this == o); }

  bool subset_of(const Mask& o) const {
    return std::includes(o.idx_.begin(), o.idx_.end(), idx_.begin(), idx_.end());
  }

  friend Mask mask_and(const Mask& a, const Mask& b) {
    std::vector<int> v;
    std::set_intersection(a.idx_.begin(), a.idx_.end(), b.idx_.begin(), b.idx_.end(),
                          std::back_inserter(v));
    return Mask(std::move(v));
  }
  friend Mask mask_or(const Mask& a, const Mask& b) {
    std::vector<int> v;
    std::set_union(a.idx_.begin(), a.idx_.end(), b.idx_.begin(), b.idx_.end(),
                   std::back_inserter(v));
    return Mask(std::move(v));
  }
  friend Mask mask_diff(const Mask& a, const Mask& b) {
    std::vector<int> v;
    std::set_difference(a.idx_.begin(), a.idx_.end(), b.idx_.begin(), b.idx_.end(),
                        std::back_inserter(v));
    return Mask(std::move(v));
  }

private:
  std::vector<int> idx_;
};

class LinOp {
public:
  LinOp() : basis_(nullptr) {}
  LinOp(const FockBasis* basis, Mask range, Mask domain, Mat entries)
      : basis_(basis), range_(std::move(range)), domain_(std::move(domain)),
        a_(std::move(entries)) {
    if (a_.rows() != range_.size() || a_.cols() != domain_.size())
      throw std::invalid_argument("LinOp: entry shape does not match masks");
  }

  static LinOp zero(const FockBasis& b, const Mask& range, const Mask& domain) {
    return LinOp(&b, range, domain, Mat::Zero(range.size(), domain.size()));
  }
  static LinOp identity(const FockBasis& b, const Mask& m) {
    return LinOp(&b, m, m, Mat::Identity(m.size(), m.size()));
  }
  static LinOp diagonal(const FockBasis& b, const Mask& m, const Vec& d) {
    if (d.size() != m.size()) throw std::invalid_argument("LinOp::diagonal: size mismatch");
    Mat a = Mat::Zero(m.size(), m.size());
    a.diagonal() = d;
    return LinOp(&b, m, m, std::move(a));
  }

  const FockBasis& basis() const { return *basis_; }
  const Mask& range_mask() const { return range_; }
  const Mask& domain_mask() const { return domain_; }
  const Mat& entries() const { return a_; }
  Mat& entries() { return a_; }
  bool square() const { return range_ == domain_; }

  cx entry_global(int gi, int gj) const {
    int r = range_.position(gi), c = domain_.position(gj);
    if (r < 0 || c < 0) return cx(0, 0);
    return a_(r, c);
  }

  LinOp adjoint() const { return LinOp(basis_, domain_, range_, a_.adjoint()); }
  LinOp transpose() const { return LinOp(basis_, domain_, range_, a_.transpose()); }

  // Zero-padded extension to larger masks.
  LinOp embed(const Mask& range, const Mask& domain) const {
    if (!range_.subset_of(range) || !domain_.subset_of(domain))
      throw std::invalid_argument("LinOp::embed: masks must contain current masks");
    Mat out = Mat::Zero(range.size(), domain.size());
    for (int r = 0; r < range_.size(); ++r) {
      const int rr = range.position(range_[r]);
      for (int c = 0; c < domain_.size(); ++c) out(rr, domain.position(domain_[c])) += a_(r, c);
    }
    return LinOp(basis_, range, domain, std::move(out));
  }

  // Compression to smaller masks.
  LinOp compress(const Mask& range, const Mask& domain) const {
    if (!range.subset_of(range_) || !domain.subset_of(domain_))
      throw std::invalid_argument("LinOp::compress: masks must be contained in current masks");
    Mat out(range.size(), domain.size());
    for (int r = 0; r < range.size(); ++r)
      for (int c = 0; c < domain.size(); ++c)
        out(r, c) = a_(range_.position(range[r]), domain_.position(domain[c]));
    return LinOp(basis_, range, domain, std::move(out));
  }

  LinOp to_masks(const Mask& range, const Mask& domain) const {
    // Re-window: keep overlapping block, zero elsewhere.
    Mat out = Mat::Zero(range.size(), domain.size());
    for (int r = 0; r < range.size(); ++r) {
      const int pr = range_.position(range[r]);
      if (pr < 0) continue;
      for (int c = 0; c < domain.size(); ++c) {
        const int pc = domain_.position(domain[c]);
        if (pc >= 0) out(r, c) = a_(pr, pc);
      }
    }
    return LinOp(basis_, range, domain, std::move(out));
  }

  friend LinOp operator*(const LinOp& l, const LinOp& r) {
    if (l.basis_ != r.basis_) throw std::invalid_argument("LinOp: basis mismatch");
    if (l.domain_ != r.range_)
      throw std::invalid_argument("LinOp: composition masks do not match");
    return LinOp(l.basis_, l.range_, r.domain_, l.a_ * r.a_);
  }
  friend LinOp operator+(const LinOp& l, const LinOp& r) {
    require_same_shape(l, r);
    return LinOp(l.basis_, l.range_, l.domain_, l.a_ + r.a_);
  }
  friend LinOp operator-(const LinOp& l, const LinOp& r) {
    require_same_shape(l, r);
    return LinOp(l.basis_, l.range_, l.domain_, l.a_ - r.a_);
  }
  friend LinOp operator*(cx s, const LinOp& r) {
    return LinOp(r.basis_, r.range_, r.domain_, s * r.a_);
  }
  friend LinOp operator*(double s, const LinOp& r) { return cx(s, 0) * r; }

private:
  static void require_same_shape(const LinOp& l, const LinOp& r) {
    if (l.basis_ != r.basis_ || l.range_ != r.range_ || l.domain_ != r.domain_)
      throw std::invalid_argument("LinOp: shape mismatch");
  }
  const FockBasis* basis_;
  Mask range_, domain_;
  Mat a_;
};

// Largest singular value.
inline double op_norm(const LinOp& op) {
  if (op.entries().size() == 0) return 0.0;
  return op.entries().jacobiSvd().singularValues()(0);
}

inline double op_norm(const Mat& a) {
  if (a.size() == 0) return 0.0;
  return a.jacobiSvd().singularValues()(0);
}

inline double smallest_singular_value(const LinOp& op) {
  if (op.entries().size() == 0) return 0.0;
  auto sv = op.entries().jacobiSvd().singularValues();
  return sv(sv.size() - 1);
}

inline cx vacuum_expectation(const LinOp& op) {
  const int vac = op.basis().vacuum_index();
  if (!op.range_mask().contains(vac) || !op.domain_mask().contains(vac))
    throw std::invalid_argument("vacuum_expectation: operator does not cover the vacuum");
  return op.entry_global(vac, vac);
}

struct InverseResult {
  LinOp inverse;
  double sigma_min = 0.0;   // invertibility margin inf ||A psi||
  double sigma_max = 0.0;
  double residual = 0.0;    // || A * inv - I ||_op
};

// Inverse with an explicit margin; throws SingularOperator below threshold.
inline InverseResult bounded_inverse(const LinOp& op, double rel_threshold = 1e-12) {
  if (!op.square()) throw std::invalid_argument("bounded_inverse: operator not square");
  const Mat& a = op.entries();
  if (a.rows() == 0) {
    return {LinOp(&op.basis(), op.range_mask(), op.domain_mask(), Mat(0, 0)), 0.0, 0.0, 0.0};
  }
  Eigen::JacobiSVD<Mat> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double smax = sv(0), smin = sv(sv.size() - 1);
  if (!(smin > rel_threshold * smax) || smax == 0.0)
    throw SingularOperator("bounded_inverse: singular operator (margin " +
                           std::to_string(smin) + ")");
  Mat inv = svd.matrixV() * sv.cwiseInverse().asDiagonal() * svd.matrixU().adjoint();
  double resid = op_norm(Mat(a * inv - Mat::Identity(a.rows(), a.cols())));
  return {LinOp(&op.basis(), op.domain_mask(), op.range_mask(), std::move(inv)), smin, smax,
          resid};
}

// Numerical kernel dimension under relative SVD thresholding.
inline int kernel_dimension(const LinOp& op, double rel_threshold = 1e-12) {
  if (op.entries().size() == 0) return 0;
  auto sv = op.entries().jacobiSvd().singularValues();
  const double cut = rel_threshold * static_cast<double>(sv.size()) * sv(0);
  int dim = 0;
  for (int i = 0; i < sv.size(); ++i)
    if (!(sv(i) > cut)) ++dim;
  return dim;
}

inline bool is_invertible(const LinOp& op, double rel_threshold = 1e-12) {
  if (!op.square()) return false;
  if (op.entries().size() == 0) return true;
  auto sv = op.entries().jacobiSvd().singularValues();
  return sv(sv.size() - 1) > rel_threshold * sv(0) && sv(0) > 0.0;
}

// --- operators tied to the basis ------------------------------------------

inline LinOp hph(const FockBasis& b, const Mask& m) {
  Vec d(m.size());
  for (int k = 0; k < m.size(); ++k) d(k) = b.hph_value(m[k]);
  return LinOp::diagonal(b, m, d);
}
inline LinOp hph(const FockBasis& b) { return hph(b, Mask::full(b.dim())); }

// Functional calculus on an (exactly) diagonal operator with real spectrum.
inline LinOp func_calc(const std::function<cx(double)>& f, const LinOp& diag_op) {
  if (!diag_op.square()) throw std::invalid_argument("func_calc: operator not square");
  const Mat& a = diag_op.entries();
  for (int r = 0; r < a.rows(); ++r)
    for (int c = 0; c < a.cols(); ++c)
      if (r != c && a(r, c) != cx(0, 0))
        throw std::invalid_argument("func_calc: operator is not diagonal");
  Vec d(a.rows());
  for (int i = 0; i < a.rows(); ++i) {
    if (a(i, i).imag() != 0.0)
      throw std::invalid_argument("func_calc: diagonal must be real");
    d(i) = f(a(i, i).real());
  }
  return LinOp::diagonal(diag_op.basis(), diag_op.range_mask(), d);
}

// Creation operator for mode j, projected back into the truncation.
inline LinOp create(const FockBasis& b, int j) {
  if (j < 0 || j > b.grid().max_mode()) throw std::out_of_range("create: mode index");
  Mat a = Mat::Zero(b.dim(), b.dim());
  for (int t = 0; t < b.dim(); ++t) {
    Occupation occ = b.state(t);
    const double amp = std::sqrt(static_cast<double>(occ[j] + 1));
    occ[j] += 1;
    const int s = b.index_of(occ);
    if (s >= 0) a(s, t) = amp;
  }
  const Mask m = Mask::full(b.dim());
  return LinOp(&b, m, m, std::move(a));
}

inline LinOp annihilate(const FockBasis& b, int j) {
  if (j < 0 || j > b.grid().max_mode()) throw std::out_of_range("annihilate: mode index");
  Mat a = Mat::Zero(b.dim(), b.dim());
  for (int t = 0; t < b.dim(); ++t) {
    Occupation occ = b.state(t);
    if (occ[j] == 0) continue;
    const double amp = std::sqrt(static_cast<double>(occ[j]));
    occ[j] -= 1;
    const int s = b.index_of(occ);
    if (s >= 0) a(s, t) = amp;
  }
  const Mask m = Mask::full(b.dim());
  return LinOp(&b, m, m, std::move(a));
}

}  // namespace feshflow

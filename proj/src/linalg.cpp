#include "mtz/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace mtz::linalg {

SpdMatrix SpdMatrix::from_matrix(const Mat& m) {
  if (m.rows() != m.cols()) throw DimensionError("SpdMatrix: not square");
  if (!m.allFinite()) throw Error("SpdMatrix: non-finite entries");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if (((m - m.transpose()).cwiseAbs().maxCoeff()) > 1e-12 * scale)
    throw Error("SpdMatrix: not symmetric");
  SpdMatrix out(static_cast<int>(m.rows()));
  out.m_ = 0.5 * (m + m.transpose());
  return out;
}

void SpdMatrix::accumulate_outer(const Vec& x) {
  if (x.size() != m_.rows())
    throw DimensionError("accumulate_outer: dimension mismatch");
  m_.selfadjointView<Eigen::Lower>().rankUpdate(x);
  m_.triangularView<Eigen::StrictlyUpper>() =
      m_.transpose().triangularView<Eigen::StrictlyUpper>();
}

void SpdMatrix::add(const SpdMatrix& other, double scale) {
  if (other.dim() != dim()) throw DimensionError("SpdMatrix::add: dim mismatch");
  m_ += scale * other.m_;
}

Eigen::LLT<Mat> SpdMatrix::factor() const {
  if (!m_.allFinite()) throw SolveError("SpdMatrix: non-finite entries");
  const int n = dim();
  const double tr = std::max(m_.trace(), 0.0);
  const double unit = n > 0 ? tr / n : 0.0;
  // First try the damping already settled on, then escalate.
  std::vector<double> trial{damping_};
  for (double d = 1e-6; d <= 1e-2 * 1.0000001; d *= 10.0)
    if (d * unit > damping_) trial.push_back(d * unit);
  if (unit == 0.0) trial.push_back(1e-12);  // all-zero matrix still factors
  for (double d : trial) {
    Eigen::LLT<Mat> llt(m_ + d * Mat::Identity(n, n));
    if (llt.info() == Eigen::Success) {
      damping_ = d;
      return llt;
    }
  }
  throw SolveError("SpdMatrix: factorization failed after damping escalation");
}

Mat SpdMatrix::solve(const Mat& b) const {
  if (b.rows() != m_.rows()) throw DimensionError("spd_solve: dim mismatch");
  if (!b.allFinite()) throw Error("spd_solve: non-finite rhs");
  return factor().solve(b);
}

double SpdMatrix::quadratic_form(const Vec& v) const {
  if (v.size() != m_.rows())
    throw DimensionError("quadratic_form: dim mismatch");
  return v.dot(m_.selfadjointView<Eigen::Lower>() * v);
}

Permutation::Permutation(std::vector<int> mapping) : map_(std::move(mapping)) {
  const int n = static_cast<int>(map_.size());
  std::vector<char> seen(n, 0);
  for (int i : map_) {
    if (i < 0 || i >= n || seen[i]) throw Error("Permutation: not a bijection");
    seen[i] = 1;
  }
}

Permutation Permutation::identity(int n) {
  std::vector<int> m(n);
  for (int i = 0; i < n; ++i) m[i] = i;
  return Permutation(std::move(m));
}

Permutation Permutation::inverse() const {
  std::vector<int> inv(map_.size());
  for (int i = 0; i < size(); ++i) inv[map_[i]] = i;
  return Permutation(std::move(inv));
}

Permutation Permutation::expand_blocks(int block) const {
  std::vector<int> m;
  m.reserve(map_.size() * block);
  for (int i : map_)
    for (int k = 0; k < block; ++k) m.push_back(i * block + k);
  return Permutation(std::move(m));
}

Vec Permutation::apply(const Vec& v) const {
  if (v.size() != size()) throw DimensionError("Permutation: size mismatch");
  Vec out(v.size());
  for (int i = 0; i < size(); ++i) out[i] = v[map_[i]];
  return out;
}

Mat Permutation::apply_rows(const Mat& m) const {
  if (m.rows() != size()) throw DimensionError("Permutation: row mismatch");
  Mat out(m.rows(), m.cols());
  for (int i = 0; i < size(); ++i) out.row(i) = m.row(map_[i]);
  return out;
}

}  // namespace mtz::linalg

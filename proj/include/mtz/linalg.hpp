#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtz {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
  using Error::Error;
};
struct SolveError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};

namespace linalg {

/// Symmetric matrix accumulated from outer products. Solves add a diagonal
/// damping term when the factorization fails; the damping sticks so repeated
/// solves against the same matrix are consistent.
class SpdMatrix {
 public:
  explicit SpdMatrix(int dim) : m_(Mat::Zero(dim, dim)) {}

  // Validates symmetry to 1e-12 relative.
  static SpdMatrix from_matrix(const Mat& m);

  int dim() const { return static_cast<int>(m_.rows()); }
  const Mat& matrix() const { return m_; }
  double damping() const { return damping_; }

  // sum += x x^T; only the lower triangle is updated, then mirrored on read.
  void accumulate_outer(const Vec& x);
  void add(const SpdMatrix& other, double scale = 1.0);
  void scale(double s) { m_ *= s; }

  // Solves (A + damping I) x = b. Starts from the current damping and
  // escalates 1e-6*trace/dim -> 1e-2*trace/dim by factors of 10 on failure.
  Mat solve(const Mat& b) const;

  double quadratic_form(const Vec& v) const;

  // Factorization with the damping policy applied; throws SolveError if the
  // matrix is not positive definite even at the maximum damping.
  Eigen::LLT<Mat> factor() const;

 private:
  Mat m_;
  mutable double damping_ = 0.0;
};

/// Index bijection. apply(v)[i] = v[mapping[i]], i.e. mapping[i] names the
/// source position of output slot i.
class Permutation {
 public:
  explicit Permutation(std::vector<int> mapping);
  static Permutation identity(int n);

  int size() const { return static_cast<int>(map_.size()); }
  const std::vector<int>& mapping() const { return map_; }
  int operator[](int i) const { return map_[i]; }

  Permutation inverse() const;
  // Each index expands to `block` consecutive coordinates.
  Permutation expand_blocks(int block) const;

  Vec apply(const Vec& v) const;
  Mat apply_rows(const Mat& m) const;

 private:
  std::vector<int> map_;
};

}  // namespace linalg
}  // namespace mtz

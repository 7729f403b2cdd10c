#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mtz/hessian.hpp"
#include "mtz/trainer.hpp"

using namespace mtz;
using hessian::CalibrationSet;
using hessian::HessianEstimate;

namespace {

Mat random_mat(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

// E_l = (1/n) sum ||y_l(perturbed) - y_l(original)||^2 when unit `unit` of
// layer `layer` has its incoming weights (+ bias as trailing coordinate)
// displaced by `delta`. Layer error of Eqs. 3-4 measured on pre-activations.
double layer_error(const Network& net, int layer, int unit, const Vec& delta,
                   const Mat& calib) {
  Network pert = net;
  Layer& ly = pert.layers[layer];
  const int nw = static_cast<int>(ly.weights.rows());
  REQUIRE(delta.size() == nw + 1);
  ly.weights.col(unit) += delta.head(nw);
  ly.bias[unit] += delta[nw];
  Mat y0 = forward(net, calib).pre[layer];
  Mat y1 = forward(pert, calib).pre[layer];
  return (y1 - y0).squaredNorm() / calib.rows();
}

// Central finite-difference Hessian of the layer error above.
Mat fd_hessian(const Network& net, int layer, int unit, const Mat& calib) {
  const int dim = static_cast<int>(net.layers[layer].weights.rows()) + 1;
  const double h = 1e-3;
  Mat H(dim, dim);
  for (int p = 0; p < dim; ++p)
    for (int q = 0; q < dim; ++q) {
      Vec d = Vec::Zero(dim);
      d[p] += h;
      d[q] += h;
      const double epp = layer_error(net, layer, unit, d, calib);
      d[q] -= 2 * h;
      const double epm = layer_error(net, layer, unit, d, calib);
      d[p] -= 2 * h;
      const double emm = layer_error(net, layer, unit, d, calib);
      d[q] += 2 * h;
      const double emp = layer_error(net, layer, unit, d, calib);
      H(p, q) = (epp - epm - emp + emm) / (4 * h * h);
    }
  return H;
}

}  // namespace

TEST_CASE("single-sample Hessian is the outer product plus bias coordinate") {
  Mat prev(1, 2);
  prev << 1, 2;
  HessianEstimate h = hessian::hessian_from_inputs(prev, {0, 1}, 1, false,
                                                   nullptr, 1.0, 0);
  REQUIRE(h.dim() == 3);
  const Mat& m = h.average().matrix();
  CHECK(m(0, 0) == 1);
  CHECK(m(0, 1) == 2);
  CHECK(m(1, 0) == 2);
  CHECK(m(1, 1) == 4);
  // Bias coordinate behaves as a constant-1 input.
  CHECK(m(2, 2) == 1);
  CHECK(m(2, 0) == 1);
  CHECK(m(2, 1) == 2);
}

TEST_CASE("alpha weight scales the estimate linearly") {
  std::mt19937_64 rng(1);
  Mat prev = random_mat(10, 4, rng);
  HessianEstimate h1 = hessian::hessian_from_inputs(prev, {0, 1, 2, 3}, 1,
                                                    false, nullptr, 1.0, 0);
  HessianEstimate h2 = hessian::hessian_from_inputs(prev, {0, 1, 2, 3}, 1,
                                                    false, nullptr, 0.5, 0);
  CHECK((h1.average().matrix() - h2.average().matrix()).norm() == 0.0);
  CHECK((h1.weighted().matrix() - 2.0 * h2.weighted().matrix()).norm() <=
        1e-14);
}

TEST_CASE("duplicating the calibration set leaves the estimate unchanged") {
  std::mt19937_64 rng(2);
  Network net = trainer::make_mlp(6, {5, 4}, 3, 3, "h");
  Mat calib = random_mat(50, 6, rng);
  Mat doubled(100, 6);
  doubled << calib, calib;
  HessianEstimate h1 = hessian::layer_hessian(net, 1, {calib, 0}, 1.0);
  HessianEstimate h2 = hessian::layer_hessian(net, 1, {doubled, 0}, 1.0);
  CHECK((h1.average().matrix() - h2.average().matrix()).norm() <= 1e-12);
}

TEST_CASE("estimates are PSD") {
  std::mt19937_64 rng(3);
  Network net = trainer::make_mlp(6, {5, 4}, 3, 4, "h");
  Mat calib = random_mat(30, 6, rng);
  HessianEstimate h = hessian::layer_hessian(net, 1, {calib, 0}, 1.0);
  for (int rep = 0; rep < 1000; ++rep) {
    Vec v = random_mat(h.dim(), 1, rng).col(0);
    CHECK(h.average().quadratic_form(v) >= -1e-10);
  }
}

TEST_CASE("dense layer Hessian matches finite differences of E_l") {
  // The quadratic model behind Eqs. 7-8 stores H = (1/n) sum x x^T while the
  // raw second derivative of E_l is (2/n) sum x x^T; the comparison carries
  // the 1/2.
  std::mt19937_64 rng(4);
  Network net = trainer::make_mlp(4, {3, 3}, 2, 5, "h");
  Mat calib = random_mat(20, 4, rng);
  for (int layer = 0; layer < 2; ++layer) {
    HessianEstimate h = hessian::layer_hessian(net, layer, {calib, 0}, 1.0);
    Mat fd = 0.5 * fd_hessian(net, layer, 0, calib);
    CHECK((h.average().matrix() - fd).norm() / fd.norm() <= 1e-4);
    // H is identical across units i of the layer (Eq. 7 has no i on the
    // right-hand side): check against another unit's finite differences.
    Mat fd1 = 0.5 * fd_hessian(net, layer, 1, calib);
    CHECK((fd - fd1).norm() / fd.norm() <= 1e-6);
  }
}

TEST_CASE("conv layer Hessian matches finite differences of E_l") {
  std::mt19937_64 rng(5);
  Network net = trainer::make_cnn(6, 2, 2, 6, 2, 6, "h");
  Mat calib = random_mat(8, 36, rng);
  for (int layer : {1}) {  // second conv layer: multi-channel patches
    HessianEstimate h = hessian::layer_hessian(net, layer, {calib, 0}, 1.0);
    Mat fd = 0.5 * fd_hessian(net, layer, 0, calib);
    CHECK((h.average().matrix() - fd).norm() / fd.norm() <= 1e-4);
  }
}

TEST_CASE("conv-to-dense boundary Hessian matches finite differences") {
  std::mt19937_64 rng(6);
  Network net = trainer::make_cnn(6, 2, 2, 6, 2, 7, "h");
  Mat calib = random_mat(8, 36, rng);
  HessianEstimate h = hessian::layer_hessian(net, 2, {calib, 0}, 1.0);
  Mat fd = 0.5 * fd_hessian(net, 2, 0, calib);
  CHECK((h.average().matrix() - fd).norm() / fd.norm() <= 1e-4);
}

TEST_CASE("zipped-view Hessian equals the plain-network Hessian at embed") {
  std::mt19937_64 rng(7);
  Network a = trainer::make_mlp(6, {5, 4}, 3, 8, "a");
  Network b = trainer::make_mlp(6, {5, 4}, 3, 9, "b");
  ZippedModel zm = embed({&a, &b});
  Mat calib = random_mat(25, 6, rng);
  for (int l = 0; l < 2; ++l) {
    HessianEstimate hn = hessian::layer_hessian(b, l, {calib, 1}, 1.0);
    HessianEstimate hz = hessian::layer_hessian(zm, 1, l, {calib, 1}, 1.0, {});
    CHECK((hn.average().matrix() - hz.average().matrix()).norm() == 0.0);
  }
}

TEST_CASE("merge_hessians trivial cases") {
  std::mt19937_64 rng(8);
  Mat prev = random_mat(10, 3, rng);
  HessianEstimate h = hessian::hessian_from_inputs(prev, {0, 1, 2}, 1, false,
                                                   nullptr, 1.0, 0);
  HessianEstimate zero_w = hessian::hessian_from_inputs(
      random_mat(10, 3, rng), {0, 1, 2}, 1, false, nullptr, 0.0, 1);
  HessianEstimate m1 = hessian::merge_hessians(h, zero_w);
  CHECK((m1.average().matrix() - h.average().matrix()).norm() == 0.0);

  HessianEstimate m2 = hessian::merge_hessians(h, h);
  CHECK((m2.average().matrix() - h.average().matrix()).norm() <= 1e-14);
  CHECK(m2.alpha_weight() == 1.0);

  HessianEstimate small = hessian::hessian_from_inputs(prev, {0, 1}, 1, false,
                                                       nullptr, 1.0, 0);
  CHECK_THROWS_AS(hessian::merge_hessians(h, small), DimensionError);
}

TEST_CASE("sequential three-task merge equals batch weighted sum") {
  std::mt19937_64 rng(9);
  Mat p1 = random_mat(12, 3, rng), p2 = random_mat(12, 3, rng),
      p3 = random_mat(12, 3, rng);
  const double a = 0.4;
  HessianEstimate h1 =
      hessian::hessian_from_inputs(p1, {0, 1, 2}, 1, false, nullptr, a, 0);
  HessianEstimate h2 = hessian::hessian_from_inputs(p2, {0, 1, 2}, 1, false,
                                                    nullptr, 1 - a, 1);
  const double w3 = 0.7;
  HessianEstimate h3 =
      hessian::hessian_from_inputs(p3, {0, 1, 2}, 1, false, nullptr, w3, 2);
  HessianEstimate seq =
      hessian::merge_hessians(hessian::merge_hessians(h1, h2), h3);
  Mat batch = (a * h1.average().matrix() + (1 - a) * h2.average().matrix() +
               w3 * h3.average().matrix()) /
              (1.0 + w3);
  CHECK((seq.average().matrix() - batch).norm() <= 1e-10);
}

TEST_CASE("restrict_units keeps the selected blocks plus the bias coordinate") {
  std::mt19937_64 rng(10);
  Mat prev = random_mat(15, 4, rng);
  HessianEstimate h = hessian::hessian_from_inputs(prev, {0, 1, 2, 3}, 1,
                                                   false, nullptr, 1.0, 0);
  HessianEstimate r = hessian::restrict_units(h, {1, 3}, 1);
  REQUIRE(r.dim() == 3);
  const Mat& full = h.average().matrix();
  const Mat& sub = r.average().matrix();
  CHECK(sub(0, 0) == full(1, 1));
  CHECK(sub(0, 1) == full(1, 3));
  CHECK(sub(1, 1) == full(3, 3));
  CHECK(sub(2, 2) == full(4, 4));
  CHECK(sub(0, 2) == full(1, 4));

  // Restriction equals direct estimation on the kept units.
  HessianEstimate direct = hessian::hessian_from_inputs(prev, {1, 3}, 1, false,
                                                        nullptr, 1.0, 0);
  CHECK((direct.average().matrix() - sub).norm() == 0.0);
}

TEST_CASE("empty calibration set is rejected") {
  Network net = trainer::make_mlp(4, {3}, 2, 11, "h");
  Mat empty(0, 4);
  CHECK_THROWS_AS(hessian::layer_hessian(net, 0, {empty, 0}, 1.0), Error);
  CHECK_THROWS_AS(hessian::layer_hessian(net, 5, {Mat::Ones(2, 4), 0}, 1.0),
                  Error);
}

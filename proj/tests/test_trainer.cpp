#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "mtz/data.hpp"
#include "mtz/trainer.hpp"

using namespace mtz;
using trainer::Loss;

namespace {

Mat random_mat(int r, int c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

std::vector<int> random_labels(int n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> v(n);
  for (int& y : v) y = d(rng);
  return v;
}

// Central finite difference of the batch loss with respect to one parameter.
double fd_loss(Network& net, const Mat& x, const std::vector<int>& labels,
               Loss loss, double* param) {
  const double h = 1e-5;
  const double orig = *param;
  *param = orig + h;
  const double up = trainer::batch_loss(forward(net, x).output, labels, loss);
  *param = orig - h;
  const double dn = trainer::batch_loss(forward(net, x).output, labels, loss);
  *param = orig;
  return (up - dn) / (2 * h);
}

void check_gradients(Network& net, const Mat& x, const std::vector<int>& labels,
                     Loss loss, double tol = 1e-4) {
  trainer::NetGradients g = trainer::gradient(net, x, labels, loss);
  for (int l = 0; l < net.num_layers(); ++l) {
    for (int i = 0; i < net.layers[l].weights.rows(); ++i)
      for (int j = 0; j < net.layers[l].weights.cols(); ++j) {
        const double fd =
            fd_loss(net, x, labels, loss, &net.layers[l].weights(i, j));
        const double an = g.dw[l](i, j);
        CHECK(std::abs(an - fd) <= tol * std::max(1.0, std::abs(fd)));
      }
    for (int j = 0; j < net.layers[l].bias.size(); ++j) {
      const double fd = fd_loss(net, x, labels, loss, &net.layers[l].bias[j]);
      CHECK(std::abs(g.db[l][j] - fd) <= tol * std::max(1.0, std::abs(fd)));
    }
  }
}

}  // namespace

TEST_CASE("dense gradients match central finite differences") {
  std::mt19937_64 rng(1);
  Network net = trainer::make_mlp(5, {4, 3}, 3, 7, "g");
  Mat x = random_mat(6, 5, rng);
  auto labels = random_labels(6, 3, rng);
  check_gradients(net, x, labels, Loss::kSoftmaxCrossEntropy);
}

TEST_CASE("sigmoid-per-attribute gradients match finite differences") {
  std::mt19937_64 rng(2);
  Network net = trainer::make_mlp(4, {5}, 3, 8, "g");
  Mat x = random_mat(5, 4, rng);
  auto labels = random_labels(5, 3, rng);
  check_gradients(net, x, labels, Loss::kSigmoidPerAttribute);
}

TEST_CASE("conv gradients match central finite differences") {
  std::mt19937_64 rng(3);
  Network net = trainer::make_cnn(6, 2, 3, 8, 3, 9, "g");
  Mat x = random_mat(4, 36, rng);
  auto labels = random_labels(4, 3, rng);
  check_gradients(net, x, labels, Loss::kSoftmaxCrossEntropy);
}

TEST_CASE("residual gradients match central finite differences") {
  std::mt19937_64 rng(4);
  Network net = trainer::make_residual_mlp(5, 4, 2, 3, 10, "g");
  // Move the zero-initialized biases off the ReLU kinks; finite differences
  // are meaningless across a kink.
  for (auto& ly : net.layers)
    for (int j = 0; j < ly.bias.size(); ++j)
      ly.bias[j] = 0.05 * (1 + (j % 3));
  Mat x = random_mat(4, 5, rng);
  auto labels = random_labels(4, 3, rng);
  check_gradients(net, x, labels, Loss::kSoftmaxCrossEntropy);
}

TEST_CASE("constant output gives zero gradients at the head input") {
  // Zero-weight, zero-bias head on symmetric softmax: gradient with respect
  // to earlier layers vanishes because dLoss/dPre is uniform and weights are
  // zero going back.
  Network net = trainer::make_mlp(3, {4}, 2, 11, "g");
  net.layers[1].weights.setZero();
  net.layers[1].bias.setZero();
  std::mt19937_64 rng(5);
  Mat x = random_mat(4, 3, rng);
  std::vector<int> labels = {0, 1, 0, 1};  // balanced
  trainer::NetGradients g =
      trainer::gradient(net, x, labels, Loss::kSoftmaxCrossEntropy);
  CHECK(g.dw[0].norm() == 0.0);
  CHECK(g.db[0].norm() == 0.0);
}

TEST_CASE("masked weights get exactly zero gradient and stay zero in training") {
  std::mt19937_64 rng(6);
  Network net = trainer::make_mlp(4, {5}, 3, 12, "g");
  Mat mask = Mat::Ones(4, 5);
  mask(1, 2) = 0;
  mask(3, 0) = 0;
  net.layers[0].mask = mask;
  net.layers[0].apply_mask();
  Mat x = random_mat(5, 4, rng);
  auto labels = random_labels(5, 3, rng);
  trainer::NetGradients g =
      trainer::gradient(net, x, labels, Loss::kSoftmaxCrossEntropy);
  CHECK(g.dw[0](1, 2) == 0.0);
  CHECK(g.dw[0](3, 0) == 0.0);

  data::Dataset ds;
  ds.inputs = (random_mat(64, 4, rng).array() * 0.5 + 0.5).matrix();
  ds.labels = random_labels(64, 3, rng);
  ds.num_classes = 3;
  trainer::TrainConfig cfg;
  cfg.iterations = 50;
  trainer::train(net, ds, cfg);
  CHECK(net.layers[0].weights(1, 2) == 0.0);
  CHECK(net.layers[0].weights(3, 0) == 0.0);
}

TEST_CASE("1-neuron linear regression analogue converges") {
  // y = 2x learned through a two-class margin: class 1 iff 2x - y0 > y1.
  // Simplest convex check per the contract: single linear unit fit by
  // sigmoid-per-attribute on a separable threshold task converges.
  data::Dataset ds;
  const int n = 256;
  ds.inputs = Mat(n, 1);
  ds.labels.resize(n);
  ds.num_classes = 2;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < n; ++i) {
    const double x = u(rng);
    ds.inputs(i, 0) = x;
    ds.labels[i] = x > 0.5 ? 1 : 0;
  }
  Network net = trainer::make_mlp(1, {}, 2, 13, "lin");
  trainer::TrainConfig cfg;
  cfg.learning_rate = 0.5;
  cfg.iterations = 4000;
  cfg.batch_size = 32;
  trainer::train(net, ds, cfg);
  CHECK(data::evaluate(net, ds) <= 0.02);
}

TEST_CASE("zero iterations leaves the network unchanged") {
  Network net = trainer::make_mlp(4, {3}, 2, 14, "z");
  Network before = net;
  data::Dataset ds;
  ds.inputs = Mat::Ones(4, 4) * 0.5;
  ds.labels = {0, 1, 0, 1};
  ds.num_classes = 2;
  trainer::TrainConfig cfg;
  cfg.iterations = 0;
  trainer::train(net, ds, cfg);
  for (int l = 0; l < net.num_layers(); ++l)
    CHECK((net.layers[l].weights - before.layers[l].weights).norm() == 0.0);
}

TEST_CASE("training is deterministic given the seed") {
  data::SyntheticTaskSpec spec;
  spec.input_dim = 8;
  spec.num_classes = 3;
  spec.train_samples = 400;
  spec.test_samples = 50;
  data::TaskData td = data::gen_task(spec);
  trainer::TrainConfig cfg;
  cfg.iterations = 200;
  cfg.seed = 99;
  Network n1 = trainer::make_mlp(8, {6}, 3, 15, "d");
  Network n2 = trainer::make_mlp(8, {6}, 3, 15, "d");
  trainer::train(n1, td.train, cfg);
  trainer::train(n2, td.train, cfg);
  for (int l = 0; l < n1.num_layers(); ++l)
    CHECK((n1.layers[l].weights - n2.layers[l].weights).norm() == 0.0);
}

TEST_CASE("builders are seeded He initializations") {
  Network a = trainer::make_mlp(100, {80}, 10, 1, "a");
  Network b = trainer::make_mlp(100, {80}, 10, 1, "a");
  Network c = trainer::make_mlp(100, {80}, 10, 2, "a");
  CHECK((a.layers[0].weights - b.layers[0].weights).norm() == 0.0);
  CHECK((a.layers[0].weights - c.layers[0].weights).norm() > 0.0);
  // Variance roughly 2 / fan_in.
  const double var = a.layers[0].weights.array().square().mean();
  CHECK(var == doctest::Approx(2.0 / 100).epsilon(0.2));
  CHECK(a.layers[0].bias.norm() == 0.0);
}

TEST_CASE("zipped gradient: only the task's connections receive gradient") {
  std::mt19937_64 rng(8);
  Network a = trainer::make_mlp(5, {4, 3}, 2, 16, "a");
  Network b = trainer::make_mlp(5, {4, 3}, 2, 17, "b");
  ZippedModel zm = embed({&a, &b});
  Mat x = random_mat(6, 5, rng);
  auto labels = random_labels(6, 2, rng);
  trainer::ZippedGradients g =
      trainer::gradient_task(zm, 0, x, labels, Loss::kSoftmaxCrossEntropy);
  for (size_t l = 0; l < zm.hidden.size(); ++l) {
    const SharedLayer& sl = zm.hidden[l];
    for (int u = 0; u < sl.n_units(); ++u)
      if (!has_task(sl.units[u], 0)) {
        CHECK(g.dw_hidden[l].col(u).norm() == 0.0);
        CHECK(g.db_hidden[l][u] == 0.0);
      }
  }
}

TEST_CASE("zipped gradient matches the plain-network gradient at zero sharing") {
  std::mt19937_64 rng(9);
  Network a = trainer::make_mlp(5, {4, 3}, 2, 18, "a");
  Network b = trainer::make_mlp(5, {4, 3}, 2, 19, "b");
  ZippedModel zm = embed({&a, &b});
  Mat x = random_mat(6, 5, rng);
  auto labels = random_labels(6, 2, rng);
  trainer::NetGradients ga =
      trainer::gradient(a, x, labels, Loss::kSoftmaxCrossEntropy);
  trainer::ZippedGradients gz =
      trainer::gradient_task(zm, 0, x, labels, Loss::kSoftmaxCrossEntropy);
  // Task a's units sit in the first columns at embed time.
  for (size_t l = 0; l < zm.hidden.size(); ++l) {
    const auto units = zm.hidden[l].task_units(0);
    const auto rows = zm.hidden[l].task_in_rows(0);
    for (size_t uj = 0; uj < units.size(); ++uj)
      for (size_t ri = 0; ri < rows.size(); ++ri)
        CHECK(gz.dw_hidden[l](rows[ri], units[uj]) ==
              doctest::Approx(ga.dw[l](static_cast<int>(ri), static_cast<int>(uj)))
                  .epsilon(1e-12));
  }
  CHECK((gz.dw_head - ga.dw.back()).norm() <= 1e-12);
}

TEST_CASE("joint retraining weights shared gradients by alpha") {
  // Finite-difference check of the alpha-weighted joint loss with respect to
  // a shared weight after a full self-merge-like construction: use embed and
  // manually share nothing; instead verify the documented combination rule
  // on the update of retrain_joint with batch == full data and one step.
  std::mt19937_64 rng(10);
  Network a = trainer::make_mlp(4, {3}, 2, 20, "a");
  Network b = trainer::make_mlp(4, {3}, 2, 21, "b");
  ZippedModel zm = embed({&a, &b});

  data::Dataset da, db;
  da.inputs = (random_mat(16, 4, rng).array() * 0.5 + 0.5).matrix();
  da.labels = random_labels(16, 2, rng);
  da.num_classes = 2;
  db.inputs = (random_mat(16, 4, rng).array() * 0.5 + 0.5).matrix();
  db.labels = random_labels(16, 2, rng);
  db.num_classes = 2;

  const double alpha = 0.3;
  trainer::ZippedGradients g0 = trainer::gradient_task(
      zm, 0, da.inputs, da.labels, Loss::kSoftmaxCrossEntropy);
  trainer::ZippedGradients g1 = trainer::gradient_task(
      zm, 1, db.inputs, db.labels, Loss::kSoftmaxCrossEntropy);
  Mat expected_step =
      alpha * g0.dw_hidden[0] + (1 - alpha) * g1.dw_hidden[0];

  ZippedModel zc = zm;
  trainer::TrainConfig cfg;
  cfg.iterations = 1;
  cfg.batch_size = 16;  // whole set: first shuffled epoch batch == full data
  cfg.learning_rate = 0.01;
  trainer::retrain_joint(zc, {&da, &db}, cfg, {alpha, 1 - alpha});
  Mat actual_step = (zm.hidden[0].weights - zc.hidden[0].weights) / 0.01;
  CHECK((actual_step - expected_step).norm() <=
        1e-8 * std::max(1.0, expected_step.norm()));
}

TEST_CASE("retrain_joint zero iterations is a no-op and preserves masks") {
  Network a = trainer::make_mlp(4, {3}, 2, 22, "a");
  Network b = trainer::make_mlp(4, {3}, 2, 23, "b");
  ZippedModel zm = embed({&a, &b});
  ZippedModel before = zm;
  data::Dataset ds;
  ds.inputs = Mat::Ones(8, 4) * 0.25;
  ds.labels = {0, 1, 0, 1, 0, 1, 0, 1};
  ds.num_classes = 2;
  trainer::TrainConfig cfg;
  cfg.iterations = 0;
  trainer::retrain_joint(zm, {&ds, &ds}, cfg, {0.5, 0.5});
  for (size_t l = 0; l < zm.hidden.size(); ++l)
    CHECK((zm.hidden[l].weights - before.hidden[l].weights).norm() == 0.0);
}

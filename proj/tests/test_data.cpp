#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "mtz/data.hpp"
#include "mtz/trainer.hpp"

using namespace mtz;

namespace {

// Hand-written big-endian IDX fixture: 3 images of 2x2 pixels + labels.
void write_idx_fixture(const std::string& images, const std::string& labels,
                       bool truncate_images = false) {
  const unsigned char img[] = {
      0x00, 0x00, 0x08, 0x03,              // magic 0x00000803
      0x00, 0x00, 0x00, 0x03,              // 3 images
      0x00, 0x00, 0x00, 0x02,              // rows
      0x00, 0x00, 0x00, 0x02,              // cols
      0,   255, 51,  102,                  // image 0
      255, 0,   255, 0,                    // image 1
      10,  20,  30,  40,                   // image 2
  };
  const unsigned char lab[] = {
      0x00, 0x00, 0x08, 0x01, 0x00, 0x00, 0x00, 0x03, 1, 0, 2,
  };
  std::ofstream fi(images, std::ios::binary);
  fi.write(reinterpret_cast<const char*>(img),
           truncate_images ? sizeof(img) - 3 : sizeof(img));
  std::ofstream fl(labels, std::ios::binary);
  fl.write(reinterpret_cast<const char*>(lab), sizeof(lab));
}

}  // namespace

TEST_CASE("load_idx parses a hand-built fixture") {
  write_idx_fixture("idx_img", "idx_lab");
  data::Dataset ds = data::load_idx("idx_img", "idx_lab");
  CHECK(ds.size() == 3);
  CHECK(ds.dim() == 4);
  CHECK(ds.inputs(0, 0) == 0.0);
  CHECK(ds.inputs(0, 1) == doctest::Approx(1.0));
  CHECK(ds.inputs(0, 2) == doctest::Approx(51.0 / 255.0));
  CHECK(ds.labels[0] == 1);
  CHECK(ds.labels[2] == 2);
  std::remove("idx_img");
  std::remove("idx_lab");
}

TEST_CASE("load_idx error cases") {
  write_idx_fixture("idx_img", "idx_lab", /*truncate_images=*/true);
  CHECK_THROWS_AS(data::load_idx("idx_img", "idx_lab"), IoError);
  // Magic mismatch: labels file used as images.
  write_idx_fixture("idx_img", "idx_lab");
  CHECK_THROWS_AS(data::load_idx("idx_lab", "idx_img"), IoError);
  CHECK_THROWS_AS(data::load_idx("idx_missing", "idx_lab"), IoError);
  std::remove("idx_img");
  std::remove("idx_lab");
}

TEST_CASE("idx round trip preserves bytes") {
  write_idx_fixture("idx_img", "idx_lab");
  data::Dataset ds = data::load_idx("idx_img", "idx_lab");
  data::save_idx(ds, "idx_img2", "idx_lab2");
  data::Dataset ds2 = data::load_idx("idx_img2", "idx_lab2");
  CHECK((ds.inputs - ds2.inputs).norm() == 0.0);
  CHECK(ds.labels == ds2.labels);
  for (const char* f : {"idx_img", "idx_lab", "idx_img2", "idx_lab2"})
    std::remove(f);
}

TEST_CASE("synthetic tasks are deterministic") {
  data::SyntheticTaskSpec spec;
  spec.seed = 77;
  spec.input_dim = 16;
  spec.train_samples = 200;
  spec.test_samples = 50;
  data::TaskData a = data::gen_task(spec);
  data::TaskData b = data::gen_task(spec);
  CHECK((a.train.inputs - b.train.inputs).norm() == 0.0);
  CHECK(a.train.labels == b.train.labels);
  CHECK((a.test.inputs - b.test.inputs).norm() == 0.0);
  spec.seed = 78;
  data::TaskData c = data::gen_task(spec);
  CHECK((a.train.inputs - c.train.inputs).norm() > 0.0);
}

TEST_CASE("inputs normalized and labels in range") {
  data::SyntheticTaskSpec spec;
  spec.input_dim = 25;
  spec.image_like = true;
  spec.train_samples = 300;
  spec.test_samples = 50;
  data::TaskData td = data::gen_task(spec);
  CHECK(td.train.inputs.minCoeff() >= 0.0);
  CHECK(td.train.inputs.maxCoeff() <= 1.0);
  for (int y : td.train.labels) {
    CHECK(y >= 0);
    CHECK(y < td.train.num_classes);
  }
}

TEST_CASE("shared trunk makes correlated, learnable tasks") {
  data::SyntheticTaskSpec spec;
  spec.seed = 5;
  spec.input_dim = 16;
  spec.num_classes = 4;
  spec.trunk_width = 12;
  spec.train_samples = 3000;
  spec.test_samples = 500;
  spec.margin = 0.6;
  data::TaskData td = data::gen_task(spec);
  Network net = trainer::make_mlp(16, {24}, 4, 3, "fit");
  trainer::TrainConfig cfg;
  cfg.learning_rate = 0.2;
  cfg.batch_size = 32;
  cfg.iterations = 3000;
  trainer::train(net, td.train, cfg);
  // Trainability: the task is a real function of the inputs.
  CHECK(data::evaluate(net, td.train) <= 0.05);
}

TEST_CASE("parse_task_spec") {
  data::SyntheticTaskSpec s = data::parse_task_spec(
      "seed=9,dim=49,classes=5,trunk=20,task=2,train=100,test=10,noise=0.1,"
      "image=1,margin=0.4");
  CHECK(s.seed == 9);
  CHECK(s.input_dim == 49);
  CHECK(s.num_classes == 5);
  CHECK(s.trunk_width == 20);
  CHECK(s.task_index == 2);
  CHECK(s.train_samples == 100);
  CHECK(s.test_samples == 10);
  CHECK(s.label_noise == doctest::Approx(0.1));
  CHECK(s.image_like);
  CHECK(s.margin == doctest::Approx(0.4));
  CHECK_THROWS_AS(data::parse_task_spec("bogus=1"), Error);
}

TEST_CASE("evaluate basics") {
  // Perfect predictor: weights picked so argmax equals the label.
  data::Dataset ds;
  ds.inputs = Mat::Zero(10, 3);
  ds.num_classes = 10;
  for (int i = 0; i < 10; ++i) {
    ds.inputs(i, 0) = i;
    ds.labels.push_back(i);
  }
  Mat outputs = Mat::Zero(10, 10);
  for (int i = 0; i < 10; ++i) outputs(i, i) = 1.0;
  CHECK(data::error_rate(outputs, ds.labels) == 0.0);
  // Constant predictor on a balanced 10-class set errs 90%.
  Mat constant = Mat::Zero(10, 10);
  constant.col(0).setOnes();
  CHECK(data::error_rate(constant, ds.labels) == doctest::Approx(0.9));
}

TEST_CASE("error rate matches hand-computed confusion on a 10-sample fixture") {
  // Outputs engineered so exactly samples 2, 5, 9 are wrong.
  std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  Mat outputs = Mat::Zero(10, 3);
  for (int i = 0; i < 10; ++i) outputs(i, labels[i]) = 1.0;
  outputs(2, 2) = 0;
  outputs(2, 0) = 2.0;
  outputs(5, 2) = 0;
  outputs(5, 1) = 2.0;
  outputs(9, 0) = 0;
  outputs(9, 2) = 2.0;
  CHECK(data::error_rate(outputs, labels) == doctest::Approx(0.3));
}

TEST_CASE("calibration inputs come from the training split, deterministically") {
  data::SyntheticTaskSpec spec;
  spec.input_dim = 8;
  spec.train_samples = 100;
  spec.test_samples = 10;
  data::TaskData td = data::gen_task(spec);
  Mat c1 = data::calibration_inputs(td.train, 40, 123);
  Mat c2 = data::calibration_inputs(td.train, 40, 123);
  CHECK((c1 - c2).norm() == 0.0);
  CHECK(c1.rows() == 40);
  // Every calibration row appears in the training inputs.
  for (int i = 0; i < 5; ++i) {
    bool found = false;
    for (int j = 0; j < td.train.inputs.rows() && !found; ++j)
      found = (c1.row(i) - td.train.inputs.row(j)).norm() == 0.0;
    CHECK(found);
  }
}

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mtz/model.hpp"

namespace mtz::data {

struct Dataset {
  Mat inputs;               // n x input_dim, values in [0,1]
  std::vector<int> labels;  // class index per sample
  int num_classes = 0;

  int size() const { return static_cast<int>(inputs.rows()); }
  int dim() const { return static_cast<int>(inputs.cols()); }
  void validate() const;
};

// IDX (MNIST) files: big-endian dims, magic 0x00000803 images / 0x00000801
// labels; pixels scaled by 1/255.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path);

/// Deterministic synthetic classification tasks. Tasks built from the same
/// spec except task_index share one teacher trunk with task-specific heads,
/// which makes them genuinely correlated.
struct SyntheticTaskSpec {
  uint64_t seed = 1;
  int input_dim = 64;
  int num_classes = 10;
  int trunk_width = 48;
  int task_index = 0;     // selects the head off the shared trunk
  int train_samples = 8000;
  int test_samples = 2000;
  double label_noise = 0.0;
  bool image_like = false;  // smooth the inputs as input_dim = side*side images
  double margin = 0.0;      // reject samples whose top-2 teacher logit gap is
                            // below this, giving cleanly separable classes
};

struct TaskData {
  Dataset train;
  Dataset test;
};

TaskData gen_task(const SyntheticTaskSpec& spec);

// Parses "seed=1,dim=64,classes=10,trunk=48,task=0,train=8000,test=2000,
// noise=0.0,image=0,margin=0.0". Unknown keys are an error.
SyntheticTaskSpec parse_task_spec(const std::string& text);

// Fraction of misclassified samples under the argmax rule.
double evaluate(const Network& net, const Dataset& ds);
double evaluate(const ZippedModel& zm, int task, const Dataset& ds);
double error_rate(const Mat& outputs, const std::vector<int>& labels);

// Calibration inputs drawn from the training split with a fixed seed.
Mat calibration_inputs(const Dataset& train, int count, uint64_t seed);

}  // namespace mtz::data

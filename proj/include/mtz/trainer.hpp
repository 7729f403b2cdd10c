#pragma once

#include <iosfwd>
#include <vector>

#include "mtz/data.hpp"
#include "mtz/model.hpp"

namespace mtz::trainer {

enum class Loss : uint8_t { kSoftmaxCrossEntropy, kSigmoidPerAttribute };

struct TrainConfig {
  double learning_rate = 0.1;
  int batch_size = 64;
  int iterations = 0;
  uint64_t seed = 1;
  Loss loss = Loss::kSoftmaxCrossEntropy;
  int log_every = 0;                       // 0 disables the training log
  std::ostream* log = nullptr;             // defaults to stdout when logging
  const data::Dataset* eval_data = nullptr;  // adds eval error to log lines
  void validate() const;
};

/// Per-zipped-layer retraining budget; entry l is the iteration count run
/// right after layer l is zipped.
struct RetrainSchedule {
  std::vector<int> per_layer;
  int layer_iterations(int l) const {
    if (l < 0 || l >= static_cast<int>(per_layer.size())) return 0;
    return per_layer[l];
  }
  void validate() const;
};

// ---------------------------------------------------------------------------
// Plain networks
// ---------------------------------------------------------------------------

struct NetGradients {
  std::vector<Mat> dw;
  std::vector<Vec> db;
  double loss = 0.0;
};

// Gradients of the batch loss for every unmasked weight; masked positions get
// exactly zero gradient.
NetGradients gradient(const Network& net, const Mat& x,
                      const std::vector<int>& labels, Loss loss);

double batch_loss(const Mat& output, const std::vector<int>& labels, Loss loss);

void train(Network& net, const data::Dataset& data, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Zipped models
// ---------------------------------------------------------------------------

struct ZippedGradients {
  std::vector<Mat> dw_hidden;
  std::vector<Vec> db_hidden;
  Mat dw_head;
  Vec db_head;
  double loss = 0.0;
};

// Gradients of one task's batch loss with respect to the joint parameters.
// Only connections visible to the task receive nonzero entries.
ZippedGradients gradient_task(const ZippedModel& zm, int task, const Mat& x,
                              const std::vector<int>& labels, Loss loss);

/// Joint SGD on all tasks: every iteration draws one batch per task and
/// applies the loss-weighted gradient sum (weights alpha, 1-alpha for two
/// tasks). Updates all blocks, shared and task-specific; masks preserved.
void retrain_joint(ZippedModel& zm,
                   const std::vector<const data::Dataset*>& task_data,
                   const TrainConfig& cfg,
                   const std::vector<double>& task_weights);

// ---------------------------------------------------------------------------
// Architecture builders (seeded He initialization: N(0, 2/fan_in))
// ---------------------------------------------------------------------------

Network make_mlp(int input_dim, const std::vector<int>& hidden,
                 int num_classes, uint64_t seed, const std::string& task_id);
// conv(k5 s2 p2) -> conv(k5 s2 p2) -> fc -> head, for square gray images.
Network make_cnn(int side, int c1, int c2, int fc, int num_classes,
                 uint64_t seed, const std::string& task_id);
// dense stem then `blocks` residual blocks of width `width`, then head.
Network make_residual_mlp(int input_dim, int width, int blocks,
                          int num_classes, uint64_t seed,
                          const std::string& task_id);

}  // namespace mtz::trainer

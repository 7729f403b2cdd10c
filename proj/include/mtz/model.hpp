#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mtz/linalg.hpp"

namespace mtz {

enum class LayerKind : uint8_t { kDense, kConv, kResidualEntry, kResidualExit };
enum class Activation : uint8_t { kRelu, kNone };

struct ConvMeta {
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  int in_h = 0;
  int in_w = 0;
  int in_channels = 0;
  int out_channels = 0;

  int out_h() const { return (in_h + 2 * padding - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * padding - kernel) / stride + 1; }
  int patch_dim() const { return kernel * kernel * in_channels; }
  int positions() const { return out_h() * out_w(); }
};

/// One layer. Weight columns are the incoming weight vectors of the layer's
/// units: dense weights are N_{in} x N_out, conv weights are
/// (k*k*C_in) x C_out with patch coordinates ordered channel-major
/// (channel slowest, then kernel row, then kernel col). Feature maps flatten
/// to vectors in (channel, row, col) order.
struct Layer {
  LayerKind kind = LayerKind::kDense;
  Mat weights;
  Vec bias;
  std::optional<Mat> mask;  // 0/1, same shape as weights
  Activation act = Activation::kRelu;
  std::optional<ConvMeta> conv;

  int in_dim() const;   // flattened input vector length
  int out_dim() const;  // flattened output vector length
  int units() const { return static_cast<int>(weights.cols()); }
  void apply_mask();
  void validate() const;
};

struct Network {
  std::vector<Layer> layers;
  int input_dim = 0;
  std::string task_id;

  int num_layers() const { return static_cast<int>(layers.size()); }
  const Layer& output_layer() const { return layers.back(); }
  int64_t param_count() const;
  void validate() const;
};

/// Forward pass results. Rows of every matrix are samples. pre[l] holds the
/// affine output of layer l, post[l] the activated output (with the residual
/// shortcut already added for exit layers). output is pre.back().
struct ForwardTrace {
  std::vector<Mat> pre;
  std::vector<Mat> post;
  Mat output;
};

ForwardTrace forward(const Network& net, const Mat& x);
Vec forward_one(const Network& net, const Vec& x);

// Layer kernels shared between Network and ZippedModel paths so that a
// zero-sharing embedding reproduces Network outputs bit for bit.
Mat layer_affine(const Layer& layer, const Mat& x);
Mat im2col(const Mat& x, const ConvMeta& cm);  // rows: sample-major positions
Mat apply_activation(Activation act, Mat y);

// ---------------------------------------------------------------------------
// Zipped multi-task model
// ---------------------------------------------------------------------------

using TaskSet = uint32_t;  // bit t set => task t uses the unit

inline bool has_task(TaskSet s, int t) { return (s >> t) & 1u; }
inline TaskSet all_tasks(int n) { return n >= 32 ? ~0u : ((1u << n) - 1u); }

/// A zipped layer. Units are owned by one or more tasks; a single weight
/// matrix holds every connection and per-task inference gathers the rows and
/// columns belonging to that task. A connection from input unit v to unit u
/// exists iff their task sets intersect. Shared units keep one merged weight
/// vector over the inputs shared by all their tasks, and per-task cross
/// weights from task-specific inputs, which is exactly the five-way block
/// partition when two tasks are present (see blocks() below).
struct SharedLayer {
  LayerKind kind = LayerKind::kDense;
  Activation act = Activation::kRelu;

  std::vector<TaskSet> in_units;  // task membership of each input unit
  int in_mult = 1;                // weight rows per input unit
  std::vector<TaskSet> units;     // task membership of each unit

  Mat weights;  // (in_units.size() * in_mult) x units.size()
  Vec bias;
  std::optional<Mat> mask;

  std::optional<ConvMeta> conv;  // spatial geometry; channel counts are
                                 // per-task (derived from unit sets)

  // origin[t][k] = original-network unit index behind the k-th unit of task
  // t's view. Empty vector for tasks the layer does not serve.
  std::vector<std::vector<int>> origin;

  // Residual exit layers only: shortcut_map[t][k] = position within the block
  // input (task view) added onto the k-th output unit of task t's view.
  std::vector<std::vector<int>> shortcut_map;

  int n_units() const { return static_cast<int>(units.size()); }
  int n_in_units() const { return static_cast<int>(in_units.size()); }

  std::vector<int> task_units(int t) const;     // joint indices, joint order
  std::vector<int> task_in_units(int t) const;  // same for inputs
  std::vector<int> task_in_rows(int t) const;   // expanded by in_mult

  Mat effective_weights(int t) const;
  Vec effective_bias(int t) const;
  std::optional<Mat> effective_mask(int t) const;
  ConvMeta effective_conv(int t) const;

  int64_t param_count() const { return weights.size() + bias.size(); }
  void validate() const;
};

/// Fig. 1(b)-style view of a two-task layer (or of one task pair inside a
/// wider model): shared block, per-task cross and specific blocks.
struct LayerBlocks {
  Mat w_shared;            // Ntilde_{l-1}*m x Ntilde_l
  Vec b_shared;
  Mat w_cross_a, w_cross_b;  // task-specific inputs -> shared units
  Mat w_hat_a, w_hat_b;      // all task inputs -> task-specific units
  Vec b_hat_a, b_hat_b;
};

struct ZippedModel {
  int input_dim = 0;  // joint input width (max over tasks)
  std::vector<std::string> task_ids;
  std::vector<int> task_input_dims;
  std::vector<SharedLayer> hidden;  // layers 1..L-1
  std::vector<Layer> heads;         // layer L, one per task, never merged

  int num_tasks() const { return static_cast<int>(task_ids.size()); }
  int task_index(const std::string& id) const;
  int64_t param_count() const;
  void validate() const;
};

/// Embeds independent networks as a zipped model with zero sharing. Per-task
/// inference of the result reproduces each original bit for bit.
ZippedModel embed(const std::vector<const Network*>& nets);

/// Appends one more network as a new, fully task-specific task.
void embed_additional(ZippedModel& zm, const Network& net);

ForwardTrace forward_task(const ZippedModel& zm, int task, const Mat& x);
Vec infer_task(const ZippedModel& zm, const std::string& task, const Vec& x);

LayerBlocks layer_blocks(const SharedLayer& sl, int task_a, int task_b);

}  // namespace mtz

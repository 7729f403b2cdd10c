#pragma once

#include <iosfwd>
#include <optional>
#include <utility>
#include <vector>

#include "mtz/hessian.hpp"
#include "mtz/trainer.hpp"

namespace mtz::zipper {

using hessian::HessianEstimate;

struct MergePlan {
  struct LayerTarget {
    std::optional<int> share_count;    // Ntilde_l
    std::optional<double> threshold;   // epsilon_l; setting both is an error
  };
  // One entry per hidden layer; an empty vector means full sharing
  // everywhere (share_count = min of the candidate counts).
  std::vector<LayerTarget> layers;
  double alpha = 0.5;
  trainer::RetrainSchedule retrain;      // iterations per zipped layer
  enum class Matching { kGreedy, kExhaustive };
  Matching matching = Matching::kGreedy;

  int calib_samples = 2000;
  uint64_t calib_seed = 0x5eedcafeULL;
  trainer::TrainConfig retrain_cfg;  // lr / batch / loss / seed; iteration
                                     // counts come from `retrain`

  LayerTarget target_for(int layer) const;
  void validate() const;
};

// ---------------------------------------------------------------------------
// Merge math (Lagrange-optimal neuron pair merging)
// ---------------------------------------------------------------------------

/// Minimal weighted layer-error increase from merging two units:
/// 1/2 (wa-wb)^T ((Ha^-1 + Hb^-1))^-1 (wa-wb), realized through solves
/// against the damped weighted Hessians.
double functional_difference(const Vec& wa, const Vec& wb,
                             const HessianEstimate& ha,
                             const HessianEstimate& hb);

struct OptimalUpdate {
  Vec delta_a;
  Vec delta_b;
  Vec merged;   // wa + delta_a = wb + delta_b
  double cost;  // equals functional_difference
};

OptimalUpdate optimal_updates(const Vec& wa, const Vec& wb,
                              const HessianEstimate& ha,
                              const HessianEstimate& hb);

/// All-pairs functional differences. Columns of wa/wb are the candidate
/// units' incoming weight vectors (shared coordinates plus bias).
Mat score_matrix(const Mat& wa, const Mat& wb, const HessianEstimate& ha,
                 const HessianEstimate& hb);

/// Disjoint pair selection. Greedy: ascending-d scan taking a pair iff both
/// endpoints are unused, until `count` pairs or d >= threshold. Exhaustive:
/// minimum-cost assignment (small layers), truncated to the `count` best.
std::vector<std::pair<int, int>> select_pairs(
    const Mat& scores, std::optional<int> count,
    std::optional<double> threshold, MergePlan::Matching matching);

/// Sparse merge rule: masks are the nonzero patterns; the merged unit keeps
/// whichever mask has more ones (tie: elementwise OR) and the merged weights
/// are zeroed outside it.
struct SparseMerge {
  Vec merged;
  Vec mask;
};
SparseMerge merge_sparse(const Vec& wa, const Vec& wb, const Vec& mask_a,
                         const Vec& mask_b, const HessianEstimate& ha,
                         const HessianEstimate& hb);

// ---------------------------------------------------------------------------
// Layer zipping and the full pipeline
// ---------------------------------------------------------------------------

struct LayerReport {
  int layer = 0;
  int shared = 0;
  int cand_left = 0, cand_right = 0;
  double d_min = 0, d_median = 0, d_max = 0;
  double delta_e = 0;  // sum of selected d values
  bool degenerate = false;
  int retrain_iters = 0;
  std::vector<double> err_pre, err_post;  // per task, when test data given
};

struct ZipReport {
  std::vector<LayerReport> layers;
  int64_t params_original = 0;
  int64_t params_zipped = 0;
  std::vector<double> final_errors;
  void write(std::ostream& out) const;
};

struct ZipTask {
  const Network* net = nullptr;         // required for networks being zipped
  const data::Dataset* train = nullptr;  // calibration + retraining source
  const data::Dataset* test = nullptr;   // optional, report errors
};

struct ZipResult {
  ZippedModel model;
  // Joint layer-input statistics kept for sequential multi-model zipping:
  // per hidden layer, the merged estimate and the layer-(l-1) in-unit
  // indices (current joint ids) its unit coordinates refer to.
  std::vector<HessianEstimate> joint_hessians;
  std::vector<std::vector<int>> hessian_in_units;
  ZipReport report;
};

/// Algorithm: zips tasks[0] and tasks[1] layer by layer (Hessians, scoring,
/// selection, five-way reorganization, next-layer permutation, retraining),
/// then sequentially adds any further tasks reusing the stored joint
/// Hessians.
ZipResult zip_models(const std::vector<ZipTask>& tasks, const MergePlan& plan);

/// Adds one network to an existing zip result. existing_data supplies the
/// retraining datasets for the tasks already in the model.
ZipResult zip_additional(ZipResult joint,
                         const std::vector<const data::Dataset*>& existing_data,
                         const ZipTask& incoming, const MergePlan& plan);

/// Zips one layer in place given selected pairs and merged weight columns
/// (shared coordinates + bias). Returns, per task, the permutation mapping
/// new view positions to old view positions (identity for untouched tasks).
/// Reorders the next layer's rows (or the task heads) to keep connections.
std::vector<linalg::Permutation> zip_layer(
    ZippedModel& zm, int layer, TaskSet left_set, int new_task,
    const std::vector<std::pair<int, int>>& pairs, const Mat& merged);

/// Accumulated output drift (1/sqrt(n)) sum ||zipped - original output||.
double output_drift(const Network& original, const ZippedModel& zm, int task,
                    const Mat& calib_inputs);

}  // namespace mtz::zipper

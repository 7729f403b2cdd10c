#pragma once

#include <vector>

#include "mtz/model.hpp"

namespace mtz::hessian {

/// Layer-wise curvature estimate over a layer's shared-input coordinates,
/// augmented with a constant-1 coordinate so biases merge like weights.
/// matrix() is the plain sample average (1/n) sum x x^T; weighted() applies
/// the task balance weight.
class HessianEstimate {
 public:
  HessianEstimate(linalg::SpdMatrix avg, int64_t n_samples, double weight,
                  int task);

  const linalg::SpdMatrix& average() const { return avg_; }
  linalg::SpdMatrix weighted() const;
  int dim() const { return avg_.dim(); }
  int64_t n_samples() const { return n_; }
  double alpha_weight() const { return weight_; }
  int task() const { return task_; }

 private:
  linalg::SpdMatrix avg_;
  int64_t n_;
  double weight_;
  int task_;
};

struct CalibrationSet {
  Mat inputs;  // rows are samples
  int task = 0;
  void validate(int expected_dim) const;
};

/// Estimate for hidden layer l (0-based index into the network's layers /
/// the zipped model's hidden list) from one forward pass over the
/// calibration inputs. The gathered vectors are the layer's input
/// coordinates restricted to `shared_units` (unit indices of layer l-1's
/// output; empty vector means all units), expanded to patches for conv
/// layers and augmented with the constant 1.
HessianEstimate layer_hessian(const Network& net, int layer,
                              const CalibrationSet& calib, double weight);
HessianEstimate layer_hessian(const Network& net, int layer,
                              const CalibrationSet& calib, double weight,
                              const std::vector<int>& shared_units);

HessianEstimate layer_hessian(const ZippedModel& zm, int task, int layer,
                              const CalibrationSet& calib, double weight,
                              const std::vector<int>& shared_units);

/// Accumulates the (already activated) layer inputs for layer `layer` given
/// the previous layer's outputs in `prev_out` (rows = samples). Exposed for
/// the zipper, which batches forwards itself.
HessianEstimate hessian_from_inputs(const Mat& prev_out,
                                    const std::vector<int>& unit_indices,
                                    int unit_size, bool conv,
                                    const ConvMeta* conv_meta, double weight,
                                    int task);

/// Weighted combination for sequential multi-model zipping; weights are
/// renormalized so the result carries total weight 1.
HessianEstimate merge_hessians(const HessianEstimate& existing,
                               const HessianEstimate& incoming);

/// Principal submatrix restriction: keeps the listed shared-unit positions
/// (block coordinates) plus the trailing bias coordinate.
HessianEstimate restrict_units(const HessianEstimate& h,
                               const std::vector<int>& keep_units,
                               int unit_size);

}  // namespace mtz::hessian

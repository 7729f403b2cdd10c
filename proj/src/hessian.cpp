#include "mtz/hessian.hpp"

#include <numeric>

namespace mtz::hessian {

HessianEstimate::HessianEstimate(linalg::SpdMatrix avg, int64_t n_samples,
                                 double weight, int task)
    : avg_(std::move(avg)), n_(n_samples), weight_(weight), task_(task) {
  if (n_ <= 0) throw Error("HessianEstimate: empty calibration set");
  if (weight_ < 0) throw Error("HessianEstimate: negative weight");
}

linalg::SpdMatrix HessianEstimate::weighted() const {
  linalg::SpdMatrix m = avg_;
  m.scale(weight_);
  return m;
}

void CalibrationSet::validate(int expected_dim) const {
  if (inputs.rows() == 0) throw Error("CalibrationSet: empty");
  if (inputs.cols() != expected_dim)
    throw DimensionError("CalibrationSet: input dim mismatch");
}

HessianEstimate hessian_from_inputs(const Mat& prev_out,
                                    const std::vector<int>& unit_indices,
                                    int unit_size, bool conv,
                                    const ConvMeta* conv_meta, double weight,
                                    int task) {
  const int n = static_cast<int>(prev_out.rows());
  if (n == 0) throw Error("hessian_from_inputs: no samples");
  const int k = static_cast<int>(unit_indices.size());

  // Gather the selected units' coordinates, unit-major.
  Mat sel(n, k * unit_size);
  for (int u = 0; u < k; ++u)
    sel.middleCols(u * unit_size, unit_size) =
        prev_out.middleCols(unit_indices[u] * unit_size, unit_size);

  Mat rows;  // one row per accumulated sample vector, bias column appended
  if (conv) {
    ConvMeta cm = *conv_meta;
    cm.in_channels = k;
    rows = Mat::Ones(static_cast<int64_t>(n) * cm.positions(),
                     cm.patch_dim() + 1);
    rows.leftCols(cm.patch_dim()) = im2col(sel, cm);
  } else {
    rows = Mat::Ones(n, k * unit_size + 1);
    rows.leftCols(k * unit_size) = sel;
  }
  Mat m = (rows.transpose() * rows) / n;
  m = 0.5 * (m + m.transpose());
  return HessianEstimate(linalg::SpdMatrix::from_matrix(m), n, weight, task);
}

namespace {

// Structure of a layer's input: how many units feed it and how many
// coordinates each unit occupies in the flattened input vector.
struct InputShape {
  int units = 0;
  int unit_size = 1;
};

InputShape input_shape(const Layer& layer, const Layer* prev, int input_dim) {
  InputShape s;
  if (layer.kind == LayerKind::kConv) {
    s.units = layer.conv->in_channels;
    s.unit_size = layer.conv->in_h * layer.conv->in_w;
  } else if (prev && prev->kind == LayerKind::kConv) {
    s.units = prev->conv->out_channels;
    s.unit_size = prev->conv->positions();
  } else {
    s.units = layer.in_dim();
    s.unit_size = 1;
    (void)input_dim;
  }
  return s;
}

std::vector<int> all_units(int n) {
  std::vector<int> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

HessianEstimate layer_hessian(const Network& net, int layer,
                              const CalibrationSet& calib, double weight,
                              const std::vector<int>& shared_units) {
  if (layer < 0 || layer >= net.num_layers() - 1)
    throw Error("layer_hessian: layer out of range");
  calib.validate(net.input_dim);
  const Layer& cur = net.layers[layer];
  const Layer* prev = layer > 0 ? &net.layers[layer - 1] : nullptr;
  Mat prev_out = layer == 0 ? calib.inputs
                            : forward(net, calib.inputs).post[layer - 1];
  InputShape shape = input_shape(cur, prev, net.input_dim);
  const auto units =
      shared_units.empty() ? all_units(shape.units) : shared_units;
  return hessian_from_inputs(prev_out, units, shape.unit_size,
                             cur.kind == LayerKind::kConv,
                             cur.conv ? &*cur.conv : nullptr, weight,
                             calib.task);
}

HessianEstimate layer_hessian(const Network& net, int layer,
                              const CalibrationSet& calib, double weight) {
  return layer_hessian(net, layer, calib, weight, {});
}

HessianEstimate layer_hessian(const ZippedModel& zm, int task, int layer,
                              const CalibrationSet& calib, double weight,
                              const std::vector<int>& shared_units) {
  if (layer < 0 || layer >= static_cast<int>(zm.hidden.size()))
    throw Error("layer_hessian: layer out of range");
  Mat prev_out = layer == 0
                     ? calib.inputs
                     : forward_task(zm, task, calib.inputs).post[layer - 1];
  const SharedLayer& sl = zm.hidden[layer];
  int unit_size = sl.in_mult;
  if (sl.kind == LayerKind::kConv) unit_size = sl.conv->in_h * sl.conv->in_w;
  if (layer == 0 && sl.kind != LayerKind::kConv) {
    // Joint input layer: pad narrower tasks with fictive zeros.
    if (prev_out.cols() < zm.input_dim) {
      Mat padded = Mat::Zero(prev_out.rows(), zm.input_dim);
      padded.leftCols(prev_out.cols()) = prev_out;
      prev_out = padded;
    }
  }
  const auto units = shared_units.empty()
                         ? all_units(static_cast<int>(prev_out.cols()) / unit_size)
                         : shared_units;
  return hessian_from_inputs(prev_out, units, unit_size,
                             sl.kind == LayerKind::kConv,
                             sl.conv ? &*sl.conv : nullptr, weight, task);
}

HessianEstimate merge_hessians(const HessianEstimate& existing,
                               const HessianEstimate& incoming) {
  if (existing.dim() != incoming.dim())
    throw DimensionError("merge_hessians: dim mismatch");
  const double w1 = existing.alpha_weight(), w2 = incoming.alpha_weight();
  if (w1 + w2 <= 0) throw Error("merge_hessians: zero total weight");
  Mat m = (w1 * existing.average().matrix() + w2 * incoming.average().matrix()) /
          (w1 + w2);
  return HessianEstimate(linalg::SpdMatrix::from_matrix(m),
                         existing.n_samples() + incoming.n_samples(), 1.0, -1);
}

HessianEstimate restrict_units(const HessianEstimate& h,
                               const std::vector<int>& keep_units,
                               int unit_size) {
  std::vector<int> idx;
  for (int u : keep_units)
    for (int k = 0; k < unit_size; ++k) idx.push_back(u * unit_size + k);
  idx.push_back(h.dim() - 1);  // bias coordinate
  Mat sub(idx.size(), idx.size());
  const Mat& m = h.average().matrix();
  for (size_t i = 0; i < idx.size(); ++i)
    for (size_t j = 0; j < idx.size(); ++j) sub(i, j) = m(idx[i], idx[j]);
  return HessianEstimate(linalg::SpdMatrix::from_matrix(sub), h.n_samples(),
                         h.alpha_weight(), h.task());
}

}  // namespace mtz::hessian

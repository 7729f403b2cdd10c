#include "mtz/model.hpp"

#include <algorithm>
#include <cmath>

namespace mtz {

namespace {

Mat gather_rows(const Mat& m, const std::vector<int>& idx) {
  Mat out(static_cast<int>(idx.size()), m.cols());
  for (int i = 0; i < static_cast<int>(idx.size()); ++i)
    out.row(i) = m.row(idx[i]);
  return out;
}

Mat gather_cols(const Mat& m, const std::vector<int>& idx) {
  Mat out(m.rows(), static_cast<int>(idx.size()));
  for (int i = 0; i < static_cast<int>(idx.size()); ++i)
    out.col(i) = m.col(idx[i]);
  return out;
}

}  // namespace

int Layer::in_dim() const {
  if (kind == LayerKind::kConv)
    return conv->in_channels * conv->in_h * conv->in_w;
  return static_cast<int>(weights.rows());
}

int Layer::out_dim() const {
  if (kind == LayerKind::kConv) return conv->out_channels * conv->positions();
  return static_cast<int>(weights.cols());
}

void Layer::apply_mask() {
  if (mask) weights = weights.cwiseProduct(*mask);
}

void Layer::validate() const {
  if (bias.size() != weights.cols())
    throw DimensionError("Layer: bias length != unit count");
  if (!weights.allFinite() || !bias.allFinite())
    throw Error("Layer: non-finite parameters");
  if (kind == LayerKind::kConv) {
    if (!conv) throw Error("Layer: conv layer without conv metadata");
    if (weights.rows() != conv->patch_dim() ||
        weights.cols() != conv->out_channels)
      throw DimensionError("Layer: conv weight shape mismatch");
  }
  if (mask) {
    if (mask->rows() != weights.rows() || mask->cols() != weights.cols())
      throw DimensionError("Layer: mask shape mismatch");
    for (int j = 0; j < mask->cols(); ++j)
      for (int i = 0; i < mask->rows(); ++i) {
        const double m = (*mask)(i, j);
        if (m != 0.0 && m != 1.0) throw Error("Layer: mask entries must be 0/1");
        if (m == 0.0 && weights(i, j) != 0.0)
          throw Error("Layer: nonzero weight at masked position");
      }
  }
}

int64_t Network::param_count() const {
  int64_t n = 0;
  for (const auto& l : layers) n += l.weights.size() + l.bias.size();
  return n;
}

void Network::validate() const {
  if (layers.empty()) throw Error("Network: no layers");
  int dim = input_dim;
  for (size_t i = 0; i < layers.size(); ++i) {
    layers[i].validate();
    if (layers[i].in_dim() != dim)
      throw DimensionError("Network: layer " + std::to_string(i) +
                           " input dim mismatch");
    dim = layers[i].out_dim();
  }
}

Mat im2col(const Mat& x, const ConvMeta& cm) {
  const int n = static_cast<int>(x.rows());
  const int oh = cm.out_h(), ow = cm.out_w();
  const int pd = cm.patch_dim();
  Mat out = Mat::Zero(static_cast<int64_t>(n) * oh * ow, pd);
  for (int s = 0; s < n; ++s) {
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const int row = (s * oh + oy) * ow + ox;
        for (int c = 0; c < cm.in_channels; ++c)
          for (int ky = 0; ky < cm.kernel; ++ky) {
            const int iy = oy * cm.stride - cm.padding + ky;
            if (iy < 0 || iy >= cm.in_h) continue;
            for (int kx = 0; kx < cm.kernel; ++kx) {
              const int ix = ox * cm.stride - cm.padding + kx;
              if (ix < 0 || ix >= cm.in_w) continue;
              out(row, (c * cm.kernel + ky) * cm.kernel + kx) =
                  x(s, (c * cm.in_h + iy) * cm.in_w + ix);
            }
          }
      }
  }
  return out;
}

Mat layer_affine(const Layer& layer, const Mat& x) {
  if (x.cols() != layer.in_dim())
    throw DimensionError("layer_affine: input dim mismatch");
  if (layer.kind == LayerKind::kConv) {
    const ConvMeta& cm = *layer.conv;
    const int n = static_cast<int>(x.rows());
    const int pos = cm.positions();
    Mat cols = im2col(x, cm);                 // (n*pos) x patch
    Mat res = cols * layer.weights;           // (n*pos) x C_out
    Mat out(n, cm.out_channels * pos);
    for (int s = 0; s < n; ++s)
      for (int c = 0; c < cm.out_channels; ++c)
        for (int p = 0; p < pos; ++p)
          out(s, c * pos + p) = res(s * pos + p, c) + layer.bias[c];
    return out;
  }
  return (x * layer.weights).rowwise() + layer.bias.transpose();
}

Mat apply_activation(Activation act, Mat y) {
  if (act == Activation::kRelu) y = y.cwiseMax(0.0);
  return y;
}

ForwardTrace forward(const Network& net, const Mat& x) {
  if (x.cols() != net.input_dim)
    throw DimensionError("forward: input dim mismatch");
  if (!x.allFinite()) throw Error("forward: non-finite input");
  ForwardTrace tr;
  Mat cur = x;
  Mat shortcut;
  for (size_t l = 0; l < net.layers.size(); ++l) {
    const Layer& layer = net.layers[l];
    if (layer.kind == LayerKind::kResidualEntry) shortcut = cur;
    Mat pre = layer_affine(layer, cur);
    if (layer.kind == LayerKind::kResidualExit) pre += shortcut;
    if (!pre.allFinite())
      throw Error("forward: non-finite output at layer " + std::to_string(l));
    cur = (l + 1 == net.layers.size()) ? pre
                                       : apply_activation(layer.act, pre);
    tr.pre.push_back(pre);
    tr.post.push_back(cur);
  }
  tr.output = tr.pre.back();
  return tr;
}

Vec forward_one(const Network& net, const Vec& x) {
  return forward(net, x.transpose()).output.row(0).transpose();
}

// ---------------------------------------------------------------------------
// SharedLayer
// ---------------------------------------------------------------------------

std::vector<int> SharedLayer::task_units(int t) const {
  std::vector<int> idx;
  for (int i = 0; i < n_units(); ++i)
    if (has_task(units[i], t)) idx.push_back(i);
  return idx;
}

std::vector<int> SharedLayer::task_in_units(int t) const {
  std::vector<int> idx;
  for (int i = 0; i < n_in_units(); ++i)
    if (has_task(in_units[i], t)) idx.push_back(i);
  return idx;
}

std::vector<int> SharedLayer::task_in_rows(int t) const {
  std::vector<int> rows;
  for (int u : task_in_units(t))
    for (int k = 0; k < in_mult; ++k) rows.push_back(u * in_mult + k);
  return rows;
}

Mat SharedLayer::effective_weights(int t) const {
  return gather_cols(gather_rows(weights, task_in_rows(t)), task_units(t));
}

Vec SharedLayer::effective_bias(int t) const {
  auto idx = task_units(t);
  Vec out(static_cast<int>(idx.size()));
  for (size_t i = 0; i < idx.size(); ++i) out[static_cast<int>(i)] = bias[idx[i]];
  return out;
}

std::optional<Mat> SharedLayer::effective_mask(int t) const {
  if (!mask) return std::nullopt;
  return gather_cols(gather_rows(*mask, task_in_rows(t)), task_units(t));
}

ConvMeta SharedLayer::effective_conv(int t) const {
  ConvMeta cm = *conv;
  cm.in_channels = static_cast<int>(task_in_units(t).size());
  cm.out_channels = static_cast<int>(task_units(t).size());
  return cm;
}

void SharedLayer::validate() const {
  if (weights.rows() != static_cast<int64_t>(in_units.size()) * in_mult)
    throw DimensionError("SharedLayer: weight rows != in units * mult");
  if (weights.cols() != n_units())
    throw DimensionError("SharedLayer: weight cols != units");
  if (bias.size() != n_units())
    throw DimensionError("SharedLayer: bias size != units");
  if (mask && (mask->rows() != weights.rows() || mask->cols() != weights.cols()))
    throw DimensionError("SharedLayer: mask shape mismatch");
}

int64_t shared_layer_connections(const SharedLayer& sl) {
  int64_t n = 0;
  for (int u = 0; u < sl.n_units(); ++u) {
    for (int v = 0; v < sl.n_in_units(); ++v)
      if (sl.units[u] & sl.in_units[v]) n += sl.in_mult;
    n += 1;  // bias
  }
  return n;
}

LayerBlocks layer_blocks(const SharedLayer& sl, int a, int b) {
  std::vector<int> sh_in, a_in, b_in, sh_u, a_u, b_u;
  for (int i = 0; i < sl.n_in_units(); ++i) {
    const bool ia = has_task(sl.in_units[i], a), ib = has_task(sl.in_units[i], b);
    if (ia && ib) sh_in.push_back(i);
    else if (ia) a_in.push_back(i);
    else if (ib) b_in.push_back(i);
  }
  for (int i = 0; i < sl.n_units(); ++i) {
    const bool ia = has_task(sl.units[i], a), ib = has_task(sl.units[i], b);
    if (ia && ib) sh_u.push_back(i);
    else if (ia) a_u.push_back(i);
    else if (ib) b_u.push_back(i);
  }
  auto expand = [&](const std::vector<int>& us) {
    std::vector<int> rows;
    for (int u : us)
      for (int k = 0; k < sl.in_mult; ++k) rows.push_back(u * sl.in_mult + k);
    return rows;
  };
  std::vector<int> a_view_in, b_view_in;
  for (int i = 0; i < sl.n_in_units(); ++i) {
    if (has_task(sl.in_units[i], a)) a_view_in.push_back(i);
    if (has_task(sl.in_units[i], b)) b_view_in.push_back(i);
  }
  LayerBlocks out;
  out.w_shared = gather_cols(gather_rows(sl.weights, expand(sh_in)), sh_u);
  out.b_shared = Vec(static_cast<int>(sh_u.size()));
  for (size_t k = 0; k < sh_u.size(); ++k)
    out.b_shared[static_cast<int>(k)] = sl.bias[sh_u[k]];
  out.w_cross_a = gather_cols(gather_rows(sl.weights, expand(a_in)), sh_u);
  out.w_cross_b = gather_cols(gather_rows(sl.weights, expand(b_in)), sh_u);
  out.w_hat_a = gather_cols(gather_rows(sl.weights, expand(a_view_in)), a_u);
  out.w_hat_b = gather_cols(gather_rows(sl.weights, expand(b_view_in)), b_u);
  out.b_hat_a = Vec(static_cast<int>(a_u.size()));
  for (size_t k = 0; k < a_u.size(); ++k)
    out.b_hat_a[static_cast<int>(k)] = sl.bias[a_u[k]];
  out.b_hat_b = Vec(static_cast<int>(b_u.size()));
  for (size_t k = 0; k < b_u.size(); ++k)
    out.b_hat_b[static_cast<int>(k)] = sl.bias[b_u[k]];
  return out;
}

// ---------------------------------------------------------------------------
// ZippedModel
// ---------------------------------------------------------------------------

int ZippedModel::task_index(const std::string& id) const {
  for (int i = 0; i < num_tasks(); ++i)
    if (task_ids[i] == id) return i;
  throw Error("unknown task: " + id);
}

int64_t ZippedModel::param_count() const {
  int64_t n = 0;
  for (const auto& sl : hidden) n += shared_layer_connections(sl);
  for (const auto& h : heads) n += h.weights.size() + h.bias.size();
  return n;
}

void ZippedModel::validate() const {
  for (const auto& sl : hidden) sl.validate();
  for (const auto& h : heads) h.validate();
  if (static_cast<int>(heads.size()) != num_tasks())
    throw Error("ZippedModel: head count != task count");
}

namespace {

// Number of weight rows layer `layer` devotes to one unit of layer `prev`
// (or to one input coordinate when prev == nullptr).
int in_multiplicity(const Layer& layer, const Layer* prev) {
  if (layer.kind == LayerKind::kConv) return layer.conv->kernel * layer.conv->kernel;
  if (prev && prev->kind == LayerKind::kConv) return prev->conv->positions();
  return 1;
}

int unit_count(const Layer& layer) {
  if (layer.kind == LayerKind::kConv) return layer.conv->out_channels;
  return static_cast<int>(layer.weights.cols());
}

int in_unit_count(const Layer& layer, const Layer* prev, int input_dim) {
  if (prev) return unit_count(*prev);
  if (layer.kind == LayerKind::kConv) return layer.conv->in_channels;
  return input_dim;
}

}  // namespace

void embed_additional(ZippedModel& zm, const Network& net) {
  net.validate();
  const int t = zm.num_tasks();
  if (t >= 32) throw Error("embed: at most 32 tasks");
  const int nl = net.num_layers();
  if (!zm.hidden.empty() || !zm.heads.empty()) {
    if (static_cast<int>(zm.hidden.size()) != nl - 1)
      throw Error("embed: layer count mismatch");
  }
  zm.task_ids.push_back(net.task_id);
  zm.task_input_dims.push_back(net.input_dim);

  const bool fresh = zm.hidden.empty() && zm.heads.empty();
  if (fresh) {
    zm.input_dim = net.input_dim;
    zm.hidden.resize(nl - 1);
  } else {
    zm.input_dim = std::max(zm.input_dim, net.input_dim);
  }

  for (int l = 0; l + 1 < nl; ++l) {
    const Layer& src = net.layers[l];
    const Layer* prev = l > 0 ? &net.layers[l - 1] : nullptr;
    SharedLayer& sl = zm.hidden[l];
    const int mult = in_multiplicity(src, prev);
    const int src_units = unit_count(src);
    const int src_in = in_unit_count(src, prev, net.input_dim);

    if (fresh) {
      sl.kind = src.kind;
      sl.act = src.act;
      sl.in_mult = mult;
      sl.conv = src.conv;
      if (l == 0) {
        // Input units are always shared; mark membership lazily via all_tasks
        // once every task is added (input sets are patched below).
        const int in_units = (src.kind == LayerKind::kConv)
                                 ? src.conv->in_channels
                                 : net.input_dim;
        sl.in_units.assign(in_units, 0u);
      } else {
        sl.in_units.clear();  // filled from previous layer's units below
      }
      sl.units.clear();
      sl.weights = Mat(0, 0);
      sl.bias = Vec(0);
      sl.origin.clear();
      sl.shortcut_map.clear();
    } else {
      if (sl.kind != src.kind || sl.act != src.act)
        throw Error("embed: architecture mismatch at layer " + std::to_string(l));
      if (sl.in_mult != mult)
        throw Error("embed: input multiplicity mismatch at layer " +
                    std::to_string(l));
      if (sl.conv && src.conv &&
          (sl.conv->kernel != src.conv->kernel ||
           sl.conv->stride != src.conv->stride ||
           sl.conv->padding != src.conv->padding ||
           sl.conv->in_h != src.conv->in_h || sl.conv->in_w != src.conv->in_w))
        throw Error("embed: conv geometry mismatch at layer " + std::to_string(l));
    }

    // Extend the unit lists.
    const int old_units = sl.n_units();
    int old_in_units = sl.n_in_units();
    std::vector<int> new_in_units;  // joint indices of this task's inputs
    if (l == 0) {
      // Joint input layer: shared coordinates, fictive zeros if narrower.
      const int need = (src.kind == LayerKind::kConv) ? src.conv->in_channels
                                                      : zm.input_dim;
      if (src.kind == LayerKind::kConv && sl.n_in_units() != need)
        throw Error("embed: conv input channel mismatch");
      while (sl.n_in_units() < need) sl.in_units.push_back(0u);
      old_in_units = sl.n_in_units();
      for (int i = 0; i < need; ++i) new_in_units.push_back(i);
      (void)src_in;
    } else {
      // Inputs are the previous hidden layer's units; the new task's units
      // were appended there in original order.
      const SharedLayer& prev_sl = zm.hidden[l - 1];
      for (int i = 0; i < prev_sl.n_units(); ++i)
        if (has_task(prev_sl.units[i], t)) new_in_units.push_back(i);
      if (static_cast<int>(sl.in_units.size()) != prev_sl.n_units())
        sl.in_units.resize(prev_sl.n_units(), 0u);
      for (size_t i = 0; i < sl.in_units.size(); ++i)
        sl.in_units[i] = prev_sl.units[i];
    }
    const int total_in_units = sl.n_in_units();

    for (int u = 0; u < src_units; ++u) sl.units.push_back(1u << t);

    // Rebuild the weight matrix with the new rows/columns.
    Mat w = Mat::Zero(static_cast<int64_t>(total_in_units) * mult,
                      sl.n_units());
    Vec b = Vec::Zero(sl.n_units());
    std::optional<Mat> mk;
    const bool need_mask = sl.mask.has_value() || src.mask.has_value();
    if (need_mask) mk = Mat::Zero(w.rows(), w.cols());
    if (old_units > 0) {
      // Existing rows keep their positions except input-layer growth, which
      // only appends units at the end; row count may have grown.
      w.topLeftCorner(sl.weights.rows(), old_units) = sl.weights;
      b.head(old_units) = sl.bias;
      if (mk) {
        if (sl.mask)
          mk->topLeftCorner(sl.weights.rows(), old_units) = *sl.mask;
        else
          mk->topLeftCorner(sl.weights.rows(), old_units).setOnes();
      }
    }
    // New task's columns.
    Mat src_w = src.weights;
    std::optional<Mat> src_mask = src.mask;
    if (l == 0 && src.kind != LayerKind::kConv &&
        src_w.rows() < zm.input_dim) {
      Mat padded = Mat::Zero(zm.input_dim, src_w.cols());
      padded.topRows(src_w.rows()) = src_w;
      if (src_mask) {
        Mat pm = Mat::Zero(zm.input_dim, src_w.cols());
        pm.topRows(src_mask->rows()) = *src_mask;
        src_mask = pm;
      }
      src_w = padded;
    }
    for (int u = 0; u < src_units; ++u) {
      const int col = old_units + u;
      for (size_t vi = 0; vi < new_in_units.size(); ++vi) {
        const int joint_v = new_in_units[vi];
        for (int k = 0; k < mult; ++k) {
          w(static_cast<int64_t>(joint_v) * mult + k, col) =
              src_w(static_cast<int64_t>(vi) * mult + k, u);
          if (mk)
            (*mk)(static_cast<int64_t>(joint_v) * mult + k, col) =
                src_mask ? (*src_mask)(static_cast<int64_t>(vi) * mult + k, u)
                         : 1.0;
        }
      }
      b[col] = src.bias[u];
    }
    sl.weights = std::move(w);
    sl.bias = std::move(b);
    sl.mask = std::move(mk);
    (void)old_in_units;

    sl.origin.resize(t + 1);
    std::vector<int> org(src_units);
    for (int u = 0; u < src_units; ++u) org[u] = u;
    sl.origin[t] = std::move(org);
    if (sl.kind == LayerKind::kResidualExit) {
      sl.shortcut_map.resize(t + 1);
      std::vector<int> sm(src_units);
      for (int u = 0; u < src_units; ++u) sm[u] = u;
      sl.shortcut_map[t] = std::move(sm);
    }
  }
  zm.heads.push_back(net.layers.back());
  // Input units of the first layer are shared across every task.
  if (!zm.hidden.empty())
    for (auto& s : zm.hidden[0].in_units) s = all_tasks(zm.num_tasks());
}

ZippedModel embed(const std::vector<const Network*>& nets) {
  if (nets.size() < 1) throw Error("embed: need at least one network");
  ZippedModel zm;
  for (const Network* n : nets) embed_additional(zm, *n);
  zm.validate();
  return zm;
}

ForwardTrace forward_task(const ZippedModel& zm, int task, const Mat& x) {
  if (task < 0 || task >= zm.num_tasks()) throw Error("forward_task: bad task");
  Mat cur = x;
  const int first_in = zm.hidden.empty()
                           ? zm.input_dim
                           : (zm.hidden[0].kind == LayerKind::kConv
                                  ? zm.hidden[0].conv->in_channels *
                                        zm.hidden[0].conv->in_h *
                                        zm.hidden[0].conv->in_w
                                  : zm.input_dim);
  if (cur.cols() < first_in) {
    Mat padded = Mat::Zero(cur.rows(), first_in);
    padded.leftCols(cur.cols()) = cur;
    cur = padded;
  } else if (cur.cols() != first_in) {
    throw DimensionError("forward_task: input dim mismatch");
  }
  if (!cur.allFinite()) throw Error("forward_task: non-finite input");

  ForwardTrace tr;
  Mat shortcut;
  for (size_t l = 0; l < zm.hidden.size(); ++l) {
    const SharedLayer& sl = zm.hidden[l];
    Layer eff;
    eff.kind = sl.kind;
    eff.act = sl.act;
    eff.weights = sl.effective_weights(task);
    eff.bias = sl.effective_bias(task);
    if (sl.conv) eff.conv = sl.effective_conv(task);
    if (sl.kind == LayerKind::kResidualEntry) shortcut = cur;
    Mat pre = layer_affine(eff, cur);
    if (sl.kind == LayerKind::kResidualExit) {
      const auto& map = sl.shortcut_map[task];
      if (static_cast<int>(map.size()) != pre.cols())
        throw DimensionError("forward_task: shortcut map size mismatch");
      for (int k = 0; k < pre.cols(); ++k) pre.col(k) += shortcut.col(map[k]);
    }
    if (!pre.allFinite())
      throw Error("forward_task: non-finite output at layer " +
                  std::to_string(l));
    cur = apply_activation(sl.act, pre);
    tr.pre.push_back(pre);
    tr.post.push_back(cur);
  }
  const Layer& head = zm.heads[task];
  Mat pre = layer_affine(head, cur);
  tr.pre.push_back(pre);
  tr.post.push_back(pre);
  tr.output = pre;
  return tr;
}

Vec infer_task(const ZippedModel& zm, const std::string& task, const Vec& x) {
  return forward_task(zm, zm.task_index(task), x.transpose())
      .output.row(0)
      .transpose();
}

}  // namespace mtz

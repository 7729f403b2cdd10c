#include "mtz/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>

namespace mtz::trainer {

void TrainConfig::validate() const {
  if (learning_rate <= 0) throw Error("TrainConfig: learning_rate must be > 0");
  if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
  if (iterations < 0) throw Error("TrainConfig: negative iterations");
}

void RetrainSchedule::validate() const {
  for (int n : per_layer)
    if (n < 0) throw Error("RetrainSchedule: negative iteration count");
}

namespace {

Mat softmax_rows(const Mat& logits) {
  Mat p = logits;
  for (int i = 0; i < p.rows(); ++i) {
    const double m = p.row(i).maxCoeff();
    p.row(i) = (p.row(i).array() - m).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

// Loss value and d(loss)/d(output), both averaged over the batch.
std::pair<double, Mat> loss_and_grad(const Mat& output,
                                     const std::vector<int>& labels,
                                     Loss loss) {
  const int n = static_cast<int>(output.rows());
  if (n != static_cast<int>(labels.size()))
    throw DimensionError("loss: label count mismatch");
  if (loss == Loss::kSoftmaxCrossEntropy) {
    Mat p = softmax_rows(output);
    double total = 0;
    Mat g = p;
    for (int i = 0; i < n; ++i) {
      total -= std::log(std::max(p(i, labels[i]), 1e-300));
      g(i, labels[i]) -= 1.0;
    }
    return {total / n, g / n};
  }
  // Per-attribute sigmoid with one-hot targets.
  Mat s = (1.0 + (-output.array()).exp()).inverse();
  double total = 0;
  Mat g = s;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < output.cols(); ++c) {
      const double t = (labels[i] == c) ? 1.0 : 0.0;
      const double sc = std::clamp(s(i, c), 1e-12, 1.0 - 1e-12);
      total -= t * std::log(sc) + (1.0 - t) * std::log(1.0 - sc);
      g(i, c) -= t;
    }
  return {total / n, g / n};
}

Mat relu_grad_mask(const Mat& pre) {
  return (pre.array() > 0.0).cast<double>();
}

void col2im_add(Mat& dx, const Mat& dcols, const ConvMeta& cm) {
  const int n = static_cast<int>(dx.rows());
  const int oh = cm.out_h(), ow = cm.out_w();
  for (int s = 0; s < n; ++s)
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
              dx(s, (c * cm.in_h + iy) * cm.in_w + ix) +=
                  dcols(row, (c * cm.kernel + ky) * cm.kernel + kx);
            }
          }
      }
}

// Backward through one layer given d(loss)/d(pre). Returns d(loss)/d(input);
// the shortcut contribution of residual exits is handled by the caller.
struct LayerGrad {
  Mat dw;
  Vec db;
  Mat dx;
};

LayerGrad layer_backward(const Layer& layer, const Mat& x, const Mat& dpre) {
  LayerGrad g;
  if (layer.kind == LayerKind::kConv) {
    const ConvMeta& cm = *layer.conv;
    const int n = static_cast<int>(x.rows());
    const int pos = cm.positions();
    Mat cols = im2col(x, cm);
    Mat dres(static_cast<int64_t>(n) * pos, cm.out_channels);
    for (int s = 0; s < n; ++s)
      for (int c = 0; c < cm.out_channels; ++c)
        for (int p = 0; p < pos; ++p)
          dres(s * pos + p, c) = dpre(s, c * pos + p);
    g.dw = cols.transpose() * dres;
    g.db = dres.colwise().sum().transpose();
    Mat dcols = dres * layer.weights.transpose();
    g.dx = Mat::Zero(n, layer.in_dim());
    col2im_add(g.dx, dcols, cm);
  } else {
    g.dw = x.transpose() * dpre;
    g.db = dpre.colwise().sum().transpose();
    g.dx = dpre * layer.weights.transpose();
  }
  if (layer.mask) g.dw = g.dw.cwiseProduct(*layer.mask);
  return g;
}

// Generic backward pass over a stack of effective layers. inputs[l] is the
// input that was fed to layer l during the forward pass.
struct StackGrads {
  std::vector<Mat> dw;
  std::vector<Vec> db;
};

StackGrads backward_stack(const std::vector<Layer>& layers,
                          const std::vector<Mat>& inputs,
                          const ForwardTrace& tr, const Mat& dout,
                          const std::vector<const std::vector<int>*>& shortcut_maps) {
  const int L = static_cast<int>(layers.size());
  StackGrads out;
  out.dw.resize(L);
  out.db.resize(L);
  Mat dpost = dout;
  Mat pending_shortcut;  // gradient waiting for the matching entry layer
  for (int l = L - 1; l >= 0; --l) {
    const Layer& layer = layers[l];
    Mat dpre;
    if (l == L - 1) {
      dpre = dpost;  // no activation on the output layer
    } else {
      dpre = (layer.act == Activation::kRelu)
                 ? dpost.cwiseProduct(relu_grad_mask(tr.pre[l]))
                 : dpost;
    }
    if (layer.kind == LayerKind::kResidualExit) {
      // The shortcut add routes dpre to the block input, channel-mapped.
      pending_shortcut = Mat::Zero(dpre.rows(), inputs[l].cols());
      const std::vector<int>* map = shortcut_maps[l];
      for (int k = 0; k < dpre.cols(); ++k) {
        const int src = map ? (*map)[k] : k;
        pending_shortcut.col(src) += dpre.col(k);
      }
    }
    LayerGrad g = layer_backward(layer, inputs[l], dpre);
    out.dw[l] = std::move(g.dw);
    out.db[l] = std::move(g.db);
    dpost = std::move(g.dx);
    if (layer.kind == LayerKind::kResidualEntry && pending_shortcut.size()) {
      dpost += pending_shortcut;
      pending_shortcut.resize(0, 0);
    }
  }
  return out;
}

}  // namespace

double batch_loss(const Mat& output, const std::vector<int>& labels,
                  Loss loss) {
  return loss_and_grad(output, labels, loss).first;
}

NetGradients gradient(const Network& net, const Mat& x,
                      const std::vector<int>& labels, Loss loss) {
  if (x.rows() == 0) throw Error("gradient: empty batch");
  ForwardTrace tr = forward(net, x);
  auto [lv, dout] = loss_and_grad(tr.output, labels, loss);

  std::vector<Mat> inputs(net.layers.size());
  Mat cur = x;
  for (size_t l = 0; l < net.layers.size(); ++l) {
    inputs[l] = cur;
    cur = tr.post[l];
  }
  std::vector<const std::vector<int>*> maps(net.layers.size(), nullptr);
  StackGrads sg = backward_stack(net.layers, inputs, tr, dout, maps);
  NetGradients out;
  out.dw = std::move(sg.dw);
  out.db = std::move(sg.db);
  out.loss = lv;
  return out;
}

namespace {

// Deterministic shuffled-epoch batch stream.
class BatchStream {
 public:
  BatchStream(int n, int batch, uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), rng_(seed), order_(n) {
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }
  std::vector<int> next() {
    std::vector<int> idx(batch_);
    for (int i = 0; i < batch_; ++i) {
      if (pos_ == n_) reshuffle();
      idx[i] = order_[pos_++];
    }
    return idx;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  int n_, batch_;
  std::mt19937_64 rng_;
  std::vector<int> order_;
  int pos_ = 0;
};

Mat take_rows(const Mat& m, const std::vector<int>& idx) {
  Mat out(static_cast<int>(idx.size()), m.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<int>(i)) = m.row(idx[i]);
  return out;
}

std::vector<int> take_labels(const std::vector<int>& labels,
                             const std::vector<int>& idx) {
  std::vector<int> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
  return out;
}

}  // namespace

void train(Network& net, const data::Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  ds.validate();
  if (ds.dim() != net.input_dim)
    throw DimensionError("train: dataset dim != network input dim");
  BatchStream stream(ds.size(), cfg.batch_size, cfg.seed);
  std::ostream* log = cfg.log ? cfg.log : &std::cout;
  for (int it = 0; it < cfg.iterations; ++it) {
    auto idx = stream.next();
    NetGradients g =
        gradient(net, take_rows(ds.inputs, idx), take_labels(ds.labels, idx),
                 cfg.loss);
    if (!std::isfinite(g.loss))
      throw Error("train: divergence (non-finite loss) at iteration " +
                  std::to_string(it));
    for (size_t l = 0; l < net.layers.size(); ++l) {
      net.layers[l].weights -= cfg.learning_rate * g.dw[l];
      net.layers[l].bias -= cfg.learning_rate * g.db[l];
      net.layers[l].apply_mask();
    }
    if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0) {
      *log << "iter=" << (it + 1) << " loss=" << g.loss;
      if (cfg.eval_data)
        *log << " eval_error=" << data::evaluate(net, *cfg.eval_data);
      *log << "\n";
    }
  }
}

ZippedGradients gradient_task(const ZippedModel& zm, int task, const Mat& x,
                              const std::vector<int>& labels, Loss loss) {
  if (x.rows() == 0) throw Error("gradient_task: empty batch");
  ForwardTrace tr = forward_task(zm, task, x);
  auto [lv, dout] = loss_and_grad(tr.output, labels, loss);

  // Materialize the task's effective layer stack.
  const int H = static_cast<int>(zm.hidden.size());
  std::vector<Layer> layers;
  std::vector<const std::vector<int>*> maps;
  for (int l = 0; l < H; ++l) {
    const SharedLayer& sl = zm.hidden[l];
    Layer eff;
    eff.kind = sl.kind;
    eff.act = sl.act;
    eff.weights = sl.effective_weights(task);
    eff.bias = sl.effective_bias(task);
    eff.mask = sl.effective_mask(task);
    if (sl.conv) eff.conv = sl.effective_conv(task);
    layers.push_back(std::move(eff));
    maps.push_back(sl.kind == LayerKind::kResidualExit ? &sl.shortcut_map[task]
                                                       : nullptr);
  }
  layers.push_back(zm.heads[task]);
  maps.push_back(nullptr);

  std::vector<Mat> inputs(layers.size());
  Mat cur = x;
  if (cur.cols() < layers[0].in_dim()) {
    Mat padded = Mat::Zero(cur.rows(), layers[0].in_dim());
    padded.leftCols(cur.cols()) = cur;
    cur = padded;
  }
  for (size_t l = 0; l < layers.size(); ++l) {
    inputs[l] = cur;
    cur = tr.post[l];
  }
  StackGrads sg = backward_stack(layers, inputs, tr, dout, maps);

  // Scatter the effective gradients back onto the joint matrices.
  ZippedGradients out;
  out.dw_hidden.resize(H);
  out.db_hidden.resize(H);
  for (int l = 0; l < H; ++l) {
    const SharedLayer& sl = zm.hidden[l];
    out.dw_hidden[l] = Mat::Zero(sl.weights.rows(), sl.weights.cols());
    out.db_hidden[l] = Vec::Zero(sl.bias.size());
    const auto rows = sl.task_in_rows(task);
    const auto cols = sl.task_units(task);
    for (size_t j = 0; j < cols.size(); ++j) {
      for (size_t i = 0; i < rows.size(); ++i)
        out.dw_hidden[l](rows[i], cols[j]) =
            sg.dw[l](static_cast<int>(i), static_cast<int>(j));
      out.db_hidden[l][cols[j]] = sg.db[l][static_cast<int>(j)];
    }
  }
  out.dw_head = std::move(sg.dw[H]);
  out.db_head = std::move(sg.db[H]);
  out.loss = lv;
  return out;
}

void retrain_joint(ZippedModel& zm,
                   const std::vector<const data::Dataset*>& task_data,
                   const TrainConfig& cfg,
                   const std::vector<double>& task_weights) {
  cfg.validate();
  const int T = zm.num_tasks();
  if (static_cast<int>(task_data.size()) != T ||
      static_cast<int>(task_weights.size()) != T)
    throw Error("retrain_joint: need one dataset and weight per task");
  std::vector<BatchStream> streams;
  for (int t = 0; t < T; ++t) {
    task_data[t]->validate();
    streams.emplace_back(task_data[t]->size(), cfg.batch_size,
                         cfg.seed ^ (0x51ed2701ULL * (t + 1)));
  }
  std::ostream* log = cfg.log ? cfg.log : &std::cout;
  for (int it = 0; it < cfg.iterations; ++it) {
    double total_loss = 0;
    std::vector<Mat> gw(zm.hidden.size());
    std::vector<Vec> gb(zm.hidden.size());
    for (size_t l = 0; l < zm.hidden.size(); ++l) {
      gw[l] = Mat::Zero(zm.hidden[l].weights.rows(), zm.hidden[l].weights.cols());
      gb[l] = Vec::Zero(zm.hidden[l].bias.size());
    }
    std::vector<Mat> ghw(T);
    std::vector<Vec> ghb(T);
    for (int t = 0; t < T; ++t) {
      auto idx = streams[t].next();
      ZippedGradients g = gradient_task(
          zm, t, take_rows(task_data[t]->inputs, idx),
          take_labels(task_data[t]->labels, idx), cfg.loss);
      if (!std::isfinite(g.loss))
        throw Error("retrain_joint: divergence at iteration " +
                    std::to_string(it) + " task " + std::to_string(t));
      total_loss += task_weights[t] * g.loss;
      for (size_t l = 0; l < zm.hidden.size(); ++l) {
        gw[l] += task_weights[t] * g.dw_hidden[l];
        gb[l] += task_weights[t] * g.db_hidden[l];
      }
      ghw[t] = task_weights[t] * g.dw_head;
      ghb[t] = task_weights[t] * g.db_head;
    }
    for (size_t l = 0; l < zm.hidden.size(); ++l) {
      zm.hidden[l].weights -= cfg.learning_rate * gw[l];
      zm.hidden[l].bias -= cfg.learning_rate * gb[l];
      if (zm.hidden[l].mask)
        zm.hidden[l].weights =
            zm.hidden[l].weights.cwiseProduct(*zm.hidden[l].mask);
    }
    for (int t = 0; t < T; ++t) {
      zm.heads[t].weights -= cfg.learning_rate * ghw[t];
      zm.heads[t].bias -= cfg.learning_rate * ghb[t];
      zm.heads[t].apply_mask();
    }
    if (cfg.log_every > 0 && (it + 1) % cfg.log_every == 0)
      *log << "iter=" << (it + 1) << " joint_loss=" << total_loss << "\n";
  }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

namespace {

Mat he_init(int rows, int cols, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / fan_in));
  Mat w(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) w(i, j) = gauss(rng);
  return w;
}

}  // namespace

Network make_mlp(int input_dim, const std::vector<int>& hidden,
                 int num_classes, uint64_t seed, const std::string& task_id) {
  std::mt19937_64 rng(seed);
  Network net;
  net.input_dim = input_dim;
  net.task_id = task_id;
  int prev = input_dim;
  for (int h : hidden) {
    Layer l;
    l.kind = LayerKind::kDense;
    l.act = Activation::kRelu;
    l.weights = he_init(prev, h, prev, rng);
    l.bias = Vec::Zero(h);
    net.layers.push_back(std::move(l));
    prev = h;
  }
  Layer out;
  out.kind = LayerKind::kDense;
  out.act = Activation::kNone;
  out.weights = he_init(prev, num_classes, prev, rng);
  out.bias = Vec::Zero(num_classes);
  net.layers.push_back(std::move(out));
  net.validate();
  return net;
}

Network make_cnn(int side, int c1, int c2, int fc, int num_classes,
                 uint64_t seed, const std::string& task_id) {
  std::mt19937_64 rng(seed);
  Network net;
  net.input_dim = side * side;
  net.task_id = task_id;

  auto conv_layer = [&](int in_ch, int out_ch, int in_side) {
    Layer l;
    l.kind = LayerKind::kConv;
    l.act = Activation::kRelu;
    ConvMeta cm;
    cm.kernel = 5;
    cm.stride = 2;
    cm.padding = 2;
    cm.in_h = cm.in_w = in_side;
    cm.in_channels = in_ch;
    cm.out_channels = out_ch;
    l.conv = cm;
    l.weights = he_init(cm.patch_dim(), out_ch, cm.patch_dim(), rng);
    l.bias = Vec::Zero(out_ch);
    return l;
  };
  net.layers.push_back(conv_layer(1, c1, side));
  const int s2 = net.layers[0].conv->out_h();
  net.layers.push_back(conv_layer(c1, c2, s2));
  const int s3 = net.layers[1].conv->out_h();

  Layer f;
  f.kind = LayerKind::kDense;
  f.act = Activation::kRelu;
  f.weights = he_init(c2 * s3 * s3, fc, c2 * s3 * s3, rng);
  f.bias = Vec::Zero(fc);
  net.layers.push_back(std::move(f));

  Layer out;
  out.kind = LayerKind::kDense;
  out.act = Activation::kNone;
  out.weights = he_init(fc, num_classes, fc, rng);
  out.bias = Vec::Zero(num_classes);
  net.layers.push_back(std::move(out));
  net.validate();
  return net;
}

Network make_residual_mlp(int input_dim, int width, int blocks,
                          int num_classes, uint64_t seed,
                          const std::string& task_id) {
  std::mt19937_64 rng(seed);
  Network net;
  net.input_dim = input_dim;
  net.task_id = task_id;

  Layer stem;
  stem.kind = LayerKind::kDense;
  stem.act = Activation::kRelu;
  stem.weights = he_init(input_dim, width, input_dim, rng);
  stem.bias = Vec::Zero(width);
  net.layers.push_back(std::move(stem));

  for (int b = 0; b < blocks; ++b) {
    Layer entry;
    entry.kind = LayerKind::kResidualEntry;
    entry.act = Activation::kRelu;
    entry.weights = he_init(width, width, width, rng);
    entry.bias = Vec::Zero(width);
    net.layers.push_back(std::move(entry));
    Layer exit;
    exit.kind = LayerKind::kResidualExit;
    exit.act = Activation::kRelu;
    // Small init keeps the block near identity at the start of training.
    exit.weights = 0.1 * he_init(width, width, width, rng);
    exit.bias = Vec::Zero(width);
    net.layers.push_back(std::move(exit));
  }

  Layer out;
  out.kind = LayerKind::kDense;
  out.act = Activation::kNone;
  out.weights = he_init(width, num_classes, width, rng);
  out.bias = Vec::Zero(num_classes);
  net.layers.push_back(std::move(out));
  net.validate();
  return net;
}

}  // namespace mtz::trainer

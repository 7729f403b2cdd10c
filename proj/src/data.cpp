#include "mtz/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace mtz::data {

void Dataset::validate() const {
  if (size() == 0) throw Error("Dataset: empty");
  if (static_cast<int>(labels.size()) != size())
    throw DimensionError("Dataset: label count != sample count");
  for (int l : labels)
    if (l < 0 || l >= num_classes) throw Error("Dataset: label out of range");
}

namespace {

constexpr uint32_t kImageMagic = 0x00000803;
constexpr uint32_t kLabelMagic = 0x00000801;

uint32_t read_be32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("truncated IDX file: " + path);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) |
         (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot open: " + images_path);
  if (read_be32(img, images_path) != kImageMagic)
    throw IoError("bad image magic number: " + images_path);
  const uint32_t n = read_be32(img, images_path);
  const uint32_t rows = read_be32(img, images_path);
  const uint32_t cols = read_be32(img, images_path);
  const size_t pixels = size_t(n) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  img.read(reinterpret_cast<char*>(raw.data()),
           static_cast<std::streamsize>(pixels));
  if (!img || img.gcount() != static_cast<std::streamsize>(pixels))
    throw IoError("truncated IDX image file: " + images_path);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot open: " + labels_path);
  if (read_be32(lab, labels_path) != kLabelMagic)
    throw IoError("bad label magic number: " + labels_path);
  const uint32_t nl = read_be32(lab, labels_path);
  if (nl != n)
    throw IoError("image/label count mismatch: " + std::to_string(n) + " vs " +
                  std::to_string(nl));
  std::vector<unsigned char> lraw(nl);
  lab.read(reinterpret_cast<char*>(lraw.data()), nl);
  if (!lab || lab.gcount() != static_cast<std::streamsize>(nl))
    throw IoError("truncated IDX label file: " + labels_path);

  Dataset ds;
  ds.inputs = Mat(n, rows * cols);
  for (uint32_t i = 0; i < n; ++i)
    for (uint32_t p = 0; p < rows * cols; ++p)
      ds.inputs(i, p) = raw[size_t(i) * rows * cols + p] / 255.0;
  ds.labels.assign(lraw.begin(), lraw.end());
  ds.num_classes = 10;
  ds.validate();
  return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path,
              const std::string& labels_path) {
  const int side = static_cast<int>(std::lround(std::sqrt(double(ds.dim()))));
  if (side * side != ds.dim())
    throw Error("save_idx: inputs are not square images");
  std::ofstream img(images_path, std::ios::binary | std::ios::trunc);
  if (!img) throw IoError("cannot open for writing: " + images_path);
  write_be32(img, kImageMagic);
  write_be32(img, static_cast<uint32_t>(ds.size()));
  write_be32(img, static_cast<uint32_t>(side));
  write_be32(img, static_cast<uint32_t>(side));
  for (int i = 0; i < ds.size(); ++i)
    for (int p = 0; p < ds.dim(); ++p) {
      const auto b = static_cast<unsigned char>(
          std::lround(std::clamp(ds.inputs(i, p), 0.0, 1.0) * 255.0));
      img.put(static_cast<char>(b));
    }
  std::ofstream lab(labels_path, std::ios::binary | std::ios::trunc);
  if (!lab) throw IoError("cannot open for writing: " + labels_path);
  write_be32(lab, kLabelMagic);
  write_be32(lab, static_cast<uint32_t>(ds.size()));
  for (int l : ds.labels) lab.put(static_cast<char>(l));
}

namespace {

// Box-blur an n x (side*side) batch of images; keeps values in [0,1] and
// gives the inputs the local smoothness conv layers can pick up.
Mat smooth_images(const Mat& x, int side) {
  Mat out(x.rows(), x.cols());
  for (int s = 0; s < x.rows(); ++s)
    for (int y = 0; y < side; ++y)
      for (int xx = 0; xx < side; ++xx) {
        double sum = 0;
        int cnt = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xc = xx + dx;
            if (yy < 0 || yy >= side || xc < 0 || xc >= side) continue;
            sum += x(s, yy * side + xc);
            ++cnt;
          }
        out(s, y * side + xx) = sum / cnt;
      }
  return out;
}

Mat sample_inputs(const SyntheticTaskSpec& spec, int pool_n,
                  std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Mat x(pool_n, spec.input_dim);
  for (int i = 0; i < pool_n; ++i)
    for (int j = 0; j < spec.input_dim; ++j) x(i, j) = uni(rng);
  if (spec.image_like) {
    const int side = static_cast<int>(std::lround(std::sqrt(double(spec.input_dim))));
    if (side * side != spec.input_dim)
      throw Error("gen_task: image_like requires a square input_dim");
    // Samples live on a low-dimensional manifold spanned by smooth basis
    // images, like natural image data; a plain high-dimensional uniform
    // cloud is not learnable from desk-scale sample counts. The basis
    // depends on the seed only, so train and test share the manifold.
    const int k = std::min(32, spec.input_dim);
    std::mt19937_64 brng(spec.seed ^ 0xB1A5E5ULL);
    std::normal_distribution<double> bgauss(0.0, 1.0);
    Mat basis(k, spec.input_dim);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < spec.input_dim; ++j) basis(i, j) = bgauss(brng);
    basis = smooth_images(smooth_images(basis, side), side);
    for (int i = 0; i < k; ++i) basis.row(i).normalize();
    Mat u = 2.0 * x.leftCols(k).array() - 1.0;  // coords in [-1,1]
    Mat y = u * basis;
    const double sd =
        std::max(1e-12, std::sqrt(y.array().square().mean()));
    x = (0.5 + 0.25 * (y.array() / sd)).cwiseMax(0.0).cwiseMin(1.0);
  }
  return x;
}

Dataset gen_split(const SyntheticTaskSpec& spec, const Mat& trunk_w,
                  const Vec& trunk_b, const Mat& head_w, const Vec& head_b,
                  int n, uint64_t stream) {
  std::mt19937_64 rng(spec.seed * 0x9e3779b97f4a7c15ULL + stream);
  // With a margin, oversample and keep well-separated points only.
  const int pool_n = spec.margin > 0 ? 4 * n : n;
  Mat x = sample_inputs(spec, pool_n, rng);
  Mat z = ((x * trunk_w).rowwise() + trunk_b.transpose()).cwiseMax(0.0);
  Mat logits = (z * head_w).rowwise() + head_b.transpose();
  std::vector<int> pool_label(pool_n);
  std::vector<double> pool_margin(pool_n);
  for (int i = 0; i < pool_n; ++i) {
    int best = 0, second = -1;
    for (int c = 1; c < spec.num_classes; ++c)
      if (logits(i, c) > logits(i, best)) best = c;
    for (int c = 0; c < spec.num_classes; ++c)
      if (c != best && (second < 0 || logits(i, c) > logits(i, second)))
        second = c;
    pool_label[i] = best;
    pool_margin[i] = logits(i, best) - logits(i, second);
  }
  // Keep the first n samples meeting the margin; if the pool falls short,
  // fill with the widest-margin leftovers so the size is always n.
  std::vector<int> keep;
  keep.reserve(n);
  std::vector<int> rest;
  for (int i = 0; i < pool_n && static_cast<int>(keep.size()) < n; ++i) {
    if (pool_margin[i] >= spec.margin)
      keep.push_back(i);
    else
      rest.push_back(i);
  }
  if (static_cast<int>(keep.size()) < n) {
    std::sort(rest.begin(), rest.end(), [&](int a, int b) {
      return pool_margin[a] > pool_margin[b];
    });
    for (int i : rest) {
      if (static_cast<int>(keep.size()) >= n) break;
      keep.push_back(i);
    }
    std::sort(keep.begin(), keep.end());
  }
  Dataset ds;
  ds.inputs = Mat(n, spec.input_dim);
  ds.num_classes = spec.num_classes;
  ds.labels.resize(n);
  std::uniform_real_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<int> randlab(0, spec.num_classes - 1);
  for (int i = 0; i < n; ++i) {
    ds.inputs.row(i) = x.row(keep[i]);
    ds.labels[i] = pool_label[keep[i]];
    if (spec.label_noise > 0 && noise(rng) < spec.label_noise)
      ds.labels[i] = randlab(rng);
  }
  return ds;
}

}  // namespace

TaskData gen_task(const SyntheticTaskSpec& spec) {
  if (spec.input_dim <= 0 || spec.num_classes < 2 || spec.trunk_width <= 0)
    throw Error("gen_task: invalid spec");
  // The teacher trunk depends on the seed but not on task_index, so tasks
  // generated with different task_index values share structure.
  std::mt19937_64 trunk_rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Mat trunk_w(spec.input_dim, spec.trunk_width);
  for (int j = 0; j < trunk_w.cols(); ++j)
    for (int i = 0; i < trunk_w.rows(); ++i)
      trunk_w(i, j) = gauss(trunk_rng) / std::sqrt(double(spec.input_dim));
  // Center the teacher pre-activations (inputs have mean 0.5) so roughly
  // half the trunk units fire per sample.
  Vec trunk_b = -0.5 * trunk_w.colwise().sum().transpose();

  std::mt19937_64 head_rng(spec.seed ^ (0xabcdef1234567890ULL +
                                        uint64_t(spec.task_index) * 7919));
  Mat head_w(spec.trunk_width, spec.num_classes);
  for (int j = 0; j < head_w.cols(); ++j)
    for (int i = 0; i < head_w.rows(); ++i) head_w(i, j) = gauss(head_rng);

  // With a margin the head logits are recentered on a probe batch so the
  // argmax classes come out roughly balanced; a raw random head concentrates
  // most of the mass in a couple of classes.
  Vec head_b = Vec::Zero(spec.num_classes);
  if (spec.margin > 0) {
    std::mt19937_64 probe_rng(spec.seed * 0x9e3779b97f4a7c15ULL + 47);
    Mat px = sample_inputs(spec, 4096, probe_rng);
    Mat pz = ((px * trunk_w).rowwise() + trunk_b.transpose()).cwiseMax(0.0);
    head_b = -(pz * head_w).colwise().mean().transpose();
  }

  TaskData td;
  td.train =
      gen_split(spec, trunk_w, trunk_b, head_w, head_b, spec.train_samples, 11);
  td.test =
      gen_split(spec, trunk_w, trunk_b, head_w, head_b, spec.test_samples, 23);
  td.train.validate();
  td.test.validate();
  return td;
}

SyntheticTaskSpec parse_task_spec(const std::string& text) {
  SyntheticTaskSpec spec;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw Error("task spec entry missing '=': " + item);
    const std::string key = item.substr(0, eq);
    const std::string val = item.substr(eq + 1);
    try {
      if (key == "seed") spec.seed = std::stoull(val);
      else if (key == "dim") spec.input_dim = std::stoi(val);
      else if (key == "classes") spec.num_classes = std::stoi(val);
      else if (key == "trunk") spec.trunk_width = std::stoi(val);
      else if (key == "task") spec.task_index = std::stoi(val);
      else if (key == "train") spec.train_samples = std::stoi(val);
      else if (key == "test") spec.test_samples = std::stoi(val);
      else if (key == "noise") spec.label_noise = std::stod(val);
      else if (key == "image") spec.image_like = std::stoi(val) != 0;
      else if (key == "margin") spec.margin = std::stod(val);
      else throw Error("unknown task spec key: " + key);
    } catch (const std::invalid_argument&) {
      throw Error("bad task spec value for " + key + ": " + val);
    }
  }
  return spec;
}

double error_rate(const Mat& outputs, const std::vector<int>& labels) {
  if (outputs.rows() != static_cast<int64_t>(labels.size()))
    throw DimensionError("error_rate: size mismatch");
  int wrong = 0;
  for (int i = 0; i < outputs.rows(); ++i) {
    int best = 0;
    for (int c = 1; c < outputs.cols(); ++c)
      if (outputs(i, c) > outputs(i, best)) best = c;
    if (best != labels[i]) ++wrong;
  }
  return double(wrong) / double(labels.size());
}

double evaluate(const Network& net, const Dataset& ds) {
  return error_rate(forward(net, ds.inputs).output, ds.labels);
}

double evaluate(const ZippedModel& zm, int task, const Dataset& ds) {
  return error_rate(forward_task(zm, task, ds.inputs).output, ds.labels);
}

Mat calibration_inputs(const Dataset& train, int count, uint64_t seed) {
  if (count <= 0) throw Error("calibration_inputs: empty calibration set");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, train.size() - 1);
  Mat out(count, train.dim());
  for (int i = 0; i < count; ++i) out.row(i) = train.inputs.row(pick(rng));
  return out;
}

}  // namespace mtz::data

#include "mtz/serialize.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

namespace mtz {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'Z', 'M'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kTagNetwork = 1;
constexpr uint8_t kTagZipped = 2;

class Writer {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>(v >> (8 * i)));
  }
  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>(v >> (8 * i)));
  }
  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void mat(const Mat& m) {
    u64(static_cast<uint64_t>(m.rows()));
    u64(static_cast<uint64_t>(m.cols()));
    for (int64_t j = 0; j < m.cols(); ++j)
      for (int64_t i = 0; i < m.rows(); ++i) f64(m(i, j));
  }
  void vec(const Vec& v) {
    u64(static_cast<uint64_t>(v.size()));
    for (int64_t i = 0; i < v.size(); ++i) f64(v[i]);
  }
  void opt_mat(const std::optional<Mat>& m) {
    u8(m ? 1 : 0);
    if (m) mat(*m);
  }
  void ints(const std::vector<int>& v) {
    u64(v.size());
    for (int x : v) u32(static_cast<uint32_t>(x));
  }

  void write(const std::string& path) const {
    uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(buf_.data()),
                static_cast<uInt>(buf_.size()));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(kMagic, 4);
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    char c[4];
    for (int i = 0; i < 4; ++i) c[i] = static_cast<char>(crc >> (8 * i));
    out.write(c, 4);
    if (!out) throw IoError("write failed: " + path);
  }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open: " + path);
    const auto size = in.tellg();
    if (size < 8) throw IoError("truncated file: " + path);
    in.seekg(0);
    std::vector<char> all(static_cast<size_t>(size));
    in.read(all.data(), size);
    if (!in) throw IoError("read failed: " + path);
    if (std::memcmp(all.data(), kMagic, 4) != 0)
      throw IoError("bad magic bytes (not a model file): " + path);
    uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
      stored |= static_cast<uint32_t>(
                    static_cast<unsigned char>(all[all.size() - 4 + i]))
                << (8 * i);
    uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(all.data() + 4),
                static_cast<uInt>(all.size() - 8));
    if (crc != stored) throw IoError("checksum mismatch: " + path);
    buf_.assign(all.begin() + 4, all.end() - 4);
  }

  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf_[pos_++]);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(buf_[pos_++]))
           << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(buf_[pos_++]))
           << (8 * i);
    return v;
  }
  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  Mat mat() {
    int64_t r = static_cast<int64_t>(u64()), c = static_cast<int64_t>(u64());
    if (r < 0 || c < 0 || r * c > (1LL << 32)) throw IoError("bad matrix shape");
    Mat m(r, c);
    for (int64_t j = 0; j < c; ++j)
      for (int64_t i = 0; i < r; ++i) m(i, j) = f64();
    return m;
  }
  Vec vec() {
    int64_t n = static_cast<int64_t>(u64());
    if (n < 0 || n > (1LL << 32)) throw IoError("bad vector length");
    Vec v(n);
    for (int64_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
  std::optional<Mat> opt_mat() {
    if (u8() == 0) return std::nullopt;
    return mat();
  }
  std::vector<int> ints() {
    uint64_t n = u64();
    if (n > (1u << 28)) throw IoError("bad int list length");
    std::vector<int> v(n);
    for (auto& x : v) x = static_cast<int>(u32());
    return v;
  }

 private:
  void need(size_t n) {
    if (pos_ + n > buf_.size()) throw IoError("truncated record");
  }
  std::vector<char> buf_;
  size_t pos_ = 0;
};

void write_conv(Writer& w, const std::optional<ConvMeta>& cm) {
  w.u8(cm ? 1 : 0);
  if (!cm) return;
  w.u32(cm->kernel);
  w.u32(cm->stride);
  w.u32(cm->padding);
  w.u32(cm->in_h);
  w.u32(cm->in_w);
  w.u32(cm->in_channels);
  w.u32(cm->out_channels);
}

std::optional<ConvMeta> read_conv(Reader& r) {
  if (r.u8() == 0) return std::nullopt;
  ConvMeta cm;
  cm.kernel = static_cast<int>(r.u32());
  cm.stride = static_cast<int>(r.u32());
  cm.padding = static_cast<int>(r.u32());
  cm.in_h = static_cast<int>(r.u32());
  cm.in_w = static_cast<int>(r.u32());
  cm.in_channels = static_cast<int>(r.u32());
  cm.out_channels = static_cast<int>(r.u32());
  return cm;
}

void write_layer(Writer& w, const Layer& l) {
  w.u8(static_cast<uint8_t>(l.kind));
  w.u8(static_cast<uint8_t>(l.act));
  w.mat(l.weights);
  w.vec(l.bias);
  w.opt_mat(l.mask);
  write_conv(w, l.conv);
}

Layer read_layer(Reader& r) {
  Layer l;
  l.kind = static_cast<LayerKind>(r.u8());
  l.act = static_cast<Activation>(r.u8());
  l.weights = r.mat();
  l.bias = r.vec();
  l.mask = r.opt_mat();
  l.conv = read_conv(r);
  return l;
}

}  // namespace

void save_model(const Network& net, const std::string& path) {
  Writer w;
  w.u32(kVersion);
  w.u8(kTagNetwork);
  w.str(net.task_id);
  w.u32(static_cast<uint32_t>(net.input_dim));
  w.u32(static_cast<uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) write_layer(w, l);
  w.write(path);
}

void save_model(const ZippedModel& zm, const std::string& path) {
  Writer w;
  w.u32(kVersion);
  w.u8(kTagZipped);
  w.u32(static_cast<uint32_t>(zm.input_dim));
  w.u32(static_cast<uint32_t>(zm.task_ids.size()));
  for (const auto& id : zm.task_ids) w.str(id);
  for (int d : zm.task_input_dims) w.u32(static_cast<uint32_t>(d));
  w.u32(static_cast<uint32_t>(zm.hidden.size()));
  for (const auto& sl : zm.hidden) {
    w.u8(static_cast<uint8_t>(sl.kind));
    w.u8(static_cast<uint8_t>(sl.act));
    w.u32(static_cast<uint32_t>(sl.in_mult));
    std::vector<int> inu(sl.in_units.begin(), sl.in_units.end());
    std::vector<int> un(sl.units.begin(), sl.units.end());
    w.ints(inu);
    w.ints(un);
    w.mat(sl.weights);
    w.vec(sl.bias);
    w.opt_mat(sl.mask);
    write_conv(w, sl.conv);
    w.u32(static_cast<uint32_t>(sl.origin.size()));
    for (const auto& o : sl.origin) w.ints(o);
    w.u32(static_cast<uint32_t>(sl.shortcut_map.size()));
    for (const auto& o : sl.shortcut_map) w.ints(o);
  }
  for (const auto& h : zm.heads) write_layer(w, h);
  w.write(path);
}

AnyModel load_model(const std::string& path) {
  Reader r(path);
  const uint32_t ver = r.u32();
  if (ver != kVersion)
    throw IoError("unsupported format version " + std::to_string(ver));
  const uint8_t tag = r.u8();
  if (tag == kTagNetwork) {
    Network net;
    net.task_id = r.str();
    net.input_dim = static_cast<int>(r.u32());
    const uint32_t nl = r.u32();
    for (uint32_t i = 0; i < nl; ++i) net.layers.push_back(read_layer(r));
    net.validate();
    return net;
  }
  if (tag == kTagZipped) {
    ZippedModel zm;
    zm.input_dim = static_cast<int>(r.u32());
    const uint32_t nt = r.u32();
    for (uint32_t i = 0; i < nt; ++i) zm.task_ids.push_back(r.str());
    for (uint32_t i = 0; i < nt; ++i)
      zm.task_input_dims.push_back(static_cast<int>(r.u32()));
    const uint32_t nh = r.u32();
    for (uint32_t i = 0; i < nh; ++i) {
      SharedLayer sl;
      sl.kind = static_cast<LayerKind>(r.u8());
      sl.act = static_cast<Activation>(r.u8());
      sl.in_mult = static_cast<int>(r.u32());
      for (int x : r.ints()) sl.in_units.push_back(static_cast<TaskSet>(x));
      for (int x : r.ints()) sl.units.push_back(static_cast<TaskSet>(x));
      sl.weights = r.mat();
      sl.bias = r.vec();
      sl.mask = r.opt_mat();
      sl.conv = read_conv(r);
      const uint32_t no = r.u32();
      for (uint32_t k = 0; k < no; ++k) sl.origin.push_back(r.ints());
      const uint32_t ns = r.u32();
      for (uint32_t k = 0; k < ns; ++k) sl.shortcut_map.push_back(r.ints());
      zm.hidden.push_back(std::move(sl));
    }
    for (uint32_t i = 0; i < nt; ++i) zm.heads.push_back(read_layer(r));
    zm.validate();
    return zm;
  }
  throw IoError("unknown model tag");
}

Network load_network(const std::string& path) {
  AnyModel m = load_model(path);
  if (auto* n = std::get_if<Network>(&m)) return std::move(*n);
  throw IoError("not a single-task network: " + path);
}

ZippedModel load_zipped(const std::string& path) {
  AnyModel m = load_model(path);
  if (auto* z = std::get_if<ZippedModel>(&m)) return std::move(*z);
  throw IoError("not a zipped model: " + path);
}

}  // namespace mtz

#include "binet/nn.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace binet {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) {
    throw ContractError("ParamStore: duplicate parameter name '" + name + "'");
  }
  t.set_requires_grad(true);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ContractError("ParamStore: no parameter named '" + name + "'");
  }
  return items_[it->second].second;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) {
    (void)name;
    n += t.size();
  }
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, t] : items_) {
    (void)name;
    t.zero_grad();
  }
}

Tensor conv_weight_init(Shape shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  return Tensor::uniform(std::move(shape), rng, -bound, bound);
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

Conv1dLayer::Conv1dLayer(ParamStore& ps, const std::string& prefix, int c_in, int c_out,
                         int k, int stride, int padding, Rng& rng)
    : c_in_(c_in), c_out_(c_out), k_(k), stride_(stride), padding_(padding) {
  if (c_in < 1 || c_out < 1 || k < 1 || stride < 1 || padding < 0) {
    throw ConfigError("Conv1dLayer '" + prefix + "': bad geometry");
  }
  w_ = ps.add(prefix + ".w", conv_weight_init({c_out, c_in, k}, c_in * k, rng));
  b_ = ps.add(prefix + ".b", Tensor::zeros({c_out}));
}

ConvTranspose1dLayer::ConvTranspose1dLayer(ParamStore& ps, const std::string& prefix,
                                           int c_in, int c_out, int k, int stride,
                                           int padding, Rng& rng)
    : c_in_(c_in), c_out_(c_out), k_(k), stride_(stride), padding_(padding) {
  if (c_in < 1 || c_out < 1 || k < 1 || stride < 1 || padding < 0) {
    throw ConfigError("ConvTranspose1dLayer '" + prefix + "': bad geometry");
  }
  w_ = ps.add(prefix + ".w", conv_weight_init({c_in, c_out, k}, c_in * k, rng));
  b_ = ps.add(prefix + ".b", Tensor::zeros({c_out}));
}

DepthwiseConv1dLayer::DepthwiseConv1dLayer(ParamStore& ps, const std::string& prefix,
                                           int channels, int k, int stride, int padding,
                                           Rng& rng)
    : channels_(channels), k_(k), stride_(stride), padding_(padding) {
  if (channels < 1 || k < 1 || stride < 1 || padding < 0) {
    throw ConfigError("DepthwiseConv1dLayer '" + prefix + "': bad geometry");
  }
  w_ = ps.add(prefix + ".w", conv_weight_init({channels, k}, k, rng));
  b_ = ps.add(prefix + ".b", Tensor::zeros({channels}));
}

PReLULayer::PReLULayer(ParamStore& ps, const std::string& prefix, int channels,
                       double init_slope) {
  slope_ = ps.add(prefix + ".slope", Tensor::full({channels}, init_slope));
}

GlobalLayerNormLayer::GlobalLayerNormLayer(ParamStore& ps, const std::string& prefix,
                                           int channels) {
  gamma_ = ps.add(prefix + ".gamma", Tensor::full({channels}, 1.0));
  beta_ = ps.add(prefix + ".beta", Tensor::zeros({channels}));
}

// ---------------------------------------------------------------------------
// MultiScaleBlock
// ---------------------------------------------------------------------------

MultiScaleBlock::MultiScaleBlock(ParamStore& ps, const std::string& prefix, int c_in,
                                 int c_blk, int c_out, int depth, int min_len, Rng& rng)
    : c_in_(c_in), c_blk_(c_blk), c_out_(c_out), depth_(depth) {
  if (depth < 1) {
    throw ConfigError("MultiScaleBlock '" + prefix + "': depth must be >= 1, got " +
                      std::to_string(depth));
  }
  if (min_len < (1 << depth)) {
    throw ConfigError("MultiScaleBlock '" + prefix + "': input length " +
                      std::to_string(min_len) + " shorter than 2^depth = " +
                      std::to_string(1 << depth));
  }
  in_ = Conv1dLayer(ps, prefix + ".in", c_in, c_blk, 1, 1, 0, rng);
  in_act_ = PReLULayer(ps, prefix + ".in_act", c_blk);
  in_norm_ = GlobalLayerNormLayer(ps, prefix + ".in_norm", c_blk);
  stages_.reserve(static_cast<size_t>(depth));
  for (int d = 0; d < depth; ++d) {
    const std::string sp = prefix + ".down" + std::to_string(d);
    Stage st;
    st.dw = DepthwiseConv1dLayer(ps, sp + ".dw", c_blk, 5, 2, 2, rng);
    st.pw = Conv1dLayer(ps, sp + ".pw", c_blk, c_blk, 1, 1, 0, rng);
    st.act = PReLULayer(ps, sp + ".act", c_blk);
    st.norm = GlobalLayerNormLayer(ps, sp + ".norm", c_blk);
    stages_.push_back(std::move(st));
  }
  out_ = Conv1dLayer(ps, prefix + ".out", c_blk, c_out, 1, 1, 0, rng);
}

Tensor MultiScaleBlock::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(0) != c_in_) {
    throw ShapeError("MultiScaleBlock: expected [" + std::to_string(c_in_) +
                     ", F], got " + shape_str(x.shape()));
  }
  if (x.dim(1) < (1 << depth_)) {
    throw ShapeError("MultiScaleBlock: input length " + std::to_string(x.dim(1)) +
                     " shorter than 2^depth = " + std::to_string(1 << depth_));
  }
  // bottom-up: full-resolution feature plus one per downsampling stage
  std::vector<Tensor> levels;
  levels.reserve(stages_.size() + 1);
  levels.push_back(in_norm_.forward(in_act_.forward(in_.forward(x))));
  for (const auto& st : stages_) {
    const Tensor& prev = levels.back();
    levels.push_back(st.norm.forward(st.act.forward(st.pw.forward(st.dw.forward(prev)))));
  }
  // top-down: upsample and merge
  Tensor u = levels.back();
  for (int d = static_cast<int>(stages_.size()) - 1; d >= 0; --d) {
    const Tensor& skip = levels[static_cast<size_t>(d)];
    u = add(skip, upsample_nearest_time(u, skip.dim(1)));
  }
  return out_.forward(u);
}

int64_t MultiScaleBlock::macs(int frames) const {
  int64_t total = in_.macs(frames);
  int len = frames;
  for (const auto& st : stages_) {
    const int next = st.dw.out_len(len);
    total += st.dw.macs(len) + st.pw.macs(next);
    len = next;
  }
  total += out_.macs(frames);
  return total;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'B', 'I', 'N', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void put_u16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) {
    if (pos + n > buf.size()) {
      throw CheckpointFormatError(std::string("checkpoint truncated while reading ") +
                                  what);
    }
  }
  uint16_t u16(const char* what) {
    need(2, what);
    uint16_t v = static_cast<uint8_t>(buf[pos]) |
                 (static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + 1])) << 8);
    pos += 2;
    return v;
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(buf[pos++]);
  }
  double f64(const char* what) {
    need(8, what);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 8;
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
  }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void write_checkpoint(const std::string& path,
                      const std::vector<std::pair<std::string, Tensor>>& items) {
  std::string out;
  out.append(kMagic, sizeof kMagic);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(items.size()));
  for (const auto& [name, t] : items) {
    if (name.size() > 0xffff) {
      throw ContractError("write_checkpoint: name too long: " + name);
    }
    put_u16(out, static_cast<uint16_t>(name.size()));
    out.append(name);
    out.push_back(static_cast<char>(t.rank()));
    for (int ax = 0; ax < t.rank(); ++ax) put_u32(out, static_cast<uint32_t>(t.dim(ax)));
    for (int64_t i = 0; i < t.size(); ++i) put_f64(out, t.data()[i]);
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_checkpoint: cannot open '" + tmp + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write_checkpoint: short write to '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("write_checkpoint: rename to '" + path + "': " + ec.message());
}

std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_checkpoint: cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  r.need(sizeof kMagic, "magic");
  if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointFormatError("checkpoint '" + path + "': bad magic bytes");
  }
  r.pos = sizeof kMagic;
  const uint32_t version = r.u32("version");
  if (version != kVersion) {
    throw CheckpointFormatError("checkpoint '" + path + "': unsupported version " +
                                std::to_string(version));
  }
  const uint32_t count = r.u32("tensor count");
  std::vector<std::pair<std::string, Tensor>> items;
  items.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const uint16_t name_len = r.u16("name length");
    const std::string name = r.bytes(name_len, "name");
    const uint8_t rank = r.u8("rank");
    Shape shape(rank);
    int64_t numel = 1;
    for (uint8_t ax = 0; ax < rank; ++ax) {
      shape[ax] = static_cast<int>(r.u32("dim"));
      if (shape[ax] < 1) {
        throw CheckpointFormatError("checkpoint '" + path + "': tensor '" + name +
                                    "' has nonpositive dim");
      }
      numel *= shape[ax];
    }
    std::vector<double> data(static_cast<size_t>(numel));
    for (int64_t e = 0; e < numel; ++e) data[static_cast<size_t>(e)] = r.f64("payload");
    items.emplace_back(name, Tensor::from(std::move(shape), std::move(data)));
  }
  if (r.pos != buf.size()) {
    throw CheckpointFormatError("checkpoint '" + path + "': trailing bytes");
  }
  return items;
}

void save_params(const ParamStore& store, const std::string& path) {
  write_checkpoint(path, store.items());
}

void load_params(ParamStore& store, const std::string& path) {
  auto items = read_checkpoint(path);

  std::unordered_map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : items) {
    if (!by_name.emplace(name, &t).second) {
      throw CheckpointNameError("checkpoint '" + path + "': duplicate tensor '" +
                                name + "'");
    }
  }
  // validate the full set before mutating anything
  for (const auto& [name, t] : store.items()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CheckpointNameError("checkpoint '" + path + "': missing tensor '" + name +
                                "'");
    }
    if (it->second->shape() != t.shape()) {
      throw CheckpointShapeError("checkpoint '" + path + "': tensor '" + name +
                                 "' has shape " + shape_str(it->second->shape()) +
                                 ", store wants " + shape_str(t.shape()));
    }
  }
  if (by_name.size() != store.items().size()) {
    for (const auto& [name, t] : items) {
      (void)t;
      if (!store.has(name)) {
        throw CheckpointNameError("checkpoint '" + path + "': unexpected tensor '" +
                                  name + "'");
      }
    }
  }

  for (auto& [name, t] : store.items()) {
    const Tensor& src = *by_name.at(name);
    Tensor dst = t;  // aliasing handle
    std::copy(src.data(), src.data() + src.size(), dst.data());
  }
}

}  // namespace binet

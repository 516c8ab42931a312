#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "binet/tensor.hpp"

namespace binet {

// Checkpoint loading failures, distinguishable by type:
//   CheckpointFormatError — bad magic, unsupported version, truncation
//   CheckpointNameError   — tensor set differs from the store
//   CheckpointShapeError  — a named tensor has the wrong shape
class CheckpointFormatError : public FormatError {
 public:
  explicit CheckpointFormatError(const std::string& msg) : FormatError(msg) {}
};
class CheckpointNameError : public FormatError {
 public:
  explicit CheckpointNameError(const std::string& msg) : FormatError(msg) {}
};
class CheckpointShapeError : public FormatError {
 public:
  explicit CheckpointShapeError(const std::string& msg) : FormatError(msg) {}
};

// Ordered registry of trainable tensors. Iteration order is insertion
// order, which fixes checkpoint layout and optimizer slot order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor get(const std::string& name) const;
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  // Sum of element counts over all registered tensors.
  int64_t total_params() const;

  void zero_grads();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Weight init used by every conv-like layer: uniform in
// +-sqrt(1 / (C_in * K)), biases zero.
Tensor conv_weight_init(Shape shape, int fan_in, Rng& rng);

// ---------------------------------------------------------------------------
// Layers. Each constructor registers its tensors into the store under
// `prefix` and keeps aliasing handles. Every layer reports its nominal
// multiply count for one forward at a given input length, so model-level
// cost formulas fold over the actual structure.
// ---------------------------------------------------------------------------

class Conv1dLayer {
 public:
  Conv1dLayer() = default;
  Conv1dLayer(ParamStore& ps, const std::string& prefix, int c_in, int c_out, int k,
              int stride, int padding, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv1d(x, w_, b_, stride_, padding_); }
  int out_len(int t_in) const { return (t_in + 2 * padding_ - k_) / stride_ + 1; }
  int64_t macs(int t_in) const {
    return static_cast<int64_t>(c_out_) * c_in_ * k_ * out_len(t_in);
  }
  // Closed-form parameter count: C_out*C_in*K + C_out.
  int64_t param_count() const { return static_cast<int64_t>(c_out_) * c_in_ * k_ + c_out_; }
  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }

 private:
  Tensor w_, b_;
  int c_in_ = 0, c_out_ = 0, k_ = 0, stride_ = 1, padding_ = 0;
};

class ConvTranspose1dLayer {
 public:
  ConvTranspose1dLayer() = default;
  ConvTranspose1dLayer(ParamStore& ps, const std::string& prefix, int c_in, int c_out,
                       int k, int stride, int padding, Rng& rng);
  Tensor forward(const Tensor& x) const {
    return conv_transpose1d(x, w_, b_, stride_, padding_);
  }
  int out_len(int t_in) const { return (t_in - 1) * stride_ - 2 * padding_ + k_; }
  int64_t macs(int t_in) const { return static_cast<int64_t>(c_in_) * c_out_ * k_ * t_in; }
  int64_t param_count() const { return static_cast<int64_t>(c_in_) * c_out_ * k_ + c_out_; }
  const Tensor& bias() const { return b_; }

 private:
  Tensor w_, b_;
  int c_in_ = 0, c_out_ = 0, k_ = 0, stride_ = 1, padding_ = 0;
};

class DepthwiseConv1dLayer {
 public:
  DepthwiseConv1dLayer() = default;
  DepthwiseConv1dLayer(ParamStore& ps, const std::string& prefix, int channels, int k,
                       int stride, int padding, Rng& rng);
  Tensor forward(const Tensor& x) const {
    return depthwise_conv1d(x, w_, b_, stride_, padding_);
  }
  int out_len(int t_in) const { return (t_in + 2 * padding_ - k_) / stride_ + 1; }
  int64_t macs(int t_in) const { return static_cast<int64_t>(channels_) * k_ * out_len(t_in); }
  int64_t param_count() const { return static_cast<int64_t>(channels_) * k_ + channels_; }

 private:
  Tensor w_, b_;
  int channels_ = 0, k_ = 0, stride_ = 1, padding_ = 0;
};

class PReLULayer {
 public:
  PReLULayer() = default;
  PReLULayer(ParamStore& ps, const std::string& prefix, int channels,
             double init_slope = 0.25);
  Tensor forward(const Tensor& x) const { return prelu(x, slope_); }
  int64_t param_count() const { return slope_.size(); }

 private:
  Tensor slope_;
};

class GlobalLayerNormLayer {
 public:
  GlobalLayerNormLayer() = default;
  GlobalLayerNormLayer(ParamStore& ps, const std::string& prefix, int channels);
  Tensor forward(const Tensor& x) const { return global_layer_norm(x, gamma_, beta_); }
  int64_t param_count() const { return gamma_.size() + beta_.size(); }

 private:
  Tensor gamma_, beta_;
};

// U-Net-style 1-D multi-scale feature generator: a pointwise input
// projection, `depth` stride-2 stages (depthwise K=5 conv, pointwise
// mix, PReLU, global layer norm), a top-down pathway of nearest-neighbor
// upsamples with additive merges, and a pointwise output projection.
// Temporal length is preserved; output channels are a constructor choice.
class MultiScaleBlock {
 public:
  MultiScaleBlock() = default;
  // min_len: the shortest input the block must accept; must be >= 2^depth.
  MultiScaleBlock(ParamStore& ps, const std::string& prefix, int c_in, int c_blk,
                  int c_out, int depth, int min_len, Rng& rng);

  Tensor forward(const Tensor& x) const;
  int64_t macs(int frames) const;
  int depth() const { return depth_; }
  int receptive_scale() const { return 1 << depth_; }

 private:
  struct Stage {
    DepthwiseConv1dLayer dw;
    Conv1dLayer pw;
    PReLULayer act;
    GlobalLayerNormLayer norm;
  };
  Conv1dLayer in_;
  PReLULayer in_act_;
  GlobalLayerNormLayer in_norm_;
  std::vector<Stage> stages_;
  Conv1dLayer out_;
  int c_in_ = 0, c_blk_ = 0, c_out_ = 0, depth_ = 0;
};

// ---------------------------------------------------------------------------
// Named-tensor container file. Layout: magic "BINCKPT1", u32 LE
// version (=1), u32 LE tensor count; per tensor: u16 LE name length,
// UTF-8 name, u8 rank, u32 LE dims, then the f64 LE payload.
// ---------------------------------------------------------------------------

void write_checkpoint(const std::string& path,
                      const std::vector<std::pair<std::string, Tensor>>& items);
std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::string& path);

// Strict round trip for a parameter store: the file must contain exactly
// the store's names with exactly the store's shapes. On any error the
// store is left untouched.
void save_params(const ParamStore& store, const std::string& path);
void load_params(ParamStore& store, const std::string& path);

}  // namespace binet

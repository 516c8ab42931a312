#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "binet/nn.hpp"
#include "binet/tensor.hpp"

namespace binet {

// Ablation variants: the full fusion scheme, a tokenless joint
// generator, modality-local tokens with no cross-modal mixing, and the
// two single-token reductions.
enum class Variant { full, no_bottleneck, no_c, no_cA, no_cV };

Variant variant_from_string(const std::string& s);
std::string variant_name(Variant v);

struct ModelConfig {
  int M = 2;        // speakers
  int T = 16000;    // waveform samples
  int K_A = 32;     // audio encoder kernel
  int S_A = 16;     // audio encoder stride
  int C_A = 64;     // audio latent channels
  int F_A = 999;    // audio latent frames, derived from T/K_A/S_A
  int C_V = 32;     // video latent channels
  int F_V = 50;     // raw cue frames
  int C_H = 16;     // fusion token channels
  int R = 4;        // fusion iterations
  int D = 3;        // multiscale depth
  Variant variant = Variant::full;
  int d_v = 8;      // cue channels per speaker
  int C_blk = 64;   // generator internal width

  static int derived_f_a(int T, int K_A, int S_A) { return (T - K_A) / S_A + 1; }

  // Collects every violation instead of stopping at the first.
  std::vector<std::string> validate() const;
  // Throws ConfigError listing all violations.
  void check() const;

  // Flat `key = value` text, one field per line.
  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
  static ModelConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;

  bool operator==(const ModelConfig&) const = default;
};

// Per-iteration carrier. Token tensors that a variant removes are left
// as default (undefined) handles.
struct FusionState {
  Tensor a_hat;  // [C_A, F_A]
  Tensor v_hat;  // [C_V, F_A]
  Tensor cA;     // [C_H, F_A]
  Tensor cV;     // [C_H, F_A]
  Tensor c;      // [C_H, F_A]
  int i = 0;
};

struct IterationRun {
  FusionState final_state;
  std::vector<FusionState> taps;  // states after steps 1..R when requested
};

// Test seam: replaces the generator stacks inside fusion_step. Receives
// the branch tag ('A' audio, 'V' video, 'J' joint) and the exact stacked
// input; must return a tensor with the branch's output channel count.
using GeneratorProbe = std::function<Tensor(char branch, const Tensor& input)>;

class BinModel {
 public:
  BinModel(const ModelConfig& cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // [1, T] -> [C_A, F_A]; called once per example, outside the iteration.
  Tensor encode_audio(const Tensor& s) const;
  // [M*d_v, F_V] -> [C_V, F_A]
  Tensor encode_video(const Tensor& v) const;

  FusionState init_fusion_state() const;
  FusionState fusion_step(const FusionState& st, const Tensor& eA,
                          const Tensor& eV) const;
  IterationRun run_iterations(const Tensor& eA, const Tensor& eV, bool taps) const;

  // [M, C_A, F_A], entries >= 0.
  Tensor predict_mask(const Tensor& a_hat, const Tensor& v_hat) const;

  // Masked embedding [C_A, F_A] -> waveform [T] (decoder output
  // center-cropped or zero-padded to exactly T).
  Tensor decode(const Tensor& masked) const;

  // Full pipeline: mixture [1, T] + cues [M*d_v, F_V] -> estimates [M, T].
  Tensor separate(const Tensor& s, const Tensor& v) const;

  // Mask of every iteration's tapped features, in iteration order.
  std::vector<Tensor> per_iteration_masks(const Tensor& s, const Tensor& v) const;

  // Analytic multiply-accumulate count for one separate() forward.
  int64_t count_macs() const;
  // Same, but only the R-independent encoder/decoder portion.
  int64_t count_macs_encoder_decoder() const;
  // Cost of a single fusion iteration.
  int64_t count_macs_per_iteration() const;

  void set_generator_probe(GeneratorProbe probe) { probe_ = std::move(probe); }

 private:
  Tensor run_generator(char branch, const Tensor& input) const;

  ModelConfig cfg_;
  ParamStore params_;

  Conv1dLayer enc_a_;
  Conv1dLayer enc_v0_, enc_v1_;
  PReLULayer enc_v_act0_, enc_v_act1_;
  Tensor token_a_, token_v_;  // undefined for variants that drop them

  // generator = pointwise mixing conv over the stacked input, then a
  // multi-scale block emitting feature+token channels
  Conv1dLayer pre_a_, pre_v_, pre_j_;
  MultiScaleBlock blk_a_, blk_v_, blk_j_;

  Conv1dLayer predictor_;
  ConvTranspose1dLayer dec_;

  GeneratorProbe probe_;
};

// Convenience constructor used by tools and tests.
BinModel build_model(const ModelConfig& cfg, uint64_t seed);

}  // namespace binet

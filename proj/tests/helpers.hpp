#pragma once

// Shared test utilities: reference implementations kept deliberately
// naive (quadruple loops, no tap-range tricks) so they can serve as
// independent oracles for the optimized kernels.

#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>
#include <vector>

#include "binet/random.hpp"
#include "binet/tensor.hpp"

namespace testutil {

// Self-cleaning scratch directory, unique per instance within a process.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("binet_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(next_id()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }

 private:
  static int next_id() {
    static int counter = 0;
    return counter++;
  }
};

inline binet::Tensor rand_tensor(binet::Shape shape, binet::Rng& rng, double lo = -1.0,
                                 double hi = 1.0) {
  return binet::Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Cross-correlation, one multiply at a time. Out-of-range taps read
// zero (the padded region).
inline binet::Tensor naive_conv1d(const binet::Tensor& input,
                                  const binet::Tensor& weight,
                                  const binet::Tensor& bias, int stride, int padding) {
  const int c_in = input.dim(0), t_in = input.dim(1);
  const int c_out = weight.dim(0), k = weight.dim(2);
  const int t_out = (t_in + 2 * padding - k) / stride + 1;
  std::vector<double> out(static_cast<size_t>(c_out) * t_out);
  for (int oc = 0; oc < c_out; ++oc)
    for (int t = 0; t < t_out; ++t) {
      double acc = bias.at({oc});
      for (int ic = 0; ic < c_in; ++ic)
        for (int kk = 0; kk < k; ++kk) {
          const int pos = t * stride + kk - padding;
          if (pos < 0 || pos >= t_in) continue;
          acc += input.at({ic, pos}) * weight.at({oc, ic, kk});
        }
      out[static_cast<size_t>(oc) * t_out + t] = acc;
    }
  return binet::Tensor::from({c_out, t_out}, std::move(out));
}

inline binet::Tensor naive_depthwise_conv1d(const binet::Tensor& input,
                                            const binet::Tensor& weight,
                                            const binet::Tensor& bias, int stride,
                                            int padding) {
  const int channels = input.dim(0), t_in = input.dim(1), k = weight.dim(1);
  const int t_out = (t_in + 2 * padding - k) / stride + 1;
  std::vector<double> out(static_cast<size_t>(channels) * t_out);
  for (int c = 0; c < channels; ++c)
    for (int t = 0; t < t_out; ++t) {
      double acc = bias.at({c});
      for (int kk = 0; kk < k; ++kk) {
        const int pos = t * stride + kk - padding;
        if (pos < 0 || pos >= t_in) continue;
        acc += input.at({c, pos}) * weight.at({c, kk});
      }
      out[static_cast<size_t>(c) * t_out + t] = acc;
    }
  return binet::Tensor::from({channels, t_out}, std::move(out));
}

// Scatter form: every input frame spreads K taps into the output.
inline binet::Tensor naive_conv_transpose1d(const binet::Tensor& input,
                                            const binet::Tensor& weight,
                                            const binet::Tensor& bias, int stride,
                                            int padding) {
  const int c_in = input.dim(0), t_in = input.dim(1);
  const int c_out = weight.dim(1), k = weight.dim(2);
  const int t_out = (t_in - 1) * stride - 2 * padding + k;
  std::vector<double> out(static_cast<size_t>(c_out) * t_out);
  for (int oc = 0; oc < c_out; ++oc)
    for (int t = 0; t < t_out; ++t) out[static_cast<size_t>(oc) * t_out + t] = bias.at({oc});
  for (int ic = 0; ic < c_in; ++ic)
    for (int t = 0; t < t_in; ++t)
      for (int oc = 0; oc < c_out; ++oc)
        for (int kk = 0; kk < k; ++kk) {
          const int pos = t * stride + kk - padding;
          if (pos < 0 || pos >= t_out) continue;
          out[static_cast<size_t>(oc) * t_out + pos] +=
              input.at({ic, t}) * weight.at({ic, oc, kk});
        }
  return binet::Tensor::from({c_out, t_out}, std::move(out));
}

inline double max_abs_diff(const binet::Tensor& a, const binet::Tensor& b) {
  double worst = 0.0;
  for (int64_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

}  // namespace testutil

#pragma once

#include <cstdint>
#include <vector>

#include "binet/model.hpp"

namespace binet {

// Reported values are clamped to +-60 dB so aggregates stay finite;
// improvements (a difference of two uncapped terms) clamp at +-120 dB.
inline constexpr double kSiSdrCapDb = 60.0;
inline constexpr double kSiSdriCapDb = 120.0;

// Scale-invariant signal-to-distortion ratio in dB: the reference is
// rescaled by the projection coefficient of est onto ref, then the
// energy ratio of scaled reference to residual is taken.
double si_sdr(const std::vector<double>& est, const std::vector<double>& ref);

// Improvement of est over scoring the raw mixture as the estimate.
// Both terms are computed without the +-60 cap; only the difference is
// clamped. Two infinite terms of equal sign cancel to 0.
double si_sdri(const std::vector<double>& est, const std::vector<double>& ref,
               const std::vector<double>& mix);

struct SpeakerScore {
  int example = 0;
  int speaker = 0;
  double si_sdr = 0.0;
  double si_sdri = 0.0;
};

// Per-speaker rows plus population-statistics aggregates.
class MetricReport {
 public:
  void add(int example, int speaker, double sdr_db, double sdri_db);
  const std::vector<SpeakerScore>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  double mean_si_sdr() const;
  double std_si_sdr() const;
  double mean_si_sdri() const;
  double std_si_sdri() const;

  // Mean SI-SDRi of masks tapped after each fusion pass, length R when set.
  std::vector<double>& per_iteration() { return per_iteration_; }
  const std::vector<double>& per_iteration() const { return per_iteration_; }

 private:
  std::vector<SpeakerScore> rows_;
  std::vector<double> per_iteration_;
};

// Trainable parameter count; independent of the iteration count.
int64_t count_params(const BinModel& model);

// Analytic multiply-accumulate count of one separate() forward.
int64_t count_macs(const BinModel& model);

}  // namespace binet

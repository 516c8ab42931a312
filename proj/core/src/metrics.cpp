#include "binet/metrics.hpp"

#include <cmath>
#include <limits>

namespace binet {

namespace {

// Uncapped ratio in dB; +-inf on a zero residual / zero projection.
double si_sdr_raw(const std::vector<double>& est, const std::vector<double>& ref) {
  if (est.size() != ref.size()) {
    throw ShapeError("si_sdr: estimate has " + std::to_string(est.size()) +
                     " samples, reference has " + std::to_string(ref.size()));
  }
  if (est.empty()) throw ShapeError("si_sdr: empty waveforms");
  double ref_energy = 0.0, cross = 0.0;
  for (size_t i = 0; i < ref.size(); ++i) {
    ref_energy += ref[i] * ref[i];
    cross += est[i] * ref[i];
  }
  if (ref_energy == 0.0) {
    throw DomainError("si_sdr: reference is identically zero");
  }
  const double alpha = cross / ref_energy;
  const double signal = alpha * alpha * ref_energy;
  double residual = 0.0;
  for (size_t i = 0; i < ref.size(); ++i) {
    const double d = est[i] - alpha * ref[i];
    residual += d * d;
  }
  if (signal == 0.0) return -std::numeric_limits<double>::infinity();
  if (residual == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(signal / residual);
}

double clamp_db(double v, double cap) {
  if (v > cap) return cap;
  if (v < -cap) return -cap;
  return v;
}

}  // namespace

double si_sdr(const std::vector<double>& est, const std::vector<double>& ref) {
  return clamp_db(si_sdr_raw(est, ref), kSiSdrCapDb);
}

double si_sdri(const std::vector<double>& est, const std::vector<double>& ref,
               const std::vector<double>& mix) {
  const double e = si_sdr_raw(est, ref);
  const double m = si_sdr_raw(mix, ref);
  if (std::isinf(e) && std::isinf(m) && e == m) return 0.0;
  return clamp_db(e - m, kSiSdriCapDb);
}

void MetricReport::add(int example, int speaker, double sdr_db, double sdri_db) {
  rows_.push_back({example, speaker, sdr_db, sdri_db});
}

namespace {

double report_mean(const std::vector<SpeakerScore>& rows,
                   double SpeakerScore::*field) {
  if (rows.empty()) throw ContractError("MetricReport: aggregate over empty report");
  double s = 0.0;
  for (const auto& r : rows) s += r.*field;
  return s / static_cast<double>(rows.size());
}

double report_std(const std::vector<SpeakerScore>& rows, double SpeakerScore::*field) {
  const double mu = report_mean(rows, field);
  double s = 0.0;
  for (const auto& r : rows) {
    const double d = r.*field - mu;
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(rows.size()));
}

}  // namespace

double MetricReport::mean_si_sdr() const {
  return report_mean(rows_, &SpeakerScore::si_sdr);
}
double MetricReport::std_si_sdr() const {
  return report_std(rows_, &SpeakerScore::si_sdr);
}
double MetricReport::mean_si_sdri() const {
  return report_mean(rows_, &SpeakerScore::si_sdri);
}
double MetricReport::std_si_sdri() const {
  return report_std(rows_, &SpeakerScore::si_sdri);
}

int64_t count_params(const BinModel& model) { return model.params().total_params(); }

int64_t count_macs(const BinModel& model) { return model.count_macs(); }

}  // namespace binet

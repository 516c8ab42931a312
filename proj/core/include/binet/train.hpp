#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "binet/data.hpp"
#include "binet/metrics.hpp"
#include "binet/model.hpp"

namespace binet {

struct TrainConfig {
  int epochs = 1;
  int batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 5.0;  // global-norm gradient clip
  uint64_t seed = 1;
  int checkpoint_every = 1;  // epochs between checkpoint writes
  int eval_every = 1;        // epochs between validation passes

  std::vector<std::string> validate() const;
  void check() const;
  std::string serialize() const;
  static TrainConfig parse(const std::string& text);
  static TrainConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;

  bool operator==(const TrainConfig&) const = default;
};

// Mean over speakers of the negative scale-invariant SDR, built from
// differentiable primitives. No dB cap; the floor inside the log
// keeps the value finite at perfect reconstruction (with floor = 0 the
// value matches the mean metric up to rounding). A zero-power
// reference row is a DomainError (the trainer skips such examples).
Tensor separation_loss(const Tensor& est, const Tensor& ref, double floor = 1e-8);

// True when any reference row has zero power (untrainable example).
bool has_silent_reference(const AvsExample& ex);

struct AdamState {
  int64_t t = 0;
  std::map<std::string, std::vector<double>> m, v;
};

// Global-norm clip at cfg.clip, then one bias-corrected adaptive-moment
// update on every parameter. Missing gradients count as zero. Returns
// the pre-clip global gradient norm.
double optimizer_step(ParamStore& params, AdamState& state, const TrainConfig& cfg);

struct TrainLogRow {
  int64_t step = 0;  // 1-based, monotone across epochs
  int epoch = 0;     // 0-based
  double loss = 0.0;
  double val_si_sdri = std::numeric_limits<double>::quiet_NaN();  // NaN: no eval
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  double wall_seconds = 0.0;
  uint64_t shuffle_digest = 0;  // digest of the per-epoch shuffle seeds
  double best_val_si_sdri = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = -1;

  // header: step,epoch,loss,val_si_sdri (empty when the row has no eval)
  std::string to_csv() const;
  void save_csv(const std::string& path) const;
};

// Per-(example, speaker) SI-SDR / SI-SDRi of model.separate over the
// given manifest entries, in index order. Rows carry the manifest index
// in their example field.
MetricReport evaluate(const BinModel& model, const Manifest& man,
                      const std::vector<size_t>& indices);

// Trains in place. Deterministic: the example order of epoch e is a
// Fisher-Yates shuffle seeded from (cfg.seed, e), so a run resumed from
// an epoch-boundary checkpoint continues the exact same trajectory.
// When out_dir is nonempty, writes last.ckpt + trainer.ckpt per the
// checkpoint cadence, best.ckpt whenever validation improves, and
// train_log.csv at the end. With resume=true, restores model and
// optimizer from out_dir and continues to cfg.epochs; the returned log
// then holds only the new rows. A non-finite loss aborts with a
// DomainError naming the offending step and batch examples.
TrainLog train(BinModel& model, const Manifest& man, const TrainConfig& cfg,
               const std::string& out_dir, bool resume = false);

struct TraceRow {
  int iteration = 0;  // 1-based
  double si_sdri_mean = 0.0;
  double si_sdri_std = 0.0;
};

// Separation quality after each fusion iteration: decodes every
// iteration's mask over the given examples and scores SI-SDRi across
// all (example, speaker) pairs. Exactly R rows.
std::vector<TraceRow> iteration_trace(const BinModel& model, const Manifest& man,
                                      const std::vector<size_t>& indices);

// header: iteration,si_sdri_mean,si_sdri_std
std::string trace_to_csv(const std::vector<TraceRow>& rows);

}  // namespace binet

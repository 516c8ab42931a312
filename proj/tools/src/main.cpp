#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "binet/data.hpp"
#include "binet/metrics.hpp"
#include "binet/model.hpp"
#include "binet/nn.hpp"
#include "binet/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace binet;

namespace {

constexpr uint64_t kModelInitTag = 101;  // model init stream, distinct from shuffles

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "' for digesting");
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof buf);
    const std::streamsize n = f.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Creates the run directory, refusing to reuse a non-empty one without
// --force.
void prepare_out_dir(const std::string& out, bool force) {
  if (out.empty()) throw ConfigError("--out is required");
  if (fs::exists(out)) {
    if (!fs::is_directory(out)) {
      throw ConfigError("output path '" + out + "' exists and is not a directory");
    }
    if (!fs::is_empty(out) && !force) {
      throw ConfigError("output directory '" + out +
                        "' is not empty; pass --force to overwrite");
    }
  }
  fs::create_directories(out);
}

// Collects everything needed to re-execute a run, then writes
// <out>/run.json: resolved configs verbatim, inputs and artifacts with
// content digests.
class RunRecorder {
 public:
  RunRecorder(std::string subcommand, int argc, char** argv)
      : started_(std::chrono::system_clock::now()) {
    j_["subcommand"] = std::move(subcommand);
    std::vector<std::string> args;
    for (int i = 0; i < argc; ++i) args.emplace_back(argv[i]);
    j_["argv"] = args;
  }

  void config(const std::string& name, const std::string& serialized) {
    j_["config"][name] = serialized;
  }
  void input(const std::string& name, const std::string& path) {
    j_["inputs"][name] = {{"path", path}, {"fnv1a64", hex64(fnv1a64_file(path))}};
  }
  void artifact(const std::string& name, const std::string& path) {
    artifacts_.emplace_back(name, path);
  }
  template <typename T>
  void set(const std::string& key, const T& value) {
    j_[key] = value;
  }

  void write(const std::string& out_dir) {
    for (const auto& [name, path] : artifacts_) {
      j_["artifacts"][name] = {{"path", path}, {"fnv1a64", hex64(fnv1a64_file(path))}};
    }
    const std::string path = (fs::path(out_dir) / "run.json").string();
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << j_.dump(2) << "\n";
    if (!f) throw IoError("short write to '" + path + "'");
  }

 private:
  json j_;
  std::vector<std::pair<std::string, std::string>> artifacts_;
  std::chrono::system_clock::time_point started_;
};

// Model config for a corpus: from file when given, otherwise defaults
// shaped to the corpus; then variant / iteration overrides.
ModelConfig resolve_model_config(const CorpusSpec& spec, const std::string& model_path,
                                 const std::string& variant, int iterations) {
  ModelConfig mc;
  if (!model_path.empty()) {
    mc = ModelConfig::load_file(model_path);
  } else {
    mc.T = spec.T;
    mc.M = spec.M;
    mc.d_v = spec.d_v;
    mc.F_V = spec.F_V;
    mc.F_A = ModelConfig::derived_f_a(mc.T, mc.K_A, mc.S_A);
  }
  if (!variant.empty()) mc.variant = variant_from_string(variant);
  if (iterations > 0) mc.R = iterations;
  if (mc.T != spec.T || mc.M != spec.M || mc.d_v != spec.d_v || mc.F_V != spec.F_V) {
    throw ConfigError(
        "model config does not match the corpus: model (T=" + std::to_string(mc.T) +
        ", M=" + std::to_string(mc.M) + ", d_v=" + std::to_string(mc.d_v) +
        ", F_V=" + std::to_string(mc.F_V) + ") vs corpus (T=" + std::to_string(spec.T) +
        ", M=" + std::to_string(spec.M) + ", d_v=" + std::to_string(spec.d_v) +
        ", F_V=" + std::to_string(spec.F_V) + ")");
  }
  mc.check();
  return mc;
}

// For commands that read a checkpoint: the model config defaults to the
// model.cfg written next to it by the training run.
std::string resolve_model_path(const std::string& model_flag,
                               const std::string& checkpoint) {
  if (!model_flag.empty()) return model_flag;
  const fs::path sibling = fs::path(checkpoint).parent_path() / "model.cfg";
  if (!fs::exists(sibling)) {
    throw ConfigError("no --model given and '" + sibling.string() + "' does not exist");
  }
  return sibling.string();
}

std::vector<size_t> checked_split(const Manifest& man, const std::string& split) {
  auto idx = split_indices(man, split);
  if (idx.empty()) {
    throw ConfigError("split '" + split + "' of corpus '" + man.dir + "' is empty");
  }
  return idx;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << text;
  if (!f) throw IoError("short write to '" + path + "'");
}

// ---------------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string config, out;
  uint64_t seed = 0;
  bool has_seed = false;
  bool force = false;
};

int cmd_synth_data(const SynthArgs& a, int argc, char** argv) {
  CorpusSpec spec = a.config.empty() ? CorpusSpec{} : CorpusSpec::load_file(a.config);
  if (a.has_seed) spec.master_seed = a.seed;
  spec.check();
  prepare_out_dir(a.out, a.force);
  generate_corpus(spec, a.out);

  RunRecorder rec("synth-data", argc, argv);
  rec.config("corpus", spec.serialize());
  rec.set("examples", spec.total());
  rec.artifact("manifest", (fs::path(a.out) / "manifest.jsonl").string());
  rec.artifact("corpus_spec", (fs::path(a.out) / "corpus.cfg").string());
  rec.artifact("cue_masters", (fs::path(a.out) / "cues.bin").string());
  rec.write(a.out);
  std::printf("wrote %d examples to %s\n", spec.total(), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus, out, config, model, variant;
  int iterations = 0;
  uint64_t seed = 0;
  bool has_seed = false;
  bool force = false;
  bool resume = false;
};

int cmd_train(const TrainArgs& a, int argc, char** argv) {
  Manifest man = load_manifest(a.corpus);
  TrainConfig tc = a.config.empty() ? TrainConfig{} : TrainConfig::load_file(a.config);
  if (a.has_seed) tc.seed = a.seed;
  tc.check();
  ModelConfig mc = resolve_model_config(man.spec, a.model, a.variant, a.iterations);

  if (a.resume) {
    if (!fs::exists(fs::path(a.out) / "last.ckpt")) {
      throw ConfigError("--resume: no checkpoint under '" + a.out + "'");
    }
  } else {
    prepare_out_dir(a.out, a.force);
  }
  mc.save_file((fs::path(a.out) / "model.cfg").string());
  tc.save_file((fs::path(a.out) / "train.cfg").string());

  BinModel model(mc, derive_seed(tc.seed, kModelInitTag));
  TrainLog log = train(model, man, tc, a.out, a.resume);

  RunRecorder rec("train", argc, argv);
  rec.config("model", mc.serialize());
  rec.config("train", tc.serialize());
  rec.config("corpus", man.spec.serialize());
  rec.set("corpus_dir", a.corpus);
  rec.set("resume", a.resume);
  rec.input("manifest", (fs::path(a.corpus) / "manifest.jsonl").string());
  rec.artifact("model_config", (fs::path(a.out) / "model.cfg").string());
  rec.artifact("train_config", (fs::path(a.out) / "train.cfg").string());
  rec.artifact("last_checkpoint", (fs::path(a.out) / "last.ckpt").string());
  rec.artifact("trainer_state", (fs::path(a.out) / "trainer.ckpt").string());
  if (fs::exists(fs::path(a.out) / "best.ckpt")) {
    rec.artifact("best_checkpoint", (fs::path(a.out) / "best.ckpt").string());
  }
  rec.artifact("train_log", (fs::path(a.out) / "train_log.csv").string());
  rec.write(a.out);

  const double last_loss = log.rows.empty() ? 0.0 : log.rows.back().loss;
  std::printf("trained %zu steps in %.1f s; final loss %s", log.rows.size(),
              log.wall_seconds, fmt_double(last_loss).c_str());
  if (!std::isnan(log.best_val_si_sdri)) {
    std::printf("; best val SI-SDRi %s dB (epoch %d)",
                fmt_double(log.best_val_si_sdri).c_str(), log.best_epoch);
  }
  std::printf("\n");
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string corpus, checkpoint, model, split = "test", out;
  bool force = false;
};

std::string eval_csv(const MetricReport& rep, const Manifest& man) {
  std::ostringstream os;
  os << "example_id,speaker,si_sdr,si_sdri\n";
  for (const auto& row : rep.rows()) {
    os << man.entries[static_cast<size_t>(row.example)].id << "," << row.speaker << ","
       << fmt_double(row.si_sdr) << "," << fmt_double(row.si_sdri) << "\n";
  }
  return os.str();
}

int cmd_eval(const EvalArgs& a, int argc, char** argv) {
  Manifest man = load_manifest(a.corpus);
  const std::string model_path = resolve_model_path(a.model, a.checkpoint);
  ModelConfig mc = resolve_model_config(man.spec, model_path, "", 0);
  BinModel model(mc, 0);
  load_params(model.params(), a.checkpoint);

  const auto idx = checked_split(man, a.split);
  MetricReport rep = evaluate(model, man, idx);

  prepare_out_dir(a.out, a.force);
  write_text((fs::path(a.out) / "eval.csv").string(), eval_csv(rep, man));

  RunRecorder rec("eval", argc, argv);
  rec.config("model", mc.serialize());
  rec.config("corpus", man.spec.serialize());
  rec.set("corpus_dir", a.corpus);
  rec.set("split", a.split);
  rec.set("mean_si_sdr", rep.mean_si_sdr());
  rec.set("mean_si_sdri", rep.mean_si_sdri());
  rec.set("std_si_sdri", rep.std_si_sdri());
  rec.input("checkpoint", a.checkpoint);
  rec.input("manifest", (fs::path(a.corpus) / "manifest.jsonl").string());
  rec.artifact("eval_csv", (fs::path(a.out) / "eval.csv").string());
  rec.write(a.out);

  std::printf("%s split: %zu rows; mean SI-SDR %s dB; mean SI-SDRi %s dB (std %s)\n",
              a.split.c_str(), rep.size(), fmt_double(rep.mean_si_sdr()).c_str(),
              fmt_double(rep.mean_si_sdri()).c_str(),
              fmt_double(rep.std_si_sdri()).c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string corpus, out, config, model;
  int iterations = 0;
  int seeds = 3;
  uint64_t seed = 0;
  bool has_seed = false;
  bool force = false;
};

int cmd_ablate(const AblateArgs& a, int argc, char** argv) {
  Manifest man = load_manifest(a.corpus);
  TrainConfig base = a.config.empty() ? TrainConfig{} : TrainConfig::load_file(a.config);
  if (a.has_seed) base.seed = a.seed;
  base.check();
  if (a.seeds < 1) throw ConfigError("--seeds must be >= 1");
  const auto test_idx = checked_split(man, "test");
  prepare_out_dir(a.out, a.force);

  const Variant variants[] = {Variant::full, Variant::no_c, Variant::no_cA,
                              Variant::no_cV, Variant::no_bottleneck};
  std::ostringstream csv;
  csv << "variant,si_sdri_mean,si_sdri_std,seed\n";
  RunRecorder rec("ablate", argc, argv);

  for (Variant v : variants) {
    const std::string vname = variant_name(v);
    for (int k = 0; k < a.seeds; ++k) {
      TrainConfig tc = base;
      tc.seed = base.seed + static_cast<uint64_t>(k);
      ModelConfig mc = resolve_model_config(man.spec, a.model, vname, a.iterations);
      BinModel model(mc, derive_seed(tc.seed, kModelInitTag));

      const std::string run_dir =
          (fs::path(a.out) / (vname + "_s" + std::to_string(tc.seed))).string();
      fs::create_directories(run_dir);
      mc.save_file((fs::path(run_dir) / "model.cfg").string());
      tc.save_file((fs::path(run_dir) / "train.cfg").string());
      TrainLog log = train(model, man, tc, run_dir);

      MetricReport rep = evaluate(model, man, test_idx);
      csv << vname << "," << fmt_double(rep.mean_si_sdri()) << ","
          << fmt_double(rep.std_si_sdri()) << "," << tc.seed << "\n";
      std::printf("%-13s seed %llu: test SI-SDRi %7.3f dB (std %.3f), %zu steps, %.1f s\n",
                  vname.c_str(), static_cast<unsigned long long>(tc.seed),
                  rep.mean_si_sdri(), rep.std_si_sdri(), log.rows.size(),
                  log.wall_seconds);
      rec.artifact(vname + "_s" + std::to_string(tc.seed) + "_checkpoint",
                   (fs::path(run_dir) / "last.ckpt").string());
    }
  }

  write_text((fs::path(a.out) / "ablation.csv").string(), csv.str());
  rec.config("train", base.serialize());
  rec.config("corpus", man.spec.serialize());
  rec.set("corpus_dir", a.corpus);
  rec.set("seeds", a.seeds);
  rec.input("manifest", (fs::path(a.corpus) / "manifest.jsonl").string());
  rec.artifact("ablation_csv", (fs::path(a.out) / "ablation.csv").string());
  rec.write(a.out);
  std::printf("wrote %s\n", (fs::path(a.out) / "ablation.csv").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// trace
// ---------------------------------------------------------------------------

struct TraceArgs {
  std::string corpus, checkpoint, model, split = "test", out;
  int examples = 4;
  bool force = false;
};

int cmd_trace(const TraceArgs& a, int argc, char** argv) {
  Manifest man = load_manifest(a.corpus);
  const std::string model_path = resolve_model_path(a.model, a.checkpoint);
  ModelConfig mc = resolve_model_config(man.spec, model_path, "", 0);
  BinModel model(mc, 0);
  load_params(model.params(), a.checkpoint);

  const auto idx = checked_split(man, a.split);
  const auto rows = iteration_trace(model, man, idx);
  prepare_out_dir(a.out, a.force);
  write_text((fs::path(a.out) / "trace.csv").string(), trace_to_csv(rows));

  RunRecorder rec("trace", argc, argv);
  // per-example mask dumps for offline mask-progression plots
  const size_t dumps = std::min(idx.size(), static_cast<size_t>(std::max(a.examples, 0)));
  {
    NoGradGuard ng;
    for (size_t k = 0; k < dumps; ++k) {
      AvsExample ex = load_example(man, idx[k]);
      auto masks = model.per_iteration_masks(mixture_tensor(ex), cues_tensor(ex));
      std::vector<std::pair<std::string, Tensor>> items;
      for (size_t i = 0; i < masks.size(); ++i) {
        items.emplace_back("iter" + std::to_string(i + 1), masks[i]);
      }
      const std::string dump_path =
          (fs::path(a.out) / ("masks_" + man.entries[idx[k]].id + ".bin")).string();
      write_checkpoint(dump_path, items);
      rec.artifact("masks_" + man.entries[idx[k]].id, dump_path);
    }
  }

  rec.config("model", mc.serialize());
  rec.config("corpus", man.spec.serialize());
  rec.set("corpus_dir", a.corpus);
  rec.set("split", a.split);
  rec.input("checkpoint", a.checkpoint);
  rec.artifact("trace_csv", (fs::path(a.out) / "trace.csv").string());
  rec.write(a.out);

  for (const auto& row : rows) {
    std::printf("iteration %d: SI-SDRi %7.3f dB (std %.3f)\n", row.iteration,
                row.si_sdri_mean, row.si_sdri_std);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

struct GradCheckArgs {
  std::string out;
  uint64_t seed = 7;
  bool force = false;
};

Tensor rand_t(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return Tensor::uniform(std::move(shape), rng, lo, hi);
}

// Uniform magnitudes in [0.2, 1.2] with random signs: keeps relu/prelu
// inputs away from their kink under finite-difference probing.
Tensor rand_away_from_zero(Rng& rng, Shape shape) {
  Tensor t = rand_t(rng, std::move(shape), 0.2, 1.2);
  for (int64_t i = 0; i < t.size(); ++i) {
    if (rng.next_double() < 0.5) t.data()[i] = -t.data()[i];
  }
  return t;
}

struct CheckOutcome {
  std::string name;
  double rel_err = 0.0;
  double tol = 0.0;
  bool pass() const { return rel_err <= tol; }
};

int cmd_grad_check(const GradCheckArgs& a, int argc, char** argv) {
  Rng rng(a.seed);
  std::vector<CheckOutcome> outcomes;
  constexpr double kPrimitiveTol = 1e-4;
  constexpr double kEndToEndTol = 1e-3;
  constexpr double kEps = 1e-5;

  auto check = [&](const std::string& name, double tol,
                   const std::function<double()>& run) {
    outcomes.push_back({name, run(), tol});
    const CheckOutcome& o = outcomes.back();
    std::printf("%s %-28s max_rel_err=%.3e (tol %.0e)\n", o.pass() ? "PASS" : "FAIL",
                name.c_str(), o.rel_err, tol);
  };
  // Reduces f's output with a fixed random-weighted sum so every output
  // element is probed with a distinct weight.
  auto wrt = [&](const std::function<Tensor(const Tensor&)>& f, const Tensor& x) {
    Shape out_shape;
    {
      NoGradGuard ng;
      out_shape = f(x).shape();
    }
    Tensor w = rand_t(rng, out_shape, 0.5, 1.5);
    return grad_check([&](const Tensor& t) { return sum(mul(f(t), w)); }, x, kEps);
  };

  check("add", kPrimitiveTol, [&] {
    Tensor a1 = rand_t(rng, {3, 5}), b = rand_t(rng, {3, 5});
    return std::max(wrt([&](const Tensor& x) { return add(x, b); }, a1),
                    wrt([&](const Tensor& x) { return add(a1, x); }, b));
  });
  check("add_broadcast_scalar", kPrimitiveTol, [&] {
    Tensor a1 = rand_t(rng, {3, 5}), s = rand_t(rng, {1});
    return std::max(wrt([&](const Tensor& x) { return add(x, s); }, a1),
                    wrt([&](const Tensor& x) { return add(a1, x); }, s));
  });
  check("sub", kPrimitiveTol, [&] {
    Tensor a1 = rand_t(rng, {4, 3}), b = rand_t(rng, {4, 3});
    return std::max(wrt([&](const Tensor& x) { return sub(x, b); }, a1),
                    wrt([&](const Tensor& x) { return sub(a1, x); }, b));
  });
  check("mul", kPrimitiveTol, [&] {
    Tensor a1 = rand_t(rng, {2, 7}), b = rand_t(rng, {2, 7});
    return std::max(wrt([&](const Tensor& x) { return mul(x, b); }, a1),
                    wrt([&](const Tensor& x) { return mul(a1, x); }, b));
  });
  check("scalar_mul", kPrimitiveTol, [&] {
    return wrt([&](const Tensor& x) { return scalar_mul(x, -1.7); },
               rand_t(rng, {3, 4}));
  });
  check("add_scalar", kPrimitiveTol, [&] {
    return wrt([&](const Tensor& x) { return add_scalar(x, 0.3); }, rand_t(rng, {6}));
  });
  check("matmul", kPrimitiveTol, [&] {
    Tensor a1 = rand_t(rng, {3, 4}), b = rand_t(rng, {4, 5});
    return std::max(wrt([&](const Tensor& x) { return matmul(x, b); }, a1),
                    wrt([&](const Tensor& x) { return matmul(a1, x); }, b));
  });
  check("concat_split", kPrimitiveTol, [&] {
    Tensor a1 = rand_t(rng, {2, 4}), b = rand_t(rng, {3, 4});
    const double c1 = wrt(
        [&](const Tensor& x) { return concat({x, b}, 0); }, a1);
    const double c2 = wrt(
        [&](const Tensor& x) { return split(x, 0, {1, 2})[1]; }, rand_t(rng, {3, 4}));
    return std::max(c1, c2);
  });
  check("sum_mean", kPrimitiveTol, [&] {
    Tensor a1 = rand_t(rng, {3, 5});
    double worst = wrt([](const Tensor& x) { return sum(x); }, a1);
    worst = std::max(worst, wrt([](const Tensor& x) { return sum(x, 1); }, a1));
    worst = std::max(worst, wrt([](const Tensor& x) { return mean(x); }, a1));
    worst = std::max(worst, wrt([](const Tensor& x) { return mean(x, 0); }, a1));
    return worst;
  });
  check("relu", kPrimitiveTol, [&] {
    return wrt([](const Tensor& x) { return relu(x); },
               rand_away_from_zero(rng, {4, 6}));
  });
  check("prelu", kPrimitiveTol, [&] {
    Tensor x0 = rand_away_from_zero(rng, {3, 8});
    Tensor slope = rand_t(rng, {3}, 0.1, 0.9);
    return std::max(wrt([&](const Tensor& x) { return prelu(x, slope); }, x0),
                    wrt([&](const Tensor& s) { return prelu(x0, s); }, slope));
  });
  check("sigmoid", kPrimitiveTol, [&] {
    return wrt([](const Tensor& x) { return sigmoid(x); }, rand_t(rng, {5, 3}));
  });
  check("log", kPrimitiveTol, [&] {
    return wrt([](const Tensor& x) { return log(x); }, rand_t(rng, {7}, 0.3, 3.0));
  });
  check("global_layer_norm", kPrimitiveTol, [&] {
    Tensor x0 = rand_t(rng, {4, 9});
    Tensor gamma = rand_t(rng, {4}, 0.5, 1.5);
    Tensor beta = rand_t(rng, {4});
    double worst = wrt(
        [&](const Tensor& x) { return global_layer_norm(x, gamma, beta); }, x0);
    worst = std::max(worst, wrt([&](const Tensor& g) {
      return global_layer_norm(x0, g, beta);
    }, gamma));
    worst = std::max(worst, wrt([&](const Tensor& b) {
      return global_layer_norm(x0, gamma, b);
    }, beta));
    return worst;
  });
  check("interpolate_time", kPrimitiveTol, [&] {
    Tensor x0 = rand_t(rng, {3, 10});
    return std::max(
        wrt([](const Tensor& x) { return interpolate_time(x, 23); }, x0),
        wrt([](const Tensor& x) { return interpolate_time(x, 4); }, x0));
  });
  check("upsample_nearest_time", kPrimitiveTol, [&] {
    return wrt([](const Tensor& x) { return upsample_nearest_time(x, 11); },
               rand_t(rng, {2, 4}));
  });
  check("reshape_transpose", kPrimitiveTol, [&] {
    Tensor x0 = rand_t(rng, {3, 4});
    return std::max(
        wrt([](const Tensor& x) { return reshape(x, {2, 6}); }, x0),
        wrt([](const Tensor& x) { return transpose(x); }, x0));
  });
  check("narrow_pad_time", kPrimitiveTol, [&] {
    Tensor x0 = rand_t(rng, {2, 9});
    return std::max(
        wrt([](const Tensor& x) { return narrow_time(x, 2, 5); }, x0),
        wrt([](const Tensor& x) { return pad_time(x, 3, 1); }, x0));
  });
  check("conv1d", kPrimitiveTol, [&] {
    double worst = 0.0;
    const int params[][2] = {{1, 0}, {2, 0}, {3, 2}};
    for (const auto& sp : params) {
      Tensor x0 = rand_t(rng, {3, 14});
      Tensor w0 = rand_t(rng, {4, 3, 5});
      Tensor b0 = rand_t(rng, {4});
      const int s = sp[0], p = sp[1];
      worst = std::max(worst, wrt([&](const Tensor& x) {
        return conv1d(x, w0, b0, s, p);
      }, x0));
      worst = std::max(worst, wrt([&](const Tensor& w) {
        return conv1d(x0, w, b0, s, p);
      }, w0));
      worst = std::max(worst, wrt([&](const Tensor& b) {
        return conv1d(x0, w0, b, s, p);
      }, b0));
    }
    return worst;
  });
  check("depthwise_conv1d", kPrimitiveTol, [&] {
    Tensor x0 = rand_t(rng, {3, 12});
    Tensor w0 = rand_t(rng, {3, 5});
    Tensor b0 = rand_t(rng, {3});
    double worst = wrt([&](const Tensor& x) {
      return depthwise_conv1d(x, w0, b0, 2, 2);
    }, x0);
    worst = std::max(worst, wrt([&](const Tensor& w) {
      return depthwise_conv1d(x0, w, b0, 2, 2);
    }, w0));
    worst = std::max(worst, wrt([&](const Tensor& b) {
      return depthwise_conv1d(x0, w0, b, 2, 2);
    }, b0));
    return worst;
  });
  check("conv_transpose1d", kPrimitiveTol, [&] {
    Tensor x0 = rand_t(rng, {3, 7});
    Tensor w0 = rand_t(rng, {3, 2, 6});
    Tensor b0 = rand_t(rng, {2});
    double worst = wrt([&](const Tensor& x) {
      return conv_transpose1d(x, w0, b0, 3, 0);
    }, x0);
    worst = std::max(worst, wrt([&](const Tensor& w) {
      return conv_transpose1d(x0, w, b0, 3, 0);
    }, w0));
    worst = std::max(worst, wrt([&](const Tensor& b) {
      return conv_transpose1d(x0, w0, b, 3, 0);
    }, b0));
    return worst;
  });
  check("separation_loss", kEndToEndTol, [&] {
    Tensor ref = rand_t(rng, {2, 40});
    return wrt([&](const Tensor& e) { return separation_loss(e, ref); },
               rand_t(rng, {2, 40}));
  });

  // end-to-end: full BIN separation loss against central differences on
  // randomly probed parameters of a small couplable configuration
  check("bin_end_to_end", kEndToEndTol, [&] {
    ModelConfig mc;
    mc.M = 2;
    mc.T = 256;
    mc.K_A = 8;
    mc.S_A = 4;
    mc.C_A = 8;
    mc.F_A = 63;
    mc.C_V = 6;
    mc.F_V = 16;
    mc.C_H = 4;
    mc.R = 3;
    mc.D = 3;
    mc.d_v = 3;
    mc.C_blk = 8;
    BinModel model(mc, rng.next_u64());
    Tensor s = rand_t(rng, {1, mc.T});
    Tensor v = rand_t(rng, {mc.M * mc.d_v, mc.F_V});
    Tensor ref = rand_t(rng, {mc.M, mc.T});
    auto loss_fn = [&] {
      return separation_loss(model.separate(s, v), ref);
    };
    std::vector<GradProbe> probes;
    const double worst =
        grad_check_params(loss_fn, model.params().items(), 12, kEps, rng, &probes);
    return worst;
  });

  int failed = 0;
  for (const auto& o : outcomes) failed += o.pass() ? 0 : 1;
  std::printf("grad-check: %zu checks, %d failed\n", outcomes.size(), failed);

  if (!a.out.empty()) {
    prepare_out_dir(a.out, a.force);
    std::ostringstream csv;
    csv << "check,max_rel_err,tol,status\n";
    for (const auto& o : outcomes) {
      csv << o.name << "," << fmt_double(o.rel_err) << "," << fmt_double(o.tol) << ","
          << (o.pass() ? "pass" : "fail") << "\n";
    }
    write_text((fs::path(a.out) / "grad_check.csv").string(), csv.str());
    RunRecorder rec("grad-check", argc, argv);
    rec.set("seed", a.seed);
    rec.set("failed", failed);
    rec.artifact("grad_check_csv", (fs::path(a.out) / "grad_check.csv").string());
    rec.write(a.out);
  }
  return failed == 0 ? 0 : 1;
}

// ---------------------------------------------------------------------------
// count
// ---------------------------------------------------------------------------

struct CountArgs {
  std::string config, out, variant;
  int iterations = 0;
  bool force = false;
};

int cmd_count(const CountArgs& a, int argc, char** argv) {
  ModelConfig mc = a.config.empty() ? ModelConfig{} : ModelConfig::load_file(a.config);
  if (!a.variant.empty()) mc.variant = variant_from_string(a.variant);
  if (a.iterations > 0) mc.R = a.iterations;
  mc.check();
  BinModel model(mc, 1);

  const int64_t params = count_params(model);
  const int64_t macs = count_macs(model);
  std::printf("variant = %s\n", variant_name(mc.variant).c_str());
  std::printf("iterations = %d\n", mc.R);
  std::printf("params = %lld\n", static_cast<long long>(params));
  std::printf("macs = %lld\n", static_cast<long long>(macs));
  std::printf("macs_encoder_decoder = %lld\n",
              static_cast<long long>(model.count_macs_encoder_decoder()));
  std::printf("macs_per_iteration = %lld\n",
              static_cast<long long>(model.count_macs_per_iteration()));

  if (!a.out.empty()) {
    prepare_out_dir(a.out, a.force);
    RunRecorder rec("count", argc, argv);
    rec.config("model", mc.serialize());
    rec.set("params", params);
    rec.set("macs", macs);
    rec.set("macs_encoder_decoder", model.count_macs_encoder_decoder());
    rec.set("macs_per_iteration", model.count_macs_per_iteration());
    rec.write(a.out);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bottleneck iterative network: synthesis, training, evaluation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* sc_synth = app.add_subcommand("synth-data", "generate a synthetic corpus");
  sc_synth->add_option("--config", synth.config, "corpus spec file");
  sc_synth->add_option("--out", synth.out, "corpus output directory")->required();
  auto* synth_seed = sc_synth->add_option("--seed", synth.seed, "master seed override");
  sc_synth->add_flag("--force", synth.force, "overwrite a non-empty output directory");

  TrainArgs traina;
  auto* sc_train = app.add_subcommand("train", "train a model on a corpus");
  sc_train->add_option("--corpus", traina.corpus, "corpus directory")->required();
  sc_train->add_option("--out", traina.out, "run output directory")->required();
  sc_train->add_option("--config", traina.config, "train config file");
  sc_train->add_option("--model", traina.model, "model config file");
  sc_train->add_option("--variant", traina.variant,
                       "full | no_bottleneck | no_c | no_cA | no_cV");
  sc_train->add_option("--iterations", traina.iterations, "fusion iteration override");
  auto* train_seed = sc_train->add_option("--seed", traina.seed, "training seed override");
  sc_train->add_flag("--force", traina.force, "overwrite a non-empty output directory");
  sc_train->add_flag("--resume", traina.resume, "continue from the directory's checkpoint");

  EvalArgs evala;
  auto* sc_eval = app.add_subcommand("eval", "score a checkpoint on a split");
  sc_eval->add_option("--corpus", evala.corpus, "corpus directory")->required();
  sc_eval->add_option("--checkpoint", evala.checkpoint, "model checkpoint")->required();
  sc_eval->add_option("--model", evala.model, "model config (default: next to checkpoint)");
  sc_eval->add_option("--split", evala.split, "train | val | test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  sc_eval->add_option("--out", evala.out, "run output directory")->required();
  sc_eval->add_flag("--force", evala.force, "overwrite a non-empty output directory");

  AblateArgs abla;
  auto* sc_ablate = app.add_subcommand("ablate", "train and score every variant");
  sc_ablate->add_option("--corpus", abla.corpus, "corpus directory")->required();
  sc_ablate->add_option("--out", abla.out, "run output directory")->required();
  sc_ablate->add_option("--config", abla.config, "train config file");
  sc_ablate->add_option("--model", abla.model, "model config file");
  sc_ablate->add_option("--iterations", abla.iterations, "fusion iteration override");
  sc_ablate->add_option("--seeds", abla.seeds, "number of seeds per variant");
  auto* ablate_seed = sc_ablate->add_option("--seed", abla.seed, "base seed override");
  sc_ablate->add_flag("--force", abla.force, "overwrite a non-empty output directory");

  TraceArgs tracea;
  auto* sc_trace = app.add_subcommand("trace", "per-iteration separation quality");
  sc_trace->add_option("--corpus", tracea.corpus, "corpus directory")->required();
  sc_trace->add_option("--checkpoint", tracea.checkpoint, "model checkpoint")->required();
  sc_trace->add_option("--model", tracea.model, "model config (default: next to checkpoint)");
  sc_trace->add_option("--split", tracea.split, "train | val | test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  sc_trace->add_option("--out", tracea.out, "run output directory")->required();
  sc_trace->add_option("--examples", tracea.examples, "how many mask dumps to write");
  sc_trace->add_flag("--force", tracea.force, "overwrite a non-empty output directory");

  GradCheckArgs gca;
  auto* sc_gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
  sc_gc->add_option("--seed", gca.seed, "probe seed");
  sc_gc->add_option("--out", gca.out, "optional report directory");
  sc_gc->add_flag("--force", gca.force, "overwrite a non-empty output directory");

  CountArgs cnta;
  auto* sc_count = app.add_subcommand("count", "parameter and MAC counts for a config");
  sc_count->add_option("--config", cnta.config, "model config file");
  sc_count->add_option("--variant", cnta.variant,
                       "full | no_bottleneck | no_c | no_cA | no_cV");
  sc_count->add_option("--iterations", cnta.iterations, "fusion iteration override");
  sc_count->add_option("--out", cnta.out, "optional report directory");
  sc_count->add_flag("--force", cnta.force, "overwrite a non-empty output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;  // bad flags are config errors
  }

  synth.has_seed = synth_seed->count() > 0;
  traina.has_seed = train_seed->count() > 0;
  abla.has_seed = ablate_seed->count() > 0;

  try {
    if (sc_synth->parsed()) return cmd_synth_data(synth, argc, argv);
    if (sc_train->parsed()) return cmd_train(traina, argc, argv);
    if (sc_eval->parsed()) return cmd_eval(evala, argc, argv);
    if (sc_ablate->parsed()) return cmd_ablate(abla, argc, argv);
    if (sc_trace->parsed()) return cmd_trace(tracea, argc, argv);
    if (sc_gc->parsed()) return cmd_grad_check(gca, argc, argv);
    if (sc_count->parsed()) return cmd_count(cnta, argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include "binet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "binet/nn.hpp"

namespace binet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// TrainConfig text format
// ---------------------------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

int parse_int_value(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("train key '" + key + "': not an integer: '" + value + "'");
  }
}

uint64_t parse_u64_value(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    uint64_t v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("train key '" + key + "': not an unsigned integer: '" + value +
                      "'");
  }
}

double parse_double_value(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("train key '" + key + "': not a number: '" + value + "'");
  }
}

}  // namespace

std::vector<std::string> TrainConfig::validate() const {
  std::vector<std::string> bad;
  if (epochs < 1) bad.push_back("epochs must be >= 1");
  if (batch_size < 1) bad.push_back("batch_size must be >= 1");
  if (!(lr > 0.0)) bad.push_back("lr must be > 0");
  if (!(beta1 > 0.0 && beta1 < 1.0)) bad.push_back("beta1 must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) bad.push_back("beta2 must lie in (0, 1)");
  if (!(eps > 0.0)) bad.push_back("eps must be > 0");
  if (!(clip > 0.0)) bad.push_back("clip must be > 0");
  if (checkpoint_every < 1) bad.push_back("checkpoint_every must be >= 1");
  if (eval_every < 1) bad.push_back("eval_every must be >= 1");
  return bad;
}

void TrainConfig::check() const {
  auto bad = validate();
  if (bad.empty()) return;
  std::string msg = "invalid train config:";
  for (const auto& b : bad) msg += "\n  - " + b;
  throw ConfigError(msg);
}

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << "epochs = " << epochs << "\n"
     << "batch_size = " << batch_size << "\n"
     << "lr = " << fmt_double(lr) << "\n"
     << "beta1 = " << fmt_double(beta1) << "\n"
     << "beta2 = " << fmt_double(beta2) << "\n"
     << "eps = " << fmt_double(eps) << "\n"
     << "clip = " << fmt_double(clip) << "\n"
     << "seed = " << seed << "\n"
     << "checkpoint_every = " << checkpoint_every << "\n"
     << "eval_every = " << eval_every << "\n";
  return os.str();
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig cfg;
  std::vector<std::string> seen;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("train line is not 'key = value': '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    for (const auto& s : seen) {
      if (s == key) throw ConfigError("train key '" + key + "' given twice");
    }
    seen.push_back(key);
    if (key == "epochs") cfg.epochs = parse_int_value(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_int_value(key, value);
    else if (key == "lr") cfg.lr = parse_double_value(key, value);
    else if (key == "beta1") cfg.beta1 = parse_double_value(key, value);
    else if (key == "beta2") cfg.beta2 = parse_double_value(key, value);
    else if (key == "eps") cfg.eps = parse_double_value(key, value);
    else if (key == "clip") cfg.clip = parse_double_value(key, value);
    else if (key == "seed") cfg.seed = parse_u64_value(key, value);
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_int_value(key, value);
    else if (key == "eval_every") cfg.eval_every = parse_int_value(key, value);
    else throw ConfigError("unknown train key '" + key + "'");
  }
  return cfg;
}

TrainConfig TrainConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open train config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

void TrainConfig::save_file(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write train config '" + path + "'");
  f << serialize();
  if (!f) throw IoError("short write to train config '" + path + "'");
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

Tensor separation_loss(const Tensor& est, const Tensor& ref, double floor) {
  if (!est.defined() || !ref.defined()) throw ContractError("separation_loss: undefined tensor");
  if (est.rank() != 2 || ref.rank() != 2 || est.shape() != ref.shape()) {
    throw ShapeError("separation_loss: est " + shape_str(est.shape()) + " vs ref " +
                     shape_str(ref.shape()));
  }
  if (!(floor >= 0.0)) throw ContractError("separation_loss: floor must be >= 0");
  const int m = est.dim(0);
  const std::vector<int> ones(static_cast<size_t>(m), 1);
  auto est_rows = split(est, 0, ones);
  auto ref_rows = split(ref, 0, ones);

  constexpr double kTenOverLn10 = 4.342944819032518;  // 10 / ln 10

  Tensor total;
  for (int i = 0; i < m; ++i) {
    const Tensor& e = est_rows[static_cast<size_t>(i)];
    const Tensor& r = ref_rows[static_cast<size_t>(i)];
    {
      // power check on raw values; the graph is untouched
      double rr = 0.0;
      for (double v : r.values()) rr += v * v;
      if (rr == 0.0) {
        throw DomainError("separation_loss: reference speaker " + std::to_string(i) +
                          " has zero power");
      }
    }
    Tensor d = sum(mul(e, r));    // <e, r>
    Tensor ee = sum(mul(e, e));   // ||e||^2
    Tensor rr = sum(mul(r, r));   // ||r||^2
    Tensor floor_term = scalar_mul(rr, floor);
    // (||proj||^2 + floor) / (||residual||^2 + floor), cleared of the
    // 1/||r||^2 factor that cancels between numerator and denominator
    Tensor num = add(mul(d, d), floor_term);
    Tensor den = add(sub(mul(ee, rr), mul(d, d)), floor_term);
    Tensor si_sdr_i = scalar_mul(sub(log(num), log(den)), kTenOverLn10);
    total = i == 0 ? si_sdr_i : add(total, si_sdr_i);
  }
  return scalar_mul(total, -1.0 / m);
}

bool has_silent_reference(const AvsExample& ex) {
  for (const auto& s : ex.sources) {
    double rr = 0.0;
    for (double v : s) rr += v * v;
    if (rr == 0.0) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

double optimizer_step(ParamStore& params, AdamState& state, const TrainConfig& cfg) {
  cfg.check();
  auto items = params.items();

  double norm_sq = 0.0;
  for (const auto& [name, p] : items) {
    if (!p.has_grad()) continue;
    for (double g : p.grad_ref()) norm_sq += g * g;
  }
  const double norm = std::sqrt(norm_sq);
  const double clip_scale = norm > cfg.clip ? cfg.clip / norm : 1.0;

  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

  for (auto& [name, p] : items) {
    const size_t n = static_cast<size_t>(p.size());
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) m.assign(n, 0.0);
    if (v.empty()) v.assign(n, 0.0);
    if (m.size() != n || v.size() != n) {
      throw ContractError("optimizer state for '" + name + "' has the wrong size");
    }
    const std::vector<double>& grad = p.grad_ref();  // may be empty (zero grad)
    double* pd = p.data();
    for (size_t i = 0; i < n; ++i) {
      const double g = grad.empty() ? 0.0 : grad[i] * clip_scale;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      pd[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Evaluation and tracing
// ---------------------------------------------------------------------------

namespace {

void score_estimates(const Tensor& est, const AvsExample& ex, int example_index,
                     MetricReport& report) {
  const auto rows = split(est, 0, std::vector<int>(static_cast<size_t>(ex.m), 1));
  for (int m = 0; m < ex.m; ++m) {
    const std::vector<double>& e = rows[static_cast<size_t>(m)].values();
    const std::vector<double>& r = ex.sources[static_cast<size_t>(m)];
    report.add(example_index, m, si_sdr(e, r), si_sdri(e, r, ex.s));
  }
}

}  // namespace

MetricReport evaluate(const BinModel& model, const Manifest& man,
                      const std::vector<size_t>& indices) {
  NoGradGuard ng;
  MetricReport report;
  for (size_t idx : indices) {
    AvsExample ex = load_example(man, idx);
    Tensor est = model.separate(mixture_tensor(ex), cues_tensor(ex));
    score_estimates(est, ex, static_cast<int>(idx), report);
  }
  return report;
}

std::vector<TraceRow> iteration_trace(const BinModel& model, const Manifest& man,
                                      const std::vector<size_t>& indices) {
  NoGradGuard ng;
  const int r = model.config().R;
  std::vector<MetricReport> per_iter(static_cast<size_t>(r));
  for (size_t idx : indices) {
    AvsExample ex = load_example(man, idx);
    Tensor ea = model.encode_audio(mixture_tensor(ex));
    Tensor ev = model.encode_video(cues_tensor(ex));
    IterationRun run = model.run_iterations(ea, ev, /*taps=*/true);
    for (int i = 0; i < r; ++i) {
      const FusionState& st = run.taps[static_cast<size_t>(i)];
      Tensor mask = model.predict_mask(st.a_hat, st.v_hat);
      auto mask_rows = split(mask, 0, std::vector<int>(static_cast<size_t>(ex.m), 1));
      std::vector<Tensor> waves;
      for (int m = 0; m < ex.m; ++m) {
        Tensor masked = mul(reshape(mask_rows[static_cast<size_t>(m)],
                                    {model.config().C_A, model.config().F_A}),
                            ea);
        waves.push_back(reshape(model.decode(masked), {1, ex.t}));
      }
      Tensor est = concat(waves, 0);
      score_estimates(est, ex, static_cast<int>(idx), per_iter[static_cast<size_t>(i)]);
    }
  }
  std::vector<TraceRow> rows;
  for (int i = 0; i < r; ++i) {
    const MetricReport& rep = per_iter[static_cast<size_t>(i)];
    rows.push_back({i + 1, rep.mean_si_sdri(), rep.std_si_sdri()});
  }
  return rows;
}

std::string trace_to_csv(const std::vector<TraceRow>& rows) {
  std::ostringstream os;
  os << "iteration,si_sdri_mean,si_sdri_std\n";
  for (const auto& row : rows) {
    os << row.iteration << "," << fmt_double(row.si_sdri_mean) << ","
       << fmt_double(row.si_sdri_std) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "step,epoch,loss,val_si_sdri\n";
  for (const auto& row : rows) {
    os << row.step << "," << row.epoch << "," << fmt_double(row.loss) << ",";
    if (!std::isnan(row.val_si_sdri)) os << fmt_double(row.val_si_sdri);
    os << "\n";
  }
  return os.str();
}

void TrainLog::save_csv(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write train log '" + path + "'");
  f << to_csv();
  if (!f) throw IoError("short write to train log '" + path + "'");
}

namespace {

constexpr char kLastCkpt[] = "last.ckpt";
constexpr char kBestCkpt[] = "best.ckpt";
constexpr char kTrainerCkpt[] = "trainer.ckpt";

struct TrainerState {
  AdamState adam;
  int epochs_done = 0;
  int64_t step = 0;
  double best_val = std::numeric_limits<double>::quiet_NaN();
  int best_epoch = -1;
  uint64_t shuffle_digest = 0;
};

Tensor u64_tensor(uint64_t v) {
  return Tensor::from({2}, {static_cast<double>(v & 0xffffffffULL),
                            static_cast<double>(v >> 32)});
}

uint64_t u64_from_tensor(const Tensor& t) {
  if (t.size() != 2) throw FormatError("trainer checkpoint: bad u64 field");
  return static_cast<uint64_t>(t.values()[0]) |
         (static_cast<uint64_t>(t.values()[1]) << 32);
}

void save_trainer_state(const std::string& path, const TrainerState& ts,
                        const ParamStore& params) {
  std::vector<std::pair<std::string, Tensor>> items;
  items.emplace_back("meta.t", Tensor::scalar(static_cast<double>(ts.adam.t)));
  items.emplace_back("meta.epochs_done", Tensor::scalar(ts.epochs_done));
  items.emplace_back("meta.step", Tensor::scalar(static_cast<double>(ts.step)));
  items.emplace_back("meta.best_val", Tensor::scalar(ts.best_val));
  items.emplace_back("meta.best_epoch", Tensor::scalar(ts.best_epoch));
  items.emplace_back("meta.shuffle_digest", u64_tensor(ts.shuffle_digest));
  for (const auto& [name, p] : params.items()) {
    auto mit = ts.adam.m.find(name);
    auto vit = ts.adam.v.find(name);
    std::vector<double> m = mit == ts.adam.m.end()
                                ? std::vector<double>(static_cast<size_t>(p.size()), 0.0)
                                : mit->second;
    std::vector<double> v = vit == ts.adam.v.end()
                                ? std::vector<double>(static_cast<size_t>(p.size()), 0.0)
                                : vit->second;
    items.emplace_back("adam.m." + name, Tensor::from(p.shape(), std::move(m)));
    items.emplace_back("adam.v." + name, Tensor::from(p.shape(), std::move(v)));
  }
  write_checkpoint(path, items);
}

TrainerState load_trainer_state(const std::string& path, const ParamStore& params) {
  TrainerState ts;
  auto items = read_checkpoint(path);
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : items) by_name.emplace(name, std::move(t));
  auto fetch = [&](const std::string& name) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw FormatError("trainer checkpoint '" + path + "': missing '" + name + "'");
    }
    return it->second;
  };
  ts.adam.t = static_cast<int64_t>(fetch("meta.t").item());
  ts.epochs_done = static_cast<int>(fetch("meta.epochs_done").item());
  ts.step = static_cast<int64_t>(fetch("meta.step").item());
  ts.best_val = fetch("meta.best_val").item();
  ts.best_epoch = static_cast<int>(fetch("meta.best_epoch").item());
  ts.shuffle_digest = u64_from_tensor(fetch("meta.shuffle_digest"));
  for (const auto& [name, p] : params.items()) {
    const Tensor& m = fetch("adam.m." + name);
    const Tensor& v = fetch("adam.v." + name);
    if (m.shape() != p.shape() || v.shape() != p.shape()) {
      throw FormatError("trainer checkpoint '" + path + "': shape mismatch for '" +
                        name + "'");
    }
    ts.adam.m[name] = m.values();
    ts.adam.v[name] = v.values();
  }
  return ts;
}

}  // namespace

TrainLog train(BinModel& model, const Manifest& man, const TrainConfig& cfg,
               const std::string& out_dir, bool resume) {
  cfg.check();
  const auto wall_start = std::chrono::steady_clock::now();

  const auto train_idx = split_indices(man, "train");
  const auto val_idx = split_indices(man, "val");
  if (train_idx.empty()) throw ConfigError("train: the corpus has no train split");

  TrainerState ts;
  if (resume) {
    if (out_dir.empty()) throw ConfigError("train: resume requires an output directory");
    load_params(model.params(), (fs::path(out_dir) / kLastCkpt).string());
    ts = load_trainer_state((fs::path(out_dir) / kTrainerCkpt).string(), model.params());
  } else if (!out_dir.empty()) {
    fs::create_directories(out_dir);
  }

  TrainLog log;
  const int total_batches =
      static_cast<int>((train_idx.size() + static_cast<size_t>(cfg.batch_size) - 1) /
                       static_cast<size_t>(cfg.batch_size));

  for (int epoch = ts.epochs_done; epoch < cfg.epochs; ++epoch) {
    // deterministic per-epoch order; resuming re-derives the same shuffles
    std::vector<size_t> order(train_idx);
    const uint64_t epoch_seed = derive_seed(cfg.seed, static_cast<uint64_t>(epoch));
    Rng shuffle_rng(epoch_seed);
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
    }
    ts.shuffle_digest = derive_seed(ts.shuffle_digest ^ epoch_seed,
                                    static_cast<uint64_t>(epoch));

    for (int b = 0; b < total_batches; ++b) {
      const size_t lo = static_cast<size_t>(b) * static_cast<size_t>(cfg.batch_size);
      const size_t hi = std::min(order.size(), lo + static_cast<size_t>(cfg.batch_size));

      // load first so silent-reference examples can be dropped up front
      std::vector<AvsExample> batch;
      std::vector<std::string> ids;
      for (size_t k = lo; k < hi; ++k) {
        AvsExample ex = load_example(man, order[k]);
        if (has_silent_reference(ex)) {
          std::cerr << "[train] skipping example '" << man.entries[order[k]].id
                    << "': a reference speaker is silent\n";
          continue;
        }
        ids.push_back(man.entries[order[k]].id);
        batch.push_back(std::move(ex));
      }
      if (batch.empty()) continue;

      model.params().zero_grads();
      double loss_sum = 0.0;
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      auto abort_batch = [&](const std::string& why) {
        std::string ids_joined;
        for (const auto& id : ids) {
          if (!ids_joined.empty()) ids_joined += ", ";
          ids_joined += id;
        }
        clear_graph();
        throw DomainError("train: non-finite loss at step " +
                          std::to_string(ts.step + 1) + " (epoch " +
                          std::to_string(epoch) + ", batch " + std::to_string(b) +
                          "; examples: " + ids_joined + "): " + why);
      };
      for (const AvsExample& ex : batch) {
        try {
          Tensor est = model.separate(mixture_tensor(ex), cues_tensor(ex));
          Tensor loss = separation_loss(est, sources_tensor(ex));
          const double lv = loss.item();
          if (!std::isfinite(lv)) throw DomainError("loss is " + std::to_string(lv));
          loss_sum += lv;
          backward(scalar_mul(loss, inv_b));  // frees this example's graph
        } catch (const DomainError& e) {
          abort_batch(e.what());
        }
      }
      const double batch_loss = loss_sum * inv_b;
      optimizer_step(model.params(), ts.adam, cfg);
      ts.step += 1;
      log.rows.push_back({ts.step, epoch, batch_loss,
                          std::numeric_limits<double>::quiet_NaN()});
    }

    ts.epochs_done = epoch + 1;
    const bool last_epoch = epoch + 1 == cfg.epochs;

    if (!val_idx.empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch)) {
      const double val = evaluate(model, man, val_idx).mean_si_sdri();
      if (!log.rows.empty()) log.rows.back().val_si_sdri = val;
      if (std::isnan(ts.best_val) || val > ts.best_val) {
        ts.best_val = val;
        ts.best_epoch = epoch;
        if (!out_dir.empty()) {
          save_params(model.params(), (fs::path(out_dir) / kBestCkpt).string());
        }
      }
    }

    if (!out_dir.empty() && ((epoch + 1) % cfg.checkpoint_every == 0 || last_epoch)) {
      save_params(model.params(), (fs::path(out_dir) / kLastCkpt).string());
      save_trainer_state((fs::path(out_dir) / kTrainerCkpt).string(), ts,
                         model.params());
    }
  }

  log.shuffle_digest = ts.shuffle_digest;
  log.best_val_si_sdri = ts.best_val;
  log.best_epoch = ts.best_epoch;
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                   wall_start)
                         .count();
  if (!out_dir.empty()) {
    log.save_csv((fs::path(out_dir) / "train_log.csv").string());
  }
  return log;
}

}  // namespace binet

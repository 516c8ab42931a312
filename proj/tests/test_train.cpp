#include "binet/train.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "binet/nn.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace binet;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(bool(f));
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

CorpusSpec tiny_corpus_spec() {
  CorpusSpec spec;
  spec.n_train = 8;
  spec.n_val = 2;
  spec.n_test = 2;
  spec.T = 2000;
  spec.sample_rate = 8000;
  spec.M = 2;
  spec.d_v = 3;
  spec.F_V = 12;
  spec.snr_db_set = {0.0, 10.0};
  spec.master_seed = 31;
  return spec;
}

ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.M = 2;
  cfg.T = 2000;
  cfg.K_A = 16;
  cfg.S_A = 8;
  cfg.C_A = 16;
  cfg.F_A = 249;  // (2000 - 16) / 8 + 1
  cfg.C_V = 8;
  cfg.F_V = 12;
  cfg.C_H = 6;
  cfg.R = 2;
  cfg.D = 3;
  cfg.d_v = 3;
  cfg.C_blk = 16;
  return cfg;
}

Tensor rand_rows(int m, int t, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(m) * t);
  for (double& x : v) x = rng.normal();
  return Tensor::from({m, t}, std::move(v));
}

double mean_ref_si_sdr(const Tensor& est, const Tensor& ref) {
  const int m = est.dim(0);
  const int t = est.dim(1);
  double acc = 0.0;
  for (int i = 0; i < m; ++i) {
    std::vector<double> e(est.data() + static_cast<size_t>(i) * t,
                          est.data() + static_cast<size_t>(i + 1) * t);
    std::vector<double> r(ref.data() + static_cast<size_t>(i) * t,
                          ref.data() + static_cast<size_t>(i + 1) * t);
    acc += si_sdr(e, r);
  }
  return acc / m;
}

}  // namespace

TEST_CASE("TrainConfig: round trip, defaults, and validation") {
  TrainConfig cfg;
  cfg.epochs = 7;
  cfg.lr = 3e-4;
  cfg.seed = 99;
  CHECK(TrainConfig::parse(cfg.serialize()) == cfg);

  TrainConfig part = TrainConfig::parse("epochs = 2\n# comment\nclip = 1.5\n");
  CHECK(part.epochs == 2);
  CHECK(part.clip == 1.5);
  CHECK(part.batch_size == TrainConfig{}.batch_size);

  CHECK_THROWS_AS(TrainConfig::parse("bogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("lr = fast\n"), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("lr = 1\nlr = 2\n"), ConfigError);

  TrainConfig bad;
  bad.epochs = 0;
  bad.batch_size = 0;
  bad.lr = 0.0;
  bad.beta1 = 1.0;
  bad.beta2 = 0.0;
  bad.eps = 0.0;
  bad.clip = 0.0;
  bad.checkpoint_every = 0;
  bad.eval_every = 0;
  CHECK(bad.validate().size() == 9);
  CHECK_THROWS_AS(bad.check(), ConfigError);
  CHECK(TrainConfig{}.validate().empty());
}

TEST_CASE("separation_loss: perfect reconstruction saturates far below -40") {
  Tensor ref = rand_rows(2, 400, 7);
  Tensor est = Tensor::from(ref.shape(), ref.values());
  CHECK(separation_loss(est, ref).item() < -40.0);
}

TEST_CASE("separation_loss: duplicated mixture matches the metric oracle") {
  Tensor ref = rand_rows(2, 500, 11);
  std::vector<double> mix(500);
  for (int i = 0; i < 500; ++i) {
    mix[static_cast<size_t>(i)] = ref.at({0, i}) + ref.at({1, i});
  }
  std::vector<double> dup(mix);
  dup.insert(dup.end(), mix.begin(), mix.end());
  Tensor est = Tensor::from({2, 500}, dup);
  const double loss = separation_loss(est, ref).item();
  CHECK(std::abs(-loss - mean_ref_si_sdr(est, ref)) <= 1e-6);
}

TEST_CASE("separation_loss: negative mean SI-SDR away from the cap") {
  // estimates correlated with the references, as during training; in
  // this regime the 1e-8 floor is negligible and the loss must agree
  // with the metric
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor ref = rand_rows(3, 256, 100 + seed);
    Tensor noise = rand_rows(3, 256, 200 + seed);
    std::vector<double> v(ref.values());
    for (size_t i = 0; i < v.size(); ++i) v[i] += 0.5 * noise.values()[i];
    Tensor est = Tensor::from(ref.shape(), v);
    const double loss = separation_loss(est, ref).item();
    CHECK(std::abs(-loss - mean_ref_si_sdr(est, ref)) <= 1e-6);
  }
}

TEST_CASE("separation_loss: scale invariance in the estimate") {
  Tensor ref = rand_rows(2, 300, 3);
  Tensor noise = rand_rows(2, 300, 4);
  std::vector<double> v(ref.values());
  for (size_t i = 0; i < v.size(); ++i) v[i] += 0.5 * noise.values()[i];
  Tensor est = Tensor::from(ref.shape(), v);
  const double base = separation_loss(est, ref).item();
  for (double beta : {0.5, 2.0, 10.0}) {
    std::vector<double> scaled(est.values());
    for (double& x : scaled) x *= beta;
    const double got = separation_loss(Tensor::from(est.shape(), scaled), ref).item();
    CHECK(std::abs(got - base) <= 1e-6);  // the fixed floor is not rescaled
  }
}

TEST_CASE("separation_loss: gradient matches finite differences") {
  Tensor ref = rand_rows(2, 60, 21);
  Tensor est0 = rand_rows(2, 60, 22);
  const double worst = grad_check(
      [&](const Tensor& e) { return separation_loss(e, ref); }, est0, 1e-5);
  CHECK(worst <= 1e-3);
}

TEST_CASE("separation_loss: error taxonomy") {
  Tensor ref = rand_rows(2, 50, 1);
  Tensor est = rand_rows(2, 50, 2);
  CHECK_THROWS_AS(separation_loss(est, rand_rows(2, 49, 3)), ShapeError);
  CHECK_THROWS_AS(separation_loss(Tensor{}, ref), ContractError);
  Tensor zero_ref = Tensor::zeros({2, 50});
  CHECK_THROWS_AS(separation_loss(est, zero_ref), DomainError);
}

TEST_CASE("has_silent_reference flags zero-power speakers") {
  AvsExample ex;
  ex.sources = {{1.0, 2.0}, {0.5, -0.5}};
  CHECK(!has_silent_reference(ex));
  ex.sources[1] = {0.0, 0.0};
  CHECK(has_silent_reference(ex));
}

TEST_CASE("optimizer_step: zero gradients leave parameters untouched") {
  ParamStore ps;
  Rng rng(1);
  Tensor& a = ps.add("a", Tensor::uniform({3, 4}, rng, -1.0, 1.0));
  const std::vector<double> before = a.values();
  AdamState state;
  TrainConfig cfg;
  optimizer_step(ps, state, cfg);
  CHECK(std::memcmp(a.values().data(), before.data(), before.size() * 8) == 0);
  CHECK(state.t == 1);
}

TEST_CASE("optimizer_step: descends on a 1-D parabola") {
  ParamStore ps;
  Tensor& x = ps.add("x", Tensor::from({1}, {1.0}));
  x.set_requires_grad(true);
  backward(mul(x, x));
  AdamState state;
  TrainConfig cfg;
  cfg.lr = 0.1;
  optimizer_step(ps, state, cfg);
  CHECK(x.values()[0] < 1.0);
  CHECK(x.values()[0] > 0.0);
}

TEST_CASE("optimizer_step: 200 steps solve a 2-D quadratic") {
  ParamStore ps;
  Tensor& x = ps.add("x", Tensor::from({2}, {4.0, -3.0}));
  x.set_requires_grad(true);
  Tensor target = Tensor::from({2}, {3.0, -1.0});
  Tensor weights = Tensor::from({2}, {1.0, 2.0});

  AdamState state;
  TrainConfig cfg;
  cfg.lr = 0.1;
  for (int step = 0; step < 200; ++step) {
    ps.zero_grads();
    Tensor d = sub(x, target);
    backward(sum(mul(weights, mul(d, d))));
    optimizer_step(ps, state, cfg);
  }
  const double dx0 = x.values()[0] - 3.0;
  const double dx1 = x.values()[1] + 1.0;
  CHECK(std::sqrt(dx0 * dx0 + dx1 * dx1) <= 1e-3);
}

TEST_CASE("optimizer_step: global-norm clip is exact") {
  ParamStore ps;
  ps.add("a", Tensor::from({3}, {0.0, 0.0, 0.0}));
  ps.add("b", Tensor::from({2}, {0.0, 0.0}));
  Tensor a = ps.get("a");  // re-fetch: add() may reallocate the store
  Tensor b = ps.get("b");
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  // gradients (3e5, 4e5, 0) and (5e5, 1e5): norm far above the clip
  backward(add(sum(mul(Tensor::from({3}, {3e5, 4e5, 0.0}), a)),
               sum(mul(Tensor::from({2}, {5e5, 1e5}), b))));

  AdamState state;
  TrainConfig cfg;
  cfg.clip = 5.0;
  const double expected_norm =
      std::sqrt(3e5 * 3e5 + 4e5 * 4e5 + 5e5 * 5e5 + 1e5 * 1e5);
  const double pre = optimizer_step(ps, state, cfg);
  CHECK(std::abs(pre - expected_norm) <= expected_norm * 1e-12);

  // first-step m is (1 - beta1) * clipped gradient, so clipped values
  // are observable through the optimizer state
  double post_sq = 0.0;
  for (const auto& key : {"a", "b"}) {
    for (double mi : state.m[key]) {
      const double g = mi / (1.0 - cfg.beta1);
      post_sq += g * g;
    }
  }
  CHECK(std::abs(std::sqrt(post_sq) - cfg.clip) <= 1e-12);
}

TEST_CASE("optimizer_step: no clipping below the threshold") {
  ParamStore ps;
  Tensor& a = ps.add("a", Tensor::from({2}, {0.0, 0.0}));
  a.set_requires_grad(true);
  backward(sum(mul(Tensor::from({2}, {0.3, 0.4}), a)));  // norm 0.5 < clip
  AdamState state;
  TrainConfig cfg;
  const double pre = optimizer_step(ps, state, cfg);
  CHECK(std::abs(pre - 0.5) <= 1e-15);
  CHECK(std::abs(state.m["a"][0] / (1.0 - cfg.beta1) - 0.3) <= 1e-15);
}

TEST_CASE("train: one epoch on a tiny corpus is finite and logged") {
  TempDir tmp;
  CorpusSpec cspec = tiny_corpus_spec();
  const std::string cdir = tmp.file("corpus");
  generate_corpus(cspec, cdir);
  Manifest man = load_manifest(cdir);

  BinModel model(tiny_model_config(), 5);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 17;
  const std::string out = tmp.file("run");
  TrainLog log = train(model, man, cfg, out);

  REQUIRE(log.rows.size() == 2);  // 8 train examples / batch 4
  for (size_t i = 0; i < log.rows.size(); ++i) {
    CHECK(log.rows[i].step == static_cast<int64_t>(i + 1));
    CHECK(log.rows[i].epoch == 0);
    CHECK(std::isfinite(log.rows[i].loss));
  }
  CHECK(std::isfinite(log.rows.back().val_si_sdri));  // eval ran on epoch end
  CHECK(std::isnan(log.rows.front().val_si_sdri));
  CHECK(log.best_epoch == 0);
  CHECK(log.wall_seconds > 0.0);

  CHECK(fs::exists(fs::path(out) / "last.ckpt"));
  CHECK(fs::exists(fs::path(out) / "best.ckpt"));
  CHECK(fs::exists(fs::path(out) / "trainer.ckpt"));
  CHECK(fs::exists(fs::path(out) / "train_log.csv"));

  const std::string csv = slurp(fs::path(out) / "train_log.csv");
  CHECK(csv.rfind("step,epoch,loss,val_si_sdri\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("train: identical runs produce identical parameters") {
  TempDir tmp;
  CorpusSpec cspec = tiny_corpus_spec();
  const std::string cdir = tmp.file("corpus");
  generate_corpus(cspec, cdir);
  Manifest man = load_manifest(cdir);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 17;

  BinModel m1(tiny_model_config(), 5);
  BinModel m2(tiny_model_config(), 5);
  TrainLog l1 = train(m1, man, cfg, tmp.file("r1"));
  TrainLog l2 = train(m2, man, cfg, tmp.file("r2"));

  CHECK(slurp(tmp.file("r1") + "/last.ckpt") == slurp(tmp.file("r2") + "/last.ckpt"));
  CHECK(l1.shuffle_digest == l2.shuffle_digest);
  REQUIRE(l1.rows.size() == l2.rows.size());
  for (size_t i = 0; i < l1.rows.size(); ++i) {
    CHECK(l1.rows[i].loss == l2.rows[i].loss);
  }
}

TEST_CASE("train: resuming reproduces the unbroken trajectory bit-exactly") {
  TempDir tmp;
  CorpusSpec cspec = tiny_corpus_spec();
  const std::string cdir = tmp.file("corpus");
  generate_corpus(cspec, cdir);
  Manifest man = load_manifest(cdir);

  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.seed = 23;

  // unbroken 3-epoch run
  cfg.epochs = 3;
  BinModel full(tiny_model_config(), 5);
  TrainLog full_log = train(full, man, cfg, tmp.file("full"));

  // 1 epoch, then resume to 3; a different init seed proves the
  // checkpoint alone determines the continuation
  cfg.epochs = 1;
  BinModel part(tiny_model_config(), 5);
  train(part, man, cfg, tmp.file("part"));
  cfg.epochs = 3;
  BinModel cont(tiny_model_config(), 999);
  TrainLog cont_log = train(cont, man, cfg, tmp.file("part"), /*resume=*/true);

  CHECK(slurp(tmp.file("full") + "/last.ckpt") == slurp(tmp.file("part") + "/last.ckpt"));
  CHECK(slurp(tmp.file("full") + "/trainer.ckpt") ==
        slurp(tmp.file("part") + "/trainer.ckpt"));

  // the resumed log holds epochs 1..2; they must match the full run's rows
  REQUIRE(full_log.rows.size() == 6);
  REQUIRE(cont_log.rows.size() == 4);
  for (size_t i = 0; i < cont_log.rows.size(); ++i) {
    const TrainLogRow& a = full_log.rows[i + 2];
    const TrainLogRow& b = cont_log.rows[i];
    CHECK(a.step == b.step);
    CHECK(a.epoch == b.epoch);
    CHECK(a.loss == b.loss);
  }
}

TEST_CASE("train: aborts with a diagnostic on a non-finite loss") {
  TempDir tmp;
  CorpusSpec cspec = tiny_corpus_spec();
  const std::string cdir = tmp.file("corpus");
  generate_corpus(cspec, cdir);
  Manifest man = load_manifest(cdir);

  BinModel model(tiny_model_config(), 5);
  Tensor poisoned = model.params().items()[0].second;  // aliasing handle
  poisoned.data()[0] = std::nan("");
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(model, man, cfg, "");
    FAIL("expected DomainError");
  } catch (const DomainError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("ex00") != std::string::npos);  // offending example ids
  }
}

TEST_CASE("train: rejects bad configs and missing splits") {
  TempDir tmp;
  CorpusSpec cspec = tiny_corpus_spec();
  cspec.n_train = 0;
  cspec.n_val = 1;
  cspec.n_test = 1;
  const std::string cdir = tmp.file("corpus");
  generate_corpus(cspec, cdir);
  Manifest man = load_manifest(cdir);

  BinModel model(tiny_model_config(), 5);
  TrainConfig cfg;
  CHECK_THROWS_AS(train(model, man, cfg, ""), ConfigError);
  cfg.clip = -1.0;
  CHECK_THROWS_AS(train(model, man, cfg, ""), ConfigError);
  TrainConfig ok;
  CHECK_THROWS_AS(train(model, man, ok, "", /*resume=*/true), ConfigError);
}

TEST_CASE("evaluate: scores every (example, speaker) pair") {
  TempDir tmp;
  CorpusSpec cspec = tiny_corpus_spec();
  const std::string cdir = tmp.file("corpus");
  generate_corpus(cspec, cdir);
  Manifest man = load_manifest(cdir);

  BinModel model(tiny_model_config(), 5);
  auto test_idx = split_indices(man, "test");
  MetricReport rep = evaluate(model, man, test_idx);
  REQUIRE(rep.size() == test_idx.size() * 2);
  for (const auto& row : rep.rows()) {
    CHECK(std::isfinite(row.si_sdr));
    CHECK(std::isfinite(row.si_sdri));
    CHECK((row.speaker == 0 || row.speaker == 1));
  }
  CHECK(rep.rows()[0].example == static_cast<int>(test_idx[0]));
  CHECK(std::isfinite(rep.mean_si_sdri()));
  CHECK(rep.std_si_sdri() >= 0.0);
}

TEST_CASE("loss and metric agree on real model output") {
  TempDir tmp;
  CorpusSpec cspec = tiny_corpus_spec();
  const std::string cdir = tmp.file("corpus");
  generate_corpus(cspec, cdir);
  Manifest man = load_manifest(cdir);

  BinModel model(tiny_model_config(), 5);
  NoGradGuard ng;
  AvsExample ex = load_example(man, 0);
  Tensor est = model.separate(mixture_tensor(ex), cues_tensor(ex));
  Tensor ref = sources_tensor(ex);
  // without the floor the negated loss is the metric, up to rounding
  const double floorless = -separation_loss(est, ref, 0.0).item();
  CHECK(std::abs(floorless - mean_ref_si_sdr(est, ref)) <= 1e-6);
  // the training default stays within the same tolerance here too
  CHECK(std::abs(-separation_loss(est, ref).item() - floorless) <= 1e-2);
}

TEST_CASE("iteration_trace: R rows, finite, last row matches evaluate") {
  TempDir tmp;
  CorpusSpec cspec = tiny_corpus_spec();
  const std::string cdir = tmp.file("corpus");
  generate_corpus(cspec, cdir);
  Manifest man = load_manifest(cdir);

  BinModel model(tiny_model_config(), 5);
  auto test_idx = split_indices(man, "test");
  auto rows = iteration_trace(model, man, test_idx);
  REQUIRE(rows.size() == 2);
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].iteration == static_cast<int>(i + 1));
    CHECK(std::isfinite(rows[i].si_sdri_mean));
    CHECK(rows[i].si_sdri_std >= 0.0);
  }
  MetricReport rep = evaluate(model, man, test_idx);
  CHECK(std::abs(rows.back().si_sdri_mean - rep.mean_si_sdri()) <= 1e-12);
  CHECK(std::abs(rows.back().si_sdri_std - rep.std_si_sdri()) <= 1e-12);

  const std::string csv = trace_to_csv(rows);
  CHECK(csv.rfind("iteration,si_sdri_mean,si_sdri_std\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("\n1,") != std::string::npos);
  CHECK(csv.find("\n2,") != std::string::npos);
}

TEST_CASE("TrainLog CSV formatting") {
  TrainLog log;
  log.rows.push_back({1, 0, -2.5, std::numeric_limits<double>::quiet_NaN()});
  log.rows.push_back({2, 0, -3.25, 1.75});
  const std::string csv = log.to_csv();
  CHECK(csv ==
        "step,epoch,loss,val_si_sdri\n"
        "1,0,-2.5,\n"
        "2,0,-3.25,1.75\n");
}

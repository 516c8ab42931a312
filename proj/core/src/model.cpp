#include "binet/model.hpp"

#include <fstream>
#include <sstream>

namespace binet {

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "no_bottleneck") return Variant::no_bottleneck;
  if (s == "no_c") return Variant::no_c;
  if (s == "no_cA") return Variant::no_cA;
  if (s == "no_cV") return Variant::no_cV;
  throw ConfigError("unknown variant '" + s +
                    "' (expected full, no_bottleneck, no_c, no_cA, no_cV)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_bottleneck: return "no_bottleneck";
    case Variant::no_c: return "no_c";
    case Variant::no_cA: return "no_cA";
    case Variant::no_cV: return "no_cV";
  }
  throw ContractError("variant_name: bad enum value");
}

std::vector<std::string> ModelConfig::validate() const {
  std::vector<std::string> bad;
  auto positive = [&](const char* name, int v) {
    if (v < 1) bad.push_back(std::string(name) + " must be >= 1, got " + std::to_string(v));
  };
  positive("M", M);
  positive("T", T);
  positive("K_A", K_A);
  positive("S_A", S_A);
  positive("C_A", C_A);
  positive("C_V", C_V);
  positive("C_H", C_H);
  positive("R", R);
  positive("D", D);
  positive("F_V", F_V);
  positive("d_v", d_v);
  positive("C_blk", C_blk);
  if (T < K_A) bad.push_back("T must be >= K_A");
  if (T >= K_A && S_A >= 1) {
    const int want = derived_f_a(T, K_A, S_A);
    if (F_A != want) {
      bad.push_back("F_A is " + std::to_string(F_A) + " but floor((T-K_A)/S_A)+1 = " +
                    std::to_string(want));
    }
    if (D >= 1 && want < (1 << D)) {
      bad.push_back("F_A = " + std::to_string(want) + " is below 2^D = " +
                    std::to_string(1 << D));
    }
  }
  return bad;
}

void ModelConfig::check() const {
  auto bad = validate();
  if (bad.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& b : bad) msg += "\n  - " + b;
  throw ConfigError(msg);
}

std::string ModelConfig::serialize() const {
  std::ostringstream os;
  os << "M = " << M << "\n"
     << "T = " << T << "\n"
     << "K_A = " << K_A << "\n"
     << "S_A = " << S_A << "\n"
     << "C_A = " << C_A << "\n"
     << "F_A = " << F_A << "\n"
     << "C_V = " << C_V << "\n"
     << "F_V = " << F_V << "\n"
     << "C_H = " << C_H << "\n"
     << "R = " << R << "\n"
     << "D = " << D << "\n"
     << "variant = " << variant_name(variant) << "\n"
     << "d_v = " << d_v << "\n"
     << "C_blk = " << C_blk << "\n";
  return os.str();
}

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not an integer: '" + value + "'");
  }
}

}  // namespace

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  std::vector<std::string> seen;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line is not 'key = value': '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    for (const auto& s : seen) {
      if (s == key) throw ConfigError("config key '" + key + "' given twice");
    }
    seen.push_back(key);
    if (key == "M") cfg.M = parse_int(key, value);
    else if (key == "T") cfg.T = parse_int(key, value);
    else if (key == "K_A") cfg.K_A = parse_int(key, value);
    else if (key == "S_A") cfg.S_A = parse_int(key, value);
    else if (key == "C_A") cfg.C_A = parse_int(key, value);
    else if (key == "F_A") cfg.F_A = parse_int(key, value);
    else if (key == "C_V") cfg.C_V = parse_int(key, value);
    else if (key == "F_V") cfg.F_V = parse_int(key, value);
    else if (key == "C_H") cfg.C_H = parse_int(key, value);
    else if (key == "R") cfg.R = parse_int(key, value);
    else if (key == "D") cfg.D = parse_int(key, value);
    else if (key == "variant") cfg.variant = variant_from_string(value);
    else if (key == "d_v") cfg.d_v = parse_int(key, value);
    else if (key == "C_blk") cfg.C_blk = parse_int(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

ModelConfig ModelConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open model config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

void ModelConfig::save_file(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write model config '" + path + "'");
  f << serialize();
  if (!f) throw IoError("short write to model config '" + path + "'");
}

// ---------------------------------------------------------------------------
// BinModel
// ---------------------------------------------------------------------------

namespace {

Tensor token_init(int c_h, int f_a, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(c_h));
  return Tensor::uniform({c_h, f_a}, rng, -bound, bound);
}

}  // namespace

BinModel::BinModel(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.check();
  Rng rng(derive_seed(seed, 0xb19ULL));

  enc_a_ = Conv1dLayer(params_, "enc_a", 1, cfg_.C_A, cfg_.K_A, cfg_.S_A, 0, rng);

  const int cue_channels = cfg_.M * cfg_.d_v;
  enc_v0_ = Conv1dLayer(params_, "enc_v.conv0", cue_channels, cfg_.C_V, 3, 1, 1, rng);
  enc_v_act0_ = PReLULayer(params_, "enc_v.act0", cfg_.C_V);
  enc_v1_ = Conv1dLayer(params_, "enc_v.conv1", cfg_.C_V, cfg_.C_V, 3, 1, 1, rng);
  enc_v_act1_ = PReLULayer(params_, "enc_v.act1", cfg_.C_V);

  const bool has_token_a =
      cfg_.variant == Variant::full || cfg_.variant == Variant::no_c ||
      cfg_.variant == Variant::no_cV;
  const bool has_token_v =
      cfg_.variant == Variant::full || cfg_.variant == Variant::no_c ||
      cfg_.variant == Variant::no_cA;

  if (has_token_a) {
    token_a_ = params_.add("token_a", token_init(cfg_.C_H, cfg_.F_A, rng));
  }
  if (has_token_v) {
    token_v_ = params_.add("token_v", token_init(cfg_.C_H, cfg_.F_A, rng));
  }

  if (cfg_.variant == Variant::no_bottleneck) {
    // one joint generator over both modalities, no tokens anywhere
    const int in_ch = cfg_.C_A + cfg_.C_V;
    const int out_ch = cfg_.C_A + cfg_.C_V;
    pre_j_ = Conv1dLayer(params_, "gen_joint.pre", in_ch, cfg_.C_blk, 1, 1, 0, rng);
    blk_j_ = MultiScaleBlock(params_, "gen_joint.blk", cfg_.C_blk, cfg_.C_blk, out_ch,
                             cfg_.D, cfg_.F_A, rng);
  } else {
    // audio generator: token head removed under no_cA
    const int a_in = cfg_.C_A + cfg_.C_H;
    const int a_out = cfg_.variant == Variant::no_cA ? cfg_.C_A : cfg_.C_A + cfg_.C_H;
    pre_a_ = Conv1dLayer(params_, "gen_a.pre", a_in, cfg_.C_blk, 1, 1, 0, rng);
    blk_a_ = MultiScaleBlock(params_, "gen_a.blk", cfg_.C_blk, cfg_.C_blk, a_out,
                             cfg_.D, cfg_.F_A, rng);
    // video generator: token head removed under no_cV
    const int v_in = cfg_.C_V + cfg_.C_H;
    const int v_out = cfg_.variant == Variant::no_cV ? cfg_.C_V : cfg_.C_V + cfg_.C_H;
    pre_v_ = Conv1dLayer(params_, "gen_v.pre", v_in, cfg_.C_blk, 1, 1, 0, rng);
    blk_v_ = MultiScaleBlock(params_, "gen_v.blk", cfg_.C_blk, cfg_.C_blk, v_out,
                             cfg_.D, cfg_.F_A, rng);
  }

  predictor_ = Conv1dLayer(params_, "predictor", cfg_.C_A + cfg_.C_V,
                           cfg_.M * cfg_.C_A, 1, 1, 0, rng);
  dec_ = ConvTranspose1dLayer(params_, "dec", cfg_.C_A, 1, cfg_.K_A, cfg_.S_A, 0, rng);
}

Tensor BinModel::encode_audio(const Tensor& s) const {
  if (s.rank() != 2 || s.dim(0) != 1 || s.dim(1) != cfg_.T) {
    throw ShapeError("encode_audio: expected [1, " + std::to_string(cfg_.T) +
                     "], got " + shape_str(s.shape()));
  }
  return enc_a_.forward(s);
}

Tensor BinModel::encode_video(const Tensor& v) const {
  const int want = cfg_.M * cfg_.d_v;
  if (v.rank() != 2 || v.dim(0) != want || v.dim(1) != cfg_.F_V) {
    throw ShapeError("encode_video: expected [" + std::to_string(want) + ", " +
                     std::to_string(cfg_.F_V) + "], got " + shape_str(v.shape()));
  }
  Tensor h = enc_v_act0_.forward(enc_v0_.forward(v));
  h = enc_v_act1_.forward(enc_v1_.forward(h));
  return interpolate_time(h, cfg_.F_A);
}

FusionState BinModel::init_fusion_state() const {
  FusionState st;
  st.a_hat = Tensor::zeros({cfg_.C_A, cfg_.F_A});
  st.v_hat = Tensor::zeros({cfg_.C_V, cfg_.F_A});
  st.i = 0;
  switch (cfg_.variant) {
    case Variant::full:
      st.cA = token_a_;
      st.cV = token_v_;
      st.c = scalar_mul(add(st.cA, st.cV), 0.5);
      break;
    case Variant::no_c:
      st.cA = token_a_;
      st.cV = token_v_;
      break;
    case Variant::no_cA:
      st.cV = token_v_;
      st.c = st.cV;
      break;
    case Variant::no_cV:
      st.cA = token_a_;
      st.c = st.cA;
      break;
    case Variant::no_bottleneck:
      break;
  }
  return st;
}

Tensor BinModel::run_generator(char branch, const Tensor& input) const {
  if (probe_) return probe_(branch, input);
  switch (branch) {
    case 'A': return blk_a_.forward(pre_a_.forward(input));
    case 'V': return blk_v_.forward(pre_v_.forward(input));
    case 'J': return blk_j_.forward(pre_j_.forward(input));
    default: throw ContractError("run_generator: bad branch tag");
  }
}

FusionState BinModel::fusion_step(const FusionState& st, const Tensor& eA,
                                  const Tensor& eV) const {
  if (st.i >= cfg_.R) {
    throw ContractError("fusion_step: iteration " + std::to_string(st.i) +
                        " is past the configured R = " + std::to_string(cfg_.R));
  }
  FusionState next;
  next.i = st.i + 1;

  if (cfg_.variant == Variant::no_bottleneck) {
    Tensor joint = run_generator(
        'J', concat({add(st.a_hat, eA), add(st.v_hat, eV)}, 0));
    auto parts = split(joint, 0, {cfg_.C_A, cfg_.C_V});
    next.a_hat = parts[0];
    next.v_hat = parts[1];
    return next;
  }

  const Tensor& audio_token =
      cfg_.variant == Variant::no_c ? st.cA : st.c;
  const Tensor& video_token =
      cfg_.variant == Variant::no_c ? st.cV : st.c;

  Tensor ga = run_generator('A', concat({add(st.a_hat, eA), audio_token}, 0));
  Tensor gv = run_generator('V', concat({add(st.v_hat, eV), video_token}, 0));

  if (cfg_.variant == Variant::no_cA) {
    next.a_hat = ga;  // no token head on the audio branch
  } else {
    auto parts = split(ga, 0, {cfg_.C_A, cfg_.C_H});
    next.a_hat = parts[0];
    next.cA = parts[1];
  }
  if (cfg_.variant == Variant::no_cV) {
    next.v_hat = gv;
  } else {
    auto parts = split(gv, 0, {cfg_.C_V, cfg_.C_H});
    next.v_hat = parts[0];
    next.cV = parts[1];
  }

  switch (cfg_.variant) {
    case Variant::full:
      next.c = scalar_mul(add(next.cA, next.cV), 0.5);
      break;
    case Variant::no_c:
      break;  // tokens stay modality-local, no fused token exists
    case Variant::no_cA:
      next.c = next.cV;
      break;
    case Variant::no_cV:
      next.c = next.cA;
      break;
    case Variant::no_bottleneck:
      break;  // unreachable
  }
  return next;
}

IterationRun BinModel::run_iterations(const Tensor& eA, const Tensor& eV,
                                      bool taps) const {
  IterationRun run;
  FusionState st = init_fusion_state();
  if (taps) run.taps.reserve(static_cast<size_t>(cfg_.R));
  for (int i = 0; i < cfg_.R; ++i) {
    st = fusion_step(st, eA, eV);
    if (taps) run.taps.push_back(st);
  }
  run.final_state = std::move(st);
  return run;
}

Tensor BinModel::predict_mask(const Tensor& a_hat, const Tensor& v_hat) const {
  Tensor joint = concat({a_hat, v_hat}, 0);
  Tensor raw = relu(predictor_.forward(joint));
  return reshape(raw, {cfg_.M, cfg_.C_A, cfg_.F_A});
}

Tensor BinModel::decode(const Tensor& masked) const {
  Tensor w = dec_.forward(masked);  // [1, T_dec]
  const int t_dec = w.dim(1);
  if (t_dec > cfg_.T) {
    w = narrow_time(w, (t_dec - cfg_.T) / 2, cfg_.T);
  } else if (t_dec < cfg_.T) {
    const int left = (cfg_.T - t_dec) / 2;
    w = pad_time(w, left, cfg_.T - t_dec - left);
  }
  return reshape(w, {cfg_.T});
}

Tensor BinModel::separate(const Tensor& s, const Tensor& v) const {
  Tensor eA = encode_audio(s);
  Tensor eV = encode_video(v);
  FusionState st = run_iterations(eA, eV, false).final_state;
  Tensor m = predict_mask(st.a_hat, st.v_hat);

  std::vector<int> ones(static_cast<size_t>(cfg_.M), 1);
  auto speaker_masks = split(m, 0, ones);
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(cfg_.M));
  for (int i = 0; i < cfg_.M; ++i) {
    Tensor mask = reshape(speaker_masks[static_cast<size_t>(i)], {cfg_.C_A, cfg_.F_A});
    Tensor wav = decode(mul(eA, mask));
    outs.push_back(reshape(wav, {1, cfg_.T}));
  }
  return concat(outs, 0);
}

std::vector<Tensor> BinModel::per_iteration_masks(const Tensor& s, const Tensor& v) const {
  Tensor eA = encode_audio(s);
  Tensor eV = encode_video(v);
  IterationRun run = run_iterations(eA, eV, true);
  std::vector<Tensor> masks;
  masks.reserve(run.taps.size());
  for (const auto& st : run.taps) {
    masks.push_back(predict_mask(st.a_hat, st.v_hat));
  }
  return masks;
}

int64_t BinModel::count_macs_per_iteration() const {
  if (cfg_.variant == Variant::no_bottleneck) {
    return pre_j_.macs(cfg_.F_A) + blk_j_.macs(cfg_.F_A);
  }
  return pre_a_.macs(cfg_.F_A) + blk_a_.macs(cfg_.F_A) + pre_v_.macs(cfg_.F_A) +
         blk_v_.macs(cfg_.F_A);
}

int64_t BinModel::count_macs_encoder_decoder() const {
  return enc_a_.macs(cfg_.T) + enc_v0_.macs(cfg_.F_V) + enc_v1_.macs(cfg_.F_V) +
         static_cast<int64_t>(cfg_.M) * dec_.macs(cfg_.F_A);
}

int64_t BinModel::count_macs() const {
  return count_macs_encoder_decoder() +
         static_cast<int64_t>(cfg_.R) * count_macs_per_iteration() +
         predictor_.macs(cfg_.F_A);
}

BinModel build_model(const ModelConfig& cfg, uint64_t seed) {
  return BinModel(cfg, seed);
}

}  // namespace binet

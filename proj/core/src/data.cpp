#include "binet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace binet {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Source synthesis
// ---------------------------------------------------------------------------

namespace {

constexpr int kHarmonics = 4;
constexpr double kTwoPi = 6.283185307179586476925287;
constexpr double kRampSeconds = 0.025;   // on/off transition width
constexpr double kMinSegment = 0.15;     // seconds
constexpr double kMaxSegment = 0.6;

// Piecewise on/off gate: a sorted list of flip times starting in the
// "on" state, with smoothstep transitions of width kRampSeconds.
double gate_value(const std::vector<double>& flips, double ramp, double t) {
  const size_t idx =
      static_cast<size_t>(std::upper_bound(flips.begin(), flips.end(), t) -
                          flips.begin());
  auto state = [&](size_t k) { return k % 2 == 0 ? 1.0 : 0.0; };
  if (idx > 0) {
    const double b = flips[idx - 1];
    if (t < b + ramp * 0.5) {
      const double x = (t - (b - ramp * 0.5)) / ramp;
      const double w = x * x * (3.0 - 2.0 * x);
      return state(idx - 1) + (state(idx) - state(idx - 1)) * w;
    }
  }
  if (idx < flips.size()) {
    const double b = flips[idx];
    if (t > b - ramp * 0.5) {
      const double x = (t - (b - ramp * 0.5)) / ramp;
      const double w = x * x * (3.0 - 2.0 * x);
      return state(idx) + (state(idx + 1) - state(idx)) * w;
    }
  }
  return state(idx);
}

}  // namespace

SourceDraw synth_source(uint64_t seed, int t, int sample_rate, int f_v, int d_v,
                        double f0_lo, double f0_hi) {
  if (t < 2 || sample_rate < 1 || f_v < 2 || d_v < 1) {
    throw ConfigError("synth_source: need T >= 2, sample_rate >= 1, F_V >= 2, d_v >= 1");
  }
  if (!(f0_lo > 0.0) || !(f0_hi >= f0_lo)) {
    throw ConfigError("synth_source: bad fundamental range");
  }
  Rng rng(seed);

  // log-uniform fundamental, random harmonic phases
  const double f0 = f0_lo * std::exp(rng.next_double() * std::log(f0_hi / f0_lo));
  double phase[kHarmonics];
  for (double& p : phase) p = rng.uniform(0.0, kTwoPi);

  // utterance gate: first segment always on so the source is never silent
  const double duration = static_cast<double>(t) / sample_rate;
  std::vector<double> flips;
  double at = 0.0;
  while (at < duration) {
    at += rng.uniform(kMinSegment, kMaxSegment);
    flips.push_back(at);
  }

  SourceDraw out;
  out.f0 = f0;
  out.waveform.resize(static_cast<size_t>(t));
  double sum_sq = 0.0;
  for (int i = 0; i < t; ++i) {
    const double ti = static_cast<double>(i) / sample_rate;
    double acc = 0.0;
    for (int h = 0; h < kHarmonics; ++h) {
      acc += std::sin(kTwoPi * (h + 1) * f0 * ti + phase[h]) / (h + 1);
    }
    const double v = gate_value(flips, kRampSeconds, ti) * acc;
    out.waveform[static_cast<size_t>(i)] = v;
    sum_sq += v * v;
  }
  const double rms = std::sqrt(sum_sq / t);
  if (rms <= 0.0) throw ContractError("synth_source: silent draw");
  for (double& v : out.waveform) v /= rms;

  // envelope at the cue frame instants (endpoint-aligned with the clip)
  out.envelope.resize(static_cast<size_t>(f_v));
  for (int j = 0; j < f_v; ++j) {
    const double tj =
        static_cast<double>(j) * (t - 1) / ((f_v - 1) * static_cast<double>(sample_rate));
    out.envelope[static_cast<size_t>(j)] = gate_value(flips, kRampSeconds, tj);
  }

  // constant unit timbre vector
  out.timbre.resize(static_cast<size_t>(d_v - 1));
  double norm_sq = 0.0;
  for (double& v : out.timbre) {
    v = rng.normal();
    norm_sq += v * v;
  }
  if (!out.timbre.empty()) {
    if (norm_sq <= 0.0) {
      out.timbre[0] = 1.0;
    } else {
      const double inv = 1.0 / std::sqrt(norm_sq);
      for (double& v : out.timbre) v *= inv;
    }
  }
  return out;
}

std::vector<double> make_cues(const std::vector<double>& envelope,
                              const std::vector<double>& timbre,
                              uint64_t cue_noise_seed, double cue_snr_db) {
  const size_t f_v = envelope.size();
  const size_t d_v = timbre.size() + 1;
  if (f_v == 0) throw ShapeError("make_cues: empty envelope");

  std::vector<double> cues(d_v * f_v);
  std::copy(envelope.begin(), envelope.end(), cues.begin());
  for (size_t ch = 1; ch < d_v; ++ch) {
    std::fill_n(cues.begin() + static_cast<std::ptrdiff_t>(ch * f_v), f_v,
                timbre[ch - 1]);
  }
  if (std::isinf(cue_snr_db) && cue_snr_db > 0.0) return cues;

  double clean_power = 0.0;
  for (double v : cues) clean_power += v * v;
  clean_power /= static_cast<double>(cues.size());
  if (clean_power <= 0.0) {
    throw DomainError("make_cues: clean cue stream has zero power");
  }

  Rng rng(cue_noise_seed);
  std::vector<double> noise(cues.size());
  double noise_power = 0.0;
  for (double& v : noise) {
    v = rng.normal();
    noise_power += v * v;
  }
  noise_power /= static_cast<double>(noise.size());
  // rescale so the realized (not just expected) noise power hits the target
  const double target = clean_power / std::pow(10.0, cue_snr_db / 10.0);
  const double scale = std::sqrt(target / noise_power);
  for (size_t i = 0; i < cues.size(); ++i) cues[i] += noise[i] * scale;
  return cues;
}

MixResult mix_at_snr(const std::vector<std::vector<double>>& sources,
                     const std::vector<double>& noise_raw, double snr_db) {
  if (sources.empty()) throw ShapeError("mix_at_snr: no sources");
  const size_t t = noise_raw.size();
  if (t == 0) throw ShapeError("mix_at_snr: empty noise");
  for (const auto& s : sources) {
    if (s.size() != t) {
      throw ShapeError("mix_at_snr: source length " + std::to_string(s.size()) +
                       " differs from noise length " + std::to_string(t));
    }
  }

  // speakers ascending
  std::vector<double> summed(sources[0]);
  for (size_t m = 1; m < sources.size(); ++m) {
    for (size_t i = 0; i < t; ++i) summed[i] += sources[m][i];
  }
  double p_src = 0.0, p_noise = 0.0;
  for (size_t i = 0; i < t; ++i) {
    p_src += summed[i] * summed[i];
    p_noise += noise_raw[i] * noise_raw[i];
  }
  if (p_noise == 0.0) throw DomainError("mix_at_snr: noise has zero power");
  if (p_src == 0.0) throw DomainError("mix_at_snr: summed sources have zero power");

  const double scale = std::sqrt(p_src / (p_noise * std::pow(10.0, snr_db / 10.0)));
  MixResult out;
  out.noise_scaled.resize(t);
  out.mixture.resize(t);
  for (size_t i = 0; i < t; ++i) {
    out.noise_scaled[i] = noise_raw[i] * scale;
    out.mixture[i] = summed[i] + out.noise_scaled[i];  // then noise
  }
  return out;
}

Tensor mixture_tensor(const AvsExample& ex) {
  return Tensor::from({1, ex.t}, ex.s);
}

Tensor sources_tensor(const AvsExample& ex) {
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(ex.m) * ex.t);
  for (const auto& s : ex.sources) flat.insert(flat.end(), s.begin(), s.end());
  return Tensor::from({ex.m, ex.t}, std::move(flat));
}

Tensor cues_tensor(const AvsExample& ex) {
  return Tensor::from({ex.m * ex.d_v, ex.f_v}, ex.cues);
}

// ---------------------------------------------------------------------------
// CorpusSpec text format
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
    throw ConfigError("corpus key '" + key + "': not an integer: '" + value + "'");
  }
}

uint64_t parse_u64_value(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    uint64_t v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("corpus key '" + key + "': not an unsigned integer: '" + value +
                      "'");
  }
}

double parse_double_value(const std::string& key, const std::string& value) {
  if (value == "inf") return std::numeric_limits<double>::infinity();
  try {
    size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("corpus key '" + key + "': not a number: '" + value + "'");
  }
}

}  // namespace

std::vector<std::string> CorpusSpec::validate() const {
  std::vector<std::string> bad;
  if (n_train < 0 || n_val < 0 || n_test < 0) bad.push_back("split counts must be >= 0");
  if (total() < 1) bad.push_back("corpus must contain at least one example");
  if (T < 2) bad.push_back("T must be >= 2");
  if (sample_rate < 1) bad.push_back("sample_rate must be >= 1");
  if (M < 1) bad.push_back("M must be >= 1");
  if (d_v < 1) bad.push_back("d_v must be >= 1");
  if (F_V < 2) bad.push_back("F_V must be >= 2");
  if (snr_db_set.empty()) bad.push_back("snr_db_set must not be empty");
  for (double v : snr_db_set) {
    if (!std::isfinite(v)) bad.push_back("snr_db_set entries must be finite");
  }
  if (!(ambiguity >= 0.0 && ambiguity <= 1.0)) {
    bad.push_back("ambiguity must lie in [0, 1]");
  }
  if (std::isnan(cue_snr_db)) bad.push_back("cue_snr_db must not be NaN");
  return bad;
}

void CorpusSpec::check() const {
  auto bad = validate();
  if (bad.empty()) return;
  std::string msg = "invalid corpus spec:";
  for (const auto& b : bad) msg += "\n  - " + b;
  throw ConfigError(msg);
}

std::string CorpusSpec::serialize() const {
  std::ostringstream os;
  os << "n_train = " << n_train << "\n"
     << "n_val = " << n_val << "\n"
     << "n_test = " << n_test << "\n"
     << "T = " << T << "\n"
     << "sample_rate = " << sample_rate << "\n"
     << "M = " << M << "\n"
     << "d_v = " << d_v << "\n"
     << "F_V = " << F_V << "\n"
     << "snr_db_set = ";
  for (size_t i = 0; i < snr_db_set.size(); ++i) {
    if (i) os << ", ";
    os << fmt_double(snr_db_set[i]);
  }
  os << "\n"
     << "master_seed = " << master_seed << "\n"
     << "ambiguity = " << fmt_double(ambiguity) << "\n"
     << "cue_snr_db = " << (std::isinf(cue_snr_db) ? "inf" : fmt_double(cue_snr_db))
     << "\n";
  return os.str();
}

CorpusSpec CorpusSpec::parse(const std::string& text) {
  CorpusSpec spec;
  std::vector<std::string> seen;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("corpus line is not 'key = value': '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    for (const auto& s : seen) {
      if (s == key) throw ConfigError("corpus key '" + key + "' given twice");
    }
    seen.push_back(key);
    if (key == "n_train") spec.n_train = parse_int_value(key, value);
    else if (key == "n_val") spec.n_val = parse_int_value(key, value);
    else if (key == "n_test") spec.n_test = parse_int_value(key, value);
    else if (key == "T") spec.T = parse_int_value(key, value);
    else if (key == "sample_rate") spec.sample_rate = parse_int_value(key, value);
    else if (key == "M") spec.M = parse_int_value(key, value);
    else if (key == "d_v") spec.d_v = parse_int_value(key, value);
    else if (key == "F_V") spec.F_V = parse_int_value(key, value);
    else if (key == "master_seed") spec.master_seed = parse_u64_value(key, value);
    else if (key == "ambiguity") spec.ambiguity = parse_double_value(key, value);
    else if (key == "cue_snr_db") spec.cue_snr_db = parse_double_value(key, value);
    else if (key == "snr_db_set") {
      spec.snr_db_set.clear();
      std::istringstream vs(value);
      std::string item;
      while (std::getline(vs, item, ',')) {
        spec.snr_db_set.push_back(parse_double_value(key, trim(item)));
      }
      if (spec.snr_db_set.empty()) {
        throw ConfigError("corpus key 'snr_db_set': empty list");
      }
    } else {
      throw ConfigError("unknown corpus key '" + key + "'");
    }
  }
  return spec;
}

CorpusSpec CorpusSpec::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open corpus spec '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

void CorpusSpec::save_file(const std::string& path) const {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write corpus spec '" + path + "'");
  f << serialize();
  if (!f) throw IoError("short write to corpus spec '" + path + "'");
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

namespace {

void put_u16(std::string& b, uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint16_t get_u16(const std::string& b, size_t at) {
  return static_cast<uint16_t>(static_cast<uint8_t>(b[at]) |
                               (static_cast<uint8_t>(b[at + 1]) << 8));
}

uint32_t get_u32(const std::string& b, size_t at) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(b[at + i])) << (8 * i);
  return v;
}

}  // namespace

std::vector<int16_t> quantize16(const std::vector<double>& samples) {
  std::vector<int16_t> out(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) {
    double v = samples[i];
    if (v > 1.0) v = 1.0;
    if (v < -1.0) v = -1.0;
    out[i] = static_cast<int16_t>(std::lrint(v * 32767.0));
  }
  return out;
}

void write_wav_pcm(const std::string& path, const std::vector<int16_t>& samples,
                   int sample_rate) {
  if (sample_rate < 1) throw ConfigError("write_wav: sample_rate must be >= 1");
  const uint32_t data_size = static_cast<uint32_t>(samples.size() * 2);
  std::string buf;
  buf.reserve(44 + data_size);
  buf += "RIFF";
  put_u32(buf, 36 + data_size);
  buf += "WAVE";
  buf += "fmt ";
  put_u32(buf, 16);
  put_u16(buf, 1);  // PCM
  put_u16(buf, 1);  // mono
  put_u32(buf, static_cast<uint32_t>(sample_rate));
  put_u32(buf, static_cast<uint32_t>(sample_rate) * 2);
  put_u16(buf, 2);   // block align
  put_u16(buf, 16);  // bits
  buf += "data";
  put_u32(buf, data_size);
  for (int16_t s : samples) put_u16(buf, static_cast<uint16_t>(s));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("short write to '" + path + "'");
}

void write_wav(const std::string& path, const std::vector<double>& samples,
               int sample_rate) {
  write_wav_pcm(path, quantize16(samples), sample_rate);
}

std::vector<int16_t> read_wav_pcm(const std::string& path, int* sample_rate) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open WAV '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string b = ss.str();

  auto fail = [&](const std::string& why) {
    throw FormatError("WAV '" + path + "': " + why);
  };
  if (b.size() < 12) fail("file shorter than the RIFF header");
  if (b.compare(0, 4, "RIFF") != 0) fail("missing RIFF tag");
  if (b.compare(8, 4, "WAVE") != 0) fail("missing WAVE tag");

  bool have_fmt = false;
  size_t data_at = 0, data_len = 0;
  int rate = 0;
  size_t at = 12;
  while (at + 8 <= b.size()) {
    const std::string id = b.substr(at, 4);
    const uint32_t len = get_u32(b, at + 4);
    const size_t body = at + 8;
    if (body + len > b.size()) fail("chunk '" + id + "' overruns the file");
    if (id == "fmt ") {
      if (len < 16) fail("fmt chunk too short");
      const uint16_t format = get_u16(b, body);
      const uint16_t channels = get_u16(b, body + 2);
      rate = static_cast<int>(get_u32(b, body + 4));
      const uint16_t bits = get_u16(b, body + 14);
      if (format != 1) fail("not PCM (format " + std::to_string(format) + ")");
      if (channels != 1) fail("not mono (" + std::to_string(channels) + " channels)");
      if (bits != 16) fail("not 16-bit (" + std::to_string(bits) + " bits)");
      have_fmt = true;
    } else if (id == "data") {
      data_at = body;
      data_len = len;
    }
    at = body + len + (len % 2);  // chunks are word-aligned
  }
  if (!have_fmt) fail("no fmt chunk");
  if (data_at == 0) fail("no data chunk");
  if (data_len % 2 != 0) fail("odd data length for 16-bit samples");

  std::vector<int16_t> samples(data_len / 2);
  for (size_t i = 0; i < samples.size(); ++i) {
    samples[i] = static_cast<int16_t>(get_u16(b, data_at + 2 * i));
  }
  if (sample_rate) *sample_rate = rate;
  return samples;
}

WavData read_wav(const std::string& path) {
  WavData out;
  const auto pcm = read_wav_pcm(path, &out.sample_rate);
  out.samples.resize(pcm.size());
  for (size_t i = 0; i < pcm.size(); ++i) out.samples[i] = pcm[i] / 32767.0;
  return out;
}

// ---------------------------------------------------------------------------
// f64 master file: magic "BINCUE01", u32 record count, then one record
// per example. Record: u32 array count, each array u32 rank + u32 dims
// + f64 payload. Arrays per record: cues [M*d_v, F_V], sources [M, T],
// noise [T].
// ---------------------------------------------------------------------------

namespace {

constexpr char kMasterMagic[] = "BINCUE01";
constexpr uint32_t kArraysPerRecord = 3;

void append_f64(std::string& b, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

void append_array(std::string& b, const std::vector<uint32_t>& dims,
                  const std::vector<double>& data) {
  put_u32(b, static_cast<uint32_t>(dims.size()));
  uint64_t numel = 1;
  for (uint32_t d : dims) {
    put_u32(b, d);
    numel *= d;
  }
  if (numel != data.size()) throw ContractError("master array dims/payload mismatch");
  for (double v : data) append_f64(b, v);
}

struct MasterReader {
  std::ifstream f;
  std::string path;

  explicit MasterReader(const std::string& p) : f(p, std::ios::binary), path(p) {
    if (!f) throw IoError("cannot open master file '" + p + "'");
  }

  void fail(const std::string& why) {
    throw FormatError("master file '" + path + "': " + why);
  }

  void read_bytes(void* dst, size_t n, const char* what) {
    f.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(f.gcount()) != n) {
      fail(std::string("truncated while reading ") + what);
    }
  }

  uint32_t read_u32(const char* what) {
    unsigned char raw[4];
    read_bytes(raw, 4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(raw[i]) << (8 * i);
    return v;
  }

  uint32_t open_and_count() {
    char magic[8];
    read_bytes(magic, 8, "magic");
    if (std::memcmp(magic, kMasterMagic, 8) != 0) fail("bad magic");
    return read_u32("record count");
  }

  // reads one array header, returning dims; leaves the stream at the payload
  std::vector<uint32_t> read_dims() {
    const uint32_t rank = read_u32("array rank");
    if (rank == 0 || rank > 4) fail("array rank " + std::to_string(rank));
    std::vector<uint32_t> dims(rank);
    for (auto& d : dims) {
      d = read_u32("array dim");
      if (d == 0) fail("zero array dimension");
    }
    return dims;
  }

  std::vector<double> read_payload(const std::vector<uint32_t>& dims) {
    uint64_t numel = 1;
    for (uint32_t d : dims) numel *= d;
    std::vector<double> data(numel);
    std::vector<unsigned char> raw(numel * 8);
    read_bytes(raw.data(), raw.size(), "array payload");
    for (uint64_t i = 0; i < numel; ++i) {
      uint64_t bits = 0;
      for (int k = 0; k < 8; ++k) {
        bits |= static_cast<uint64_t>(raw[i * 8 + k]) << (8 * k);
      }
      double v;
      std::memcpy(&v, &bits, 8);
      data[i] = v;
    }
    return data;
  }

  void skip_payload(const std::vector<uint32_t>& dims) {
    uint64_t numel = 1;
    for (uint32_t d : dims) numel *= d;
    f.seekg(static_cast<std::streamoff>(numel * 8), std::ios::cur);
    if (!f) fail("truncated array payload");
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

namespace {

// per-example randomness stream tags
constexpr uint64_t kTagLayout = 1;
constexpr uint64_t kTagNoise = 7;
constexpr uint64_t kTagSource = 10;  // + speaker
constexpr uint64_t kTagCue = 100;    // + speaker

constexpr double kF0Low = 90.0;
constexpr double kF0High = 300.0;
constexpr double kAmbiguousBandRatio = 1.06;  // shared-band width
constexpr double kBandMargin = 1.05;          // gap around disjoint band edges
constexpr double kWavHeadroom = 0.97;

struct ExampleDraw {
  AvsExample ex;
  bool ambiguous = false;
};

ExampleDraw draw_example(const CorpusSpec& spec, uint64_t example_seed) {
  ExampleDraw out;
  AvsExample& ex = out.ex;
  ex.seed = example_seed;
  ex.t = spec.T;
  ex.m = spec.M;
  ex.d_v = spec.d_v;
  ex.f_v = spec.F_V;

  Rng layout(derive_seed(example_seed, kTagLayout));
  out.ambiguous = layout.next_double() < spec.ambiguity;
  ex.snr_db = spec.snr_db_set[layout.next_below(spec.snr_db_set.size())];

  // per-speaker fundamental bands
  std::vector<std::pair<double, double>> bands(static_cast<size_t>(spec.M));
  if (out.ambiguous) {
    // everyone shares one narrow band: only the cues can tell speakers apart
    const double top = kF0High / kAmbiguousBandRatio;
    const double base = kF0Low * std::exp(layout.next_double() * std::log(top / kF0Low));
    for (auto& b : bands) b = {base, base * kAmbiguousBandRatio};
  } else {
    // disjoint log-spaced bands with margins, shuffled over speakers
    const double step = std::pow(kF0High / kF0Low, 1.0 / spec.M);
    std::vector<size_t> order(static_cast<size_t>(spec.M));
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[layout.next_below(i)]);
    }
    for (int m = 0; m < spec.M; ++m) {
      const double lo = kF0Low * std::pow(step, static_cast<double>(order[static_cast<size_t>(m)]));
      const double hi = lo * step;
      const double lo_m = order[static_cast<size_t>(m)] == 0 ? lo : lo * kBandMargin;
      const double hi_m = order[static_cast<size_t>(m)] + 1 == static_cast<size_t>(spec.M)
                              ? hi
                              : hi / kBandMargin;
      bands[static_cast<size_t>(m)] = {lo_m, hi_m};
    }
  }

  std::vector<std::vector<double>> sources;
  ex.cues.assign(static_cast<size_t>(spec.M) * spec.d_v * spec.F_V, 0.0);
  for (int m = 0; m < spec.M; ++m) {
    SourceDraw draw = synth_source(
        derive_seed(example_seed, kTagSource + static_cast<uint64_t>(m)), spec.T,
        spec.sample_rate, spec.F_V, spec.d_v, bands[static_cast<size_t>(m)].first,
        bands[static_cast<size_t>(m)].second);
    auto cue = make_cues(draw.envelope, draw.timbre,
                         derive_seed(example_seed, kTagCue + static_cast<uint64_t>(m)),
                         spec.cue_snr_db);
    std::copy(cue.begin(), cue.end(),
              ex.cues.begin() +
                  static_cast<std::ptrdiff_t>(static_cast<size_t>(m) * spec.d_v * spec.F_V));
    sources.push_back(std::move(draw.waveform));
  }

  Rng noise_rng(derive_seed(example_seed, kTagNoise));
  std::vector<double> noise_raw(static_cast<size_t>(spec.T));
  for (double& v : noise_raw) v = noise_rng.normal();

  MixResult mixed = mix_at_snr(sources, noise_raw, ex.snr_db);
  ex.sources = std::move(sources);
  ex.n = std::move(mixed.noise_scaled);
  ex.s = std::move(mixed.mixture);
  return out;
}

std::string example_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "ex%06d", index);
  return buf;
}

}  // namespace

void generate_corpus(const CorpusSpec& spec, const std::string& out_dir) {
  spec.check();
  fs::create_directories(fs::path(out_dir) / "wav");

  std::ofstream master((fs::path(out_dir) / "cues.bin").string(),
                       std::ios::binary | std::ios::trunc);
  if (!master) throw IoError("cannot open '" + out_dir + "/cues.bin' for writing");
  {
    std::string head;
    head.append(kMasterMagic, 8);
    put_u32(head, static_cast<uint32_t>(spec.total()));
    master.write(head.data(), static_cast<std::streamsize>(head.size()));
  }

  std::ofstream manifest((fs::path(out_dir) / "manifest.jsonl").string(),
                         std::ios::trunc);
  if (!manifest) throw IoError("cannot open '" + out_dir + "/manifest.jsonl' for writing");

  for (int g = 0; g < spec.total(); ++g) {
    const char* split = g < spec.n_train                 ? "train"
                        : g < spec.n_train + spec.n_val ? "val"
                                                         : "test";
    const uint64_t seed_e = derive_seed(spec.master_seed, static_cast<uint64_t>(g));
    ExampleDraw drawn = draw_example(spec, seed_e);
    const AvsExample& ex = drawn.ex;
    const std::string id = example_id(g);

    // one shared gain keeps every stored signal inside 16 bits and makes
    // the integer mixture exactly the sum of the integer components
    double peak = 0.0;
    for (const auto& s : ex.sources) {
      for (double v : s) peak = std::max(peak, std::abs(v));
    }
    for (double v : ex.n) peak = std::max(peak, std::abs(v));
    for (double v : ex.s) peak = std::max(peak, std::abs(v));
    const double gain = kWavHeadroom / peak;

    std::vector<std::vector<int16_t>> src_pcm(static_cast<size_t>(spec.M));
    for (int m = 0; m < spec.M; ++m) {
      std::vector<double> scaled(ex.sources[static_cast<size_t>(m)]);
      for (double& v : scaled) v *= gain;
      src_pcm[static_cast<size_t>(m)] = quantize16(scaled);
    }
    std::vector<double> noise_scaled(ex.n);
    for (double& v : noise_scaled) v *= gain;
    std::vector<int16_t> noise_pcm = quantize16(noise_scaled);
    std::vector<int16_t> mix_pcm(static_cast<size_t>(spec.T));
    for (int i = 0; i < spec.T; ++i) {
      int32_t acc = 0;
      for (int m = 0; m < spec.M; ++m) acc += src_pcm[static_cast<size_t>(m)][static_cast<size_t>(i)];
      acc += noise_pcm[static_cast<size_t>(i)];
      if (acc > 32767) acc = 32767;
      if (acc < -32768) acc = -32768;
      mix_pcm[static_cast<size_t>(i)] = static_cast<int16_t>(acc);
    }

    const std::string mix_rel = "wav/" + id + "_mix.wav";
    const std::string noise_rel = "wav/" + id + "_noise.wav";
    std::vector<std::string> src_rel;
    for (int m = 0; m < spec.M; ++m) {
      src_rel.push_back("wav/" + id + "_src" + std::to_string(m) + ".wav");
    }
    write_wav_pcm((fs::path(out_dir) / mix_rel).string(), mix_pcm, spec.sample_rate);
    write_wav_pcm((fs::path(out_dir) / noise_rel).string(), noise_pcm, spec.sample_rate);
    for (int m = 0; m < spec.M; ++m) {
      write_wav_pcm((fs::path(out_dir) / src_rel[static_cast<size_t>(m)]).string(),
                    src_pcm[static_cast<size_t>(m)], spec.sample_rate);
    }

    // master record: exact f64 values (mixture is recomposed on load)
    std::string rec;
    put_u32(rec, kArraysPerRecord);
    append_array(rec,
                 {static_cast<uint32_t>(spec.M * spec.d_v),
                  static_cast<uint32_t>(spec.F_V)},
                 ex.cues);
    {
      std::vector<double> flat;
      flat.reserve(static_cast<size_t>(spec.M) * spec.T);
      for (const auto& s : ex.sources) flat.insert(flat.end(), s.begin(), s.end());
      append_array(rec, {static_cast<uint32_t>(spec.M), static_cast<uint32_t>(spec.T)},
                   flat);
    }
    append_array(rec, {static_cast<uint32_t>(spec.T)}, ex.n);
    master.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    if (!master) throw IoError("short write to '" + out_dir + "/cues.bin'");

    json line = {
        {"id", id},
        {"seed", seed_e},
        {"snr_db", ex.snr_db},
        {"split", split},
        {"ambiguous", drawn.ambiguous},
        {"gain", gain},
        {"paths",
         {{"mix", mix_rel}, {"src", src_rel}, {"cues", "cues.bin"}, {"noise", noise_rel}}},
    };
    manifest << line.dump() << "\n";
  }
  if (!manifest) throw IoError("short write to '" + out_dir + "/manifest.jsonl'");

  spec.save_file((fs::path(out_dir) / "corpus.cfg").string());
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

Manifest load_manifest(const std::string& corpus_dir) {
  Manifest man;
  man.dir = corpus_dir;
  man.spec = CorpusSpec::load_file((fs::path(corpus_dir) / "corpus.cfg").string());

  const std::string man_path = (fs::path(corpus_dir) / "manifest.jsonl").string();
  std::ifstream f(man_path);
  if (!f) throw IoError("cannot open manifest '" + man_path + "'");
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": not valid JSON");
    }
    try {
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.seed = j.at("seed").get<uint64_t>();
      e.snr_db = j.at("snr_db").get<double>();
      e.split = j.at("split").get<std::string>();
      e.ambiguous = j.value("ambiguous", false);
      e.gain = j.value("gain", 1.0);
      const json& p = j.at("paths");
      e.mix_path = p.at("mix").get<std::string>();
      e.cue_path = p.at("cues").get<std::string>();
      e.noise_path = p.at("noise").get<std::string>();
      for (const auto& s : p.at("src")) e.src_paths.push_back(s.get<std::string>());
      man.entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw FormatError("manifest line " + std::to_string(line_no) + ": " + ex.what());
    }
  }
  if (man.entries.empty()) throw FormatError("manifest '" + man_path + "' is empty");

  // index the master records
  MasterReader mr((fs::path(corpus_dir) / "cues.bin").string());
  const uint32_t count = mr.open_and_count();
  if (count != man.entries.size()) {
    mr.fail("record count " + std::to_string(count) + " != manifest count " +
            std::to_string(man.entries.size()));
  }
  man.record_offsets.reserve(count);
  for (uint32_t r = 0; r < count; ++r) {
    man.record_offsets.push_back(static_cast<uint64_t>(mr.f.tellg()));
    const uint32_t arrays = mr.read_u32("array count");
    if (arrays != kArraysPerRecord) {
      mr.fail("record " + std::to_string(r) + " has " + std::to_string(arrays) +
              " arrays");
    }
    for (uint32_t a = 0; a < arrays; ++a) mr.skip_payload(mr.read_dims());
  }
  return man;
}

std::vector<size_t> split_indices(const Manifest& man, const std::string& split) {
  if (split != "train" && split != "val" && split != "test") {
    throw ConfigError("unknown split '" + split + "' (expected train, val, test)");
  }
  std::vector<size_t> out;
  for (size_t i = 0; i < man.entries.size(); ++i) {
    if (man.entries[i].split == split) out.push_back(i);
  }
  return out;
}

namespace {

void check_idx(const Manifest& man, size_t idx) {
  if (idx >= man.entries.size()) {
    throw ContractError("example index " + std::to_string(idx) +
                        " out of range (corpus has " +
                        std::to_string(man.entries.size()) + ")");
  }
}

AvsExample example_shell(const Manifest& man, size_t idx) {
  AvsExample ex;
  const ManifestEntry& e = man.entries[idx];
  ex.seed = e.seed;
  ex.snr_db = e.snr_db;
  ex.t = man.spec.T;
  ex.m = man.spec.M;
  ex.d_v = man.spec.d_v;
  ex.f_v = man.spec.F_V;
  return ex;
}

std::vector<double> read_master_cues(const Manifest& man, size_t idx,
                                     MasterReader& mr) {
  mr.f.seekg(static_cast<std::streamoff>(man.record_offsets[idx]));
  if (!mr.f) mr.fail("seek failed");
  const uint32_t arrays = mr.read_u32("array count");
  if (arrays != kArraysPerRecord) mr.fail("unexpected array count");
  const auto dims = mr.read_dims();
  if (dims.size() != 2 || dims[0] != static_cast<uint32_t>(man.spec.M * man.spec.d_v) ||
      dims[1] != static_cast<uint32_t>(man.spec.F_V)) {
    mr.fail("cue array of record " + std::to_string(idx) + " has wrong shape");
  }
  return mr.read_payload(dims);
}

}  // namespace

AvsExample load_example(const Manifest& man, size_t idx) {
  check_idx(man, idx);
  AvsExample ex = example_shell(man, idx);

  MasterReader mr((fs::path(man.dir) / "cues.bin").string());
  ex.cues = read_master_cues(man, idx, mr);

  const auto src_dims = mr.read_dims();
  if (src_dims.size() != 2 || src_dims[0] != static_cast<uint32_t>(man.spec.M) ||
      src_dims[1] != static_cast<uint32_t>(man.spec.T)) {
    mr.fail("source array of record " + std::to_string(idx) + " has wrong shape");
  }
  const auto flat = mr.read_payload(src_dims);
  ex.sources.resize(static_cast<size_t>(man.spec.M));
  for (int m = 0; m < man.spec.M; ++m) {
    ex.sources[static_cast<size_t>(m)].assign(
        flat.begin() + static_cast<std::ptrdiff_t>(static_cast<size_t>(m) * man.spec.T),
        flat.begin() +
            static_cast<std::ptrdiff_t>(static_cast<size_t>(m + 1) * man.spec.T));
  }

  const auto noise_dims = mr.read_dims();
  if (noise_dims.size() != 1 || noise_dims[0] != static_cast<uint32_t>(man.spec.T)) {
    mr.fail("noise array of record " + std::to_string(idx) + " has wrong shape");
  }
  ex.n = mr.read_payload(noise_dims);

  // recompose the mixture in the canonical order: speakers ascending, then noise
  ex.s = ex.sources[0];
  for (size_t m = 1; m < ex.sources.size(); ++m) {
    for (int i = 0; i < man.spec.T; ++i) ex.s[static_cast<size_t>(i)] += ex.sources[m][static_cast<size_t>(i)];
  }
  for (int i = 0; i < man.spec.T; ++i) ex.s[static_cast<size_t>(i)] += ex.n[static_cast<size_t>(i)];
  return ex;
}

AvsExample load_example_wav(const Manifest& man, size_t idx) {
  check_idx(man, idx);
  AvsExample ex = example_shell(man, idx);
  const ManifestEntry& e = man.entries[idx];

  auto read_checked = [&](const std::string& rel) {
    WavData w = read_wav((fs::path(man.dir) / rel).string());
    if (w.sample_rate != man.spec.sample_rate) {
      throw FormatError("WAV '" + rel + "': sample rate " +
                        std::to_string(w.sample_rate) + " != corpus rate " +
                        std::to_string(man.spec.sample_rate));
    }
    if (static_cast<int>(w.samples.size()) != man.spec.T) {
      throw FormatError("WAV '" + rel + "': " + std::to_string(w.samples.size()) +
                        " samples != corpus T " + std::to_string(man.spec.T));
    }
    return std::move(w.samples);
  };

  ex.s = read_checked(e.mix_path);
  ex.n = read_checked(e.noise_path);
  for (const auto& sp : e.src_paths) ex.sources.push_back(read_checked(sp));
  if (static_cast<int>(ex.sources.size()) != man.spec.M) {
    throw FormatError("manifest entry '" + e.id + "' lists " +
                      std::to_string(ex.sources.size()) + " sources, corpus M is " +
                      std::to_string(man.spec.M));
  }

  MasterReader mr((fs::path(man.dir) / "cues.bin").string());
  ex.cues = read_master_cues(man, idx, mr);
  return ex;
}

}  // namespace binet

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "binet/errors.hpp"
#include "binet/random.hpp"
#include "binet/tensor.hpp"

namespace binet {

// ---------------------------------------------------------------------------
// Synthetic source construction. A source is a few harmonics of a
// per-source fundamental, gated by a random piecewise-smooth on/off
// utterance envelope. The envelope (sampled at the cue frame rate) and
// a constant per-source timbre vector form the visual cue stream.
// ---------------------------------------------------------------------------

struct SourceDraw {
  std::vector<double> waveform;  // [T], RMS exactly 1
  std::vector<double> envelope;  // [F_V], values in [0, 1]
  std::vector<double> timbre;    // [d_v - 1], unit vector
  double f0 = 0.0;               // fundamental, Hz
};

SourceDraw synth_source(uint64_t seed, int t, int sample_rate, int f_v, int d_v,
                        double f0_lo = 90.0, double f0_hi = 300.0);

// Cue stream [d_v, F_V] row-major: channel 0 is the envelope, the rest
// broadcast the timbre vector over time. Additive Gaussian noise is
// rescaled to sit exactly cue_snr_db below the clean cue power; an
// infinite cue_snr_db disables it.
std::vector<double> make_cues(const std::vector<double>& envelope,
                              const std::vector<double>& timbre,
                              uint64_t cue_noise_seed, double cue_snr_db);

struct MixResult {
  std::vector<double> mixture;       // sum of sources plus scaled noise
  std::vector<double> noise_scaled;  // noise after SNR scaling
};

// Scales noise_raw so the summed-source-to-noise power ratio is exactly
// snr_db, then mixes. Summation order is fixed: speakers ascending,
// then noise.
MixResult mix_at_snr(const std::vector<std::vector<double>>& sources,
                     const std::vector<double>& noise_raw, double snr_db);

// ---------------------------------------------------------------------------
// Corpus
// ---------------------------------------------------------------------------

struct AvsExample {
  std::vector<double> s;                     // mixture [T]
  std::vector<std::vector<double>> sources;  // [M][T]
  std::vector<double> n;                     // [T]
  std::vector<double> cues;                  // [M*d_v, F_V] row-major
  double snr_db = 0.0;
  uint64_t seed = 0;
  int t = 0, m = 0, d_v = 0, f_v = 0;
};

Tensor mixture_tensor(const AvsExample& ex);  // [1, T]
Tensor sources_tensor(const AvsExample& ex);  // [M, T]
Tensor cues_tensor(const AvsExample& ex);     // [M*d_v, F_V]

struct CorpusSpec {
  int n_train = 2000;
  int n_val = 200;
  int n_test = 200;
  int T = 16000;
  int sample_rate = 8000;
  int M = 2;
  int d_v = 8;
  int F_V = 50;
  std::vector<double> snr_db_set = {-5.0, 0.0, 5.0, 10.0, 15.0, 20.0};
  uint64_t master_seed = 1234;
  // Share of examples whose speakers draw fundamentals from one narrow
  // shared band (separable only through the cues); the rest use
  // disjoint per-speaker bands, randomly assigned.
  double ambiguity = 0.0;
  double cue_snr_db = 30.0;  // +inf turns cue noise off

  std::vector<std::string> validate() const;
  void check() const;
  std::string serialize() const;
  static CorpusSpec parse(const std::string& text);
  static CorpusSpec load_file(const std::string& path);
  void save_file(const std::string& path) const;
  int total() const { return n_train + n_val + n_test; }

  bool operator==(const CorpusSpec&) const = default;
};

struct ManifestEntry {
  std::string id;
  uint64_t seed = 0;
  double snr_db = 0.0;
  std::string split;
  std::string mix_path;  // all paths relative to the corpus directory
  std::vector<std::string> src_paths;
  std::string cue_path;
  std::string noise_path;
  bool ambiguous = false;
  double gain = 1.0;  // common 16-bit quantization gain of this example
};

struct Manifest {
  std::string dir;
  CorpusSpec spec;
  std::vector<ManifestEntry> entries;
  std::vector<uint64_t> record_offsets;  // per-entry offsets into the master file
};

// Writes WAVs, the f64 master file, the manifest, and the corpus spec
// into out_dir. Byte-deterministic: the same spec always produces the
// same tree.
void generate_corpus(const CorpusSpec& spec, const std::string& out_dir);

Manifest load_manifest(const std::string& corpus_dir);

// Indices of a split ("train", "val", "test") in manifest order.
std::vector<size_t> split_indices(const Manifest& man, const std::string& split);

// Reads the f64 masters (exact values, no 16-bit quantization); the
// mixture is recomposed from sources and noise in the canonical order.
AvsExample load_example(const Manifest& man, size_t idx);

// Reads the quantized WAVs instead; checks sample-rate consistency.
AvsExample load_example_wav(const Manifest& man, size_t idx);

// ---------------------------------------------------------------------------
// WAV I/O: RIFF, PCM, mono, 16-bit little-endian.
// ---------------------------------------------------------------------------

struct WavData {
  std::vector<double> samples;  // in [-1, 1], dequantized as q / 32767
  int sample_rate = 0;
};

std::vector<int16_t> quantize16(const std::vector<double>& samples);

void write_wav(const std::string& path, const std::vector<double>& samples,
               int sample_rate);
void write_wav_pcm(const std::string& path, const std::vector<int16_t>& samples,
                   int sample_rate);
WavData read_wav(const std::string& path);
std::vector<int16_t> read_wav_pcm(const std::string& path, int* sample_rate = nullptr);

}  // namespace binet

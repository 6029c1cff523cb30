#pragma once

// Waveform ingestion and reconstruction: PCM16 WAV I/O, first-order
// pre/de-emphasis, 50%-overlap framing with zero-padded tails, overlap-add
// averaging, SNR-controlled mixing, and a synthetic paired corpus of harmonic
// tone complexes against filtered noise.
//
// Clips are held as double samples in [-1, 1]; conversion to the model's
// scalar type happens at the training/enhancement boundary.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdcgan/tensor.hpp"
#include "tdcgan/trainer.hpp"

namespace tdcgan {

struct AudioClip {
  std::vector<double> samples;
  int sample_rate = 16000;
  std::string id;

  std::int64_t length() const { return static_cast<std::int64_t>(samples.size()); }
};

inline double signal_energy(const std::vector<double>& x) {
  double e = 0;
  for (double v : x) e += v * v;
  return e;
}

// ---------------------------------------------------------------------------
// WAV I/O (RIFF/WAVE, PCM 16-bit)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint32_t rd_u32(const std::vector<unsigned char>& b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) |
         (static_cast<std::uint32_t>(b[at + 3]) << 24);
}

inline std::uint16_t rd_u16(const std::vector<unsigned char>& b, std::size_t at) {
  return static_cast<std::uint16_t>(static_cast<std::uint16_t>(b[at]) |
                                    (static_cast<std::uint16_t>(b[at + 1]) << 8));
}

inline void wr_u32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xFF));
  b.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
  b.push_back(static_cast<unsigned char>((v >> 16) & 0xFF));
  b.push_back(static_cast<unsigned char>((v >> 24) & 0xFF));
}

inline void wr_u16(std::vector<unsigned char>& b, std::uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xFF));
  b.push_back(static_cast<unsigned char>((v >> 8) & 0xFF));
}

inline void wr_tag(std::vector<unsigned char>& b, const char* tag) {
  b.insert(b.end(), tag, tag + 4);
}

}  // namespace detail

// Reads a PCM16 RIFF/WAVE file. Multi-channel files contribute their first
// channel only; when that happens a note is written to *warning.
inline AudioClip read_wav(const std::string& path, std::string* warning = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open WAV file '" + path + "'");
  std::vector<unsigned char> b((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
  auto need = [&](std::size_t at, std::size_t n, const char* what) {
    if (at + n > b.size())
      throw DataError("WAV file '" + path + "' is truncated (" + what + ")");
  };
  need(0, 12, "RIFF header");
  if (!std::equal(b.begin(), b.begin() + 4, "RIFF") ||
      !std::equal(b.begin() + 8, b.begin() + 12, "WAVE"))
    throw DataError("'" + path + "' is not a RIFF/WAVE file");

  bool have_fmt = false;
  std::uint16_t format_tag = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t data_at = 0, data_size = 0;
  std::size_t at = 12;
  while (at + 8 <= b.size()) {
    const std::string tag(b.begin() + static_cast<std::ptrdiff_t>(at),
                          b.begin() + static_cast<std::ptrdiff_t>(at) + 4);
    const std::uint32_t size = detail::rd_u32(b, at + 4);
    at += 8;
    if (tag == "fmt ") {
      need(at, std::max<std::uint32_t>(size, 16u), "fmt chunk");
      format_tag = detail::rd_u16(b, at);
      channels = detail::rd_u16(b, at + 2);
      rate = detail::rd_u32(b, at + 4);
      bits = detail::rd_u16(b, at + 14);
      have_fmt = true;
    } else if (tag == "data") {
      need(at, size, "data chunk");
      data_at = at;
      data_size = size;
    }
    at += size + (size & 1u);  // chunks are word-aligned
  }
  if (!have_fmt) throw DataError("WAV file '" + path + "' has no fmt chunk");
  if (data_at == 0 && data_size == 0)
    throw DataError("WAV file '" + path + "' has no data chunk");
  if (format_tag != 1)
    throw DataError("WAV file '" + path + "' uses unsupported codec (format tag " +
                    std::to_string(format_tag) + "); only integer PCM is supported");
  if (bits != 16)
    throw DataError("WAV file '" + path + "' has unsupported sample width " +
                    std::to_string(bits) + " bits; only 16-bit PCM is supported");
  if (channels < 1) throw DataError("WAV file '" + path + "' declares zero channels");
  if (rate == 0) throw DataError("WAV file '" + path + "' declares sample rate 0");
  if (channels > 1 && warning)
    *warning = "'" + path + "' has " + std::to_string(channels) +
               " channels; using the first";

  const std::size_t stride = 2u * channels;
  const std::size_t n = data_size / stride;
  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.id = std::filesystem::path(path).stem().string();
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto u = detail::rd_u16(b, data_at + i * stride);
    const auto s = static_cast<std::int16_t>(u);
    clip.samples[i] = static_cast<double>(s) / 32768.0;
  }
  return clip;
}

// Writes a mono PCM16 file; samples are scaled by 32768, rounded to nearest,
// and saturated to the 16-bit range.
inline void write_wav(const AudioClip& clip, const std::string& path) {
  for (double v : clip.samples)
    if (!std::isfinite(v))
      throw NumericalError("write_wav('" + path + "'): non-finite sample");
  if (clip.sample_rate <= 0)
    throw ConfigError("write_wav: sample_rate must be positive");
  std::vector<unsigned char> b;
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  const std::uint32_t data_size = 2u * n;
  b.reserve(44 + data_size);
  detail::wr_tag(b, "RIFF");
  detail::wr_u32(b, 36 + data_size);
  detail::wr_tag(b, "WAVE");
  detail::wr_tag(b, "fmt ");
  detail::wr_u32(b, 16);
  detail::wr_u16(b, 1);  // integer PCM
  detail::wr_u16(b, 1);  // mono
  detail::wr_u32(b, static_cast<std::uint32_t>(clip.sample_rate));
  detail::wr_u32(b, static_cast<std::uint32_t>(clip.sample_rate) * 2u);
  detail::wr_u16(b, 2);   // block align
  detail::wr_u16(b, 16);  // bits per sample
  detail::wr_tag(b, "data");
  detail::wr_u32(b, data_size);
  for (double v : clip.samples) {
    auto q = static_cast<long>(std::lrint(v * 32768.0));
    q = std::clamp<long>(q, -32768, 32767);
    detail::wr_u16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
  if (!out) throw DataError("short write to '" + path + "'");
}

// ---------------------------------------------------------------------------
// Pre/de-emphasis
// ---------------------------------------------------------------------------

inline std::vector<double> pre_emphasis(const std::vector<double>& x, double c = 0.95) {
  if (!(c >= 0.0 && c < 1.0))
    throw ConfigError("pre_emphasis: coefficient must lie in [0, 1)");
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = (i == 0) ? x[0] : x[i] - c * x[i - 1];
  return y;
}

inline std::vector<double> de_emphasis(const std::vector<double>& y, double c = 0.95) {
  if (!(c >= 0.0 && c < 1.0))
    throw ConfigError("de_emphasis: coefficient must lie in [0, 1)");
  std::vector<double> x(y.size());
  for (std::size_t i = 0; i < y.size(); ++i)
    x[i] = (i == 0) ? y[0] : y[i] + c * x[i - 1];
  return x;
}

// ---------------------------------------------------------------------------
// Framing and overlap-add averaging
// ---------------------------------------------------------------------------

struct FrameSet {
  std::vector<std::vector<double>> frames;
  std::int64_t frame_len = 16384;
  std::int64_t shift = 8192;
  std::int64_t original_length = 0;
  std::int64_t pad_amount = 0;
  int sample_rate = 16000;
  std::string id;
};

// Splits a clip into frame_len windows every `shift` samples, zero-padding
// the tail so the last window is full. A clip shorter than one frame yields
// a single padded frame.
inline FrameSet frame_signal(const AudioClip& clip, std::int64_t frame_len = 16384,
                             std::int64_t shift = 8192) {
  if (frame_len < 1) throw ConfigError("frame_signal: frame_len must be >= 1");
  if (shift < 1 || shift > frame_len)
    throw ConfigError("frame_signal: shift must lie in [1, frame_len]");
  const std::int64_t len = clip.length();
  if (len == 0) throw DataError("frame_signal: clip '" + clip.id + "' is empty");

  const std::int64_t count =
      len <= frame_len ? 1 : (len - frame_len + shift - 1) / shift + 1;
  const std::int64_t total = (count - 1) * shift + frame_len;

  FrameSet fs;
  fs.frame_len = frame_len;
  fs.shift = shift;
  fs.original_length = len;
  fs.pad_amount = total - len;
  fs.sample_rate = clip.sample_rate;
  fs.id = clip.id;
  fs.frames.assign(static_cast<std::size_t>(count),
                   std::vector<double>(static_cast<std::size_t>(frame_len), 0.0));
  for (std::int64_t f = 0; f < count; ++f) {
    const std::int64_t start = f * shift;
    const std::int64_t take = std::min<std::int64_t>(frame_len, len - start);
    for (std::int64_t i = 0; i < take; ++i)
      fs.frames[static_cast<std::size_t>(f)][static_cast<std::size_t>(i)] =
          clip.samples[static_cast<std::size_t>(start + i)];
  }
  return fs;
}

// Reconstructs the clip: every sample is the arithmetic mean of all frame
// samples covering it; the zero-padded tail is dropped.
inline AudioClip overlap_add_average(const FrameSet& fs) {
  if (fs.frames.empty()) throw DataError("overlap_add_average: no frames");
  if (fs.frame_len < 1 || fs.shift < 1 || fs.shift > fs.frame_len)
    throw ConfigError("overlap_add_average: invalid frame geometry");
  for (const auto& f : fs.frames)
    if (static_cast<std::int64_t>(f.size()) != fs.frame_len)
      throw DataError("overlap_add_average: inconsistent frame lengths");
  const auto count = static_cast<std::int64_t>(fs.frames.size());
  const std::int64_t total = (count - 1) * fs.shift + fs.frame_len;
  if (fs.original_length < 1 || fs.original_length > total)
    throw DataError("overlap_add_average: original_length does not fit the frame grid");
  std::vector<double> acc(static_cast<std::size_t>(total), 0.0);
  std::vector<std::int32_t> cover(static_cast<std::size_t>(total), 0);
  for (std::int64_t f = 0; f < count; ++f) {
    const std::int64_t start = f * fs.shift;
    const auto& fr = fs.frames[static_cast<std::size_t>(f)];
    for (std::int64_t i = 0; i < fs.frame_len; ++i) {
      acc[static_cast<std::size_t>(start + i)] += fr[static_cast<std::size_t>(i)];
      ++cover[static_cast<std::size_t>(start + i)];
    }
  }
  AudioClip out;
  out.sample_rate = fs.sample_rate;
  out.id = fs.id;
  out.samples.resize(static_cast<std::size_t>(fs.original_length));
  for (std::int64_t i = 0; i < fs.original_length; ++i)
    out.samples[static_cast<std::size_t>(i)] =
        acc[static_cast<std::size_t>(i)] / cover[static_cast<std::size_t>(i)];
  return out;
}

// ---------------------------------------------------------------------------
// SNR-controlled mixing
// ---------------------------------------------------------------------------

struct MixResult {
  AudioClip noisy;
  double gain = 0;
};

// noisy = speech + g * noise, with g chosen so that
// 10*log10(||speech||^2 / ||g*noise||^2) == snr_db. Noise shorter than the
// speech is tiled.
inline MixResult mix_at_snr(const AudioClip& speech, const AudioClip& noise,
                            double snr_db) {
  if (speech.samples.empty()) throw DataError("mix_at_snr: empty speech clip");
  if (noise.samples.empty()) throw DataError("mix_at_snr: empty noise clip");
  const auto len = static_cast<std::size_t>(speech.length());
  std::vector<double> seg(len);
  for (std::size_t i = 0; i < len; ++i)
    seg[i] = noise.samples[i % noise.samples.size()];
  const double es = signal_energy(speech.samples);
  const double en = signal_energy(seg);
  if (es <= 0) throw DataError("mix_at_snr: speech clip '" + speech.id + "' has zero energy");
  if (en <= 0) throw DataError("mix_at_snr: noise clip '" + noise.id + "' has zero energy");
  const double g = std::sqrt(es / (en * std::pow(10.0, snr_db / 10.0)));
  MixResult out;
  out.gain = g;
  out.noisy.sample_rate = speech.sample_rate;
  out.noisy.id = speech.id;
  out.noisy.samples.resize(len);
  for (std::size_t i = 0; i < len; ++i)
    out.noisy.samples[i] = speech.samples[i] + g * seg[i];
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic paired corpus
// ---------------------------------------------------------------------------

struct SynthConfig {
  std::int64_t n_clips = 8;
  std::uint64_t seed = 1;
  std::vector<double> snr_levels{0, 5, 10, 15};
  std::int64_t clip_len = 24000;
  int sample_rate = 16000;

  void validate() const {
    std::string bad;
    auto flag = [&](const std::string& m) { bad += (bad.empty() ? "" : "; ") + m; };
    if (n_clips < 1) flag("n_clips must be >= 1");
    if (clip_len < 1) flag("clip_len must be >= 1");
    if (snr_levels.empty()) flag("snr_levels must be non-empty");
    if (sample_rate < 1) flag("sample_rate must be >= 1");
    for (double s : snr_levels)
      if (!std::isfinite(s)) flag("snr_levels must be finite");
    if (!bad.empty()) throw ConfigError("SynthConfig: " + bad);
  }
};

struct CorpusItem {
  AudioClip clean, noisy;
  double snr_db = 0;
  std::string noise_kind;
  std::uint64_t seed = 0;
};

struct Corpus {
  std::vector<CorpusItem> items;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t i) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (i + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Harmonic tone complex with a slow amplitude envelope and edge fades;
// deterministic speech surrogate with a crisp harmonic structure.
inline std::vector<double> synth_voice(Rng& rng, std::int64_t len, int sample_rate) {
  const double f0 = rng.uniform(90.0, 250.0);
  const double f_env = rng.uniform(1.5, 4.0);
  const double env_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  constexpr int kHarmonics = 8;
  double phases[kHarmonics];
  for (auto& p : phases) p = rng.uniform(0.0, 2.0 * std::numbers::pi);

  std::vector<double> x(static_cast<std::size_t>(len));
  double peak = 0;
  for (std::int64_t n = 0; n < len; ++n) {
    const double t = static_cast<double>(n) / sample_rate;
    double s = 0;
    for (int k = 1; k <= kHarmonics; ++k)
      s += std::sin(2.0 * std::numbers::pi * f0 * k * t + phases[k - 1]) / k;
    const double env = 0.55 + 0.45 * std::sin(2.0 * std::numbers::pi * f_env * t + env_phase);
    x[static_cast<std::size_t>(n)] = env * s;
    peak = std::max(peak, std::abs(x[static_cast<std::size_t>(n)]));
  }
  const std::int64_t fade = std::min<std::int64_t>(160, len / 4);
  for (std::int64_t n = 0; n < fade; ++n) {
    const double w = static_cast<double>(n + 1) / static_cast<double>(fade + 1);
    x[static_cast<std::size_t>(n)] *= w;
    x[static_cast<std::size_t>(len - 1 - n)] *= w;
  }
  if (peak > 0)
    for (auto& v : x) v *= 0.3 / peak;
  return x;
}

inline std::vector<double> synth_noise(Rng& rng, std::int64_t len,
                                       const std::string& kind) {
  std::vector<double> w(static_cast<std::size_t>(len));
  for (auto& v : w) v = rng.normal();
  std::vector<double> y(static_cast<std::size_t>(len), 0.0);
  if (kind == "white") {
    y = std::move(w);
  } else if (kind == "lowpass") {
    double state = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      state = 0.9 * state + 0.1 * w[i];
      y[i] = state;
    }
  } else if (kind == "bandpass") {
    // difference of two one-pole lowpasses
    double slow = 0, fast = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      fast = 0.7 * fast + 0.3 * w[i];
      slow = 0.95 * slow + 0.05 * w[i];
      y[i] = fast - slow;
    }
  } else {
    throw ConfigError("synth_noise: unknown noise kind '" + kind + "'");
  }
  double rms = std::sqrt(signal_energy(y) / static_cast<double>(len));
  if (rms > 0)
    for (auto& v : y) v *= 0.1 / rms;
  return y;
}

}  // namespace detail

inline const std::vector<std::string>& noise_kinds() {
  static const std::vector<std::string> kinds{"white", "lowpass", "bandpass"};
  return kinds;
}

inline Corpus synth_corpus(const SynthConfig& cfg) {
  cfg.validate();
  Corpus corpus;
  corpus.items.reserve(static_cast<std::size_t>(cfg.n_clips));
  for (std::int64_t i = 0; i < cfg.n_clips; ++i) {
    CorpusItem item;
    item.seed = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(i));
    Rng rng(item.seed);
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%04lld", static_cast<long long>(i));
    item.noise_kind = noise_kinds()[static_cast<std::size_t>(i) % noise_kinds().size()];
    item.snr_db = cfg.snr_levels[static_cast<std::size_t>(i) % cfg.snr_levels.size()];

    item.clean.sample_rate = cfg.sample_rate;
    item.clean.id = name;
    item.clean.samples = detail::synth_voice(rng, cfg.clip_len, cfg.sample_rate);

    AudioClip noise;
    noise.sample_rate = cfg.sample_rate;
    noise.id = std::string(name) + "_noise";
    noise.samples = detail::synth_noise(rng, cfg.clip_len, item.noise_kind);

    item.noisy = mix_at_snr(item.clean, noise, item.snr_db).noisy;
    corpus.items.push_back(std::move(item));
  }
  return corpus;
}

// Directory layout: clean/<id>.wav, noisy/<id>.wav, manifest.json mapping
// id -> {snr_db, noise_kind, seed}.
inline void save_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "clean");
  fs::create_directories(fs::path(dir) / "noisy");
  nlohmann::json clips = nlohmann::json::object();
  int sample_rate = 16000;
  for (const auto& item : corpus.items) {
    write_wav(item.clean, (fs::path(dir) / "clean" / (item.clean.id + ".wav")).string());
    write_wav(item.noisy, (fs::path(dir) / "noisy" / (item.clean.id + ".wav")).string());
    clips[item.clean.id] = {{"snr_db", item.snr_db},
                            {"noise_kind", item.noise_kind},
                            {"seed", item.seed}};
    sample_rate = item.clean.sample_rate;
  }
  nlohmann::json manifest = {{"sample_rate", sample_rate}, {"clips", clips}};
  const std::string path = (fs::path(dir) / "manifest.json").string();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw DataError("short write to '" + path + "'");
}

inline Corpus load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string mpath = (fs::path(dir) / "manifest.json").string();
  std::ifstream in(mpath);
  if (!in) throw DataError("cannot open corpus manifest '" + mpath + "'");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corpus manifest '" + mpath + "' is not valid JSON: " + e.what());
  }
  if (!manifest.contains("clips") || !manifest["clips"].is_object())
    throw DataError("corpus manifest '" + mpath + "' has no clips table");
  Corpus corpus;
  for (const auto& [id, meta] : manifest["clips"].items()) {
    CorpusItem item;
    try {
      item.snr_db = meta.at("snr_db").get<double>();
      item.noise_kind = meta.at("noise_kind").get<std::string>();
      item.seed = meta.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corpus manifest entry '" + id + "' is malformed: " + e.what());
    }
    item.clean = read_wav((fs::path(dir) / "clean" / (id + ".wav")).string());
    item.noisy = read_wav((fs::path(dir) / "noisy" / (id + ".wav")).string());
    if (item.clean.length() != item.noisy.length())
      throw DataError("corpus clip '" + id + "': clean length " +
                      std::to_string(item.clean.length()) + " != noisy length " +
                      std::to_string(item.noisy.length()));
    corpus.items.push_back(std::move(item));
  }
  if (corpus.items.empty()) throw DataError("corpus at '" + dir + "' lists no clips");
  std::sort(corpus.items.begin(), corpus.items.end(),
            [](const CorpusItem& a, const CorpusItem& b) { return a.clean.id < b.clean.id; });
  return corpus;
}

// Pre-emphasizes both sides of every pair and cuts aligned training frames.
template <typename T>
FramePairs<T> make_training_frames(const Corpus& corpus, std::int64_t frame_len,
                                   std::int64_t shift, double pre_c = 0.95) {
  FramePairs<T> out;
  out.frame_len = frame_len;
  for (const auto& item : corpus.items) {
    if (item.clean.length() != item.noisy.length())
      throw DataError("corpus clip '" + item.clean.id + "': clean/noisy length mismatch");
    AudioClip c{pre_emphasis(item.clean.samples, pre_c), item.clean.sample_rate,
                item.clean.id};
    AudioClip n{pre_emphasis(item.noisy.samples, pre_c), item.noisy.sample_rate,
                item.noisy.id};
    auto cf = frame_signal(c, frame_len, shift);
    auto nf = frame_signal(n, frame_len, shift);
    for (std::size_t f = 0; f < cf.frames.size(); ++f) {
      std::vector<T> cv(cf.frames[f].begin(), cf.frames[f].end());
      std::vector<T> nv(nf.frames[f].begin(), nf.frames[f].end());
      out.clean.push_back(std::move(cv));
      out.noisy.push_back(std::move(nv));
    }
  }
  return out;
}

}  // namespace tdcgan

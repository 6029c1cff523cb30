#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tdcgan/audio.hpp"

namespace fs = std::filesystem;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::path("scratch") / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

tdcgan::AudioClip random_clip(std::int64_t n, std::uint64_t seed, double amp = 0.9) {
  tdcgan::Rng rng(seed);
  tdcgan::AudioClip c;
  c.id = "rand";
  c.samples.resize(static_cast<std::size_t>(n));
  for (auto& v : c.samples) v = rng.uniform(-amp, amp);
  return c;
}

double achieved_snr_db(const tdcgan::AudioClip& clean, const tdcgan::AudioClip& noisy) {
  double es = 0, er = 0;
  for (std::size_t i = 0; i < clean.samples.size(); ++i) {
    es += clean.samples[i] * clean.samples[i];
    const double r = noisy.samples[i] - clean.samples[i];
    er += r * r;
  }
  return 10.0 * std::log10(es / er);
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(b.data()),
            static_cast<std::streamsize>(b.size()));
}

// Hand-built PCM16 WAV with arbitrary channel count / format tag / bit depth.
std::vector<unsigned char> craft_wav(std::uint16_t format_tag, std::uint16_t channels,
                                     std::uint16_t bits,
                                     const std::vector<std::int16_t>& interleaved) {
  std::vector<unsigned char> b;
  const auto data_size = static_cast<std::uint32_t>(2 * interleaved.size());
  tdcgan::detail::wr_tag(b, "RIFF");
  tdcgan::detail::wr_u32(b, 36 + data_size);
  tdcgan::detail::wr_tag(b, "WAVE");
  tdcgan::detail::wr_tag(b, "fmt ");
  tdcgan::detail::wr_u32(b, 16);
  tdcgan::detail::wr_u16(b, format_tag);
  tdcgan::detail::wr_u16(b, channels);
  tdcgan::detail::wr_u32(b, 16000);
  tdcgan::detail::wr_u32(b, 16000u * channels * 2u);
  tdcgan::detail::wr_u16(b, static_cast<std::uint16_t>(channels * 2));
  tdcgan::detail::wr_u16(b, bits);
  tdcgan::detail::wr_tag(b, "data");
  tdcgan::detail::wr_u32(b, data_size);
  for (std::int16_t s : interleaved)
    tdcgan::detail::wr_u16(b, static_cast<std::uint16_t>(s));
  return b;
}

}  // namespace

TEST_CASE("wav roundtrip stays within one quantization step") {
  auto dir = scratch_dir("wav_rt");
  auto clip = random_clip(1000, 7);
  clip.id = "tone";
  const std::string path = (dir / "tone.wav").string();
  tdcgan::write_wav(clip, path);
  auto back = tdcgan::read_wav(path);
  CHECK(back.id == "tone");
  CHECK(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == clip.samples.size());
  for (std::size_t i = 0; i < back.samples.size(); ++i)
    CHECK(std::abs(back.samples[i] - clip.samples[i]) <= 1.0 / 32768.0);
}

TEST_CASE("pcm scaling endpoints and saturation") {
  auto dir = scratch_dir("wav_scale");
  tdcgan::AudioClip clip;
  clip.id = "edges";
  clip.samples = {32767.0 / 32768.0, -1.0, 1.5, -2.0, 0.0};
  const std::string path = (dir / "edges.wav").string();
  tdcgan::write_wav(clip, path);
  auto back = tdcgan::read_wav(path);
  REQUIRE(back.samples.size() == 5);
  CHECK(back.samples[0] == Approx(0.99997).margin(5e-6));  // sample value 32767
  CHECK(back.samples[0] == 32767.0 / 32768.0);
  CHECK(back.samples[1] == -1.0);
  CHECK(back.samples[2] == 32767.0 / 32768.0);  // saturated high
  CHECK(back.samples[3] == -1.0);               // saturated low
  CHECK(back.samples[4] == 0.0);

  tdcgan::AudioClip bad = clip;
  bad.samples[1] = std::nan("");
  CHECK_THROWS_AS(tdcgan::write_wav(bad, (dir / "nan.wav").string()),
                  tdcgan::NumericalError);
}

TEST_CASE("stereo files contribute the first channel with a warning") {
  auto dir = scratch_dir("wav_stereo");
  const std::string path = (dir / "st.wav").string();
  // interleaved L0 R0 L1 R1
  write_bytes(path, craft_wav(1, 2, 16, {100, 555, -100, 77}));
  std::string warning;
  auto clip = tdcgan::read_wav(path, &warning);
  REQUIRE(clip.samples.size() == 2);
  CHECK(clip.samples[0] == 100.0 / 32768.0);
  CHECK(clip.samples[1] == -100.0 / 32768.0);
  CHECK_THAT(warning, ContainsSubstring("2 channels"));

  std::string no_warning;
  write_bytes((dir / "mono.wav").string(), craft_wav(1, 1, 16, {5, -5}));
  tdcgan::read_wav((dir / "mono.wav").string(), &no_warning);
  CHECK(no_warning.empty());
}

TEST_CASE("malformed wav files are rejected with named errors") {
  auto dir = scratch_dir("wav_bad");
  SECTION("missing file") {
    CHECK_THROWS_WITH(tdcgan::read_wav((dir / "nope.wav").string()),
                      ContainsSubstring("cannot open"));
  }
  SECTION("not a wave container") {
    const std::string path = (dir / "text.wav").string();
    std::ofstream(path) << "this is not audio at all";
    CHECK_THROWS_WITH(tdcgan::read_wav(path), ContainsSubstring("RIFF"));
  }
  SECTION("truncated data payload") {
    const std::string path = (dir / "trunc.wav").string();
    auto clip = random_clip(500, 3);
    tdcgan::write_wav(clip, path);
    fs::resize_file(path, 44 + 100);  // header promises 1000 payload bytes
    CHECK_THROWS_WITH(tdcgan::read_wav(path), ContainsSubstring("truncated"));
  }
  SECTION("unsupported codec") {
    const std::string path = (dir / "float.wav").string();
    write_bytes(path, craft_wav(3, 1, 16, {1, 2}));
    CHECK_THROWS_WITH(tdcgan::read_wav(path), ContainsSubstring("codec"));
  }
  SECTION("unsupported sample width") {
    const std::string path = (dir / "w8.wav").string();
    write_bytes(path, craft_wav(1, 1, 8, {1, 2}));
    CHECK_THROWS_WITH(tdcgan::read_wav(path), ContainsSubstring("width"));
  }
}

TEST_CASE("pre-emphasis oracles and exact inversion") {
  using tdcgan::de_emphasis;
  using tdcgan::pre_emphasis;

  auto y = pre_emphasis({1, 1, 1});
  REQUIRE(y.size() == 3);
  CHECK(y[0] == Approx(1.0));
  CHECK(y[1] == Approx(0.05));
  CHECK(y[2] == Approx(0.05));

  auto imp = pre_emphasis({1, 0, 0});
  CHECK(imp[0] == Approx(1.0));
  CHECK(imp[1] == Approx(-0.95));
  CHECK(imp[2] == Approx(0.0).margin(1e-15));

  auto x = random_clip(2000, 11).samples;
  auto rt = de_emphasis(pre_emphasis(x));
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(std::abs(rt[i] - x[i]) <= 1e-9);

  CHECK_THROWS_AS(pre_emphasis({1.0}, 1.0), tdcgan::ConfigError);
  CHECK_THROWS_AS(de_emphasis({1.0}, -0.1), tdcgan::ConfigError);
}

TEST_CASE("framing grid matches the ceil formula") {
  auto count_for = [](std::int64_t len) {
    return static_cast<std::int64_t>(tdcgan::frame_signal(random_clip(len, 1)).frames.size());
  };
  CHECK(count_for(24576) == 2);
  CHECK(count_for(16384) == 1);
  CHECK(count_for(100) == 1);

  auto fs20000 = tdcgan::frame_signal(random_clip(20000, 2));
  CHECK(fs20000.frames.size() == 2);
  CHECK(fs20000.pad_amount == 4576);
  CHECK(fs20000.original_length == 20000);

  auto fs50001 = tdcgan::frame_signal(random_clip(50001, 2));
  CHECK(fs50001.frames.size() == 6);
  CHECK(fs50001.pad_amount == 7343);

  // frame content sits on the shift grid; the padded tail is zero
  auto clip = random_clip(20000, 4);
  auto fs = tdcgan::frame_signal(clip);
  CHECK(fs.frames[1][0] == clip.samples[8192]);
  CHECK(fs.frames[1][20000 - 8192] == 0.0);

  tdcgan::AudioClip empty;
  empty.id = "void";
  CHECK_THROWS_AS(tdcgan::frame_signal(empty), tdcgan::DataError);
  CHECK_THROWS_AS(tdcgan::frame_signal(clip, 16384, 0), tdcgan::ConfigError);
  CHECK_THROWS_AS(tdcgan::frame_signal(clip, 16384, 16385), tdcgan::ConfigError);
}

TEST_CASE("overlap-add averaging reconstructs exactly") {
  SECTION("constant frames average to the constant") {
    tdcgan::FrameSet fs;
    fs.frame_len = 8;
    fs.shift = 4;
    fs.original_length = 20;
    fs.frames.assign(4, std::vector<double>(8, 1.0));
    auto out = tdcgan::overlap_add_average(fs);
    REQUIRE(out.samples.size() == 20);
    for (double v : out.samples) CHECK(v == 1.0);
  }
  SECTION("half-overlapping frames average pairwise") {
    tdcgan::FrameSet fs;
    fs.frame_len = 4;
    fs.shift = 2;
    fs.original_length = 6;
    fs.frames = {std::vector<double>(4, 3.0), std::vector<double>(4, 5.0)};
    auto out = tdcgan::overlap_add_average(fs);
    REQUIRE(out.samples.size() == 6);
    CHECK(out.samples[0] == 3.0);
    CHECK(out.samples[1] == 3.0);
    CHECK(out.samples[2] == 4.0);  // (3+5)/2
    CHECK(out.samples[3] == 4.0);
    CHECK(out.samples[4] == 5.0);
    CHECK(out.samples[5] == 5.0);
  }
  SECTION("frame then reconstruct is the identity for awkward lengths") {
    for (std::int64_t len : {std::int64_t(16384), std::int64_t(20000), std::int64_t(50001)}) {
      auto clip = random_clip(len, static_cast<std::uint64_t>(len));
      auto back = tdcgan::overlap_add_average(tdcgan::frame_signal(clip));
      REQUIRE(back.samples.size() == clip.samples.size());
      for (std::size_t i = 0; i < clip.samples.size(); ++i)
        CHECK(back.samples[i] == clip.samples[i]);
    }
    for (std::int64_t len : {std::int64_t(1), std::int64_t(5), std::int64_t(7)}) {
      auto clip = random_clip(len, 77);
      auto back = tdcgan::overlap_add_average(tdcgan::frame_signal(clip, 4, 2));
      REQUIRE(back.samples.size() == clip.samples.size());
      for (std::size_t i = 0; i < clip.samples.size(); ++i)
        CHECK(back.samples[i] == clip.samples[i]);
    }
  }
  SECTION("inconsistent frames are rejected") {
    tdcgan::FrameSet fs;
    fs.frame_len = 4;
    fs.shift = 2;
    fs.original_length = 6;
    fs.frames = {std::vector<double>(4, 1.0), std::vector<double>(3, 1.0)};
    CHECK_THROWS_AS(tdcgan::overlap_add_average(fs), tdcgan::DataError);
  }
}

TEST_CASE("snr mixing hits the requested level") {
  auto speech = random_clip(5000, 21, 0.3);
  speech.id = "sp";
  auto noise = random_clip(3000, 22, 0.2);  // shorter: exercises tiling
  noise.id = "nz";

  double prev_gain = 1e18;
  for (double snr : {-5.0, 0.0, 5.0, 10.0, 15.0}) {
    auto mix = tdcgan::mix_at_snr(speech, noise, snr);
    CHECK(achieved_snr_db(speech, mix.noisy) == Approx(snr).margin(1e-9));
    CHECK(mix.gain < prev_gain);  // higher SNR -> quieter noise
    prev_gain = mix.gain;
  }

  auto mix0 = tdcgan::mix_at_snr(speech, noise, 0.0);
  double es = tdcgan::signal_energy(speech.samples);
  double eres = 0;
  for (std::size_t i = 0; i < speech.samples.size(); ++i) {
    const double r = mix0.noisy.samples[i] - speech.samples[i];
    eres += r * r;
  }
  CHECK(eres == Approx(es).epsilon(1e-12));  // 0 dB: equal energies

  tdcgan::AudioClip silent;
  silent.id = "zeros";
  silent.samples.assign(100, 0.0);
  CHECK_THROWS_WITH(tdcgan::mix_at_snr(silent, noise, 0.0),
                    ContainsSubstring("zero energy"));
  CHECK_THROWS_WITH(tdcgan::mix_at_snr(speech, silent, 0.0),
                    ContainsSubstring("zero energy"));
}

TEST_CASE("synthetic corpus is reproducible and meets its recorded SNRs") {
  tdcgan::SynthConfig cfg;
  cfg.n_clips = 6;
  cfg.seed = 42;
  cfg.snr_levels = {0.0, 15.0};
  cfg.clip_len = 18000;

  auto a = tdcgan::synth_corpus(cfg);
  auto b = tdcgan::synth_corpus(cfg);
  REQUIRE(a.items.size() == 6);
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    const auto& ia = a.items[i];
    CHECK(ia.clean.samples == b.items[i].clean.samples);  // bitwise repeatable
    CHECK(ia.noisy.samples == b.items[i].noisy.samples);
    CHECK(ia.clean.length() == 18000);
    CHECK(ia.noisy.length() == 18000);
    CHECK(achieved_snr_db(ia.clean, ia.noisy) == Approx(ia.snr_db).margin(1e-6));
    for (double v : ia.noisy.samples) REQUIRE(std::abs(v) < 1.0);  // WAV-safe
  }
  CHECK(a.items[0].clean.id == "clip_0000");
  CHECK(a.items[5].clean.id == "clip_0005");
  CHECK(a.items[0].noise_kind == "white");
  CHECK(a.items[1].noise_kind == "lowpass");
  CHECK(a.items[2].noise_kind == "bandpass");
  CHECK(a.items[3].noise_kind == "white");
  CHECK(a.items[0].snr_db == 0.0);
  CHECK(a.items[1].snr_db == 15.0);
  CHECK(a.items[2].snr_db == 0.0);

  auto other = cfg;
  other.seed = 43;
  auto c = tdcgan::synth_corpus(other);
  CHECK(c.items[0].clean.samples != a.items[0].clean.samples);

  auto bad = cfg;
  bad.n_clips = 0;
  CHECK_THROWS_AS(tdcgan::synth_corpus(bad), tdcgan::ConfigError);
}

TEST_CASE("corpus directories round-trip and are byte-stable") {
  tdcgan::SynthConfig cfg;
  cfg.n_clips = 3;
  cfg.seed = 9;
  cfg.clip_len = 17000;
  auto corpus = tdcgan::synth_corpus(cfg);

  auto d1 = scratch_dir("corpus_a");
  auto d2 = scratch_dir("corpus_b");
  tdcgan::save_corpus(corpus, d1.string());
  tdcgan::save_corpus(corpus, d2.string());

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  };
  CHECK(slurp(d1 / "manifest.json") == slurp(d2 / "manifest.json"));
  CHECK(slurp(d1 / "clean" / "clip_0001.wav") == slurp(d2 / "clean" / "clip_0001.wav"));
  CHECK(slurp(d1 / "noisy" / "clip_0002.wav") == slurp(d2 / "noisy" / "clip_0002.wav"));

  auto loaded = tdcgan::load_corpus(d1.string());
  REQUIRE(loaded.items.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& orig = corpus.items[i];
    const auto& got = loaded.items[i];
    CHECK(got.clean.id == orig.clean.id);
    CHECK(got.snr_db == orig.snr_db);
    CHECK(got.noise_kind == orig.noise_kind);
    CHECK(got.seed == orig.seed);
    REQUIRE(got.clean.samples.size() == orig.clean.samples.size());
    for (std::size_t j = 0; j < got.clean.samples.size(); ++j) {
      CHECK(std::abs(got.clean.samples[j] - orig.clean.samples[j]) <= 1.0 / 32768.0);
      CHECK(std::abs(got.noisy.samples[j] - orig.noisy.samples[j]) <= 1.0 / 32768.0);
    }
    // 16-bit quantization only nudges the realized SNR
    CHECK(achieved_snr_db(got.clean, got.noisy) == Approx(got.snr_db).margin(0.1));
  }

  SECTION("missing and malformed manifests are rejected") {
    auto d3 = scratch_dir("corpus_c");
    CHECK_THROWS_WITH(tdcgan::load_corpus(d3.string()), ContainsSubstring("manifest"));
    std::ofstream((d3 / "manifest.json").string()) << "{ not json";
    CHECK_THROWS_WITH(tdcgan::load_corpus(d3.string()), ContainsSubstring("JSON"));
  }
}

TEST_CASE("training frames are pre-emphasized and grid-aligned") {
  tdcgan::SynthConfig cfg;
  cfg.n_clips = 2;
  cfg.seed = 5;
  cfg.clip_len = 20000;
  auto corpus = tdcgan::synth_corpus(cfg);

  auto pairs = tdcgan::make_training_frames<float>(corpus, 16384, 8192);
  pairs.validate(16384);
  CHECK(pairs.size() == 4);  // 2 frames per clip

  auto pre_clean = tdcgan::pre_emphasis(corpus.items[0].clean.samples);
  auto pre_noisy = tdcgan::pre_emphasis(corpus.items[0].noisy.samples);
  for (std::size_t j : {std::size_t(0), std::size_t(1), std::size_t(7777)}) {
    CHECK(pairs.clean[0][j] == Approx(pre_clean[j]).margin(1e-6));
    CHECK(pairs.noisy[0][j] == Approx(pre_noisy[j]).margin(1e-6));
  }
  CHECK(pairs.clean[1][0] == Approx(pre_clean[8192]).margin(1e-6));
  // padded tail of the final frame
  CHECK(pairs.clean[1][20000 - 8192] == 0.0f);
}

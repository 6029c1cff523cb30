// Command-line entry point: synth / train / enhance / evaluate / inspect.
//
// Exit codes: 0 success, 2 usage or config error, 3 data error,
// 4 numerical abort. Every command emits a run manifest; --strict pins
// timestamps and timing columns so runs are byte-for-byte reproducible.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tdcgan/config_io.hpp"
#include "tdcgan/metrics.hpp"

namespace fs = std::filesystem;

namespace {

constexpr double kReferenceParamBudget = 5.12e6;  // sizing target for defaults

struct LoadedModel {
  tdcgan::Generator<float> gen;
  tdcgan::TrainConfig cfg;
  std::uint64_t digest = 0;
};

// Rebuilds the generator a checkpoint was trained with, either from the
// config document embedded in the checkpoint or from an explicit file.
LoadedModel load_generator(const std::string& ckpt_path, const std::string& config_path) {
  auto ck = tdcgan::load_checkpoint<float>(ckpt_path);
  tdcgan::TrainConfig cfg;
  if (!config_path.empty()) {
    cfg = tdcgan::load_train_config(config_path);
  } else {
    const std::string* doc = ck.find_string("config_json");
    if (!doc)
      throw tdcgan::DataError("checkpoint '" + ckpt_path +
                              "' carries no embedded config; pass --config");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(*doc);
    } catch (const nlohmann::json::exception& e) {
      throw tdcgan::DataError("checkpoint '" + ckpt_path +
                              "' has a malformed embedded config: " + e.what());
    }
    cfg = tdcgan::train_config_from_json(j);
  }
  if (cfg.digest() != ck.config_digest)
    throw tdcgan::DataError("config digest " + std::to_string(cfg.digest()) +
                            " does not match checkpoint digest " +
                            std::to_string(ck.config_digest));
  LoadedModel out{tdcgan::build_generator<float>(cfg.gen, cfg.seed), cfg,
                  ck.config_digest};
  auto params = out.gen.parameters();
  tdcgan::restore_tensors(ck, params, "gen.");
  return out;
}

struct SynthArgs {
  std::string out;
  std::int64_t clips = 8;
  std::uint64_t seed = 1;
  std::vector<double> snr{0, 5, 10, 15};
  std::int64_t len = 24000;
  int rate = 16000;
  bool strict = false;
};

int run_synth(const SynthArgs& a) {
  tdcgan::SynthConfig sc;
  sc.n_clips = a.clips;
  sc.seed = a.seed;
  sc.snr_levels = a.snr;
  sc.clip_len = a.len;
  sc.sample_rate = a.rate;
  sc.validate();

  tdcgan::RunManifest m;
  m.command = "synth";
  m.seed = a.seed;
  m.started_at = tdcgan::now_iso8601_utc(a.strict);
  std::string canon = "synth;clips=" + std::to_string(a.clips) +
                      ";seed=" + std::to_string(a.seed) + ";len=" + std::to_string(a.len) +
                      ";rate=" + std::to_string(a.rate) + ";snr=";
  for (double s : a.snr) canon += std::to_string(s) + ",";
  m.config_digest = tdcgan::fnv1a64(canon);

  auto corpus = tdcgan::synth_corpus(sc);
  tdcgan::save_corpus(corpus, a.out);

  m.artifacts = {"clean/", "noisy/", "manifest.json"};
  m.finished_at = tdcgan::now_iso8601_utc(a.strict);
  tdcgan::write_run_manifest(m, (fs::path(a.out) / "run_manifest.json").string());
  std::cout << "wrote " << corpus.items.size() << " clip pairs to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string config, data, out, penalty, resume;
  std::int64_t max_steps = -1;
  bool strict = false;
};

int run_train(const TrainArgs& a) {
  auto cfg = tdcgan::load_train_config(a.config);
  if (!a.penalty.empty())
    cfg.weights.penalty_mode = tdcgan::penalty_mode_from_string(a.penalty);
  if (a.strict) cfg.strict = true;
  if (a.max_steps >= 0) cfg.max_gen_steps = a.max_steps;
  cfg.out_dir = a.out;
  cfg.validate();

  if (!fs::is_directory(a.data))
    throw tdcgan::DataError("data directory '" + a.data + "' does not exist");
  auto corpus = tdcgan::load_corpus(a.data);
  auto frames = tdcgan::make_training_frames<float>(
      corpus, cfg.gen.frame_len, std::max<std::int64_t>(1, cfg.gen.frame_len / 2));

  tdcgan::RunManifest m;
  m.command = "train";
  m.config_path = a.config;
  m.config_digest = cfg.digest();
  m.seed = cfg.seed;
  m.started_at = tdcgan::now_iso8601_utc(cfg.strict);

  auto st = a.resume.empty() ? tdcgan::make_train_state<float>(cfg)
                             : tdcgan::resume_train_state<float>(cfg, a.resume);
  st.extra_strings = {{"config_json", tdcgan::train_config_to_json(cfg).dump()}};

  std::cout << "training on " << frames.size() << " frame pairs ("
            << corpus.items.size() << " clips), penalty "
            << tdcgan::to_string(cfg.weights.penalty_mode) << ", critic penalty "
            << tdcgan::to_string(cfg.weights.critic_penalty) << "\n";
  auto logs = tdcgan::train(st, frames);
  tdcgan::write_loss_log((fs::path(a.out) / "loss_log.csv").string(), logs);

  m.artifacts = {"ckpt_final.bin", "loss_log.csv"};
  for (const auto& entry : fs::directory_iterator(a.out)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("ckpt_e", 0) == 0) m.artifacts.push_back(name);
  }
  std::sort(m.artifacts.begin(), m.artifacts.end());
  m.finished_at = tdcgan::now_iso8601_utc(cfg.strict);
  tdcgan::write_run_manifest(m, (fs::path(a.out) / "run_manifest.json").string());

  std::cout << "generator steps: " << st.gen_steps << " (epoch " << st.epoch << ")\n";
  if (!logs.empty())
    std::cout << "final losses: critic " << logs.back().loss_d << ", generator "
              << logs.back().loss_g << "\n";
  std::cout << "checkpoint: " << (fs::path(a.out) / "ckpt_final.bin").string() << "\n";
  return 0;
}

struct EnhanceArgs {
  std::string model, in, out, config;
  std::int64_t batch = 8;
  bool keep_going = false;
  bool strict = false;
};

int run_enhance(const EnhanceArgs& a) {
  auto lm = load_generator(a.model, a.config);

  tdcgan::RunManifest m;
  m.command = "enhance";
  m.config_path = a.config;
  m.config_digest = lm.digest;
  m.seed = lm.cfg.seed;
  m.started_at = tdcgan::now_iso8601_utc(a.strict);

  auto enhance_file = [&](const std::string& in_path, const std::string& out_path) {
    std::string warning;
    auto clip = tdcgan::read_wav(in_path, &warning);
    if (!warning.empty()) std::cerr << "warning: " << warning << "\n";
    auto enhanced = tdcgan::enhance_clip(lm.gen, clip, a.batch);
    tdcgan::write_wav(enhanced, out_path);
  };

  std::string manifest_path;
  int failures = 0;
  if (fs::is_directory(a.in)) {
    fs::create_directories(a.out);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(a.in))
      if (entry.path().extension() == ".wav") names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    if (names.empty())
      throw tdcgan::DataError("no .wav files found in directory '" + a.in + "'");
    for (const auto& name : names) {
      const auto src = (fs::path(a.in) / name).string();
      const auto dst = (fs::path(a.out) / name).string();
      try {
        enhance_file(src, dst);
        m.artifacts.push_back(name);
      } catch (const tdcgan::Error& e) {
        if (!a.keep_going) throw;
        ++failures;
        std::cerr << "skipping '" << src << "': " << e.what() << "\n";
      }
    }
    manifest_path = (fs::path(a.out) / "run_manifest.json").string();
    std::cout << "enhanced " << m.artifacts.size() << " file(s) into " << a.out;
    if (failures > 0) std::cout << " (" << failures << " failed)";
    std::cout << "\n";
  } else {
    std::string out_path = a.out;
    if (fs::is_directory(a.out))
      out_path = (fs::path(a.out) / fs::path(a.in).filename()).string();
    enhance_file(a.in, out_path);
    m.artifacts.push_back(out_path);
    manifest_path = out_path + ".run.json";
    std::cout << "enhanced " << a.in << " -> " << out_path << "\n";
  }
  m.finished_at = tdcgan::now_iso8601_utc(a.strict);
  tdcgan::write_run_manifest(m, manifest_path);
  return failures > 0 ? 3 : 0;
}

struct EvaluateArgs {
  std::string model, data, report, config;
  std::int64_t batch = 8;
  std::int64_t seg_frame = 512;
  bool strict = false;
};

int run_evaluate(const EvaluateArgs& a) {
  auto lm = load_generator(a.model, a.config);
  auto corpus = tdcgan::load_corpus(a.data);

  tdcgan::RunManifest m;
  m.command = "evaluate";
  m.config_path = a.config;
  m.config_digest = lm.digest;
  m.seed = lm.cfg.seed;
  m.started_at = tdcgan::now_iso8601_utc(a.strict);

  auto report = tdcgan::evaluate_corpus(lm.gen, corpus, a.batch, a.seg_frame);
  report.config_digest = lm.digest;
  report.penalty_mode = tdcgan::to_string(lm.cfg.weights.penalty_mode);

  fs::path csv = a.report;
  csv.replace_extension(".csv");
  tdcgan::write_report(report, a.report, csv.string());

  m.artifacts = {a.report, csv.string()};
  m.finished_at = tdcgan::now_iso8601_utc(a.strict);
  fs::path mpath = a.report;
  mpath.replace_extension(".run.json");
  tdcgan::write_run_manifest(m, mpath.string());

  std::cout << "clips: " << report.rows.size() << "\n";
  std::cout << "mean global SNR: " << report.mean_snr_in << " dB in -> "
            << report.mean_snr_out << " dB out\n";
  std::cout << "mean segmental SNR: " << report.mean_segsnr_in << " dB in -> "
            << report.mean_segsnr_out << " dB out\n";
  std::cout << "report: " << a.report << "\n";
  return 0;
}

struct InspectArgs {
  std::string config, model;
};

int run_inspect(const InspectArgs& a) {
  if (a.config.empty() == a.model.empty())
    throw tdcgan::ConfigError("inspect needs exactly one of --config or --model");

  if (!a.model.empty()) {
    auto ck = tdcgan::load_checkpoint<float>(a.model);
    std::cout << "checkpoint: " << a.model << "\n";
    std::cout << "  generator steps: " << ck.step << "\n";
    std::cout << "  config digest:   " << ck.config_digest << "\n";
    std::int64_t total = 0;
    for (const auto& t : ck.tensors) total += t.tensor.numel();
    std::cout << "  tensors:         " << ck.tensors.size() << " (" << total
              << " elements)\n";
    if (const std::string* doc = ck.find_string("config_json")) {
      auto cfg = tdcgan::train_config_from_json(nlohmann::json::parse(*doc));
      std::cout << "  frame_len:       " << cfg.gen.frame_len << "\n";
      std::cout << "  penalty mode:    " << tdcgan::to_string(cfg.weights.penalty_mode)
                << "\n";
    }
    return 0;
  }

  auto cfg = tdcgan::load_train_config(a.config);
  auto gen = tdcgan::build_generator<float>(cfg.gen, cfg.seed);
  auto disc = tdcgan::build_discriminator<float>(cfg.disc, cfg.seed + 1);
  const auto gp = gen.parameters();
  const auto dp = disc.parameters();

  std::cout << "tool version:  " << tdcgan::kToolVersion << "\n";
  std::cout << "config:        " << a.config << "\n";
  std::cout << "config digest: " << cfg.digest() << "\n\n";

  std::cout << "generator parameters\n";
  std::cout << "  encoder:     " << tdcgan::param_count(gp, "enc.") << "\n";
  std::cout << "  bottleneck:  " << tdcgan::param_count(gp, "bottleneck.") << "\n";
  std::int64_t stack_total = 0;
  for (std::int64_t s = 1; s <= cfg.gen.num_stacks; ++s)
    stack_total += tdcgan::param_count(gp, "stack" + std::to_string(s) + ".");
  std::cout << "  mask stacks: " << stack_total << "\n";
  std::cout << "  mask head:   " << tdcgan::param_count(gp, "mask.") << "\n";
  std::cout << "  decoder:     " << tdcgan::param_count(gp, "dec.") << "\n";
  const std::int64_t g_total = tdcgan::param_count(gp, "");
  std::cout << "  total:       " << g_total << "\n\n";

  const std::int64_t d_total = tdcgan::param_count(dp, "");
  std::cout << "discriminator parameters\n";
  std::cout << "  total:       " << d_total << "\n\n";

  const std::int64_t total = g_total + d_total;
  const double rel = (static_cast<double>(total) - kReferenceParamBudget) /
                     kReferenceParamBudget;
  std::cout << "combined total: " << total << "\n";
  std::cout << "reference budget " << static_cast<std::int64_t>(kReferenceParamBudget)
            << ": " << (std::abs(rel) <= 0.10 ? "within" : "OUTSIDE") << " 10% ("
            << rel * 100.0 << "%)\n\n";

  std::cout << "receptive field: " << cfg.gen.receptive_field_frames() << " frames / "
            << cfg.gen.receptive_field_samples() << " samples\n";
  std::cout << "encoder frames per input frame: " << cfg.gen.n_frames() << "\n";
  std::cout << "critic final feature length: " << cfg.disc.final_len() << "\n\n";

  std::cout << "shape ledger (batch 1)\n";
  tdcgan::ShapeLedger ledger;
  {
    tdcgan::NoGradGuard ng;
    gen.forward(tdcgan::Tensor<float>::zeros({1, cfg.gen.frame_len}), &ledger);
  }
  for (const auto& [name, shape] : ledger)
    std::cout << "  " << name << ": " << tdcgan::shape_str(shape) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"time-domain speech enhancement toolkit"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a paired clean/noisy corpus");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--clips", sa.clips, "number of clip pairs");
  synth->add_option("--seed", sa.seed, "corpus seed");
  synth->add_option("--snr", sa.snr, "SNR levels in dB (cycled)")->delimiter(',');
  synth->add_option("--len", sa.len, "clip length in samples");
  synth->add_option("--rate", sa.rate, "sample rate in Hz");
  synth->add_flag("--strict", sa.strict, "pin timestamps for reproducible output");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train the enhancement model");
  tr->add_option("--config", ta.config, "config JSON file")->required();
  tr->add_option("--data", ta.data, "corpus directory")->required();
  tr->add_option("--out", ta.out, "output directory")->required();
  tr->add_option("--penalty", ta.penalty, "override fidelity penalty: snr or l1");
  tr->add_option("--resume", ta.resume, "resume from a checkpoint");
  tr->add_option("--max-steps", ta.max_steps, "stop after N generator steps");
  tr->add_flag("--strict", ta.strict, "reproducible mode (pins timing columns)");

  EnhanceArgs ea;
  auto* en = app.add_subcommand("enhance", "enhance a WAV file or directory");
  en->add_option("--model", ea.model, "checkpoint file")->required();
  en->add_option("--in", ea.in, "input WAV file or directory")->required();
  en->add_option("--out", ea.out, "output WAV file or directory")->required();
  en->add_option("--config", ea.config, "config JSON (when not embedded)");
  en->add_option("--batch", ea.batch, "frames per forward batch");
  en->add_flag("--keep-going", ea.keep_going, "continue past per-file errors");
  en->add_flag("--strict", ea.strict, "pin timestamps for reproducible output");

  EvaluateArgs va;
  auto* ev = app.add_subcommand("evaluate", "score a model against a corpus");
  ev->add_option("--model", va.model, "checkpoint file")->required();
  ev->add_option("--data", va.data, "corpus directory")->required();
  ev->add_option("--report", va.report, "report path (JSON; CSV written alongside)")
      ->required();
  ev->add_option("--config", va.config, "config JSON (when not embedded)");
  ev->add_option("--batch", va.batch, "frames per forward batch");
  ev->add_option("--seg-frame", va.seg_frame, "segmental SNR frame length");
  ev->add_flag("--strict", va.strict, "pin timestamps for reproducible output");

  InspectArgs ia;
  auto* in = app.add_subcommand("inspect", "print model geometry and parameter counts");
  in->add_option("--config", ia.config, "config JSON file");
  in->add_option("--model", ia.model, "checkpoint file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return run_synth(sa);
    if (tr->parsed()) return run_train(ta);
    if (en->parsed()) return run_enhance(ea);
    if (ev->parsed()) return run_evaluate(va);
    if (in->parsed()) return run_inspect(ia);
    std::cerr << "no command given\n";
    return 2;
  } catch (const tdcgan::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const tdcgan::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const tdcgan::NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

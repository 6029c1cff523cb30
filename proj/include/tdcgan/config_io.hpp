#pragma once

// JSON configuration schema for training runs, plus the run manifest every
// CLI command emits. The schema mirrors the config structs section by
// section; unknown keys are rejected so typos cannot silently fall back to
// defaults. An empty JSON object parses to the reference defaults.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdcgan/trainer.hpp"

namespace tdcgan {

inline constexpr const char* kToolVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Enum <-> string
// ---------------------------------------------------------------------------

inline std::string to_string(PenaltyMode m) {
  return m == PenaltyMode::kSnr ? "snr" : "l1";
}

inline PenaltyMode penalty_mode_from_string(const std::string& s) {
  if (s == "snr") return PenaltyMode::kSnr;
  if (s == "l1") return PenaltyMode::kL1;
  throw ConfigError("penalty_mode must be 'snr' or 'l1', got '" + s + "'");
}

inline std::string to_string(CriticPenalty p) {
  return p == CriticPenalty::kZeroCentered ? "zero_centered" : "interpolated";
}

inline CriticPenalty critic_penalty_from_string(const std::string& s) {
  if (s == "zero_centered") return CriticPenalty::kZeroCentered;
  if (s == "interpolated") return CriticPenalty::kInterpolated;
  throw ConfigError("critic_penalty must be 'zero_centered' or 'interpolated', got '" +
                    s + "'");
}

inline std::string to_string(MaskWiring w) {
  return w == MaskWiring::kEncoderOutput ? "encoder_output" : "bottleneck";
}

inline MaskWiring mask_wiring_from_string(const std::string& s) {
  if (s == "encoder_output") return MaskWiring::kEncoderOutput;
  if (s == "bottleneck") return MaskWiring::kBottleneck;
  throw ConfigError("mask_wiring must be 'encoder_output' or 'bottleneck', got '" + s +
                    "'");
}

// ---------------------------------------------------------------------------
// TrainConfig <-> JSON
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError("config section '" + section + "' must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("config section '" + section + "' has unknown key '" + key + "'");
  }
}

template <typename T>
void read_field(const nlohmann::json& j, const std::string& section, const char* key,
                T& out) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config field '" + section + "." + key + "': " + e.what());
  }
}

inline void read_enum(const nlohmann::json& j, const std::string& section,
                      const char* key, std::string& out) {
  read_field(j, section, key, out);
}

}  // namespace detail

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  detail::check_keys(j, "(root)",
                     {"generator", "discriminator", "loss", "optimizer", "train"});
  TrainConfig cfg;

  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    detail::check_keys(g, "generator",
                       {"frame_len", "enc_channels", "enc_kernel", "enc_stride",
                        "bottleneck_channels", "block_hidden", "block_kernel",
                        "num_stacks", "blocks_per_stack", "norm_eps", "use_norm",
                        "mask_wiring"});
    detail::read_field(g, "generator", "frame_len", cfg.gen.frame_len);
    detail::read_field(g, "generator", "enc_channels", cfg.gen.enc_channels);
    detail::read_field(g, "generator", "enc_kernel", cfg.gen.enc_kernel);
    detail::read_field(g, "generator", "enc_stride", cfg.gen.enc_stride);
    detail::read_field(g, "generator", "bottleneck_channels", cfg.gen.bottleneck_channels);
    detail::read_field(g, "generator", "block_hidden", cfg.gen.block_hidden);
    detail::read_field(g, "generator", "block_kernel", cfg.gen.block_kernel);
    detail::read_field(g, "generator", "num_stacks", cfg.gen.num_stacks);
    detail::read_field(g, "generator", "blocks_per_stack", cfg.gen.blocks_per_stack);
    detail::read_field(g, "generator", "norm_eps", cfg.gen.norm_eps);
    detail::read_field(g, "generator", "use_norm", cfg.gen.use_norm);
    std::string wiring = to_string(cfg.gen.mask_wiring);
    detail::read_enum(g, "generator", "mask_wiring", wiring);
    cfg.gen.mask_wiring = mask_wiring_from_string(wiring);
  }

  if (j.contains("discriminator")) {
    const auto& d = j.at("discriminator");
    detail::check_keys(d, "discriminator",
                       {"frame_len", "channels", "kernel", "stride", "norm_eps",
                        "use_norm", "width_divisor"});
    detail::read_field(d, "discriminator", "frame_len", cfg.disc.frame_len);
    detail::read_field(d, "discriminator", "channels", cfg.disc.channels);
    detail::read_field(d, "discriminator", "kernel", cfg.disc.kernel);
    detail::read_field(d, "discriminator", "stride", cfg.disc.stride);
    detail::read_field(d, "discriminator", "norm_eps", cfg.disc.norm_eps);
    detail::read_field(d, "discriminator", "use_norm", cfg.disc.use_norm);
    detail::read_field(d, "discriminator", "width_divisor", cfg.disc.width_divisor);
  }

  if (j.contains("loss")) {
    const auto& w = j.at("loss");
    detail::check_keys(w, "loss",
                       {"lambda_snr", "lambda_l1", "gamma", "lambda_gp", "snr_eps",
                        "penalty_mode", "critic_penalty"});
    detail::read_field(w, "loss", "lambda_snr", cfg.weights.lambda_snr);
    detail::read_field(w, "loss", "lambda_l1", cfg.weights.lambda_l1);
    detail::read_field(w, "loss", "gamma", cfg.weights.gamma);
    detail::read_field(w, "loss", "lambda_gp", cfg.weights.lambda_gp);
    detail::read_field(w, "loss", "snr_eps", cfg.weights.snr_eps);
    std::string pm = to_string(cfg.weights.penalty_mode);
    detail::read_enum(w, "loss", "penalty_mode", pm);
    cfg.weights.penalty_mode = penalty_mode_from_string(pm);
    std::string cp = to_string(cfg.weights.critic_penalty);
    detail::read_enum(w, "loss", "critic_penalty", cp);
    cfg.weights.critic_penalty = critic_penalty_from_string(cp);
  }

  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::check_keys(o, "optimizer", {"generator", "discriminator"});
    auto read_adam = [](const nlohmann::json& a, const std::string& section,
                        AdamConfig& out) {
      detail::check_keys(a, section, {"lr", "beta1", "beta2", "eps"});
      detail::read_field(a, section, "lr", out.lr);
      detail::read_field(a, section, "beta1", out.beta1);
      detail::read_field(a, section, "beta2", out.beta2);
      detail::read_field(a, section, "eps", out.eps);
    };
    if (o.contains("generator")) read_adam(o.at("generator"), "optimizer.generator", cfg.opt_gen);
    if (o.contains("discriminator"))
      read_adam(o.at("discriminator"), "optimizer.discriminator", cfg.opt_disc);
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::check_keys(t, "train",
                       {"epochs", "batch_size", "disc_steps_per_gen_step", "seed",
                        "max_gen_steps", "checkpoint_every_epochs", "log_every",
                        "strict"});
    detail::read_field(t, "train", "epochs", cfg.epochs);
    detail::read_field(t, "train", "batch_size", cfg.batch_size);
    detail::read_field(t, "train", "disc_steps_per_gen_step", cfg.disc_steps_per_gen_step);
    detail::read_field(t, "train", "seed", cfg.seed);
    detail::read_field(t, "train", "max_gen_steps", cfg.max_gen_steps);
    detail::read_field(t, "train", "checkpoint_every_epochs", cfg.checkpoint_every_epochs);
    detail::read_field(t, "train", "log_every", cfg.log_every);
    detail::read_field(t, "train", "strict", cfg.strict);
  }

  cfg.validate();
  return cfg;
}

inline nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return {
      {"generator",
       {{"frame_len", cfg.gen.frame_len},
        {"enc_channels", cfg.gen.enc_channels},
        {"enc_kernel", cfg.gen.enc_kernel},
        {"enc_stride", cfg.gen.enc_stride},
        {"bottleneck_channels", cfg.gen.bottleneck_channels},
        {"block_hidden", cfg.gen.block_hidden},
        {"block_kernel", cfg.gen.block_kernel},
        {"num_stacks", cfg.gen.num_stacks},
        {"blocks_per_stack", cfg.gen.blocks_per_stack},
        {"norm_eps", cfg.gen.norm_eps},
        {"use_norm", cfg.gen.use_norm},
        {"mask_wiring", to_string(cfg.gen.mask_wiring)}}},
      {"discriminator",
       {{"frame_len", cfg.disc.frame_len},
        {"channels", cfg.disc.channels},
        {"kernel", cfg.disc.kernel},
        {"stride", cfg.disc.stride},
        {"norm_eps", cfg.disc.norm_eps},
        {"use_norm", cfg.disc.use_norm},
        {"width_divisor", cfg.disc.width_divisor}}},
      {"loss",
       {{"lambda_snr", cfg.weights.lambda_snr},
        {"lambda_l1", cfg.weights.lambda_l1},
        {"gamma", cfg.weights.gamma},
        {"lambda_gp", cfg.weights.lambda_gp},
        {"snr_eps", cfg.weights.snr_eps},
        {"penalty_mode", to_string(cfg.weights.penalty_mode)},
        {"critic_penalty", to_string(cfg.weights.critic_penalty)}}},
      {"optimizer",
       {{"generator",
         {{"lr", cfg.opt_gen.lr},
          {"beta1", cfg.opt_gen.beta1},
          {"beta2", cfg.opt_gen.beta2},
          {"eps", cfg.opt_gen.eps}}},
        {"discriminator",
         {{"lr", cfg.opt_disc.lr},
          {"beta1", cfg.opt_disc.beta1},
          {"beta2", cfg.opt_disc.beta2},
          {"eps", cfg.opt_disc.eps}}}}},
      {"train",
       {{"epochs", cfg.epochs},
        {"batch_size", cfg.batch_size},
        {"disc_steps_per_gen_step", cfg.disc_steps_per_gen_step},
        {"seed", cfg.seed},
        {"max_gen_steps", cfg.max_gen_steps},
        {"checkpoint_every_epochs", cfg.checkpoint_every_epochs},
        {"log_every", cfg.log_every},
        {"strict", cfg.strict}}}};
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return train_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct RunManifest {
  std::string command;
  std::string config_path;
  std::uint64_t config_digest = 0;
  std::uint64_t seed = 0;
  std::string started_at, finished_at;
  std::vector<std::string> artifacts;
  std::string tool_version = kToolVersion;
};

// In strict mode the timestamp is pinned so output directories are
// byte-for-byte reproducible.
inline std::string now_iso8601_utc(bool strict) {
  if (strict) return "1970-01-01T00:00:00Z";
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json manifest_to_json(const RunManifest& m) {
  return {{"command", m.command},
          {"config_path", m.config_path},
          {"config_digest", m.config_digest},
          {"seed", m.seed},
          {"started_at", m.started_at},
          {"finished_at", m.finished_at},
          {"artifacts", m.artifacts},
          {"tool_version", m.tool_version}};
}

inline void write_run_manifest(const RunManifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << manifest_to_json(m).dump(2) << "\n";
  if (!out) throw DataError("short write to '" + path + "'");
}

}  // namespace tdcgan

#pragma once

// Alternating adversarial training with two-timescale Adam updates.
//
// Per minibatch: one critic update at fixed generator output (the generator
// runs with recording off, so nothing flows back into it), then — every
// `disc_steps_per_gen_step`-th batch — one generator update on the same batch
// with the critic's parameters frozen. Gradient buffers are zeroed at the
// start of each update. A non-finite loss aborts with NumericalError.
//
// Epoch order is drawn from a dedicated RNG whose epoch-start state is kept,
// so a checkpoint taken mid-epoch can replay the permutation and resume
// exactly where it stopped.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tdcgan/checkpoint.hpp"
#include "tdcgan/losses.hpp"
#include "tdcgan/models.hpp"
#include "tdcgan/optim.hpp"
#include "tdcgan/tensor.hpp"

namespace tdcgan {

struct TrainConfig {
  GeneratorConfig gen;
  DiscriminatorConfig disc;
  LossWeights weights;
  AdamConfig opt_gen{.lr = 2e-4};
  AdamConfig opt_disc{.lr = 3e-4};
  std::int64_t epochs = 100;
  std::int64_t batch_size = 16;
  std::int64_t disc_steps_per_gen_step = 1;
  std::uint64_t seed = 1234;
  // run-length / environment knobs; not part of the config digest
  std::int64_t max_gen_steps = 0;          // 0 = bounded by epochs only
  std::int64_t checkpoint_every_epochs = 0;  // 0 = final checkpoint only
  std::int64_t log_every = 1;
  bool strict = false;  // reproducibility mode: wall-clock columns log as 0
  std::string out_dir;  // checkpoints land here when non-empty

  void validate() const {
    gen.validate();
    disc.validate();
    weights.validate();
    opt_gen.validate();
    opt_disc.validate();
    std::string bad;
    auto flag = [&](const std::string& m) { bad += (bad.empty() ? "" : "; ") + m; };
    if (epochs < 0) flag("epochs must be >= 0");
    if (batch_size < 1) flag("batch_size must be >= 1");
    if (disc_steps_per_gen_step < 1) flag("disc_steps_per_gen_step must be >= 1");
    if (max_gen_steps < 0) flag("max_gen_steps must be >= 0");
    if (checkpoint_every_epochs < 0) flag("checkpoint_every_epochs must be >= 0");
    if (log_every < 1) flag("log_every must be >= 1");
    if (disc.frame_len != gen.frame_len)
      flag("disc.frame_len (" + std::to_string(disc.frame_len) +
           ") must equal gen.frame_len (" + std::to_string(gen.frame_len) + ")");
    if (!bad.empty()) throw ConfigError("TrainConfig: " + bad);
  }

  // Canonical trajectory-determining description; run-length and environment
  // fields are excluded so a run can be resumed past its original horizon.
  std::string canonical_string() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "gen.frame_len=" << gen.frame_len << ";gen.enc_channels=" << gen.enc_channels
       << ";gen.enc_kernel=" << gen.enc_kernel << ";gen.enc_stride=" << gen.enc_stride
       << ";gen.bottleneck_channels=" << gen.bottleneck_channels
       << ";gen.block_hidden=" << gen.block_hidden
       << ";gen.block_kernel=" << gen.block_kernel << ";gen.num_stacks=" << gen.num_stacks
       << ";gen.blocks_per_stack=" << gen.blocks_per_stack
       << ";gen.norm_eps=" << gen.norm_eps << ";gen.use_norm=" << gen.use_norm
       << ";gen.mask_wiring=" << static_cast<int>(gen.mask_wiring);
    os << ";disc.frame_len=" << disc.frame_len << ";disc.channels=";
    for (std::size_t i = 0; i < disc.channels.size(); ++i)
      os << (i ? "," : "") << disc.channels[i];
    os << ";disc.kernel=" << disc.kernel << ";disc.stride=" << disc.stride
       << ";disc.norm_eps=" << disc.norm_eps << ";disc.use_norm=" << disc.use_norm
       << ";disc.width_divisor=" << disc.width_divisor;
    os << ";w.lambda_snr=" << weights.lambda_snr << ";w.lambda_l1=" << weights.lambda_l1
       << ";w.gamma=" << weights.gamma << ";w.lambda_gp=" << weights.lambda_gp
       << ";w.snr_eps=" << weights.snr_eps
       << ";w.penalty_mode=" << static_cast<int>(weights.penalty_mode)
       << ";w.critic_penalty=" << static_cast<int>(weights.critic_penalty);
    os << ";opt_gen.lr=" << opt_gen.lr << ";opt_gen.beta1=" << opt_gen.beta1
       << ";opt_gen.beta2=" << opt_gen.beta2 << ";opt_gen.eps=" << opt_gen.eps;
    os << ";opt_disc.lr=" << opt_disc.lr << ";opt_disc.beta1=" << opt_disc.beta1
       << ";opt_disc.beta2=" << opt_disc.beta2 << ";opt_disc.eps=" << opt_disc.eps;
    os << ";epochs=" << epochs << ";batch_size=" << batch_size
       << ";disc_steps_per_gen_step=" << disc_steps_per_gen_step << ";seed=" << seed;
    return os.str();
  }

  std::uint64_t digest() const { return fnv1a64(canonical_string()); }
};

// Aligned clean/noisy training frames.
template <typename T>
struct FramePairs {
  std::int64_t frame_len = 0;
  std::vector<std::vector<T>> clean, noisy;

  std::int64_t size() const { return static_cast<std::int64_t>(clean.size()); }

  void validate(std::int64_t want_frame_len) const {
    if (clean.size() != noisy.size())
      throw DataError("FramePairs: " + std::to_string(clean.size()) + " clean vs " +
                      std::to_string(noisy.size()) + " noisy frames");
    if (clean.empty()) throw DataError("FramePairs: no training frames");
    if (frame_len != want_frame_len)
      throw DataError("FramePairs: frame_len " + std::to_string(frame_len) +
                      " does not match the model's " + std::to_string(want_frame_len));
    for (const auto& f : clean)
      if (static_cast<std::int64_t>(f.size()) != frame_len)
        throw DataError("FramePairs: ragged clean frame");
    for (const auto& f : noisy)
      if (static_cast<std::int64_t>(f.size()) != frame_len)
        throw DataError("FramePairs: ragged noisy frame");
  }
};

struct StepLog {
  std::int64_t step = 0;
  double loss_d = 0, loss_g = 0, penalty = 0, r1 = 0, r2 = 0, wall_ms = 0;
};

inline constexpr const char* kLossLogHeader = "step,loss_d,loss_g,penalty,r1,r2,wall_ms";

inline void write_loss_log(const std::string& path, const std::vector<StepLog>& logs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open loss log '" + path + "' for writing");
  out << kLossLogHeader << "\n";
  out << std::setprecision(10);
  for (const auto& l : logs)
    out << l.step << "," << l.loss_d << "," << l.loss_g << "," << l.penalty << ","
        << l.r1 << "," << l.r2 << "," << l.wall_ms << "\n";
  if (!out) throw DataError("short write to loss log '" + path + "'");
}

template <typename T>
struct TrainState {
  TrainConfig cfg;
  Generator<T> gen;
  Discriminator<T> disc;
  Adam<T> opt_gen;
  Adam<T> opt_disc;
  Rng shuffle_rng, step_rng;
  std::string shuffle_epoch_start;  // shuffle RNG state at the top of the epoch
  // extra strings stored verbatim in checkpoints (e.g. a self-describing
  // config document added by the CLI); keys must not collide with the
  // trainer's own bookkeeping keys
  std::vector<std::pair<std::string, std::string>> extra_strings;
  std::int64_t epoch = 0;
  std::int64_t batch_in_epoch = 0;  // next batch index within the epoch
  std::int64_t gen_steps = 0;
  std::int64_t global_batches = 0;
};

template <typename T>
TrainState<T> make_train_state(const TrainConfig& cfg) {
  cfg.validate();
  auto gen = build_generator<T>(cfg.gen, cfg.seed);
  auto disc = build_discriminator<T>(cfg.disc, cfg.seed + 1);
  Adam<T> og(gen.parameters(), cfg.opt_gen);
  Adam<T> od(disc.parameters(), cfg.opt_disc);
  TrainState<T> st{cfg,
                   std::move(gen),
                   std::move(disc),
                   std::move(og),
                   std::move(od),
                   Rng(cfg.seed + 2),
                   Rng(cfg.seed + 3),
                   "",
                   {},
                   0,
                   0,
                   0,
                   0};
  st.shuffle_epoch_start = st.shuffle_rng.serialize();
  return st;
}

template <typename T>
void save_train_checkpoint(TrainState<T>& st, const std::string& path) {
  Checkpoint<T> ck;
  ck.config_digest = st.cfg.digest();
  ck.step = static_cast<std::uint64_t>(st.gen_steps);
  ck.strings = {
      {"rng.shuffle", st.shuffle_rng.serialize()},
      {"rng.shuffle_epoch_start", st.shuffle_epoch_start},
      {"rng.step", st.step_rng.serialize()},
      {"epoch", std::to_string(st.epoch)},
      {"batch_in_epoch", std::to_string(st.batch_in_epoch)},
      {"gen_steps", std::to_string(st.gen_steps)},
      {"global_batches", std::to_string(st.global_batches)},
      {"opt_gen.t", std::to_string(st.opt_gen.step_count())},
      {"opt_disc.t", std::to_string(st.opt_disc.step_count())},
  };
  for (const auto& kv : st.extra_strings) ck.strings.push_back(kv);
  for (const auto& p : st.gen.parameters()) ck.tensors.push_back({"gen." + p.name, p.tensor});
  for (const auto& p : st.disc.parameters())
    ck.tensors.push_back({"disc." + p.name, p.tensor});
  for (const auto& p : st.opt_gen.state_tensors())
    ck.tensors.push_back({"opt_gen." + p.name, p.tensor});
  for (const auto& p : st.opt_disc.state_tensors())
    ck.tensors.push_back({"opt_disc." + p.name, p.tensor});
  save_checkpoint(path, ck);
}

namespace detail {

template <typename T>
std::int64_t req_int_t(const Checkpoint<T>& ck, const std::string& key) {
  const std::string* s = ck.find_string(key);
  if (!s) throw DataError("checkpoint is missing field '" + key + "'");
  return std::stoll(*s);
}

template <typename T>
std::string req_str_t(const Checkpoint<T>& ck, const std::string& key) {
  const std::string* s = ck.find_string(key);
  if (!s) throw DataError("checkpoint is missing field '" + key + "'");
  return *s;
}
}  // namespace detail

template <typename T>
TrainState<T> resume_train_state(const TrainConfig& cfg, const std::string& path) {
  auto st = make_train_state<T>(cfg);
  auto ck = load_checkpoint<T>(path, cfg.digest());
  auto gp = st.gen.parameters();
  restore_tensors(ck, gp, "gen.");
  auto dp = st.disc.parameters();
  restore_tensors(ck, dp, "disc.");
  auto ogs = st.opt_gen.state_tensors();
  restore_tensors(ck, ogs, "opt_gen.");
  auto ods = st.opt_disc.state_tensors();
  restore_tensors(ck, ods, "opt_disc.");
  st.opt_gen.set_step_count(detail::req_int_t(ck, "opt_gen.t"));
  st.opt_disc.set_step_count(detail::req_int_t(ck, "opt_disc.t"));
  st.shuffle_rng.deserialize(detail::req_str_t(ck, "rng.shuffle"));
  st.step_rng.deserialize(detail::req_str_t(ck, "rng.step"));
  st.shuffle_epoch_start = detail::req_str_t(ck, "rng.shuffle_epoch_start");
  st.epoch = detail::req_int_t(ck, "epoch");
  st.batch_in_epoch = detail::req_int_t(ck, "batch_in_epoch");
  st.gen_steps = detail::req_int_t(ck, "gen_steps");
  st.global_batches = detail::req_int_t(ck, "global_batches");
  static const std::vector<std::string> reserved{
      "rng.shuffle",  "rng.shuffle_epoch_start", "rng.step",
      "epoch",        "batch_in_epoch",          "gen_steps",
      "global_batches", "opt_gen.t",             "opt_disc.t"};
  for (const auto& kv : ck.strings)
    if (std::find(reserved.begin(), reserved.end(), kv.first) == reserved.end())
      st.extra_strings.push_back(kv);
  return st;
}

namespace detail {

template <typename T>
std::pair<Tensor<T>, Tensor<T>> gather_batch(const FramePairs<T>& data,
                                             const std::vector<std::int64_t>& perm,
                                             std::int64_t lo, std::int64_t hi) {
  const std::int64_t b = hi - lo, L = data.frame_len;
  std::vector<T> cv(static_cast<std::size_t>(b * L)), nv(static_cast<std::size_t>(b * L));
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& cf = data.clean[static_cast<std::size_t>(perm[lo + i])];
    const auto& nf = data.noisy[static_cast<std::size_t>(perm[lo + i])];
    std::copy(cf.begin(), cf.end(), cv.begin() + i * L);
    std::copy(nf.begin(), nf.end(), nv.begin() + i * L);
  }
  return {Tensor<T>::from({b, L}, std::move(cv)), Tensor<T>::from({b, L}, std::move(nv))};
}

// Temporarily freezes a parameter list (requires_grad = false).
template <typename T>
struct FreezeGuard {
  explicit FreezeGuard(ParamList<T> params) : params_(std::move(params)) {
    for (auto& p : params_) p.tensor.set_requires_grad(false);
  }
  ~FreezeGuard() {
    for (auto& p : params_) p.tensor.set_requires_grad(true);
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ParamList<T> params_;
};

}  // namespace detail

// Runs training until the epoch horizon (or max_gen_steps) is reached,
// appending one log row per logged generator step. Checkpoints are written
// under cfg.out_dir when it is set.
template <typename T>
std::vector<StepLog> train(TrainState<T>& st, const FramePairs<T>& data) {
  const TrainConfig& cfg = st.cfg;
  cfg.validate();
  data.validate(cfg.gen.frame_len);
  const std::int64_t N = data.size();
  const std::int64_t n_batches = (N + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<StepLog> logs;
  auto critic = [&st](const Tensor<T>& c, const Tensor<T>& n) {
    return st.disc.forward(c, n);
  };
  const bool write_files = !cfg.out_dir.empty();
  if (write_files) std::filesystem::create_directories(cfg.out_dir);
  auto ckpt_path = [&](const std::string& tag) {
    return cfg.out_dir + "/ckpt_" + tag + ".bin";
  };

  bool done = cfg.max_gen_steps > 0 && st.gen_steps >= cfg.max_gen_steps;
  while (st.epoch < cfg.epochs && !done) {
    std::vector<std::int64_t> perm(static_cast<std::size_t>(N));
    std::iota(perm.begin(), perm.end(), 0);
    if (st.batch_in_epoch == 0) {
      st.shuffle_epoch_start = st.shuffle_rng.serialize();
      st.shuffle_rng.shuffle(perm);
    } else {
      // resumed mid-epoch: replay this epoch's permutation from its start state
      Rng replay;
      replay.deserialize(st.shuffle_epoch_start);
      replay.shuffle(perm);
    }
    for (; st.batch_in_epoch < n_batches && !done; ) {
      const std::int64_t lo = st.batch_in_epoch * cfg.batch_size;
      const std::int64_t hi = std::min<std::int64_t>(N, lo + cfg.batch_size);
      const auto t0 = std::chrono::steady_clock::now();
      auto [clean, noisy] = detail::gather_batch(data, perm, lo, hi);

      // critic update at fixed generator output
      Tensor<T> xhat;
      {
        NoGradGuard ng;
        xhat = st.gen.forward(noisy);
      }
      st.opt_disc.zero_grad();
      auto dterms = critic_loss<T>(critic, clean, xhat, noisy, cfg.weights, st.step_rng);
      backward(dterms.total);
      st.opt_disc.step();
      ++st.global_batches;

      bool logged_gen = false;
      StepLog row;
      row.loss_d = static_cast<double>(dterms.total.item());
      if (cfg.weights.critic_penalty == CriticPenalty::kZeroCentered) {
        row.r1 = static_cast<double>(dterms.zc_real.item());
        row.r2 = static_cast<double>(dterms.zc_fake.item());
      } else {
        row.r1 = static_cast<double>(dterms.interp.item());
        row.r2 = 0.0;
      }

      // generator update on the same batch, critic frozen
      if (st.global_batches % cfg.disc_steps_per_gen_step == 0) {
        st.opt_gen.zero_grad();
        {
          detail::FreezeGuard<T> freeze(st.disc.parameters());
          auto xg = st.gen.forward(noisy);
          auto gterms = generator_loss<T>(critic, clean, xg, noisy, cfg.weights);
          backward(gterms.total);
          row.loss_g = static_cast<double>(gterms.total.item());
          row.penalty = static_cast<double>(gterms.penalty.item());
        }
        st.opt_gen.step();
        ++st.gen_steps;
        logged_gen = true;
        if (cfg.max_gen_steps > 0 && st.gen_steps >= cfg.max_gen_steps) done = true;
      }
      ++st.batch_in_epoch;

      if (logged_gen && (st.gen_steps % cfg.log_every == 0 || done)) {
        row.step = st.gen_steps;
        const auto t1 = std::chrono::steady_clock::now();
        row.wall_ms =
            cfg.strict ? 0.0
                       : std::chrono::duration<double, std::milli>(t1 - t0).count();
        logs.push_back(row);
      }
    }
    if (st.batch_in_epoch >= n_batches) {
      st.batch_in_epoch = 0;
      ++st.epoch;
      if (write_files && cfg.checkpoint_every_epochs > 0 &&
          st.epoch % cfg.checkpoint_every_epochs == 0)
        save_train_checkpoint(st, ckpt_path("e" + std::to_string(st.epoch)));
    }
  }
  if (write_files) save_train_checkpoint(st, ckpt_path("final"));
  return logs;
}

}  // namespace tdcgan

#pragma once

// Objective quality measurement: global SNR (capped), segmental SNR
// (clamped, silence-skipping), the whole-clip enhancement chain, corpus
// evaluation reports, and the harness comparing the two fidelity penalties.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tdcgan/audio.hpp"
#include "tdcgan/models.hpp"
#include "tdcgan/trainer.hpp"

namespace tdcgan {

inline constexpr double kGlobalSnrCapDb = 100.0;

// 10*log10(||clean||^2 / ||clean - estimate||^2), capped so a zero residual
// reports 100 dB instead of infinity.
inline double global_snr(const std::vector<double>& clean,
                         const std::vector<double>& estimate) {
  if (clean.size() != estimate.size())
    throw DataError("global_snr: length mismatch (" + std::to_string(clean.size()) +
                    " vs " + std::to_string(estimate.size()) + ")");
  if (clean.empty()) throw DataError("global_snr: empty signals");
  double es = 0, er = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    es += clean[i] * clean[i];
    const double r = clean[i] - estimate[i];
    er += r * r;
  }
  if (es <= 0) throw DataError("global_snr: clean signal has zero energy");
  if (er <= 0) return kGlobalSnrCapDb;
  return std::min(kGlobalSnrCapDb, 10.0 * std::log10(es / er));
}

// Mean over non-overlapping frames of the per-frame log energy ratio, each
// clamped to [clamp_lo, clamp_hi]; frames whose clean energy falls below
// 1e-10 are skipped, and a trailing partial frame is ignored.
inline double seg_snr(const std::vector<double>& clean,
                      const std::vector<double>& estimate, std::int64_t frame = 512,
                      double clamp_lo = -10.0, double clamp_hi = 35.0) {
  if (clean.size() != estimate.size())
    throw DataError("seg_snr: length mismatch (" + std::to_string(clean.size()) +
                    " vs " + std::to_string(estimate.size()) + ")");
  if (frame < 1) throw ConfigError("seg_snr: frame must be >= 1");
  if (!(clamp_lo < clamp_hi)) throw ConfigError("seg_snr: clamp_lo must be < clamp_hi");
  if (static_cast<std::int64_t>(clean.size()) < frame)
    throw DataError("seg_snr: signals shorter than one frame of " +
                    std::to_string(frame) + " samples");
  constexpr double kSilence = 1e-10;
  double sum = 0;
  std::int64_t scored = 0;
  const auto n_frames = static_cast<std::int64_t>(clean.size()) / frame;
  for (std::int64_t f = 0; f < n_frames; ++f) {
    const std::size_t at = static_cast<std::size_t>(f * frame);
    double es = 0, er = 0;
    for (std::int64_t i = 0; i < frame; ++i) {
      const double c = clean[at + static_cast<std::size_t>(i)];
      const double r = c - estimate[at + static_cast<std::size_t>(i)];
      es += c * c;
      er += r * r;
    }
    if (es < kSilence) continue;
    const double val = er <= 0 ? clamp_hi : 10.0 * std::log10(es / er);
    sum += std::clamp(val, clamp_lo, clamp_hi);
    ++scored;
  }
  if (scored == 0)
    throw DataError("seg_snr: no scorable frames (clean signal is silent)");
  return sum / static_cast<double>(scored);
}

// Full enhancement chain for one clip: pre-emphasize, frame at 50% overlap,
// run the generator over frame batches with recording off, reconstruct by
// overlap-add averaging, de-emphasize. Output length equals input length.
template <typename T>
AudioClip enhance_clip(const Generator<T>& gen, const AudioClip& clip,
                       std::int64_t batch_size = 8, double pre_c = 0.95) {
  if (batch_size < 1) throw ConfigError("enhance_clip: batch_size must be >= 1");
  const std::int64_t frame_len = gen.cfg.frame_len;
  const std::int64_t shift = std::max<std::int64_t>(1, frame_len / 2);
  AudioClip pre{pre_emphasis(clip.samples, pre_c), clip.sample_rate, clip.id};
  auto fs = frame_signal(pre, frame_len, shift);

  NoGradGuard ng;
  const auto count = static_cast<std::int64_t>(fs.frames.size());
  for (std::int64_t lo = 0; lo < count; lo += batch_size) {
    const std::int64_t hi = std::min(count, lo + batch_size);
    const std::int64_t b = hi - lo;
    std::vector<T> in(static_cast<std::size_t>(b * frame_len));
    for (std::int64_t f = 0; f < b; ++f) {
      const auto& src = fs.frames[static_cast<std::size_t>(lo + f)];
      for (std::int64_t i = 0; i < frame_len; ++i)
        in[static_cast<std::size_t>(f * frame_len + i)] =
            static_cast<T>(src[static_cast<std::size_t>(i)]);
    }
    auto out = gen.forward(Tensor<T>::from({b, frame_len}, std::move(in)));
    auto ov = out.values();
    for (std::int64_t f = 0; f < b; ++f) {
      auto& dst = fs.frames[static_cast<std::size_t>(lo + f)];
      for (std::int64_t i = 0; i < frame_len; ++i)
        dst[static_cast<std::size_t>(i)] =
            static_cast<double>(ov[static_cast<std::size_t>(f * frame_len + i)]);
    }
  }
  auto rec = overlap_add_average(fs);
  AudioClip out{de_emphasis(rec.samples, pre_c), clip.sample_rate, clip.id};
  return out;
}

struct EvalRow {
  std::string id;
  double snr_in = 0, snr_out = 0, segsnr_in = 0, segsnr_out = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;  // sorted by id
  double mean_snr_in = 0, mean_snr_out = 0;
  double mean_segsnr_in = 0, mean_segsnr_out = 0;
  std::uint64_t config_digest = 0;
  std::string penalty_mode;  // "snr", "l1", or "" when not tied to a run
};

inline void finalize_report_means(EvalReport& r) {
  if (r.rows.empty()) throw DataError("evaluation report has no rows");
  double a = 0, b = 0, c = 0, d = 0;
  for (const auto& row : r.rows) {
    a += row.snr_in;
    b += row.snr_out;
    c += row.segsnr_in;
    d += row.segsnr_out;
  }
  const auto n = static_cast<double>(r.rows.size());
  r.mean_snr_in = a / n;
  r.mean_snr_out = b / n;
  r.mean_segsnr_in = c / n;
  r.mean_segsnr_out = d / n;
}

// Scores every corpus pair before and after `enhance` (any AudioClip ->
// AudioClip callable). Deterministic: rows are sorted by id.
template <typename Enhancer>
EvalReport evaluate_corpus_with(Enhancer&& enhance, const Corpus& corpus,
                                std::int64_t seg_frame = 512) {
  if (corpus.items.empty()) throw DataError("evaluate_corpus: empty corpus");
  EvalReport report;
  for (const auto& item : corpus.items) {
    if (item.clean.length() != item.noisy.length())
      throw DataError("corpus clip '" + item.clean.id + "': clean length " +
                      std::to_string(item.clean.length()) + " != noisy length " +
                      std::to_string(item.noisy.length()));
    AudioClip enhanced = enhance(item.noisy);
    if (enhanced.length() != item.clean.length())
      throw DataError("enhanced clip '" + item.clean.id + "' has length " +
                      std::to_string(enhanced.length()) + ", expected " +
                      std::to_string(item.clean.length()));
    EvalRow row;
    row.id = item.clean.id;
    row.snr_in = global_snr(item.clean.samples, item.noisy.samples);
    row.snr_out = global_snr(item.clean.samples, enhanced.samples);
    row.segsnr_in = seg_snr(item.clean.samples, item.noisy.samples, seg_frame);
    row.segsnr_out = seg_snr(item.clean.samples, enhanced.samples, seg_frame);
    report.rows.push_back(std::move(row));
  }
  std::sort(report.rows.begin(), report.rows.end(),
            [](const EvalRow& x, const EvalRow& y) { return x.id < y.id; });
  finalize_report_means(report);
  return report;
}

template <typename T>
EvalReport evaluate_corpus(const Generator<T>& gen, const Corpus& corpus,
                           std::int64_t batch_size = 8, std::int64_t seg_frame = 512) {
  return evaluate_corpus_with(
      [&](const AudioClip& noisy) { return enhance_clip(gen, noisy, batch_size); },
      corpus, seg_frame);
}

inline constexpr const char* kReportCsvHeader = "id,snr_in,snr_out,segsnr_in,segsnr_out";

inline std::string report_to_csv(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << kReportCsvHeader << "\n";
  for (const auto& row : r.rows)
    os << row.id << "," << row.snr_in << "," << row.snr_out << "," << row.segsnr_in
       << "," << row.segsnr_out << "\n";
  os << "mean," << r.mean_snr_in << "," << r.mean_snr_out << "," << r.mean_segsnr_in
     << "," << r.mean_segsnr_out << "\n";
  return os.str();
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"id", row.id},
                    {"snr_in", row.snr_in},
                    {"snr_out", row.snr_out},
                    {"segsnr_in", row.segsnr_in},
                    {"segsnr_out", row.segsnr_out}});
  return {{"penalty_mode", r.penalty_mode},
          {"config_digest", r.config_digest},
          {"rows", rows},
          {"means",
           {{"snr_in", r.mean_snr_in},
            {"snr_out", r.mean_snr_out},
            {"segsnr_in", r.mean_segsnr_in},
            {"segsnr_out", r.mean_segsnr_out}}}};
}

inline void write_report(const EvalReport& r, const std::string& json_path,
                         const std::string& csv_path) {
  if (!json_path.empty()) {
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + json_path + "' for writing");
    out << report_to_json(r).dump(2) << "\n";
    if (!out) throw DataError("short write to '" + json_path + "'");
  }
  if (!csv_path.empty()) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + csv_path + "' for writing");
    out << report_to_csv(r);
    if (!out) throw DataError("short write to '" + csv_path + "'");
  }
}

// ---------------------------------------------------------------------------
// Fidelity-penalty comparison harness
// ---------------------------------------------------------------------------

struct PenaltyComparisonRow {
  std::uint64_t seed = 0;
  EvalReport snr_mode, l1_mode;
  double delta_segsnr = 0;  // snr-mode mean segSNR out minus l1-mode
  double delta_snr = 0;
};

struct PenaltyComparison {
  std::vector<PenaltyComparisonRow> rows;
  double mean_delta_segsnr = 0, mean_delta_snr = 0;
};

// Trains one run per (seed, penalty mode) — configs identical except for
// penalty_mode — evaluates both on the corpus, and reports per-seed deltas.
template <typename T>
PenaltyComparison compare_penalties(const TrainConfig& base, const Corpus& corpus,
                                    const std::vector<std::uint64_t>& seeds,
                                    std::int64_t eval_batch = 8) {
  if (seeds.empty()) throw ConfigError("compare_penalties: need at least one seed");
  PenaltyComparison cmp;
  for (std::uint64_t seed : seeds) {
    auto run_mode = [&](PenaltyMode mode) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.weights.penalty_mode = mode;
      cfg.out_dir.clear();  // in-memory runs only
      auto frames = make_training_frames<T>(corpus, cfg.gen.frame_len,
                                            std::max<std::int64_t>(1, cfg.gen.frame_len / 2));
      auto st = make_train_state<T>(cfg);
      train(st, frames);
      auto report = evaluate_corpus(st.gen, corpus, eval_batch);
      report.config_digest = cfg.digest();
      report.penalty_mode = mode == PenaltyMode::kSnr ? "snr" : "l1";
      return report;
    };
    PenaltyComparisonRow row;
    row.seed = seed;
    row.snr_mode = run_mode(PenaltyMode::kSnr);
    row.l1_mode = run_mode(PenaltyMode::kL1);
    row.delta_segsnr = row.snr_mode.mean_segsnr_out - row.l1_mode.mean_segsnr_out;
    row.delta_snr = row.snr_mode.mean_snr_out - row.l1_mode.mean_snr_out;
    cmp.rows.push_back(std::move(row));
  }
  for (const auto& row : cmp.rows) {
    cmp.mean_delta_segsnr += row.delta_segsnr;
    cmp.mean_delta_snr += row.delta_snr;
  }
  cmp.mean_delta_segsnr /= static_cast<double>(cmp.rows.size());
  cmp.mean_delta_snr /= static_cast<double>(cmp.rows.size());
  return cmp;
}

// One row per seed plus the mean row; used by the penalty-comparison report.
inline constexpr const char* kComparisonCsvHeader =
    "seed,segsnr_out_snr,segsnr_out_l1,delta_segsnr,snr_out_snr,snr_out_l1,delta_snr";

inline std::string comparison_to_csv(const PenaltyComparison& cmp) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << kComparisonCsvHeader << "\n";
  double m_s_snr = 0, m_s_l1 = 0, m_g_snr = 0, m_g_l1 = 0;
  for (const auto& row : cmp.rows) {
    os << row.seed << "," << row.snr_mode.mean_segsnr_out << ","
       << row.l1_mode.mean_segsnr_out << "," << row.delta_segsnr << ","
       << row.snr_mode.mean_snr_out << "," << row.l1_mode.mean_snr_out << ","
       << row.delta_snr << "\n";
    m_s_snr += row.snr_mode.mean_segsnr_out;
    m_s_l1 += row.l1_mode.mean_segsnr_out;
    m_g_snr += row.snr_mode.mean_snr_out;
    m_g_l1 += row.l1_mode.mean_snr_out;
  }
  const auto n = static_cast<double>(cmp.rows.size());
  os << "mean," << m_s_snr / n << "," << m_s_l1 / n << "," << cmp.mean_delta_segsnr
     << "," << m_g_snr / n << "," << m_g_l1 / n << "," << cmp.mean_delta_snr << "\n";
  return os.str();
}

inline nlohmann::json comparison_to_json(const PenaltyComparison& cmp) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : cmp.rows)
    rows.push_back({{"seed", row.seed},
                    {"snr_mode", report_to_json(row.snr_mode)},
                    {"l1_mode", report_to_json(row.l1_mode)},
                    {"delta_segsnr", row.delta_segsnr},
                    {"delta_snr", row.delta_snr}});
  return {{"rows", rows},
          {"mean_delta_segsnr", cmp.mean_delta_segsnr},
          {"mean_delta_snr", cmp.mean_delta_snr}};
}

}  // namespace tdcgan

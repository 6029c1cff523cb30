#pragma once

// Adversarial losses with critic regularization.
//
// Critic objective:   L_D = mean C(xhat, y) - mean C(x, y)  + penalties
// Generator objective: L_G = -mean C(xhat, y) + lambda * fidelity penalty
//
// Critic penalties are either the pair of zero-centered gradient-norm terms
// (on real and on enhanced candidates) or, alternatively, a unit-norm
// penalty at random interpolates; the two schemes are never combined.
// Fidelity is either a log-spectral-free SNR term or an L1 term.
//
// Every loss is an ordinary graph tensor, so the gradient-norm penalties are
// differentiated again during the critic update (double backward).

#include <cstdint>
#include <utility>

#include "tdcgan/models.hpp"
#include "tdcgan/tensor.hpp"

namespace tdcgan {

enum class PenaltyMode { kSnr, kL1 };
enum class CriticPenalty { kZeroCentered, kInterpolated };

struct LossWeights {
  double lambda_snr = 10.0;
  double lambda_l1 = 100.0;
  double gamma = 10.0;      // zero-centered penalty weight (each of the two terms)
  double lambda_gp = 10.0;  // interpolated penalty weight (alternative scheme)
  double snr_eps = 1e-8;
  PenaltyMode penalty_mode = PenaltyMode::kSnr;
  CriticPenalty critic_penalty = CriticPenalty::kZeroCentered;

  void validate() const {
    std::string bad;
    auto flag = [&](const std::string& m) { bad += (bad.empty() ? "" : "; ") + m; };
    if (lambda_snr < 0) flag("lambda_snr must be >= 0");
    if (lambda_l1 < 0) flag("lambda_l1 must be >= 0");
    if (gamma < 0) flag("gamma must be >= 0");
    if (lambda_gp < 0) flag("lambda_gp must be >= 0");
    if (snr_eps <= 0) flag("snr_eps must be > 0");
    if (!bad.empty()) throw ConfigError("LossWeights: " + bad);
  }
};

namespace detail {
template <typename T>
void require_batched_pair(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2)
    throw ShapeError(std::string(op) + ": want [B x L] waveforms, got " +
                     shape_str(a.shape()));
  require_same_shape(op, a, b);
}

// Fresh grad-requiring leaf carrying the same values; gradients taken at this
// point never flow into whatever produced `t`.
template <typename T>
Tensor<T> detached_probe(const Tensor<T>& t) {
  std::vector<T> vals(t.values().begin(), t.values().end());
  auto leaf = Tensor<T>::from(t.shape(), std::move(vals));
  leaf.set_requires_grad(true);
  return leaf;
}
}  // namespace detail

// Mean over the batch of -10*log10((||x||^2 + eps) / (||x - xhat||^2 + eps)).
// More negative is better; eps bounds the value when xhat == x.
template <typename T>
Tensor<T> snr_penalty(const Tensor<T>& clean, const Tensor<T>& enhanced,
                      T eps = T(1e-8)) {
  detail::require_batched_pair("snr_penalty", clean, enhanced);
  auto ex = add_scalar(reduce_length(square(clean)), eps);                 // [B]
  auto ed = add_scalar(reduce_length(square(sub(clean, enhanced))), eps);  // [B]
  return mean_all(scale(log10(div(ex, ed)), T(-10)));
}

// Sum of absolute errors, averaged over the batch only.
template <typename T>
Tensor<T> l1_penalty(const Tensor<T>& clean, const Tensor<T>& enhanced) {
  detail::require_batched_pair("l1_penalty", clean, enhanced);
  return scale(sum_all(abs(sub(enhanced, clean))),
               T(1) / static_cast<T>(clean.dim(0)));
}

// The lambda-scaled fidelity term selected by the weights.
template <typename T>
Tensor<T> generator_penalty(const Tensor<T>& clean, const Tensor<T>& enhanced,
                            const LossWeights& w) {
  if (w.penalty_mode == PenaltyMode::kSnr)
    return scale(snr_penalty(clean, enhanced, T(w.snr_eps)), T(w.lambda_snr));
  return scale(l1_penalty(clean, enhanced), T(w.lambda_l1));
}

// (gamma/2) * mean over batch of || d sum(C(cand, cond)) / d cand ||^2,
// evaluated at cand = candidate treated as a fresh point (no gradient flows
// into candidate's producer). Returned as a graph tensor differentiable in
// the critic parameters.
template <typename T, typename Critic>
Tensor<T> zero_centered_penalty(Critic&& critic, const Tensor<T>& candidate,
                                const Tensor<T>& conditioner, double gamma) {
  detail::require_batched_pair("zero_centered_penalty", candidate, conditioner);
  const std::int64_t B = candidate.dim(0);
  auto cand = detail::detached_probe(candidate);
  auto scores = critic(cand, conditioner);
  if (scores.rank() != 1 || scores.dim(0) != B)
    throw ShapeError("zero_centered_penalty: critic must map to [B] scores, got " +
                     shape_str(scores.shape()));
  auto gx = grad(sum_all(scores), {cand}, /*create_graph=*/true)[0];
  return scale(sum_all(square(gx)), T(gamma / 2.0 / static_cast<double>(B)));
}

// lambda_gp * mean over batch of (|| d C / d u || - 1)^2 at per-item random
// interpolates u = e*x + (1-e)*xhat, e ~ U[0,1).
template <typename T, typename Critic>
Tensor<T> interpolated_penalty(Critic&& critic, const Tensor<T>& clean,
                               const Tensor<T>& enhanced, const Tensor<T>& conditioner,
                               double lambda_gp, Rng& rng) {
  detail::require_batched_pair("interpolated_penalty", clean, enhanced);
  const std::int64_t B = clean.dim(0), L = clean.dim(1);
  std::vector<T> mix(static_cast<std::size_t>(B * L));
  auto cv = clean.values();
  auto ev = enhanced.values();
  for (std::int64_t b = 0; b < B; ++b) {
    const T e = static_cast<T>(rng.uniform());
    for (std::int64_t l = 0; l < L; ++l)
      mix[b * L + l] = e * cv[b * L + l] + (T(1) - e) * ev[b * L + l];
  }
  auto u = Tensor<T>::from(clean.shape(), std::move(mix));
  u.set_requires_grad(true);
  auto scores = critic(u, conditioner);
  auto gx = grad(sum_all(scores), {u}, /*create_graph=*/true)[0];
  auto norms = sqrt(reduce_length(square(gx)));  // [B]
  return scale(mean_all(square(add_scalar(norms, T(-1)))), T(lambda_gp));
}

template <typename T>
struct CriticLossTerms {
  Tensor<T> total;
  Tensor<T> base;      // mean fake score - mean real score
  Tensor<T> zc_real;   // zero-centered penalty at clean candidates
  Tensor<T> zc_fake;   // zero-centered penalty at enhanced candidates
  Tensor<T> interp;    // interpolated penalty (alternative scheme)
};

// Critic loss at fixed candidates. `enhanced` should be detached from the
// generator (produced under NoGradGuard); the penalties detach on their own.
template <typename T, typename Critic>
CriticLossTerms<T> critic_loss(Critic&& critic, const Tensor<T>& clean,
                               const Tensor<T>& enhanced, const Tensor<T>& noisy,
                               const LossWeights& w, Rng& rng) {
  w.validate();
  detail::require_batched_pair("critic_loss", clean, noisy);
  detail::require_batched_pair("critic_loss", enhanced, noisy);
  CriticLossTerms<T> out;
  auto real = critic(clean, noisy);
  auto fake = critic(enhanced, noisy);
  out.base = sub(mean_all(fake), mean_all(real));
  if (w.critic_penalty == CriticPenalty::kZeroCentered) {
    out.zc_real = zero_centered_penalty(critic, clean, noisy, w.gamma);
    out.zc_fake = zero_centered_penalty(critic, enhanced, noisy, w.gamma);
    out.total = add(out.base, add(out.zc_real, out.zc_fake));
  } else {
    out.interp = interpolated_penalty(critic, clean, enhanced, noisy, w.lambda_gp, rng);
    out.total = add(out.base, out.interp);
  }
  return out;
}

template <typename T>
struct GeneratorLossTerms {
  Tensor<T> total;
  Tensor<T> adversarial;  // -mean C(xhat, y)
  Tensor<T> penalty;      // lambda-scaled fidelity term
};

// Generator loss at an `enhanced` batch that carries the generator graph.
template <typename T, typename Critic>
GeneratorLossTerms<T> generator_loss(Critic&& critic, const Tensor<T>& clean,
                                     const Tensor<T>& enhanced, const Tensor<T>& noisy,
                                     const LossWeights& w) {
  w.validate();
  detail::require_batched_pair("generator_loss", clean, noisy);
  detail::require_batched_pair("generator_loss", enhanced, noisy);
  GeneratorLossTerms<T> out;
  out.adversarial = neg(mean_all(critic(enhanced, noisy)));
  out.penalty = generator_penalty(clean, enhanced, w);
  out.total = add(out.adversarial, out.penalty);
  return out;
}

// Model-level conveniences.
template <typename T>
CriticLossTerms<T> critic_loss(const Discriminator<T>& d, const Tensor<T>& clean,
                               const Tensor<T>& enhanced, const Tensor<T>& noisy,
                               const LossWeights& w, Rng& rng) {
  auto critic = [&d](const Tensor<T>& cand, const Tensor<T>& cond) {
    return d.forward(cand, cond);
  };
  return critic_loss<T>(critic, clean, enhanced, noisy, w, rng);
}

template <typename T>
GeneratorLossTerms<T> generator_loss(const Discriminator<T>& d, const Generator<T>& g,
                                     const Tensor<T>& clean, const Tensor<T>& noisy,
                                     const LossWeights& w) {
  auto critic = [&d](const Tensor<T>& cand, const Tensor<T>& cond) {
    return d.forward(cand, cond);
  };
  return generator_loss<T>(critic, clean, g.forward(noisy), noisy, w);
}

}  // namespace tdcgan

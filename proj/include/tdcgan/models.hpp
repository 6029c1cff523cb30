#pragma once

// Time-domain enhancement generator and conditional critic.
//
// Generator: strided conv encoder -> bottleneck (norm + 1x1) -> stacks of
// dilated depthwise-separable residual blocks -> ReLU mask head -> mask
// applied multiplicatively -> per-frame linear decoder + overlap-add.
//
// Critic: candidate and conditioning waveforms stacked as two channels,
// a pyramid of strided depthwise-separable conv layers, a 1x1 squeeze and a
// final affine map to one unbounded score per item.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tdcgan/tensor.hpp"

namespace tdcgan {

using ShapeLedger = std::vector<std::pair<std::string, Shape>>;

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void set_requires_grad(ParamList<T>& params, bool rg) {
  for (auto& p : params) p.tensor.set_requires_grad(rg);
}

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
std::int64_t param_count(const ParamList<T>& params, const std::string& prefix = "") {
  std::int64_t n = 0;
  for (const auto& p : params)
    if (prefix.empty() || p.name.rfind(prefix, 0) == 0) n += p.tensor.numel();
  return n;
}

namespace detail {

// He-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
Tensor<T> kaiming_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor<T>::uniform(std::move(shape), rng, -bound, bound, /*requires_grad=*/true);
}

template <typename T>
Tensor<T> zeros_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
}

template <typename T>
Tensor<T> const_param(Shape shape, T v) {
  return Tensor<T>::full(std::move(shape), v, /*requires_grad=*/true);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

enum class MaskWiring {
  kEncoderOutput,  // mask multiplies the raw encoder representation
  kBottleneck,     // mask multiplies the bottleneck representation
};

struct GeneratorConfig {
  std::int64_t frame_len = 16384;
  std::int64_t enc_channels = 512;
  std::int64_t enc_kernel = 32;
  std::int64_t enc_stride = 16;
  std::int64_t bottleneck_channels = 128;
  std::int64_t block_hidden = 512;
  std::int64_t block_kernel = 3;
  std::int64_t num_stacks = 4;       // mask-estimator stack repeats
  std::int64_t blocks_per_stack = 8; // dilations 1, 2, 4, ... within a stack
  double norm_eps = 1e-5;
  bool use_norm = true;              // normalization can be disabled for probes
  MaskWiring mask_wiring = MaskWiring::kEncoderOutput;

  std::int64_t n_frames() const {
    return (frame_len - enc_kernel) / enc_stride + 1;
  }
  std::int64_t mask_channels() const {
    return mask_wiring == MaskWiring::kEncoderOutput ? enc_channels : bottleneck_channels;
  }
  // Width, in mask-estimator frames, of the input region that can influence
  // one output frame: 1 + stacks * sum_m (K-1) * 2^m.
  std::int64_t receptive_field_frames() const {
    std::int64_t per_stack = 0;
    for (std::int64_t m = 0; m < blocks_per_stack; ++m)
      per_stack += (block_kernel - 1) * (std::int64_t(1) << m);
    return 1 + num_stacks * per_stack;
  }
  std::int64_t receptive_field_samples() const {
    return (receptive_field_frames() - 1) * enc_stride + enc_kernel;
  }

  void validate() const {
    std::string bad;
    auto flag = [&](const std::string& msg) { bad += (bad.empty() ? "" : "; ") + msg; };
    if (frame_len < 1) flag("frame_len must be >= 1");
    if (enc_channels < 1) flag("enc_channels must be >= 1");
    if (enc_kernel < 1) flag("enc_kernel must be >= 1");
    if (enc_stride < 1) flag("enc_stride must be >= 1");
    if (bottleneck_channels < 1) flag("bottleneck_channels must be >= 1");
    if (block_hidden < 1) flag("block_hidden must be >= 1");
    if (num_stacks < 1) flag("num_stacks must be >= 1");
    if (blocks_per_stack < 1) flag("blocks_per_stack must be >= 1");
    if (block_kernel < 1 || block_kernel % 2 == 0)
      flag("block_kernel must be odd (symmetric padding)");
    if (norm_eps <= 0) flag("norm_eps must be > 0");
    if (frame_len < enc_kernel) flag("frame_len must be >= enc_kernel");
    else if ((frame_len - enc_kernel) % enc_stride != 0)
      flag("frame_len - enc_kernel must be a multiple of enc_stride");
    if (!bad.empty()) throw ConfigError("GeneratorConfig: " + bad);
  }
};

// Optional capture of intermediate activations for tests and probes.
template <typename T>
struct GeneratorTrace {
  Tensor<T> encoder_out;
  Tensor<T> bottleneck_out;
  Tensor<T> mask;
  Tensor<T> masked;
  Tensor<T> decoder_frames;
};

template <typename T>
struct NormParams {
  Tensor<T> gain, shift;
};

template <typename T>
struct DilatedBlock {
  std::int64_t dilation = 1;
  Tensor<T> in_w, in_b;    // 1x1: bottleneck -> hidden
  NormParams<T> norm1;
  Tensor<T> alpha1;
  Tensor<T> dw_w, dw_b;    // depthwise, dilated, symmetric padding
  NormParams<T> norm2;
  Tensor<T> alpha2;
  Tensor<T> out_w, out_b;  // 1x1: hidden -> bottleneck

  Tensor<T> forward(const Tensor<T>& x, const GeneratorConfig& cfg) const {
    auto h = conv1d(x, in_w, in_b);
    if (cfg.use_norm) h = instance_norm(h, norm1.gain, norm1.shift, T(cfg.norm_eps));
    h = prelu(h, alpha1);
    const std::int64_t pad = dilation * (cfg.block_kernel - 1) / 2;
    h = conv1d(h, dw_w, dw_b, 1, dilation, pad, cfg.block_hidden);
    if (cfg.use_norm) h = instance_norm(h, norm2.gain, norm2.shift, T(cfg.norm_eps));
    h = prelu(h, alpha2);
    h = conv1d(h, out_w, out_b);
    return add(x, h);
  }
};

template <typename T>
struct Generator {
  GeneratorConfig cfg;
  Tensor<T> enc_w, enc_b;
  NormParams<T> bottleneck_norm;
  Tensor<T> bottleneck_w, bottleneck_b;
  std::vector<std::vector<DilatedBlock<T>>> stacks;
  Tensor<T> mask_w, mask_b;
  Tensor<T> dec_w, dec_b;

  Tensor<T> forward(const Tensor<T>& noisy, ShapeLedger* ledger = nullptr,
                    GeneratorTrace<T>* trace = nullptr) const {
    if (noisy.rank() != 2 || noisy.dim(1) != cfg.frame_len)
      throw ShapeError("Generator::forward: want [B x " + std::to_string(cfg.frame_len) +
                       "], got " + shape_str(noisy.shape()));
    const std::int64_t B = noisy.dim(0);
    auto log = [&](const std::string& name, const Tensor<T>& t) {
      if (ledger) ledger->emplace_back(name, t.shape());
    };
    auto x = reshape(noisy, {B, 1, cfg.frame_len});
    log("input", noisy);
    auto ir = conv1d(x, enc_w, enc_b, cfg.enc_stride);
    log("encoder", ir);
    auto h = cfg.use_norm
                 ? instance_norm(ir, bottleneck_norm.gain, bottleneck_norm.shift,
                                 T(cfg.norm_eps))
                 : ir;
    auto bott = conv1d(h, bottleneck_w, bottleneck_b);
    log("bottleneck", bott);
    h = bott;
    for (std::size_t s = 0; s < stacks.size(); ++s)
      for (std::size_t m = 0; m < stacks[s].size(); ++m) {
        h = stacks[s][m].forward(h, cfg);
        log("stack" + std::to_string(s + 1) + ".block" + std::to_string(m + 1), h);
      }
    auto mask = relu(conv1d(h, mask_w, mask_b));
    log("mask", mask);
    const auto& base = cfg.mask_wiring == MaskWiring::kEncoderOutput ? ir : bott;
    auto masked = mul(mask, base);
    log("masked", masked);
    auto frames = conv1d(masked, dec_w, dec_b);
    log("decoder_frames", frames);
    auto out = overlap_add(frames, cfg.enc_stride);
    log("output", out);
    if (trace) {
      trace->encoder_out = ir;
      trace->bottleneck_out = bott;
      trace->mask = mask;
      trace->masked = masked;
      trace->decoder_frames = frames;
    }
    return out;
  }

  ParamList<T> parameters() const {
    ParamList<T> ps;
    ps.push_back({"enc.w", enc_w});
    ps.push_back({"enc.b", enc_b});
    ps.push_back({"bottleneck.norm.gain", bottleneck_norm.gain});
    ps.push_back({"bottleneck.norm.shift", bottleneck_norm.shift});
    ps.push_back({"bottleneck.w", bottleneck_w});
    ps.push_back({"bottleneck.b", bottleneck_b});
    for (std::size_t s = 0; s < stacks.size(); ++s)
      for (std::size_t m = 0; m < stacks[s].size(); ++m) {
        const auto& blk = stacks[s][m];
        std::string base =
            "stack" + std::to_string(s + 1) + ".block" + std::to_string(m + 1) + ".";
        ps.push_back({base + "in.w", blk.in_w});
        ps.push_back({base + "in.b", blk.in_b});
        ps.push_back({base + "norm1.gain", blk.norm1.gain});
        ps.push_back({base + "norm1.shift", blk.norm1.shift});
        ps.push_back({base + "alpha1", blk.alpha1});
        ps.push_back({base + "dw.w", blk.dw_w});
        ps.push_back({base + "dw.b", blk.dw_b});
        ps.push_back({base + "norm2.gain", blk.norm2.gain});
        ps.push_back({base + "norm2.shift", blk.norm2.shift});
        ps.push_back({base + "alpha2", blk.alpha2});
        ps.push_back({base + "out.w", blk.out_w});
        ps.push_back({base + "out.b", blk.out_b});
      }
    ps.push_back({"mask.w", mask_w});
    ps.push_back({"mask.b", mask_b});
    ps.push_back({"dec.w", dec_w});
    ps.push_back({"dec.b", dec_b});
    return ps;
  }
};

template <typename T>
Generator<T> build_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Generator<T> g;
  g.cfg = cfg;
  g.enc_w = detail::kaiming_uniform<T>({cfg.enc_channels, 1, cfg.enc_kernel},
                                       cfg.enc_kernel, rng);
  g.enc_b = detail::zeros_param<T>({cfg.enc_channels});
  g.bottleneck_norm.gain = detail::const_param<T>({cfg.enc_channels}, T(1));
  g.bottleneck_norm.shift = detail::zeros_param<T>({cfg.enc_channels});
  g.bottleneck_w = detail::kaiming_uniform<T>(
      {cfg.bottleneck_channels, cfg.enc_channels, 1}, cfg.enc_channels, rng);
  g.bottleneck_b = detail::zeros_param<T>({cfg.bottleneck_channels});
  g.stacks.resize(cfg.num_stacks);
  for (std::int64_t s = 0; s < cfg.num_stacks; ++s) {
    auto& stack = g.stacks[s];
    stack.resize(cfg.blocks_per_stack);
    for (std::int64_t m = 0; m < cfg.blocks_per_stack; ++m) {
      auto& blk = stack[m];
      blk.dilation = std::int64_t(1) << m;
      blk.in_w = detail::kaiming_uniform<T>(
          {cfg.block_hidden, cfg.bottleneck_channels, 1}, cfg.bottleneck_channels, rng);
      blk.in_b = detail::zeros_param<T>({cfg.block_hidden});
      blk.norm1.gain = detail::const_param<T>({cfg.block_hidden}, T(1));
      blk.norm1.shift = detail::zeros_param<T>({cfg.block_hidden});
      blk.alpha1 = detail::const_param<T>({cfg.block_hidden}, T(0.25));
      blk.dw_w = detail::kaiming_uniform<T>({cfg.block_hidden, 1, cfg.block_kernel},
                                            cfg.block_kernel, rng);
      blk.dw_b = detail::zeros_param<T>({cfg.block_hidden});
      blk.norm2.gain = detail::const_param<T>({cfg.block_hidden}, T(1));
      blk.norm2.shift = detail::zeros_param<T>({cfg.block_hidden});
      blk.alpha2 = detail::const_param<T>({cfg.block_hidden}, T(0.25));
      blk.out_w = detail::kaiming_uniform<T>(
          {cfg.bottleneck_channels, cfg.block_hidden, 1}, cfg.block_hidden, rng);
      blk.out_b = detail::zeros_param<T>({cfg.bottleneck_channels});
    }
  }
  g.mask_w = detail::kaiming_uniform<T>(
      {cfg.mask_channels(), cfg.bottleneck_channels, 1}, cfg.bottleneck_channels, rng);
  g.mask_b = detail::zeros_param<T>({cfg.mask_channels()});
  // The decoder starts at zero so the generator opens at exact silence with the
  // ReLU masks still live. A random decoder makes the early fidelity gradient
  // favor shrinking the output, which saturates the masks at zero and leaves
  // the whole network without gradient; zeroing only the final linear layer
  // removes that failure mode while keeping every shape and count identical.
  g.dec_w = detail::zeros_param<T>({cfg.enc_kernel, cfg.mask_channels(), 1});
  g.dec_b = detail::zeros_param<T>({cfg.enc_kernel});
  return g;
}

// ---------------------------------------------------------------------------
// Discriminator (conditional critic)
// ---------------------------------------------------------------------------

struct DiscriminatorConfig {
  std::int64_t frame_len = 16384;
  std::vector<std::int64_t> channels{16, 32, 32, 64, 128, 128, 256, 512, 1024};
  std::int64_t kernel = 3;
  std::int64_t stride = 2;
  double norm_eps = 1e-5;
  bool use_norm = true;
  std::int64_t width_divisor = 1;  // scales channel counts down for small builds

  std::vector<std::int64_t> scaled_channels() const {
    std::vector<std::int64_t> out;
    out.reserve(channels.size());
    for (auto c : channels) out.push_back(std::max<std::int64_t>(1, c / width_divisor));
    return out;
  }

  // Length after the strided pyramid; this is the final affine layer's fan-in.
  std::int64_t final_len() const {
    std::int64_t L = frame_len;
    ConvMeta m{stride, 1, (kernel - 1) / 2, 1};
    for (std::size_t i = 0; i < channels.size(); ++i) L = conv_out_len(L, kernel, m);
    return L;
  }

  void validate() const {
    std::string bad;
    auto flag = [&](const std::string& msg) { bad += (bad.empty() ? "" : "; ") + msg; };
    if (frame_len < 1) flag("frame_len must be >= 1");
    if (channels.empty()) flag("channels must be non-empty");
    for (auto c : channels)
      if (c < 1) {
        flag("channels must all be >= 1");
        break;
      }
    if (kernel < 1 || kernel % 2 == 0) flag("kernel must be odd (symmetric padding)");
    if (stride < 1) flag("stride must be >= 1");
    if (norm_eps <= 0) flag("norm_eps must be > 0");
    if (width_divisor < 1) flag("width_divisor must be >= 1");
    {
      std::int64_t L = frame_len;
      ConvMeta m{stride, 1, (kernel - 1) / 2, 1};
      for (std::size_t i = 0; i < channels.size(); ++i) {
        L = conv_out_len(L, kernel, m);
        if (L < 1) {
          flag("frame_len too short for " + std::to_string(channels.size()) +
               " strided layers");
          break;
        }
      }
    }
    if (!bad.empty()) throw ConfigError("DiscriminatorConfig: " + bad);
  }
};

template <typename T>
struct DscLayer {
  Tensor<T> dw_w, dw_b;  // depthwise, strided
  Tensor<T> pw_w, pw_b;  // pointwise 1x1
  NormParams<T> norm;
  Tensor<T> alpha;
};

template <typename T>
struct Discriminator {
  DiscriminatorConfig cfg;
  std::vector<DscLayer<T>> layers;
  Tensor<T> post_w, post_b;  // 1x1 squeeze to one channel
  Tensor<T> fin_w, fin_b;    // affine map over remaining frames -> score

  // Unbounded score per item; candidate is the waveform being judged,
  // conditioner the noisy input it should correspond to.
  Tensor<T> forward(const Tensor<T>& candidate, const Tensor<T>& conditioner,
                    ShapeLedger* ledger = nullptr) const {
    if (candidate.rank() != 2 || candidate.dim(1) != cfg.frame_len)
      throw ShapeError("Discriminator::forward: want [B x " +
                       std::to_string(cfg.frame_len) + "], got " +
                       shape_str(candidate.shape()));
    detail::require_same_shape("Discriminator::forward", candidate, conditioner);
    auto log = [&](const std::string& name, const Tensor<T>& t) {
      if (ledger) ledger->emplace_back(name, t.shape());
    };
    auto h = stack_channels(candidate, conditioner);
    log("stack", h);
    const std::int64_t pad = (cfg.kernel - 1) / 2;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& ly = layers[i];
      const std::int64_t cin = h.dim(1);
      h = conv1d(h, ly.dw_w, ly.dw_b, cfg.stride, 1, pad, cin);
      h = conv1d(h, ly.pw_w, ly.pw_b);
      if (cfg.use_norm) h = instance_norm(h, ly.norm.gain, ly.norm.shift, T(cfg.norm_eps));
      h = prelu(h, ly.alpha);
      log("dsc" + std::to_string(i + 1), h);
    }
    h = conv1d(h, post_w, post_b);
    log("squeeze", h);
    const std::int64_t B = h.dim(0), Lf = h.dim(2);
    auto flat = reshape(h, {B, Lf});
    auto score = linear(flat, fin_w, fin_b);
    log("score", score);
    return reshape(score, {B});
  }

  ParamList<T> parameters() const {
    ParamList<T> ps;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& ly = layers[i];
      std::string base = "dsc" + std::to_string(i + 1) + ".";
      ps.push_back({base + "dw.w", ly.dw_w});
      ps.push_back({base + "dw.b", ly.dw_b});
      ps.push_back({base + "pw.w", ly.pw_w});
      ps.push_back({base + "pw.b", ly.pw_b});
      ps.push_back({base + "norm.gain", ly.norm.gain});
      ps.push_back({base + "norm.shift", ly.norm.shift});
      ps.push_back({base + "alpha", ly.alpha});
    }
    ps.push_back({"post.w", post_w});
    ps.push_back({"post.b", post_b});
    ps.push_back({"fin.w", fin_w});
    ps.push_back({"fin.b", fin_b});
    return ps;
  }
};

template <typename T>
Discriminator<T> build_discriminator(const DiscriminatorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Discriminator<T> d;
  d.cfg = cfg;
  const auto chans = cfg.scaled_channels();
  std::int64_t cin = 2;
  for (auto cout : chans) {
    DscLayer<T> ly;
    ly.dw_w = detail::kaiming_uniform<T>({cin, 1, cfg.kernel}, cfg.kernel, rng);
    ly.dw_b = detail::zeros_param<T>({cin});
    ly.pw_w = detail::kaiming_uniform<T>({cout, cin, 1}, cin, rng);
    ly.pw_b = detail::zeros_param<T>({cout});
    ly.norm.gain = detail::const_param<T>({cout}, T(1));
    ly.norm.shift = detail::zeros_param<T>({cout});
    ly.alpha = detail::const_param<T>({cout}, T(0.25));
    d.layers.push_back(std::move(ly));
    cin = cout;
  }
  d.post_w = detail::kaiming_uniform<T>({1, cin, 1}, cin, rng);
  d.post_b = detail::zeros_param<T>({1});
  const std::int64_t Lf = cfg.final_len();
  d.fin_w = detail::kaiming_uniform<T>({1, Lf}, Lf, rng);
  d.fin_b = detail::zeros_param<T>({1});
  return d;
}

}  // namespace tdcgan

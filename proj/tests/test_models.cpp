#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <set>

#include "tdcgan/models.hpp"

using namespace tdcgan;
using Catch::Approx;

namespace {

GeneratorConfig tiny_gen_cfg() {
  GeneratorConfig cfg;
  cfg.frame_len = 512;
  cfg.enc_channels = 16;
  cfg.enc_kernel = 32;
  cfg.enc_stride = 16;
  cfg.bottleneck_channels = 8;
  cfg.block_hidden = 12;
  cfg.block_kernel = 3;
  cfg.num_stacks = 1;
  cfg.blocks_per_stack = 3;
  return cfg;
}

DiscriminatorConfig tiny_disc_cfg() {
  DiscriminatorConfig cfg;
  cfg.frame_len = 512;
  cfg.width_divisor = 32;
  return cfg;
}

// Left inverse of a tall column-major-free matrix a (rows x cols, rows >= cols)
// via normal equations and Gaussian elimination: returns pinv (cols x rows).
std::vector<std::vector<double>> left_pinv(const std::vector<std::vector<double>>& a) {
  const std::size_t rows = a.size(), cols = a[0].size();
  // m = a^T a (cols x cols), rhs = a^T (cols x rows)
  std::vector<std::vector<double>> m(cols, std::vector<double>(cols, 0.0));
  std::vector<std::vector<double>> rhs(cols, std::vector<double>(rows, 0.0));
  for (std::size_t i = 0; i < cols; ++i) {
    for (std::size_t j = 0; j < cols; ++j)
      for (std::size_t r = 0; r < rows; ++r) m[i][j] += a[r][i] * a[r][j];
    for (std::size_t r = 0; r < rows; ++r) rhs[i][r] = a[r][i];
  }
  for (std::size_t k = 0; k < cols; ++k) {  // partial pivoting
    std::size_t piv = k;
    for (std::size_t r = k + 1; r < cols; ++r)
      if (std::abs(m[r][k]) > std::abs(m[piv][k])) piv = r;
    std::swap(m[k], m[piv]);
    std::swap(rhs[k], rhs[piv]);
    for (std::size_t r = 0; r < cols; ++r) {
      if (r == k) continue;
      const double f = m[r][k] / m[k][k];
      for (std::size_t c = k; c < cols; ++c) m[r][c] -= f * m[k][c];
      for (std::size_t c = 0; c < rows; ++c) rhs[r][c] -= f * rhs[k][c];
    }
  }
  for (std::size_t k = 0; k < cols; ++k)
    for (std::size_t c = 0; c < rows; ++c) rhs[k][c] /= m[k][k];
  return rhs;
}

}  // namespace

TEST_CASE("parameter counts at reference configuration") {
  auto g = build_generator<float>(GeneratorConfig{}, 1);
  auto d = build_discriminator<float>(DiscriminatorConfig{}, 2);
  const auto gp = g.parameters();
  const auto dp = d.parameters();
  CHECK(param_count(gp) == 4544672);
  CHECK(param_count(dp) == 730826);
  const std::int64_t total = param_count(gp) + param_count(dp);
  CHECK(total == 5275498);
  CHECK(std::abs(static_cast<double>(total) / 5.12e6 - 1.0) <= 0.10);
  // per-submodule spot checks
  CHECK(param_count(gp, "enc.") == 512 * 32 + 512);
  CHECK(param_count(gp, "stack1.block1.") == 136832);
  CHECK(param_count(gp, "dec.") == 32 * 512 + 32);
  CHECK(param_count(dp, "dsc9.") == 530432);
  CHECK(param_count(dp, "fin.") == 33);
}

TEST_CASE("generator geometry at reference configuration") {
  GeneratorConfig cfg;
  CHECK(cfg.n_frames() == 1023);
  CHECK(cfg.receptive_field_frames() == 2041);
  CHECK(cfg.receptive_field_samples() == 32672);
  DiscriminatorConfig dcfg;
  CHECK(dcfg.final_len() == 32);
  dcfg.frame_len = 4096;
  CHECK(dcfg.final_len() == 8);
}

TEST_CASE("tiny generator forward shapes and ledger") {
  auto cfg = tiny_gen_cfg();
  auto g = build_generator<float>(cfg, 3);
  Rng rng(4);
  auto x = Tensor<float>::uniform({2, cfg.frame_len}, rng, -1, 1);
  ShapeLedger ledger;
  NoGradGuard ng;
  auto y = g.forward(x, &ledger);
  CHECK(y.shape() == Shape{2, cfg.frame_len});
  const std::int64_t F = cfg.n_frames();
  REQUIRE(F == 31);
  bool saw_encoder = false, saw_mask = false, saw_frames = false;
  for (const auto& [name, shape] : ledger) {
    if (name == "encoder") {
      saw_encoder = true;
      CHECK(shape == Shape{2, cfg.enc_channels, F});
    } else if (name == "mask") {
      saw_mask = true;
      CHECK(shape == Shape{2, cfg.enc_channels, F});
    } else if (name == "decoder_frames") {
      saw_frames = true;
      CHECK(shape == Shape{2, cfg.enc_kernel, F});
    }
  }
  CHECK(saw_encoder);
  CHECK(saw_mask);
  CHECK(saw_frames);
  // one ledger row per stage: in, enc, bottleneck, blocks, mask, masked, frames, out
  CHECK(ledger.size() == 7 + static_cast<std::size_t>(cfg.num_stacks * cfg.blocks_per_stack));
  CHECK(all_finite(y));
  CHECK_THROWS_AS(g.forward(Tensor<float>::zeros({2, 100})), ShapeError);
}

TEST_CASE("bottleneck mask wiring is supported") {
  auto cfg = tiny_gen_cfg();
  cfg.mask_wiring = MaskWiring::kBottleneck;
  auto g = build_generator<float>(cfg, 5);
  CHECK(g.mask_w.shape() == Shape{cfg.bottleneck_channels, cfg.bottleneck_channels, 1});
  CHECK(g.dec_w.shape() == Shape{cfg.enc_kernel, cfg.bottleneck_channels, 1});
  Rng rng(6);
  auto x = Tensor<float>::uniform({1, cfg.frame_len}, rng, -1, 1);
  ShapeLedger ledger;
  NoGradGuard ng;
  auto y = g.forward(x, &ledger);
  CHECK(y.shape() == Shape{1, cfg.frame_len});
  for (const auto& [name, shape] : ledger)
    if (name == "mask") CHECK(shape == Shape{1, cfg.bottleneck_channels, cfg.n_frames()});
}

TEST_CASE("identity-mask autoencoder construction reconstructs its input") {
  GeneratorConfig cfg;
  cfg.frame_len = 1024;
  cfg.enc_channels = 64;
  cfg.enc_kernel = 32;
  cfg.enc_stride = 16;
  cfg.bottleneck_channels = 8;
  cfg.block_hidden = 8;
  cfg.num_stacks = 1;
  cfg.blocks_per_stack = 2;
  auto g = build_generator<double>(cfg, 7);

  // force mask == 1: zero weights, unit bias, relu(1) = 1
  std::fill(g.mask_w.values().begin(), g.mask_w.values().end(), 0.0);
  std::fill(g.mask_b.values().begin(), g.mask_b.values().end(), 1.0);

  // decoder = half the left pseudo-inverse of the encoder basis; interior
  // samples are covered by exactly two frames, so overlap-add restores x
  std::vector<std::vector<double>> a(64, std::vector<double>(32));
  for (int r = 0; r < 64; ++r)
    for (int c = 0; c < 32; ++c) a[r][c] = g.enc_w.values()[r * 32 + c];
  auto pinv = left_pinv(a);  // 32 x 64
  for (int k = 0; k < 32; ++k)
    for (int c = 0; c < 64; ++c) g.dec_w.values()[k * 64 + c] = 0.5 * pinv[k][c];
  std::fill(g.dec_b.values().begin(), g.dec_b.values().end(), 0.0);

  Rng rng(8);
  auto x = Tensor<double>::uniform({1, cfg.frame_len}, rng, -1, 1);
  // zero the frame-coverage ramp at both edges so halving there is exact
  for (int i = 0; i < 16; ++i) {
    x.values()[i] = 0.0;
    x.values()[cfg.frame_len - 1 - i] = 0.0;
  }
  NoGradGuard ng;
  auto y = g.forward(x);
  double worst = 0.0;
  for (std::int64_t i = 0; i < cfg.frame_len; ++i)
    worst = std::max(worst, std::abs(y.values()[i] - x.values()[i]));
  CHECK(worst < 1e-3);
}

TEST_CASE("empirical receptive field matches the closed form") {
  GeneratorConfig cfg;
  cfg.frame_len = 2048;
  cfg.enc_channels = 12;
  cfg.enc_kernel = 32;
  cfg.enc_stride = 16;
  cfg.bottleneck_channels = 6;
  cfg.block_hidden = 8;
  cfg.num_stacks = 1;
  cfg.blocks_per_stack = 3;
  cfg.use_norm = false;  // normalization is global over frames; disable for locality
  REQUIRE(cfg.receptive_field_frames() == 15);
  auto g = build_generator<double>(cfg, 9);
  // unit prelu slopes make the network affine, so difference propagation is exact
  for (auto& stack : g.stacks)
    for (auto& blk : stack) {
      std::fill(blk.alpha1.values().begin(), blk.alpha1.values().end(), 1.0);
      std::fill(blk.alpha2.values().begin(), blk.alpha2.values().end(), 1.0);
    }
  // the zero-initialized decoder would erase the support entirely; give it a
  // dense value so propagation reaches the output samples
  Rng dec_rng(11);
  for (auto& v : g.dec_w.values()) v = dec_rng.uniform() * 0.2 + 0.05;

  Rng rng(10);
  auto x0 = Tensor<double>::uniform({1, cfg.frame_len}, rng, -1, 1);
  auto x1 = Tensor<double>::from(x0.shape(),
                                 {x0.values().begin(), x0.values().end()});
  const std::int64_t hit = 1024;
  x1.values()[hit] += 1.0;

  NoGradGuard ng;
  GeneratorTrace<double> t0, t1;
  auto y0 = g.forward(x0, nullptr, &t0);
  auto y1 = g.forward(x1, nullptr, &t1);

  const std::int64_t F = cfg.n_frames();
  auto affected_frames = [&](const Tensor<double>& a, const Tensor<double>& b) {
    std::int64_t lo = F, hi = -1;
    const std::int64_t C = a.dim(1);
    for (std::int64_t l = 0; l < F; ++l)
      for (std::int64_t c = 0; c < C; ++c)
        if (std::abs(a.values()[c * F + l] - b.values()[c * F + l]) > 1e-14) {
          lo = std::min(lo, l);
          hi = std::max(hi, l);
          break;
        }
    return std::pair{lo, hi};
  };
  auto [e_lo, e_hi] = affected_frames(t0.encoder_out, t1.encoder_out);
  const std::int64_t n_enc = e_hi - e_lo + 1;
  CHECK(n_enc == 2);  // kernel 32, stride 16: every sample feeds two frames

  auto [m_lo, m_hi] = affected_frames(t0.masked, t1.masked);
  const std::int64_t spread = m_hi - m_lo + 1;
  CHECK(spread == n_enc + cfg.receptive_field_frames() - 1);
  CHECK(m_lo == e_lo - (cfg.receptive_field_frames() - 1) / 2);
  CHECK(m_hi == e_hi + (cfg.receptive_field_frames() - 1) / 2);

  // output-sample support implied by the affected frame range
  std::int64_t s_lo = cfg.frame_len, s_hi = -1;
  for (std::int64_t i = 0; i < cfg.frame_len; ++i)
    if (std::abs(y0.values()[i] - y1.values()[i]) > 1e-14) {
      s_lo = std::min(s_lo, i);
      s_hi = std::max(s_hi, i);
    }
  CHECK(s_lo == m_lo * cfg.enc_stride);
  CHECK(s_hi == m_hi * cfg.enc_stride + cfg.enc_kernel - 1);
  CHECK(s_hi - s_lo + 1 ==
        cfg.receptive_field_samples() + (n_enc - 1) * cfg.enc_stride);
}

TEST_CASE("builds are deterministic in the seed") {
  auto g1 = build_generator<float>(tiny_gen_cfg(), 42);
  auto g2 = build_generator<float>(tiny_gen_cfg(), 42);
  auto g3 = build_generator<float>(tiny_gen_cfg(), 43);
  auto p1 = g1.parameters(), p2 = g2.parameters(), p3 = g3.parameters();
  REQUIRE(p1.size() == p2.size());
  bool all_same = true, any_diff_seed = false;
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].name == p2[i].name);
    auto a = p1[i].tensor.values(), b = p2[i].tensor.values(), c = p3[i].tensor.values();
    for (std::size_t j = 0; j < a.size(); ++j) {
      all_same = all_same && a[j] == b[j];
      any_diff_seed = any_diff_seed || a[j] != c[j];
    }
  }
  CHECK(all_same);
  CHECK(any_diff_seed);
}

TEST_CASE("config validation rejects bad fields") {
  GeneratorConfig g;
  g.frame_len = 16383;  // not stride-aligned past the kernel
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = GeneratorConfig{};
  g.block_kernel = 2;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g = GeneratorConfig{};
  g.frame_len = 16;  // shorter than the encoder kernel
  CHECK_THROWS_AS(g.validate(), ConfigError);
  DiscriminatorConfig d;
  d.channels.clear();
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = DiscriminatorConfig{};
  d.frame_len = 0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  d = DiscriminatorConfig{};
  d.width_divisor = 0;
  CHECK_THROWS_AS(d.validate(), ConfigError);
  CHECK_THROWS_AS(build_generator<float>(g, 1), ConfigError);
}

TEST_CASE("critic produces unbounded per-item scores") {
  auto cfg = tiny_disc_cfg();
  auto d = build_discriminator<float>(cfg, 11);
  ShapeLedger ledger;
  Rng rng(12);
  auto cand = Tensor<float>::uniform({3, cfg.frame_len}, rng, -1, 1);
  auto cond = Tensor<float>::uniform({3, cfg.frame_len}, rng, -1, 1);
  NoGradGuard ng;
  auto s = d.forward(cand, cond, &ledger);
  CHECK(s.shape() == Shape{3});
  CHECK(all_finite(s));
  CHECK(ledger.front().first == "stack");
  CHECK(ledger.front().second == Shape{3, 2, cfg.frame_len});
  // scores live outside [0,1]: zero the head weight, push the bias out
  std::fill(d.fin_w.values().begin(), d.fin_w.values().end(), 0.f);
  d.fin_b.values()[0] = 42.f;
  auto s2 = d.forward(cand, cond);
  for (int i = 0; i < 3; ++i) CHECK(s2.values()[i] == 42.f);
  CHECK_THROWS_AS(d.forward(cand, Tensor<float>::zeros({3, 2 * cfg.frame_len})),
                  ShapeError);
}

TEST_CASE("gradients reach the parameters of both models") {
  auto g = build_generator<float>(tiny_gen_cfg(), 13);
  auto d = build_discriminator<float>(tiny_disc_cfg(), 14);
  // the decoder initializes at zero, which would block upstream signal; this
  // test probes graph connectivity, so move it off that point first
  for (auto& v : g.dec_w.values()) v = 0.05f;
  Rng rng(15);
  auto x = Tensor<float>::uniform({2, 512}, rng, -1, 1);
  auto y = g.forward(x);
  auto s = d.forward(y, x);
  backward(add(mean_all(square(s)), scale(mean_all(square(y)), 0.1f)));
  std::size_t g_nonzero = 0, g_total = 0;
  for (const auto& p : g.parameters()) {
    REQUIRE(p.tensor.grad().defined());
    ++g_total;
    for (float v : p.tensor.grad().values())
      if (v != 0.f) {
        ++g_nonzero;
        break;
      }
  }
  CHECK(g_nonzero == g_total);  // every generator tensor gets signal
  for (const auto& p : d.parameters()) {
    REQUIRE(p.tensor.grad().defined());
  }
}

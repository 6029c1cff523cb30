#pragma once

// Adam with decoupled first/second moment decay and bias correction.
// eps sits outside the square root. Parameters whose grad buffer is
// undefined (never touched by backward) are skipped entirely.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tdcgan/models.hpp"
#include "tdcgan/tensor.hpp"

namespace tdcgan {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.9;
  double eps = 1e-8;

  void validate() const {
    std::string bad;
    auto flag = [&](const std::string& m) { bad += (bad.empty() ? "" : "; ") + m; };
    if (!(lr > 0)) flag("lr must be > 0");
    if (beta1 < 0 || beta1 >= 1) flag("beta1 must lie in [0, 1)");
    if (beta2 < 0 || beta2 >= 1) flag("beta2 must lie in [0, 1)");
    if (!(eps > 0)) flag("eps must be > 0");
    if (!bad.empty()) throw ConfigError("AdamConfig: " + bad);
  }
};

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig cfg) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.push_back(Tensor<T>::zeros(p.tensor.shape()));
      v_.push_back(Tensor<T>::zeros(p.tensor.shape()));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    ++t_;
    const T c1 = T(1) - static_cast<T>(std::pow(cfg_.beta1, static_cast<double>(t_)));
    const T c2 = T(1) - static_cast<T>(std::pow(cfg_.beta2, static_cast<double>(t_)));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T lr = static_cast<T>(cfg_.lr), eps = static_cast<T>(cfg_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto grad = params_[i].tensor.grad();
      if (!grad.defined()) continue;
      auto g = grad.values();
      auto p = params_[i].tensor.values();
      auto m = m_[i].values();
      auto v = v_[i].values();
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps);
      }
    }
  }

  std::int64_t step_count() const { return t_; }
  void set_step_count(std::int64_t t) { t_ = t; }
  const AdamConfig& config() const { return cfg_; }
  ParamList<T>& params() { return params_; }

  // Moment tensors, named for checkpointing.
  ParamList<T> state_tensors() {
    ParamList<T> out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
      out.push_back({"m." + params_[i].name, m_[i]});
      out.push_back({"v." + params_[i].name, v_[i]});
    }
    return out;
  }

 private:
  AdamConfig cfg_;
  ParamList<T> params_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace tdcgan

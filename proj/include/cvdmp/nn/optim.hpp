#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cvdmp/error.hpp"
#include "cvdmp/nn/tensor.hpp"

namespace cvdmp::nn {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer over a fixed list of parameter blocks. Frozen
/// blocks are skipped entirely and stay bit-identical.
class Adam {
 public:
  Adam() = default;
  Adam(AdamConfig cfg, std::span<const Tensor* const> params, std::vector<std::string> names = {})
      : cfg_(cfg), names_(std::move(names)) {
    for (const Tensor* p : params) {
      m_.emplace_back(p->shape());
      v_.emplace_back(p->shape());
    }
    frozen_.assign(m_.size(), false);
    if (names_.size() != m_.size()) {
      names_.clear();
      for (std::size_t i = 0; i < m_.size(); ++i) names_.push_back("block " + std::to_string(i));
    }
  }
  Adam(AdamConfig cfg, std::span<Tensor* const> params, std::vector<std::string> names = {})
      : Adam(cfg, std::vector<const Tensor*>(params.begin(), params.end()), std::move(names)) {}
  Adam(AdamConfig cfg, const std::vector<const Tensor*>& params, std::vector<std::string> names)
      : Adam(cfg, std::span<const Tensor* const>(params), std::move(names)) {}

  void freeze(std::size_t block, bool frozen = true) { frozen_.at(block) = frozen; }
  /// Clears the moment estimates and the step counter.
  void reset_moments() {
    for (auto& m : m_) m.fill(0.0);
    for (auto& v : v_) v.fill(0.0);
    t_ = 0;
  }
  bool frozen(std::size_t block) const { return frozen_.at(block); }
  std::size_t blocks() const { return m_.size(); }
  AdamConfig& config() { return cfg_; }
  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return t_; }
  const std::vector<std::string>& names() const { return names_; }

  void step(std::span<Tensor* const> params, std::span<const Tensor> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size())
      throw UsageError("optimizer expected " + std::to_string(m_.size()) + " parameter blocks");
    for (std::size_t b = 0; b < m_.size(); ++b) {
      if (params[b]->shape() != m_[b].shape() || grads[b].shape() != m_[b].shape())
        throw UsageError("shape mismatch in parameter block " + names_[b]);
      if (!frozen_[b] && !grads[b].all_finite())
        throw NumericalError("non-finite gradient in parameter block " + names_[b]);
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < m_.size(); ++b) {
      if (frozen_[b]) continue;
      double* p = params[b]->data();
      const double* g = grads[b].data();
      double* m = m_[b].data();
      double* v = v_[b].data();
      for (std::size_t i = 0; i < m_[b].size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        p[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::vector<bool> frozen_;
  std::vector<std::string> names_;
  std::uint64_t t_ = 0;
};

}  // namespace cvdmp::nn

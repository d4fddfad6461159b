#pragma once

// Gaussian latent helpers: the reparameterized sample and the KL divergence
// of a diagonal Gaussian from the standard normal prior.

#include <cmath>

#include "cvdmp/error.hpp"
#include "cvdmp/nn/tensor.hpp"

namespace cvdmp::nn {

namespace detail {
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw DataError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                    shape_string(b.shape()));
}
}  // namespace detail

/// z = mu + exp(log_var / 2) * noise
inline Tensor reparameterize(const Tensor& mu, const Tensor& log_var, const Tensor& noise) {
  detail::require_same_shape(mu, log_var, "reparameterize");
  detail::require_same_shape(mu, noise, "reparameterize");
  Tensor z(mu.shape());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = mu[i] + std::exp(0.5 * log_var[i]) * noise[i];
  return z;
}

struct LatentGrad {
  Tensor mu;
  Tensor log_var;
};

inline LatentGrad reparameterize_backward(const Tensor& log_var, const Tensor& noise,
                                          const Tensor& grad_z) {
  LatentGrad g{grad_z, Tensor(log_var.shape())};
  for (std::size_t i = 0; i < grad_z.size(); ++i)
    g.log_var[i] = grad_z[i] * 0.5 * std::exp(0.5 * log_var[i]) * noise[i];
  return g;
}

/// 0.5 * sum(exp(log_var) + mu^2 - 1 - log_var)
inline double kl_standard_normal(const Tensor& mu, const Tensor& log_var) {
  detail::require_same_shape(mu, log_var, "kl_standard_normal");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i)
    kl += std::exp(log_var[i]) + mu[i] * mu[i] - 1.0 - log_var[i];
  return 0.5 * kl;
}

inline LatentGrad kl_standard_normal_grad(const Tensor& mu, const Tensor& log_var,
                                          double scale = 1.0) {
  LatentGrad g{Tensor(mu.shape()), Tensor(log_var.shape())};
  for (std::size_t i = 0; i < mu.size(); ++i) {
    g.mu[i] = scale * mu[i];
    g.log_var[i] = scale * 0.5 * (std::exp(log_var[i]) - 1.0);
  }
  return g;
}

}  // namespace cvdmp::nn

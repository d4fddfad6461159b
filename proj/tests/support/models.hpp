#pragma once

#include "cvdmp/cvae.hpp"
#include "cvdmp/dataset.hpp"

namespace testing_support {

/// Untrained model whose decoder emits the digit's template force for every
/// z: the last dense layer has zero weights and the force as its bias.
inline cvdmp::CvaeModel template_model(int digit, std::uint64_t seed = 12) {
  using namespace cvdmp;
  const DmpConfig cfg;
  CvaeModel m = make_model(CvaeArchitecture{}, {digit}, seed);
  const ForceProfile f = inverse_dynamics(cfg, digit_template(digit, cfg));
  auto p = m.decoder.parameters();
  p[4]->fill(0.0);
  const std::size_t L = cfg.n_steps;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t t = 0; t < L; ++t)
      (*p[5])[c * L + t] = f.f(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c));
  return m;
}

}  // namespace testing_support

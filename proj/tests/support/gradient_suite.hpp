#pragma once

// Randomized finite-difference checks for every layer kind and every loss
// that is minimized in this repository. Shared by the unit tests and the
// acceptance runner.

#include <random>
#include <string>
#include <vector>

#include "cvdmp/cvae.hpp"
#include "cvdmp/generator.hpp"
#include "cvdmp/nn/latent.hpp"
#include "cvdmp/nn/network.hpp"
#include "support/gradcheck.hpp"

namespace testing_support {

struct SuiteEntry {
  std::string name;
  std::size_t instances = 0;
  double max_error = 0.0;
  double tolerance = 1e-4;
  bool pass() const { return instances >= 20 && max_error < tolerance; }
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline cvdmp::Mat random_mat(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng,
                             double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  cvdmp::Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline void randomize(cvdmp::nn::Tensor& t, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
}

/// Loss 0.5 * ||y||^2 + r . y on the network output, gradients for every
/// parameter and the input.
inline double check_network(cvdmp::nn::Network& net, cvdmp::nn::Tensor input, std::mt19937_64& rng) {
  using namespace cvdmp;
  std::vector<nn::Tensor*> params = net.parameters();
  for (nn::Tensor* p : params) randomize(*p, rng, 0.5);
  auto [probe, probe_tape] = nn::forward(net, input);
  nn::Tensor r(probe.shape());
  randomize(r, rng);
  auto loss = [&]() {
    auto [y, tape] = nn::forward(net, input);
    double l = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) l += 0.5 * y[i] * y[i] + r[i] * y[i];
    return l;
  };
  auto [y, tape] = nn::forward(net, input);
  nn::Tensor gy(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) gy[i] = y[i] + r[i];
  const nn::Gradients g = nn::backward(net, tape, gy);

  std::vector<double*> vals;
  std::vector<double> analytic;
  for (std::size_t b = 0; b < params.size(); ++b)
    for (std::size_t i = 0; i < params[b]->size(); ++i) {
      vals.push_back(&(*params[b])[i]);
      analytic.push_back(g.params[b][i]);
    }
  for (std::size_t i = 0; i < input.size(); ++i) {
    vals.push_back(&input[i]);
    analytic.push_back(g.input[i]);
  }
  return check_gradient(vals, analytic, loss).relative_error;
}

/// Input whose entries stay at least `margin` away from zero.
inline cvdmp::nn::Tensor away_from_zero(cvdmp::nn::Shape shape, std::mt19937_64& rng, double margin = 0.05) {
  cvdmp::nn::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> mag(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.values()) v = sign(rng) ? mag(rng) : -mag(rng);
  return t;
}

inline SuiteEntry dense_suite(std::size_t n, std::uint64_t seed) {
  using namespace cvdmp;
  SuiteEntry e{"dense layer", n};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t in = pick(rng, 1, 7), out = pick(rng, 1, 7), batch = pick(rng, 1, 3);
    nn::Network net({nn::make_dense(in, out)});
    nn::Tensor x({batch, in});
    randomize(x, rng);
    e.max_error = std::max(e.max_error, check_network(net, x, rng));
  }
  return e;
}

inline SuiteEntry conv_suite(std::size_t n, std::uint64_t seed) {
  using namespace cvdmp;
  SuiteEntry e{"conv1d layer", n};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t cin = pick(rng, 1, 3), cout = pick(rng, 1, 4), kernel = pick(rng, 1, 5);
    const std::size_t stride = pick(rng, 1, 3), len = pick(rng, kernel, 14), batch = pick(rng, 1, 2);
    nn::Network net({nn::make_conv1d(cin, cout, kernel, stride)});
    nn::Tensor x({batch, cin, len});
    randomize(x, rng);
    e.max_error = std::max(e.max_error, check_network(net, x, rng));
  }
  return e;
}

inline SuiteEntry relu_suite(std::size_t n, std::uint64_t seed) {
  using namespace cvdmp;
  SuiteEntry e{"relu activation", n};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t width = pick(rng, 1, 12), batch = pick(rng, 1, 3);
    nn::Network net({nn::Relu{}});
    e.max_error =
        std::max(e.max_error, check_network(net, away_from_zero({batch, width}, rng), rng));
  }
  return e;
}

inline SuiteEntry flatten_suite(std::size_t n, std::uint64_t seed) {
  using namespace cvdmp;
  SuiteEntry e{"flatten", n};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t c = pick(rng, 1, 4), len = pick(rng, 1, 8), batch = pick(rng, 1, 3);
    nn::Network net({nn::Flatten{}, nn::make_dense(c * len, pick(rng, 1, 4))});
    nn::Tensor x({batch, c, len});
    randomize(x, rng);
    e.max_error = std::max(e.max_error, check_network(net, x, rng));
  }
  return e;
}

/// Whole encoder-like stack: conv, relu, conv, relu, flatten, dense.
inline SuiteEntry stack_suite(std::size_t n, std::uint64_t seed) {
  using namespace cvdmp;
  SuiteEntry e{"conv/relu/flatten/dense stack", n};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t len = pick(rng, 9, 16);
    const std::size_t l1 = (len - 3) / 2 + 1, l2 = l1 - 1;
    nn::Network net({nn::make_conv1d(2, 3, 3, 2), nn::Relu{}, nn::make_conv1d(3, 2, 2, 1), nn::Relu{},
                       nn::Flatten{}, nn::make_dense(2 * l2, 3)});
    nn::Tensor x({1, 2, len});
    randomize(x, rng);
    e.max_error = std::max(e.max_error, check_network(net, x, rng));
  }
  return e;
}

inline SuiteEntry reparameterize_suite(std::size_t n, std::uint64_t seed) {
  using namespace cvdmp;
  SuiteEntry e{"reparameterize", n};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t d = pick(rng, 1, 6);
    nn::Tensor mu({1, d}), lv({1, d}), noise({1, d}), r({1, d});
    randomize(mu, rng);
    randomize(lv, rng, 0.5);
    randomize(noise, rng);
    randomize(r, rng);
    auto loss = [&]() {
      const nn::Tensor z = nn::reparameterize(mu, lv, noise);
      double l = 0.0;
      for (std::size_t i = 0; i < d; ++i) l += r[i] * z[i] + 0.5 * z[i] * z[i];
      return l;
    };
    const nn::Tensor z = nn::reparameterize(mu, lv, noise);
    nn::Tensor gz({1, d});
    for (std::size_t i = 0; i < d; ++i) gz[i] = r[i] + z[i];
    const auto g = nn::reparameterize_backward(lv, noise, gz);
    std::vector<double*> vals;
    std::vector<double> analytic;
    for (std::size_t i = 0; i < d; ++i) {
      vals.push_back(&mu[i]);
      analytic.push_back(g.mu[i]);
      vals.push_back(&lv[i]);
      analytic.push_back(g.log_var[i]);
    }
    e.max_error = std::max(e.max_error, check_gradient(vals, analytic, loss).relative_error);
  }
  return e;
}

inline SuiteEntry kl_suite(std::size_t n, std::uint64_t seed) {
  using namespace cvdmp;
  SuiteEntry e{"KL divergence", n, 0.0, 1e-6};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t d = pick(rng, 1, 8);
    nn::Tensor mu({1, d}), lv({1, d});
    randomize(mu, rng);
    randomize(lv, rng, 0.7);
    const double w = std::uniform_real_distribution<double>(0.1, 2.0)(rng);
    const auto g = nn::kl_standard_normal_grad(mu, lv, w);
    std::vector<double*> vals;
    std::vector<double> analytic;
    for (std::size_t i = 0; i < d; ++i) {
      vals.push_back(&mu[i]);
      analytic.push_back(g.mu[i]);
      vals.push_back(&lv[i]);
      analytic.push_back(g.log_var[i]);
    }
    auto loss = [&]() { return w * nn::kl_standard_normal(mu, lv); };
    e.max_error = std::max(e.max_error, check_gradient(vals, analytic, loss).relative_error);
  }
  return e;
}

inline cvdmp::CvaeArchitecture tiny_architecture() {
  cvdmp::CvaeArchitecture a;
  a.dims = 2;
  a.n_steps = 16;
  a.latent_dim = 3;
  a.conv1_channels = 3;
  a.conv2_channels = 4;
  a.kernel = 3;
  a.stride = 2;
  a.hidden1 = 8;
  a.hidden2 = 8;
  return a;
}

inline cvdmp::CvaeModel tiny_model(std::mt19937_64& rng) {
  using namespace cvdmp;
  CvaeModel m = make_model(tiny_architecture(), {1, 2, 3}, rng());
  for (nn::Network* net : {&m.encoder_trunk, &m.encoder_head, &m.decoder})
    for (nn::Tensor* p : net->parameters()) randomize(*p, rng, 0.4);
  m.force_mean = (Vec(2) << 0.3, -0.2).finished();
  m.force_scale = (Vec(2) << 1.7, 0.8).finished();
  return m;
}

/// ELBO gradients for every encoder and decoder parameter. With
/// kl_weight = 0 this is the reconstruction term alone.
inline SuiteEntry elbo_suite(std::size_t n, std::uint64_t seed, bool reconstruction_only) {
  using namespace cvdmp;
  SuiteEntry e{reconstruction_only ? "ELBO reconstruction" : "ELBO total", n};
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k < n; ++k) {
    CvaeModel m = tiny_model(rng);
    ForceProfile force;
    force.f = random_mat(16, 2, rng, 2.0);
    force.phase = Vec::LinSpaced(16, 1.0, 0.1);
    force.f.col(0).array() += std::normal_distribution<double>(0.0, 1.0)(rng);
    Vec noise(3);
    for (auto& v : noise) v = std::normal_distribution<double>(0.0, 1.0)(rng);
    const int id = static_cast<int>(pick(rng, 1, 3));
    const double klw = reconstruction_only ? 0.0 : std::uniform_real_distribution<double>(0.2, 1.5)(rng);

    std::vector<nn::Tensor*> params;
    for (nn::Network* net : {&m.encoder_trunk, &m.encoder_head, &m.decoder})
      for (nn::Tensor* p : net->parameters()) params.push_back(p);
    const ElboResult r = elbo_loss(m, force, id, klw, noise);
    CvaeGradients g = elbo_backward(m, r.tape);
    std::vector<nn::Tensor> grads;
    for (auto* part : {&g.trunk, &g.head, &g.decoder})
      for (auto& t : *part) grads.push_back(t);

    std::vector<double*> vals;
    std::vector<double> analytic;
    for (std::size_t b = 0; b < params.size(); ++b)
      for (std::size_t i = 0; i < params[b]->size(); ++i) {
        vals.push_back(&(*params[b])[i]);
        analytic.push_back(grads[b][i]);
      }
    auto loss = [&]() { return elbo_loss(m, force, id, klw, noise).loss; };
    e.max_error = std::max(e.max_error, check_gradient(vals, analytic, loss).relative_error);
  }
  return e;
}

/// Fine-tune loss through decode, scale and the Euler rollout, with respect
/// to every decoder parameter and the scale vector.
inline SuiteEntry finetune_suite(std::size_t n, std::uint64_t seed) {
  using namespace cvdmp;
  SuiteEntry e{"fine-tune loss", n};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t k = 0; k < n; ++k) {
    CvaeModel m = tiny_model(rng);
    FinetuneProblem pb;
    pb.model = &m;
    pb.cfg.n_steps = 16;
    pb.cfg.dt = 0.06;
    pb.task_id = static_cast<int>(pick(rng, 1, 3));
    pb.latent = random_mat(3, 1, rng);
    pb.start = (Vec(2) << unit(rng), unit(rng)).finished();
    pb.goal = (Vec(2) << unit(rng), unit(rng)).finished();
    for (std::size_t v = 0; v < pick(rng, 1, 2); ++v)
      pb.via_points.push_back((Vec(2) << unit(rng), unit(rng)).finished());
    pb.reference = random_mat(16, 2, rng, 0.3);
    pb.weights.p1 = 0.1 + unit(rng);
    pb.weights.p2 = 0.1 + unit(rng);
    pb.weights.p3 = 0.1 + unit(rng);
    pb.weights = pb.weights.normalized();
    nn::Network decoder = m.decoder;
    Vec s = (Vec(2) << 0.5 + unit(rng), 0.5 + unit(rng)).finished();

    std::vector<nn::Tensor*> params = decoder.parameters();
    const FinetuneEvaluation ev = finetune_objective(pb, decoder, s, true);
    std::vector<double*> vals;
    std::vector<double> analytic;
    for (std::size_t b = 0; b < params.size(); ++b)
      for (std::size_t i = 0; i < params[b]->size(); ++i) {
        vals.push_back(&(*params[b])[i]);
        analytic.push_back(ev.decoder_grads[b][i]);
      }
    for (Eigen::Index c = 0; c < s.size(); ++c) {
      vals.push_back(&s[c]);
      analytic.push_back(ev.scale_grad[c]);
    }
    auto loss = [&]() { return finetune_objective(pb, decoder, s, false).loss; };
    e.max_error = std::max(e.max_error, check_gradient(vals, analytic, loss).relative_error);
  }
  return e;
}

inline std::vector<SuiteEntry> full_gradient_suite(std::size_t n = 20, std::uint64_t seed = 11) {
  return {dense_suite(n, seed),           conv_suite(n, seed + 1),
          relu_suite(n, seed + 2),        flatten_suite(n, seed + 3),
          stack_suite(n, seed + 4),       reparameterize_suite(n, seed + 5),
          kl_suite(n, seed + 6),          elbo_suite(n, seed + 7, true),
          elbo_suite(n, seed + 8, false), finetune_suite(n, seed + 9)};
}

}  // namespace testing_support

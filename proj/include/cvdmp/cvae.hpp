#pragma once

// Conditional VAE over DMP force profiles. The encoder is a 1D conv trunk
// followed by a dense head fed with the trunk features and a one-hot task id;
// the decoder is a three-layer dense stack fed with [z, one-hot].

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cvdmp/dataset.hpp"
#include "cvdmp/dmp.hpp"
#include "cvdmp/error.hpp"
#include "cvdmp/io.hpp"
#include "cvdmp/nn/latent.hpp"
#include "cvdmp/nn/network.hpp"
#include "cvdmp/nn/optim.hpp"

namespace cvdmp {

struct CvaeArchitecture {
  std::size_t dims = 2;
  std::size_t n_steps = 100;
  std::size_t latent_dim = 4;
  std::size_t conv1_channels = 16;
  std::size_t conv2_channels = 32;
  std::size_t kernel = 5;
  std::size_t stride = 2;
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 256;

  std::size_t force_length() const { return n_steps * dims; }
  std::size_t trunk_features() const {
    auto out = [&](std::size_t len) { return len < kernel ? 0 : (len - kernel) / stride + 1; };
    return conv2_channels * out(out(n_steps));
  }

  json to_json() const {
    return json{{"dims", dims},
                {"n_steps", n_steps},
                {"latent_dim", latent_dim},
                {"conv1_channels", conv1_channels},
                {"conv2_channels", conv2_channels},
                {"kernel", kernel},
                {"stride", stride},
                {"hidden1", hidden1},
                {"hidden2", hidden2}};
  }
  static CvaeArchitecture from_json(const json& j) {
    CvaeArchitecture a;
    a.dims = j.value("dims", a.dims);
    a.n_steps = j.value("n_steps", a.n_steps);
    a.latent_dim = j.value("latent_dim", a.latent_dim);
    a.conv1_channels = j.value("conv1_channels", a.conv1_channels);
    a.conv2_channels = j.value("conv2_channels", a.conv2_channels);
    a.kernel = j.value("kernel", a.kernel);
    a.stride = j.value("stride", a.stride);
    a.hidden1 = j.value("hidden1", a.hidden1);
    a.hidden2 = j.value("hidden2", a.hidden2);
    return a;
  }
};

/// Mean normalized start and end of a task's training demonstrations; the
/// frame in which decoded forces are rolled out before scaling.
struct TaskAnchor {
  Vec start;
  Vec goal;
};

struct TrainingMetadata {
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  double kl_weight = 0.0;
  std::size_t samples = 0;
  std::vector<double> loss_curve;
  std::vector<double> recon_curve;
  std::vector<double> kl_curve;

  json to_json() const {
    return json{{"epochs", epochs},         {"seed", seed},           {"kl_weight", kl_weight},
                {"samples", samples},       {"loss_curve", loss_curve}, {"recon_curve", recon_curve},
                {"kl_curve", kl_curve}};
  }
  static TrainingMetadata from_json(const json& j) {
    TrainingMetadata m;
    m.epochs = j.value("epochs", m.epochs);
    m.seed = j.value("seed", m.seed);
    m.kl_weight = j.value("kl_weight", m.kl_weight);
    m.samples = j.value("samples", m.samples);
    m.loss_curve = j.value("loss_curve", m.loss_curve);
    m.recon_curve = j.value("recon_curve", m.recon_curve);
    m.kl_curve = j.value("kl_curve", m.kl_curve);
    return m;
  }
};

struct CvaeModel {
  CvaeArchitecture arch;
  std::vector<int> vocabulary;
  nn::Network encoder_trunk;
  nn::Network encoder_head;
  nn::Network decoder;
  Vec force_mean;   // per dimension
  Vec force_scale;  // per dimension, > 0
  std::map<int, TaskAnchor> anchors;
  std::map<int, NormalizationRecord> normalization;
  TrainingMetadata training;

  std::size_t onehot_width() const { return vocabulary.size(); }

  std::size_t task_index(int task_id) const {
    auto it = std::find(vocabulary.begin(), vocabulary.end(), task_id);
    if (it == vocabulary.end()) {
      std::string ids;
      for (int v : vocabulary) ids += (ids.empty() ? "" : ", ") + std::to_string(v);
      throw UsageError("unknown task id " + std::to_string(task_id) + "; vocabulary is {" + ids +
                       "}");
    }
    return static_cast<std::size_t>(it - vocabulary.begin());
  }

  const TaskAnchor& anchor(int task_id) const {
    task_index(task_id);
    return anchors.at(task_id);
  }

  const NormalizationRecord& record(int task_id) const {
    task_index(task_id);
    return normalization.at(task_id);
  }
};

inline CvaeModel make_model(const CvaeArchitecture& arch, std::vector<int> vocabulary,
                            std::uint64_t seed) {
  if (vocabulary.empty()) throw UsageError("task vocabulary is empty");
  if (arch.trunk_features() == 0) throw UsageError("force profile too short for the conv trunk");
  CvaeModel m;
  m.arch = arch;
  m.vocabulary = std::move(vocabulary);
  const std::size_t onehot = m.vocabulary.size();
  m.encoder_trunk = nn::Network({nn::make_conv1d(arch.dims, arch.conv1_channels, arch.kernel, arch.stride),
                                 nn::Relu{},
                                 nn::make_conv1d(arch.conv1_channels, arch.conv2_channels, arch.kernel,
                                                 arch.stride),
                                 nn::Relu{}, nn::Flatten{}});
  m.encoder_head = nn::Network({nn::make_dense(arch.trunk_features() + onehot, 2 * arch.latent_dim)});
  m.decoder = nn::Network({nn::make_dense(arch.latent_dim + onehot, arch.hidden1), nn::Relu{},
                           nn::make_dense(arch.hidden1, arch.hidden2), nn::Relu{},
                           nn::make_dense(arch.hidden2, arch.force_length())});
  std::mt19937_64 rng(seed);
  m.encoder_trunk.initialize(rng);
  m.encoder_head.initialize(rng);
  m.decoder.initialize(rng);
  m.force_mean = Vec::Zero(static_cast<Eigen::Index>(arch.dims));
  m.force_scale = Vec::Ones(static_cast<Eigen::Index>(arch.dims));
  for (int id : m.vocabulary) {
    m.anchors[id] = TaskAnchor{(Vec(2) << 0.0, 1.0).finished(), (Vec(2) << 1.0, 0.0).finished()};
    if (arch.dims != 2)
      m.anchors[id] = TaskAnchor{Vec::Zero(static_cast<Eigen::Index>(arch.dims)),
                                 Vec::Ones(static_cast<Eigen::Index>(arch.dims))};
    m.normalization[id] = NormalizationRecord::identity(arch.dims);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Tensor packing

/// Force profile -> standardized [1, dims, n_steps] tensor.
inline nn::Tensor pack_force(const CvaeModel& m, const ForceProfile& force) {
  const std::size_t L = m.arch.n_steps, d = m.arch.dims;
  if (force.steps() != L || force.dims() != d)
    throw DataError("force profile is " + std::to_string(force.steps()) + "x" +
                    std::to_string(force.dims()) + ", model expects " + std::to_string(L) + "x" +
                    std::to_string(d));
  nn::Tensor x({1, d, L});
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t t = 0; t < L; ++t)
      x.at(0, c, t) = (force.f(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) -
                       m.force_mean[static_cast<Eigen::Index>(c)]) /
                      m.force_scale[static_cast<Eigen::Index>(c)];
  return x;
}

/// Decoder output [1, dims * n_steps] (channel-major) -> force profile.
inline ForceProfile unpack_force(const CvaeModel& m, const nn::Tensor& out, const Vec& phase) {
  const std::size_t L = m.arch.n_steps, d = m.arch.dims;
  ForceProfile f;
  f.phase = phase;
  f.f.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(d));
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t t = 0; t < L; ++t)
      f.f(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) =
          out[c * L + t] * m.force_scale[static_cast<Eigen::Index>(c)] +
          m.force_mean[static_cast<Eigen::Index>(c)];
  return f;
}

inline nn::Tensor decoder_input(const CvaeModel& m, const Vec& z, int task_id) {
  if (static_cast<std::size_t>(z.size()) != m.arch.latent_dim)
    throw DataError("latent vector has " + std::to_string(z.size()) + " entries, expected " +
                    std::to_string(m.arch.latent_dim));
  const std::size_t idx = m.task_index(task_id);
  nn::Tensor in({1, m.arch.latent_dim + m.onehot_width()});
  for (std::size_t i = 0; i < m.arch.latent_dim; ++i) in[i] = z[static_cast<Eigen::Index>(i)];
  in[m.arch.latent_dim + idx] = 1.0;
  return in;
}

inline Vec model_phase(const CvaeModel& m, const DmpConfig& cfg) {
  return phase_sequence(cfg.alpha_x, cfg.tau, cfg.dt, m.arch.n_steps);
}

// ---------------------------------------------------------------------------
// Encode / decode

struct LatentCode {
  Vec mu;
  Vec log_var;
  Vec z;
};

namespace detail {

struct EncoderPass {
  nn::Tape trunk_tape;
  nn::Tape head_tape;
  nn::Tensor mu;
  nn::Tensor log_var;
};

inline EncoderPass run_encoder(const CvaeModel& m, const ForceProfile& force, int task_id) {
  const std::size_t idx = m.task_index(task_id);
  EncoderPass p;
  auto [features, trunk_tape] = nn::forward(m.encoder_trunk, pack_force(m, force));
  const std::size_t nf = features.size();
  nn::Tensor head_in({1, nf + m.onehot_width()});
  std::copy(features.values().begin(), features.values().end(), head_in.values().begin());
  head_in[nf + idx] = 1.0;
  auto [head_out, head_tape] = nn::forward(m.encoder_head, head_in);
  p.trunk_tape = std::move(trunk_tape);
  p.head_tape = std::move(head_tape);
  const std::size_t k = m.arch.latent_dim;
  p.mu = nn::Tensor({1, k});
  p.log_var = nn::Tensor({1, k});
  for (std::size_t i = 0; i < k; ++i) {
    p.mu[i] = head_out[i];
    p.log_var[i] = head_out[k + i];
  }
  return p;
}

inline Vec to_vec(const nn::Tensor& t) {
  Vec v(static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) v[static_cast<Eigen::Index>(i)] = t[i];
  return v;
}

}  // namespace detail

/// Posterior parameters and the reparameterized sample for the given noise
/// (a zero-length noise vector means z = mu).
inline LatentCode encode(const CvaeModel& m, const ForceProfile& force, int task_id,
                         const Vec& noise = Vec()) {
  auto pass = detail::run_encoder(m, force, task_id);
  LatentCode code{detail::to_vec(pass.mu), detail::to_vec(pass.log_var), Vec()};
  if (noise.size() == 0) {
    code.z = code.mu;
  } else {
    if (static_cast<std::size_t>(noise.size()) != m.arch.latent_dim)
      throw DataError("noise vector does not match latent_dim");
    nn::Tensor n({1, m.arch.latent_dim});
    for (std::size_t i = 0; i < n.size(); ++i) n[i] = noise[static_cast<Eigen::Index>(i)];
    code.z = detail::to_vec(nn::reparameterize(pass.mu, pass.log_var, n));
  }
  return code;
}

inline ForceProfile decode(const CvaeModel& m, const Vec& z, int task_id, const Vec& phase) {
  auto [out, tape] = nn::forward(m.decoder, decoder_input(m, z, task_id));
  return unpack_force(m, out, phase);
}

inline ForceProfile decode(const CvaeModel& m, const DmpConfig& cfg, const Vec& z, int task_id) {
  return decode(m, z, task_id, model_phase(m, cfg));
}

// ---------------------------------------------------------------------------
// ELBO

struct ElboTape {
  detail::EncoderPass encoder;
  nn::Tape decoder_tape;
  nn::Tensor noise;
  nn::Tensor target;  // standardized force, channel-major [1, d * L]
  nn::Tensor output;  // decoder output
  double kl_weight = 0.0;
};

struct ElboResult {
  double loss = 0.0;
  double reconstruction = 0.0;  // mean squared error on standardized forces
  double kl = 0.0;
  ElboTape tape;
};

struct CvaeGradients {
  std::vector<nn::Tensor> trunk;
  std::vector<nn::Tensor> head;
  std::vector<nn::Tensor> decoder;
};

inline ElboResult elbo_loss(const CvaeModel& m, const ForceProfile& force, int task_id,
                            double kl_weight, const Vec& noise) {
  if (static_cast<std::size_t>(noise.size()) != m.arch.latent_dim)
    throw DataError("noise vector does not match latent_dim");
  ElboResult r;
  r.tape.kl_weight = kl_weight;
  r.tape.encoder = detail::run_encoder(m, force, task_id);
  r.tape.noise = nn::Tensor({1, m.arch.latent_dim});
  for (std::size_t i = 0; i < m.arch.latent_dim; ++i)
    r.tape.noise[i] = noise[static_cast<Eigen::Index>(i)];
  const nn::Tensor z = nn::reparameterize(r.tape.encoder.mu, r.tape.encoder.log_var, r.tape.noise);
  auto [out, dtape] = nn::forward(m.decoder, decoder_input(m, detail::to_vec(z), task_id));
  r.tape.decoder_tape = std::move(dtape);
  r.tape.target = pack_force(m, force).reshaped({1, m.arch.force_length()});
  double sq = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double e = out[i] - r.tape.target[i];
    sq += e * e;
  }
  r.tape.output = std::move(out);
  r.reconstruction = sq / static_cast<double>(r.tape.output.size());
  r.kl = nn::kl_standard_normal(r.tape.encoder.mu, r.tape.encoder.log_var);
  r.loss = r.reconstruction + kl_weight * r.kl;
  if (!std::isfinite(r.loss))
    throw NumericalError("non-finite ELBO loss (reconstruction " + format_double(r.reconstruction) +
                         ", kl " + format_double(r.kl) + ")");
  return r;
}

inline CvaeGradients elbo_backward(const CvaeModel& m, const ElboTape& tape) {
  CvaeGradients g;
  const std::size_t n = tape.output.size();
  nn::Tensor gout(tape.output.shape());
  for (std::size_t i = 0; i < n; ++i)
    gout[i] = 2.0 * (tape.output[i] - tape.target[i]) / static_cast<double>(n);
  nn::Gradients dg = nn::backward(m.decoder, tape.decoder_tape, gout);
  g.decoder = std::move(dg.params);

  const std::size_t k = m.arch.latent_dim;
  nn::Tensor gz({1, k});
  for (std::size_t i = 0; i < k; ++i) gz[i] = dg.input[i];
  auto rg = nn::reparameterize_backward(tape.encoder.log_var, tape.noise, gz);
  auto kg = nn::kl_standard_normal_grad(tape.encoder.mu, tape.encoder.log_var, tape.kl_weight);
  nn::Tensor ghead({1, 2 * k});
  for (std::size_t i = 0; i < k; ++i) {
    ghead[i] = rg.mu[i] + kg.mu[i];
    ghead[k + i] = rg.log_var[i] + kg.log_var[i];
  }
  nn::Gradients hg = nn::backward(m.encoder_head, tape.encoder.head_tape, ghead);
  g.head = std::move(hg.params);
  const std::size_t nf = m.arch.trunk_features();
  nn::Tensor gfeat({1, nf});
  for (std::size_t i = 0; i < nf; ++i) gfeat[i] = hg.input[i];
  g.trunk = nn::backward(m.encoder_trunk, tape.encoder.trunk_tape, gfeat).params;
  return g;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 150;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double kl_weight = 1.0;
  std::size_t kl_warmup_epochs = 0;  // linear ramp of the KL weight, 0 = off
  std::uint64_t rng_seed = 1;
  std::size_t threads = 1;
  CvaeArchitecture arch;

  void validate() const {
    if (epochs < 1) throw UsageError("epochs must be >= 1");
    if (batch_size < 1) throw UsageError("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw UsageError("learning rate must be > 0");
    if (!(kl_weight >= 0.0)) throw UsageError("KL weight must be >= 0");
  }

  json to_json() const {
    return json{{"epochs", epochs},
                {"batch_size", batch_size},
                {"learning_rate", learning_rate},
                {"kl_weight", kl_weight},
                {"kl_warmup_epochs", kl_warmup_epochs},
                {"rng_seed", rng_seed},
                {"architecture", arch.to_json()}};
  }
  static TrainConfig from_json(const json& j) { return from_json(j, TrainConfig{}); }
  static TrainConfig from_json(const json& j, TrainConfig c) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.kl_weight = j.value("kl_weight", c.kl_weight);
    c.kl_warmup_epochs = j.value("kl_warmup_epochs", c.kl_warmup_epochs);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.threads = j.value("threads", c.threads);
    if (j.contains("architecture")) c.arch = CvaeArchitecture::from_json(j["architecture"]);
    c.validate();
    return c;
  }
};

struct TrainingSample {
  ForceProfile force;
  int task_id = 0;
  std::string label;
};

/// Normalizes every demonstration with its task record and converts it to a
/// force profile by inverse dynamics.
inline std::vector<TrainingSample> training_samples(const DatasetBundle& bundle) {
  std::vector<TrainingSample> out;
  for (const auto& [id, demos] : bundle.tasks) {
    const auto& rec = bundle.record_for(id);
    for (std::size_t i = 0; i < demos.size(); ++i) {
      const std::string label = "task " + std::to_string(id) + " demonstration " + std::to_string(i);
      try {
        out.push_back({inverse_dynamics(bundle.dmp, rec.apply(demos[i].trajectory)), id, label});
      } catch (const Error& e) {
        throw DataError("inverse dynamics failed for " + label + ": " + e.what());
      }
    }
  }
  return out;
}

namespace detail {

inline std::vector<nn::Tensor*> all_parameters(CvaeModel& m) {
  std::vector<nn::Tensor*> out;
  for (auto* p : m.encoder_trunk.parameters()) out.push_back(p);
  for (auto* p : m.encoder_head.parameters()) out.push_back(p);
  for (auto* p : m.decoder.parameters()) out.push_back(p);
  return out;
}

inline std::vector<const nn::Tensor*> all_parameters(const CvaeModel& m) {
  std::vector<const nn::Tensor*> out;
  for (auto* p : m.encoder_trunk.parameters()) out.push_back(p);
  for (auto* p : m.encoder_head.parameters()) out.push_back(p);
  for (auto* p : m.decoder.parameters()) out.push_back(p);
  return out;
}

inline std::vector<std::string> all_parameter_names(const CvaeModel& m) {
  std::vector<std::string> out = m.encoder_trunk.parameter_names("encoder_trunk");
  for (auto& n : m.encoder_head.parameter_names("encoder_head")) out.push_back(n);
  for (auto& n : m.decoder.parameter_names("decoder")) out.push_back(n);
  return out;
}

inline std::vector<nn::Tensor> flatten_grads(CvaeGradients&& g) {
  std::vector<nn::Tensor> out;
  for (auto& t : g.trunk) out.push_back(std::move(t));
  for (auto& t : g.head) out.push_back(std::move(t));
  for (auto& t : g.decoder) out.push_back(std::move(t));
  return out;
}

}  // namespace detail

/// Minibatch ELBO optimization on inverse-dynamics forces of the bundle.
/// Per-sample gradients are reduced in sample order, so results do not
/// depend on the thread count.
inline CvaeModel train(const DatasetBundle& bundle, const TrainConfig& cfg) {
  cfg.validate();
  if (bundle.empty()) throw DataError("cannot train on an empty bundle");
  const std::vector<TrainingSample> samples = training_samples(bundle);

  CvaeArchitecture arch = cfg.arch;
  arch.dims = bundle.dmp.dims;
  arch.n_steps = bundle.dmp.n_steps;
  CvaeModel model = make_model(arch, bundle.task_ids(), cfg.rng_seed);
  model.normalization = bundle.normalization;

  // per-dimension standardization of the forces
  const auto d = static_cast<Eigen::Index>(arch.dims);
  Vec sum = Vec::Zero(d), sq = Vec::Zero(d);
  double count = 0.0;
  for (const auto& s : samples) {
    sum += s.force.f.colwise().sum().transpose();
    sq += s.force.f.array().square().matrix().colwise().sum().transpose();
    count += static_cast<double>(s.force.f.rows());
  }
  model.force_mean = sum / count;
  model.force_scale =
      (sq / count - model.force_mean.cwiseProduct(model.force_mean)).cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index c = 0; c < d; ++c)
    if (!(model.force_scale[c] > 1e-12)) model.force_scale[c] = 1.0;

  for (const auto& [id, demos] : bundle.tasks) {
    const auto& rec = bundle.record_for(id);
    TaskAnchor a{Vec::Zero(d), Vec::Zero(d)};
    for (const auto& demo : demos) {
      a.start += rec.to_normalized(demo.trajectory.front());
      a.goal += rec.to_normalized(demo.trajectory.back());
    }
    a.start /= static_cast<double>(demos.size());
    a.goal /= static_cast<double>(demos.size());
    model.anchors[id] = a;
  }

  auto params = detail::all_parameters(model);
  nn::Adam opt(nn::AdamConfig{cfg.learning_rate},
               std::vector<const nn::Tensor*>(params.begin(), params.end()),
               detail::all_parameter_names(model));
  std::mt19937_64 rng(cfg.rng_seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  model.training = TrainingMetadata{};
  model.training.seed = cfg.rng_seed;
  model.training.kl_weight = cfg.kl_weight;
  model.training.samples = samples.size();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    const double klw = cfg.kl_warmup_epochs > 0
                           ? cfg.kl_weight * std::min(1.0, static_cast<double>(epoch + 1) /
                                                               static_cast<double>(cfg.kl_warmup_epochs))
                           : cfg.kl_weight;
    double epoch_loss = 0.0, epoch_recon = 0.0, epoch_kl = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const std::size_t nb = stop - start;
      std::vector<Vec> noise(nb, Vec(static_cast<Eigen::Index>(arch.latent_dim)));
      for (auto& v : noise)
        for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);

      std::vector<std::vector<nn::Tensor>> per_sample(nb);
      std::vector<ElboResult> results(nb);
      const CvaeModel& frozen_view = model;
      parallel_for(nb, cfg.threads, [&](std::size_t b) {
        const auto& s = samples[order[start + b]];
        results[b] = elbo_loss(frozen_view, s.force, s.task_id, klw, noise[b]);
        per_sample[b] = detail::flatten_grads(elbo_backward(frozen_view, results[b].tape));
        results[b].tape = ElboTape{};
      });
      std::vector<nn::Tensor> grads;
      for (const auto* p : detail::all_parameters(std::as_const(model))) grads.emplace_back(p->shape());
      for (std::size_t b = 0; b < nb; ++b) {
        for (std::size_t k = 0; k < grads.size(); ++k) grads[k] += per_sample[b][k];
        epoch_loss += results[b].loss;
        epoch_recon += results[b].reconstruction;
        epoch_kl += results[b].kl;
      }
      for (auto& g : grads) g *= 1.0 / static_cast<double>(nb);
      params = detail::all_parameters(model);
      opt.step(params, grads);
    }
    const double n = static_cast<double>(samples.size());
    model.training.loss_curve.push_back(epoch_loss / n);
    model.training.recon_curve.push_back(epoch_recon / n);
    model.training.kl_curve.push_back(epoch_kl / n);
    ++model.training.epochs;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, u32 version, u64 header length, JSON header, then
// little-endian float64 parameter blocks in declared order.

inline constexpr char kCheckpointMagic[8] = {'C', 'V', 'D', 'M', 'P', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

inline std::string parameter_bytes(const CvaeModel& m) {
  std::string out;
  for (const auto* t : all_parameters(m))
    for (double v : t->values()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

}  // namespace detail

inline json checkpoint_header(const CvaeModel& m) {
  json h;
  h["format"] = "cvdmp-checkpoint";
  h["architecture"] = m.arch.to_json();
  h["latent_dim"] = m.arch.latent_dim;
  h["n_steps"] = m.arch.n_steps;
  h["dims"] = m.arch.dims;
  h["force_layout"] = "channel_major";
  h["vocabulary"] = m.vocabulary;
  h["force_mean"] = to_json(m.force_mean);
  h["force_scale"] = to_json(m.force_scale);
  json anchors = json::object();
  for (const auto& [id, a] : m.anchors)
    anchors[std::to_string(id)] = json{{"start", to_json(a.start)}, {"goal", to_json(a.goal)}};
  h["anchors"] = anchors;
  json norm = json::object();
  for (const auto& [id, r] : m.normalization) norm[std::to_string(id)] = r.to_json();
  h["normalization"] = norm;
  h["training"] = m.training.to_json();
  json blocks = json::array();
  const auto names = detail::all_parameter_names(m);
  const auto params = detail::all_parameters(m);
  for (std::size_t i = 0; i < params.size(); ++i)
    blocks.push_back(json{{"name", names[i]}, {"shape", params[i]->shape()}});
  h["blocks"] = blocks;
  return h;
}

inline std::string serialize(const CvaeModel& m, const ArtifactStamp* stamp = nullptr) {
  const std::string params = detail::parameter_bytes(m);
  json h = checkpoint_header(m);
  h["checksum"] = hex32(crc32_of(params));
  if (stamp) h["stamp"] = stamp->to_json();
  const std::string header = h.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, header.size());
  out += header;
  out += params;
  return out;
}

inline CvaeModel deserialize(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  constexpr std::size_t kPrefix = sizeof(kCheckpointMagic) + 4 + 8;
  if (bytes.size() < kPrefix) throw TruncatedFileError("checkpoint is truncated (no header)");
  if (std::memcmp(p, kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw DataError("not a cvdmp checkpoint (bad magic bytes)");
  const auto version = detail::get_le<std::uint32_t>(p + 8);
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("checkpoint format version " + std::to_string(version) +
                                 " is not supported (this build reads version " +
                                 std::to_string(kCheckpointVersion) + ")");
  const auto header_len = detail::get_le<std::uint64_t>(p + 12);
  if (bytes.size() - kPrefix < header_len) throw TruncatedFileError("checkpoint header is truncated");
  json h;
  try {
    h = json::parse(bytes.substr(kPrefix, header_len));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  CvaeModel m;
  try {
    const auto arch = CvaeArchitecture::from_json(h.at("architecture"));
    m = make_model(arch, h.at("vocabulary").get<std::vector<int>>(), 0);
    m.force_mean = vec_from_json(h.at("force_mean"));
    m.force_scale = vec_from_json(h.at("force_scale"));
    for (auto& [key, a] : h.at("anchors").items())
      m.anchors[std::stoi(key)] = TaskAnchor{vec_from_json(a.at("start")), vec_from_json(a.at("goal"))};
    for (auto& [key, r] : h.at("normalization").items())
      m.normalization[std::stoi(key)] = NormalizationRecord::from_json(r);
    m.training = TrainingMetadata::from_json(h.at("training"));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  auto params = detail::all_parameters(m);
  std::size_t count = 0;
  for (const auto* t : params) count += t->size();
  const std::size_t body = bytes.size() - kPrefix - header_len;
  if (body < count * 8)
    throw TruncatedFileError("checkpoint parameters are truncated (" + std::to_string(body) +
                             " of " + std::to_string(count * 8) + " bytes)");
  if (body > count * 8) throw DataError("checkpoint has trailing bytes after the parameters");
  const std::string param_bytes = bytes.substr(kPrefix + header_len);
  if (hex32(crc32_of(param_bytes)) != h.value("checksum", std::string()))
    throw ChecksumError("checkpoint checksum mismatch");
  const auto* q = reinterpret_cast<const unsigned char*>(param_bytes.data());
  for (auto* t : params)
    for (double& v : t->values()) {
      v = std::bit_cast<double>(detail::get_le<std::uint64_t>(q));
      q += 8;
    }
  return m;
}

inline void save(const CvaeModel& m, const std::filesystem::path& path,
                 const ArtifactStamp* stamp = nullptr) {
  write_text_file(path, serialize(m, stamp));
}

inline CvaeModel load(const std::filesystem::path& path) { return deserialize(read_text_file(path)); }

}  // namespace cvdmp

#pragma once

// Generation stage: decode a force for a task, scale it so the rollout meets a
// new start and goal, and fine-tune the decoder tail plus the scale so the
// trajectory passes near via-points while keeping its shape.

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cvdmp/cvae.hpp"
#include "cvdmp/dataset.hpp"
#include "cvdmp/dmp.hpp"
#include "cvdmp/error.hpp"
#include "cvdmp/io.hpp"
#include "cvdmp/nn/optim.hpp"

namespace cvdmp {

struct TaskSpec {
  int task_id = 1;
  Vec start;
  Vec goal;
  std::vector<Vec> via_points;
  std::optional<Vec> latent;

  void validate(std::size_t dims) const {
    if (static_cast<std::size_t>(start.size()) != dims || static_cast<std::size_t>(goal.size()) != dims)
      throw UsageError("start and goal must have " + std::to_string(dims) + " entries");
    for (const auto& v : via_points)
      if (static_cast<std::size_t>(v.size()) != dims)
        throw UsageError("via-points must have " + std::to_string(dims) + " entries");
    if (!start.allFinite() || !goal.allFinite()) throw UsageError("start and goal must be finite");
    if ((goal - start).cwiseAbs().maxCoeff() < kSpanEpsilon)
      throw UsageError("degenerate task: start equals goal in every dimension");
  }
};

struct ScaleParams {
  Vec s;
  std::size_t refinements = 0;  // accepted fixed-point corrections
  double endpoint_error = 0.0;
};

struct FinetuneConfig {
  double p1 = 0.6;
  double p2 = 0.2;
  double p3 = 0.2;
  std::size_t max_iters = 300;
  double tolerance = 1e-6;
  std::size_t frozen_layers = 2;
  double learning_rate = 3e-4;
  double via_smoothing = 0.005;  // eps in sqrt(d^2 + eps^2) - eps

  /// Rescales the weights to sum to one.
  FinetuneConfig normalized() const {
    if (!(p1 >= 0.0 && p2 >= 0.0 && p3 >= 0.0)) throw UsageError("loss weights must be >= 0");
    const double sum = p1 + p2 + p3;
    if (!(sum > 0.0)) throw UsageError("loss weights must not all be zero");
    FinetuneConfig c = *this;
    c.p1 /= sum;
    c.p2 /= sum;
    c.p3 /= sum;
    if (!(c.learning_rate > 0.0)) throw UsageError("fine-tune learning rate must be > 0");
    if (!(c.via_smoothing >= 0.0)) throw UsageError("via smoothing must be >= 0");
    return c;
  }

  json to_json() const {
    return json{{"p1", p1},
                {"p2", p2},
                {"p3", p3},
                {"max_iters", max_iters},
                {"tolerance", tolerance},
                {"frozen_layers", frozen_layers},
                {"learning_rate", learning_rate},
                {"via_smoothing", via_smoothing}};
  }
  static FinetuneConfig from_json(const json& j) { return from_json(j, FinetuneConfig{}); }
  static FinetuneConfig from_json(const json& j, FinetuneConfig c) {
    c.p1 = j.value("p1", c.p1);
    c.p2 = j.value("p2", c.p2);
    c.p3 = j.value("p3", c.p3);
    c.max_iters = j.value("max_iters", c.max_iters);
    c.tolerance = j.value("tolerance", c.tolerance);
    c.frozen_layers = j.value("frozen_layers", c.frozen_layers);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.via_smoothing = j.value("via_smoothing", c.via_smoothing);
    c.normalized();
    return c;
  }
};

struct GenerationDiagnostics {
  double end_error = 0.0;           // normalized units
  std::vector<double> via_errors;   // normalized units, one per via-point
  double shape_error = 0.0;         // against the generated trajectory before fine-tuning
  std::size_t iterations = 0;       // accepted fine-tune steps
  std::size_t rejected_steps = 0;
  std::vector<double> loss_history; // loss at each accepted iterate, starting with the initial one
  double seconds = 0.0;
  bool warning = false;
  std::string message;
};

struct GenerationResult {
  Trajectory trajectory;  // workspace units
  Trajectory normalized;
  ForceProfile force;     // decoded force before scaling
  ScaleParams scale;
  Vec latent;
  GenerationDiagnostics diagnostics;
  std::optional<nn::Network> tuned_decoder;  // set by finetune
};

/// Minimum Euclidean distance from a point to any trajectory sample.
inline double trajectory_distance(const Trajectory& traj, const Vec& point) {
  if (traj.points.rows() == 0) throw DataError("empty trajectory");
  if (traj.points.cols() != point.size()) throw DataError("point dimensionality mismatch");
  return std::sqrt((traj.points.rowwise() - point.transpose()).rowwise().squaredNorm().minCoeff());
}

/// Mean per-point Euclidean distance between two equally long trajectories.
inline double shape_error(const Trajectory& initial, const Trajectory& tuned) {
  if (initial.points.rows() != tuned.points.rows() || initial.points.cols() != tuned.points.cols())
    throw DataError("shape error needs trajectories of equal length, got " +
                    std::to_string(initial.points.rows()) + " and " +
                    std::to_string(tuned.points.rows()));
  return (tuned.points - initial.points).rowwise().norm().mean();
}

namespace detail {

inline ForceProfile scaled(const ForceProfile& f, const Vec& s) {
  ForceProfile out = f;
  out.f = f.f * s.asDiagonal();
  return out;
}

inline double end_error(const Trajectory& t, const Vec& goal) { return (t.back() - goal).norm(); }

}  // namespace detail

/// Per-dimension force multipliers taking the reference rollout's span onto
/// goal - start, then up to five fixed-point corrections on the endpoint.
/// A correction is kept only if it lowers the endpoint error.
inline ScaleParams compute_scale(const DmpConfig& cfg, const ForceProfile& force, const Vec& start,
                                 const Vec& goal, const Trajectory& reference) {
  const Eigen::Index d = start.size();
  ScaleParams sp;
  sp.s = Vec::Ones(d);
  const Vec ref_span = reference.back() - reference.front();
  for (Eigen::Index c = 0; c < d; ++c) {
    const double want = goal[c] - start[c];
    if (std::abs(ref_span[c]) > kSpanEpsilon) {
      sp.s[c] = want / ref_span[c];
    } else if (std::abs(want) > kSpanEpsilon) {
      throw NumericalError("reference trajectory has no extent in dimension " + std::to_string(c) +
                           "; its shape cannot be scaled to reach the goal there");
    }
  }
  Trajectory t = integrate(cfg, detail::scaled(force, sp.s), start, goal);
  sp.endpoint_error = detail::end_error(t, goal);
  for (int k = 0; k < 5 && sp.endpoint_error >= 1e-3; ++k) {
    Vec next = sp.s;
    const Vec span = t.back() - t.front();
    for (Eigen::Index c = 0; c < d; ++c)
      if (std::abs(span[c]) > kSpanEpsilon) next[c] *= 1.0 + (goal[c] - t.back()[c]) / span[c];
    Trajectory cand = integrate(cfg, detail::scaled(force, next), start, goal);
    const double err = detail::end_error(cand, goal);
    if (!(err < sp.endpoint_error)) break;
    sp.s = next;
    sp.endpoint_error = err;
    t = std::move(cand);
    ++sp.refinements;
  }
  return sp;
}

/// Decodes a force for spec.task_id (z from spec.latent, else drawn from a
/// standard normal seeded with `seed`), scales it and rolls it out from
/// start to goal. Positions are mapped through the task's normalization.
inline GenerationResult generate(const CvaeModel& model, const DmpConfig& cfg, const TaskSpec& spec,
                                 std::uint64_t seed = 0) {
  cfg.validate();
  spec.validate(model.arch.dims);
  const NormalizationRecord& rec = model.record(spec.task_id);
  const TaskAnchor& anchor = model.anchor(spec.task_id);
  GenerationResult r;
  if (spec.latent) {
    if (static_cast<std::size_t>(spec.latent->size()) != model.arch.latent_dim)
      throw UsageError("latent vector must have " + std::to_string(model.arch.latent_dim) +
                       " entries");
    r.latent = *spec.latent;
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    r.latent.resize(static_cast<Eigen::Index>(model.arch.latent_dim));
    for (Eigen::Index i = 0; i < r.latent.size(); ++i) r.latent[i] = normal(rng);
  }
  const Vec start = rec.to_normalized(spec.start);
  const Vec goal = rec.to_normalized(spec.goal);
  r.force = decode(model, cfg, r.latent, spec.task_id);
  const Trajectory reference = integrate(cfg, r.force, anchor.start, anchor.goal);
  r.scale = compute_scale(cfg, r.force, start, goal, reference);
  r.normalized = integrate(cfg, detail::scaled(r.force, r.scale.s), start, goal);
  r.normalized.task_id = spec.task_id;
  r.trajectory = denormalize(r.normalized, rec);
  r.trajectory.points.row(0) = spec.start.transpose();
  r.diagnostics.end_error = detail::end_error(r.normalized, goal);
  for (const auto& v : spec.via_points)
    r.diagnostics.via_errors.push_back(trajectory_distance(r.normalized, rec.to_normalized(v)));
  return r;
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Everything the fine-tune objective needs besides the trainable values.
struct FinetuneProblem {
  const CvaeModel* model = nullptr;
  DmpConfig cfg;
  int task_id = 1;
  Vec latent;
  Vec start;  // normalized
  Vec goal;   // normalized
  std::vector<Vec> via_points;  // normalized
  Mat reference;                // normalized points of the initial trajectory
  FinetuneConfig weights;       // normalized weights
};

struct FinetuneEvaluation {
  double loss = 0.0;
  double shape_term = 0.0;
  double end_term = 0.0;
  double via_term = 0.0;
  Trajectory trajectory;  // normalized
  ForceProfile force;     // decoded, unscaled
  std::vector<nn::Tensor> decoder_grads;  // Network::parameters() order
  Vec scale_grad;
};

/// p1 * sum ||x' - x||^2 / L + p2 * ||x'_end - g||^2 + p3 * sum_k min_i ||x'_i - c_k||,
/// optionally with gradients for every decoder block and for s. With a
/// positive via_smoothing eps the distance becomes sqrt(d^2 + eps^2) - eps;
/// the gradient follows the nearest sample.
inline FinetuneEvaluation finetune_objective(const FinetuneProblem& pb, const nn::Network& decoder,
                                             const Vec& s, bool with_grad) {
  const CvaeModel& m = *pb.model;
  FinetuneEvaluation ev;
  auto [out, tape] = nn::forward(decoder, decoder_input(m, pb.latent, pb.task_id));
  ev.force = unpack_force(m, out, model_phase(m, pb.cfg));
  ev.trajectory = integrate(pb.cfg, detail::scaled(ev.force, s), pb.start, pb.goal);
  const Mat& x = ev.trajectory.points;
  const auto L = static_cast<double>(x.rows());
  const Eigen::Index last = x.rows() - 1;
  const FinetuneConfig& w = pb.weights;

  Mat gx = Mat::Zero(x.rows(), x.cols());
  const Mat diff = x - pb.reference;
  ev.shape_term = diff.squaredNorm() / L;
  gx += (2.0 * w.p1 / L) * diff;
  const Vec end = x.row(last).transpose() - pb.goal;
  ev.end_term = end.squaredNorm();
  gx.row(last) += (2.0 * w.p2) * end.transpose();
  for (const auto& c : pb.via_points) {
    Eigen::Index arg = 0;
    const double sq = (x.rowwise() - c.transpose()).rowwise().squaredNorm().minCoeff(&arg);
    const double eps = w.via_smoothing;
    const double dist = std::sqrt(sq + eps * eps);
    ev.via_term += dist - eps;
    if (dist > 0.0) gx.row(arg) += (w.p3 / dist) * (x.row(arg) - c.transpose());
  }
  ev.loss = w.p1 * ev.shape_term + w.p2 * ev.end_term + w.p3 * ev.via_term;
  if (!with_grad) return ev;

  const Mat fbar = integrate_vjp(pb.cfg, gx);  // dL / d(scaled force)
  ev.scale_grad = (fbar.array() * ev.force.f.array()).colwise().sum().transpose();
  const std::size_t n = m.arch.n_steps;
  nn::Tensor gout(out.shape());
  for (std::size_t c = 0; c < m.arch.dims; ++c)
    for (std::size_t t = 0; t < n; ++t) {
      const auto ti = static_cast<Eigen::Index>(t);
      const auto ci = static_cast<Eigen::Index>(c);
      gout[c * n + t] = fbar(ti, ci) * s[ci] * m.force_scale[ci];
    }
  ev.decoder_grads = nn::backward(decoder, tape, gout).params;
  return ev;
}

namespace detail {

/// Decoder blocks belonging to the first `frozen_layers` dense layers.
inline std::size_t frozen_blocks(const nn::Network& decoder, std::size_t frozen_layers) {
  std::size_t dense_seen = 0;
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    if (std::holds_alternative<nn::Dense>(decoder.layers()[i])) {
      if (dense_seen == frozen_layers) return decoder.first_block_of_layer(i);
      ++dense_seen;
    }
  }
  return decoder.first_block_of_layer(decoder.size());
}

}  // namespace detail

/// Adam on the unfrozen decoder blocks and s, minimizing finetune_objective.
/// A step that raises the loss is undone and retried at half the learning
/// rate, so accepted losses never increase. Stops after max_iters accepted
/// steps, when the loss or its improvement drops below the tolerance, or when
/// the step size collapses. The model itself is not modified.
inline GenerationResult finetune(const CvaeModel& model, const DmpConfig& cfg, const TaskSpec& spec,
                                 const GenerationResult& initial, const FinetuneConfig& fcfg_in) {
  const auto t0 = std::chrono::steady_clock::now();
  const FinetuneConfig fcfg = fcfg_in.normalized();
  spec.validate(model.arch.dims);
  const NormalizationRecord& rec = model.record(spec.task_id);

  FinetuneProblem pb;
  pb.model = &model;
  pb.cfg = cfg;
  pb.task_id = spec.task_id;
  pb.latent = initial.latent;
  pb.start = rec.to_normalized(spec.start);
  pb.goal = rec.to_normalized(spec.goal);
  for (const auto& v : spec.via_points) pb.via_points.push_back(rec.to_normalized(v));
  pb.reference = initial.normalized.points;
  pb.weights = fcfg;

  nn::Network decoder = model.decoder;
  nn::Tensor s({static_cast<std::size_t>(initial.scale.s.size())});
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = initial.scale.s[static_cast<Eigen::Index>(i)];
  auto as_vec = [](const nn::Tensor& t) {
    Vec v(static_cast<Eigen::Index>(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) v[static_cast<Eigen::Index>(i)] = t[i];
    return v;
  };
  auto param_list = [&](nn::Network& net) {
    std::vector<nn::Tensor*> p = net.parameters();
    p.push_back(&s);
    return p;
  };

  std::vector<std::string> names = decoder.parameter_names("decoder");
  names.push_back("scale");
  std::vector<nn::Tensor*> params = param_list(decoder);
  nn::Adam opt(nn::AdamConfig{fcfg.learning_rate},
               std::vector<const nn::Tensor*>(params.begin(), params.end()), names);
  const std::size_t frozen = std::min(detail::frozen_blocks(decoder, fcfg.frozen_layers), params.size() - 1);
  for (std::size_t b = 0; b < frozen; ++b) opt.freeze(b);

  GenerationResult r = initial;
  auto& diag = r.diagnostics;
  diag = GenerationDiagnostics{};
  FinetuneEvaluation cur = finetune_objective(pb, decoder, as_vec(s), true);
  diag.loss_history.push_back(cur.loss);

  const double min_lr = fcfg.learning_rate * std::ldexp(1.0, -20);
  while (diag.iterations < fcfg.max_iters && cur.loss >= fcfg.tolerance) {
    std::vector<nn::Tensor> grads = cur.decoder_grads;
    nn::Tensor gs(s.shape());
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] = cur.scale_grad[static_cast<Eigen::Index>(i)];
    grads.push_back(std::move(gs));

    const nn::Network saved_decoder = decoder;
    const nn::Tensor saved_s = s;
    const nn::Adam saved_opt = opt;
    params = param_list(decoder);
    try {
      opt.step(params, grads);
    } catch (const NumericalError& e) {
      diag.warning = true;
      diag.message = e.what();
      break;
    }
    FinetuneEvaluation next;
    bool finite = true;
    try {
      next = finetune_objective(pb, decoder, as_vec(s), true);
      finite = std::isfinite(next.loss);
    } catch (const NumericalError&) {
      finite = false;
    }
    if (!finite || next.loss > cur.loss) {
      decoder = saved_decoder;
      s = saved_s;
      opt = saved_opt;
      opt.reset_moments();
      opt.config().lr *= 0.5;
      ++diag.rejected_steps;
      if (!finite) {
        diag.warning = true;
        diag.message = "non-finite fine-tune loss; step undone";
      }
      if (opt.config().lr < min_lr) break;
      continue;
    }
    const double improvement = cur.loss - next.loss;
    opt.config().lr = std::min(fcfg.learning_rate, opt.config().lr * 2.0);
    cur = std::move(next);
    ++diag.iterations;
    diag.loss_history.push_back(cur.loss);
    if (improvement < fcfg.tolerance) break;
  }

  r.force = cur.force;
  r.scale.s = as_vec(s);
  r.tuned_decoder = std::move(decoder);
  r.normalized = cur.trajectory;
  r.normalized.task_id = spec.task_id;
  r.trajectory = denormalize(r.normalized, rec);
  r.trajectory.points.row(0) = spec.start.transpose();
  diag.end_error = detail::end_error(r.normalized, pb.goal);
  for (const auto& v : pb.via_points) diag.via_errors.push_back(trajectory_distance(r.normalized, v));
  diag.shape_error = shape_error(initial.normalized, r.normalized);
  diag.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// Export

inline json diagnostics_json(const GenerationResult& r, const TaskSpec& spec,
                             const ArtifactStamp* stamp = nullptr) {
  json j;
  j["task_id"] = spec.task_id;
  j["start"] = to_json(spec.start);
  j["goal"] = to_json(spec.goal);
  json via = json::array();
  for (const auto& v : spec.via_points) via.push_back(to_json(v));
  j["via_points"] = via;
  j["z"] = to_json(r.latent);
  j["s"] = to_json(r.scale.s);
  j["scale_refinements"] = r.scale.refinements;
  j["end_error"] = r.diagnostics.end_error;
  j["via_errors"] = r.diagnostics.via_errors;
  j["shape_error"] = r.diagnostics.shape_error;
  j["iterations"] = r.diagnostics.iterations;
  j["rejected_steps"] = r.diagnostics.rejected_steps;
  j["loss_history"] = r.diagnostics.loss_history;
  j["warning"] = r.diagnostics.warning;
  if (!r.diagnostics.message.empty()) j["message"] = r.diagnostics.message;
  if (stamp) j["stamp"] = stamp->to_json();
  return j;
}

/// Trajectory CSV in the dataset format plus a JSON diagnostics sidecar.
inline void export_generation(const GenerationResult& r, const TaskSpec& spec,
                              const std::filesystem::path& csv, const ArtifactStamp* stamp = nullptr) {
  write_text_file(csv, trajectories_to_csv({{spec.task_id, &r.trajectory}}, stamp));
  write_text_file(sidecar_path(csv), diagnostics_json(r, spec, stamp).dump(2) + "\n");
}

}  // namespace cvdmp

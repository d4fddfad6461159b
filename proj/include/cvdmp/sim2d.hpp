#pragma once

// Planar kinematic workspace: a point end-effector replays a trajectory next
// to a square cube. Reaching succeeds on contact; pushing moves the cube
// quasi-statically along the effector's motion while they touch.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cvdmp/cvae.hpp"
#include "cvdmp/dmp.hpp"
#include "cvdmp/error.hpp"
#include "cvdmp/generator.hpp"
#include "cvdmp/io.hpp"

namespace cvdmp {

enum class SimTask { kReach, kPush };

inline std::string to_string(SimTask t) { return t == SimTask::kReach ? "reach" : "push"; }

inline SimTask sim_task_from_string(const std::string& s) {
  if (s == "reach") return SimTask::kReach;
  if (s == "push") return SimTask::kPush;
  throw UsageError("unknown simulator task '" + s + "'; expected reach or push");
}

struct Workspace {
  Vec lo = Vec::Zero(2);
  Vec hi = Vec::Ones(2);
  Vec cube = Vec::Constant(2, 0.5);  // center
  double half_extent = 0.025;
  Vec goal_marker = Vec::Constant(2, 0.5);
  double contact_radius = 0.03;
  std::uint64_t rng_seed = 0;
  SimTask task = SimTask::kReach;

  /// Euclidean distance from p to the cube's square (0 inside).
  double distance_to_cube(const Vec& p) const { return distance_to_cube(p, cube); }
  double distance_to_cube(const Vec& p, const Vec& center) const {
    const Vec outside = ((p - center).cwiseAbs().array() - half_extent).max(0.0).matrix();
    return outside.norm();
  }
};

/// Fixed start pose of every episode.
inline Vec home_pose() { return (Vec(2) << 0.1, 0.9).finished(); }

struct EpisodeResult {
  bool success = false;
  Vec final_effector;
  Vec final_cube;
  double min_distance = 0.0;    // effector to cube surface
  double goal_distance = 0.0;   // cube center to goal marker (push)
  std::vector<Vec> cube_trace;  // one entry per executed step
  std::vector<Vec> effector_trace;
  std::size_t steps = 0;
  bool cube_clamped = false;
  bool trajectory_clipped = false;
};

namespace detail {

inline Vec uniform_point(std::mt19937_64& rng, const Vec& lo, const Vec& hi) {
  Vec p(lo.size());
  for (Eigen::Index i = 0; i < lo.size(); ++i)
    p[i] = std::uniform_real_distribution<double>(lo[i], hi[i])(rng);
  return p;
}

/// Central 60% of the workspace.
inline std::pair<Vec, Vec> central_region(const Workspace& ws) {
  const Vec margin = 0.2 * (ws.hi - ws.lo);
  return {ws.lo + margin, ws.hi - margin};
}

inline bool inside(const Vec& p, const Vec& lo, const Vec& hi) {
  return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
}

}  // namespace detail

/// Cube uniform in the central region; the task is a digit-1 stroke from home
/// to the cube center.
inline std::pair<Workspace, TaskSpec> make_reach_episode(std::uint64_t seed) {
  Workspace ws;
  ws.rng_seed = seed;
  ws.task = SimTask::kReach;
  std::mt19937_64 rng(seed);
  const auto [lo, hi] = detail::central_region(ws);
  ws.cube = detail::uniform_point(rng, lo, hi);
  ws.goal_marker = ws.cube;
  TaskSpec spec;
  spec.task_id = 1;
  spec.start = home_pose();
  spec.goal = ws.cube;
  return {ws, spec};
}

/// Pre-push point: behind the cube on the goal-to-cube line, one half-extent
/// plus the contact radius from the center.
inline Vec pre_push_point(const Workspace& ws) {
  const Vec u = (ws.goal_marker - ws.cube).normalized();
  return ws.cube - (ws.half_extent + ws.contact_radius) * u;
}

/// Effector end point that leaves the cube center on the goal marker.
inline Vec push_effector_goal(const Workspace& ws) {
  const Vec u = (ws.goal_marker - ws.cube).normalized();
  return ws.goal_marker - (ws.half_extent + ws.contact_radius) * u;
}

/// Cube in the lower middle of the workspace (x in [0.3, 0.55], y in
/// [0.2, 0.6]) so the upper arc of the stroke clears it, goal in the central
/// region, the push heading within 10 degrees of +x (the direction of the
/// digit-2 base stroke) over 0.15 to 0.25. The task is a digit-2 stroke from
/// home through the pre-push point.
inline std::pair<Workspace, TaskSpec> make_push_episode(std::uint64_t seed) {
  Workspace ws;
  ws.rng_seed = seed;
  ws.task = SimTask::kPush;
  std::mt19937_64 rng(seed);
  const auto [lo, hi] = detail::central_region(ws);
  const double max_angle = 10.0 * std::numbers::pi / 180.0;
  const Vec cube_lo = (Vec(2) << 0.3, 0.2).finished();
  const Vec cube_hi = (Vec(2) << 0.55, 0.6).finished();
  for (int attempt = 0; attempt < 100; ++attempt) {
    const Vec cube = detail::uniform_point(rng, cube_lo, cube_hi);
    const double angle = std::uniform_real_distribution<double>(-max_angle, max_angle)(rng);
    const double dist = std::uniform_real_distribution<double>(0.15, 0.25)(rng);
    ws.cube = cube;
    ws.goal_marker = cube + dist * (Vec(2) << std::cos(angle), std::sin(angle)).finished();
    const Vec pre = pre_push_point(ws);
    if (!detail::inside(ws.goal_marker, lo, hi) || !detail::inside(pre, ws.lo, ws.hi)) continue;
    if (pre[0] <= home_pose()[0]) continue;
    TaskSpec spec;
    spec.task_id = 2;
    spec.start = home_pose();
    spec.goal = push_effector_goal(ws);
    spec.via_points = {pre};
    return {ws, spec};
  }
  throw DataError("could not sample a reachable push episode for seed " + std::to_string(seed));
}

/// Replays the trajectory point by point. When a step ends inside the contact
/// shell the cube slides along the step direction until the effector sits on
/// the shell boundary.
inline EpisodeResult run_episode(Workspace ws, const Trajectory& traj) {
  EpisodeResult r;
  const double r_c = ws.contact_radius;
  auto succeeded = [&](const Vec& eff) {
    return ws.task == SimTask::kReach ? ws.distance_to_cube(eff) <= r_c
                                      : (ws.cube - ws.goal_marker).norm() <= r_c;
  };
  // reaching ends at first contact, before the cube is displaced
  auto touched = [&](const Vec& eff) {
    return ws.task == SimTask::kReach && ws.distance_to_cube(eff) <= r_c;
  };
  auto clip = [&](Vec p) {
    const Vec c = p.cwiseMax(ws.lo).cwiseMin(ws.hi);
    if (c != p) r.trajectory_clipped = true;
    return c;
  };
  const Vec cube_lo = ws.lo.array() + ws.half_extent;
  const Vec cube_hi = ws.hi.array() - ws.half_extent;

  Vec eff = clip(traj.front());
  r.min_distance = ws.distance_to_cube(eff);
  r.effector_trace.push_back(eff);
  r.cube_trace.push_back(ws.cube);
  r.success = succeeded(eff);
  for (Eigen::Index t = 1; t < traj.points.rows() && !r.success; ++t) {
    const Vec next = clip(traj.points.row(t).transpose());
    const Vec delta = next - eff;
    const double len = delta.norm();
    if (touched(next)) {
      eff = next;
      r.min_distance = std::min(r.min_distance, ws.distance_to_cube(eff));
      r.effector_trace.push_back(eff);
      r.cube_trace.push_back(ws.cube);
      r.success = true;
      break;
    }
    if (len > 0.0 && ws.distance_to_cube(next) < r_c) {
      const Vec u = delta / len;
      double shift = len;
      if (ws.distance_to_cube(next, ws.cube + len * u) >= r_c) {
        double a = 0.0, b = len;
        for (int k = 0; k < 60; ++k) {
          const double m = 0.5 * (a + b);
          (ws.distance_to_cube(next, ws.cube + m * u) < r_c ? a : b) = m;
        }
        shift = b;
      }
      const Vec moved = ws.cube + shift * u;
      const Vec clamped = moved.cwiseMax(cube_lo).cwiseMin(cube_hi);
      if (clamped != moved) r.cube_clamped = true;
      ws.cube = clamped;
    }
    eff = next;
    r.min_distance = std::min(r.min_distance, ws.distance_to_cube(eff));
    r.effector_trace.push_back(eff);
    r.cube_trace.push_back(ws.cube);
    r.success = succeeded(eff);
  }
  r.steps = r.cube_trace.size();
  r.final_effector = eff;
  r.final_cube = ws.cube;
  r.goal_distance = (ws.cube - ws.goal_marker).norm();
  return r;
}

struct EpisodeRecord {
  std::uint64_t seed = 0;
  Workspace workspace;
  TaskSpec spec;
  std::optional<GenerationResult> generation;
  EpisodeResult result;
  std::string error;  // set when generation failed
};

struct SimOptions {
  std::uint64_t seed = 0;      // episode i uses seed + i
  bool use_via_point = true;   // push: fine-tune towards the pre-push point
  FinetuneConfig finetune;
  std::size_t threads = 1;
};

struct EvaluationReport {
  SimTask task = SimTask::kReach;
  std::optional<double> success_rate;  // undefined for zero episodes
  double mean_goal_distance = 0.0;
  double mean_min_distance = 0.0;
  std::vector<EpisodeRecord> episodes;
};

/// Episode spec -> generate -> (push) fine-tune -> replay, for each seed.
/// Generation failures count as unsuccessful episodes.
inline EvaluationReport evaluate(const CvaeModel& model, const DmpConfig& cfg, std::size_t episodes,
                                 SimTask task, const SimOptions& opt = {}) {
  EvaluationReport rep;
  rep.task = task;
  rep.episodes.resize(episodes);
  parallel_for(episodes, opt.threads, [&](std::size_t i) {
    EpisodeRecord& rec = rep.episodes[i];
    rec.seed = opt.seed + i;
    auto [ws, spec] = task == SimTask::kReach ? make_reach_episode(rec.seed) : make_push_episode(rec.seed);
    rec.workspace = ws;
    rec.spec = spec;
    try {
      TaskSpec gen_spec = spec;
      if (!opt.use_via_point) gen_spec.via_points.clear();
      GenerationResult g = generate(model, cfg, gen_spec, rec.seed);
      if (task == SimTask::kPush && !gen_spec.via_points.empty())
        g = finetune(model, cfg, gen_spec, g, opt.finetune);
      rec.result = run_episode(ws, g.trajectory);
      rec.generation = std::move(g);
    } catch (const Error& e) {
      rec.error = e.what();
      rec.result = EpisodeResult{};
      rec.result.final_cube = ws.cube;
      rec.result.goal_distance = (ws.cube - ws.goal_marker).norm();
    }
  });
  if (episodes == 0) return rep;
  std::size_t ok = 0;
  for (const auto& e : rep.episodes) {
    ok += e.result.success ? 1 : 0;
    rep.mean_goal_distance += e.result.goal_distance;
    rep.mean_min_distance += e.result.min_distance;
  }
  const auto n = static_cast<double>(episodes);
  rep.success_rate = static_cast<double>(ok) / n;
  rep.mean_goal_distance /= n;
  rep.mean_min_distance /= n;
  return rep;
}

/// step, effector_x, effector_y, cube_x, cube_y
inline std::string episode_trace_csv(const EpisodeResult& r, const ArtifactStamp* stamp = nullptr) {
  std::string out;
  if (stamp) out += stamp->comment_line() + "\n";
  out += "step,effector_x,effector_y,cube_x,cube_y\n";
  for (std::size_t i = 0; i < r.cube_trace.size(); ++i) {
    out += std::to_string(i);
    for (double v : {r.effector_trace[i][0], r.effector_trace[i][1], r.cube_trace[i][0], r.cube_trace[i][1]})
      out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

inline json episode_summary_json(const EpisodeRecord& e) {
  json j{{"seed", e.seed},
         {"success", e.result.success},
         {"steps", e.result.steps},
         {"min_distance", e.result.min_distance},
         {"goal_distance", e.result.goal_distance},
         {"cube_start", to_json(e.workspace.cube)},
         {"goal_marker", to_json(e.workspace.goal_marker)},
         {"cube_clamped", e.result.cube_clamped},
         {"trajectory_clipped", e.result.trajectory_clipped}};
  if (e.result.final_cube.size()) j["final_cube"] = to_json(e.result.final_cube);
  if (e.result.final_effector.size()) j["final_effector"] = to_json(e.result.final_effector);
  if (!e.error.empty()) j["error"] = e.error;
  if (e.generation) {
    j["end_error"] = e.generation->diagnostics.end_error;
    j["via_errors"] = e.generation->diagnostics.via_errors;
  }
  return j;
}

}  // namespace cvdmp

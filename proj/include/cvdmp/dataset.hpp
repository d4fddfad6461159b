#pragma once

// Demonstration data: built-in digit strokes, min-max normalization,
// weight-noise augmentation and the CSV trajectory format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cvdmp/dmp.hpp"
#include "cvdmp/error.hpp"
#include "cvdmp/io.hpp"

namespace cvdmp {

enum class DemoSource { kTemplate, kIngested, kAugmented };

inline std::string to_string(DemoSource s) {
  switch (s) {
    case DemoSource::kTemplate: return "template";
    case DemoSource::kIngested: return "ingested";
    case DemoSource::kAugmented: return "augmented";
  }
  return "unknown";
}

inline DemoSource demo_source_from_string(const std::string& s) {
  if (s == "template") return DemoSource::kTemplate;
  if (s == "ingested") return DemoSource::kIngested;
  if (s == "augmented") return DemoSource::kAugmented;
  throw DataError("unknown demonstration source '" + s + "'");
}

struct Demonstration {
  Trajectory trajectory;
  int task_id = 0;
  DemoSource source = DemoSource::kTemplate;
};

/// Per-dimension affine map x -> (x - min) / (max - min).
struct NormalizationRecord {
  Vec min;
  Vec max;

  Vec span() const { return max - min; }
  Vec to_normalized(const Vec& p) const { return (p - min).cwiseQuotient(span()); }
  Vec from_normalized(const Vec& p) const { return min + p.cwiseProduct(span()); }

  Trajectory apply(const Trajectory& t) const {
    Trajectory out = t;
    for (Eigen::Index i = 0; i < t.points.rows(); ++i)
      out.points.row(i) = to_normalized(t.points.row(i).transpose()).transpose();
    return out;
  }
  Trajectory invert(const Trajectory& t) const {
    Trajectory out = t;
    for (Eigen::Index i = 0; i < t.points.rows(); ++i)
      out.points.row(i) = from_normalized(t.points.row(i).transpose()).transpose();
    return out;
  }

  static NormalizationRecord identity(std::size_t dims) {
    const auto d = static_cast<Eigen::Index>(dims);
    return {Vec::Zero(d), Vec::Ones(d)};
  }

  json to_json() const { return json{{"min", cvdmp::to_json(min)}, {"max", cvdmp::to_json(max)}}; }
  static NormalizationRecord from_json(const json& j) {
    NormalizationRecord r{vec_from_json(j.at("min")), vec_from_json(j.at("max"))};
    if (r.min.size() != r.max.size() || ((r.max - r.min).array() <= 0.0).any())
      throw DataError("normalization record is not invertible");
    return r;
  }
};

enum class NormalizeMode {
  kPerDimension,    // every dimension mapped onto [0, 1] independently
  kPreserveAspect,  // one common scale, the widest dimension spans [0, 1]
};

/// Record covering a set of trajectories jointly.
inline NormalizationRecord fit_normalization(std::span<const Trajectory> trajs,
                                             NormalizeMode mode = NormalizeMode::kPreserveAspect) {
  if (trajs.empty()) throw DataError("cannot normalize an empty trajectory set");
  const Eigen::Index d = trajs.front().points.cols();
  Vec lo = Vec::Constant(d, std::numeric_limits<double>::infinity());
  Vec hi = Vec::Constant(d, -std::numeric_limits<double>::infinity());
  for (const auto& t : trajs) {
    if (t.points.cols() != d) throw DataError("trajectories disagree in dimensionality");
    lo = lo.cwiseMin(t.points.colwise().minCoeff().transpose());
    hi = hi.cwiseMax(t.points.colwise().maxCoeff().transpose());
  }
  NormalizationRecord rec{lo, hi};
  if (mode == NormalizeMode::kPerDimension) {
    for (Eigen::Index c = 0; c < d; ++c)
      if (!(hi[c] > lo[c]))
        throw DataError("dimension " + std::to_string(c) + " is flat (max == min)");
    return rec;
  }
  const double widest = (hi - lo).maxCoeff();
  if (!(widest > 0.0)) throw DataError("every dimension is flat (max == min)");
  rec.max = lo + Vec::Constant(d, widest);
  return rec;
}

inline std::pair<Trajectory, NormalizationRecord> normalize(
    const Trajectory& traj, NormalizeMode mode = NormalizeMode::kPerDimension) {
  NormalizationRecord rec = fit_normalization(std::span<const Trajectory>(&traj, 1), mode);
  return {rec.apply(traj), rec};
}

inline Trajectory denormalize(const Trajectory& traj, const NormalizationRecord& rec) {
  return rec.invert(traj);
}

struct AugmentConfig {
  double k = 0.1;
  std::size_t copies_per_demo = 100;
  std::uint64_t rng_seed = 7;

  void validate() const {
    if (!std::isfinite(k) || k < 0.0) throw UsageError("augmentation k must be >= 0");
  }
  json to_json() const {
    return json{{"k", k}, {"copies_per_demo", copies_per_demo}, {"rng_seed", rng_seed}};
  }
  static AugmentConfig from_json(const json& j) {
    AugmentConfig c;
    c.k = j.value("k", c.k);
    c.copies_per_demo = j.value("copies_per_demo", c.copies_per_demo);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.validate();
    return c;
  }
};

/// Demonstrations grouped by task id. Trajectories are stored in workspace
/// units; `normalization` maps each task's set onto the unit box.
struct DatasetBundle {
  std::map<int, std::vector<Demonstration>> tasks;
  std::map<int, NormalizationRecord> normalization;
  DmpConfig dmp;
  std::optional<AugmentConfig> augmentation;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [id, demos] : tasks) n += demos.size();
    return n;
  }
  bool empty() const { return size() == 0; }
  std::vector<int> task_ids() const {
    std::vector<int> ids;
    for (const auto& [id, demos] : tasks) ids.push_back(id);
    return ids;
  }
  const NormalizationRecord& record_for(int task_id) const {
    auto it = normalization.find(task_id);
    if (it == normalization.end())
      throw DataError("no normalization record for task " + std::to_string(task_id));
    return it->second;
  }
};

// ---------------------------------------------------------------------------
// Digit stroke templates

namespace detail {

/// Clamped uniform cubic B-spline through the control polygon's end points.
inline Vec bspline_point(const std::vector<Vec>& ctrl, double u) {
  constexpr int p = 3;
  const int n = static_cast<int>(ctrl.size());
  const int segments = n - p;
  std::vector<double> knots(static_cast<std::size_t>(n + p + 1));
  for (int i = 0; i < n + p + 1; ++i)
    knots[static_cast<std::size_t>(i)] =
        static_cast<double>(std::clamp(i - p, 0, segments));
  const double x = std::clamp(u, 0.0, 1.0) * segments;
  int k = std::min(static_cast<int>(std::floor(x)) + p, n - 1);
  std::vector<Vec> d(ctrl.begin() + (k - p), ctrl.begin() + k + 1);
  for (int r = 1; r <= p; ++r) {
    for (int j = p; j >= r; --j) {
      const double lo = knots[static_cast<std::size_t>(j + k - p)];
      const double hi = knots[static_cast<std::size_t>(j + 1 + k - r)];
      const double a = (hi == lo) ? 0.0 : (x - lo) / (hi - lo);
      d[static_cast<std::size_t>(j)] =
          (1.0 - a) * d[static_cast<std::size_t>(j - 1)] + a * d[static_cast<std::size_t>(j)];
    }
  }
  return d[p];
}

inline std::vector<Vec> control_polygon(int digit) {
  auto pts = [](std::initializer_list<std::pair<double, double>> xy) {
    std::vector<Vec> out;
    for (auto [x, y] : xy) out.push_back((Vec(2) << x, y).finished());
    return out;
  };
  switch (digit) {
    case 1: return pts({{0.0, 1.0}, {0.3, 0.72}, {0.62, 0.36}, {1.0, 0.0}});
    case 2:
      return pts({{0.0, 1.0}, {0.45, 1.0}, {0.95, 0.95}, {0.85, 0.6}, {0.4, 0.3},
                  {0.0, 0.0}, {0.35, 0.0}, {0.7, 0.0}, {1.0, 0.0}});
    case 3:
      return pts({{0.0, 1.0}, {0.5, 1.0}, {0.95, 0.9}, {0.8, 0.6}, {0.25, 0.5},
                  {0.8, 0.42}, {1.0, 0.2}, {1.0, 0.0}});
    case 7:
      return pts({{0.0, 1.0}, {0.45, 1.0}, {0.95, 1.0}, {0.9, 0.65}, {0.92, 0.3}, {1.0, 0.0}});
    default: break;
  }
  throw UsageError("unknown digit template " + std::to_string(digit) +
                   "; supported ids are 1, 2, 3, 7");
}

}  // namespace detail

inline std::vector<int> supported_digits() { return {1, 2, 3, 7}; }

/// One stroke per digit in the unit square, from [0, 1] to [1, 0], sampled at
/// cfg.n_steps points with a minimum-jerk profile on the spline parameter.
/// The pen slows down where control points bunch up, like a hand at a corner.
inline Trajectory digit_template(int digit, const DmpConfig& cfg = {}) {
  cfg.validate();
  if (cfg.dims != 2) throw UsageError("digit templates are two-dimensional");
  const auto ctrl = detail::control_polygon(digit);
  Trajectory t;
  t.dt = cfg.dt;
  t.task_id = digit;
  t.points.resize(static_cast<Eigen::Index>(cfg.n_steps), 2);
  for (std::size_t k = 0; k < cfg.n_steps; ++k) {
    const double u = static_cast<double>(k) / static_cast<double>(cfg.n_steps - 1);
    const double s = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
    t.points.row(static_cast<Eigen::Index>(k)) = detail::bspline_point(ctrl, s).transpose();
  }
  t.points.row(0) = ctrl.front().transpose();
  t.points.row(t.points.rows() - 1) = ctrl.back().transpose();
  return t;
}

inline DatasetBundle digit_templates(std::span<const int> task_ids, const DmpConfig& cfg = {}) {
  DatasetBundle bundle;
  bundle.dmp = cfg;
  for (int id : task_ids) {
    Demonstration demo{digit_template(id, cfg), id, DemoSource::kTemplate};
    bundle.tasks[id].push_back(std::move(demo));
    bundle.normalization[id] = NormalizationRecord::identity(cfg.dims);
  }
  return bundle;
}

inline DatasetBundle digit_templates(std::initializer_list<int> task_ids, const DmpConfig& cfg = {}) {
  const std::vector<int> ids(task_ids);
  return digit_templates(std::span<const int>(ids), cfg);
}

// ---------------------------------------------------------------------------
// Augmentation

/// w_i <- w_i * (1 + k * eps), eps ~ N(0, 1) per weight.
inline Mat perturb_weights(const Mat& w, double k, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat out = w;
  for (Eigen::Index c = 0; c < w.cols(); ++c)
    for (Eigen::Index i = 0; i < w.rows(); ++i) out(i, c) = w(i, c) * (1.0 + k * normal(rng));
  return out;
}

/// Generator for one augmented copy, independent of scheduling order.
inline std::mt19937_64 copy_rng(std::uint64_t seed, int task_id, std::size_t demo,
                                std::size_t copy) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(task_id), static_cast<std::uint32_t>(demo),
                    static_cast<std::uint32_t>(copy)};
  return std::mt19937_64(seq);
}

/// Adds copies_per_demo noisy copies of every non-augmented demonstration.
/// Each copy keeps the source's exact inverse-dynamics force and adds the
/// basis-function expansion of the weight noise, so k = 0 reproduces the
/// source.
inline DatasetBundle augment(const DatasetBundle& bundle, const AugmentConfig& acfg,
                             std::size_t threads = 1) {
  acfg.validate();
  if (bundle.empty()) throw DataError("cannot augment an empty bundle");
  const DmpConfig& cfg = bundle.dmp;

  struct Job {
    int task;
    std::size_t demo;
    std::size_t copy;
  };
  struct Source {
    Trajectory normalized;
    ForceProfile force;
    WeightFit fit;
  };
  std::map<std::pair<int, std::size_t>, Source> sources;
  std::vector<Job> jobs;
  for (const auto& [id, demos] : bundle.tasks) {
    const auto& rec = bundle.record_for(id);
    for (std::size_t i = 0; i < demos.size(); ++i) {
      if (demos[i].source == DemoSource::kAugmented) continue;
      try {
        Source src;
        src.normalized = rec.apply(demos[i].trajectory);
        src.force = inverse_dynamics(cfg, src.normalized);
        src.fit = fit_weights(cfg, src.force, src.normalized.front(), src.normalized.back());
        sources.emplace(std::make_pair(id, i), std::move(src));
      } catch (const Error& e) {
        throw DataError("augmenting task " + std::to_string(id) + " demonstration " +
                        std::to_string(i) + ": " + e.what());
      }
      for (std::size_t c = 0; c < acfg.copies_per_demo; ++c) jobs.push_back({id, i, c});
    }
  }

  std::vector<Trajectory> made(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t j) {
    const Job& job = jobs[j];
    const Source& src = sources.at({job.task, job.demo});
    const Vec y0 = src.normalized.front();
    const Vec g = src.normalized.back();
    auto rng = copy_rng(acfg.rng_seed, job.task, job.demo, job.copy);
    BasisWeights noise = src.fit.weights;
    noise.w = perturb_weights(src.fit.weights.w, acfg.k, rng) - src.fit.weights.w;
    ForceProfile force = src.force;
    force.f += force_from_weights(noise, src.force.phase, y0, g).force.f;
    try {
      made[j] = integrate(cfg, force, y0, g);
    } catch (const Error& e) {
      throw NumericalError("augmenting task " + std::to_string(job.task) + " demonstration " +
                           std::to_string(job.demo) + " copy " + std::to_string(job.copy) +
                           ": " + e.what());
    }
  });

  DatasetBundle out = bundle;
  out.augmentation = acfg;
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    const auto& rec = bundle.record_for(jobs[j].task);
    Trajectory t = rec.invert(made[j]);
    t.task_id = jobs[j].task;
    out.tasks[jobs[j].task].push_back({std::move(t), jobs[j].task, DemoSource::kAugmented});
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV format: header task_id,step,dim0,dim1[,...]; one row per step; steps
// restart at 0 for each trajectory. Lines starting with '#' are comments.

inline std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".json");
}

inline std::string trajectories_to_csv(const std::vector<std::pair<int, const Trajectory*>>& trajs,
                                       const ArtifactStamp* stamp = nullptr) {
  if (trajs.empty()) throw DataError("no trajectories to write");
  const Eigen::Index d = trajs.front().second->points.cols();
  std::ostringstream out;
  if (stamp) out << stamp->comment_line() << '\n';
  out << "task_id,step";
  for (Eigen::Index c = 0; c < d; ++c) out << ",dim" << c;
  out << '\n';
  for (const auto& [id, t] : trajs) {
    if (t->points.cols() != d) throw DataError("trajectories disagree in dimensionality");
    for (Eigen::Index s = 0; s < t->points.rows(); ++s) {
      out << id << ',' << s;
      for (Eigen::Index c = 0; c < d; ++c) out << ',' << format_double(t->points(s, c));
      out << '\n';
    }
  }
  return out.str();
}

struct CsvTrajectories {
  std::vector<std::pair<int, Trajectory>> items;
  std::size_t dims = 0;
};

inline CsvTrajectories parse_trajectory_csv(const std::string& text, double dt = 0.01) {
  CsvTrajectories out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  std::vector<std::vector<double>> rows;
  int current_task = 0;
  long long expected_step = 0;

  auto flush = [&]() {
    if (rows.empty()) return;
    Trajectory t;
    t.dt = dt;
    t.task_id = current_task;
    t.points.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(out.dims));
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t c = 0; c < out.dims; ++c)
        t.points(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    out.items.emplace_back(current_task, std::move(t));
    rows.clear();
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    const std::string where = "line " + std::to_string(lineno);
    if (!have_header) {
      if (fields.size() < 3 || fields[0] != "task_id" || fields[1] != "step")
        throw DataError(where + ": unknown header, expected task_id,step,dim0[,dim1...]");
      for (std::size_t c = 2; c < fields.size(); ++c)
        if (fields[c] != "dim" + std::to_string(c - 2))
          throw DataError(where + ": unknown header column '" + fields[c] + "'");
      out.dims = fields.size() - 2;
      have_header = true;
      continue;
    }
    if (fields.size() != out.dims + 2)
      throw DataError(where + ": row has " + std::to_string(fields.size()) + " columns, expected " +
                      std::to_string(out.dims + 2));
    long long task = 0;
    long long step = 0;
    if (!parse_int(fields[0], task)) throw DataError(where + ": malformed task_id");
    if (!parse_int(fields[1], step)) throw DataError(where + ": malformed step");
    std::vector<double> values(out.dims);
    for (std::size_t c = 0; c < out.dims; ++c) {
      if (!parse_double(fields[c + 2], values[c]) || !std::isfinite(values[c]))
        throw DataError(where + ": malformed value in column dim" + std::to_string(c));
    }
    if (step == 0) {
      flush();
      current_task = static_cast<int>(task);
      expected_step = 0;
    } else if (rows.empty()) {
      throw DataError(where + ": trajectory does not start at step 0");
    }
    if (step != expected_step)
      throw DataError(where + ": step " + std::to_string(step) + " is not contiguous (expected " +
                      std::to_string(expected_step) + ")");
    if (task != current_task)
      throw DataError(where + ": task_id changes inside a trajectory");
    rows.push_back(std::move(values));
    ++expected_step;
  }
  flush();
  if (out.items.empty()) throw DataError("no trajectories");
  return out;
}

inline json dmp_to_json(const DmpConfig& c) {
  return json{{"alpha", c.alpha},     {"beta", c.beta},       {"tau", c.tau},
              {"alpha_x", c.alpha_x}, {"n_basis", c.n_basis}, {"n_steps", c.n_steps},
              {"dt", c.dt},           {"dims", c.dims}};
}

inline DmpConfig dmp_from_json(const json& j, DmpConfig c = {}) {
  c.alpha = j.value("alpha", c.alpha);
  c.beta = j.value("beta", c.alpha / 4.0);
  c.tau = j.value("tau", c.tau);
  c.alpha_x = j.value("alpha_x", c.alpha_x);
  c.n_basis = j.value("n_basis", c.n_basis);
  c.n_steps = j.value("n_steps", c.n_steps);
  c.dt = j.value("dt", c.dt);
  c.dims = j.value("dims", c.dims);
  c.validate();
  return c;
}

/// Writes the bundle CSV plus its JSON metadata sidecar (path + ".json").
inline void export_csv(const DatasetBundle& bundle, const std::filesystem::path& path,
                       const ArtifactStamp* stamp = nullptr) {
  std::vector<std::pair<int, const Trajectory*>> rows;
  json sources = json::array();
  for (const auto& [id, demos] : bundle.tasks)
    for (const auto& d : demos) {
      rows.emplace_back(id, &d.trajectory);
      sources.push_back(to_string(d.source));
    }
  write_text_file(path, trajectories_to_csv(rows, stamp));

  json meta;
  meta["format"] = "cvdmp-dataset";
  meta["version"] = 1;
  meta["task_ids"] = bundle.task_ids();
  meta["n_steps"] = bundle.dmp.n_steps;
  meta["dims"] = bundle.dmp.dims;
  meta["dmp"] = dmp_to_json(bundle.dmp);
  json norm = json::object();
  for (const auto& [id, rec] : bundle.normalization) norm[std::to_string(id)] = rec.to_json();
  meta["normalization"] = norm;
  meta["augmentation"] = bundle.augmentation ? bundle.augmentation->to_json() : json(nullptr);
  meta["rng_seed"] = bundle.augmentation ? json(bundle.augmentation->rng_seed) : json(nullptr);
  meta["sources"] = sources;
  if (stamp) meta["stamp"] = stamp->to_json();
  write_text_file(sidecar_path(path), meta.dump(2) + "\n");
}

/// Reads a bundle CSV. When the metadata sidecar exists it supplies the DMP
/// config, normalization records and demonstration sources; otherwise every
/// task gets an aspect-preserving record fitted to its trajectories.
inline DatasetBundle ingest_csv(const std::filesystem::path& path, DmpConfig cfg = {}) {
  const std::string text = read_text_file(path);
  json meta;
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    try {
      meta = json::parse(read_text_file(side));
    } catch (const json::exception& e) {
      throw DataError(side.string() + ": " + e.what());
    }
    if (meta.contains("dmp")) cfg = dmp_from_json(meta["dmp"], cfg);
  }
  CsvTrajectories parsed = parse_trajectory_csv(text, cfg.dt);
  cfg.dims = parsed.dims;
  const std::size_t steps = parsed.items.front().second.steps();
  for (const auto& [id, t] : parsed.items)
    if (t.steps() != steps)
      throw DataError(path.string() + ": trajectories have inconsistent lengths");
  cfg.n_steps = steps;
  cfg.validate();

  DatasetBundle bundle;
  bundle.dmp = cfg;
  const json* sources = (meta.is_object() && meta.contains("sources")) ? &meta["sources"] : nullptr;
  if (sources && sources->size() != parsed.items.size())
    throw DataError(side.string() + ": source list does not match trajectory count");
  for (std::size_t i = 0; i < parsed.items.size(); ++i) {
    auto& [id, t] = parsed.items[i];
    const DemoSource src =
        sources ? demo_source_from_string((*sources)[i].get<std::string>()) : DemoSource::kIngested;
    bundle.tasks[id].push_back({std::move(t), id, src});
  }
  if (meta.is_object() && meta.contains("normalization")) {
    for (auto& [key, rec] : meta["normalization"].items())
      bundle.normalization[std::stoi(key)] = NormalizationRecord::from_json(rec);
  }
  for (const auto& [id, demos] : bundle.tasks) {
    if (bundle.normalization.count(id)) continue;
    std::vector<Trajectory> trajs;
    for (const auto& d : demos) trajs.push_back(d.trajectory);
    bundle.normalization[id] = fit_normalization(trajs, NormalizeMode::kPreserveAspect);
  }
  if (meta.is_object() && meta.contains("augmentation") && !meta["augmentation"].is_null())
    bundle.augmentation = AugmentConfig::from_json(meta["augmentation"]);
  return bundle;
}

}  // namespace cvdmp

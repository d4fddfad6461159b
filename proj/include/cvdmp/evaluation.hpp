#pragma once

// Handwriting evaluation: random goal adaptation, the midpoint via-point test
// and the loss-weight trade-off, aggregated per task.

#include <chrono>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cvdmp/cvae.hpp"
#include "cvdmp/generator.hpp"
#include "cvdmp/io.hpp"

namespace cvdmp {

struct HandwritingOptions {
  std::size_t endpoints = 50;
  double goal_spread = 0.3;        // goal = [1, 0] + spread * r
  double via_offset = -0.2;        // added to the midpoint's x
  FinetuneConfig finetune;         // default weights
  FinetuneConfig tradeoff{0.05, 0.05, 0.9};
  bool run_tradeoff = true;
  std::uint64_t seed = 7;
  std::size_t threads = 1;

  json to_json() const {
    return json{{"endpoints", endpoints}, {"goal_spread", goal_spread}, {"via_offset", via_offset},
                {"tradeoff", tradeoff.to_json()}, {"run_tradeoff", run_tradeoff}};
  }
  static HandwritingOptions from_json(const json& j, HandwritingOptions o) {
    o.endpoints = j.value("endpoints", o.endpoints);
    o.goal_spread = j.value("goal_spread", o.goal_spread);
    o.via_offset = j.value("via_offset", o.via_offset);
    if (j.contains("tradeoff")) o.tradeoff = FinetuneConfig::from_json(j["tradeoff"], o.tradeoff);
    o.run_tradeoff = j.value("run_tradeoff", o.run_tradeoff);
    return o;
  }
};

struct HandwritingCase {
  Vec goal;
  double pre_end_error = 0.0;
  double post_end_error = 0.0;
  double via_error = 0.0;
  double shape_error = 0.0;
  double tradeoff_via_error = 0.0;
  double tradeoff_shape_error = 0.0;
  double finetune_seconds = 0.0;
  std::size_t iterations = 0;
};

struct HandwritingRow {
  int task_id = 0;
  std::size_t cases = 0;
  double pre_end_error = 0.0;
  double post_end_error = 0.0;
  double via_error = 0.0;
  double shape_error = 0.0;
  double tradeoff_via_error = 0.0;
  double tradeoff_shape_error = 0.0;
  double finetune_seconds_mean = 0.0;
  double finetune_seconds_max = 0.0;
  std::vector<HandwritingCase> detail;
};

inline std::mt19937_64 case_rng(std::uint64_t seed, int task_id, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(task_id), static_cast<std::uint32_t>(index)};
  return std::mt19937_64(seq);
}

/// One case: goal [1, 0] + spread * r from [0, 1], generate, then fine-tune
/// towards the generated midpoint shifted by via_offset in x.
inline HandwritingCase run_handwriting_case(const CvaeModel& model, const DmpConfig& cfg, int task_id,
                                            std::size_t index, const HandwritingOptions& opt) {
  auto rng = case_rng(opt.seed, task_id, index);
  std::normal_distribution<double> normal(0.0, 1.0);
  HandwritingCase c;
  TaskSpec spec;
  spec.task_id = task_id;
  spec.start = (Vec(2) << 0.0, 1.0).finished();
  const double rx = normal(rng), ry = normal(rng);
  spec.goal = (Vec(2) << 1.0 + opt.goal_spread * rx, opt.goal_spread * ry).finished();
  c.goal = spec.goal;
  const GenerationResult g = generate(model, cfg, spec, rng());
  c.pre_end_error = g.diagnostics.end_error;
  Vec via = g.trajectory.at(g.trajectory.steps() / 2);
  via[0] += opt.via_offset;
  spec.via_points = {via};
  const GenerationResult f = finetune(model, cfg, spec, g, opt.finetune);
  c.post_end_error = f.diagnostics.end_error;
  c.via_error = f.diagnostics.via_errors.at(0);
  c.shape_error = f.diagnostics.shape_error;
  c.finetune_seconds = f.diagnostics.seconds;
  c.iterations = f.diagnostics.iterations;
  if (opt.run_tradeoff) {
    const GenerationResult t = finetune(model, cfg, spec, g, opt.tradeoff);
    c.tradeoff_via_error = t.diagnostics.via_errors.at(0);
    c.tradeoff_shape_error = t.diagnostics.shape_error;
  }
  return c;
}

inline std::vector<HandwritingRow> evaluate_handwriting(const CvaeModel& model, const DmpConfig& cfg,
                                                        const std::vector<int>& tasks,
                                                        const HandwritingOptions& opt) {
  std::vector<HandwritingRow> rows;
  for (int id : tasks) {
    HandwritingRow row;
    row.task_id = id;
    row.cases = opt.endpoints;
    row.detail.resize(opt.endpoints);
    parallel_for(opt.endpoints, opt.threads, [&](std::size_t k) {
      row.detail[k] = run_handwriting_case(model, cfg, id, k, opt);
    });
    for (const auto& c : row.detail) {
      row.pre_end_error += c.pre_end_error;
      row.post_end_error += c.post_end_error;
      row.via_error += c.via_error;
      row.shape_error += c.shape_error;
      row.tradeoff_via_error += c.tradeoff_via_error;
      row.tradeoff_shape_error += c.tradeoff_shape_error;
      row.finetune_seconds_mean += c.finetune_seconds;
      row.finetune_seconds_max = std::max(row.finetune_seconds_max, c.finetune_seconds);
    }
    if (opt.endpoints > 0) {
      const auto n = static_cast<double>(opt.endpoints);
      for (double* v : {&row.pre_end_error, &row.post_end_error, &row.via_error, &row.shape_error,
                        &row.tradeoff_via_error, &row.tradeoff_shape_error, &row.finetune_seconds_mean})
        *v /= n;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

/// Error table without timings, so identical seeds give identical files.
inline std::string handwriting_csv(const std::vector<HandwritingRow>& rows,
                                   const ArtifactStamp* stamp = nullptr) {
  std::string out;
  if (stamp) out += stamp->comment_line() + "\n";
  out += "task_id,cases,end_error_generated,end_error_finetuned,via_error,shape_error,"
         "tradeoff_via_error,tradeoff_shape_error\n";
  for (const auto& r : rows) {
    out += std::to_string(r.task_id) + "," + std::to_string(r.cases);
    for (double v : {r.pre_end_error, r.post_end_error, r.via_error, r.shape_error,
                     r.tradeoff_via_error, r.tradeoff_shape_error})
      out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

inline std::string handwriting_table(const std::vector<HandwritingRow>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-6s %12s %12s %10s %10s %12s %12s %10s\n", "task", "end(gen)",
                "end(tuned)", "via", "shape", "via(0.9)", "shape(0.9)", "ft s/run");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-6d %12.4f %12.4f %10.4f %10.4f %12.4f %12.4f %10.3f\n",
                  r.task_id, r.pre_end_error, r.post_end_error, r.via_error, r.shape_error,
                  r.tradeoff_via_error, r.tradeoff_shape_error, r.finetune_seconds_mean);
    out += buf;
  }
  return out;
}

}  // namespace cvdmp

#pragma once

// Command-line front end. Every command reads an effective configuration
// (defaults, then the --config file, then flags), stamps each artifact with
// the seed and the configuration hash, and maps failures to exit codes.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "cvdmp/cvae.hpp"
#include "cvdmp/dataset.hpp"
#include "cvdmp/dmp.hpp"
#include "cvdmp/error.hpp"
#include "cvdmp/evaluation.hpp"
#include "cvdmp/generator.hpp"
#include "cvdmp/io.hpp"
#include "cvdmp/sim2d.hpp"
#include "cvdmp/svg.hpp"

namespace cvdmp {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

struct SimSettings {
  std::size_t episodes = 20;
  bool use_via_point = true;
};

struct RunConfig {
  std::uint64_t seed = 7;
  bool single_thread = false;
  std::vector<int> tasks{1, 2, 3, 7};
  DmpConfig dmp;
  AugmentConfig augment;
  TrainConfig train;
  FinetuneConfig finetune;
  HandwritingOptions handwriting;
  SimSettings sim;
  std::string out = "out";
  std::string dataset;     // default <out>/dataset.csv
  std::string checkpoint;  // default <out>/model.ckpt

  std::filesystem::path out_dir() const { return out; }
  std::filesystem::path dataset_path() const {
    return dataset.empty() ? out_dir() / "dataset.csv" : std::filesystem::path(dataset);
  }
  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? out_dir() / "model.ckpt" : std::filesystem::path(checkpoint);
  }
  std::size_t threads() const {
    if (single_thread) return 1;
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }

  /// Settings that influence results; paths and threading are excluded.
  json settings_json() const {
    json train_j = train.to_json();
    train_j.erase("rng_seed");
    json aug_j = augment.to_json();
    aug_j.erase("rng_seed");
    return json{{"seed", seed},
                {"tasks", tasks},
                {"dmp", dmp_to_json(dmp)},
                {"augment", aug_j},
                {"train", train_j},
                {"finetune", finetune.to_json()},
                {"eval_handwriting", handwriting.to_json()},
                {"eval_sim", json{{"episodes", sim.episodes}, {"use_via_point", sim.use_via_point}}}};
  }

  json to_json() const {
    json j = settings_json();
    j["single_thread"] = single_thread;
    j["paths"] = json{{"out", out}, {"dataset", dataset}, {"checkpoint", checkpoint}};
    return j;
  }

  ArtifactStamp stamp() const { return ArtifactStamp{seed, config_hash(settings_json())}; }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    try {
      c.seed = j.value("seed", c.seed);
      c.single_thread = j.value("single_thread", c.single_thread);
      c.tasks = j.value("tasks", c.tasks);
      if (j.contains("dmp")) c.dmp = dmp_from_json(j["dmp"], c.dmp);
      if (j.contains("augment")) c.augment = AugmentConfig::from_json(j["augment"]);
      if (j.contains("train")) c.train = TrainConfig::from_json(j["train"], c.train);
      if (j.contains("finetune")) c.finetune = FinetuneConfig::from_json(j["finetune"], c.finetune);
      if (j.contains("eval_handwriting"))
        c.handwriting = HandwritingOptions::from_json(j["eval_handwriting"], c.handwriting);
      if (j.contains("eval_sim")) {
        c.sim.episodes = j["eval_sim"].value("episodes", c.sim.episodes);
        c.sim.use_via_point = j["eval_sim"].value("use_via_point", c.sim.use_via_point);
      }
      if (j.contains("paths")) {
        const json& p = j["paths"];
        c.out = p.value("out", c.out);
        c.dataset = p.value("dataset", c.dataset);
        c.checkpoint = p.value("checkpoint", c.checkpoint);
      }
    } catch (const json::exception& e) {
      throw UsageError(std::string("invalid configuration: ") + e.what());
    }
    c.augment.rng_seed = c.seed;
    c.train.rng_seed = c.seed;
    c.handwriting.seed = c.seed;
    c.handwriting.finetune = c.finetune;
    c.train.threads = c.threads();
    c.handwriting.threads = c.threads();
    c.dmp.validate();
    return c;
  }
};

namespace detail {

inline Vec parse_vector(const std::string& text, const char* what) {
  std::vector<double> vals;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    double v = 0.0;
    if (!parse_double(item, v) || !std::isfinite(v))
      throw UsageError(std::string("malformed ") + what + " '" + text + "'");
    vals.push_back(v);
  }
  if (vals.empty()) throw UsageError(std::string("empty ") + what);
  return Eigen::Map<Vec>(vals.data(), static_cast<Eigen::Index>(vals.size()));
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (int x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

inline void plot_generation(const GenerationResult& r, const TaskSpec& spec,
                            const std::optional<GenerationResult>& before, const std::string& title,
                            const std::filesystem::path& path, const ArtifactStamp& stamp) {
  SvgPlot plot(title);
  if (before) plot.add_polyline(before->trajectory.points, "#9e9e9e", 1.2, 0.8);
  plot.add_polyline(r.trajectory.points, palette(0), 2.0);
  plot.add_marker(spec.start, MarkerKind::kStart);
  plot.add_marker(spec.goal, MarkerKind::kGoal);
  for (const auto& v : spec.via_points) plot.add_marker(v, MarkerKind::kVia);
  write_text_file(path, plot.render(&stamp));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands

inline int cmd_augment(const RunConfig& rc, std::ostream& out) {
  const std::vector<int>& ids = rc.tasks;
  DatasetBundle base = digit_templates(std::span<const int>(ids), rc.dmp);
  if (base.empty()) throw UsageError("no tasks selected");
  DatasetBundle bundle = augment(base, rc.augment, rc.threads());
  const ArtifactStamp stamp = rc.stamp();
  const auto path = rc.dataset_path();
  export_csv(bundle, path, &stamp);
  for (const auto& [id, demos] : bundle.tasks)
    out << "task " << id << ": " << demos.size() << " trajectories\n";
  out << "wrote " << path.string() << "\n";
  return kExitOk;
}

inline int cmd_train(const RunConfig& rc, std::ostream& out) {
  const auto data = rc.dataset_path();
  if (!std::filesystem::exists(data))
    throw DataError("dataset " + data.string() + " does not exist (run augment first)");
  DatasetBundle bundle = ingest_csv(data, rc.dmp);
  const auto t0 = std::chrono::steady_clock::now();
  CvaeModel model = train(bundle, rc.train);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const ArtifactStamp stamp = rc.stamp();
  save(model, rc.checkpoint_path(), &stamp);

  std::string curve = stamp.comment_line() + "\nepoch,loss,reconstruction,kl\n";
  for (std::size_t e = 0; e < model.training.loss_curve.size(); ++e)
    curve += std::to_string(e) + "," + format_double(model.training.loss_curve[e]) + "," +
             format_double(model.training.recon_curve[e]) + "," +
             format_double(model.training.kl_curve[e]) + "\n";
  write_text_file(rc.out_dir() / "loss_curve.csv", curve);
  out << "trained " << model.training.epochs << " epochs on " << model.training.samples
      << " trajectories in " << secs << " s\n";
  out << "loss " << model.training.loss_curve.front() << " -> " << model.training.loss_curve.back()
      << "\n";
  out << "wrote " << rc.checkpoint_path().string() << "\n";
  return kExitOk;
}

struct GenerateRequest {
  int task_id = 1;
  std::string start = "0,1";
  std::string goal = "1,0";
  std::vector<std::string> via;
  std::string latent;
  std::string name = "generated";
};

inline int cmd_generate(const RunConfig& rc, const GenerateRequest& req, bool require_via,
                        std::ostream& out) {
  TaskSpec spec;
  spec.task_id = req.task_id;
  spec.start = detail::parse_vector(req.start, "start");
  spec.goal = detail::parse_vector(req.goal, "goal");
  for (const auto& v : req.via) spec.via_points.push_back(detail::parse_vector(v, "via-point"));
  if (!req.latent.empty()) spec.latent = detail::parse_vector(req.latent, "latent vector");
  if (require_via && spec.via_points.empty()) throw UsageError("finetune needs at least one --via point");
  const CvaeModel model = load(rc.checkpoint_path());
  spec.validate(model.arch.dims);
  model.task_index(spec.task_id);

  const GenerationResult initial = generate(model, rc.dmp, spec, rc.seed);
  GenerationResult result = initial;
  std::optional<GenerationResult> before;
  if (!spec.via_points.empty()) {
    result = finetune(model, rc.dmp, spec, initial, rc.finetune);
    before = initial;
  }
  const ArtifactStamp stamp = rc.stamp();
  const auto csv = rc.out_dir() / (req.name + ".csv");
  export_generation(result, spec, csv, &stamp);
  detail::plot_generation(result, spec, before, "task " + std::to_string(spec.task_id),
                          rc.out_dir() / (req.name + ".svg"), stamp);
  out << "end error " << result.diagnostics.end_error << "\n";
  for (std::size_t i = 0; i < result.diagnostics.via_errors.size(); ++i)
    out << "via-point " << i << " distance " << result.diagnostics.via_errors[i] << "\n";
  if (before) out << "shape error " << result.diagnostics.shape_error << "\n";
  if (result.diagnostics.warning) out << "warning: " << result.diagnostics.message << "\n";
  out << "wrote " << csv.string() << "\n";
  return kExitOk;
}

inline int cmd_eval_handwriting(const RunConfig& rc, std::ostream& out) {
  const CvaeModel model = load(rc.checkpoint_path());
  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = evaluate_handwriting(model, rc.dmp, rc.tasks, rc.handwriting);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const ArtifactStamp stamp = rc.stamp();
  write_text_file(rc.out_dir() / "handwriting.csv", handwriting_csv(rows, &stamp));
  const std::string table = handwriting_table(rows);
  write_text_file(rc.out_dir() / "handwriting.txt", stamp.comment_line() + "\n" + table);
  std::string timing = stamp.comment_line() + "\ntask_id,finetune_seconds_mean,finetune_seconds_max\n";
  for (const auto& r : rows)
    timing += std::to_string(r.task_id) + "," + format_double(r.finetune_seconds_mean) + "," +
              format_double(r.finetune_seconds_max) + "\n";
  write_text_file(rc.out_dir() / "handwriting_timing.csv", timing);
  out << table << "evaluated in " << secs << " s\n";
  return kExitOk;
}

inline int cmd_eval_sim(const RunConfig& rc, const std::string& which, std::ostream& out) {
  const CvaeModel model = load(rc.checkpoint_path());
  std::vector<SimTask> tasks;
  if (which == "both") {
    tasks = {SimTask::kReach, SimTask::kPush};
  } else {
    tasks = {sim_task_from_string(which)};
  }
  const ArtifactStamp stamp = rc.stamp();
  json summary;
  summary["stamp"] = stamp.to_json();
  for (SimTask task : tasks) {
    SimOptions opt;
    opt.seed = rc.seed;
    opt.use_via_point = rc.sim.use_via_point;
    opt.finetune = rc.finetune;
    opt.threads = rc.threads();
    const EvaluationReport rep = evaluate(model, rc.dmp, rc.sim.episodes, task, opt);
    const std::string name = to_string(task);
    json episodes = json::array();
    SvgPlot overview(name + " episodes");
    for (std::size_t i = 0; i < rep.episodes.size(); ++i) {
      const auto& e = rep.episodes[i];
      episodes.push_back(episode_summary_json(e));
      const auto base = rc.out_dir() / "sim" / (name + "_" + std::to_string(e.seed));
      write_text_file(base.string() + ".csv", episode_trace_csv(e.result, &stamp));
      SvgPlot plot(name + " seed " + std::to_string(e.seed));
      plot.add_square(e.workspace.cube, e.workspace.half_extent, "#bdbdbd");
      if (!e.result.cube_trace.empty()) {
        plot.add_square(e.result.final_cube, e.workspace.half_extent, "#1f77b4");
        Mat eff(static_cast<Eigen::Index>(e.result.effector_trace.size()), 2);
        for (std::size_t k = 0; k < e.result.effector_trace.size(); ++k)
          eff.row(static_cast<Eigen::Index>(k)) = e.result.effector_trace[k].transpose();
        plot.add_polyline(eff, palette(3), 1.8);
        overview.add_polyline(eff, palette(i), 1.0, 0.8);
      }
      plot.add_marker(e.spec.start, MarkerKind::kStart);
      if (task == SimTask::kPush) plot.add_marker(e.workspace.goal_marker, MarkerKind::kGoal);
      for (const auto& v : e.spec.via_points) plot.add_marker(v, MarkerKind::kVia);
      write_text_file(base.string() + ".svg", plot.render(&stamp));
    }
    write_text_file(rc.out_dir() / "sim" / (name + "_overview.svg"), overview.render(&stamp));
    json s{{"episodes", rep.episodes.size()},
           {"success_rate", rep.success_rate ? json(*rep.success_rate) : json(nullptr)},
           {"mean_goal_distance", rep.mean_goal_distance},
           {"mean_min_distance", rep.mean_min_distance},
           {"per_episode", episodes}};
    summary[name] = s;
    out << name << ": ";
    if (rep.success_rate)
      out << "success rate " << *rep.success_rate << " over " << rep.episodes.size() << " episodes";
    else
      out << "success rate undefined (no episodes)";
    if (task == SimTask::kPush) out << ", mean cube-goal distance " << rep.mean_goal_distance;
    out << "\n";
  }
  write_text_file(rc.out_dir() / "sim_summary.json", summary.dump(2) + "\n");
  return kExitOk;
}

inline int cmd_plot(const RunConfig& rc, const std::vector<std::string>& inputs, std::ostream& out) {
  if (inputs.empty()) throw UsageError("plot needs at least one input CSV");
  const ArtifactStamp stamp = rc.stamp();
  for (const auto& in : inputs) {
    const std::filesystem::path path(in);
    CsvTrajectories parsed;
    try {
      parsed = parse_trajectory_csv(read_text_file(path), rc.dmp.dt);
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
    if (parsed.dims != 2) throw DataError(path.string() + ": only 2D trajectories can be plotted");
    SvgPlot plot(path.filename().string());
    std::map<int, std::size_t> seen;
    std::map<int, std::size_t> colour;
    for (const auto& [id, t] : parsed.items)
      if (!colour.count(id)) colour[id] = colour.size();
    // copies first and faint, then the first trajectory of each task on top
    for (const auto& [id, t] : parsed.items)
      if (seen[id]++ > 0) plot.add_polyline(t.points, palette(colour[id]), 0.8, 0.25);
    seen.clear();
    for (const auto& [id, t] : parsed.items) {
      if (seen[id]++ > 0) continue;
      plot.add_polyline(t.points, palette(colour[id]), 2.2);
      plot.add_marker(t.front(), MarkerKind::kStart);
    }
    const auto side = sidecar_path(path);
    if (std::filesystem::exists(side)) {
      try {
        const json meta = json::parse(read_text_file(side));
        if (meta.contains("goal")) plot.add_marker(vec_from_json(meta["goal"]), MarkerKind::kGoal);
        if (meta.contains("via_points"))
          for (const auto& v : meta["via_points"]) plot.add_marker(vec_from_json(v), MarkerKind::kVia);
      } catch (const json::exception& e) {
        throw DataError(side.string() + ": " + e.what());
      }
    }
    const auto target = rc.out_dir() / (path.stem().string() + ".svg");
    write_text_file(target, plot.render(&stamp));
    out << "wrote " << target.string() << " (" << parsed.items.size() << " trajectories)\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

/// Parses argv, runs one subcommand and returns its exit code. Errors are
/// reported on `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Task-conditioned DMP trajectory generation with a CVAE force model", "cvdmp"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  std::string out_dir;
  bool single_thread = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON configuration file");
    sub->add_option("--seed", seed, "Random seed");
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_flag("--single-thread", single_thread, "Run on one thread (bit-reproducible)");
  };

  std::string tasks_text;
  std::size_t copies = 0;
  double k = 0.0;
  std::string dataset_path, checkpoint_path;
  std::size_t epochs = 0;
  double kl_weight = 0.0;
  GenerateRequest req;
  double p1 = 0.0, p2 = 0.0, p3 = 0.0;
  std::size_t iters = 0;
  std::size_t endpoints = 0;
  std::string sim_task = "both";
  std::size_t episodes = 0;
  std::vector<std::string> plot_inputs;

  auto* augment_cmd = app.add_subcommand("augment", "Build the digit templates and augment them");
  add_common(augment_cmd);
  auto* o_tasks = augment_cmd->add_option("--tasks", tasks_text, "Comma-separated task ids");
  auto* o_copies = augment_cmd->add_option("--copies", copies, "Augmented copies per demonstration");
  auto* o_k = augment_cmd->add_option("--k", k, "Weight noise scale");
  auto* o_data_a = augment_cmd->add_option("--dataset", dataset_path, "Dataset CSV to write");

  auto* train_cmd = app.add_subcommand("train", "Train the CVAE on a dataset");
  add_common(train_cmd);
  auto* o_data_t = train_cmd->add_option("--dataset", dataset_path, "Dataset CSV");
  auto* o_ckpt_t = train_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint to write");
  auto* o_epochs = train_cmd->add_option("--epochs", epochs, "Training epochs");
  auto* o_kl = train_cmd->add_option("--kl-weight", kl_weight, "KL weight");

  std::vector<CLI::Option*> gen_opts;
  auto add_generation = [&](CLI::App* sub) {
    add_common(sub);
    gen_opts.push_back(sub->add_option("--checkpoint", checkpoint_path, "Checkpoint"));
    sub->add_option("--task", req.task_id, "Task id")->required();
    sub->add_option("--start", req.start, "Start point, e.g. 0,1");
    sub->add_option("--goal", req.goal, "Goal point, e.g. 1,0");
    sub->add_option("--via", req.via, "Via-point (repeatable)");
    sub->add_option("--z", req.latent, "Explicit latent vector");
    sub->add_option("--name", req.name, "Base name of the written files");
  };
  auto* generate_cmd = app.add_subcommand("generate", "Generate a trajectory for a task");
  add_generation(generate_cmd);
  auto* finetune_cmd = app.add_subcommand("finetune", "Generate and fine-tune towards via-points");
  add_generation(finetune_cmd);
  auto* o_p1 = finetune_cmd->add_option("--p1", p1, "Shape weight");
  auto* o_p2 = finetune_cmd->add_option("--p2", p2, "End-point weight");
  auto* o_p3 = finetune_cmd->add_option("--p3", p3, "Via-point weight");
  auto* o_iters = finetune_cmd->add_option("--iters", iters, "Maximum fine-tune iterations");

  auto* hw_cmd = app.add_subcommand("eval-handwriting", "Per-task end, via-point and shape errors");
  add_common(hw_cmd);
  gen_opts.push_back(hw_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint"));
  auto* o_tasks_hw = hw_cmd->add_option("--tasks", tasks_text, "Comma-separated task ids");
  auto* o_endpoints = hw_cmd->add_option("--endpoints", endpoints, "Random goals per task");

  auto* sim_cmd = app.add_subcommand("eval-sim", "Reaching and pushing success rates");
  add_common(sim_cmd);
  gen_opts.push_back(sim_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint"));
  sim_cmd->add_option("--task", sim_task, "reach, push or both")
      ->check(CLI::IsMember({"reach", "push", "both"}));
  auto* o_episodes = sim_cmd->add_option("--episodes", episodes, "Episodes per task");

  auto* plot_cmd = app.add_subcommand("plot", "Render trajectory CSV files as SVG");
  add_common(plot_cmd);
  plot_cmd->add_option("inputs", plot_inputs, "Trajectory CSV files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    // defaults <- file <- flags
    json effective = RunConfig{}.to_json();
    if (!config_path.empty()) {
      json file;
      try {
        file = json::parse(read_text_file(config_path));
      } catch (const json::exception& e) {
        throw UsageError(config_path + ": " + e.what());
      } catch (const DataError& e) {
        throw UsageError(e.what());
      }
      effective.merge_patch(file);
    }
    json flags = json::object();
    auto* active = app.get_subcommands().front();
    if (active->count("--seed")) flags["seed"] = seed;
    if (single_thread) flags["single_thread"] = true;
    if (active->count("--out")) flags["paths"]["out"] = out_dir;
    if (!dataset_path.empty()) flags["paths"]["dataset"] = dataset_path;
    if (!checkpoint_path.empty()) flags["paths"]["checkpoint"] = checkpoint_path;
    if (o_tasks->count() || o_tasks_hw->count()) {
      std::vector<int> ids;
      for (double v : detail::parse_vector(tasks_text, "task list")) ids.push_back(static_cast<int>(v));
      flags["tasks"] = ids;
    }
    if (o_copies->count()) flags["augment"]["copies_per_demo"] = copies;
    if (o_k->count()) flags["augment"]["k"] = k;
    if (o_epochs->count()) flags["train"]["epochs"] = epochs;
    if (o_kl->count()) flags["train"]["kl_weight"] = kl_weight;
    if (o_p1->count()) flags["finetune"]["p1"] = p1;
    if (o_p2->count()) flags["finetune"]["p2"] = p2;
    if (o_p3->count()) flags["finetune"]["p3"] = p3;
    if (o_iters->count()) flags["finetune"]["max_iters"] = iters;
    if (o_endpoints->count()) flags["eval_handwriting"]["endpoints"] = endpoints;
    if (o_episodes->count()) flags["eval_sim"]["episodes"] = episodes;
    (void)o_data_a;
    (void)o_data_t;
    (void)o_ckpt_t;
    effective.merge_patch(flags);
    const RunConfig rc = RunConfig::from_json(effective);

    if (*augment_cmd) return cmd_augment(rc, out);
    if (*train_cmd) return cmd_train(rc, out);
    if (*generate_cmd) return cmd_generate(rc, req, false, out);
    if (*finetune_cmd) return cmd_generate(rc, req, true, out);
    if (*hw_cmd) return cmd_eval_handwriting(rc, out);
    if (*sim_cmd) return cmd_eval_sim(rc, sim_task, out);
    if (*plot_cmd) return cmd_plot(rc, plot_inputs, out);
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace cvdmp

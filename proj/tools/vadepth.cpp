// vadepth: command-line front end for the depth-reconstruction library.
//
// Every invocation prints exactly one JSON document on stdout, reports errors
// on stderr as a one-line JSON object, and records a run manifest that
// `vadepth replay` can re-execute.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "vadepth/diffgrad.hpp"
#include "vadepth/error.hpp"
#include "vadepth/gradcheck.hpp"
#include "vadepth/grid.hpp"
#include "vadepth/io.hpp"
#include "vadepth/losses_metrics.hpp"
#include "vadepth/toypipe.hpp"
#include "vadepth/varlayer.hpp"

namespace fs = std::filesystem;
using namespace vadepth;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return kExitUsage;
    case ErrorKind::io: return kExitIo;
    case ErrorKind::numerical: return kExitNumerical;
  }
  return kExitUsage;
}

void report_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << std::endl;
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

/// Shared state of one invocation: the manifest under construction plus the
/// exit status the command wants to report.
struct Run {
  RunManifest manifest;
  std::string manifest_path;
  bool write_manifest = true;
  int status = kExitOk;
  json result;

  void input(const std::string& path) { manifest.input_digests[path] = file_digest(path); }
  void output(const std::string& path) { manifest.output_digests[path] = file_digest(path); }
};

std::pair<int, int> parse_size(const std::string& text) {
  const auto x = text.find('x');
  try {
    std::size_t used = 0;
    if (x == std::string::npos) {
      const int n = std::stoi(text, &used);
      if (used != text.size()) throw std::invalid_argument(text);
      return {n, n};
    }
    const int h = std::stoi(text.substr(0, x), &used);
    if (used != x) throw std::invalid_argument(text);
    const std::string rest = text.substr(x + 1);
    const int w = std::stoi(rest, &used);
    if (used != rest.size()) throw std::invalid_argument(text);
    return {h, w};
  } catch (const std::logic_error&) {
    throw InvalidArgument("bad size '" + text + "': expected N or HxW");
  }
}

std::vector<int> parse_int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size() || v < 1) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::logic_error&) {
      throw InvalidArgument(std::string("bad ") + what + " list '" + text + "'");
    }
  }
  if (out.empty()) throw InvalidArgument(std::string("empty ") + what + " list");
  return out;
}

bool is_csv(const std::string& path) { return fs::path(path).extension() == ".csv"; }

void write_map(const std::string& path, const DepthMap& m) {
  if (is_csv(path))
    write_csv_map(path, m);
  else
    write_pfm(path, m);
}

DepthMap to_map(const Field& f) {
  DepthMap m(f.rows(), f.cols());
  m.values = f;
  return m;
}

std::string default_manifest(const std::string& path_stem) { return path_stem + ".manifest.json"; }

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  std::uint64_t seed = 0;
  std::string size = "16";
  int planes = 3;
  double depth_min = 1.0;
  double depth_max = 5.0;
  double noise = 0.0;
  double outliers = 0.0;
  std::string out_dir;
};

json region_json(const PlaneRegion& r) {
  return {{"top", r.top}, {"left", r.left}, {"rows", r.rows}, {"cols", r.cols}, {"offset", r.offset},
          {"ax", r.ax},   {"ay", r.ay},     {"cx", r.cx},     {"cy", r.cy}};
}

void run_synth(const SynthOptions& o, Run& run) {
  SceneSpec spec;
  spec.seed = o.seed;
  std::tie(spec.height, spec.width) = parse_size(o.size);
  if (spec.height < 2 || spec.width < 2) throw InvalidArgument("synth needs at least a 2x2 grid");
  spec.planes = o.planes;
  spec.depth_min = o.depth_min;
  spec.depth_max = o.depth_max;
  spec.noise = o.noise;
  spec.outlier_fraction = o.outliers;
  validate(spec);

  Scene scene = synth_scene(spec);
  // Gradient fixtures are differences of the stored 32-bit depth, so solving
  // them reproduces depth.pfm up to solver round-off.
  for (double& v : scene.depth.values.flat()) v = static_cast<double>(static_cast<float>(v));
  const auto obs = observe_gradients(scene.depth, spec, splitmix64(o.seed ^ 0x6a09e667f3bcc909ULL));

  fs::create_directories(o.out_dir);
  const fs::path dir(o.out_dir);
  const std::vector<std::pair<std::string, DepthMap>> maps{{"image.pfm", to_map(scene.image)},
                                                           {"depth.pfm", scene.depth},
                                                           {"gx.pfm", to_map(obs.grad.gx)},
                                                           {"gy.pfm", to_map(obs.grad.gy)}};
  json files = json::object();
  for (const auto& [name, map] : maps) {
    const std::string path = (dir / name).string();
    write_pfm(path, map);
    run.output(path);
    files[name.substr(0, name.find('.'))] = path;
  }
  json scene_doc{{"seed", spec.seed},
                 {"height", spec.height},
                 {"width", spec.width},
                 {"planes", spec.planes},
                 {"depth_min", spec.depth_min},
                 {"depth_max", spec.depth_max},
                 {"noise", spec.noise},
                 {"outlier_fraction", spec.outlier_fraction},
                 {"outlier_magnitude", spec.outlier_magnitude},
                 {"image_noise", spec.image_noise}};
  run.manifest.config = scene_doc;
  json regions = json::array();
  for (const auto& r : scene.regions) regions.push_back(region_json(r));
  scene_doc["regions"] = regions;
  const std::string scene_path = (dir / "scene.json").string();
  write_file_atomic(scene_path, scene_doc.dump(2) + "\n");
  run.output(scene_path);
  files["scene"] = scene_path;

  run.manifest.seeds = {{"scene", spec.seed}, {"observation", splitmix64(o.seed ^ 0x6a09e667f3bcc909ULL)}};
  run.result = {{"command", "synth"}, {"height", spec.height}, {"width", spec.width},
                {"regions", scene.regions.size()}, {"files", files}};
  if (run.manifest_path.empty()) run.manifest_path = (dir / "manifest.json").string();
}

// ---------------------------------------------------------------------------
// solve

struct SolveOptions {
  std::string gx, gy, wx, wy;
  std::string gauge = "anchor:0,0,0";
  std::string backend = "direct";
  double cg_tol = 1e-10;
  int cg_max_iters = 0;
  std::string out;
};

void run_solve(const SolveOptions& o, Run& run) {
  SolveConfig cfg;
  cfg.gauge = parse_gauge(o.gauge);
  if (o.backend == "direct")
    cfg.backend = Backend::direct;
  else if (o.backend == "cg")
    cfg.backend = Backend::iterative;
  else
    throw InvalidArgument("backend must be direct or cg");
  cfg.cg_tolerance = o.cg_tol;
  cfg.cg_max_iters = o.cg_max_iters;

  const DepthMap gx = read_map(o.gx);
  const DepthMap gy = read_map(o.gy);
  run.input(o.gx);
  run.input(o.gy);
  const int h = gx.height();
  const int w = gx.width() + 1;
  if (gy.height() != h - 1 || gy.width() != w)
    throw InvalidArgument("gy must be (H-1) x W for gx of shape H x (W-1)");

  GradientField grad(h, w);
  ConfidenceField conf(h, w);
  auto load_conf = [&](const std::string& path, Field& dst, const char* what) {
    if (path.empty()) return;
    const DepthMap c = read_map(path);
    run.input(path);
    if (c.height() != dst.rows() || c.width() != dst.cols())
      throw InvalidArgument(std::string(what) + " shape does not match its gradient map");
    for (std::size_t k = 0; k < dst.size(); ++k) dst.flat()[k] = c.valid.flat()[k] ? c.values.flat()[k] : 0.0;
  };
  load_conf(o.wx, conf.wx, "wx");
  load_conf(o.wy, conf.wy, "wy");
  // A missing gradient (NaN) is a constraint that carries no weight.
  auto load_grad = [](const DepthMap& src, Field& g, Field& c) {
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (src.valid.flat()[k]) {
        g.flat()[k] = src.values.flat()[k];
      } else {
        g.flat()[k] = 0.0;
        c.flat()[k] = 0.0;
      }
    }
  };
  load_grad(gx, grad.gx, conf.wx);
  load_grad(gy, grad.gy, conf.wy);

  const auto t0 = Clock::now();
  const auto res = solve(grad, conf, cfg);
  run.manifest.timings["solve_s"] = seconds_since(t0);

  write_map(o.out, res.z);
  run.output(o.out);
  run.manifest.config = {{"gauge", format_gauge(cfg.gauge)}, {"backend", o.backend}, {"cg_tol", o.cg_tol},
                         {"cg_max_iters", o.cg_max_iters}};
  run.result = {{"command", "solve"}, {"height", h},  {"width", w}, {"gauge", format_gauge(cfg.gauge)},
                {"backend", o.backend}, {"out", o.out}, {"diagnostics", to_json(res.diagnostics)}};
  if (run.manifest_path.empty()) run.manifest_path = default_manifest(o.out);
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string pred, gt;
  bool align = false;
};

void run_eval(const EvalOptions& o, Run& run) {
  DepthMap pred = read_map(o.pred);
  const DepthMap gt = read_map(o.gt);
  run.input(o.pred);
  run.input(o.gt);
  json out;
  if (o.align) {
    const auto a = align_scale_shift(pred, gt);
    out = to_json(evaluate(a.aligned, gt));
    out["alignment"] = {{"scale", a.scale}, {"shift", a.shift}};
  } else {
    out = to_json(evaluate(pred, gt));
  }
  run.manifest.config = {{"align", o.align}};
  run.result = out;
  if (run.manifest_path.empty()) run.manifest_path = default_manifest(o.pred + ".eval");
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  std::string op;
  std::uint64_t seed = 0;
  double h = 1e-6;
  double tol = 0.0;
};

json report_json(const GradcheckReport& r) {
  json failing = json::array();
  for (const auto& f : r.failing)
    failing.push_back({{"index", f.index}, {"name", f.name}, {"analytic", f.analytic}, {"numeric", f.numeric},
                       {"rel_error", f.rel_error}});
  return {{"op", r.op},       {"seed", r.seed},       {"h", r.h},
          {"tolerance", r.tolerance}, {"checked", r.checked}, {"max_rel_error", r.max_rel_error},
          {"passed", r.passed()},     {"failing", failing}};
}

void run_gradcheck_cmd(const GradcheckOptions& o, Run& run) {
  std::vector<std::string> ops;
  if (o.op == "all")
    ops = gradcheck_op_names();
  else
    ops.push_back(o.op);
  json reports = json::array();
  bool passed = true;
  for (const auto& op : ops) {
    const auto r = gradcheck(op, o.seed, o.h, o.tol);
    passed = passed && r.passed();
    reports.push_back(report_json(r));
  }
  run.result = ops.size() == 1 ? reports[0] : json{{"op", "all"}, {"passed", passed}, {"reports", reports}};
  run.manifest.config = {{"op", o.op}, {"h", o.h}, {"tolerance", o.tol}};
  run.manifest.seeds = {{"gradcheck", o.seed}};
  if (!passed) run.status = kExitCheckFailed;
  if (run.manifest_path.empty()) run.manifest_path = default_manifest("gradcheck-" + o.op + "-" + std::to_string(o.seed));
}

// ---------------------------------------------------------------------------
// train-toy

struct TrainOptions {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;  ///< overrides the config seed when set
};

void run_train(const TrainOptions& o, Run& run) {
  TrainConfig cfg;
  if (!o.config.empty()) {
    json j;
    try {
      j = json::parse(read_file(o.config));
    } catch (const json::parse_error& e) {
      throw IoError("cannot parse " + o.config + ": " + e.what());
    }
    run.input(o.config);
    cfg = train_config_from_json(j);
  }
  if (o.seed) cfg.seed = *o.seed;
  validate(cfg);

  const auto res = train(cfg);
  fs::create_directories(o.out_dir);
  const fs::path dir(o.out_dir);
  const json cfg_json = to_json(cfg);

  const std::string ckpt = (dir / "model.ckpt").string();
  write_file_atomic(ckpt, encode_checkpoint(res.model, cfg_json, cfg.seed));
  std::string curve = "epoch,loss\n";
  char buf[64];
  for (std::size_t e = 0; e < res.loss_curve.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", e, res.loss_curve[e]);
    curve += buf;
  }
  const std::string curve_path = (dir / "loss_curve.csv").string();
  write_file_atomic(curve_path, curve);
  const std::string metrics_path = (dir / "heldout_metrics.json").string();
  write_file_atomic(metrics_path, to_json(res.heldout).dump(2) + "\n");
  for (const auto& p : {ckpt, curve_path, metrics_path}) run.output(p);

  run.manifest.config = cfg_json;
  run.manifest.seeds = {{"train", cfg.seed}, {"loss", cfg.loss.seed}};
  run.manifest.timings["train_s"] = res.seconds;
  run.result = {{"command", "train-toy"},
                {"mode", to_string(cfg.shape.mode)},
                {"channels", cfg.shape.channels},
                {"parameters", res.model.params.size()},
                {"epochs", cfg.epochs},
                {"final_loss", res.loss_curve.empty() ? 0.0 : res.loss_curve.back()},
                {"heldout", to_json(res.heldout)},
                {"seconds", res.seconds},
                {"files", {{"checkpoint", ckpt}, {"loss_curve", curve_path}, {"heldout_metrics", metrics_path}}}};
  if (run.manifest_path.empty()) run.manifest_path = (dir / "manifest.json").string();
}

// ---------------------------------------------------------------------------
// bench

struct BenchOptions {
  std::string sizes = "16,32,64";
  std::string channels = "1";
  std::string backend = "direct";
  int reps = 3;
  std::uint64_t seed = 0;
  std::string out = "bench.csv";
};

void run_bench(const BenchOptions& o, Run& run) {
  const auto sizes = parse_int_list(o.sizes, "size");
  const auto channels = parse_int_list(o.channels, "channel");
  if (o.reps < 1) throw InvalidArgument("reps must be >= 1");
  SolveConfig cfg;
  if (o.backend == "cg")
    cfg.backend = Backend::iterative;
  else if (o.backend != "direct")
    throw InvalidArgument("backend must be direct or cg");

  std::string csv = "height,width,channels,backend,reps,median_s,solves_per_s,frames_per_s\n";
  json rows = json::array();
  for (int n : sizes) {
    if (n < 2) throw InvalidArgument("bench sizes must be >= 2");
    for (int s : channels) {
      ChannelStack stack;
      for (int k = 0; k < s; ++k) {
        SceneSpec spec;
        spec.seed = splitmix64(o.seed + static_cast<std::uint64_t>(n) * 1000 + static_cast<std::uint64_t>(k));
        spec.height = spec.width = n;
        const Scene scene = synth_scene(spec);
        stack.push_back({exact_gradients(scene.depth), ConfidenceField(n, n)});
      }
      std::vector<double> times;
      for (int r = 0; r < o.reps; ++r) {
        const auto t0 = Clock::now();
        const auto res = solve_stack(stack, cfg, 1);
        times.push_back(seconds_since(t0));
        if (res.channels.size() != stack.size()) throw NumericalError("bench: missing channel results");
      }
      std::sort(times.begin(), times.end());
      const double med = times[times.size() / 2];
      const double fps = 1.0 / med;
      char buf[256];
      std::snprintf(buf, sizeof buf, "%d,%d,%d,%s,%d,%.9g,%.9g,%.9g\n", n, n, s, o.backend.c_str(), o.reps, med,
                    s * fps, fps);
      csv += buf;
      rows.push_back({{"height", n}, {"width", n}, {"channels", s}, {"median_s", med},
                      {"solves_per_s", s * fps}, {"frames_per_s", fps}});
    }
  }
  write_file_atomic(o.out, csv);
  run.output(o.out);
  run.manifest.config = {{"sizes", o.sizes}, {"channels", o.channels}, {"backend", o.backend}, {"reps", o.reps}};
  run.manifest.seeds = {{"bench", o.seed}};
  run.result = {{"command", "bench"}, {"out", o.out}, {"rows", rows}};
  if (run.manifest_path.empty()) run.manifest_path = default_manifest(o.out);
}

// ---------------------------------------------------------------------------
// Dispatch

struct Options {
  SynthOptions synth;
  SolveOptions solve;
  EvalOptions eval;
  GradcheckOptions gradcheck;
  TrainOptions train;
  BenchOptions bench;
  std::string manifest;
  std::string replay_manifest;
  std::uint64_t train_seed = 0;
};

void add_manifest_option(CLI::App* sub, Options& o) {
  sub->add_option("--manifest", o.manifest, "where to write the run manifest");
}

void build_app(CLI::App& app, Options& o) {
  app.require_subcommand(1);
  app.set_help_flag("--help", "print help to stderr");

  auto* synth = app.add_subcommand("synth", "generate a piecewise-planar scene with gradient fixtures");
  synth->add_option("--seed", o.synth.seed);
  synth->add_option("--size", o.synth.size, "N or HxW");
  synth->add_option("--planes", o.synth.planes);
  synth->add_option("--depth-min", o.synth.depth_min);
  synth->add_option("--depth-max", o.synth.depth_max);
  synth->add_option("--noise", o.synth.noise, "std-dev of gradient noise");
  synth->add_option("--outliers", o.synth.outliers, "fraction of gradient entries shifted by +/-100");
  synth->add_option("--out-dir", o.synth.out_dir)->required();
  add_manifest_option(synth, o);

  auto* solve = app.add_subcommand("solve", "reconstruct depth from gradient maps");
  solve->add_option("--gx", o.solve.gx)->required();
  solve->add_option("--gy", o.solve.gy)->required();
  solve->add_option("--wx", o.solve.wx, "x confidences (default 1)");
  solve->add_option("--wy", o.solve.wy, "y confidences (default 1)");
  solve->add_option("--gauge", o.solve.gauge, "anchor:i,j,v[,w] | mean:v | tikhonov:mu");
  solve->add_option("--backend", o.solve.backend, "direct | cg");
  solve->add_option("--cg-tol", o.solve.cg_tol);
  solve->add_option("--cg-max-iters", o.solve.cg_max_iters);
  solve->add_option("--out", o.solve.out)->required();
  add_manifest_option(solve, o);

  auto* eval = app.add_subcommand("eval", "depth metrics of a prediction against ground truth");
  eval->add_option("--pred", o.eval.pred)->required();
  eval->add_option("--gt", o.eval.gt)->required();
  eval->add_flag("--align", o.eval.align, "least-squares scale and shift alignment first");
  add_manifest_option(eval, o);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of an analytic gradient");
  gc->add_option("--op", o.gradcheck.op, "op name or 'all'")->required();
  gc->add_option("--seed", o.gradcheck.seed);
  gc->add_option("--h", o.gradcheck.h, "central-difference step");
  gc->add_option("--tol", o.gradcheck.tol, "relative tolerance (default: per op)");
  add_manifest_option(gc, o);

  auto* tr = app.add_subcommand("train-toy", "train the toy depth model on synthetic scenes");
  tr->add_option("--config", o.train.config, "config.json");
  tr->add_option("--out-dir", o.train.out_dir)->required();
  tr->add_option("--seed", o.train_seed, "override the config seed");
  add_manifest_option(tr, o);

  auto* bench = app.add_subcommand("bench", "time per-channel solves");
  bench->add_option("--sizes", o.bench.sizes);
  bench->add_option("--channels", o.bench.channels, "channel counts per frame");
  bench->add_option("--backend", o.bench.backend);
  bench->add_option("--reps", o.bench.reps);
  bench->add_option("--seed", o.bench.seed);
  bench->add_option("--out", o.bench.out);
  add_manifest_option(bench, o);

  auto* replay = app.add_subcommand("replay", "re-run a manifest and compare output digests");
  replay->add_option("manifest", o.replay_manifest)->required();
}

json dispatch(const std::vector<std::string>& args, Run& run);

/// Re-executes the recorded command in its recorded working directory and
/// compares every output digest.
void run_replay(const std::string& manifest_path, Run& run) {
  json j;
  try {
    j = json::parse(read_file(manifest_path));
  } catch (const json::parse_error& e) {
    throw IoError("cannot parse manifest " + manifest_path + ": " + e.what());
  }
  const RunManifest recorded = manifest_from_json(j);
  if (recorded.command == "replay") throw InvalidArgument("cannot replay a replay manifest");
  const fs::path manifest_abs = fs::absolute(manifest_path);
  const fs::path prev = fs::current_path();
  const std::string wd = j.value("working_directory", std::string{});
  if (!wd.empty()) fs::current_path(wd);

  json mismatched_inputs = json::array();
  for (const auto& [path, dig] : recorded.input_digests) {
    if (!fs::exists(path) || file_digest(path) != dig) mismatched_inputs.push_back(path);
  }
  if (!mismatched_inputs.empty()) {
    fs::current_path(prev);
    throw IoError("replay inputs changed: " + mismatched_inputs.dump());
  }

  Run inner;
  inner.write_manifest = false;
  try {
    dispatch(recorded.argv, inner);
  } catch (...) {
    fs::current_path(prev);
    throw;
  }
  const bool timing_only = recorded.command == "bench";
  json outputs = json::array();
  bool identical = true;
  for (const auto& [path, dig] : recorded.output_digests) {
    const std::string now = inner.manifest.output_digests.count(path) ? inner.manifest.output_digests.at(path) : "";
    const bool same = now == dig;
    if (!timing_only) identical = identical && same;
    outputs.push_back({{"path", path}, {"recorded", dig}, {"replayed", now}, {"identical", same}});
  }
  fs::current_path(prev);
  run.manifest.input_digests[manifest_abs.string()] = file_digest(manifest_abs);
  run.manifest.config = {{"manifest", manifest_abs.string()}, {"reproduced", identical}, {"outputs", outputs}};
  run.result = {{"command", "replay"},
                {"replayed_command", recorded.command},
                {"outputs", outputs},
                {"reproduced", identical},
                {"compared", !timing_only},
                {"result", inner.result}};
  if (!identical) run.status = kExitCheckFailed;
  run.manifest_path = manifest_abs.string() + ".replay.json";
}

json dispatch(const std::vector<std::string>& args, Run& run) {
  CLI::App app{"vadepth: variational depth reconstruction tools", "vadepth"};
  Options o;
  build_app(app, o);
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    app.exit(e, std::cerr, std::cerr);
    throw;
  }

  run.manifest.argv = args;
  run.manifest_path = o.manifest;
  const auto t0 = Clock::now();
  auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  run.manifest.command = name;
  if (name == "synth") {
    run_synth(o.synth, run);
  } else if (name == "solve") {
    run_solve(o.solve, run);
  } else if (name == "eval") {
    run_eval(o.eval, run);
  } else if (name == "gradcheck") {
    run_gradcheck_cmd(o.gradcheck, run);
  } else if (name == "train-toy") {
    if (sub->count("--seed") > 0) o.train.seed = o.train_seed;
    run_train(o.train, run);
  } else if (name == "bench") {
    run_bench(o.bench, run);
  } else if (name == "replay") {
    run_replay(o.replay_manifest, run);
  }
  run.manifest.timings["wall_s"] = seconds_since(t0);
  if (run.write_manifest) {
    json m = to_json(run.manifest);
    m["working_directory"] = fs::current_path().string();
    write_file_atomic(run.manifest_path, m.dump(2) + "\n");
    run.result["manifest"] = run.manifest_path;
  }
  return run.result;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  Run run;
  try {
    const json out = dispatch(args, run);
    std::cout << out.dump(2) << std::endl;
    return run.status;
  } catch (const CLI::CallForHelp&) {
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what(), kExitUsage);
    return kExitUsage;
  } catch (const Error& e) {
    const int code = exit_code(e.kind());
    report_error(to_string(e.kind()), e.what(), code);
    return code;
  } catch (const fs::filesystem_error& e) {
    report_error("io", e.what(), kExitIo);
    return kExitIo;
  } catch (const std::exception& e) {
    report_error("numerical", e.what(), kExitNumerical);
    return kExitNumerical;
  }
}

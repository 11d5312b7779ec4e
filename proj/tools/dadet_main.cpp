#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "dadet/experiments.hpp"
#include "dadet/svg.hpp"
#include "json.hpp"

using nlohmann::json;
using namespace dadet;

namespace {

// Exit contract: 0 success, 1 usage error, 2 runtime failure.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string>& subcommand_names() {
  static const std::vector<std::string> names = {
      "gen-data",       "train",       "eval",           "ablation",
      "analyze-errors", "scale-sweep", "proposal-quality", "divergence"};
  return names;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

std::string file_digest(const std::string& path) {
  std::string bytes = slurp(path);
  return hex64(fnv1a(bytes.data(), bytes.size()));
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    std::size_t a = cur.find_first_not_of(" \t");
    std::size_t b = cur.find_last_not_of(" \t");
    out.push_back(a == std::string::npos ? "" : cur.substr(a, b - a + 1));
  }
  if (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

float parse_float(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    float v = std::stof(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw UsageError(std::string("bad ") + what + ": '" + s + "'");
  }
}

std::vector<float> parse_float_list(const std::string& s, const char* what) {
  std::vector<float> out;
  for (const std::string& tok : split_csv(s)) {
    if (tok.empty()) throw UsageError(std::string("empty entry in ") + what);
    out.push_back(parse_float(tok, what));
  }
  return out;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const std::string& tok : split_csv(s)) {
    try {
      std::size_t pos = 0;
      unsigned long long v = std::stoull(tok, &pos);
      if (pos != tok.size()) throw std::invalid_argument(tok);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("bad seed: '" + tok + "'");
    }
  }
  if (out.empty()) throw UsageError("need at least one seed");
  return out;
}

AblationMask parse_mask(const std::string& s) {
  AblationMask m{false, false, false};
  for (const std::string& tok : split_csv(s)) {
    if (tok == "img") m.img = true;
    else if (tok == "ins") m.ins = true;
    else if (tok == "cst") m.cst = true;
    else if (tok == "none" || tok.empty()) continue;
    else throw UsageError("unknown ablation component '" + tok +
                          "' (expected img, ins, cst, or none)");
  }
  return m;
}

std::string mask_to_string(const AblationMask& m) {
  std::string s;
  if (m.img) s += "img,";
  if (m.ins) s += "ins,";
  if (m.cst) s += "cst,";
  if (!s.empty()) s.pop_back();
  return s;
}

// name=path pairs, comma separated.
std::vector<std::pair<std::string, std::string>> parse_models(const std::string& s) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const std::string& tok : split_csv(s)) {
    std::size_t eq = tok.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == tok.size())
      throw UsageError("bad model entry '" + tok + "' (expected name=path.ckpt)");
    out.emplace_back(tok.substr(0, eq), tok.substr(eq + 1));
  }
  if (out.empty()) throw UsageError("need at least one name=path model entry");
  return out;
}

json dataset_input(const Dataset& ds, const std::string& path) {
  return json{{"path", path}, {"digest", hex64(ds.digest)}};
}

json checkpoint_input(const std::string& path) {
  return json{{"path", path}, {"digest", file_digest(path)}};
}

void write_sidecar(const std::string& path, const char* command, json config,
                   json inputs, json outputs) {
  json j;
  j["tool"] = "dadet";
  j["version"] = kToolVersion;
  j["command"] = command;
  j["config"] = std::move(config);
  j["inputs"] = std::move(inputs);
  j["outputs"] = std::move(outputs);
  spit(path, j.dump(2) + "\n");
}

template <typename T>
CLI::Option* opt(CLI::App* cmd, const std::string& name, T& var,
                 const std::string& desc) {
  return cmd->add_option(name, var, desc)
      ->capture_default_str()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

// ---------------------------------------------------------------- gen-data

struct GenDataParams {
  std::string out;
  int num_images = 100;
  int image_size = 64;
  int num_classes = 3;
  int min_objects = 1;
  int max_objects = 4;
  float min_object_size = 10.0f;
  float max_object_size = 26.0f;
  std::string shift = "none";
  float intensity = 0.0f;
  float scale_factor = 1.0f;
  std::uint64_t seed = 1;
  int domain = -1;
};

void add_gen_data(CLI::App& app, GenDataParams& p) {
  CLI::App* cmd = app.add_subcommand("gen-data", "Render a synthetic shape dataset");
  opt(cmd, "--out", p.out, "Output dataset path (.shpw)")->required();
  opt(cmd, "--num-images", p.num_images, "Samples to render");
  opt(cmd, "--image-size", p.image_size, "Square image extent in pixels");
  opt(cmd, "--num-classes", p.num_classes, "Shape classes (1..3)");
  opt(cmd, "--min-objects", p.min_objects, "Minimum shapes per image");
  opt(cmd, "--max-objects", p.max_objects, "Maximum shapes per image");
  opt(cmd, "--min-object-size", p.min_object_size, "Minimum shape extent in pixels");
  opt(cmd, "--max-object-size", p.max_object_size, "Maximum shape extent in pixels");
  opt(cmd, "--shift", p.shift, "Domain shift: none, style, fog, or scale");
  opt(cmd, "--intensity", p.intensity, "Shift intensity in [0,1]");
  opt(cmd, "--scale-factor", p.scale_factor, "Frame scale for the scale shift");
  opt(cmd, "--seed", p.seed, "Scene generator seed");
  opt(cmd, "--domain", p.domain, "Domain label; -1 derives it from the shift");
}

void run_gen_data(const GenDataParams& p) {
  DatasetSpec spec;
  spec.image_size = p.image_size;
  spec.num_images = p.num_images;
  spec.num_classes = p.num_classes;
  spec.min_objects = p.min_objects;
  spec.max_objects = p.max_objects;
  spec.min_object_size = p.min_object_size;
  spec.max_object_size = p.max_object_size;
  try {
    spec.shift.kind = shift_kind_from_name(p.shift);
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
  spec.shift.intensity = p.intensity;
  spec.shift.scale_factor = p.scale_factor;
  spec.seed = p.seed;
  spec.domain = p.domain;
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  Dataset ds = make_dataset(spec, p.out);

  write_sidecar(p.out + ".run.json", "gen-data", json::parse(spec.to_json()),
                json::object(),
                json{{"dataset", p.out}, {"digest", hex64(ds.digest)}});
  std::printf("wrote %zu samples to %s (digest %s)\n", ds.samples.size(),
              p.out.c_str(), hex64(ds.digest).c_str());
}

// ------------------------------------------------------------------- train

struct TrainParams {
  std::string source, target, out_dir;
  std::string eval_path, resume;
  float lambda = 0.1f;
  float lr = 0.001f;
  float lr_reduced = 0.0001f;
  int lr_drop = 1500;
  int iters = 2000;
  float momentum = 0.9f;
  float weight_decay = 0.0005f;
  float grad_clip = 10.0f;
  std::string ablation = "img,ins,cst";
  std::uint64_t seed = 1;
  int eval_every = 0;
  int adapt_rois = 16;
};

void add_train_knobs(CLI::App* cmd, TrainParams& p) {
  opt(cmd, "--lambda", p.lambda, "Adaptation loss weight");
  opt(cmd, "--lr", p.lr, "Initial learning rate");
  opt(cmd, "--lr-reduced", p.lr_reduced, "Learning rate after the drop");
  opt(cmd, "--lr-drop", p.lr_drop, "Iteration at which the rate drops");
  opt(cmd, "--iters", p.iters, "Training iterations");
  opt(cmd, "--momentum", p.momentum, "SGD momentum");
  opt(cmd, "--weight-decay", p.weight_decay, "L2 weight decay");
  opt(cmd, "--grad-clip", p.grad_clip, "Global gradient-norm ceiling; 0 disables");
  opt(cmd, "--adapt-rois", p.adapt_rois, "Top proposals per image fed to the instance head");
}

TrainConfig train_config_from(const TrainParams& p) {
  TrainConfig tc;
  tc.lambda = p.lambda;
  tc.lr_initial = p.lr;
  tc.lr_reduced = p.lr_reduced;
  tc.lr_drop_iter = p.lr_drop;
  tc.total_iters = p.iters;
  tc.momentum = p.momentum;
  tc.weight_decay = p.weight_decay;
  tc.grad_clip = p.grad_clip;
  tc.ablation = parse_mask(p.ablation);
  tc.seed = p.seed;
  tc.eval_every = p.eval_every;
  tc.adapt_rois = p.adapt_rois;
  try {
    tc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return tc;
}

void add_train(CLI::App& app, TrainParams& p) {
  CLI::App* cmd = app.add_subcommand("train", "Train a detector on a source/target dataset pair");
  opt(cmd, "--source", p.source, "Labeled source dataset (.shpw)")->required();
  opt(cmd, "--target", p.target, "Unlabeled target dataset (.shpw)")->required();
  opt(cmd, "--out", p.out_dir, "Output directory (model.ckpt, log.csv, run.json)")->required();
  opt(cmd, "--eval", p.eval_path, "Annotated dataset for periodic snapshots");
  opt(cmd, "--eval-every", p.eval_every, "Snapshot cadence in iterations; 0 disables");
  opt(cmd, "--resume", p.resume, "Checkpoint to resume from");
  opt(cmd, "--ablation", p.ablation,
      "Enabled adaptation components, e.g. img,ins,cst; empty for the baseline");
  opt(cmd, "--seed", p.seed, "Training seed");
  add_train_knobs(cmd, p);
}

void run_train(const TrainParams& p) {
  TrainConfig tc = train_config_from(p);
  Dataset source = load_dataset(p.source);
  Dataset target = load_dataset(p.target);

  DetectorConfig dc;
  dc.num_classes = source.spec.num_classes;

  std::filesystem::create_directories(p.out_dir);
  const std::string ckpt_path = p.out_dir + "/model.ckpt";
  const std::string log_path = p.out_dir + "/log.csv";

  TrainOptions opts;
  opts.log_path = log_path;
  opts.checkpoint_path = ckpt_path;

  Dataset eval_ds;
  if (!p.eval_path.empty()) {
    eval_ds = load_dataset(p.eval_path);
    opts.eval_ds = &eval_ds;
  }
  Checkpoint resume;
  if (!p.resume.empty()) {
    resume = load_checkpoint(p.resume);
    opts.resume = &resume;
  }

  TrainResult result = train(tc, dc, source, target, opts);
  for (const std::string& w : result.warnings)
    std::fprintf(stderr, "warning: %s\n", w.c_str());

  json inputs;
  inputs["source"] = dataset_input(source, p.source);
  inputs["target"] = dataset_input(target, p.target);
  if (!p.eval_path.empty()) inputs["eval"] = dataset_input(eval_ds, p.eval_path);
  if (!p.resume.empty()) inputs["resume"] = checkpoint_input(p.resume);

  json config = json::parse(tc.to_json());
  config["num_classes"] = dc.num_classes;

  write_sidecar(p.out_dir + "/run.json", "train", config, inputs,
                json{{"checkpoint", ckpt_path}, {"log", log_path}});

  const LogRow& last = result.log.back();
  std::printf("trained %d iterations; final total loss %.6g (rpn %.4g roi %.4g)\n",
              tc.total_iters, last.losses.total, last.losses.l_rpn, last.losses.l_roi);
  for (const Snapshot& s : result.snapshots)
    std::printf("snapshot iter %d mean AP %.4f\n", s.iter, s.mean_ap);
  std::printf("checkpoint %s\n", ckpt_path.c_str());
}

// -------------------------------------------------------------------- eval

struct EvalParams {
  std::string checkpoint, data, out;
  float iou = 0.5f;
};

void add_eval(CLI::App& app, EvalParams& p) {
  CLI::App* cmd = app.add_subcommand("eval", "Evaluate a checkpoint on an annotated dataset");
  opt(cmd, "--checkpoint", p.checkpoint, "Trained checkpoint")->required();
  opt(cmd, "--data", p.data, "Annotated dataset (.shpw)")->required();
  opt(cmd, "--iou", p.iou, "Matching IoU threshold");
  opt(cmd, "--out", p.out, "Write the report as JSON here");
}

void run_eval(const EvalParams& p) {
  Checkpoint ck = load_checkpoint(p.checkpoint);
  Dataset ds = load_dataset(p.data);
  EvalReport report = evaluate_model(ck.model.det, ck.det_cfg, ds, p.iou);
  report.checkpoint_digest = file_digest(p.checkpoint);

  for (const auto& [cls, ap] : report.per_class_ap)
    std::printf("class %d AP %.4f\n", cls, ap);
  std::printf("mean AP %.4f over %zu classes; %d detections\n", report.mean_ap,
              report.per_class_ap.size(), report.detection_count);

  if (!p.out.empty()) {
    json j;
    j["per_class_ap"] = json::object();
    for (const auto& [cls, ap] : report.per_class_ap)
      j["per_class_ap"][std::to_string(cls)] = ap;
    j["mean_ap"] = report.mean_ap;
    j["detection_count"] = report.detection_count;
    j["dataset_digest"] = report.dataset_digest;
    j["checkpoint_digest"] = report.checkpoint_digest;
    j["iou_thresh"] = p.iou;
    spit(p.out, j.dump(2) + "\n");
    write_sidecar(p.out + ".run.json", "eval", json{{"iou", p.iou}},
                  json{{"checkpoint", checkpoint_input(p.checkpoint)},
                       {"data", dataset_input(ds, p.data)}},
                  json{{"report", p.out}});
  }
}

// ---------------------------------------------------------------- ablation

struct AblationParams {
  std::string source, target, eval, out_dir;
  std::string runs = "baseline,img,ins,img+ins,img+ins+cst";
  std::string seeds = "1,2,3";
  int mbo_top_p = 64;
  int div_samples = 50;
  TrainParams train;
};

void add_ablation(CLI::App& app, AblationParams& p) {
  CLI::App* cmd = app.add_subcommand(
      "ablation", "Train the adaptation ablation ladder and tabulate target AP");
  opt(cmd, "--source", p.source, "Labeled source dataset (.shpw)")->required();
  opt(cmd, "--target", p.target, "Unlabeled target dataset (.shpw)")->required();
  opt(cmd, "--eval", p.eval, "Annotated target dataset for evaluation")->required();
  opt(cmd, "--out", p.out_dir, "Output directory for tables, charts, and runs")->required();
  opt(cmd, "--runs", p.runs, "Run names to include, from the standard ladder");
  opt(cmd, "--seeds", p.seeds, "Training seeds to average over");
  opt(cmd, "--mbo-top-p", p.mbo_top_p, "Proposals per image for mean best overlap");
  opt(cmd, "--div-samples", p.div_samples, "Images per domain for the divergence probe");
  add_train_knobs(cmd, p.train);
}

std::vector<RunSpec> resolve_runs(const std::string& names) {
  std::vector<RunSpec> out;
  for (const std::string& name : split_csv(names)) {
    bool found = false;
    for (const RunSpec& spec : standard_runs()) {
      if (spec.name == name) {
        out.push_back(spec);
        found = true;
        break;
      }
    }
    if (!found) throw UsageError("unknown run '" + name + "'");
  }
  if (out.empty()) throw UsageError("need at least one run");
  return out;
}

void run_ablation(const AblationParams& p) {
  std::vector<RunSpec> runs = resolve_runs(p.runs);

  Benchmark bench;
  bench.source_train = load_dataset(p.source);
  bench.target_train = load_dataset(p.target);
  bench.target_eval = load_dataset(p.eval);

  StudyConfig cfg;
  cfg.train = train_config_from(p.train);
  cfg.detector.num_classes = bench.source_train.spec.num_classes;
  cfg.seeds = parse_seed_list(p.seeds);
  cfg.mbo_top_p = p.mbo_top_p;
  cfg.divergence_samples = p.div_samples;
  std::filesystem::create_directories(p.out_dir);
  cfg.out_dir = p.out_dir + "/runs";

  StudyResult study = run_study_on(cfg, bench, runs);

  std::string table_txt = ablation_table_text(study.table);
  spit(p.out_dir + "/ablation.csv", ablation_table_csv(study.table));
  spit(p.out_dir + "/ablation.txt", table_txt);

  std::string mbo_csv = "model,top_p,mbo\n";
  for (const auto& [name, mbo] : study.mbo) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s,%d,%.4f\n", name.c_str(), p.mbo_top_p, mbo);
    mbo_csv += buf;
  }
  spit(p.out_dir + "/proposal_quality.csv", mbo_csv);

  std::string div_csv = "model,d_h\n";
  {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "initial,%.4f\n", study.div_before_mean);
    div_csv += buf;
    for (const auto& [name, dh] : study.div_after_mean) {
      std::snprintf(buf, sizeof(buf), "%s,%.4f\n", name.c_str(), dh);
      div_csv += buf;
    }
  }
  spit(p.out_dir + "/divergence.csv", div_csv);

  json config = json::parse(cfg.train.to_json());
  config["runs"] = p.runs;
  config["seeds"] = p.seeds;
  config["mbo_top_p"] = p.mbo_top_p;
  config["div_samples"] = p.div_samples;
  config["num_classes"] = cfg.detector.num_classes;
  write_sidecar(p.out_dir + "/run.json", "ablation", config,
                json{{"source", dataset_input(bench.source_train, p.source)},
                     {"target", dataset_input(bench.target_train, p.target)},
                     {"eval", dataset_input(bench.target_eval, p.eval)}},
                json{{"table_csv", p.out_dir + "/ablation.csv"},
                     {"table_txt", p.out_dir + "/ablation.txt"},
                     {"proposal_quality", p.out_dir + "/proposal_quality.csv"},
                     {"divergence", p.out_dir + "/divergence.csv"},
                     {"runs_dir", cfg.out_dir}});

  std::fputs(table_txt.c_str(), stdout);
  std::printf("\nmean best overlap (top %d proposals):\n", p.mbo_top_p);
  for (const auto& [name, mbo] : study.mbo) std::printf("  %-12s %.4f\n", name.c_str(), mbo);
  std::printf("\nH-divergence: initial %.4f\n", study.div_before_mean);
  for (const auto& [name, dh] : study.div_after_mean)
    std::printf("  %-12s %.4f\n", name.c_str(), dh);
}

// ---------------------------------------------------------- analyze-errors

struct AnalyzeErrorsParams {
  std::string data, models, out_prefix;
  int top_r = 500;
};

void add_analyze_errors(CLI::App& app, AnalyzeErrorsParams& p) {
  CLI::App* cmd = app.add_subcommand(
      "analyze-errors", "Bucket top detections into correct/mislocalized/background");
  opt(cmd, "--data", p.data, "Annotated dataset (.shpw)")->required();
  opt(cmd, "--models", p.models, "Comma-separated name=checkpoint pairs")->required();
  opt(cmd, "--out", p.out_prefix, "Output prefix (.csv and .svg are appended)")->required();
  opt(cmd, "--top-r", p.top_r, "Detections examined per model, dataset-wide by score");
}

void run_analyze_errors(const AnalyzeErrorsParams& p) {
  Dataset ds = load_dataset(p.data);
  auto models = parse_models(p.models);

  std::string csv = "model,correct,mislocalized,background\n";
  std::vector<std::string> bars;
  std::vector<std::vector<float>> values;
  json inputs;
  inputs["data"] = dataset_input(ds, p.data);
  for (const auto& [name, path] : models) {
    Checkpoint ck = load_checkpoint(path);
    std::vector<std::vector<Detection>> dets;
    dets.reserve(ds.samples.size());
    for (const Sample& s : ds.samples)
      dets.push_back(detect(s.image, ck.model.det, ck.det_cfg));
    ErrorTaxonomy t = categorize_detections(dets, ds, p.top_r);

    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d\n", name.c_str(), t.correct,
                  t.mislocalized, t.background);
    csv += buf;
    bars.push_back(name);
    values.push_back({static_cast<float>(t.correct),
                      static_cast<float>(t.mislocalized),
                      static_cast<float>(t.background)});
    inputs["model:" + name] = checkpoint_input(path);
    std::printf("%-12s correct %d mislocalized %d background %d\n", name.c_str(),
                t.correct, t.mislocalized, t.background);
  }

  std::string svg = stacked_bar_chart("Top detection error composition",
                                      "detections", bars,
                                      {"correct", "mislocalized", "background"},
                                      values);
  spit(p.out_prefix + ".csv", csv);
  spit(p.out_prefix + ".svg", svg);
  write_sidecar(p.out_prefix + ".run.json", "analyze-errors",
                json{{"top_r", p.top_r}, {"models", p.models}}, inputs,
                json{{"csv", p.out_prefix + ".csv"}, {"svg", p.out_prefix + ".svg"}});
}

// --------------------------------------------------------------- scale-sweep

struct ScaleSweepParams {
  std::string data, models, out_prefix;
  std::string scales = "0.5,0.75,1,1.25";
};

void add_scale_sweep(CLI::App& app, ScaleSweepParams& p) {
  CLI::App* cmd = app.add_subcommand(
      "scale-sweep", "Evaluate checkpoints on rescaled copies of a dataset");
  opt(cmd, "--data", p.data, "Annotated dataset (.shpw)")->required();
  opt(cmd, "--models", p.models, "Comma-separated name=checkpoint pairs")->required();
  opt(cmd, "--scales", p.scales, "Comma-separated resize factors");
  opt(cmd, "--out", p.out_prefix, "Output prefix (.csv and .svg are appended)")->required();
}

void run_scale_sweep_cmd(const ScaleSweepParams& p) {
  Dataset ds = load_dataset(p.data);
  auto models = parse_models(p.models);
  std::vector<float> scales = parse_float_list(p.scales, "scale");
  if (scales.empty()) throw UsageError("need at least one scale");
  for (float s : scales)
    if (!(s > 0.0f)) throw UsageError("scales must be positive");

  std::vector<Dataset> resized;
  resized.reserve(scales.size());
  for (float s : scales) resized.push_back(resized_dataset(ds, s));

  std::vector<SweepPoint> points;
  std::vector<ChartSeries> series;
  json inputs;
  inputs["data"] = dataset_input(ds, p.data);
  for (const auto& [name, path] : models) {
    Checkpoint ck = load_checkpoint(path);
    ChartSeries line;
    line.label = name;
    for (std::size_t i = 0; i < scales.size(); ++i) {
      EvalReport rep = evaluate_model(ck.model.det, ck.det_cfg, resized[i]);
      SweepPoint pt;
      pt.model = name;
      pt.scale = scales[i];
      pt.mean_ap = rep.mean_ap;
      points.push_back(pt);
      line.xs.push_back(scales[i]);
      line.ys.push_back(rep.mean_ap);
      std::printf("%-12s scale %.3g mean AP %.4f\n", name.c_str(), scales[i], rep.mean_ap);
    }
    series.push_back(std::move(line));
    inputs["model:" + name] = checkpoint_input(path);
  }

  spit(p.out_prefix + ".csv", scale_sweep_csv(points));
  spit(p.out_prefix + ".svg",
       line_chart("Accuracy under evaluation-scale shift", "scale factor",
                  "mean AP", series));
  write_sidecar(p.out_prefix + ".run.json", "scale-sweep",
                json{{"scales", p.scales}, {"models", p.models}}, inputs,
                json{{"csv", p.out_prefix + ".csv"}, {"svg", p.out_prefix + ".svg"}});
}

// ---------------------------------------------------------- proposal-quality

struct ProposalQualityParams {
  std::string data, models, out;
  int top_p = 64;
};

void add_proposal_quality(CLI::App& app, ProposalQualityParams& p) {
  CLI::App* cmd = app.add_subcommand(
      "proposal-quality", "Mean best overlap of top proposals against ground truth");
  opt(cmd, "--data", p.data, "Annotated dataset (.shpw)")->required();
  opt(cmd, "--models", p.models, "Comma-separated name=checkpoint pairs")->required();
  opt(cmd, "--top-p", p.top_p, "Proposals per image");
  opt(cmd, "--out", p.out, "Write model,top_p,mbo rows as CSV here");
}

void run_proposal_quality(const ProposalQualityParams& p) {
  Dataset ds = load_dataset(p.data);
  auto models = parse_models(p.models);

  std::string csv = "model,top_p,mbo\n";
  json inputs;
  inputs["data"] = dataset_input(ds, p.data);
  for (const auto& [name, path] : models) {
    Checkpoint ck = load_checkpoint(path);
    double mbo = model_mean_best_overlap(ck.model.det, ck.det_cfg, ds, p.top_p);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s,%d,%.4f\n", name.c_str(), p.top_p, mbo);
    csv += buf;
    inputs["model:" + name] = checkpoint_input(path);
    std::printf("%-12s mbo %.4f (top %d)\n", name.c_str(), mbo, p.top_p);
  }
  if (!p.out.empty()) {
    spit(p.out, csv);
    write_sidecar(p.out + ".run.json", "proposal-quality",
                  json{{"top_p", p.top_p}, {"models", p.models}}, inputs,
                  json{{"csv", p.out}});
  }
}

// -------------------------------------------------------------- divergence

struct DivergenceParams {
  std::string checkpoint, source, target;
  std::string source_features, target_features;
  std::string dump, out;
  int limit = 0;
};

void add_divergence(CLI::App& app, DivergenceParams& p) {
  CLI::App* cmd = app.add_subcommand(
      "divergence", "Estimate the H-divergence between two domains' backbone features");
  opt(cmd, "--checkpoint", p.checkpoint, "Checkpoint whose backbone extracts features");
  opt(cmd, "--source", p.source, "Source dataset (.shpw)");
  opt(cmd, "--target", p.target, "Target dataset (.shpw)");
  opt(cmd, "--limit", p.limit, "Images per domain; 0 takes all");
  opt(cmd, "--dump-features", p.dump,
      "Prefix for saving extracted features (_source.csv, _target.csv)");
  opt(cmd, "--source-features", p.source_features,
      "Skip extraction: read source feature vectors from this CSV");
  opt(cmd, "--target-features", p.target_features,
      "Skip extraction: read target feature vectors from this CSV");
  opt(cmd, "--out", p.out, "Write the estimate as JSON here");
}

std::vector<std::vector<float>> read_feature_csv(const std::string& path) {
  std::istringstream in(slurp(path));
  std::vector<std::vector<float>> feats;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<float> row;
    std::string tok;
    std::istringstream cells(line);
    while (std::getline(cells, tok, ',')) row.push_back(parse_float(tok, "feature"));
    feats.push_back(std::move(row));
  }
  return feats;
}

std::string feature_csv(const std::vector<std::vector<float>>& feats) {
  std::string out;
  char buf[32];
  for (const auto& row : feats) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.9g", row[i]);
      if (i) out += ',';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

void run_divergence(const DivergenceParams& p) {
  std::vector<std::vector<float>> fs, ft;
  json inputs;
  const bool from_files = !p.source_features.empty() || !p.target_features.empty();
  if (from_files) {
    if (p.source_features.empty() || p.target_features.empty())
      throw UsageError("--source-features and --target-features go together");
    fs = read_feature_csv(p.source_features);
    ft = read_feature_csv(p.target_features);
    inputs["source_features"] = json{{"path", p.source_features},
                                     {"digest", file_digest(p.source_features)}};
    inputs["target_features"] = json{{"path", p.target_features},
                                     {"digest", file_digest(p.target_features)}};
  } else {
    if (p.checkpoint.empty() || p.source.empty() || p.target.empty())
      throw UsageError("need --checkpoint, --source, and --target (or saved features)");
    Checkpoint ck = load_checkpoint(p.checkpoint);
    Dataset source = load_dataset(p.source);
    Dataset target = load_dataset(p.target);
    fs = pooled_backbone_features(ck.model.det, ck.det_cfg, source, p.limit);
    ft = pooled_backbone_features(ck.model.det, ck.det_cfg, target, p.limit);
    inputs["checkpoint"] = checkpoint_input(p.checkpoint);
    inputs["source"] = dataset_input(source, p.source);
    inputs["target"] = dataset_input(target, p.target);
    if (!p.dump.empty()) {
      spit(p.dump + "_source.csv", feature_csv(fs));
      spit(p.dump + "_target.csv", feature_csv(ft));
      std::printf("features saved to %s_{source,target}.csv\n", p.dump.c_str());
    }
  }

  HDivergenceEstimate est = estimate_h_divergence(fs, ft);
  std::printf("err_source %.4f err_target %.4f d_H %.4f\n", est.err_source,
              est.err_target, est.d_h);

  if (!p.out.empty()) {
    json j{{"err_source", est.err_source},
           {"err_target", est.err_target},
           {"d_h", est.d_h},
           {"vectors_source", fs.size()},
           {"vectors_target", ft.size()}};
    spit(p.out, j.dump(2) + "\n");
    write_sidecar(p.out + ".run.json", "divergence", json{{"limit", p.limit}},
                  inputs, json{{"estimate", p.out}});
  }
}

// ------------------------------------------------------------ config merge

struct PreScan {
  std::string config_path;
  std::string subcommand;
  std::size_t subcommand_index = 0;  // index into the token list
};

PreScan pre_scan(const std::vector<std::string>& tokens) {
  PreScan scan;
  for (std::size_t i = 1; i < tokens.size(); ++i) {
    const std::string& tok = tokens[i];
    if (tok == "--config") {
      if (i + 1 < tokens.size()) scan.config_path = tokens[++i];
      continue;
    }
    if (tok.rfind("--config=", 0) == 0) {
      scan.config_path = tok.substr(9);
      continue;
    }
    if (!tok.empty() && tok[0] == '-') continue;
    for (const std::string& name : subcommand_names()) {
      if (tok == name) {
        scan.subcommand = name;
        scan.subcommand_index = i;
        return scan;
      }
    }
  }
  return scan;
}

// Config values become --key=value tokens injected right after the
// subcommand; later (real) command-line tokens win via TakeLast.
std::vector<std::string> merge_config(const std::vector<std::string>& tokens,
                                      const PreScan& scan, CLI::App& app) {
  ConfigFile file;
  try {
    file = parse_flat_config(slurp(scan.config_path));
  } catch (const std::exception& e) {
    throw UsageError(std::string("config file: ") + e.what());
  }
  for (const auto& [section, _] : file.sections) {
    if (section.empty()) throw UsageError("config file: keys must live under a [subcommand] section");
    bool known = false;
    for (const std::string& name : subcommand_names()) known |= (section == name);
    if (!known) throw UsageError("config file: unknown section [" + section + "]");
  }

  auto it = file.sections.find(scan.subcommand);
  if (it == file.sections.end()) return tokens;

  CLI::App* cmd = app.get_subcommand(scan.subcommand);
  std::vector<std::string> injected;
  for (const auto& [key, value] : it->second) {
    if (cmd->get_option_no_throw("--" + key) == nullptr)
      throw UsageError("config file: unknown key '" + key + "' in [" + scan.subcommand + "]");
    bool overridden = false;
    for (std::size_t i = scan.subcommand_index + 1; i < tokens.size(); ++i) {
      if (tokens[i] == "--" + key || tokens[i].rfind("--" + key + "=", 0) == 0) {
        overridden = true;
        break;
      }
    }
    if (overridden) {
      std::fprintf(stderr, "config: %s.%s overridden on the command line\n",
                   scan.subcommand.c_str(), key.c_str());
    }
    injected.push_back("--" + key + "=" + value);
  }

  std::vector<std::string> out(tokens.begin(),
                               tokens.begin() + static_cast<long>(scan.subcommand_index) + 1);
  out.insert(out.end(), injected.begin(), injected.end());
  out.insert(out.end(), tokens.begin() + static_cast<long>(scan.subcommand_index) + 1,
             tokens.end());
  return out;
}

void print_effective_config(const CLI::App* cmd) {
  std::printf("[%s]\n", cmd->get_name().c_str());
  for (const CLI::Option* o : cmd->get_options()) {
    if (o->get_lnames().empty()) continue;
    const std::string& name = o->get_lnames().front();
    if (name == "help" || name == "config" || name == "print-config") continue;
    std::string value;
    if (o->count() > 0) {
      const auto& results = o->results();
      value = results.empty() ? "" : results.back();
    } else {
      value = o->get_default_str();
    }
    std::printf("%s = %s\n", name.c_str(), value.c_str());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Domain-adaptive toy detector: synthetic data, training, evaluation, analyses"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  std::string config_path;
  bool print_config = false;

  GenDataParams gen_p;
  TrainParams train_p;
  EvalParams eval_p;
  AblationParams abl_p;
  AnalyzeErrorsParams err_p;
  ScaleSweepParams sweep_p;
  ProposalQualityParams prop_p;
  DivergenceParams div_p;

  add_gen_data(app, gen_p);
  add_train(app, train_p);
  add_eval(app, eval_p);
  add_ablation(app, abl_p);
  add_analyze_errors(app, err_p);
  add_scale_sweep(app, sweep_p);
  add_proposal_quality(app, prop_p);
  add_divergence(app, div_p);

  app.add_option("--config", config_path,
                 "Read defaults from a key = value file with [subcommand] sections");
  app.add_flag("--print-config", print_config,
               "Print the effective configuration and exit without running");
  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    sub->add_option("--config", config_path, "Config file (see the top-level --config)");
    sub->add_flag("--print-config", print_config,
                  "Print the effective configuration and exit without running");
  }

  std::vector<std::string> tokens(argv, argv + argc);

  try {
    PreScan scan = pre_scan(tokens);
    if (!scan.config_path.empty() && !scan.subcommand.empty())
      tokens = merge_config(tokens, scan, app);

    std::vector<const char*> cargs;
    cargs.reserve(tokens.size());
    for (const std::string& t : tokens) cargs.push_back(t.c_str());
    try {
      app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      app.exit(e);
      return 1;
    }

    if (print_config) {
      for (const CLI::App* sub : app.get_subcommands()) print_effective_config(sub);
      return 0;
    }

    if (app.got_subcommand("gen-data")) run_gen_data(gen_p);
    else if (app.got_subcommand("train")) run_train(train_p);
    else if (app.got_subcommand("eval")) run_eval(eval_p);
    else if (app.got_subcommand("ablation")) run_ablation(abl_p);
    else if (app.got_subcommand("analyze-errors")) run_analyze_errors(err_p);
    else if (app.got_subcommand("scale-sweep")) run_scale_sweep_cmd(sweep_p);
    else if (app.got_subcommand("proposal-quality")) run_proposal_quality(prop_p);
    else if (app.got_subcommand("divergence")) run_divergence(div_p);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}

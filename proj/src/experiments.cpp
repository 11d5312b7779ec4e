#include "dadet/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "dadet/svg.hpp"

namespace dadet {

namespace {

DatasetSpec base_spec(const BenchmarkSpec& b, int num_images,
                      std::uint64_t stream) {
  DatasetSpec spec;
  spec.image_size = b.image_size;
  spec.num_images = num_images;
  spec.num_classes = b.num_classes;
  spec.seed = mix_seed(b.data_seed, stream);
  return spec;
}

std::uint64_t model_digest(const FullModel& model) {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, t] : model.named()) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()), h);
  }
  return h;
}

std::vector<std::vector<Detection>> detect_dataset(const DetectorParams& params,
                                                   const DetectorConfig& cfg,
                                                   const Dataset& ds) {
  std::vector<std::vector<Detection>> out;
  out.reserve(ds.samples.size());
  for (const Sample& s : ds.samples) out.push_back(detect(s.image, params, cfg));
  return out;
}

}  // namespace

DatasetSpec BenchmarkSpec::source_train_spec() const {
  DatasetSpec spec = base_spec(*this, num_train, 1);
  spec.domain = 0;
  return spec;
}

DatasetSpec BenchmarkSpec::target_train_spec() const {
  DatasetSpec spec = base_spec(*this, num_train, 2);
  spec.shift = shift;
  spec.domain = 1;
  return spec;
}

DatasetSpec BenchmarkSpec::target_eval_spec() const {
  DatasetSpec spec = base_spec(*this, num_eval, 3);
  spec.shift = shift;
  spec.domain = 1;
  return spec;
}

Benchmark build_benchmark(const BenchmarkSpec& spec) {
  Benchmark b;
  b.source_train = build_dataset(spec.source_train_spec());
  b.target_train = build_dataset(spec.target_train_spec());
  b.target_eval = build_dataset(spec.target_eval_spec());
  return b;
}

const std::vector<RunSpec>& standard_runs() {
  static const std::vector<RunSpec> runs = {
      {"baseline", false, {false, false, false}},
      {"img", true, {true, false, false}},
      {"ins", true, {false, true, false}},
      {"img+ins", true, {true, true, false}},
      {"img+ins+cst", true, {true, true, true}},
  };
  return runs;
}

std::vector<std::vector<float>> pooled_backbone_features(
    const DetectorParams& params, const DetectorConfig& cfg, const Dataset& ds,
    int limit) {
  (void)cfg;
  const int n = limit > 0
                    ? std::min<int>(limit, static_cast<int>(ds.samples.size()))
                    : static_cast<int>(ds.samples.size());
  std::vector<std::vector<float>> feats;
  feats.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tape tape(false);
    Tensor fm = backbone_features(tape, params, ds.samples[i].image);
    const int channels = fm.shape()[1];
    const int hw = fm.shape()[2] * fm.shape()[3];
    std::vector<float> pooled(static_cast<std::size_t>(channels));
    const float* d = fm.data();
    for (int c = 0; c < channels; ++c) {
      double sum = 0.0;
      for (int k = 0; k < hw; ++k) sum += d[c * hw + k];
      pooled[static_cast<std::size_t>(c)] = static_cast<float>(sum / hw);
    }
    feats.push_back(std::move(pooled));
  }
  return feats;
}

HDivergenceEstimate divergence_between(const DetectorParams& params,
                                       const DetectorConfig& cfg,
                                       const Dataset& source,
                                       const Dataset& target, int limit) {
  auto fs = pooled_backbone_features(params, cfg, source, limit);
  auto ft = pooled_backbone_features(params, cfg, target, limit);
  return estimate_h_divergence(fs, ft);
}

RunResult run_single(const StudyConfig& cfg, const Benchmark& bench,
                     const RunSpec& spec, std::uint64_t seed) {
  TrainConfig tc = cfg.train;
  tc.ablation = spec.mask;
  tc.seed = seed;
  tc.validate();

  TrainOptions opts;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const std::string stem =
        cfg.out_dir + "/" + spec.name + "_seed" + std::to_string(seed);
    opts.log_path = stem + ".csv";
    opts.checkpoint_path = stem + ".ckpt";
  }

  RunResult r;
  r.spec = spec;
  r.seed = seed;

  FullModel start = initial_model(tc, cfg.detector);
  r.div_before = divergence_between(start.det, cfg.detector, bench.source_train,
                                    bench.target_train, cfg.divergence_samples);

  TrainResult tr = train(tc, cfg.detector, bench.source_train,
                         bench.target_train, opts);
  r.checkpoint = std::move(tr.checkpoint);

  r.eval = evaluate_model(r.checkpoint.model.det, cfg.detector, bench.target_eval);
  r.eval.checkpoint_digest = hex64(model_digest(r.checkpoint.model));
  r.mbo = model_mean_best_overlap(r.checkpoint.model.det, cfg.detector,
                                  bench.target_eval, cfg.mbo_top_p);
  r.div_after = divergence_between(r.checkpoint.model.det, cfg.detector,
                                   bench.source_train, bench.target_train,
                                   cfg.divergence_samples);
  return r;
}

StudyResult run_study(const StudyConfig& cfg, const std::vector<RunSpec>& runs) {
  return run_study_on(cfg, build_benchmark(cfg.data), runs);
}

StudyResult run_study_on(const StudyConfig& cfg, const Benchmark& bench,
                         const std::vector<RunSpec>& runs) {
  if (runs.empty()) throw std::invalid_argument("run_study needs at least one run spec");
  if (cfg.seeds.empty()) throw std::invalid_argument("run_study needs at least one seed");

  const int n_runs = static_cast<int>(runs.size());
  const int n_seeds = static_cast<int>(cfg.seeds.size());

  StudyResult study;
  study.runs.resize(static_cast<std::size_t>(n_runs * n_seeds));

  // Jobs are fully independent; results land in preassigned slots so the
  // thread count never changes any output byte.
  std::atomic<int> cursor{0};
  std::atomic<bool> failed{false};
  std::string first_error;
  std::mutex error_mu;
  auto worker = [&]() {
    for (;;) {
      const int job = cursor.fetch_add(1);
      if (job >= n_runs * n_seeds || failed.load()) return;
      try {
        const RunSpec& spec = runs[static_cast<std::size_t>(job / n_seeds)];
        const std::uint64_t seed = cfg.seeds[static_cast<std::size_t>(job % n_seeds)];
        study.runs[static_cast<std::size_t>(job)] = run_single(cfg, bench, spec, seed);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!failed.exchange(true)) first_error = e.what();
      }
    }
  };

  const int threads = std::min(job_threads(), n_runs * n_seeds);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failed.load()) throw std::runtime_error("study run failed: " + first_error);

  double before_sum = 0.0;
  for (int ri = 0; ri < n_runs; ++ri) {
    const RunResult* group = &study.runs[static_cast<std::size_t>(ri * n_seeds)];

    AblationRow row;
    row.name = runs[static_cast<std::size_t>(ri)].name;
    row.adapted = runs[static_cast<std::size_t>(ri)].adapted;
    row.mask = runs[static_cast<std::size_t>(ri)].mask;

    std::map<int, double> class_sums;
    double map_sum = 0.0, mbo_sum = 0.0, after_sum = 0.0;
    int det_sum = 0;
    for (int si = 0; si < n_seeds; ++si) {
      const RunResult& run = group[si];
      for (const auto& [cls, ap] : run.eval.per_class_ap) class_sums[cls] += ap;
      map_sum += run.eval.mean_ap;
      det_sum += run.eval.detection_count;
      mbo_sum += run.mbo;
      before_sum += run.div_before.d_h;
      after_sum += run.div_after.d_h;
    }
    for (const auto& [cls, sum] : class_sums)
      row.report.per_class_ap[cls] = static_cast<float>(sum / n_seeds);
    row.report.mean_ap = static_cast<float>(map_sum / n_seeds);
    row.report.detection_count = det_sum;
    row.report.dataset_digest = group[0].eval.dataset_digest;
    study.table.push_back(std::move(row));
    study.mbo.emplace_back(runs[static_cast<std::size_t>(ri)].name, mbo_sum / n_seeds);
    study.div_after_mean.emplace_back(runs[static_cast<std::size_t>(ri)].name,
                                      after_sum / n_seeds);
  }
  study.div_before_mean = before_sum / (n_runs * n_seeds);
  return study;
}

SweepResult run_scale_sweep(const StudyResult& study, const Dataset& target_eval,
                            const DetectorConfig& cfg,
                            const std::vector<float>& scales) {
  if (study.runs.empty()) throw std::invalid_argument("scale sweep needs study runs");
  if (scales.empty()) throw std::invalid_argument("scale sweep needs at least one scale");

  std::vector<Dataset> resized;
  resized.reserve(scales.size());
  for (float s : scales) resized.push_back(resized_dataset(target_eval, s));

  // Group the flat run list back into (spec, seeds) blocks.
  const int n_specs = static_cast<int>(study.table.size());
  const int n_seeds = static_cast<int>(study.runs.size()) / n_specs;

  SweepResult sweep;
  std::vector<ChartSeries> series;
  for (int ri = 0; ri < n_specs; ++ri) {
    ChartSeries line;
    line.label = study.table[static_cast<std::size_t>(ri)].name;
    for (std::size_t si = 0; si < scales.size(); ++si) {
      double sum = 0.0;
      for (int sd = 0; sd < n_seeds; ++sd) {
        const RunResult& run = study.runs[static_cast<std::size_t>(ri * n_seeds + sd)];
        sum += evaluate_model(run.checkpoint.model.det, cfg, resized[si]).mean_ap;
      }
      SweepPoint pt;
      pt.model = line.label;
      pt.scale = scales[si];
      pt.mean_ap = static_cast<float>(sum / n_seeds);
      sweep.points.push_back(pt);
      line.xs.push_back(scales[si]);
      line.ys.push_back(pt.mean_ap);
    }
    series.push_back(std::move(line));
  }
  sweep.csv = scale_sweep_csv(sweep.points);
  sweep.svg = line_chart("Accuracy under evaluation-scale shift", "scale factor",
                         "mean AP", series);
  return sweep;
}

ErrorAnalysis analyze_errors(const StudyResult& study, const Dataset& target_eval,
                             const DetectorConfig& cfg, int top_r) {
  if (study.runs.empty()) throw std::invalid_argument("error analysis needs study runs");
  const int n_specs = static_cast<int>(study.table.size());
  const int n_seeds = static_cast<int>(study.runs.size()) / n_specs;

  ErrorAnalysis out;
  std::vector<std::string> bars;
  std::vector<std::vector<float>> values;
  for (int ri = 0; ri < n_specs; ++ri) {
    ErrorTaxonomy sum;
    for (int sd = 0; sd < n_seeds; ++sd) {
      const RunResult& run = study.runs[static_cast<std::size_t>(ri * n_seeds + sd)];
      auto dets = detect_dataset(run.checkpoint.model.det, cfg, target_eval);
      ErrorTaxonomy t = categorize_detections(dets, target_eval, top_r);
      sum.correct += t.correct;
      sum.mislocalized += t.mislocalized;
      sum.background += t.background;
    }
    const std::string& name = study.table[static_cast<std::size_t>(ri)].name;
    out.rows.emplace_back(name, sum);
    bars.push_back(name);
    values.push_back({static_cast<float>(sum.correct),
                      static_cast<float>(sum.mislocalized),
                      static_cast<float>(sum.background)});
  }
  out.svg = stacked_bar_chart("Top detection error composition", "detections",
                              bars, {"correct", "mislocalized", "background"},
                              values);
  return out;
}

}  // namespace dadet

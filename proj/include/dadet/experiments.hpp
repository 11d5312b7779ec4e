#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dadet/evaluation.hpp"
#include "dadet/training.hpp"

namespace dadet {

// Dataset triple for a domain-shift benchmark: labeled source training set,
// unlabeled target training set, and an annotated target set held out for
// evaluation. The three use disjoint scene seeds.
struct BenchmarkSpec {
  int image_size = 64;
  int num_train = 500;  // per domain
  int num_eval = 200;
  ShiftSpec shift{ShiftKind::kStyle, 0.8f, 1.0f};
  std::uint64_t data_seed = 1;
  int num_classes = 3;

  DatasetSpec source_train_spec() const;
  DatasetSpec target_train_spec() const;
  DatasetSpec target_eval_spec() const;
};

struct Benchmark {
  Dataset source_train;
  Dataset target_train;
  Dataset target_eval;
};

Benchmark build_benchmark(const BenchmarkSpec& spec);

struct RunSpec {
  std::string name;
  bool adapted = false;
  AblationMask mask{false, false, false};
};

// The five-row adaptation study: baseline, img, ins, img+ins, img+ins+cst.
const std::vector<RunSpec>& standard_runs();

// Global-average-pooled backbone descriptors, one vector per sample
// (first `limit` samples; 0 takes all).
std::vector<std::vector<float>> pooled_backbone_features(
    const DetectorParams& params, const DetectorConfig& cfg, const Dataset& ds,
    int limit = 0);

HDivergenceEstimate divergence_between(const DetectorParams& params,
                                       const DetectorConfig& cfg,
                                       const Dataset& source,
                                       const Dataset& target, int limit = 0);

struct RunResult {
  RunSpec spec;
  std::uint64_t seed = 0;
  Checkpoint checkpoint;
  EvalReport eval;  // on the target evaluation set
  double mbo = 0.0;
  HDivergenceEstimate div_before;
  HDivergenceEstimate div_after;
};

struct StudyConfig {
  BenchmarkSpec data;
  TrainConfig train;  // template; seed and ablation are set per run
  DetectorConfig detector;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int mbo_top_p = 64;
  int divergence_samples = 50;  // per domain
  std::string out_dir;          // per-run logs/checkpoints when non-empty
};

RunResult run_single(const StudyConfig& cfg, const Benchmark& bench,
                     const RunSpec& spec, std::uint64_t seed);

struct StudyResult {
  std::vector<RunResult> runs;  // run-spec major, seed minor
  std::vector<AblationRow> table;  // seed-averaged per run spec
  std::vector<std::pair<std::string, double>> mbo;  // seed-averaged
  double div_before_mean = 0.0;
  std::vector<std::pair<std::string, double>> div_after_mean;
};

// Trains |runs| x |seeds| models (independent jobs, fanned out across
// DA_DETECT_THREADS) and aggregates the study tables.
StudyResult run_study(const StudyConfig& cfg,
                      const std::vector<RunSpec>& runs = standard_runs());

// Same study over datasets the caller already holds; cfg.data is ignored.
StudyResult run_study_on(const StudyConfig& cfg, const Benchmark& bench,
                         const std::vector<RunSpec>& runs = standard_runs());

struct SweepResult {
  std::vector<SweepPoint> points;  // seed-averaged, run-spec major
  std::string csv;
  std::string svg;
};

// Re-evaluates every trained model on the evaluation set resized to each
// scale factor.
SweepResult run_scale_sweep(const StudyResult& study,
                            const Dataset& target_eval,
                            const DetectorConfig& cfg,
                            const std::vector<float>& scales);

struct ErrorAnalysis {
  // Per run spec, detection buckets summed over seeds.
  std::vector<std::pair<std::string, ErrorTaxonomy>> rows;
  std::string svg;
};

ErrorAnalysis analyze_errors(const StudyResult& study,
                             const Dataset& target_eval,
                             const DetectorConfig& cfg, int top_r = 500);

}  // namespace dadet

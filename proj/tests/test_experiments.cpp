#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "dadet/experiments.hpp"

using namespace dadet;

namespace {

BenchmarkSpec tiny_benchmark() {
  BenchmarkSpec b;
  b.image_size = 32;
  b.num_train = 12;
  b.num_eval = 4;
  b.shift = ShiftSpec{ShiftKind::kStyle, 0.6f, 1.0f};
  b.data_seed = 7;
  return b;
}

StudyConfig tiny_study() {
  StudyConfig cfg;
  cfg.data = tiny_benchmark();
  cfg.train.total_iters = 4;
  cfg.train.lr_drop_iter = 3;
  cfg.train.adapt_rois = 4;
  cfg.seeds = {1, 2};
  cfg.mbo_top_p = 8;
  cfg.divergence_samples = 10;
  return cfg;
}

std::vector<RunSpec> two_runs() {
  return {standard_runs().front(), standard_runs().back()};
}

}  // namespace

TEST_CASE("benchmark specs pin domains and use disjoint scene seeds") {
  BenchmarkSpec b = tiny_benchmark();
  DatasetSpec src = b.source_train_spec();
  DatasetSpec tgt = b.target_train_spec();
  DatasetSpec ev = b.target_eval_spec();

  CHECK(src.domain == 0);
  CHECK(tgt.domain == 1);
  CHECK(ev.domain == 1);
  CHECK(src.shift.kind == ShiftKind::kNone);
  CHECK(tgt.shift.kind == ShiftKind::kStyle);
  CHECK(tgt.shift.intensity == 0.6f);
  CHECK(ev.shift.intensity == 0.6f);
  CHECK(src.num_images == 12);
  CHECK(ev.num_images == 4);
  CHECK(src.seed != tgt.seed);
  CHECK(src.seed != ev.seed);
  CHECK(tgt.seed != ev.seed);

  Benchmark bench = build_benchmark(b);
  CHECK(bench.source_train.samples.size() == 12);
  CHECK(bench.target_train.samples.size() == 12);
  CHECK(bench.target_eval.samples.size() == 4);
  CHECK(bench.source_train.samples[0].domain == 0);
  CHECK(bench.target_train.samples[0].domain == 1);
  CHECK(bench.target_eval.samples[0].has_annotations());
  CHECK(bench.source_train.digest != bench.target_train.digest);
  CHECK(bench.target_train.digest != bench.target_eval.digest);

  Benchmark again = build_benchmark(b);
  CHECK(again.source_train.digest == bench.source_train.digest);
  CHECK(again.target_eval.digest == bench.target_eval.digest);
}

TEST_CASE("standard runs cover the ablation ladder") {
  const auto& runs = standard_runs();
  REQUIRE(runs.size() == 5);
  CHECK(runs[0].name == "baseline");
  CHECK_FALSE(runs[0].adapted);
  CHECK_FALSE(runs[0].mask.img);
  CHECK_FALSE(runs[0].mask.ins);
  CHECK_FALSE(runs[0].mask.cst);
  CHECK(runs[1].name == "img");
  CHECK(runs[1].mask.img);
  CHECK_FALSE(runs[1].mask.ins);
  CHECK(runs[2].name == "ins");
  CHECK(runs[2].mask.ins);
  CHECK_FALSE(runs[2].mask.img);
  CHECK(runs[3].name == "img+ins");
  CHECK(runs[3].mask.img);
  CHECK(runs[3].mask.ins);
  CHECK_FALSE(runs[3].mask.cst);
  CHECK(runs[4].name == "img+ins+cst");
  CHECK(runs[4].mask.img);
  CHECK(runs[4].mask.ins);
  CHECK(runs[4].mask.cst);
  for (const auto& r : runs) {
    if (r.name != "baseline") CHECK(r.adapted);
  }
}

TEST_CASE("pooled backbone features are per-channel means") {
  BenchmarkSpec b = tiny_benchmark();
  Benchmark bench = build_benchmark(b);
  TrainConfig tc;
  DetectorConfig dc;
  FullModel model = initial_model(tc, dc);

  auto feats = pooled_backbone_features(model.det, dc, bench.source_train, 3);
  REQUIRE(feats.size() == 3);
  for (const auto& f : feats) CHECK(f.size() == 64);

  auto again = pooled_backbone_features(model.det, dc, bench.source_train, 3);
  CHECK(feats == again);

  auto all = pooled_backbone_features(model.det, dc, bench.target_eval);
  CHECK(all.size() == bench.target_eval.samples.size());

  // Spot-check one channel against a direct mean over the feature map.
  Tape tape(false);
  Tensor fm = backbone_features(tape, model.det, bench.source_train.samples[0].image);
  const int hw = fm.shape()[2] * fm.shape()[3];
  double sum = 0.0;
  for (int k = 0; k < hw; ++k) sum += fm.data()[k];
  CHECK(feats[0][0] == doctest::Approx(sum / hw).epsilon(1e-6));
}

TEST_CASE("divergence between domains is a valid estimate") {
  BenchmarkSpec b = tiny_benchmark();
  Benchmark bench = build_benchmark(b);
  TrainConfig tc;
  DetectorConfig dc;
  FullModel model = initial_model(tc, dc);

  HDivergenceEstimate est = divergence_between(model.det, dc, bench.source_train,
                                               bench.target_train, 10);
  CHECK(est.d_h >= 0.0f);
  CHECK(est.d_h <= 2.0f);
  CHECK(est.err_source >= 0.0f);
  CHECK(est.err_source <= 1.0f);
  CHECK(est.err_target >= 0.0f);
  CHECK(est.err_target <= 1.0f);

  HDivergenceEstimate again = divergence_between(
      model.det, dc, bench.source_train, bench.target_train, 10);
  CHECK(est.d_h == again.d_h);
  CHECK(est.err_source == again.err_source);
}

TEST_CASE("study trains every (run, seed) pair and aggregates by seed") {
  StudyConfig cfg = tiny_study();
  const std::string out_dir = "/tmp/dadet_study_test";
  std::filesystem::remove_all(out_dir);
  cfg.out_dir = out_dir;

  StudyResult study = run_study(cfg, two_runs());

  REQUIRE(study.runs.size() == 4);  // 2 specs x 2 seeds, spec-major
  CHECK(study.runs[0].spec.name == "baseline");
  CHECK(study.runs[0].seed == 1);
  CHECK(study.runs[1].spec.name == "baseline");
  CHECK(study.runs[1].seed == 2);
  CHECK(study.runs[2].spec.name == "img+ins+cst");
  CHECK(study.runs[3].seed == 2);

  for (const RunResult& r : study.runs) {
    CHECK(r.checkpoint.iteration == cfg.train.total_iters);
    CHECK(r.checkpoint.config.ablation.img == r.spec.mask.img);
    CHECK(r.checkpoint.config.ablation.cst == r.spec.mask.cst);
    CHECK(r.checkpoint.config.seed == r.seed);
    CHECK(r.eval.mean_ap >= 0.0f);
    CHECK(r.eval.mean_ap <= 1.0f);
    CHECK(r.eval.checkpoint_digest.size() == 16);
    CHECK(r.mbo >= 0.0);
    CHECK(r.mbo <= 1.0);
    CHECK(r.div_before.d_h >= 0.0f);
    CHECK(r.div_after.d_h <= 2.0f);
  }

  // Same seed means the same init, so div_before matches across run specs.
  CHECK(study.runs[0].div_before.d_h == study.runs[2].div_before.d_h);
  CHECK(study.runs[1].div_before.d_h == study.runs[3].div_before.d_h);

  REQUIRE(study.table.size() == 2);
  CHECK(study.table[0].name == "baseline");
  CHECK_FALSE(study.table[0].adapted);
  CHECK(study.table[1].name == "img+ins+cst");
  CHECK(study.table[1].adapted);
  CHECK(study.table[0].report.mean_ap ==
        doctest::Approx((study.runs[0].eval.mean_ap + study.runs[1].eval.mean_ap) / 2));
  CHECK(study.table[1].report.mean_ap ==
        doctest::Approx((study.runs[2].eval.mean_ap + study.runs[3].eval.mean_ap) / 2));
  CHECK_FALSE(study.table[0].report.dataset_digest.empty());

  REQUIRE(study.mbo.size() == 2);
  CHECK(study.mbo[0].first == "baseline");
  CHECK(study.mbo[1].second ==
        doctest::Approx((study.runs[2].mbo + study.runs[3].mbo) / 2));
  REQUIRE(study.div_after_mean.size() == 2);
  CHECK(study.div_before_mean >= 0.0);
  CHECK(study.div_before_mean <= 2.0);

  // The ablation table renders from the aggregate rows directly.
  std::string csv = ablation_table_csv(study.table);
  CHECK(csv.find("baseline,,,,") != std::string::npos);
  CHECK(csv.find("img+ins+cst,x,x,x,") != std::string::npos);

  for (const char* name : {"baseline", "img+ins+cst"}) {
    for (int seed : {1, 2}) {
      std::string stem = out_dir + std::string("/") + name + "_seed" + std::to_string(seed);
      CHECK(std::filesystem::exists(stem + ".csv"));
      CHECK(std::filesystem::exists(stem + ".ckpt"));
    }
  }
  Checkpoint loaded = load_checkpoint(out_dir + std::string("/baseline_seed2.ckpt"));
  CHECK(loaded.iteration == cfg.train.total_iters);
  CHECK(loaded.config.seed == 2);
  std::filesystem::remove_all(out_dir);
}

TEST_CASE("study results do not depend on the thread fanout") {
  StudyConfig cfg = tiny_study();
  cfg.seeds = {1};

  StudyResult serial = run_study(cfg, two_runs());
  setenv("DA_DETECT_THREADS", "2", 1);
  StudyResult threaded = run_study(cfg, two_runs());
  unsetenv("DA_DETECT_THREADS");

  REQUIRE(serial.runs.size() == threaded.runs.size());
  for (std::size_t i = 0; i < serial.runs.size(); ++i) {
    CHECK(serial.runs[i].eval.mean_ap == threaded.runs[i].eval.mean_ap);
    CHECK(serial.runs[i].eval.checkpoint_digest ==
          threaded.runs[i].eval.checkpoint_digest);
    CHECK(serial.runs[i].mbo == threaded.runs[i].mbo);
    CHECK(serial.runs[i].div_after.d_h == threaded.runs[i].div_after.d_h);
  }
  CHECK(serial.div_before_mean == threaded.div_before_mean);
}

TEST_CASE("scale sweep evaluates every model at every factor") {
  StudyConfig cfg = tiny_study();
  cfg.seeds = {1};
  Benchmark bench = build_benchmark(cfg.data);
  StudyResult study = run_study(cfg, two_runs());

  std::vector<float> scales = {0.5f, 1.0f};
  SweepResult sweep = run_scale_sweep(study, bench.target_eval, cfg.detector, scales);

  REQUIRE(sweep.points.size() == 4);  // 2 specs x 2 scales, spec-major
  CHECK(sweep.points[0].model == "baseline");
  CHECK(sweep.points[0].scale == 0.5f);
  CHECK(sweep.points[1].model == "baseline");
  CHECK(sweep.points[1].scale == 1.0f);
  CHECK(sweep.points[2].model == "img+ins+cst");
  for (const SweepPoint& p : sweep.points) {
    CHECK(p.mean_ap >= 0.0f);
    CHECK(p.mean_ap <= 1.0f);
  }

  CHECK(sweep.csv.rfind("model,scale,map\n", 0) == 0);
  CHECK(std::count(sweep.csv.begin(), sweep.csv.end(), '\n') == 5);
  CHECK(sweep.svg.find("<svg") != std::string::npos);
  CHECK(std::count(sweep.svg.begin(), sweep.svg.end(), '\n') >= 2);
  size_t polylines = 0;
  for (size_t pos = sweep.svg.find("<polyline"); pos != std::string::npos;
       pos = sweep.svg.find("<polyline", pos + 1)) {
    ++polylines;
  }
  CHECK(polylines == 2);
  CHECK(sweep.svg.find("img+ins+cst") != std::string::npos);

  CHECK_THROWS_AS(run_scale_sweep(study, bench.target_eval, cfg.detector, {}),
                  std::invalid_argument);
  CHECK_THROWS_AS(run_scale_sweep(StudyResult{}, bench.target_eval, cfg.detector, scales),
                  std::invalid_argument);
}

TEST_CASE("error analysis buckets detections per run spec") {
  StudyConfig cfg = tiny_study();
  cfg.seeds = {1};
  Benchmark bench = build_benchmark(cfg.data);
  StudyResult study = run_study(cfg, two_runs());

  ErrorAnalysis ea = analyze_errors(study, bench.target_eval, cfg.detector, 10);
  REQUIRE(ea.rows.size() == 2);
  CHECK(ea.rows[0].first == "baseline");
  CHECK(ea.rows[1].first == "img+ins+cst");
  for (const auto& [name, tax] : ea.rows) {
    CHECK(tax.correct >= 0);
    CHECK(tax.mislocalized >= 0);
    CHECK(tax.background >= 0);
    CHECK(tax.total() <= 10);  // one seed, top_r 10
    CHECK(tax.total() == tax.correct + tax.mislocalized + tax.background);
  }
  CHECK(ea.svg.find("<svg") != std::string::npos);
  CHECK(ea.svg.find("mislocalized") != std::string::npos);
  CHECK(ea.svg.find("baseline") != std::string::npos);

  CHECK_THROWS_AS(analyze_errors(StudyResult{}, bench.target_eval, cfg.detector, 10),
                  std::invalid_argument);
}

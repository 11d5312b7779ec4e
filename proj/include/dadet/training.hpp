#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dadet/adaptation.hpp"
#include "dadet/detector.hpp"
#include "dadet/synthdata.hpp"

namespace dadet {

struct TrainConfig {
  float lambda = 0.1f;
  float lr_initial = 0.001f;
  float lr_reduced = 0.0001f;
  int lr_drop_iter = 1500;
  int total_iters = 2000;
  float momentum = 0.9f;
  float weight_decay = 0.0005f;
  // Global gradient-norm ceiling; training from random init occasionally
  // spikes, and clipping keeps those steps bounded. 0 disables.
  float grad_clip = 10.0f;
  // All-false trains the source-only baseline; the consistency term requires
  // both heads, so cst implies img and ins.
  AblationMask ablation;
  std::uint64_t seed = 1;
  int eval_every = 0;  // snapshot cadence in iterations, 0 disables
  // Instance-level domain rows per image fed to the adaptation losses; the
  // top-scored proposals are taken.
  int adapt_rois = 16;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

// Detector plus both domain heads, updated as one parameter set.
struct FullModel {
  DetectorParams det;
  ImageHeadParams img;
  InstanceHeadParams ins;

  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_requires_grad(bool value);
  void zero_grad();
  static FullModel init(const DetectorConfig& cfg, SplitMix64& rng);
};

// The parameter state a fresh train() run starts from: derived from
// cfg.seed on a stream that never collides with per-iteration streams.
FullModel initial_model(const TrainConfig& cfg, const DetectorConfig& dcfg);

float lr_at(int iter, const TrainConfig& cfg);

// g' = g + wd*w; v <- momentum*v + g'; w <- w - lr*v. velocity holds one
// buffer per parameter tensor, in named() order.
void sgd_step(const std::vector<std::pair<std::string, Tensor>>& params,
              std::vector<std::vector<float>>& velocity, float lr,
              float momentum, float weight_decay);

double global_grad_norm(
    const std::vector<std::pair<std::string, Tensor>>& params);

// Scales all gradients by max_norm/norm when the global norm exceeds
// max_norm. Returns the pre-clip norm.
double clip_gradients(const std::vector<std::pair<std::string, Tensor>>& params,
                      double max_norm);

struct Batch {
  Sample source;
  Sample target;  // annotations stripped; label access throws
  int source_index = 0;
  int target_index = 0;
};

// Deterministic shuffled cycling: each dataset is re-permuted per epoch from
// (seed, epoch), so every image appears exactly once per epoch and batch
// composition depends only on (seed, iter).
Batch compose_batch(const Dataset& source, const Dataset& target, int iter,
                    std::uint64_t seed);

struct Checkpoint {
  FullModel model;
  std::vector<std::vector<float>> velocity;  // named() order
  int iteration = 0;
  TrainConfig config;
  DetectorConfig det_cfg;
  std::string source_digest;
  std::string target_digest;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

struct LogRow {
  int iter = 0;
  float lr = 0.0f;
  LossBreakdown losses;
};

std::string log_csv_header();
std::string log_csv_row(const LogRow& row);

struct Snapshot {
  int iter = 0;
  float mean_ap = 0.0f;
};

struct TrainOptions {
  const Dataset* eval_ds = nullptr;  // used by eval_every snapshots
  std::string log_path;              // CSV streamed here when non-empty
  std::string checkpoint_path;       // final checkpoint written when non-empty
  const Checkpoint* resume = nullptr;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRow> log;
  std::vector<Snapshot> snapshots;
  std::vector<std::string> warnings;
};

// One iteration trains on one source and one target image. Target
// annotations are stripped in compose_batch, so the detection loss cannot
// read them. Aborts with a diagnostic on non-finite loss.
TrainResult train(const TrainConfig& cfg, const DetectorConfig& dcfg,
                  const Dataset& source, const Dataset& target,
                  const TrainOptions& opts = {});

}  // namespace dadet

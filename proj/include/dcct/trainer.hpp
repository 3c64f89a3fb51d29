#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dcct/data.hpp"
#include "dcct/eval.hpp"
#include "dcct/losses.hpp"
#include "dcct/model.hpp"
#include "dcct/model_config.hpp"
#include "json.hpp"

namespace dcct {

struct OptimizerSchedule {
  double base_lr = 1e-3;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  bool nesterov = true;
  double decay_factor = 10.0;
  int decay_every = 15;
  int max_epochs = 50;
  double grad_clip = 0.0;  // global-norm clip; 0 disables

  void validate() const;
  // base_lr / decay_factor^floor(epoch / decay_every), epochs counted from 0.
  double lr_at(int epoch) const;
};

struct TrainConfig {
  ModelConfig model;
  OptimizerSchedule schedule;
  LossOptions loss;
  int identities_per_batch = 8;   // P
  int tracklets_per_identity = 2; // K
  AugmentConfig augment;
  int eval_every = 5;  // epochs; 0 keeps only the final evaluation
  bool eval_backbone = true;  // also evaluate backbone_only at each eval point

  void validate() const;
  BatchSpec batch_spec() const { return {identities_per_batch, tracklets_per_identity, model.frames_T}; }

  // Sections [model], [train], [loss], [augment]; unknown keys are errors.
  static TrainConfig from_ini(const IniDocument& doc);
  static TrainConfig load(const std::filesystem::path& path);
  std::string to_ini() const;
};

// SGD with momentum and L2 weight decay folded into the gradient:
// g += wd*p; b = mu*b + g (b = g on the first step); p -= lr*(nesterov ? g + mu*b : b).
class Sgd {
 public:
  explicit Sgd(const ParameterStore& store);
  void step(ParameterStore& store, double lr, const OptimizerSchedule& schedule);

  // One buffer per parameter in store order; empty until the first step.
  std::vector<Tensor>& buffers() { return buffers_; }
  const std::vector<Tensor>& buffers() const { return buffers_; }

 private:
  std::vector<Tensor> buffers_;
};

// Append-only newline-delimited JSON records. Step records carry a strictly
// increasing step; eval records repeat the step they follow.
class MetricLog {
 public:
  MetricLog() = default;
  // Records are mirrored to `path` as they are appended.
  explicit MetricLog(std::filesystem::path path, bool append = false);

  void append(nlohmann::ordered_json record);
  const std::vector<nlohmann::ordered_json>& records() const { return records_; }
  std::vector<nlohmann::ordered_json> step_records() const;
  std::string to_ndjson() const;
  static MetricLog read(const std::filesystem::path& path);

 private:
  std::vector<nlohmann::ordered_json> records_;
  std::optional<std::filesystem::path> path_;
  long last_step_ = -1;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  TrainConfig config;
  int epoch = 0;  // completed epochs
  long step = 0;  // completed optimizer steps
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor>> parameters;
  std::vector<Tensor> momentum;  // aligned with `parameters`; empty before the first step

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

// Builds the model described by the checkpoint and copies its parameters in.
DcctModel model_from_checkpoint(const Checkpoint& ckpt);

class Trainer {
 public:
  Trainer(const TrainConfig& config, const DatasetIndex& data);
  static Trainer resume(const Checkpoint& ckpt, const DatasetIndex& data);

  // One pass of the PK sampler. Throws DivergenceError on a non-finite loss.
  void run_epoch(MetricLog& log);
  RetrievalMetrics evaluate(FeatureMode mode) const;
  // Evaluates full (when available) and backbone_only, appending eval records.
  std::vector<std::pair<FeatureMode, RetrievalMetrics>> log_evaluation(MetricLog& log) const;

  Checkpoint checkpoint() const;
  int epoch() const { return epoch_; }
  long step() const { return step_; }
  const DcctModel& model() const { return model_; }
  DcctModel& model() { return model_; }
  const TrainConfig& config() const { return config_; }

 private:
  TrainConfig config_;
  const DatasetIndex* data_;
  DcctModel model_;
  Sgd sgd_;
  std::mt19937_64 rng_;
  int epoch_ = 0;
  long step_ = 0;
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // last.ckpt, metrics.ndjson, config.ini
  int stop_after_epoch = -1;  // stop early (for resume tests); -1 runs to max_epochs
  bool evaluate = true;
  bool verbose = false;
};

struct TrainResult {
  Checkpoint checkpoint;
  MetricLog log;
  std::optional<RetrievalMetrics> final_full;
  std::optional<RetrievalMetrics> final_backbone;
};

TrainResult train(const TrainConfig& config, const DatasetIndex& data, const TrainOptions& options = {});
// Continues a run from `ckpt`; the log receives only the new records.
TrainResult resume_training(const Checkpoint& ckpt, const DatasetIndex& data, const TrainOptions& options = {});

// extract_features -> distance_matrix -> cmc_map on the query/gallery splits.
RetrievalMetrics evaluate(const Checkpoint& ckpt, const DatasetIndex& data, FeatureMode mode);

}  // namespace dcct

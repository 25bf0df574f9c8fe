#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "booknet/geometry.hpp"
#include "booknet/model.hpp"
#include "booknet/synthgen.hpp"

namespace booknet::train {

struct FlowTargets {
  geometry::WarpFlow left, right, full;
};

/// Sum over enabled flows of the mean absolute coordinate error.
grad::Var multitask_l1(const model::FlowOutputs& pred, const FlowTargets& gt, const model::Supervision& flags);

struct AdamWOptions {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-5;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoupled weight decay Adam over named parameters. Moments are created
/// lazily to match the parameters on the first step.
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  /// Uses Tensor::grad of every parameter (missing grad = zero). Throws
  /// NonFiniteGradient, leaving parameters and state untouched, if any
  /// gradient is not finite.
  void step(std::vector<NamedTensor>& params, double lr);

  std::size_t steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamWOptions options_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::vector<NamedTensor>& params, double max_norm);

struct OneCycleShape {
  double warmup_fraction = 0.3;
  double initial_divisor = 25.0;
  double final_divisor = 1e4;
};

/// Linear warmup from max_lr/initial_divisor to max_lr over the first
/// warmup_fraction of steps, then cosine anneal to max_lr/final_divisor.
double onecycle_lr(std::size_t step, std::size_t total_steps, double max_lr, const OneCycleShape& shape = {});

struct TrainConfig {
  std::size_t epochs = 65;
  std::size_t batch_size = 4;
  /// Stop after this many optimizer steps (0 = run all epochs).
  std::size_t max_steps = 0;
  double max_lr = 1e-4;
  double weight_decay = 1e-5;
  double grad_clip = 1.0;
  OneCycleShape schedule;
  std::uint64_t seed = 0;
  model::Supervision supervise;
  /// HSV jitter applied to training inputs (identity by default).
  synthgen::HsvRanges augment;
  /// Write a checkpoint after every epoch.
  bool checkpoint_each_epoch = true;
  /// Debug: verify that unsupervised page heads receive exactly zero gradient.
  bool assert_isolation = false;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// One training example, already at the model's input resolution.
struct Example {
  Tensor image;  // [3 x H x W] in [0, 1]
  FlowTargets targets;
};

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0, loss_left = 0.0, loss_right = 0.0, loss_full = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
  double wall_seconds = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::optional<double> val_flow_l1;
};

class TrainLog {
 public:
  /// Writes JSON lines to `path` when given. Wall times go to a sibling
  /// `.timing.jsonl` file so the main log is reproducible.
  explicit TrainLog(std::optional<std::filesystem::path> path = std::nullopt);
  void header(const nlohmann::json& info);
  void add(const StepRecord& r);
  void add(const EpochRecord& r);
  const std::vector<StepRecord>& steps() const { return steps_; }
  const std::vector<EpochRecord>& epochs() const { return epochs_; }

 private:
  void write(const nlohmann::json& j);
  static void append(const std::filesystem::path& p, const nlohmann::json& j);
  std::filesystem::path timing_path() const;
  std::optional<std::filesystem::path> path_;
  std::vector<StepRecord> steps_;
  std::vector<EpochRecord> epochs_;
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  model::Params params;
  /// Path of the newest checkpoint (empty if none was written).
  std::filesystem::path last_checkpoint;
};

/// Mean over examples of the full-flow L1 (the validation metric).
double validation_flow_l1(const model::BookNetConfig& mc, model::Params& params, const std::vector<Example>& val);

/// Inference helper: forward pass without recording gradients.
model::FlowOutputs predict(const model::BookNetConfig& mc, model::Params& params, grad::Tape& tape,
                           const Tensor& image);

/// Runs the optimization loop. `out_dir` receives checkpoints and the JSON-lines
/// log when non-empty. The model config's supervision flags are taken from
/// the train config.
TrainResult train_loop(model::BookNetConfig mc, const TrainConfig& tc, const std::vector<Example>& train_set,
                       const std::vector<Example>& val_set, const std::filesystem::path& out_dir, TrainLog& log);

/// Model-resolution examples from loaded samples (images and flows resized
/// when the dataset was generated at another size).
std::vector<Example> make_examples(const std::vector<synthgen::LoadedSample>& samples, const model::BookNetConfig& mc);

void save_params(const std::filesystem::path& path, const model::Params& params);
model::Params load_params(const std::filesystem::path& path, const model::BookNetConfig& config);

}  // namespace booknet::train

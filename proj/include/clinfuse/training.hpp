#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clinfuse/dataset.hpp"
#include "clinfuse/init.hpp"
#include "clinfuse/model.hpp"
#include "clinfuse/rng.hpp"

namespace clinfuse {

enum class OptimizerKind { Adam, Sgd };

struct TrainConfig {
  double learning_rate = 1e-4;
  int epochs = 100;
  int batch_size = 16;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = only at the end

  void validate() const;  // throws ConfigError
};

struct OptimizerState {
  std::vector<Eigen::VectorXd> m;
  std::vector<Eigen::VectorXd> v;
  std::int64_t step = 0;
};

/// One Adam update with bias correction over `params`, reading each
/// tensor's grad (missing grads count as zero). All gradients are checked
/// for finiteness before anything is modified.
void adam_step(std::span<Tensor> params, OptimizerState& state, const TrainConfig& cfg);
/// Plain gradient descent; increments the step counter.
void sgd_step(std::span<Tensor> params, OptimizerState& state, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  double wall_seconds = 0.0;
  std::int64_t step = 0;  // optimizer steps completed after this epoch
};

/// Everything needed to continue a run bit-exactly.
struct TrainingState {
  ModelConfig model;
  ModelParams params;
  OptimizerState optimizer;
  Rng shuffle_rng;
  int epochs_done = 0;
  std::optional<NormalizationStats> stats;
  std::vector<EpochRecord> log;
};

/// Fresh state: parameters from derive_seed(seed, "init"), batch order from
/// derive_seed(seed, "shuffle").
TrainingState make_training_state(const ModelConfig& model, const TrainConfig& cfg);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  /// Called with the state after every `checkpoint_every` epochs and after
  /// the final epoch.
  std::function<void(const TrainingState&)> on_checkpoint;
};

/// Runs epochs epochs_done+1 .. cfg.epochs over the (preprocessed) dataset.
/// Throws NumericError on a non-finite loss; the last checkpoint written
/// before the failure is left untouched.
void train(TrainingState& state, const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Stacks slices into a batch: images [B,C,S,S], clinical [B,D], labels.
struct Batch {
  Tensor images;
  Tensor clinical;
  std::vector<int> labels;
};
struct SliceRef {
  std::size_t patient;
  std::size_t slice;
};
std::vector<SliceRef> slice_index(const Dataset& data);
Batch make_batch(const Dataset& data, std::span<const SliceRef> refs);

/// Checkpoint directory: `manifest.txt` (config echo, names, shapes, byte
/// offsets, rng state, log) plus `tensors.bin` (concatenated MMT1 blobs).
/// Writes into a temporary sibling and renames, so an existing checkpoint
/// is replaced only by a complete one.
void checkpoint_save(const TrainingState& state, const std::filesystem::path& dir);
/// Restores a state; throws FormatError on truncation or manifest damage
/// and ConfigError when the stored model differs from `expected` (if given).
TrainingState checkpoint_load(const std::filesystem::path& dir, const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace clinfuse

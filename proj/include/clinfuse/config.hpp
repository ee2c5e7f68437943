#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clinfuse/dataset.hpp"
#include "clinfuse/evaluation.hpp"
#include "clinfuse/model.hpp"
#include "clinfuse/training.hpp"

namespace clinfuse {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Everything a CLI invocation can be configured with.
///
/// Keys (one `key = value` per line, `#` starts a comment):
///   seed, data, folds, jobs, aggregation (slice|patient)
///   model.image_size, model.in_channels, model.stem_channels,
///   model.stages (comma list of channels:blocks:attention, e.g. 16:1:0,32:1:1),
///   model.clinical_hidden, model.clinical_embedding, model.num_classes,
///   model.variant (image-only|image-clinical|full), model.gate (sigmoid|raw),
///   model.bn_momentum, model.bn_epsilon
///   train.learning_rate, train.epochs, train.batch_size,
///   train.optimizer (adam|sgd), train.beta1, train.beta2, train.adam_epsilon,
///   train.checkpoint_every
///   synth.patients, synth.slices_per_patient, synth.clinical_dim,
///   synth.image_size, synth.image_signal, synth.clinical_signal,
///   synth.correlated_signal, synth.noise, synth.healthy_coupling,
///   synth.clinical_only_attributes
/// The model's clinical width always follows the data.
struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> data;  // directory with clinical.csv + images/
  int folds = 5;
  int jobs = 1;
  Aggregation aggregation = Aggregation::Slice;
  ModelConfig model;
  TrainConfig train;
  SynthSpec synth;

  /// Checks every section; throws ConfigError.
  void validate() const;
};

/// Parses `key = value` lines. Throws ConfigError with the line number on
/// syntax errors and duplicate keys.
KeyValues parse_key_values(std::istream& in, const std::string& source = "config");
KeyValues read_config_file(const std::filesystem::path& path);

/// Applies one key; throws ConfigError for unknown keys or bad values.
void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value);
RunConfig config_from_key_values(const KeyValues& kv, RunConfig base = {});

/// Round-trippable `model.*` entries (plus model.clinical_dim).
KeyValues model_config_entries(const ModelConfig& model);
ModelConfig model_config_from_entries(const KeyValues& kv);

std::string format_double(double v);  // shortest text that reads back exactly

}  // namespace clinfuse

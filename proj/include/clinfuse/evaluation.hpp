#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "clinfuse/dataset.hpp"
#include "clinfuse/model.hpp"
#include "clinfuse/training.hpp"

namespace clinfuse {

struct ConfusionCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t tn = 0;
  std::int64_t fn = 0;

  std::int64_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Each metric is empty exactly when its denominator is zero.
struct MetricsReport {
  std::optional<double> acc;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> ppv;
  std::optional<double> npv;

  static constexpr std::array<std::string_view, 5> names{"acc", "sens", "spec", "ppv", "npv"};
  std::array<std::optional<double>, 5> values() const { return {acc, sensitivity, specificity, ppv, npv}; }
};

/// Throws std::invalid_argument on a length mismatch or a class index
/// outside {0,1}.
ConfusionCounts confusion(std::span<const int> predictions, std::span<const int> labels, int positive_class = 1);
MetricsReport metrics(const ConfusionCounts& c);

enum class Aggregation { Slice, PatientMajority };
std::string_view aggregation_name(Aggregation a);  // "slice" | "patient"
Aggregation parse_aggregation(std::string_view name);

/// Majority vote over one patient's slice predictions; ties go to
/// `positive_class`.
int majority_vote(std::span<const int> slice_predictions, int positive_class = 1);

struct EvaluationResult {
  ConfusionCounts counts;
  MetricsReport report;
  std::vector<int> predictions;  // per slice or per patient, in dataset order
  std::vector<int> labels;
};

/// Eval-mode forward over a preprocessed fold. Throws on an empty fold.
EvaluationResult evaluate_model(const ModelConfig& cfg, ModelParams& params, const Dataset& fold,
                                Aggregation aggregation = Aggregation::Slice);

struct MetricSummary {
  std::optional<double> mean;
  std::optional<double> stddev;  // sample standard deviation over folds where defined
};

struct FoldResult {
  int fold = 0;
  std::vector<std::string> held_out;
  NormalizationStats stats;  // computed from the training folds
  std::vector<EpochRecord> log;
  EvaluationResult evaluation;
};

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  std::array<MetricSummary, 5> summary;  // in MetricsReport::names order
};

struct CvOptions {
  Aggregation aggregation = Aggregation::Slice;
  int jobs = 1;  // folds trained concurrently
};

/// Per-fold training seed: derive_seed(train.seed, "fold-<i>").
std::uint64_t fold_seed(std::uint64_t seed, int fold);

/// Trains on k-1 folds of the raw dataset and evaluates on the held-out
/// one, with normalization stats from the training folds only. Results
/// do not depend on `jobs`.
CrossValidationResult cross_validate(const Dataset& raw, const FoldAssignment& folds, const ModelConfig& model,
                                     const TrainConfig& train, const CvOptions& options = {});

struct AblationRow {
  ModelVariant variant;
  CrossValidationResult cv;
};

inline constexpr std::array<ModelVariant, 3> kAblationVariants{ModelVariant::ImageOnly,
                                                               ModelVariant::ImagePlusClinical,
                                                               ModelVariant::FullModel};

/// cross_validate for each variant with the same folds and seeds.
std::vector<AblationRow> ablation_run(const Dataset& raw, const FoldAssignment& folds, const ModelConfig& model,
                                      const TrainConfig& train, const CvOptions& options = {});

/// "85.00" style percentage or "n/a".
std::string format_percent(const std::optional<double>& v);
/// Fixed six-decimal fraction or "n/a".
std::string format_fraction(const std::optional<double>& v);

/// Aligned table, one row per label, five metric columns as percentages.
std::string render_table(const std::vector<std::pair<std::string, std::array<std::optional<double>, 5>>>& rows);
std::string render_summary_table(const std::vector<AblationRow>& rows);

/// CSV with header `variant,fold,acc,sens,spec,ppv,npv`: one line per fold
/// and a `mean` line per variant.
std::string render_csv(const std::vector<AblationRow>& rows);

}  // namespace clinfuse

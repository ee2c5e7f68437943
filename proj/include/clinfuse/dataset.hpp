#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clinfuse/tensor.hpp"

namespace clinfuse {

struct PatientRecord {
  std::string patient_id;
  int label = 0;
  Eigen::VectorXd clinical;
  std::vector<Tensor> images;  // each [C,H,W]
};

/// Training-fold statistics used by preprocess().
struct NormalizationStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;  // population std; 0 marks a constant attribute
  double image_min = 0.0;
  double image_max = 1.0;
};

struct Dataset {
  std::vector<PatientRecord> patients;
  int clinical_dim = 0;
  int image_size = 0;
  std::vector<std::string> class_names{"negative", "positive"};
  std::optional<NormalizationStats> stats;  // set by preprocess()

  /// Throws std::invalid_argument on duplicate ids, ragged widths, labels
  /// outside {0,1} or patients without images.
  void validate() const;
  std::size_t slice_count() const;
  std::optional<std::size_t> find(const std::string& patient_id) const;
};

struct FoldAssignment {
  std::vector<std::vector<std::string>> folds;

  int k() const { return static_cast<int>(folds.size()); }
  /// Fold index per patient id; throws if an id is in no fold.
  int fold_of(const std::string& patient_id) const;
  std::vector<std::string> training_ids(int held_out) const;
  friend bool operator==(const FoldAssignment&, const FoldAssignment&) = default;
};

/// Synthetic cohort generator with three planted signal channels.
///
/// Per patient: label y ~ Bernoulli(1/2) and latent z ~ N(0,1).
///  - image-only: a windowed checkerboard texture of amplitude y * image_signal;
///  - correlated: a broad central blob of amplitude correlated_signal * u, where
///    u = z for positives and u = c*z + sqrt(1-c^2)*w (c = healthy_coupling,
///    w ~ N(0,1)) for negatives; clinical attribute 0 carries z;
///  - clinical-only: attributes 1..clinical_only_attributes carry
///    +-clinical_signal * (2y-1).
/// Every pixel and attribute receives N(0, noise^2) noise; each slice draws
/// fresh pixel noise.
struct SynthSpec {
  int patients = 1000;
  int slices_per_patient = 1;
  int clinical_dim = 16;
  int image_size = 16;
  double image_signal = 0.1;
  double clinical_signal = 0.15;
  double correlated_signal = 1.0;
  double noise = 0.5;
  double healthy_coupling = 0.3;
  int clinical_only_attributes = 4;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

Dataset synth_generate(const SynthSpec& spec);

/// Planted pattern masks at a given size, exposed for threshold oracles.
Eigen::MatrixXd image_only_pattern(int size);
Eigen::MatrixXd correlated_pattern(int size);

/// Strict join of `patient_id,label,attr...` rows with `<id>_<slice>.mmt`
/// images. Throws FormatError naming the offending row, column or patient.
Dataset load_dataset(const std::filesystem::path& clinical_csv, const std::filesystem::path& image_dir);

/// Writes `clinical.csv` and `images/<id>_<slice>.mmt` under `dir`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

NormalizationStats compute_stats(const Dataset& dataset, std::span<const std::size_t> patient_indices);
NormalizationStats compute_stats(const Dataset& dataset);

/// Standardizes clinical attributes (constant attributes map to 0),
/// resizes images to `image_size` (bilinear) and scales intensities to
/// [0,1] using the stats' range, clamped.
Dataset preprocess(const Dataset& dataset, const NormalizationStats& stats, int image_size);

/// Bilinear resize of a [C,H,W] image with corner-aligned sampling.
Tensor resize_bilinear(const Tensor& image, int out_h, int out_w);

/// Stratified patient-level folds; needs at least k patients per class.
FoldAssignment kfold_split(const Dataset& dataset, int k, std::uint64_t seed);

/// Patients whose ids are listed, in dataset order.
Dataset subset(const Dataset& dataset, std::span<const std::string> patient_ids);

}  // namespace clinfuse

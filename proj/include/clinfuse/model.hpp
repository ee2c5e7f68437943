#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clinfuse/ops.hpp"
#include "clinfuse/rng.hpp"
#include "clinfuse/tensor.hpp"

namespace clinfuse {

enum class ModelVariant { ImageOnly, ImagePlusClinical, FullModel };

std::string_view variant_name(ModelVariant v);  // "image-only" | "image-clinical" | "full"
ModelVariant parse_variant(std::string_view name);

/// How the CAM channel statistic gates the reduced features.
enum class AttentionGate { Sigmoid, Raw };

struct StageSpec {
  int channels = 0;
  int blocks = 1;
  bool clinical_attention = false;  // RBCA blocks when the variant is FullModel
};

struct ModelConfig {
  int image_size = 32;
  int in_channels = 1;
  int stem_channels = 16;
  std::vector<StageSpec> stages{{32, 1, false}, {64, 1, true}, {128, 1, true}, {256, 1, true}};
  int clinical_dim = 237;
  int clinical_hidden = 128;
  int clinical_embedding = 256;
  int num_classes = 2;
  ModelVariant variant = ModelVariant::FullModel;
  AttentionGate gate = AttentionGate::Sigmoid;
  NormOptions norm{};

  bool uses_clinical() const { return variant != ModelVariant::ImageOnly; }
  bool stage_uses_attention(std::size_t stage) const {
    return variant == ModelVariant::FullModel && stages.at(stage).clinical_attention;
  }
  /// Width F of the pooled image feature vector.
  int image_feature_width() const { return stages.empty() ? stem_channels : stages.back().channels; }
  /// Spatial stride of a stage's first block (1 for the first stage, 2 after).
  static int stage_stride(std::size_t stage) { return stage == 0 ? 1 : 2; }

  /// Throws ConfigError on any violated invariant.
  void validate() const;
};

struct Linear {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

struct Conv {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // undefined when followed by a norm layer
  int stride = 1;
  int pad = 0;
};

struct Norm {
  Tensor gamma;
  Tensor beta;
  RunningStats<double> stats;
};

struct ClinicalEncoderParams {
  Linear fc1;  // D_clin -> hidden
  Linear fc2;  // hidden -> D_emb
};

/// Channel-alignment projection of the clinical embedding (T').
struct CamParams {
  Linear projection;  // D_emb -> reduced channels
};

/// Residual block: 1x1 halving conv, optional clinical attention, then a
/// 1x1 + 3x3 tail over the (attended ++ reduced) features, plus shortcut.
/// With `cam` present this is an RBCA block; without it the tail consumes
/// the reduced features alone.
struct ResidualBlockParams {
  Conv reduce;
  Norm reduce_norm;
  std::optional<CamParams> cam;
  Conv mix;
  Norm mix_norm;
  Conv spatial;
  Norm spatial_norm;
  std::optional<Conv> shortcut;
  std::optional<Norm> shortcut_norm;
};
using RbcaParams = ResidualBlockParams;

struct ModelParams {
  std::optional<ClinicalEncoderParams> clinical;
  Conv stem;
  Norm stem_norm;
  std::vector<std::vector<ResidualBlockParams>> stages;
  Linear head;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct NamedStats {
  std::string name;
  RunningStats<double>* stats;
};

/// Trainable tensors in a fixed, deterministic order.
std::vector<NamedTensor> named_parameters(const ModelParams& params);
/// Batch-norm running statistics in the same deterministic order.
std::vector<NamedStats> named_buffers(ModelParams& params);
Index parameter_count(const ModelParams& params);

/// Factor applied to the decision head's He draw so the untrained model
/// predicts close to uniform.
inline constexpr double kHeadInitScale = 0.1;

/// He-initialized weights (head scaled by kHeadInitScale), zero biases,
/// unit gamma, zero beta.
ModelParams init_model(const ModelConfig& cfg, Rng& rng);
/// Independent deep copy (no shared storage or graph).
ModelParams clone_params(const ModelParams& params);

Tensor clinical_encoder_forward(const ClinicalEncoderParams& params, const Tensor& clinical);

/// Per-channel statistic s = GAP(feats * project(emb)), shape [B,C].
Tensor cam_forward(const CamParams& params, const Tensor& image_feats, const Tensor& clinical_emb);

/// One residual block; `clinical_emb` is required iff the block has a CAM.
Tensor residual_block_forward(ResidualBlockParams& params, const Tensor& x, const Tensor& clinical_emb,
                              const ModelConfig& cfg, NormMode mode);
inline Tensor rbca_forward(RbcaParams& params, const Tensor& x, const Tensor& clinical_emb, const ModelConfig& cfg,
                           NormMode mode) {
  return residual_block_forward(params, x, clinical_emb, cfg, mode);
}

/// Stem, stages, global average pool: [B,Cin,S,S] -> [B,F].
Tensor backbone_forward(const ModelConfig& cfg, ModelParams& params, const Tensor& image, const Tensor& clinical_emb,
                        NormMode mode);

/// FC + softmax over image features (concatenated with the clinical
/// embedding when given): -> [B,K] probabilities.
Tensor decision_head_forward(const Linear& head, const Tensor& image_feats, const Tensor& clinical_emb);

/// Full two-path forward. `clinical` is ignored for ImageOnly and may be
/// undefined there.
Tensor model_forward(const ModelConfig& cfg, ModelParams& params, const Tensor& image, const Tensor& clinical,
                     NormMode mode);

/// Class index with the highest probability per row (lowest index on ties).
std::vector<int> predict_classes(const Tensor& probs);

}  // namespace clinfuse

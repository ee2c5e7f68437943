#include "clinfuse/model_check.hpp"

#include "clinfuse/dataset.hpp"
#include "clinfuse/training.hpp"

namespace clinfuse {

ModelConfig tiny_model_config(ModelVariant variant) {
  ModelConfig cfg;
  cfg.image_size = 16;
  cfg.stem_channels = 4;
  cfg.stages = {{4, 1, false}, {8, 1, true}};
  cfg.clinical_dim = 6;
  cfg.clinical_hidden = 8;
  cfg.clinical_embedding = 8;
  cfg.variant = variant;
  return cfg;
}

Dataset overfit_fixture(std::uint64_t seed) {
  const ModelConfig cfg = tiny_model_config();
  SynthSpec spec;
  spec.patients = 8;
  spec.clinical_dim = cfg.clinical_dim;
  spec.clinical_only_attributes = 4;
  spec.image_size = cfg.image_size;
  spec.seed = derive_seed(seed, "synth");
  Dataset raw = synth_generate(spec);
  for (std::size_t i = 0; i < raw.patients.size(); ++i) raw.patients[i].label = static_cast<int>(i % 2);
  return preprocess(raw, compute_stats(raw), cfg.image_size);
}

TrainConfig overfit_train_config(std::uint64_t seed) {
  TrainConfig t;
  t.learning_rate = 1e-3;
  t.epochs = 200;
  t.batch_size = 8;
  t.seed = seed;
  return t;
}

std::vector<GroupCheck> model_gradient_check(const ModelConfig& cfg, const ModelCheckOptions& options) {
  cfg.validate();
  SynthSpec spec;
  spec.patients = options.batch;
  spec.clinical_dim = cfg.clinical_dim;
  spec.clinical_only_attributes = std::min(4, cfg.clinical_dim - 1);
  spec.image_size = cfg.image_size;
  spec.seed = derive_seed(options.seed, "gradcheck-data");
  Dataset raw = synth_generate(spec);
  // Both classes present so the loss is not saturated toward one label.
  for (std::size_t i = 0; i < raw.patients.size(); ++i) raw.patients[i].label = static_cast<int>(i % 2);
  const Dataset data = preprocess(raw, compute_stats(raw), cfg.image_size);
  const auto refs = slice_index(data);
  const Batch batch = make_batch(data, refs);

  Rng rng(derive_seed(options.seed, "gradcheck-init"));
  ModelParams params = init_model(cfg, rng);
  // Check at a plain He draw: the shrunken head only scales the backbone
  // gradients down toward the rounding floor of the relative error.
  params.head.weight.mutable_value() /= kHeadInitScale;
  auto loss_fn = [&](const Tensor&) {
    return cross_entropy_loss(model_forward(cfg, params, batch.images, batch.clinical, NormMode::Train),
                              std::span<const int>(batch.labels));
  };
  std::vector<GroupCheck> out;
  for (auto& np : named_parameters(params)) {
    out.push_back({np.name, finite_difference_check<double>(loss_fn, np.tensor, options.step, std::nullopt, options.scheme)});
    np.tensor.zero_grad();
  }
  return out;
}

}  // namespace clinfuse

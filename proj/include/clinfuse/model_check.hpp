#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "clinfuse/dataset.hpp"
#include "clinfuse/gradcheck.hpp"
#include "clinfuse/model.hpp"
#include "clinfuse/training.hpp"

namespace clinfuse {

/// Small model used by the gradient suite and the overfit fixture.
ModelConfig tiny_model_config(ModelVariant variant = ModelVariant::FullModel);

/// Eight preprocessed synthetic patients (labels alternate 0/1) sized for
/// tiny_model_config().
Dataset overfit_fixture(std::uint64_t seed = 0);
/// Full-batch Adam settings for overfitting the fixture within 200 epochs.
TrainConfig overfit_train_config(std::uint64_t seed = 0);

struct GroupCheck {
  std::string name;
  GradCheckResult result;
};

struct ModelCheckOptions {
  int batch = 4;
  double step = 1e-5;
  DifferenceScheme scheme = DifferenceScheme::Central;
  std::uint64_t seed = 0;
};

/// Finite-difference check of cross-entropy over a train-mode forward, one
/// entry per named parameter, on a seeded synthetic batch.
std::vector<GroupCheck> model_gradient_check(const ModelConfig& cfg, const ModelCheckOptions& options = {});

}  // namespace clinfuse

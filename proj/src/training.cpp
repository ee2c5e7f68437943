#include "clinfuse/training.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "clinfuse/error.hpp"

namespace clinfuse {

Tensor he_init(Shape shape, Index fan_in, Rng& rng) {
  if (fan_in < 1) throw std::invalid_argument("he_init: fan_in must be >= 1");
  Eigen::VectorXd v(shape_numel(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < v.size(); ++i) v(i) = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(v), true);
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (!(learning_rate > 0)) fail("learning_rate must be > 0");
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) fail("adam betas must lie in [0,1)");
  if (!(adam_epsilon > 0)) fail("adam_epsilon must be > 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

namespace {

void check_grads(std::span<Tensor> params) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].has_grad() && !params[i].grad().allFinite()) {
      throw NumericError("optimizer: non-finite gradient in parameter " + std::to_string(i) +
                         " (shape " + shape_string(params[i].shape()) + "); step aborted");
    }
  }
}

}  // namespace

void adam_step(std::span<Tensor> params, OptimizerState& state, const TrainConfig& cfg) {
  check_grads(params);
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.push_back(Eigen::VectorXd::Zero(p.numel()));
      state.v.push_back(Eigen::VectorXd::Zero(p.numel()));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != params[i].numel()) throw std::invalid_argument("adam_step: moment shape mismatch");
    if (!params[i].has_grad() && m.isZero(0.0) && v.isZero(0.0)) continue;
    const Eigen::VectorXd g = params[i].grad();
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    params[i].mutable_value().array() -=
        cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.adam_epsilon);
  }
}

void sgd_step(std::span<Tensor> params, OptimizerState& state, const TrainConfig& cfg) {
  check_grads(params);
  ++state.step;
  for (auto& p : params) {
    if (p.has_grad()) p.mutable_value() -= cfg.learning_rate * p.grad();
  }
}

TrainingState make_training_state(const ModelConfig& model, const TrainConfig& cfg) {
  model.validate();
  cfg.validate();
  Rng init_rng(derive_seed(cfg.seed, "init"));
  TrainingState st{model, init_model(model, init_rng), {}, Rng(derive_seed(cfg.seed, "shuffle")), 0, std::nullopt, {}};
  return st;
}

std::vector<SliceRef> slice_index(const Dataset& data) {
  std::vector<SliceRef> refs;
  for (std::size_t p = 0; p < data.patients.size(); ++p) {
    for (std::size_t s = 0; s < data.patients[p].images.size(); ++s) refs.push_back({p, s});
  }
  return refs;
}

Batch make_batch(const Dataset& data, std::span<const SliceRef> refs) {
  if (refs.empty()) throw std::invalid_argument("make_batch: empty batch");
  const Tensor& first = data.patients.at(refs[0].patient).images.at(refs[0].slice);
  const Index per = first.numel();
  const auto b = static_cast<Index>(refs.size());
  Eigen::VectorXd img(b * per);
  Eigen::VectorXd clin(b * data.clinical_dim);
  Batch out;
  for (Index i = 0; i < b; ++i) {
    const auto& rec = data.patients.at(refs[static_cast<std::size_t>(i)].patient);
    const Tensor& im = rec.images.at(refs[static_cast<std::size_t>(i)].slice);
    if (im.shape() != first.shape()) throw ShapeError("make_batch: images in a batch must share a shape");
    img.segment(i * per, per) = im.value();
    clin.segment(i * data.clinical_dim, data.clinical_dim) = rec.clinical;
    out.labels.push_back(rec.label);
  }
  out.images = Tensor({b, first.dim(0), first.dim(1), first.dim(2)}, std::move(img));
  out.clinical = Tensor({b, data.clinical_dim}, std::move(clin));
  return out;
}

void train(TrainingState& state, const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (data.patients.empty()) throw std::invalid_argument("train: dataset is empty");
  data.validate();
  for (const auto& p : data.patients) {
    if (p.label < 0 || p.label >= state.model.num_classes) throw std::invalid_argument("train: label out of range");
  }
  const auto refs = slice_index(data);
  std::vector<std::size_t> order(refs.size());
  std::vector<Tensor> params;
  for (auto& np : named_parameters(state.params)) params.push_back(np.tensor);

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = state.epochs_done + 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    state.shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size();) {
      std::size_t end = std::min(order.size(), start + bs);
      // A trailing single sample joins the previous batch (batch statistics need >1 value).
      if (order.size() - end == 1) end = order.size();
      std::vector<SliceRef> chunk;
      for (std::size_t i = start; i < end; ++i) chunk.push_back(refs[order[i]]);
      const Batch batch = make_batch(data, chunk);
      for (auto& p : params) p.zero_grad();
      const Tensor probs = model_forward(state.model, state.params, batch.images, batch.clinical, NormMode::Train);
      const Tensor loss = cross_entropy_loss(probs, std::span<const int>(batch.labels));
      if (!std::isfinite(loss.item())) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      }
      backward(loss);
      if (cfg.optimizer == OptimizerKind::Adam) {
        adam_step(params, state.optimizer, cfg);
      } else {
        sgd_step(params, state.optimizer, cfg);
      }
      const auto preds = predict_classes(probs);
      for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == batch.labels[i] ? 1 : 0;
      loss_sum += loss.item() * static_cast<double>(chunk.size());
      start = end;
    }
    const auto n = static_cast<double>(order.size());
    EpochRecord rec{epoch, loss_sum / n, static_cast<double>(correct) / n,
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                    state.optimizer.step};
    state.epochs_done = epoch;
    state.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
    const bool cadence = cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0;
    if (hooks.on_checkpoint && (cadence || epoch == cfg.epochs)) hooks.on_checkpoint(state);
  }
  for (auto& p : params) p.zero_grad();
}

}  // namespace clinfuse

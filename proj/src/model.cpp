#include "clinfuse/model.hpp"

#include <cmath>
#include <stdexcept>

#include "clinfuse/error.hpp"
#include "clinfuse/init.hpp"

namespace clinfuse {

std::string_view variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::ImageOnly:
      return "image-only";
    case ModelVariant::ImagePlusClinical:
      return "image-clinical";
    case ModelVariant::FullModel:
      return "full";
  }
  return "unknown";
}

ModelVariant parse_variant(std::string_view name) {
  if (name == "image-only") return ModelVariant::ImageOnly;
  if (name == "image-clinical") return ModelVariant::ImagePlusClinical;
  if (name == "full") return ModelVariant::FullModel;
  throw ConfigError("unknown variant '" + std::string(name) + "' (expected image-only, image-clinical or full)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (image_size < 1) fail("image_size must be positive");
  if (in_channels < 1) fail("in_channels must be positive");
  if (stem_channels < 2 || stem_channels % 2 != 0) fail("stem_channels must be even and >= 2");
  if (stages.empty()) fail("at least one stage is required");
  if (stages.front().clinical_attention) fail("the first stage cannot use clinical attention");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (clinical_dim < 1 || clinical_hidden < 1 || clinical_embedding < 1) fail("clinical widths must be positive");
  if (norm.epsilon <= 0.0 || norm.momentum < 0.0 || norm.momentum > 1.0) fail("invalid norm options");
  int size = image_size;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    if (st.channels < 2 || st.channels % 2 != 0) fail("stage channels must be even and >= 2");
    if (st.blocks < 1) fail("each stage needs at least one block");
    size = (size - 1) / stage_stride(s) + 1;
  }
  if (uses_clinical()) {
    const int f = image_feature_width();
    if (clinical_embedding * 2 < f || clinical_embedding > 2 * f) {
      fail("clinical_embedding must lie within a factor 2 of the image feature width " + std::to_string(f));
    }
  }
}

namespace {

Linear make_linear(int in, int out, Rng& rng) {
  return {he_init({out, in}, in, rng), bias_init({out})};
}

Conv make_conv(int in, int out, int k, int stride, Rng& rng) {
  return {he_init({out, in, k, k}, static_cast<Index>(in) * k * k, rng), Tensor{}, stride, k / 2};
}

Norm make_norm(int channels) {
  return {Tensor::constant({channels}, 1.0, true), Tensor::zeros({channels}, true),
          RunningStats<double>::init(channels)};
}

ResidualBlockParams make_block(int in, int out, int stride, bool attention, const ModelConfig& cfg, Rng& rng) {
  ResidualBlockParams p;
  const int reduced = in / 2;
  p.reduce = make_conv(in, reduced, 1, 1, rng);
  p.reduce_norm = make_norm(reduced);
  if (attention) p.cam = CamParams{make_linear(cfg.clinical_embedding, reduced, rng)};
  p.mix = make_conv(attention ? in : reduced, out, 1, 1, rng);
  p.mix_norm = make_norm(out);
  p.spatial = make_conv(out, out, 3, stride, rng);
  p.spatial_norm = make_norm(out);
  if (stride != 1 || in != out) {
    p.shortcut = make_conv(in, out, 1, stride, rng);
    p.shortcut_norm = make_norm(out);
  }
  return p;
}

Tensor conv_forward(const Conv& c, const Tensor& x) { return conv2d(x, c.weight, c.bias, c.stride, c.pad); }

Tensor norm_forward(Norm& n, const Tensor& x, const ModelConfig& cfg, NormMode mode) {
  return batch_norm(x, n.gamma, n.beta, n.stats, mode, cfg.norm);
}

void push_linear(std::vector<NamedTensor>& out, const std::string& prefix, const Linear& l) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

void push_conv(std::vector<NamedTensor>& out, const std::string& prefix, const Conv& c) {
  out.push_back({prefix + ".weight", c.weight});
  if (c.bias.defined()) out.push_back({prefix + ".bias", c.bias});
}

void push_norm(std::vector<NamedTensor>& out, const std::string& prefix, const Norm& n) {
  out.push_back({prefix + ".gamma", n.gamma});
  out.push_back({prefix + ".beta", n.beta});
}

std::string block_prefix(std::size_t s, std::size_t b) {
  return "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
}

Tensor copy_tensor(const Tensor& t) {
  if (!t.defined()) return {};
  return Tensor(t.shape(), t.value(), t.requires_grad());
}

Linear copy_linear(const Linear& l) { return {copy_tensor(l.weight), copy_tensor(l.bias)}; }
Conv copy_conv(const Conv& c) { return {copy_tensor(c.weight), copy_tensor(c.bias), c.stride, c.pad}; }
Norm copy_norm(const Norm& n) { return {copy_tensor(n.gamma), copy_tensor(n.beta), n.stats}; }

}  // namespace

ModelParams init_model(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ModelParams p;
  if (cfg.uses_clinical()) {
    p.clinical = ClinicalEncoderParams{make_linear(cfg.clinical_dim, cfg.clinical_hidden, rng),
                                       make_linear(cfg.clinical_hidden, cfg.clinical_embedding, rng)};
  }
  p.stem = make_conv(cfg.in_channels, cfg.stem_channels, 3, 1, rng);
  p.stem_norm = make_norm(cfg.stem_channels);
  int in = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const auto& st = cfg.stages[s];
    std::vector<ResidualBlockParams> blocks;
    for (int b = 0; b < st.blocks; ++b) {
      const int stride = b == 0 ? ModelConfig::stage_stride(s) : 1;
      blocks.push_back(make_block(in, st.channels, stride, cfg.stage_uses_attention(s), cfg, rng));
      in = st.channels;
    }
    p.stages.push_back(std::move(blocks));
  }
  const int head_in = cfg.image_feature_width() + (cfg.uses_clinical() ? cfg.clinical_embedding : 0);
  p.head = make_linear(head_in, cfg.num_classes, rng);
  p.head.weight.mutable_value() *= kHeadInitScale;
  return p;
}

ModelParams clone_params(const ModelParams& params) {
  ModelParams p;
  if (params.clinical) p.clinical = ClinicalEncoderParams{copy_linear(params.clinical->fc1), copy_linear(params.clinical->fc2)};
  p.stem = copy_conv(params.stem);
  p.stem_norm = copy_norm(params.stem_norm);
  for (const auto& stage : params.stages) {
    std::vector<ResidualBlockParams> blocks;
    for (const auto& b : stage) {
      ResidualBlockParams c;
      c.reduce = copy_conv(b.reduce);
      c.reduce_norm = copy_norm(b.reduce_norm);
      if (b.cam) c.cam = CamParams{copy_linear(b.cam->projection)};
      c.mix = copy_conv(b.mix);
      c.mix_norm = copy_norm(b.mix_norm);
      c.spatial = copy_conv(b.spatial);
      c.spatial_norm = copy_norm(b.spatial_norm);
      if (b.shortcut) c.shortcut = copy_conv(*b.shortcut);
      if (b.shortcut_norm) c.shortcut_norm = copy_norm(*b.shortcut_norm);
      blocks.push_back(std::move(c));
    }
    p.stages.push_back(std::move(blocks));
  }
  p.head = copy_linear(params.head);
  return p;
}

std::vector<NamedTensor> named_parameters(const ModelParams& params) {
  std::vector<NamedTensor> out;
  if (params.clinical) {
    push_linear(out, "clinical.fc1", params.clinical->fc1);
    push_linear(out, "clinical.fc2", params.clinical->fc2);
  }
  push_conv(out, "stem.conv", params.stem);
  push_norm(out, "stem.norm", params.stem_norm);
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    for (std::size_t b = 0; b < params.stages[s].size(); ++b) {
      const auto& blk = params.stages[s][b];
      const auto pre = block_prefix(s, b);
      push_conv(out, pre + ".reduce", blk.reduce);
      push_norm(out, pre + ".reduce_norm", blk.reduce_norm);
      if (blk.cam) push_linear(out, pre + ".cam.projection", blk.cam->projection);
      push_conv(out, pre + ".mix", blk.mix);
      push_norm(out, pre + ".mix_norm", blk.mix_norm);
      push_conv(out, pre + ".spatial", blk.spatial);
      push_norm(out, pre + ".spatial_norm", blk.spatial_norm);
      if (blk.shortcut) push_conv(out, pre + ".shortcut", *blk.shortcut);
      if (blk.shortcut_norm) push_norm(out, pre + ".shortcut_norm", *blk.shortcut_norm);
    }
  }
  push_linear(out, "head", params.head);
  return out;
}

std::vector<NamedStats> named_buffers(ModelParams& params) {
  std::vector<NamedStats> out;
  out.push_back({"stem.norm", &params.stem_norm.stats});
  for (std::size_t s = 0; s < params.stages.size(); ++s) {
    for (std::size_t b = 0; b < params.stages[s].size(); ++b) {
      auto& blk = params.stages[s][b];
      const auto pre = block_prefix(s, b);
      out.push_back({pre + ".reduce_norm", &blk.reduce_norm.stats});
      out.push_back({pre + ".mix_norm", &blk.mix_norm.stats});
      out.push_back({pre + ".spatial_norm", &blk.spatial_norm.stats});
      if (blk.shortcut_norm) out.push_back({pre + ".shortcut_norm", &blk.shortcut_norm->stats});
    }
  }
  return out;
}

Index parameter_count(const ModelParams& params) {
  Index n = 0;
  for (const auto& p : named_parameters(params)) n += p.tensor.numel();
  return n;
}

Tensor clinical_encoder_forward(const ClinicalEncoderParams& params, const Tensor& clinical) {
  return fully_connected(relu(fully_connected(clinical, params.fc1.weight, params.fc1.bias)), params.fc2.weight,
                         params.fc2.bias);
}

Tensor cam_forward(const CamParams& params, const Tensor& image_feats, const Tensor& clinical_emb) {
  const Tensor aligned = fully_connected(clinical_emb, params.projection.weight, params.projection.bias);
  return global_avg_pool(channel_scale(image_feats, aligned));
}

Tensor residual_block_forward(ResidualBlockParams& p, const Tensor& x, const Tensor& clinical_emb,
                              const ModelConfig& cfg, NormMode mode) {
  if (x.rank() != 4 || x.dim(1) % 2 != 0) {
    throw ShapeError("residual block: input channel count must be even, got shape " + shape_string(x.shape()));
  }
  const Tensor reduced = relu(norm_forward(p.reduce_norm, conv_forward(p.reduce, x), cfg, mode));
  Tensor tail_in = reduced;
  if (p.cam) {
    if (!clinical_emb.defined()) throw std::invalid_argument("RBCA block requires a clinical embedding");
    Tensor s = cam_forward(*p.cam, reduced, clinical_emb);
    if (cfg.gate == AttentionGate::Sigmoid) s = sigmoid(s);
    tail_in = concat_channels(channel_scale(reduced, s), reduced);
  }
  Tensor y = relu(norm_forward(p.mix_norm, conv_forward(p.mix, tail_in), cfg, mode));
  y = norm_forward(p.spatial_norm, conv_forward(p.spatial, y), cfg, mode);
  Tensor shortcut = x;
  if (p.shortcut) {
    shortcut = conv_forward(*p.shortcut, x);
    if (p.shortcut_norm) shortcut = norm_forward(*p.shortcut_norm, shortcut, cfg, mode);
  }
  if (shortcut.shape() != y.shape()) {
    throw ShapeError("residual block: shortcut " + shape_string(shortcut.shape()) + " incompatible with " +
                     shape_string(y.shape()) + " without projection");
  }
  return relu(add(y, shortcut));
}

Tensor backbone_forward(const ModelConfig& cfg, ModelParams& params, const Tensor& image, const Tensor& clinical_emb,
                        NormMode mode) {
  if (cfg.variant == ModelVariant::FullModel && !clinical_emb.defined()) {
    throw std::invalid_argument("backbone: FullModel requires a clinical embedding");
  }
  if (image.rank() != 4 || image.dim(1) != cfg.in_channels || image.dim(2) != cfg.image_size ||
      image.dim(3) != cfg.image_size) {
    throw ShapeError("backbone: image shape " + shape_string(image.shape()) + " does not match config");
  }
  Tensor h = relu(norm_forward(params.stem_norm, conv_forward(params.stem, image), cfg, mode));
  for (auto& stage : params.stages) {
    for (auto& block : stage) h = residual_block_forward(block, h, clinical_emb, cfg, mode);
  }
  return global_avg_pool(h);
}

Tensor decision_head_forward(const Linear& head, const Tensor& image_feats, const Tensor& clinical_emb) {
  return softmax(fully_connected(concat_channels(image_feats, clinical_emb), head.weight, head.bias));
}

Tensor model_forward(const ModelConfig& cfg, ModelParams& params, const Tensor& image, const Tensor& clinical,
                     NormMode mode) {
  Tensor emb;
  if (cfg.uses_clinical()) {
    if (!params.clinical) throw std::invalid_argument("model: clinical encoder missing for this variant");
    if (!clinical.defined()) throw std::invalid_argument("model: clinical input required for this variant");
    if (clinical.rank() != 2 || clinical.dim(1) != cfg.clinical_dim || clinical.dim(0) != image.dim(0)) {
      throw ShapeError("model: clinical shape " + shape_string(clinical.shape()) + " does not match config");
    }
    emb = clinical_encoder_forward(*params.clinical, clinical);
  }
  const Tensor feats = backbone_forward(cfg, params, image, cfg.variant == ModelVariant::FullModel ? emb : Tensor{}, mode);
  return decision_head_forward(params.head, feats, emb);
}

std::vector<int> predict_classes(const Tensor& probs) {
  const Index batch = probs.dim(0), k = probs.dim(1);
  std::vector<int> out(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    Index best = 0;
    for (Index j = 1; j < k; ++j) {
      if (probs.value()(b * k + j) > probs.value()(b * k + best)) best = j;
    }
    out[static_cast<std::size_t>(b)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace clinfuse

#include "vtff/model.hpp"

#include <stdexcept>

namespace vtff {

void ModelConfig::validate() const {
  backbone.validate();
  encoder.validate();
  if (image_size < 1 || image_size % backbone.downsampling_rate() != 0) {
    throw std::invalid_argument("image_size must be a positive multiple of the downsampling rate");
  }
  if (fusion == FusionKind::kAsf) {
    if (reduction < 1 || backbone.feature_channels() % reduction != 0) {
      throw std::invalid_argument("C_f must be divisible by the reduction ratio");
    }
  }
}

VtffModel VtffModel::build(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  VtffModel m;
  m.cfg_ = cfg;
  m.params_ = std::make_shared<ParamMap>();
  Rng rng(seed);
  int64_t c_f = cfg.backbone.feature_channels();
  int64_t grid = cfg.grid_size();

  // Distinct derived seeds keep the two backbones' parameter sets disjoint.
  m.backbone_rgb_ = Backbone::build(cfg.backbone, seed * 2654435761u + 1);
  m.backbone_rgb_->register_params(*m.params_, "backbone.rgb");
  if (cfg.fusion == FusionKind::kConcat) {
    m.concat_proj_ = Conv2dLayer::init(1, 4, 3, 1, 0, rng);
    m.concat_proj_->register_params(*m.params_, "backbone.concat_proj");
  } else if (cfg.use_lbp) {
    m.backbone_lbp_ = Backbone::build(cfg.backbone, seed * 2654435761u + 2);
    m.backbone_lbp_->register_params(*m.params_, "backbone.lbp");
    if (cfg.fusion == FusionKind::kAsf) {
      m.asf_ = AsfWeights::init(c_f, cfg.reduction, rng);
      m.asf_->rule = cfg.eq6;
      m.asf_->register_params(*m.params_, "asf");
    }
  }
  if (cfg.use_encoder) {
    m.tokenizer_ = Tokenizer::init(c_f, cfg.encoder.embed_dim, grid * grid, rng);
    m.tokenizer_->register_params(*m.params_, "tokenizer");
    m.encoder_ = Encoder::init(cfg.encoder, rng);
    m.encoder_->register_params(*m.params_, "encoder", "head");
  } else {
    m.pooled_head_ = LinearLayer::init(c_f, cfg.encoder.n_classes, rng);
    m.pooled_head_->register_params(*m.params_, "head");
  }
  return m;
}

BatchInput VtffModel::make_batch(std::span<const Image> images) const {
  if (images.empty()) throw std::invalid_argument("make_batch: empty batch");
  int64_t s = cfg_.image_size;
  int64_t b = static_cast<int64_t>(images.size());
  const bool concat = cfg_.fusion == FusionKind::kConcat;
  const bool wants_lbp = concat || cfg_.use_lbp;
  int64_t rgb_channels = concat ? 4 : 3;

  BatchInput batch;
  std::vector<float> rgb_data(static_cast<size_t>(b * s * s * rgb_channels));
  std::vector<float> lbp_data;
  if (!concat && wants_lbp) lbp_data.assign(static_cast<size_t>(b * s * s * 3), 0.0f);

  for (int64_t i = 0; i < b; ++i) {
    Image rgb = resize_bilinear(images[static_cast<size_t>(i)], static_cast<int>(s),
                                static_cast<int>(s));
    Image codes;
    if (wants_lbp) codes = lbp8(to_grayscale(rgb));
    for (int64_t p = 0; p < s * s; ++p) {
      float* dst = rgb_data.data() + (i * s * s + p) * rgb_channels;
      for (int c = 0; c < 3; ++c) dst[c] = static_cast<float>(rgb.pixels[p * 3 + c]);
      if (concat) dst[3] = static_cast<float>(codes.pixels[static_cast<size_t>(p)]);
    }
    if (!concat && wants_lbp) {
      for (int64_t p = 0; p < s * s; ++p) {
        float v = static_cast<float>(codes.pixels[static_cast<size_t>(p)]);
        float* dst = lbp_data.data() + (i * s * s + p) * 3;
        dst[0] = v;
        dst[1] = v;
        dst[2] = v;
      }
    }
  }
  batch.rgb = Tensor::from({b, s, s, rgb_channels}, std::move(rgb_data));
  if (!lbp_data.empty()) batch.lbp = Tensor::from({b, s, s, 3}, std::move(lbp_data));
  return batch;
}

ForwardResult VtffModel::forward(const BatchInput& batch, Mode mode, bool want_maps) {
  ForwardResult result;
  Tensor fused;
  if (cfg_.fusion == FusionKind::kConcat) {
    fused = backbone_rgb_->extract_features(concat_proj_->forward(batch.rgb), mode);
  } else if (cfg_.use_lbp) {
    if (!batch.lbp.defined()) throw std::invalid_argument("forward: LBP stream input missing");
    Tensor f_rgb = backbone_rgb_->extract_features(batch.rgb, mode);
    Tensor f_lbp = backbone_lbp_->extract_features(batch.lbp, mode);
    fused = cfg_.fusion == FusionKind::kAsf ? asf_forward(f_lbp, f_rgb, *asf_, mode)
                                            : add(f_lbp, f_rgb);
  } else {
    fused = backbone_rgb_->extract_features(batch.rgb, mode);
  }
  result.fused = fused;

  int64_t b = fused.dim(0);
  if (cfg_.use_encoder) {
    for (int64_t i = 0; i < b; ++i) {
      Tensor z0 = tokenizer_->forward(select(fused, i));
      auto [z_final, maps] = encoder_->encode(z0);
      result.logits.push_back(encoder_->class_logits(z_final));
      if (want_maps) result.maps.push_back(std::move(maps));
    }
  } else {
    Tensor pooled = adaptive_avg_pool(fused);  // [B,1,1,C_f]
    for (int64_t i = 0; i < b; ++i) {
      Tensor features = reshape(select(pooled, i), {cfg_.backbone.feature_channels()});
      result.logits.push_back(pooled_head_->forward(features));
    }
  }
  return result;
}

std::vector<float> VtffModel::predict_probabilities(const Image& img, AttentionMaps* maps_out) {
  BatchInput batch = make_batch(std::span<const Image>(&img, 1));
  ForwardResult result = forward(batch, Mode::kEval, maps_out != nullptr);
  Tensor probs = softmax(result.logits[0], 0);
  if (maps_out != nullptr) {
    if (result.maps.empty()) throw std::runtime_error("attention maps require the encoder");
    *maps_out = std::move(result.maps[0]);
  }
  auto data = probs.data();
  return std::vector<float>(data.begin(), data.end());
}

int VtffModel::predict(const Image& img) {
  auto probs = predict_probabilities(img);
  return argmax_class(probs);
}

int64_t VtffModel::encoder_trainable_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : *params_) {
    if (t.requires_grad() && name.rfind("encoder.", 0) == 0) n += t.size();
  }
  return n;
}

int argmax_class(std::span<const float> probabilities) {
  int best = 0;
  for (size_t i = 1; i < probabilities.size(); ++i) {
    if (probabilities[i] > probabilities[best]) best = static_cast<int>(i);
  }
  return best;
}

}  // namespace vtff

#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "vtff/asf.hpp"
#include "vtff/backbone.hpp"
#include "vtff/encoder.hpp"
#include "vtff/image.hpp"

namespace vtff {

enum class FusionKind { kAsf, kAdd, kConcat };

struct ModelConfig {
  BackboneConfig backbone;
  EncoderConfig encoder;
  int reduction = 8;
  int image_size = 224;
  bool use_lbp = true;
  bool use_encoder = true;
  FusionKind fusion = FusionKind::kAsf;
  FuseRule eq6 = FuseRule::kLiteral;

  int64_t grid_size() const { return image_size / backbone.downsampling_rate(); }
  void validate() const;
};

// Stacked raw-intensity inputs for one batch. `lbp` is undefined for variants
// that do not use the LBP stream; for concat fusion `rgb` carries 4 channels
// (RGB plus the LBP code plane).
struct BatchInput {
  Tensor rgb;
  Tensor lbp;
};

struct ForwardResult {
  Tensor fused;                     // [B,H_d,W_d,C_f]
  std::vector<Tensor> logits;       // per sample, [M]
  std::vector<AttentionMaps> maps;  // per sample; empty unless requested
};

class VtffModel {
 public:
  static VtffModel build(const ModelConfig& cfg, uint64_t seed);

  BatchInput make_batch(std::span<const Image> images) const;
  ForwardResult forward(const BatchInput& batch, Mode mode, bool want_maps = false);

  // Eval-mode class probabilities for one image.
  std::vector<float> predict_probabilities(const Image& img, AttentionMaps* maps_out = nullptr);
  int predict(const Image& img);  // argmax, lowest-index tie break

  const ModelConfig& config() const { return cfg_; }
  ParamMap& params() { return *params_; }
  const ParamMap& params() const { return *params_; }
  int64_t encoder_trainable_count() const;

 private:
  ModelConfig cfg_;
  std::optional<Backbone> backbone_rgb_;
  std::optional<Backbone> backbone_lbp_;
  std::optional<Conv2dLayer> concat_proj_;
  std::optional<AsfWeights> asf_;
  std::optional<Tokenizer> tokenizer_;
  std::optional<Encoder> encoder_;
  std::optional<LinearLayer> pooled_head_;
  std::shared_ptr<ParamMap> params_;
};

int argmax_class(std::span<const float> probabilities);

}  // namespace vtff

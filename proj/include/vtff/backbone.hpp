#pragma once

#include <string>
#include <vector>

#include "vtff/nn.hpp"

namespace vtff {

struct BackboneConfig {
  std::vector<int64_t> stage_channels;
  std::vector<int> stage_strides;
  int blocks_per_stage = 1;

  int64_t downsampling_rate() const;  // product of stage strides
  int64_t feature_channels() const { return stage_channels.back(); }
  void validate() const;
};

// relu(F(x) + shortcut(x)); F = conv3x3/BN/relu/conv3x3/BN, shortcut is a
// 1x1 projection when the stride or channel count changes.
struct ResidualBlock {
  Conv2dLayer conv1;
  BatchNormLayer bn1;
  Conv2dLayer conv2;
  BatchNormLayer bn2;
  bool has_projection = false;
  Conv2dLayer proj;
  BatchNormLayer proj_bn;

  static ResidualBlock init(int64_t cin, int64_t cout, int stride, Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  void register_params(ParamMap& params, const std::string& prefix) const;
};

class Backbone {
 public:
  static Backbone build(const BackboneConfig& cfg, uint64_t seed);

  // img: [H,W,3] or [B,H,W,3] with H, W divisible by the downsampling rate.
  Tensor extract_features(const Tensor& img, Mode mode);

  const BackboneConfig& config() const { return cfg_; }
  void register_params(ParamMap& params, const std::string& prefix) const;

 private:
  BackboneConfig cfg_;
  std::vector<ResidualBlock> blocks_;
};

}  // namespace vtff

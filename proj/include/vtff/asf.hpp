#pragma once

#include <string>

#include "vtff/nn.hpp"

namespace vtff {

enum class FuseRule {
  kLiteral,        // x_lbp * sigmoid(GL) + x_rgb * sigmoid(1 - GL)
  kComplementary,  // x_lbp * sigmoid(GL) + x_rgb * (1 - sigmoid(GL))
};

// Attentional selective fusion: initial 1x1 integration, a squeeze-excite
// style global channel branch and a channel-reducing local spatial branch,
// combined by broadcasting addition and used to weight the two streams.
struct AsfWeights {
  int64_t channels = 0;
  int reduction = 8;
  Conv2dLayer integrate_lbp;  // w_L
  Conv2dLayer integrate_rgb;  // w_C
  Conv2dLayer global_conv1;
  BatchNormLayer global_bn1;
  Conv2dLayer global_conv2;
  BatchNormLayer global_bn2;
  Conv2dLayer local_conv1;
  BatchNormLayer local_bn1;
  Conv2dLayer local_conv2;
  BatchNormLayer local_bn2;
  FuseRule rule = FuseRule::kLiteral;

  static AsfWeights init(int64_t channels, int reduction, Rng& rng);
  void register_params(ParamMap& params, const std::string& prefix) const;
};

Tensor initial_integration(const Tensor& x_lbp, const Tensor& x_rgb, AsfWeights& w);
Tensor global_context(const Tensor& u, AsfWeights& w, Mode mode);  // [...,1,1,C]
Tensor local_context(const Tensor& u, AsfWeights& w, Mode mode);   // [...,H,W,1]
Tensor global_local_weights(const Tensor& g, const Tensor& l);     // broadcast add
Tensor fuse(const Tensor& x_lbp, const Tensor& x_rgb, const Tensor& gl, FuseRule rule);
Tensor asf_forward(const Tensor& x_lbp, const Tensor& x_rgb, AsfWeights& w, Mode mode);

}  // namespace vtff

#include "vtff/asf.hpp"

#include <stdexcept>

namespace vtff {

AsfWeights AsfWeights::init(int64_t channels, int reduction, Rng& rng) {
  if (reduction < 1 || channels % reduction != 0) {
    throw std::invalid_argument("ASF channel count must be divisible by the reduction ratio");
  }
  AsfWeights w;
  w.channels = channels;
  w.reduction = reduction;
  int64_t mid = channels / reduction;
  w.integrate_lbp = Conv2dLayer::init(1, channels, channels, 1, 0, rng);
  w.integrate_rgb = Conv2dLayer::init(1, channels, channels, 1, 0, rng);
  w.global_conv1 = Conv2dLayer::init(1, channels, mid, 1, 0, rng);
  w.global_bn1 = BatchNormLayer::init(mid);
  w.global_conv2 = Conv2dLayer::init(1, mid, channels, 1, 0, rng);
  w.global_bn2 = BatchNormLayer::init(channels);
  w.local_conv1 = Conv2dLayer::init(1, channels, mid, 1, 0, rng);
  w.local_bn1 = BatchNormLayer::init(mid);
  w.local_conv2 = Conv2dLayer::init(1, mid, 1, 1, 0, rng);
  w.local_bn2 = BatchNormLayer::init(1);
  return w;
}

void AsfWeights::register_params(ParamMap& params, const std::string& prefix) const {
  integrate_lbp.register_params(params, prefix + ".integrate_lbp");
  integrate_rgb.register_params(params, prefix + ".integrate_rgb");
  global_conv1.register_params(params, prefix + ".global_conv1");
  global_bn1.register_params(params, prefix + ".global_bn1");
  global_conv2.register_params(params, prefix + ".global_conv2");
  global_bn2.register_params(params, prefix + ".global_bn2");
  local_conv1.register_params(params, prefix + ".local_conv1");
  local_bn1.register_params(params, prefix + ".local_bn1");
  local_conv2.register_params(params, prefix + ".local_conv2");
  local_bn2.register_params(params, prefix + ".local_bn2");
}

Tensor initial_integration(const Tensor& x_lbp, const Tensor& x_rgb, AsfWeights& w) {
  if (x_lbp.shape() != x_rgb.shape()) {
    throw std::invalid_argument("initial_integration: stream shapes differ");
  }
  return add(w.integrate_lbp.forward(x_lbp), w.integrate_rgb.forward(x_rgb));
}

Tensor global_context(const Tensor& u, AsfWeights& w, Mode mode) {
  Tensor pooled = adaptive_avg_pool(u);
  Tensor h = relu(w.global_bn1.forward(w.global_conv1.forward(pooled), mode));
  return sigmoid(w.global_bn2.forward(w.global_conv2.forward(h), mode));
}

Tensor local_context(const Tensor& u, AsfWeights& w, Mode mode) {
  Tensor h = relu(w.local_bn1.forward(w.local_conv1.forward(u), mode));
  return sigmoid(w.local_bn2.forward(w.local_conv2.forward(h), mode));
}

Tensor global_local_weights(const Tensor& g, const Tensor& l) { return add(g, l); }

Tensor fuse(const Tensor& x_lbp, const Tensor& x_rgb, const Tensor& gl, FuseRule rule) {
  if (x_lbp.shape() != x_rgb.shape()) throw std::invalid_argument("fuse: stream shapes differ");
  Tensor w_lbp = sigmoid(gl);
  Tensor w_rgb = rule == FuseRule::kLiteral ? sigmoid(add_scalar(scale(gl, -1.0f), 1.0f))
                                            : add_scalar(scale(w_lbp, -1.0f), 1.0f);
  return add(mul(x_lbp, w_lbp), mul(x_rgb, w_rgb));
}

Tensor asf_forward(const Tensor& x_lbp, const Tensor& x_rgb, AsfWeights& w, Mode mode) {
  Tensor u = initial_integration(x_lbp, x_rgb, w);
  Tensor g = global_context(u, w, mode);
  Tensor l = local_context(u, w, mode);
  Tensor gl = global_local_weights(g, l);
  return fuse(x_lbp, x_rgb, gl, w.rule);
}

}  // namespace vtff

#include "vtff/backbone.hpp"

#include <stdexcept>

namespace vtff {

int64_t BackboneConfig::downsampling_rate() const {
  int64_t r = 1;
  for (int s : stage_strides) r *= s;
  return r;
}

void BackboneConfig::validate() const {
  if (stage_channels.empty() || stage_channels.size() != stage_strides.size()) {
    throw std::invalid_argument("backbone config: stage_channels/stage_strides mismatch");
  }
  if (blocks_per_stage < 1) throw std::invalid_argument("backbone config: blocks_per_stage < 1");
  for (int s : stage_strides) {
    if (s < 1) throw std::invalid_argument("backbone config: stride < 1");
  }
  for (int64_t c : stage_channels) {
    if (c < 1) throw std::invalid_argument("backbone config: channel count < 1");
  }
}

ResidualBlock ResidualBlock::init(int64_t cin, int64_t cout, int stride, Rng& rng) {
  ResidualBlock block;
  block.conv1 = Conv2dLayer::init(3, cin, cout, stride, 1, rng);
  block.bn1 = BatchNormLayer::init(cout);
  block.conv2 = Conv2dLayer::init(3, cout, cout, 1, 1, rng);
  block.bn2 = BatchNormLayer::init(cout);
  block.has_projection = stride != 1 || cin != cout;
  if (block.has_projection) {
    block.proj = Conv2dLayer::init(1, cin, cout, stride, 0, rng);
    block.proj_bn = BatchNormLayer::init(cout);
  }
  return block;
}

Tensor ResidualBlock::forward(const Tensor& x, Mode mode) {
  Tensor f = bn2.forward(conv2.forward(relu(bn1.forward(conv1.forward(x), mode))), mode);
  Tensor shortcut = has_projection ? proj_bn.forward(proj.forward(x), mode) : x;
  return relu(add(f, shortcut));
}

void ResidualBlock::register_params(ParamMap& params, const std::string& prefix) const {
  conv1.register_params(params, prefix + ".conv1");
  bn1.register_params(params, prefix + ".bn1");
  conv2.register_params(params, prefix + ".conv2");
  bn2.register_params(params, prefix + ".bn2");
  if (has_projection) {
    proj.register_params(params, prefix + ".proj");
    proj_bn.register_params(params, prefix + ".proj_bn");
  }
}

Backbone Backbone::build(const BackboneConfig& cfg, uint64_t seed) {
  cfg.validate();
  Backbone bb;
  bb.cfg_ = cfg;
  Rng rng(seed);
  int64_t cin = 3;
  for (size_t stage = 0; stage < cfg.stage_channels.size(); ++stage) {
    int64_t cout = cfg.stage_channels[stage];
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      int stride = b == 0 ? cfg.stage_strides[stage] : 1;
      bb.blocks_.push_back(ResidualBlock::init(cin, cout, stride, rng));
      cin = cout;
    }
  }
  return bb;
}

Tensor Backbone::extract_features(const Tensor& img, Mode mode) {
  const bool batched = img.rank() == 4;
  int64_t h = img.dim(batched ? 1 : 0);
  int64_t w = img.dim(batched ? 2 : 1);
  int64_t r = cfg_.downsampling_rate();
  if (h % r != 0 || w % r != 0) {
    throw std::invalid_argument("input size " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by downsampling rate " + std::to_string(r));
  }
  Tensor x = img;
  for (auto& block : blocks_) x = block.forward(x, mode);
  return x;
}

void Backbone::register_params(ParamMap& params, const std::string& prefix) const {
  int stage = 0, index = 0;
  size_t i = 0;
  for (const auto& block : blocks_) {
    block.register_params(params, prefix + ".stage" + std::to_string(stage) + ".block" +
                                      std::to_string(index));
    ++index;
    if (index == cfg_.blocks_per_stage) {
      index = 0;
      ++stage;
    }
    ++i;
  }
}

}  // namespace vtff

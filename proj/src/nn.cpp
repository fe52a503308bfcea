#include "vtff/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace vtff {

Tensor Rng::uniform_tensor(Shape shape, float lo, float hi) {
  std::vector<float> data(static_cast<size_t>(numel(shape)));
  for (float& v : data) v = uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(data));
}

Tensor Rng::normal_tensor(Shape shape, float mu, float sd) {
  std::vector<float> data(static_cast<size_t>(numel(shape)));
  for (float& v : data) v = normal(mu, sd);
  return Tensor::from(std::move(shape), std::move(data));
}

void ParamMap::add(const std::string& name, Tensor t) {
  if (!entries_.emplace(name, std::move(t)).second) {
    throw std::invalid_argument("duplicate parameter name: " + name);
  }
}

Tensor& ParamMap::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamMap::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

int64_t ParamMap::trainable_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : entries_) {
    if (t.requires_grad()) n += t.size();
  }
  return n;
}

Conv2dLayer Conv2dLayer::init(int k, int64_t cin, int64_t cout, int stride, int padding,
                              Rng& rng) {
  Conv2dLayer layer;
  float bound = 1.0f / std::sqrt(static_cast<float>(k) * k * cin);
  layer.weight = rng.uniform_tensor({k, k, cin, cout}, -bound, bound);
  layer.weight.set_requires_grad(true);
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

void Conv2dLayer::register_params(ParamMap& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
}

BatchNormLayer BatchNormLayer::init(int64_t c) {
  BatchNormLayer layer;
  layer.gamma = Tensor::full({c}, 1.0f);
  layer.gamma.set_requires_grad(true);
  layer.beta = Tensor::zeros({c});
  layer.beta.set_requires_grad(true);
  layer.running_mean = Tensor::zeros({c});
  layer.running_var = Tensor::full({c}, 1.0f);
  return layer;
}

Tensor BatchNormLayer::forward(const Tensor& x, Mode mode) {
  return batch_norm(x, gamma, beta, running_mean, running_var, mode, momentum, eps);
}

void BatchNormLayer::register_params(ParamMap& params, const std::string& prefix) const {
  params.add(prefix + ".gamma", gamma);
  params.add(prefix + ".beta", beta);
  params.add(prefix + ".running_mean", running_mean);
  params.add(prefix + ".running_var", running_var);
}

LinearLayer LinearLayer::init(int64_t in, int64_t out, Rng& rng) {
  LinearLayer layer;
  float bound = 1.0f / std::sqrt(static_cast<float>(in));
  layer.weight = rng.uniform_tensor({in, out}, -bound, bound);
  layer.weight.set_requires_grad(true);
  layer.bias = Tensor::zeros({out});
  layer.bias.set_requires_grad(true);
  return layer;
}

Tensor LinearLayer::forward(const Tensor& x) const {
  if (x.rank() == 1) {
    Tensor row = reshape(x, {1, x.dim(0)});
    return reshape(add(matmul(row, weight), bias), {weight.dim(1)});
  }
  return add(matmul(x, weight), bias);
}

void LinearLayer::register_params(ParamMap& params, const std::string& prefix) const {
  params.add(prefix + ".weight", weight);
  params.add(prefix + ".bias", bias);
}

LayerNormLayer LayerNormLayer::init(int64_t c) {
  LayerNormLayer layer;
  layer.gamma = Tensor::full({c}, 1.0f);
  layer.gamma.set_requires_grad(true);
  layer.beta = Tensor::zeros({c});
  layer.beta.set_requires_grad(true);
  return layer;
}

void LayerNormLayer::register_params(ParamMap& params, const std::string& prefix) const {
  params.add(prefix + ".gamma", gamma);
  params.add(prefix + ".beta", beta);
}

}  // namespace vtff

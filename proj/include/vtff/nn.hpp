#pragma once

#include <map>
#include <random>
#include <string>

#include "vtff/tensor.hpp"

namespace vtff {

struct Rng {
  explicit Rng(uint64_t seed) : gen(seed) {}
  std::mt19937_64 gen;

  float uniform(float lo, float hi) {
    return std::uniform_real_distribution<float>(lo, hi)(gen);
  }
  float normal(float mu, float sd) { return std::normal_distribution<float>(mu, sd)(gen); }
  size_t index(size_t n) { return std::uniform_int_distribution<size_t>(0, n - 1)(gen); }

  Tensor uniform_tensor(Shape shape, float lo, float hi);
  Tensor normal_tensor(Shape shape, float mu, float sd);
};

// Named tensor registry; iteration order is the (deterministic) name order.
class ParamMap {
 public:
  void add(const std::string& name, Tensor t);
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  size_t size() const { return entries_.size(); }

  int64_t trainable_count() const;

 private:
  std::map<std::string, Tensor> entries_;
};

struct Conv2dLayer {
  Tensor weight;  // [k,k,Cin,Cout]
  int stride = 1;
  int padding = 0;

  static Conv2dLayer init(int k, int64_t cin, int64_t cout, int stride, int padding, Rng& rng);
  Tensor forward(const Tensor& x) const { return conv2d(x, weight, stride, padding); }
  void register_params(ParamMap& params, const std::string& prefix) const;
};

struct BatchNormLayer {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;

  static BatchNormLayer init(int64_t c);
  Tensor forward(const Tensor& x, Mode mode);
  void register_params(ParamMap& params, const std::string& prefix) const;
};

struct LinearLayer {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static LinearLayer init(int64_t in, int64_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;  // x: [T,in] or [in]
  void register_params(ParamMap& params, const std::string& prefix) const;
};

struct LayerNormLayer {
  Tensor gamma;
  Tensor beta;
  float eps = 1e-5f;

  static LayerNormLayer init(int64_t c);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
  void register_params(ParamMap& params, const std::string& prefix) const;
};

}  // namespace vtff

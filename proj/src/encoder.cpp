#include "vtff/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace vtff {

void EncoderConfig::validate() const {
  if (n_layers < 0 || n_heads < 1 || embed_dim < 1 || mlp_hidden < 1 || n_classes < 1) {
    throw std::invalid_argument("encoder config: non-positive field");
  }
  if (embed_dim % n_heads != 0) {
    throw std::invalid_argument("encoder config: embed_dim must be divisible by n_heads");
  }
}

Tokenizer Tokenizer::init(int64_t c_f, int64_t c_p, int64_t n_spatial_tokens, Rng& rng) {
  Tokenizer t;
  float bound = 1.0f / std::sqrt(static_cast<float>(c_f));
  t.proj = rng.uniform_tensor({c_f, c_p}, -bound, bound);
  t.proj.set_requires_grad(true);
  t.cls = rng.normal_tensor({c_p}, 0.0f, 0.02f);
  t.cls.set_requires_grad(true);
  t.pe = rng.normal_tensor({n_spatial_tokens + 1, c_p}, 0.0f, 0.02f);
  t.pe.set_requires_grad(true);
  return t;
}

Tensor tokenize(const Tensor& x_fused, const Tensor& proj, const Tensor& cls, const Tensor& pe) {
  if (x_fused.rank() != 3) throw std::invalid_argument("tokenize expects [H,W,C_f]");
  int64_t h = x_fused.dim(0), w = x_fused.dim(1), c_f = x_fused.dim(2);
  if (proj.rank() != 2 || proj.dim(0) != c_f) {
    throw std::invalid_argument("tokenize: projection shape mismatch");
  }
  int64_t c_p = proj.dim(1);
  if (cls.size() != c_p) throw std::invalid_argument("tokenize: cls shape mismatch");
  if (pe.rank() != 2 || pe.dim(0) != h * w + 1 || pe.dim(1) != c_p) {
    throw std::invalid_argument("tokenize: positional embedding shape mismatch");
  }
  Tensor flat = reshape(x_fused, {h * w, c_f});
  Tensor projected = matmul(flat, proj);
  Tensor cls_row = reshape(cls, {1, c_p});
  Tensor tokens = concat({cls_row, projected}, 0);
  return add(tokens, pe);
}

Tensor Tokenizer::forward(const Tensor& x_fused) const { return tokenize(x_fused, proj, cls, pe); }

void Tokenizer::register_params(ParamMap& params, const std::string& prefix) const {
  params.add(prefix + ".proj", proj);
  params.add(prefix + ".cls", cls);
  params.add(prefix + ".pe", pe);
}

EncoderLayerWeights EncoderLayerWeights::init(const EncoderConfig& cfg, Rng& rng) {
  EncoderLayerWeights w;
  int64_t c_p = cfg.embed_dim;
  int64_t d = cfg.head_dim();
  float bound = 1.0f / std::sqrt(static_cast<float>(c_p));
  w.ln1 = LayerNormLayer::init(c_p);
  for (int j = 0; j < cfg.n_heads; ++j) {
    AttentionHead head;
    head.wq = rng.uniform_tensor({c_p, d}, -bound, bound).set_requires_grad(true);
    head.bq = Tensor::zeros({d}).set_requires_grad(true);
    head.wk = rng.uniform_tensor({c_p, d}, -bound, bound).set_requires_grad(true);
    head.bk = Tensor::zeros({d}).set_requires_grad(true);
    head.wv = rng.uniform_tensor({c_p, d}, -bound, bound).set_requires_grad(true);
    head.bv = Tensor::zeros({d}).set_requires_grad(true);
    w.heads.push_back(std::move(head));
  }
  w.out_proj = LinearLayer::init(c_p, c_p, rng);
  w.ln2 = LayerNormLayer::init(c_p);
  w.mlp1 = LinearLayer::init(c_p, cfg.mlp_hidden, rng);
  w.mlp2 = LinearLayer::init(cfg.mlp_hidden, c_p, rng);
  return w;
}

void EncoderLayerWeights::register_params(ParamMap& params, const std::string& prefix) const {
  ln1.register_params(params, prefix + ".ln1");
  for (size_t j = 0; j < heads.size(); ++j) {
    std::string hp = prefix + ".head" + std::to_string(j);
    params.add(hp + ".wq", heads[j].wq);
    params.add(hp + ".bq", heads[j].bq);
    params.add(hp + ".wk", heads[j].wk);
    params.add(hp + ".bk", heads[j].bk);
    params.add(hp + ".wv", heads[j].wv);
    params.add(hp + ".bv", heads[j].bv);
  }
  out_proj.register_params(params, prefix + ".out_proj");
  ln2.register_params(params, prefix + ".ln2");
  mlp1.register_params(params, prefix + ".mlp1");
  mlp2.register_params(params, prefix + ".mlp2");
}

Tensor mhsa(const Tensor& z, const EncoderLayerWeights& w, std::vector<Tensor>* maps_out) {
  if (z.rank() != 2) throw std::invalid_argument("mhsa expects [T,C_p]");
  int64_t d = w.heads.front().wq.dim(1);
  float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(w.heads.size());
  for (const AttentionHead& head : w.heads) {
    Tensor q = add(matmul(z, head.wq), head.bq);
    Tensor k = add(matmul(z, head.wk), head.bk);
    Tensor v = add(matmul(z, head.wv), head.bv);
    Tensor scores = scale(matmul(q, transpose2d(k)), inv_sqrt_d);
    Tensor attn = softmax(scores, 1);
    if (maps_out != nullptr) maps_out->push_back(attn);
    head_outputs.push_back(matmul(attn, v));
  }
  return w.out_proj.forward(concat(head_outputs, 1));
}

Tensor encoder_layer(const Tensor& z, EncoderLayerWeights& w, std::vector<Tensor>* maps_out) {
  Tensor z_hat = add(mhsa(w.ln1.forward(z), w, maps_out), z);
  Tensor h = w.mlp2.forward(gelu(w.mlp1.forward(w.ln2.forward(z_hat))));
  return add(h, z_hat);
}

Encoder Encoder::init(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  Encoder enc;
  enc.cfg_ = cfg;
  for (int i = 0; i < cfg.n_layers; ++i) {
    enc.layers_.push_back(EncoderLayerWeights::init(cfg, rng));
  }
  enc.final_ln_ = LayerNormLayer::init(cfg.embed_dim);
  float bound = 1.0f / std::sqrt(static_cast<float>(cfg.embed_dim));
  enc.theta_ = rng.uniform_tensor({cfg.embed_dim, cfg.n_classes}, -bound, bound);
  enc.theta_.set_requires_grad(true);
  return enc;
}

std::pair<Tensor, AttentionMaps> Encoder::encode(const Tensor& z0) {
  AttentionMaps maps;
  maps.seq_len = z0.dim(0);
  maps.n_heads = cfg_.n_heads;
  Tensor z = z0;
  for (auto& layer : layers_) {
    z = encoder_layer(z, layer, &maps.maps);
  }
  return {z, maps};
}

Tensor Encoder::class_logits(const Tensor& z_final) const {
  Tensor y = final_ln_.forward(select(z_final, 0));
  Tensor row = reshape(y, {1, cfg_.embed_dim});
  return reshape(matmul(row, theta_), {cfg_.n_classes});
}

Tensor Encoder::class_probabilities(const Tensor& z_final) const {
  return softmax(class_logits(z_final), 0);
}

void Encoder::register_params(ParamMap& params, const std::string& prefix,
                              const std::string& head_prefix) const {
  for (size_t i = 0; i < layers_.size(); ++i) {
    layers_[i].register_params(params, prefix + ".layer" + std::to_string(i));
  }
  final_ln_.register_params(params, prefix + ".final_ln");
  params.add(head_prefix + ".theta", theta_);
}

Tensor attention_rollout(const AttentionMaps& maps, int64_t h, int64_t w) {
  if (maps.maps.empty()) throw std::invalid_argument("attention_rollout: no attention maps");
  int64_t t = maps.seq_len;
  if (h * w + 1 != t) throw std::invalid_argument("attention_rollout: grid does not match T");
  int n_layers = maps.n_layers();

  std::vector<double> rolled(static_cast<size_t>(t * t), 0.0);
  std::vector<double> layer_mat(static_cast<size_t>(t * t));
  std::vector<double> next(static_cast<size_t>(t * t));
  for (int layer = 0; layer < n_layers; ++layer) {
    // Average heads, add the identity for the residual path, renormalize rows.
    std::fill(layer_mat.begin(), layer_mat.end(), 0.0);
    for (int head = 0; head < maps.n_heads; ++head) {
      auto data = maps.at(layer, head).data();
      for (int64_t i = 0; i < t * t; ++i) layer_mat[static_cast<size_t>(i)] += data[i];
    }
    for (int64_t i = 0; i < t; ++i) {
      double row_sum = 0.0;
      for (int64_t j = 0; j < t; ++j) {
        double v = layer_mat[static_cast<size_t>(i * t + j)] / maps.n_heads +
                   (i == j ? 1.0 : 0.0);
        layer_mat[static_cast<size_t>(i * t + j)] = v;
        row_sum += v;
      }
      for (int64_t j = 0; j < t; ++j) layer_mat[static_cast<size_t>(i * t + j)] /= row_sum;
    }
    if (layer == 0) {
      rolled = layer_mat;
      continue;
    }
    // rolled = layer_mat * rolled (later layers compose on the left).
    std::fill(next.begin(), next.end(), 0.0);
    for (int64_t i = 0; i < t; ++i) {
      for (int64_t k = 0; k < t; ++k) {
        double a = layer_mat[static_cast<size_t>(i * t + k)];
        if (a == 0.0) continue;
        for (int64_t j = 0; j < t; ++j) {
          next[static_cast<size_t>(i * t + j)] += a * rolled[static_cast<size_t>(k * t + j)];
        }
      }
    }
    rolled.swap(next);
  }

  std::vector<float> grid(static_cast<size_t>(h * w));
  double lo = rolled[1], hi = rolled[1];
  for (int64_t j = 0; j < h * w; ++j) {
    double v = rolled[static_cast<size_t>(j + 1)];  // [cls] row, spatial columns
    grid[static_cast<size_t>(j)] = static_cast<float>(v);
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  double range = hi - lo;
  for (float& v : grid) {
    v = range > 0.0 ? static_cast<float>((v - lo) / range) : 0.0f;
  }
  return Tensor::from({h, w}, std::move(grid));
}

}  // namespace vtff

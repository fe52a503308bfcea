#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vtff/nn.hpp"

namespace vtff {

struct EncoderConfig {
  int n_layers = 4;
  int n_heads = 8;
  int64_t embed_dim = 768;   // C_p
  int64_t mlp_hidden = 3072;
  int64_t n_classes = 7;

  int64_t head_dim() const { return embed_dim / n_heads; }
  void validate() const;
};

// Per layer, per head attention probabilities, each [T,T], layer-major.
struct AttentionMaps {
  int64_t seq_len = 0;
  int n_heads = 0;
  std::vector<Tensor> maps;

  int n_layers() const {
    return n_heads == 0 ? 0 : static_cast<int>(maps.size()) / n_heads;
  }
  const Tensor& at(int layer, int head) const {
    return maps[static_cast<size_t>(layer * n_heads + head)];
  }
};

// Flatten fused features row-major, project to C_p, prepend [cls], add
// learnable positional embeddings.
struct Tokenizer {
  Tensor proj;  // [C_f, C_p]
  Tensor cls;   // [C_p]
  Tensor pe;    // [H_d*W_d + 1, C_p]

  static Tokenizer init(int64_t c_f, int64_t c_p, int64_t n_spatial_tokens, Rng& rng);
  Tensor forward(const Tensor& x_fused) const;  // [H,W,C_f] -> [H*W+1, C_p]
  void register_params(ParamMap& params, const std::string& prefix) const;
};

Tensor tokenize(const Tensor& x_fused, const Tensor& proj, const Tensor& cls, const Tensor& pe);

struct AttentionHead {
  Tensor wq, bq;  // [C_p,d], [d]
  Tensor wk, bk;
  Tensor wv, bv;
};

struct EncoderLayerWeights {
  LayerNormLayer ln1;
  std::vector<AttentionHead> heads;
  LinearLayer out_proj;  // W^O: [C_p, C_p]
  LayerNormLayer ln2;
  LinearLayer mlp1;  // [C_p, mlp_hidden]
  LinearLayer mlp2;  // [mlp_hidden, C_p]

  static EncoderLayerWeights init(const EncoderConfig& cfg, Rng& rng);
  void register_params(ParamMap& params, const std::string& prefix) const;
};

// Multi-head self-attention over a [T,C_p] sequence. Appends one [T,T]
// attention map per head to maps_out when given.
Tensor mhsa(const Tensor& z, const EncoderLayerWeights& w, std::vector<Tensor>* maps_out);

// Pre-norm residual layer: z + MHSA(LN(z)), then + MLP(LN(.)).
Tensor encoder_layer(const Tensor& z, EncoderLayerWeights& w, std::vector<Tensor>* maps_out);

class Encoder {
 public:
  static Encoder init(const EncoderConfig& cfg, Rng& rng);

  std::pair<Tensor, AttentionMaps> encode(const Tensor& z0);
  Tensor class_probabilities(const Tensor& z_final) const;  // softmax over M
  Tensor class_logits(const Tensor& z_final) const;         // theta^T LN(z[0])

  const EncoderConfig& config() const { return cfg_; }

  // Layer weights go under `prefix`, the classification matrix under
  // `head_prefix`.
  void register_params(ParamMap& params, const std::string& prefix,
                       const std::string& head_prefix) const;

 private:
  EncoderConfig cfg_;
  std::vector<EncoderLayerWeights> layers_;
  LayerNormLayer final_ln_;
  Tensor theta_;  // [C_p, M]
};

// Head-averaged, identity-corrected, row-renormalized recursive product of
// the per-layer attention matrices; returns the min-max normalized [cls]
// attribution over the h x w spatial grid.
Tensor attention_rollout(const AttentionMaps& maps, int64_t h, int64_t w);

}  // namespace vtff

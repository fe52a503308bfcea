#include <doctest.h>

#include <cmath>
#include <vector>

#include "grad_check.hpp"
#include "vtff/encoder.hpp"

using namespace vtff;

namespace {

void zero_all(Tensor& t) {
  for (auto& v : t.data()) v = 0.0f;
}

// Scalar-loop re-evaluation of multi-head attention, independent of the
// tensor primitives.
std::vector<double> mhsa_oracle(const Tensor& z, const EncoderLayerWeights& w) {
  int64_t t = z.dim(0), c_p = z.dim(1);
  int64_t d = w.heads.front().wq.dim(1);
  int64_t n_heads = static_cast<int64_t>(w.heads.size());
  std::vector<double> concat_out(static_cast<size_t>(t * n_heads * d), 0.0);
  for (int64_t hidx = 0; hidx < n_heads; ++hidx) {
    const AttentionHead& head = w.heads[static_cast<size_t>(hidx)];
    std::vector<double> q(static_cast<size_t>(t * d)), k(q), v(q);
    for (int64_t i = 0; i < t; ++i) {
      for (int64_t j = 0; j < d; ++j) {
        double sq = head.bq.data()[static_cast<size_t>(j)];
        double sk = head.bk.data()[static_cast<size_t>(j)];
        double sv = head.bv.data()[static_cast<size_t>(j)];
        for (int64_t c = 0; c < c_p; ++c) {
          double zc = z.data()[static_cast<size_t>(i * c_p + c)];
          sq += zc * head.wq.data()[static_cast<size_t>(c * d + j)];
          sk += zc * head.wk.data()[static_cast<size_t>(c * d + j)];
          sv += zc * head.wv.data()[static_cast<size_t>(c * d + j)];
        }
        q[static_cast<size_t>(i * d + j)] = sq;
        k[static_cast<size_t>(i * d + j)] = sk;
        v[static_cast<size_t>(i * d + j)] = sv;
      }
    }
    for (int64_t i = 0; i < t; ++i) {
      std::vector<double> logits(static_cast<size_t>(t));
      double mx = -1e300;
      for (int64_t j = 0; j < t; ++j) {
        double s = 0.0;
        for (int64_t e = 0; e < d; ++e) {
          s += q[static_cast<size_t>(i * d + e)] * k[static_cast<size_t>(j * d + e)];
        }
        logits[static_cast<size_t>(j)] = s / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, logits[static_cast<size_t>(j)]);
      }
      double denom = 0.0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        denom += l;
      }
      for (int64_t e = 0; e < d; ++e) {
        double acc = 0.0;
        for (int64_t j = 0; j < t; ++j) {
          acc += logits[static_cast<size_t>(j)] / denom * v[static_cast<size_t>(j * d + e)];
        }
        concat_out[static_cast<size_t>(i * n_heads * d + hidx * d + e)] = acc;
      }
    }
  }
  std::vector<double> out(static_cast<size_t>(t * c_p), 0.0);
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = 0; j < c_p; ++j) {
      double s = w.out_proj.bias.data()[static_cast<size_t>(j)];
      for (int64_t c = 0; c < c_p; ++c) {
        s += concat_out[static_cast<size_t>(i * c_p + c)] *
             w.out_proj.weight.data()[static_cast<size_t>(c * c_p + j)];
      }
      out[static_cast<size_t>(i * c_p + j)] = s;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("tokenize shapes: full scale and desk scale") {
  Rng rng(1);
  {
    Tokenizer tok = Tokenizer::init(512, 768, 49, rng);
    Tensor feat = Tensor::full({7, 7, 512}, 0.1f);
    Tensor seq = tok.forward(feat);
    CHECK(seq.shape() == Shape{50, 768});
  }
  {
    Tokenizer tok = Tokenizer::init(4, 6, 4, rng);
    Tensor feat = Tensor::full({2, 2, 4}, 0.1f);
    CHECK(tok.forward(feat).shape() == Shape{5, 6});
  }
}

TEST_CASE("tokenize with identity-extended projection copies feature rows") {
  Rng rng(2);
  Tokenizer tok = Tokenizer::init(3, 5, 4, rng);
  zero_all(tok.pe);
  zero_all(tok.cls);
  zero_all(tok.proj);
  for (int64_t i = 0; i < 3; ++i) tok.proj.data()[static_cast<size_t>(i * 5 + i)] = 1.0f;

  Tensor feat = rng.uniform_tensor({2, 2, 3}, -1, 1);
  Tensor seq = tok.forward(feat);
  for (int64_t i = 0; i < 5; ++i) CHECK(seq.data()[static_cast<size_t>(i)] == 0.0f);
  for (int64_t k = 0; k < 4; ++k) {
    for (int64_t c = 0; c < 3; ++c) {
      CHECK(seq.data()[static_cast<size_t>((k + 1) * 5 + c)] ==
            feat.data()[static_cast<size_t>(k * 3 + c)]);
    }
    CHECK(seq.data()[static_cast<size_t>((k + 1) * 5 + 3)] == 0.0f);
    CHECK(seq.data()[static_cast<size_t>((k + 1) * 5 + 4)] == 0.0f);
  }
}

TEST_CASE("single-token attention is the 1x1 matrix [1]") {
  EncoderConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.embed_dim = 6;
  cfg.mlp_hidden = 8;
  Rng rng(3);
  EncoderLayerWeights w = EncoderLayerWeights::init(cfg, rng);
  Tensor z = rng.uniform_tensor({1, 6}, -1, 1);
  std::vector<Tensor> maps;
  Tensor out = mhsa(z, w, &maps);
  REQUIRE(maps.size() == 2);
  for (const Tensor& m : maps) {
    REQUIRE(m.shape() == Shape{1, 1});
    CHECK(m.item() == doctest::Approx(1.0));
  }
  auto oracle = mhsa_oracle(z, w);
  for (int64_t i = 0; i < out.size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-4));
  }
}

TEST_CASE("identical keys give uniform attention rows") {
  EncoderConfig cfg;
  cfg.n_heads = 1;
  cfg.embed_dim = 4;
  Rng rng(4);
  EncoderLayerWeights w = EncoderLayerWeights::init(cfg, rng);
  zero_all(w.heads[0].wk);
  Tensor z = rng.uniform_tensor({2, 4}, -1, 1);
  std::vector<Tensor> maps;
  mhsa(z, w, &maps);
  for (int64_t i = 0; i < 4; ++i) CHECK(maps[0].data()[i] == doctest::Approx(0.5));
}

TEST_CASE("multi-head attention matches the scalar-loop oracle") {
  EncoderConfig cfg;
  cfg.n_heads = 2;
  cfg.embed_dim = 4;  // d = 2
  Rng rng(5);
  EncoderLayerWeights w = EncoderLayerWeights::init(cfg, rng);
  for (AttentionHead& head : w.heads) {
    for (Tensor* t : {&head.bq, &head.bk, &head.bv}) {
      for (int64_t i = 0; i < t->size(); ++i) t->data()[i] = 0.05f * static_cast<float>(i + 1);
    }
  }
  Tensor z = rng.uniform_tensor({3, 4}, -2, 2);
  Tensor out = mhsa(z, w, nullptr);
  auto oracle = mhsa_oracle(z, w);
  REQUIRE(out.size() == static_cast<int64_t>(oracle.size()));
  for (int64_t i = 0; i < out.size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(oracle[static_cast<size_t>(i)]).epsilon(1e-4));
  }
}

TEST_CASE("encoder layer collapses to the identity when both branches are zeroed") {
  EncoderConfig cfg;
  cfg.n_heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_hidden = 16;
  Rng rng(6);
  EncoderLayerWeights w = EncoderLayerWeights::init(cfg, rng);
  zero_all(w.out_proj.weight);
  zero_all(w.out_proj.bias);
  zero_all(w.mlp2.weight);
  zero_all(w.mlp2.bias);
  Tensor z = rng.uniform_tensor({4, 8}, -1, 1);
  Tensor out = encoder_layer(z, w, nullptr);
  REQUIRE(out.shape() == z.shape());
  for (int64_t i = 0; i < z.size(); ++i) CHECK(out.data()[i] == z.data()[i]);
}

TEST_CASE("encoder layer preserves shape for varying sequence lengths") {
  EncoderConfig cfg;
  cfg.n_heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_hidden = 12;
  Rng rng(7);
  EncoderLayerWeights w = EncoderLayerWeights::init(cfg, rng);
  for (int64_t t : {1, 3, 9}) {
    Tensor z = rng.uniform_tensor({t, 8}, -1, 1);
    CHECK(encoder_layer(z, w, nullptr).shape() == Shape{t, 8});
  }
}

TEST_CASE("encoder layer gradients match finite differences") {
  EncoderConfig cfg;
  cfg.n_heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_hidden = 12;
  Rng rng(8);
  EncoderLayerWeights w = EncoderLayerWeights::init(cfg, rng);
  Tensor z = rng.uniform_tensor({3, 8}, -1, 1).set_requires_grad(true);
  ParamMap params;
  w.register_params(params, "layer");
  std::vector<Tensor> inputs = {z};
  for (auto& [name, t] : params) {
    if (t.requires_grad()) inputs.push_back(t);
  }
  double err = vtff::testing::grad_check(
      [&]() { return mean(encoder_layer(z, w, nullptr)); }, inputs, 1e-2f, 6, 99);
  CHECK(err < 1e-4);
}

TEST_CASE("zero-depth encoder is the identity and map bookkeeping holds") {
  Rng rng(9);
  EncoderConfig cfg0;
  cfg0.n_layers = 0;
  cfg0.n_heads = 2;
  cfg0.embed_dim = 8;
  cfg0.mlp_hidden = 12;
  cfg0.n_classes = 4;
  Encoder enc0 = Encoder::init(cfg0, rng);
  Tensor z = rng.uniform_tensor({5, 8}, -1, 1);
  auto [out, maps] = enc0.encode(z);
  for (int64_t i = 0; i < z.size(); ++i) CHECK(out.data()[i] == z.data()[i]);
  CHECK(maps.maps.empty());

  EncoderConfig cfg;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_hidden = 12;
  cfg.n_classes = 4;
  Encoder enc = Encoder::init(cfg, rng);
  auto [out2, maps2] = enc.encode(z);
  CHECK(maps2.maps.size() == static_cast<size_t>(cfg.n_layers * cfg.n_heads));
  CHECK(maps2.n_layers() == 3);
}

TEST_CASE("default encoder depth and width") {
  EncoderConfig cfg;
  CHECK(cfg.n_layers == 4);
  CHECK(cfg.n_heads == 8);
  CHECK(cfg.embed_dim == 768);
  CHECK(cfg.n_classes == 7);
  EncoderConfig eight = cfg;
  eight.n_classes = 8;
  CHECK_NOTHROW(eight.validate());
}

TEST_CASE("classification head: zero theta gives uniform probabilities") {
  EncoderConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.embed_dim = 8;
  cfg.mlp_hidden = 12;
  cfg.n_classes = 7;
  Rng rng(10);
  Encoder enc = Encoder::init(cfg, rng);
  ParamMap params;
  enc.register_params(params, "encoder", "head");
  zero_all(params.at("head.theta"));

  Tensor z = rng.uniform_tensor({5, 8}, -1, 1);
  auto [out, maps] = enc.encode(z);
  Tensor probs = enc.class_probabilities(out);
  REQUIRE(probs.shape() == Shape{7});
  double s = 0.0;
  for (int64_t i = 0; i < 7; ++i) {
    CHECK(probs.data()[i] == doctest::Approx(1.0 / 7.0));
    s += probs.data()[i];
  }
  CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("rollout: uniform attention flattens, concentrated attention peaks") {
  {
    AttentionMaps maps;
    maps.seq_len = 5;
    maps.n_heads = 1;
    maps.maps.push_back(Tensor::full({5, 5}, 0.2f));
    Tensor rolled = attention_rollout(maps, 2, 2);
    REQUIRE(rolled.shape() == Shape{2, 2});
    for (int64_t i = 0; i < 4; ++i) CHECK(rolled.data()[i] == rolled.data()[0]);
  }
  {
    // [cls] attends only to spatial token 3 (sequence index 3, cell index 2).
    AttentionMaps maps;
    maps.seq_len = 5;
    maps.n_heads = 1;
    Tensor a = Tensor::zeros({5, 5});
    a.data()[3] = 1.0f;                                        // row 0 -> token 3
    for (int64_t i = 1; i < 5; ++i) a.data()[static_cast<size_t>(i * 5 + i)] = 1.0f;
    maps.maps.push_back(a);
    Tensor rolled = attention_rollout(maps, 2, 2);
    CHECK(rolled.data()[2] == doctest::Approx(1.0));
    CHECK(rolled.data()[0] == doctest::Approx(0.0));
    CHECK(rolled.data()[1] == doctest::Approx(0.0));
    CHECK(rolled.data()[3] == doctest::Approx(0.0));
  }
}

TEST_CASE("two-layer rollout equals the hand matrix product") {
  AttentionMaps maps;
  maps.seq_len = 3;
  maps.n_heads = 1;
  Tensor a1 = Tensor::from({3, 3}, {0.6f, 0.2f, 0.2f, 0.1f, 0.8f, 0.1f, 0.3f, 0.3f, 0.4f});
  Tensor a2 = Tensor::from({3, 3}, {0.5f, 0.25f, 0.25f, 0.2f, 0.6f, 0.2f, 0.1f, 0.1f, 0.8f});
  maps.maps = {a1, a2};

  auto corrected = [](const Tensor& a) {
    std::vector<double> m(9);
    for (int i = 0; i < 3; ++i) {
      double row = 0.0;
      for (int j = 0; j < 3; ++j) {
        m[static_cast<size_t>(i * 3 + j)] = a.data()[static_cast<size_t>(i * 3 + j)] +
                                            (i == j ? 1.0 : 0.0);
        row += m[static_cast<size_t>(i * 3 + j)];
      }
      for (int j = 0; j < 3; ++j) m[static_cast<size_t>(i * 3 + j)] /= row;
    }
    return m;
  };
  auto m1 = corrected(a1);
  auto m2 = corrected(a2);
  double cls_row[3] = {0, 0, 0};
  for (int j = 0; j < 3; ++j) {
    for (int k = 0; k < 3; ++k) cls_row[j] += m2[static_cast<size_t>(k)] * m1[static_cast<size_t>(k * 3 + j)];
  }
  double lo = std::min(cls_row[1], cls_row[2]);
  double hi = std::max(cls_row[1], cls_row[2]);

  Tensor rolled = attention_rollout(maps, 2, 1);
  CHECK(rolled.data()[0] == doctest::Approx((cls_row[1] - lo) / (hi - lo)).epsilon(1e-5));
  CHECK(rolled.data()[1] == doctest::Approx((cls_row[2] - lo) / (hi - lo)).epsilon(1e-5));
}

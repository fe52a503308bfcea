#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "grad_check.hpp"
#include "vtff/train.hpp"

using namespace vtff;

namespace {

ModelConfig desk_config() {
  ModelConfig cfg;
  cfg.backbone.stage_channels = {8, 16};
  cfg.backbone.stage_strides = {2, 4};
  cfg.encoder.n_layers = 2;
  cfg.encoder.n_heads = 2;
  cfg.encoder.embed_dim = 16;
  cfg.encoder.mlp_hidden = 32;
  cfg.encoder.n_classes = 4;
  cfg.reduction = 2;
  cfg.image_size = 16;
  return cfg;
}

Dataset tiny_dataset(int per_class, int n_classes, int size, uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  for (int c = 0; c < n_classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
  for (int c = 0; c < n_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Image img = make_image(size, size, 3);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          bool stripe = ((y / (1 + c)) % 2) == 0;
          img.at(y, x, 0) = static_cast<uint8_t>(stripe ? 220 : 40);
          img.at(y, x, 1) = static_cast<uint8_t>(40 + 50 * c);
          img.at(y, x, 2) = static_cast<uint8_t>(rng.index(40));
        }
      }
      ds.samples.push_back({img, c});
    }
  }
  return ds;
}

}  // namespace

TEST_CASE("learning rate schedule endpoints") {
  TrainConfig cfg;
  CHECK(lr_at(0, cfg) == 0.0f);
  CHECK(lr_at(1000, cfg) == doctest::Approx(0.005).epsilon(1e-7));
  CHECK(lr_at(cfg.total_steps, cfg) == doctest::Approx(0.0));
  CHECK(lr_at(500, cfg) == doctest::Approx(0.0025));
  float mid = lr_at((cfg.warmup_steps + cfg.total_steps) / 2, cfg);
  CHECK(mid == doctest::Approx(0.0025).epsilon(1e-3));
  CHECK_THROWS_AS(lr_at(-1, cfg), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(cfg.total_steps + 1, cfg), std::invalid_argument);
}

TEST_CASE("cross entropy values and gradient identity") {
  Tensor uniform = Tensor::full({7}, 1.0f / 7.0f);
  CHECK(cross_entropy(uniform, 3).item() == doctest::Approx(std::log(7.0)).epsilon(1e-5));

  Tensor certain = Tensor::from({3}, {0.0f, 1.0f, 0.0f});
  CHECK(cross_entropy(certain, 1).item() == doctest::Approx(0.0).epsilon(1e-6));

  // d loss / d logits = softmax(logits) - one_hot(label).
  Tensor logits = Tensor::from({4}, {0.5f, -1.0f, 2.0f, 0.0f}).set_requires_grad(true);
  int label = 2;
  {
    Tape tape;
    tape.backward(cross_entropy(softmax(logits, 0), label));
  }
  Tensor probs = softmax(logits, 0);
  auto g = logits.grad();
  for (int64_t i = 0; i < 4; ++i) {
    float expected = probs.data()[i] - (i == label ? 1.0f : 0.0f);
    CHECK(g[static_cast<size_t>(i)] == doctest::Approx(expected).epsilon(1e-4));
  }
  logits.zero_grad();
  double err = vtff::testing::grad_check(
      [&]() { return cross_entropy(softmax(logits, 0), label); }, {logits});
  CHECK(err < 1e-4);
}

TEST_CASE("adam: zero gradients are a no-op, first step moves against the sign") {
  TrainConfig cfg;
  ParamMap params;
  Tensor p = Tensor::from({3}, {1.0f, -2.0f, 0.5f}).set_requires_grad(true);
  params.add("p", p);
  AdamState noop_state;
  adam_step(params, noop_state, 0.01f, cfg);
  CHECK(p.data()[0] == 1.0f);
  CHECK(p.data()[1] == -2.0f);
  CHECK(p.data()[2] == 0.5f);

  AdamState state;
  p.node()->ensure_grad();
  p.node()->grad = {0.3f, -0.7f, 0.0f};
  adam_step(params, state, 0.01f, cfg);
  CHECK(p.data()[0] == doctest::Approx(1.0f - 0.01f).epsilon(1e-4));
  CHECK(p.data()[1] == doctest::Approx(-2.0f + 0.01f).epsilon(1e-4));
  CHECK(p.data()[2] == 0.5f);
  CHECK(p.grad()[0] == 0.0f);  // step consumes the gradient
}

TEST_CASE("oversampling replicates to the majority count") {
  {
    std::vector<int> labels = {0, 0, 0, 1};
    auto idx = oversample_indices(labels, 1);
    REQUIRE(idx.size() == 6);
    int count_b = 0;
    for (size_t i : idx) count_b += labels[i] == 1;
    CHECK(count_b == 3);
  }
  {
    std::vector<int> labels = {0, 1, 0, 1};
    auto idx = oversample_indices(labels, 2);
    std::sort(idx.begin(), idx.end());
    REQUIRE(idx.size() == 4);
    for (size_t i = 0; i < 4; ++i) CHECK(idx[i] == i);
  }
  {
    std::vector<int> labels = {0, 0, 0, 0, 0, 1, 1, 2};
    auto idx = oversample_indices(labels, 3);
    REQUIRE(idx.size() == 15);
    int per_class[3] = {0, 0, 0};
    for (size_t i : idx) per_class[labels[i]]++;
    CHECK(per_class[0] == 5);
    CHECK(per_class[1] == 5);
    CHECK(per_class[2] == 5);
  }
}

TEST_CASE("evaluation report arithmetic") {
  {
    std::vector<int> preds = {0, 1, 2, 1};
    auto report = report_from_predictions(preds, preds, 3);
    CHECK(report.overall_accuracy == doctest::Approx(1.0));
    CHECK(report.mean_class_accuracy == doctest::Approx(1.0));
    CHECK(report.confusion[0][0] == 1);
    CHECK(report.confusion[1][1] == 2);
    CHECK(report.confusion[0][1] == 0);
  }
  {
    std::vector<int> labels = {0, 0, 0, 0, 1, 1};
    std::vector<int> preds = {0, 0, 0, 1, 1, 0};
    auto report = report_from_predictions(preds, labels, 2);
    CHECK(report.overall_accuracy == doctest::Approx(4.0 / 6.0));
    CHECK(report.mean_class_accuracy == doctest::Approx(0.625));

    std::vector<size_t> order = {5, 2, 0, 4, 1, 3};
    std::vector<int> labels_p, preds_p;
    for (size_t i : order) {
      labels_p.push_back(labels[i]);
      preds_p.push_back(preds[i]);
    }
    auto permuted = report_from_predictions(preds_p, labels_p, 2);
    CHECK(permuted.overall_accuracy == report.overall_accuracy);
    CHECK(permuted.mean_class_accuracy == report.mean_class_accuracy);
    CHECK(permuted.confusion == report.confusion);
  }
}

TEST_CASE("mcnemar test oracles") {
  auto make_case = [](int b, int c, int both_correct) {
    // Labels all 0; discordant pairs split between the two prediction sets.
    std::vector<int> labels(static_cast<size_t>(b + c + both_correct), 0);
    std::vector<int> a(labels.size(), 0), bb(labels.size(), 0);
    for (int i = 0; i < b; ++i) bb[static_cast<size_t>(i)] = 1;          // A correct, B wrong
    for (int i = 0; i < c; ++i) a[static_cast<size_t>(b + i)] = 1;       // A wrong, B correct
    return std::tuple{a, bb, labels};
  };

  {
    auto [a, b, labels] = make_case(5, 5, 3);
    auto res = mcnemar_test(a, b, labels);
    CHECK(res.b == 5);
    CHECK(res.c == 5);
    CHECK(res.p_value == doctest::Approx(1.0));
  }
  {
    auto [a, b, labels] = make_case(10, 0, 2);
    auto res = mcnemar_test(a, b, labels);
    CHECK(res.p_value == doctest::Approx(2.0 * std::pow(0.5, 10)).epsilon(1e-5));
  }
  {
    auto [a, b, labels] = make_case(0, 0, 4);
    auto res = mcnemar_test(a, b, labels);
    CHECK(res.p_value == doctest::Approx(1.0));
  }
  {
    // Large-sample branch: chi-square with continuity correction.
    auto [a, b, labels] = make_case(30, 10, 5);
    auto res = mcnemar_test(a, b, labels);
    double chi = (std::abs(30.0 - 10.0) - 1.0) * (std::abs(30.0 - 10.0) - 1.0) / 40.0;
    CHECK(res.p_value == doctest::Approx(chi_square_sf_1dof(chi)).epsilon(1e-9));
    auto swapped = mcnemar_test(b, a, labels);
    CHECK(swapped.b == res.c);
    CHECK(swapped.c == res.b);
    CHECK(swapped.p_value == doctest::Approx(res.p_value));
  }
}

TEST_CASE("ablation variant toggles") {
  CHECK(all_ablation_variants().size() == 7);
  ModelConfig base = desk_config();

  ModelConfig baseline = apply_variant(base, AblationVariant::kBaseline);
  CHECK_FALSE(baseline.use_lbp);
  CHECK_FALSE(baseline.use_encoder);
  VtffModel model = VtffModel::build(baseline, 1);
  CHECK(model.encoder_trainable_count() == 0);

  ModelConfig full = apply_variant(base, AblationVariant::kFull);
  CHECK(full.use_lbp);
  CHECK(full.use_encoder);
  CHECK(full.fusion == FusionKind::kAsf);

  ModelConfig add = apply_variant(base, AblationVariant::kLbpMte);
  CHECK(add.fusion == FusionKind::kAdd);

  ModelConfig cat = apply_variant(base, AblationVariant::kConcatFusion);
  CHECK(cat.fusion == FusionKind::kConcat);

  for (AblationVariant v : all_ablation_variants()) {
    CHECK(ablation_variant_from_name(ablation_variant_name(v)) == v);
  }
}

TEST_CASE("full model gradients on a small input match finite differences") {
  ModelConfig cfg = desk_config();
  VtffModel model = VtffModel::build(cfg, 17);
  Dataset ds = tiny_dataset(1, 2, 16, 3);
  BatchInput batch = model.make_batch(std::span<const Image>(&ds.samples[0].image, 1));

  std::vector<Tensor> probed;
  Rng pick_rng(41);
  std::vector<Tensor> trainable;
  for (auto& [name, t] : model.params()) {
    if (t.requires_grad()) trainable.push_back(t);
  }
  for (int i = 0; i < 10; ++i) probed.push_back(trainable[pick_rng.index(trainable.size())]);

  double err = vtff::testing::grad_check(
      [&]() {
        ForwardResult result = model.forward(batch, Mode::kEval);
        return cross_entropy(softmax(result.logits[0], 0), 1);
      },
      probed, 1e-2f, 2, 55);
  CHECK(err < 1e-3);
}

TEST_CASE("training is deterministic and reduces the loss") {
  ModelConfig mcfg = desk_config();
  TrainConfig tcfg;
  tcfg.base_lr = 0.01f;
  tcfg.warmup_steps = 3;
  tcfg.total_steps = 12;
  tcfg.batch_size = 4;
  tcfg.seed = 5;
  Dataset ds = tiny_dataset(4, 2, 16, 9);

  VtffModel m1 = VtffModel::build(mcfg, 7);
  VtffModel m2 = VtffModel::build(mcfg, 7);
  auto log1 = train_model(m1, ds, tcfg);
  auto log2 = train_model(m2, ds, tcfg);
  REQUIRE(log1.size() == log2.size());
  REQUIRE(log1.size() == 12);
  for (size_t i = 0; i < log1.size(); ++i) {
    CHECK(log1[i].loss == log2[i].loss);
    CHECK(log1[i].lr == log2[i].lr);
  }

  double first = (log1[0].loss + log1[1].loss + log1[2].loss) / 3.0;
  double last = (log1[9].loss + log1[10].loss + log1[11].loss) / 3.0;
  CHECK(last < first);
}

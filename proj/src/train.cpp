#include "vtff/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <thread>

namespace vtff {

void TrainConfig::validate() const {
  if (base_lr <= 0.0f) throw std::invalid_argument("base_lr must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (warmup_steps < 0 || total_steps < 0 || warmup_steps > total_steps) {
    throw std::invalid_argument("warmup_steps must lie in [0, total_steps]");
  }
}

float lr_at(int step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) throw std::invalid_argument("step out of schedule range");
  if (step < cfg.warmup_steps) {
    return cfg.base_lr * static_cast<float>(step) / static_cast<float>(cfg.warmup_steps);
  }
  if (cfg.total_steps == cfg.warmup_steps) return cfg.base_lr;
  double progress = static_cast<double>(step - cfg.warmup_steps) /
                    static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  double lr = cfg.base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
  return static_cast<float>(std::max(lr, 0.0));
}

Tensor cross_entropy(const Tensor& probabilities, int label) {
  if (label < 0 || label >= probabilities.size()) {
    throw std::invalid_argument("cross_entropy label out of range");
  }
  Tensor p = pick(probabilities, label);
  // The additive floor keeps log() finite if a probability underflows to 0.
  return scale(log_elem(add_scalar(p, 1e-30f)), -1.0f);
}

void adam_step(ParamMap& params, AdamState& state, float lr, const TrainConfig& cfg) {
  state.step += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double corr1 = 1.0 - std::pow(b1, state.step);
  const double corr2 = 1.0 - std::pow(b2, state.step);
  for (auto& [name, param] : params) {
    if (!param.requires_grad()) continue;
    std::vector<float> grad = param.grad();
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.empty()) {
      m.assign(grad.size(), 0.0f);
      v.assign(grad.size(), 0.0f);
    } else if (m.size() != grad.size()) {
      throw std::invalid_argument("adam state shape mismatch for " + name);
    }
    auto data = param.data();
    for (size_t i = 0; i < grad.size(); ++i) {
      double g = grad[i];
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * g);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * g * g);
      double m_hat = m[i] / corr1;
      double v_hat = v[i] / corr2;
      data[i] -= static_cast<float>(lr * m_hat / (std::sqrt(v_hat) + cfg.adam_eps));
    }
    param.zero_grad();
  }
}

std::vector<size_t> oversample_indices(const std::vector<int>& labels, uint64_t seed) {
  if (labels.empty()) throw std::invalid_argument("oversample_indices: empty label list");
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  size_t max_count = 0;
  for (auto& [cls, idx] : by_class) max_count = std::max(max_count, idx.size());

  Rng rng(seed);
  std::vector<size_t> out;
  for (auto& [cls, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng.gen);
    for (size_t i = 0; i < max_count; ++i) out.push_back(idx[i % idx.size()]);
  }
  std::shuffle(out.begin(), out.end(), rng.gen);
  return out;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) out.push_back(s.label);
  return out;
}

EvalReport report_from_predictions(const std::vector<int>& predictions,
                                   const std::vector<int>& labels, int n_classes) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("prediction/label count mismatch");
  }
  EvalReport report;
  report.confusion.assign(static_cast<size_t>(n_classes),
                          std::vector<int64_t>(static_cast<size_t>(n_classes), 0));
  for (size_t i = 0; i < labels.size(); ++i) {
    report.confusion[static_cast<size_t>(labels[i])][static_cast<size_t>(predictions[i])] += 1;
  }
  int64_t correct = 0;
  double recall_sum = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    int64_t row_total = 0;
    for (int p = 0; p < n_classes; ++p) row_total += report.confusion[c][p];
    correct += report.confusion[c][c];
    if (row_total > 0) {
      recall_sum += static_cast<double>(report.confusion[c][c]) / row_total;
      ++present;
    }
  }
  report.overall_accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / labels.size();
  report.mean_class_accuracy = present > 0 ? recall_sum / present : 0.0;
  return report;
}

int env_thread_count() {
  const char* value = std::getenv("VTFF_THREADS");
  if (value == nullptr) return 1;
  int n = std::atoi(value);
  return n > 0 ? n : 1;
}

std::vector<int> predict_dataset(VtffModel& model, const Dataset& dataset) {
  std::vector<int> predictions(dataset.samples.size(), 0);
  int n_threads = std::min<int>(env_thread_count(), static_cast<int>(dataset.samples.size()));
  if (n_threads <= 1) {
    for (size_t i = 0; i < dataset.samples.size(); ++i) {
      predictions[i] = model.predict(dataset.samples[i].image);
    }
    return predictions;
  }
  std::vector<std::thread> workers;
  for (int t = 0; t < n_threads; ++t) {
    workers.emplace_back([&, t]() {
      for (size_t i = static_cast<size_t>(t); i < dataset.samples.size();
           i += static_cast<size_t>(n_threads)) {
        predictions[i] = model.predict(dataset.samples[i].image);
      }
    });
  }
  for (auto& w : workers) w.join();
  return predictions;
}

EvalReport evaluate(VtffModel& model, const Dataset& dataset) {
  if (dataset.samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  std::vector<int> predictions = predict_dataset(model, dataset);
  return report_from_predictions(predictions, dataset.labels(),
                                 static_cast<int>(model.config().encoder.n_classes));
}

double chi_square_sf_1dof(double x) { return std::erfc(std::sqrt(x / 2.0)); }

McNemarResult mcnemar_test(const std::vector<int>& preds_a, const std::vector<int>& preds_b,
                           const std::vector<int>& labels) {
  if (preds_a.size() != preds_b.size() || preds_a.size() != labels.size() || labels.empty()) {
    throw std::invalid_argument("mcnemar_test: input lengths must match and be >= 1");
  }
  McNemarResult result;
  for (size_t i = 0; i < labels.size(); ++i) {
    bool a_ok = preds_a[i] == labels[i];
    bool b_ok = preds_b[i] == labels[i];
    if (a_ok && !b_ok) ++result.b;
    if (!a_ok && b_ok) ++result.c;
  }
  int n = result.b + result.c;
  if (n == 0) {
    result.p_value = 1.0;
    return result;
  }
  if (n < 25) {
    // Exact two-sided binomial: 2 * sum_{k<=min(b,c)} C(n,k) / 2^n, capped at 1.
    int k_max = std::min(result.b, result.c);
    double tail = 0.0;
    double coef = 1.0;  // C(n,0)
    for (int k = 0; k <= k_max; ++k) {
      tail += coef;
      coef = coef * (n - k) / (k + 1);
    }
    result.p_value = std::min(1.0, 2.0 * tail * std::pow(0.5, n));
  } else {
    double diff = std::abs(result.b - result.c) - 1.0;
    double chi2 = diff * diff / n;
    result.p_value = chi_square_sf_1dof(chi2);
  }
  return result;
}

std::vector<TrainLogEntry> train_model(VtffModel& model, const Dataset& train_set,
                                       const TrainConfig& cfg, std::ostream* log_stream) {
  cfg.validate();
  if (train_set.samples.empty()) throw std::invalid_argument("train_model: empty dataset");

  std::vector<size_t> order;
  if (cfg.oversample) {
    order = oversample_indices(train_set.labels(), cfg.seed);
  } else {
    order.resize(train_set.samples.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(cfg.seed);
    std::shuffle(order.begin(), order.end(), rng.gen);
  }

  AdamState state;
  std::vector<TrainLogEntry> log;
  log.reserve(static_cast<size_t>(cfg.total_steps));
  size_t cursor = 0;
  Rng epoch_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);

  for (int step = 0; step < cfg.total_steps; ++step) {
    std::vector<Image> images;
    std::vector<int> labels;
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), epoch_rng.gen);
        cursor = 0;
      }
      const Sample& s = train_set.samples[order[cursor++]];
      images.push_back(s.image);
      labels.push_back(s.label);
    }

    float lr = lr_at(step, cfg);
    float loss_value = 0.0f;
    {
      Tape tape;
      BatchInput batch = model.make_batch(images);
      ForwardResult result = model.forward(batch, Mode::kTrain);
      Tensor loss = Tensor::zeros({1});
      for (size_t i = 0; i < result.logits.size(); ++i) {
        Tensor probs = softmax(result.logits[i], 0);
        loss = add(loss, cross_entropy(probs, labels[i]));
      }
      loss = scale(loss, 1.0f / static_cast<float>(cfg.batch_size));
      tape.backward(loss);
      loss_value = loss.item();
    }
    adam_step(model.params(), state, lr, cfg);

    log.push_back(TrainLogEntry{step, lr, loss_value});
    if (log_stream != nullptr) {
      (*log_stream) << step << ' ' << lr << ' ' << loss_value << '\n';
    }
  }
  return log;
}

AblationVariant ablation_variant_from_name(const std::string& name) {
  if (name == "baseline") return AblationVariant::kBaseline;
  if (name == "+lbp") return AblationVariant::kLbp;
  if (name == "+lbp+asf") return AblationVariant::kLbpAsf;
  if (name == "+mte") return AblationVariant::kMte;
  if (name == "+lbp+mte") return AblationVariant::kLbpMte;
  if (name == "full") return AblationVariant::kFull;
  if (name == "concat-fusion") return AblationVariant::kConcatFusion;
  throw std::invalid_argument("unknown ablation variant: " + name);
}

const char* ablation_variant_name(AblationVariant variant) {
  switch (variant) {
    case AblationVariant::kBaseline: return "baseline";
    case AblationVariant::kLbp: return "+lbp";
    case AblationVariant::kLbpAsf: return "+lbp+asf";
    case AblationVariant::kMte: return "+mte";
    case AblationVariant::kLbpMte: return "+lbp+mte";
    case AblationVariant::kFull: return "full";
    case AblationVariant::kConcatFusion: return "concat-fusion";
  }
  return "?";
}

std::vector<AblationVariant> all_ablation_variants() {
  return {AblationVariant::kBaseline, AblationVariant::kLbp,     AblationVariant::kLbpAsf,
          AblationVariant::kMte,      AblationVariant::kLbpMte,  AblationVariant::kFull,
          AblationVariant::kConcatFusion};
}

ModelConfig apply_variant(ModelConfig cfg, AblationVariant variant) {
  switch (variant) {
    case AblationVariant::kBaseline:
      cfg.use_lbp = false;
      cfg.use_encoder = false;
      cfg.fusion = FusionKind::kAdd;
      break;
    case AblationVariant::kLbp:
      cfg.use_lbp = true;
      cfg.use_encoder = false;
      cfg.fusion = FusionKind::kAdd;
      break;
    case AblationVariant::kLbpAsf:
      cfg.use_lbp = true;
      cfg.use_encoder = false;
      cfg.fusion = FusionKind::kAsf;
      break;
    case AblationVariant::kMte:
      cfg.use_lbp = false;
      cfg.use_encoder = true;
      cfg.fusion = FusionKind::kAdd;
      break;
    case AblationVariant::kLbpMte:
      cfg.use_lbp = true;
      cfg.use_encoder = true;
      cfg.fusion = FusionKind::kAdd;
      break;
    case AblationVariant::kFull:
      cfg.use_lbp = true;
      cfg.use_encoder = true;
      cfg.fusion = FusionKind::kAsf;
      break;
    case AblationVariant::kConcatFusion:
      cfg.use_lbp = false;
      cfg.use_encoder = true;
      cfg.fusion = FusionKind::kConcat;
      break;
  }
  return cfg;
}

AblationResult run_ablation(AblationVariant variant, const ModelConfig& model_cfg,
                            const TrainConfig& train_cfg, const Dataset& train_set,
                            const Dataset& eval_set, const std::vector<uint64_t>& seeds) {
  AblationResult result;
  result.variant = variant;
  ModelConfig cfg = apply_variant(model_cfg, variant);
  std::vector<double> accuracies;
  for (uint64_t seed : seeds) {
    VtffModel model = VtffModel::build(cfg, seed);
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    train_model(model, train_set, tc);
    EvalReport report = evaluate(model, eval_set);
    accuracies.push_back(report.overall_accuracy);
    result.per_seed.push_back(std::move(report));
  }
  double mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / accuracies.size();
  double var = 0.0;
  for (double a : accuracies) var += (a - mean) * (a - mean);
  var /= accuracies.size();
  result.mean_accuracy = mean;
  result.std_accuracy = std::sqrt(var);
  return result;
}

}  // namespace vtff

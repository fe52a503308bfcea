#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "vtff/model.hpp"

namespace vtff {

struct TrainConfig {
  float base_lr = 0.005f;
  int warmup_steps = 1000;
  int total_steps = 20000;
  int batch_size = 32;
  float adam_beta1 = 0.9f;
  float adam_beta2 = 0.999f;
  float adam_eps = 1e-8f;
  bool oversample = false;
  uint64_t seed = 0;

  void validate() const;
};

// Linear warmup to base_lr over warmup_steps, then cosine decay to 0 at
// total_steps.
float lr_at(int step, const TrainConfig& cfg);

// -log(p_label); expects probabilities from a (stabilized) softmax.
Tensor cross_entropy(const Tensor& probabilities, int label);

struct AdamState {
  int step = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

// One bias-corrected Adam update over all trainable parameters; consumes and
// clears the accumulated gradients.
void adam_step(ParamMap& params, AdamState& state, float lr, const TrainConfig& cfg);

// Replicate every class (deterministically shuffled, repeated cyclically) up
// to the majority count, then shuffle the combined index list.
std::vector<size_t> oversample_indices(const std::vector<int>& labels, uint64_t seed);

struct Sample {
  Image image;
  int label = 0;
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<Sample> samples;

  std::vector<int> labels() const;
};

struct EvalReport {
  double overall_accuracy = 0.0;
  double mean_class_accuracy = 0.0;
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]
};

EvalReport report_from_predictions(const std::vector<int>& predictions,
                                   const std::vector<int>& labels, int n_classes);

// Argmax predictions over the dataset; sample-parallel when VTFF_THREADS > 1.
EvalReport evaluate(VtffModel& model, const Dataset& dataset);
std::vector<int> predict_dataset(VtffModel& model, const Dataset& dataset);

struct McNemarResult {
  int b = 0;  // A correct, B wrong
  int c = 0;  // A wrong, B correct
  double p_value = 1.0;
};

// Exact two-sided binomial test for b+c < 25, else chi-square with
// continuity correction.
McNemarResult mcnemar_test(const std::vector<int>& preds_a, const std::vector<int>& preds_b,
                           const std::vector<int>& labels);

double chi_square_sf_1dof(double x);

struct TrainLogEntry {
  int step = 0;
  float lr = 0.0f;
  float loss = 0.0f;
};

// Runs the optimization loop; emits one "step lr loss" line per step to
// log_stream when given.
std::vector<TrainLogEntry> train_model(VtffModel& model, const Dataset& train_set,
                                       const TrainConfig& cfg, std::ostream* log_stream = nullptr);

enum class AblationVariant {
  kBaseline,      // RGB stream, pooled head
  kLbp,           // + LBP stream, elementwise-add fusion
  kLbpAsf,        // + ASF fusion
  kMte,           // RGB stream + encoder
  kLbpMte,        // LBP + add fusion + encoder
  kFull,          // LBP + ASF + encoder
  kConcatFusion,  // 4-channel input concat, single backbone, encoder
};

AblationVariant ablation_variant_from_name(const std::string& name);
const char* ablation_variant_name(AblationVariant variant);
std::vector<AblationVariant> all_ablation_variants();

ModelConfig apply_variant(ModelConfig cfg, AblationVariant variant);

struct AblationResult {
  AblationVariant variant;
  std::vector<EvalReport> per_seed;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

AblationResult run_ablation(AblationVariant variant, const ModelConfig& model_cfg,
                            const TrainConfig& train_cfg, const Dataset& train_set,
                            const Dataset& eval_set, const std::vector<uint64_t>& seeds);

int env_thread_count();  // VTFF_THREADS, default 1

}  // namespace vtff

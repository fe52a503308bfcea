#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vtff/io.hpp"

namespace fs = std::filesystem;

namespace {

vtff::RunConfig config_or_default(const std::string& config_path) {
  if (config_path.empty()) return vtff::default_run_config();
  return vtff::load_run_config(config_path);
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
  vtff::RunConfig cfg = config_or_default(config_path);
  vtff::Dataset data = vtff::load_dataset(data_dir);
  if (static_cast<int64_t>(data.class_names.size()) > cfg.model.encoder.n_classes) {
    throw std::runtime_error("dataset has more classes than n_classes in the config");
  }
  fs::create_directories(out_dir);
  std::ofstream log(fs::path(out_dir) / "log.txt");
  if (!log) throw std::runtime_error("cannot open training log for writing");

  vtff::VtffModel model = vtff::VtffModel::build(cfg.model, cfg.train.seed);
  vtff::train_model(model, data, cfg.train, &log);
  vtff::save_weights(model.params(), fs::path(out_dir) / "weights.vtff");
  std::cout << "wrote " << (fs::path(out_dir) / "weights.vtff").string() << "\n";
  return 0;
}

int run_eval(const std::string& config_path, const std::string& weights_path,
             const std::string& data_dir, const std::string& out_path) {
  vtff::RunConfig cfg = config_or_default(config_path);
  vtff::Dataset data = vtff::load_dataset(data_dir);
  vtff::VtffModel model = vtff::VtffModel::build(cfg.model, cfg.train.seed);
  vtff::load_weights(model.params(), weights_path);
  vtff::EvalReport report = vtff::evaluate(model, data);
  std::string text = vtff::eval_report_to_json(report, data.class_names);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    out << text << "\n";
  }
  std::cout << text << "\n";
  return 0;
}

int run_ablate(const std::string& config_path, const std::string& data_dir,
               const std::string& eval_dir, const std::vector<std::string>& variant_names,
               const std::vector<uint64_t>& seeds, const std::string& out_path) {
  vtff::RunConfig cfg = config_or_default(config_path);
  vtff::Dataset train_set = vtff::load_dataset(data_dir);
  vtff::Dataset eval_set = eval_dir.empty() ? train_set : vtff::load_dataset(eval_dir);

  std::vector<vtff::AblationVariant> variants;
  if (variant_names.empty()) {
    variants = vtff::all_ablation_variants();
  } else {
    for (const auto& name : variant_names) {
      variants.push_back(vtff::ablation_variant_from_name(name));
    }
  }

  std::ostringstream table;
  table << std::left << std::setw(16) << "variant" << "accuracy (mean +/- std over "
        << seeds.size() << " seeds)\n";
  for (auto variant : variants) {
    vtff::AblationResult result =
        vtff::run_ablation(variant, cfg.model, cfg.train, train_set, eval_set, seeds);
    table << std::left << std::setw(16) << vtff::ablation_variant_name(variant) << std::fixed
          << std::setprecision(4) << result.mean_accuracy << " +/- " << result.std_accuracy
          << "\n";
  }
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    out << table.str();
  }
  std::cout << table.str();
  return 0;
}

int run_attn(const std::string& config_path, const std::string& weights_path,
             const std::vector<std::string>& images, const std::string& out_dir, int upscale) {
  vtff::RunConfig cfg = config_or_default(config_path);
  if (!cfg.model.use_encoder) throw std::runtime_error("attn requires an encoder configuration");
  vtff::VtffModel model = vtff::VtffModel::build(cfg.model, cfg.train.seed);
  vtff::load_weights(model.params(), weights_path);
  fs::create_directories(out_dir);
  int64_t grid = cfg.model.grid_size();
  for (const auto& image_path : images) {
    vtff::Image img = vtff::read_netpbm(image_path);
    if (img.channels == 1) img = vtff::replicate3(img);
    vtff::AttentionMaps maps;
    model.predict_probabilities(img, &maps);
    vtff::Tensor rollout = vtff::attention_rollout(maps, grid, grid);
    fs::path out = fs::path(out_dir) / (fs::path(image_path).stem().string() + "_heatmap.pgm");
    vtff::export_heatmap(rollout, out, upscale);
    std::cout << "wrote " << out.string() << "\n";
  }
  return 0;
}

int run_mcnemar(const std::string& a_path, const std::string& b_path,
                const std::string& labels_path) {
  auto preds_a = vtff::load_prediction_file(a_path);
  auto preds_b = vtff::load_prediction_file(b_path);
  auto labels = vtff::load_prediction_file(labels_path);
  vtff::McNemarResult result = vtff::mcnemar_test(preds_a, preds_b, labels);
  std::cout << "b=" << result.b << " c=" << result.c << " p=" << std::setprecision(6)
            << result.p_value << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VTFF facial-expression recognition: training, evaluation and visualization"};
  app.require_subcommand(1);

  std::string config_path, data_dir, eval_dir, out_dir, out_path, weights_path;
  std::string a_path, b_path, labels_path;
  std::vector<std::string> images, variant_names;
  std::vector<uint64_t> seeds{1, 2, 3};
  int upscale = 32;

  auto* train = app.add_subcommand("train", "Train a model and write weights + log");
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--data", data_dir, "dataset root")->required();
  train->add_option("--out", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate weights on a dataset");
  eval->add_option("--config", config_path, "JSON config file");
  eval->add_option("--weights", weights_path, "weights file")->required();
  eval->add_option("--data", data_dir, "dataset root")->required();
  eval->add_option("--out", out_path, "report output file");

  auto* ablate = app.add_subcommand("ablate", "Run fusion/encoder ablation variants");
  ablate->add_option("--config", config_path, "JSON config file");
  ablate->add_option("--data", data_dir, "training dataset root")->required();
  ablate->add_option("--eval-data", eval_dir, "evaluation dataset root (default: training set)");
  ablate
      ->add_option("--variants", variant_names,
                   "subset of: baseline +lbp +lbp+asf +mte +lbp+mte full concat-fusion")
      ->delimiter(',');
  ablate->add_option("--seeds", seeds, "random seeds")->delimiter(',');
  ablate->add_option("--out", out_path, "table output file");

  auto* attn = app.add_subcommand("attn", "Export attention-rollout heatmaps");
  attn->add_option("--config", config_path, "JSON config file");
  attn->add_option("--weights", weights_path, "weights file")->required();
  attn->add_option("--images", images, "input images (P5/P6)")->required();
  attn->add_option("--out", out_dir, "output directory")->required();
  attn->add_option("--upscale", upscale, "nearest-neighbor upscale factor");

  auto* mcnemar = app.add_subcommand("mcnemar", "Compare two prediction files");
  mcnemar->add_option("--a", a_path, "predictions A (JSON int array)")->required();
  mcnemar->add_option("--b", b_path, "predictions B (JSON int array)")->required();
  mcnemar->add_option("--labels", labels_path, "labels (JSON int array)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return run_train(config_path, data_dir, out_dir);
    if (eval->parsed()) return run_eval(config_path, weights_path, data_dir, out_path);
    if (ablate->parsed()) {
      return run_ablate(config_path, data_dir, eval_dir, variant_names, seeds, out_path);
    }
    if (attn->parsed()) return run_attn(config_path, weights_path, images, out_dir, upscale);
    if (mcnemar->parsed()) return run_mcnemar(a_path, b_path, labels_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "vtff/io.hpp"

using namespace vtff;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("vtff_test_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

Image random_image(int h, int w, int c, uint64_t seed) {
  Rng rng(seed);
  Image img = make_image(h, w, c);
  for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.index(256));
  return img;
}

}  // namespace

TEST_CASE("netpbm round trips are bit exact") {
  TempDir dir;
  Image gray = random_image(5, 7, 1, 1);
  write_pgm(gray, dir.path / "g.pgm");
  Image gray_back = read_netpbm(dir.path / "g.pgm");
  CHECK(gray_back.channels == 1);
  CHECK(gray_back.pixels == gray.pixels);

  Image rgb = random_image(4, 6, 3, 2);
  write_ppm(rgb, dir.path / "c.ppm");
  Image rgb_back = read_netpbm(dir.path / "c.ppm");
  CHECK(rgb_back.channels == 3);
  CHECK(rgb_back.pixels == rgb.pixels);
}

TEST_CASE("netpbm rejects unsupported input") {
  TempDir dir;
  {
    std::ofstream out(dir.path / "bad.pgm", std::ios::binary);
    out << "P3\n1 1\n255\n0 0 0\n";
  }
  CHECK_THROWS(read_netpbm(dir.path / "bad.pgm"));
  CHECK_THROWS(read_netpbm(dir.path / "missing.pgm"));
}

TEST_CASE("class-directory manifest") {
  TempDir dir;
  fs::create_directories(dir.path / "angry");
  fs::create_directories(dir.path / "happy");
  write_pgm(random_image(4, 4, 1, 3), dir.path / "angry" / "a1.pgm");
  write_pgm(random_image(4, 4, 1, 4), dir.path / "angry" / "a2.pgm");
  write_ppm(random_image(4, 4, 3, 5), dir.path / "happy" / "h1.ppm");
  write_ppm(random_image(4, 4, 3, 6), dir.path / "happy" / "h2.ppm");
  write_ppm(random_image(4, 4, 3, 7), dir.path / "happy" / "h3.ppm");

  DatasetManifest manifest = load_manifest(dir.path);
  CHECK(manifest.class_names == std::vector<std::string>{"angry", "happy"});
  REQUIRE(manifest.samples.size() == 5);

  DatasetManifest again = load_manifest(dir.path);
  CHECK(again.class_names == manifest.class_names);
  CHECK(again.samples == manifest.samples);

  Dataset ds = load_dataset(dir.path);
  REQUIRE(ds.samples.size() == 5);
  CHECK(ds.samples[0].label == 0);
  CHECK(ds.samples[4].label == 1);
  // Grayscale files are widened to three channels on load.
  CHECK(ds.samples[0].image.channels == 3);
}

TEST_CASE("tsv manifest") {
  TempDir dir;
  write_pgm(random_image(4, 4, 1, 8), dir.path / "x.pgm");
  write_pgm(random_image(4, 4, 1, 9), dir.path / "y.pgm");
  {
    std::ofstream out(dir.path / "manifest.tsv");
    out << "y.pgm\t1\nx.pgm\t0\n";
  }
  DatasetManifest manifest = load_manifest(dir.path);
  REQUIRE(manifest.samples.size() == 2);
  CHECK(manifest.samples[0].first == "x.pgm");
  CHECK(manifest.samples[0].second == 0);
  CHECK(manifest.samples[1].second == 1);
}

TEST_CASE("empty dataset is an error") {
  TempDir dir;
  CHECK_THROWS(load_manifest(dir.path));
}

TEST_CASE("weights round trip is bit exact") {
  TempDir dir;
  Rng rng(10);
  ParamMap params;
  params.add("a.weight", rng.uniform_tensor({3, 4}, -1, 1).set_requires_grad(true));
  params.add("b.bias", rng.uniform_tensor({7}, -1, 1).set_requires_grad(true));
  params.add("c.running_mean", rng.uniform_tensor({2}, -1, 1));
  save_weights(params, dir.path / "w.vtff");

  ParamMap loaded;
  loaded.add("a.weight", Tensor::zeros({3, 4}));
  loaded.add("b.bias", Tensor::zeros({7}));
  loaded.add("c.running_mean", Tensor::zeros({2}));
  load_weights(loaded, dir.path / "w.vtff");
  for (auto& [name, t] : params) {
    auto& lt = loaded.at(name);
    REQUIRE(lt.shape() == t.shape());
    for (int64_t i = 0; i < t.size(); ++i) CHECK(lt.data()[i] == t.data()[i]);
  }
}

TEST_CASE("weight loading validates before applying anything") {
  TempDir dir;
  Rng rng(11);
  ParamMap params;
  params.add("p.weight", rng.uniform_tensor({2, 2}, -1, 1));
  save_weights(params, dir.path / "w.vtff");

  {
    // Truncate the file mid-payload.
    auto size = fs::file_size(dir.path / "w.vtff");
    fs::resize_file(dir.path / "w.vtff", size - 5);
    ParamMap target;
    target.add("p.weight", Tensor::full({2, 2}, 9.0f));
    CHECK_THROWS(load_weights(target, dir.path / "w.vtff"));
    for (int64_t i = 0; i < 4; ++i) CHECK(target.at("p.weight").data()[i] == 9.0f);
  }
  {
    save_weights(params, dir.path / "w2.vtff");
    ParamMap renamed;
    renamed.add("q.weight", Tensor::full({2, 2}, 9.0f));
    try {
      load_weights(renamed, dir.path / "w2.vtff");
      FAIL("expected a load error");
    } catch (const std::exception& e) {
      std::string msg = e.what();
      bool names_tensor = msg.find("p.weight") != std::string::npos ||
                          msg.find("q.weight") != std::string::npos;
      CHECK(names_tensor);
    }
  }
  {
    std::ofstream out(dir.path / "bad_magic.vtff", std::ios::binary);
    out << "NOPE";
    ParamMap target;
    target.add("p.weight", Tensor::zeros({2, 2}));
    CHECK_THROWS(load_weights(target, dir.path / "bad_magic.vtff"));
  }
}

TEST_CASE("heatmap export geometry and intensity ordering") {
  TempDir dir;
  {
    Rng rng(12);
    Tensor rollout = rng.uniform_tensor({7, 7}, 0, 1);
    export_heatmap(rollout, dir.path / "h.pgm", 32);
    Image img = read_netpbm(dir.path / "h.pgm");
    CHECK(img.height == 224);
    CHECK(img.width == 224);
  }
  {
    Tensor flat = Tensor::full({3, 3}, 0.5f);
    export_heatmap(flat, dir.path / "flat.pgm", 4);
    Image img = read_netpbm(dir.path / "flat.pgm");
    for (size_t i = 1; i < img.pixels.size(); ++i) CHECK(img.pixels[i] == img.pixels[0]);
  }
  {
    Tensor peak = Tensor::zeros({2, 2});
    peak.data()[3] = 1.0f;
    peak.data()[1] = 0.4f;
    export_heatmap(peak, dir.path / "peak.pgm", 3);
    Image img = read_netpbm(dir.path / "peak.pgm");
    // Bottom-right block must be the brightest.
    uint8_t bright = img.at(4, 4, 0);
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 6; ++x) {
        if (y >= 3 && x >= 3) {
          CHECK(img.at(y, x, 0) == bright);
        } else {
          CHECK(img.at(y, x, 0) < bright);
        }
      }
    }
  }
}

TEST_CASE("run config defaults and JSON overrides") {
  RunConfig defaults = default_run_config();
  CHECK(defaults.train.base_lr == doctest::Approx(0.005));
  CHECK(defaults.train.warmup_steps == 1000);
  CHECK(defaults.train.batch_size == 32);
  CHECK(defaults.model.encoder.n_layers == 4);
  CHECK(defaults.model.encoder.n_heads == 8);
  CHECK(defaults.model.encoder.embed_dim == 768);
  CHECK(defaults.model.encoder.mlp_hidden == 3072);
  CHECK(defaults.model.encoder.n_classes == 7);
  CHECK(defaults.model.reduction == 8);
  CHECK(defaults.model.backbone.downsampling_rate() == 32);
  CHECK(defaults.model.backbone.feature_channels() == 512);
  CHECK(defaults.model.fusion == FusionKind::kAsf);

  RunConfig cfg = parse_run_config(R"({
    "base_lr": 0.01, "warmup_steps": 5, "total_steps": 50, "batch_size": 4,
    "seed": 3, "oversample": true,
    "n_layers": 2, "n_heads": 2, "embed_dim": 16, "mlp_hidden": 32, "n_classes": 4,
    "stage_channels": [8, 16], "stage_strides": [2, 4],
    "reduction_ratio": 2, "fusion": "add", "eq6": "complementary", "image_size": 16
  })");
  CHECK(cfg.train.base_lr == doctest::Approx(0.01));
  CHECK(cfg.train.oversample);
  CHECK(cfg.train.seed == 3);
  CHECK(cfg.model.encoder.n_layers == 2);
  CHECK(cfg.model.backbone.stage_channels == std::vector<int64_t>{8, 16});
  CHECK(cfg.model.reduction == 2);
  CHECK(cfg.model.fusion == FusionKind::kAdd);
  CHECK(cfg.model.eq6 == FuseRule::kComplementary);
  CHECK(cfg.model.image_size == 16);

  CHECK_THROWS(parse_run_config(R"({"fusion": "banana"})"));
  CHECK_THROWS(parse_run_config("not json"));
}

TEST_CASE("eval report serialization and prediction files") {
  TempDir dir;
  EvalReport report;
  report.overall_accuracy = 0.75;
  report.mean_class_accuracy = 0.5;
  report.confusion = {{3, 1}, {0, 2}};
  std::string json = eval_report_to_json(report, {"angry", "happy"});
  CHECK(json.find("overall_accuracy") != std::string::npos);
  CHECK(json.find("mean_class_accuracy") != std::string::npos);
  CHECK(json.find("confusion_matrix") != std::string::npos);
  CHECK(json.find("angry") != std::string::npos);

  {
    std::ofstream out(dir.path / "preds.json");
    out << "[0, 2, 1, 1]";
  }
  auto preds = load_prediction_file(dir.path / "preds.json");
  CHECK(preds == std::vector<int>{0, 2, 1, 1});
}

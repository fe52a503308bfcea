#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vtff/model.hpp"
#include "vtff/train.hpp"

namespace vtff {

// Binary netpbm only: P5 (grayscale) and P6 (RGB), maxval 255.
Image read_netpbm(const std::filesystem::path& path);
void write_pgm(const Image& img, const std::filesystem::path& path);
void write_ppm(const Image& img, const std::filesystem::path& path);

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<std::string> class_names;
  std::vector<std::pair<std::filesystem::path, int>> samples;  // relative path, label
};

// Either <root>/<class>/*.pgm|*.ppm (class names sorted lexicographically) or
// <root>/manifest.tsv with "path<TAB>label" lines. Sample order is
// lexicographic by path.
DatasetManifest load_manifest(const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

// "VTFF" container: magic, u32 version, u64 entry count, then per entry
// u32 name length, name bytes, u32 rank, u64 dims, f32 data. Little-endian.
void save_weights(const ParamMap& params, const std::filesystem::path& path);

// Validates names and shapes against the model's parameters before applying
// anything; a bad file leaves the model untouched.
void load_weights(ParamMap& params, const std::filesystem::path& path);

// Nearest-neighbor upscale of a [0,1] map to an 8-bit grayscale P5 file.
void export_heatmap(const Tensor& rollout, const std::filesystem::path& path, int upscale);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

RunConfig default_run_config();
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

std::string eval_report_to_json(const EvalReport& report, const std::vector<std::string>& classes);
std::vector<int> load_prediction_file(const std::filesystem::path& path);  // JSON int array

}  // namespace vtff

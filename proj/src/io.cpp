#include "vtff/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace vtff {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int next_pnm_token(std::istream& in, std::string& token) {
  token.clear();
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!token.empty()) return 0;
      continue;
    }
    token.push_back(static_cast<char>(ch));
  }
  return token.empty() ? -1 : 0;
}

int parse_pnm_int(std::istream& in, const fs::path& path) {
  std::string token;
  if (next_pnm_token(in, token) != 0) {
    throw std::runtime_error("truncated netpbm header: " + path.string());
  }
  return std::stoi(token);
}

template <class T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<unsigned char>((static_cast<uint64_t>(value) >> (8 * i)) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read_le(std::istream& in, const fs::path& path) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("truncated weights file: " + path.string());
  uint64_t value = 0;
  for (size_t i = 0; i < sizeof(T); ++i) value |= static_cast<uint64_t>(bytes[i]) << (8 * i);
  return static_cast<T>(value);
}

}  // namespace

Image read_netpbm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path.string());
  std::string magic;
  if (next_pnm_token(in, magic) != 0 || (magic != "P5" && magic != "P6")) {
    throw std::runtime_error("unsupported image format (want binary P5/P6): " + path.string());
  }
  int channels = magic == "P5" ? 1 : 3;
  int width = parse_pnm_int(in, path);
  int height = parse_pnm_int(in, path);
  int maxval = parse_pnm_int(in, path);
  if (maxval != 255) throw std::runtime_error("only maxval 255 supported: " + path.string());
  Image img = make_image(height, width, channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw std::runtime_error("truncated pixel data: " + path.string());
  return img;
}

namespace {
void write_pnm(const Image& img, const fs::path& path, const char* magic) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write image: " + path.string());
  out << magic << "\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}
}  // namespace

void write_pgm(const Image& img, const fs::path& path) {
  if (img.channels != 1) throw std::invalid_argument("write_pgm expects a 1-channel image");
  write_pnm(img, path, "P5");
}

void write_ppm(const Image& img, const fs::path& path) {
  if (img.channels != 3) throw std::invalid_argument("write_ppm expects a 3-channel image");
  write_pnm(img, path, "P6");
}

DatasetManifest load_manifest(const fs::path& root) {
  DatasetManifest manifest;
  manifest.root = root;
  fs::path manifest_file = root / "manifest.tsv";
  if (fs::exists(manifest_file)) {
    std::ifstream in(manifest_file);
    if (!in) throw std::runtime_error("cannot read " + manifest_file.string());
    std::string line;
    int max_label = -1;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw std::runtime_error("manifest line missing tab separator: " + line);
      }
      fs::path rel = line.substr(0, tab);
      int label = std::stoi(line.substr(tab + 1));
      if (label < 0) throw std::runtime_error("negative label in manifest");
      manifest.samples.emplace_back(rel, label);
      max_label = std::max(max_label, label);
    }
    for (int c = 0; c <= max_label; ++c) manifest.class_names.push_back("class" + std::to_string(c));
  } else {
    std::vector<std::string> classes;
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.is_directory()) classes.push_back(entry.path().filename().string());
    }
    std::sort(classes.begin(), classes.end());
    manifest.class_names = classes;
    for (size_t c = 0; c < classes.size(); ++c) {
      for (const auto& entry : fs::directory_iterator(root / classes[c])) {
        auto ext = entry.path().extension().string();
        if (ext == ".pgm" || ext == ".ppm") {
          manifest.samples.emplace_back(fs::path(classes[c]) / entry.path().filename(),
                                        static_cast<int>(c));
        }
      }
    }
  }
  std::sort(manifest.samples.begin(), manifest.samples.end(),
            [](const auto& a, const auto& b) { return a.first.string() < b.first.string(); });
  if (manifest.samples.empty()) throw std::runtime_error("empty dataset: " + root.string());
  for (const auto& [rel, label] : manifest.samples) {
    if (!fs::exists(root / rel)) throw std::runtime_error("missing file: " + (root / rel).string());
  }
  return manifest;
}

Dataset load_dataset(const fs::path& root) {
  DatasetManifest manifest = load_manifest(root);
  Dataset dataset;
  dataset.class_names = manifest.class_names;
  for (const auto& [rel, label] : manifest.samples) {
    fs::path full = manifest.root / rel;
    Image img;
    try {
      img = read_netpbm(full);
    } catch (const std::exception& e) {
      throw std::runtime_error("failed to load " + full.string() + ": " + e.what());
    }
    if (img.channels == 1) img = replicate3(img);
    dataset.samples.push_back(Sample{std::move(img), label});
  }
  return dataset;
}

void save_weights(const ParamMap& params, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write weights: " + path.string());
  out.write("VTFF", 4);
  write_le<uint32_t>(out, 1);  // format version
  write_le<uint64_t>(out, params.size());
  for (const auto& [name, tensor] : params) {
    write_le<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<uint32_t>(out, static_cast<uint32_t>(tensor.shape().size()));
    for (int64_t d : tensor.shape()) write_le<uint64_t>(out, static_cast<uint64_t>(d));
    for (float v : tensor.data()) {
      uint32_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      write_le<uint32_t>(out, bits);
    }
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void load_weights(ParamMap& params, const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read weights: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "VTFF", 4) != 0) {
    throw std::runtime_error("bad magic in weights file: " + path.string());
  }
  uint32_t version = read_le<uint32_t>(in, path);
  if (version != 1) throw std::runtime_error("unsupported weights version");
  uint64_t count = read_le<uint64_t>(in, path);

  // Parse and validate everything before touching the model.
  std::map<std::string, std::pair<Shape, std::vector<float>>> entries;
  for (uint64_t e = 0; e < count; ++e) {
    uint32_t name_len = read_le<uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw std::runtime_error("truncated weights file: " + path.string());
    uint32_t rank = read_le<uint32_t>(in, path);
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) {
      shape[d] = static_cast<int64_t>(read_le<uint64_t>(in, path));
    }
    int64_t n = numel(shape);
    std::vector<float> data(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      uint32_t bits = read_le<uint32_t>(in, path);
      std::memcpy(&data[static_cast<size_t>(i)], &bits, sizeof(bits));
    }
    if (!entries.emplace(name, std::make_pair(std::move(shape), std::move(data))).second) {
      throw std::runtime_error("duplicate tensor name in weights file: " + name);
    }
  }
  for (const auto& [name, tensor] : params) {
    auto it = entries.find(name);
    if (it == entries.end()) throw std::runtime_error("weights file missing tensor: " + name);
    if (it->second.first != tensor.shape()) {
      throw std::runtime_error("shape mismatch for tensor " + name + ": file " +
                               shape_str(it->second.first) + ", model " +
                               shape_str(tensor.shape()));
    }
  }
  for (const auto& [name, entry] : entries) {
    if (!params.contains(name)) {
      throw std::runtime_error("weights file has unknown tensor: " + name);
    }
  }
  for (auto& [name, tensor] : params) {
    const auto& data = entries.at(name).second;
    std::copy(data.begin(), data.end(), tensor.data().begin());
  }
}

void export_heatmap(const Tensor& rollout, const fs::path& path, int upscale) {
  if (rollout.rank() != 2) throw std::invalid_argument("export_heatmap expects a [H,W] map");
  if (upscale < 1) throw std::invalid_argument("export_heatmap upscale must be >= 1");
  int64_t h = rollout.dim(0), w = rollout.dim(1);
  Image img = make_image(static_cast<int>(h * upscale), static_cast<int>(w * upscale), 1);
  auto data = rollout.data();
  for (int64_t y = 0; y < h * upscale; ++y) {
    for (int64_t x = 0; x < w * upscale; ++x) {
      float v = data[static_cast<size_t>((y / upscale) * w + (x / upscale))];
      int byte = static_cast<int>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
      img.at(static_cast<int>(y), static_cast<int>(x), 0) = static_cast<uint8_t>(byte);
    }
  }
  write_pgm(img, path);
}

RunConfig default_run_config() {
  RunConfig cfg;
  cfg.model.backbone.stage_channels = {32, 64, 128, 256, 512};
  cfg.model.backbone.stage_strides = {2, 2, 2, 2, 2};
  cfg.model.backbone.blocks_per_stage = 1;
  cfg.model.encoder = EncoderConfig{};  // N_l=4, N_h=8, C_p=768, mlp 3072, M=7
  cfg.model.reduction = 8;
  cfg.model.image_size = 224;
  cfg.train = TrainConfig{};  // lr 0.005, warmup 1000, batch 32
  return cfg;
}

RunConfig parse_run_config(const std::string& json_text) {
  RunConfig cfg = default_run_config();
  json j = json::parse(json_text);
  auto& m = cfg.model;
  auto& t = cfg.train;
  if (j.contains("base_lr")) t.base_lr = j["base_lr"].get<float>();
  if (j.contains("warmup_steps")) t.warmup_steps = j["warmup_steps"].get<int>();
  if (j.contains("total_steps")) t.total_steps = j["total_steps"].get<int>();
  if (j.contains("batch_size")) t.batch_size = j["batch_size"].get<int>();
  if (j.contains("seed")) t.seed = j["seed"].get<uint64_t>();
  if (j.contains("oversample")) t.oversample = j["oversample"].get<bool>();
  if (j.contains("n_layers")) m.encoder.n_layers = j["n_layers"].get<int>();
  if (j.contains("n_heads")) m.encoder.n_heads = j["n_heads"].get<int>();
  if (j.contains("embed_dim")) m.encoder.embed_dim = j["embed_dim"].get<int64_t>();
  if (j.contains("mlp_hidden")) m.encoder.mlp_hidden = j["mlp_hidden"].get<int64_t>();
  if (j.contains("n_classes")) m.encoder.n_classes = j["n_classes"].get<int64_t>();
  if (j.contains("stage_channels")) {
    m.backbone.stage_channels = j["stage_channels"].get<std::vector<int64_t>>();
  }
  if (j.contains("stage_strides")) {
    m.backbone.stage_strides = j["stage_strides"].get<std::vector<int>>();
  }
  if (j.contains("blocks_per_stage")) m.backbone.blocks_per_stage = j["blocks_per_stage"].get<int>();
  if (j.contains("reduction_ratio")) m.reduction = j["reduction_ratio"].get<int>();
  if (j.contains("image_size")) m.image_size = j["image_size"].get<int>();
  if (j.contains("use_lbp")) m.use_lbp = j["use_lbp"].get<bool>();
  if (j.contains("use_encoder")) m.use_encoder = j["use_encoder"].get<bool>();
  if (j.contains("fusion")) {
    std::string f = j["fusion"].get<std::string>();
    if (f == "asf") m.fusion = FusionKind::kAsf;
    else if (f == "add") m.fusion = FusionKind::kAdd;
    else if (f == "concat") m.fusion = FusionKind::kConcat;
    else throw std::runtime_error("fusion must be one of asf|add|concat");
  }
  if (j.contains("eq6")) {
    std::string e = j["eq6"].get<std::string>();
    if (e == "literal") m.eq6 = FuseRule::kLiteral;
    else if (e == "complementary") m.eq6 = FuseRule::kComplementary;
    else throw std::runtime_error("eq6 must be literal or complementary");
  }
  m.validate();
  t.validate();
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string eval_report_to_json(const EvalReport& report, const std::vector<std::string>& classes) {
  json j;
  j["overall_accuracy"] = report.overall_accuracy;
  j["mean_class_accuracy"] = report.mean_class_accuracy;
  j["confusion_matrix"] = report.confusion;
  j["class_names"] = classes;
  return j.dump(2);
}

std::vector<int> load_prediction_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read predictions: " + path.string());
  json j = json::parse(in);
  return j.get<std::vector<int>>();
}

}  // namespace vtff

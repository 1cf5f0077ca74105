// Weight manifest: JSON listing of (name, shape, dtype, byte offset) plus a
// flat little-endian FP32 tensor file, row-major.

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>

#include "dpllm/model.hpp"
#include "json.hpp"

namespace dpllm {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

using json = nlohmann::json;

struct TensorRef {
  std::string name;
  std::size_t rows;
  std::size_t cols;  // 1 for vectors
  std::function<double*()> data;
};

std::vector<TensorRef> tensor_list(ModelWeights& w) {
  const auto& cfg = w.config;
  std::vector<TensorRef> refs;
  refs.push_back({"embedding", cfg.vocab, cfg.d_model, [&w] { return w.embedding.data(); }});
  for (std::uint32_t b = 0; b < cfg.n_blocks; ++b) {
    const std::string prefix = "blocks." + std::to_string(b) + ".";
    refs.push_back({prefix + "attn_norm", cfg.d_model, 1, [&w, b] { return w.blocks[b].attn_norm.data(); }});
    refs.push_back({prefix + "mlp_norm", cfg.d_model, 1, [&w, b] { return w.blocks[b].mlp_norm.data(); }});
    for (LayerKind k : kLayerKinds) {
      const auto shape = layer_shape(cfg, k);
      const LayerId id{b, k};
      refs.push_back({id.name(), shape.rows, shape.cols, [&w, id] { return w.linear(id).data(); }});
    }
  }
  refs.push_back({"final_norm", cfg.d_model, 1, [&w] { return w.final_norm.data(); }});
  refs.push_back({"lm_head", cfg.vocab, cfg.d_model, [&w] { return w.lm_head.data(); }});
  return refs;
}

json config_to_json(const ModelConfig& c) {
  return json{{"n_blocks", c.n_blocks}, {"d_model", c.d_model}, {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},         {"vocab", c.vocab},     {"seq_cap", c.seq_cap},
              {"norm_eps", c.norm_eps}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_blocks = j.at("n_blocks").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.seq_cap = j.at("seq_cap").get<std::size_t>();
  c.norm_eps = j.at("norm_eps").get<double>();
  return c;
}

void allocate(ModelWeights& w) {
  const auto& cfg = w.config;
  w.embedding = Matrix(cfg.vocab, cfg.d_model);
  w.blocks.assign(cfg.n_blocks, {});
  for (auto& bw : w.blocks) {
    bw.attn_norm.assign(cfg.d_model, 0.0);
    bw.mlp_norm.assign(cfg.d_model, 0.0);
    for (LayerKind k : kLayerKinds) {
      const auto shape = layer_shape(cfg, k);
      bw.linear[static_cast<std::size_t>(k)] = Matrix(shape.rows, shape.cols);
    }
  }
  w.final_norm.assign(cfg.d_model, 0.0);
  w.lm_head = Matrix(cfg.vocab, cfg.d_model);
}

std::filesystem::path data_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

}  // namespace

void export_weights(const ModelWeights& weights, const std::filesystem::path& manifest_path) {
  auto& w = const_cast<ModelWeights&>(weights);  // tensor_list hands out mutable pointers; read-only here
  const auto refs = tensor_list(w);
  json tensors = json::array();
  std::vector<std::uint8_t> blob;
  for (const auto& ref : refs) {
    const std::size_t n = ref.rows * ref.cols;
    json shape = ref.cols == 1 ? json::array({ref.rows}) : json::array({ref.rows, ref.cols});
    tensors.push_back({{"name", ref.name}, {"shape", shape}, {"dtype", "f32"}, {"offset", blob.size()}});
    const double* src = ref.data();
    const std::size_t at = blob.size();
    blob.resize(at + n * sizeof(float));
    for (std::size_t i = 0; i < n; ++i) {
      const auto f = static_cast<float>(src[i]);
      std::memcpy(blob.data() + at + i * sizeof(float), &f, sizeof(float));
    }
  }
  const auto data_path = data_path_for(manifest_path);
  json manifest{{"format", "dpllm-weights"},
                {"version", 1},
                {"config", config_to_json(weights.config)},
                {"data_file", data_path.filename().string()},
                {"data_bytes", blob.size()},
                {"tensors", tensors}};
  write_file_bytes(data_path, blob);
  const std::string text = manifest.dump(2) + "\n";
  write_file_bytes(manifest_path,
                   {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

ModelWeights load_weights(const std::filesystem::path& manifest_path) {
  json manifest;
  {
    std::ifstream in(manifest_path);
    if (!in) {
      throw IoError("cannot open weight manifest " + manifest_path.string());
    }
    try {
      in >> manifest;
    } catch (const json::exception& e) {
      throw IoError("malformed weight manifest " + manifest_path.string() + ": " + e.what());
    }
  }
  if (manifest.value("format", "") != "dpllm-weights") {
    throw IoError(manifest_path.string() + " is not a dpllm weight manifest");
  }
  ModelWeights w;
  try {
    w.config = config_from_json(manifest.at("config"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("weight manifest config: ") + e.what());
  }
  w.config.validate();
  allocate(w);

  const auto data_path = manifest_path.parent_path() / manifest.at("data_file").get<std::string>();
  const auto blob = read_file_bytes(data_path);

  std::map<std::string, const json*> entries;
  for (const auto& t : manifest.at("tensors")) {
    entries[t.at("name").get<std::string>()] = &t;
  }
  for (const auto& ref : tensor_list(w)) {
    const auto it = entries.find(ref.name);
    if (it == entries.end()) {
      throw ShapeError("weight manifest is missing tensor '" + ref.name + "'");
    }
    const json& t = *it->second;
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    const std::vector<std::size_t> want =
        ref.cols == 1 ? std::vector<std::size_t>{ref.rows} : std::vector<std::size_t>{ref.rows, ref.cols};
    if (shape != want) {
      std::string got, expect;
      for (auto s : shape) got += (got.empty() ? "" : "x") + std::to_string(s);
      for (auto s : want) expect += (expect.empty() ? "" : "x") + std::to_string(s);
      throw ShapeError("tensor '" + ref.name + "' has shape " + got + ", config expects " + expect);
    }
    if (t.value("dtype", "") != "f32") {
      throw ShapeError("tensor '" + ref.name + "' has unsupported dtype");
    }
    const auto offset = t.at("offset").get<std::size_t>();
    const std::size_t n = ref.rows * ref.cols;
    if (offset + n * sizeof(float) > blob.size()) {
      throw IoError("tensor file " + data_path.string() + " is truncated (tensor '" + ref.name + "')");
    }
    double* dst = ref.data();
    for (std::size_t i = 0; i < n; ++i) {
      float f;
      std::memcpy(&f, blob.data() + offset + i * sizeof(float), sizeof(float));
      dst[i] = static_cast<double>(f);
    }
  }
  return w;
}

}  // namespace dpllm

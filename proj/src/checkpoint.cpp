#include "etd/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace etd {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

ordered_json provenance_to_json(const Provenance& p) {
  ordered_json j;
  j["config_hash"] = p.config_hash;
  j["seed"] = p.seed;
  j["tool_version"] = p.tool_version;
  return j;
}

Provenance provenance_from_json(const json& j) {
  Provenance p;
  p.config_hash = j.value("config_hash", "");
  p.seed = j.value("seed", 0ull);
  p.tool_version = j.value("tool_version", "");
  return p;
}

ordered_json config_to_json(const ModelConfig& c) {
  ordered_json j;
  j["layers"] = c.layers;
  j["hidden"] = c.hidden;
  j["heads"] = c.heads;
  j["head_dim"] = c.head_dim;
  j["ffn"] = c.ffn;
  j["vocab"] = c.vocab;
  j["max_seq_len"] = c.max_seq_len;
  j["layer_norm_eps"] = c.layer_norm_eps;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.layers = j.at("layers").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.heads = j.at("heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.layer_norm_eps = j.value("layer_norm_eps", 1e-12);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

namespace {

std::string blob_path_for(const std::string& manifest_path) {
  fs::path p(manifest_path);
  p.replace_extension(".bin");
  return p.string();
}

}  // namespace

void save_tensor_file(const std::string& manifest_path, const std::string& kind,
                      const ordered_json& meta, const std::vector<NamedTensor>& tensors,
                      const Provenance& prov) {
  const std::string blob_path = blob_path_for(manifest_path);

  ordered_json manifest;
  manifest["format"] = "etd-tensor-file-v1";
  manifest["kind"] = kind;
  manifest["provenance"] = provenance_to_json(prov);
  if (!meta.is_null()) manifest["meta"] = meta;
  manifest["blob"] = fs::path(blob_path).filename().string();

  ordered_json index = ordered_json::array();
  std::uint64_t offset = 0;
  for (const NamedTensor& nt : tensors) {
    check_finite(nt.tensor, "save " + nt.name);
    ordered_json e;
    e["name"] = nt.name;
    e["shape"] = nt.tensor.shape();
    e["offset"] = offset;
    index.push_back(std::move(e));
    offset += static_cast<std::uint64_t>(nt.tensor.numel()) * 4;
  }
  manifest["tensors"] = std::move(index);

  {
    std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + manifest_path);
    out << manifest.dump(2) << "\n";
  }
  {
    std::ofstream out(blob_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + blob_path);
    std::vector<float> buf;
    for (const NamedTensor& nt : tensors) {
      buf.resize(nt.tensor.data().size());
      for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(nt.tensor.data()[i]);
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw IoError("short write to " + blob_path);
  }
}

const Tensor& TensorFile::get(const std::string& name) const {
  for (const NamedTensor& nt : tensors) {
    if (nt.name == name) return nt.tensor;
  }
  throw IoError("tensor '" + name + "' missing from file");
}

TensorFile load_tensor_file(const std::string& manifest_path) {
  std::ifstream in(manifest_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + manifest_path);
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(manifest_path + ": " + e.what());
  }

  TensorFile out;
  out.kind = manifest.value("kind", "");
  if (manifest.contains("meta")) out.meta = manifest["meta"];
  if (manifest.contains("provenance")) out.provenance = provenance_from_json(manifest["provenance"]);

  const std::string blob_name =
      manifest.value("blob", fs::path(blob_path_for(manifest_path)).filename().string());
  const fs::path blob = fs::path(manifest_path).parent_path() / blob_name;
  std::ifstream bin(blob, std::ios::binary);
  if (!bin) throw IoError("cannot open blob " + blob.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  try {
    for (const json& e : manifest.at("tensors")) {
      Shape shape = e.at("shape").get<Shape>();
      const std::uint64_t offset = e.at("offset").get<std::uint64_t>();
      const std::uint64_t count = static_cast<std::uint64_t>(shape_numel(shape));
      if (offset + count * 4 > bytes.size()) {
        throw IoError("blob " + blob.string() + " too short for tensor " + e.at("name").get<std::string>());
      }
      std::vector<double> data(count);
      const float* fp = reinterpret_cast<const float*>(bytes.data() + offset);
      for (std::uint64_t i = 0; i < count; ++i) data[i] = static_cast<double>(fp[i]);
      out.tensors.push_back(NamedTensor{e.at("name").get<std::string>(),
                                        Tensor::from(std::move(shape), std::move(data))});
    }
  } catch (const json::exception& e) {
    throw IoError(manifest_path + ": bad tensor index: " + e.what());
  }
  return out;
}

void save_model(const std::string& manifest_path, const ModelConfig& config,
                const TransformerWeights& weights, const Provenance& prov) {
  std::vector<NamedTensor> tensors;
  for (auto& [name, t] : weights.named_parameters()) tensors.push_back(NamedTensor{name, t});
  ordered_json meta;
  meta["config"] = config_to_json(config);
  save_tensor_file(manifest_path, "model", meta, tensors, prov);
}

LoadedModel load_model(const std::string& manifest_path) {
  TensorFile file = load_tensor_file(manifest_path);
  if (file.kind != "model") throw IoError(manifest_path + ": not a model checkpoint");
  LoadedModel out;
  out.config = config_from_json(file.meta.at("config"));
  out.provenance = file.provenance;

  // shape-checked reassembly in canonical order
  TransformerWeights w = init_weights(out.config, 0);
  for (auto& [name, t] : w.named_parameters()) {
    const Tensor& src = file.get(name);
    if (src.shape() != t.shape()) {
      throw IoError(manifest_path + ": tensor " + name + " has shape " + shape_str(src.shape()) +
                    ", expected " + shape_str(t.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), t.data().begin());
  }
  out.weights = std::move(w);
  return out;
}

}  // namespace etd

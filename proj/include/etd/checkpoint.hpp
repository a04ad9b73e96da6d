#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "etd/tensor.hpp"
#include "etd/transformer.hpp"

namespace etd {

inline constexpr const char* kToolVersion = "0.1.0";

// Every output file carries these three fields.
struct Provenance {
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string tool_version = kToolVersion;
};

std::string fnv1a_hex(const std::string& s);

nlohmann::ordered_json provenance_to_json(const Provenance& p);
Provenance provenance_from_json(const nlohmann::json& j);

nlohmann::ordered_json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Container format: a JSON manifest naming each tensor (name, shape, byte
// offset) next to a binary blob of little-endian float32 row-major arrays.
// The blob lives beside the manifest with extension ".bin".
void save_tensor_file(const std::string& manifest_path, const std::string& kind,
                      const nlohmann::ordered_json& meta, const std::vector<NamedTensor>& tensors,
                      const Provenance& prov);

struct TensorFile {
  std::string kind;
  nlohmann::json meta;
  Provenance provenance;
  std::vector<NamedTensor> tensors;

  const Tensor& get(const std::string& name) const;  // throws IoError if absent
};
TensorFile load_tensor_file(const std::string& manifest_path);

void save_model(const std::string& manifest_path, const ModelConfig& config,
                const TransformerWeights& weights, const Provenance& prov);

struct LoadedModel {
  ModelConfig config;
  TransformerWeights weights;
  Provenance provenance;
};
LoadedModel load_model(const std::string& manifest_path);

}  // namespace etd

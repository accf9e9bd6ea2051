#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "affmtl/layers.hpp"

namespace affmtl {

// Parameter container layout (all integers little-endian):
//   u32 format version
//   u32 header length, UTF-8 JSON header (architecture, seed, provenance, ...)
//   u64 tensor count
//   per tensor: u32 name length, UTF-8 name, u32 rank, rank x u64 extents,
//               numel x f64 values (row-major)
inline constexpr std::uint32_t kParamFormatVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct ParamFile {
  std::uint32_t version = kParamFormatVersion;
  nlohmann::json header;
  std::vector<StoredTensor> tensors;
};

std::string encode_param_file(const nlohmann::json& header, const std::vector<NamedParam>& params);
ParamFile decode_param_file(std::string_view bytes, const std::string& source = "<memory>");

void save_param_file(const std::filesystem::path& path, const nlohmann::json& header,
                     const std::vector<NamedParam>& params);
ParamFile load_param_file(const std::filesystem::path& path);

nlohmann::json arch_to_json(const ArchSpec& spec);
ArchSpec arch_from_json(const nlohmann::json& j);

// Rebuilds a model from a decoded file; every parameter must be present.
Model model_from_param_file(const ParamFile& file);

}  // namespace affmtl

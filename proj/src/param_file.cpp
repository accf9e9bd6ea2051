#include "affmtl/param_file.hpp"

#include "affmtl/binary_io.hpp"
#include "affmtl/errors.hpp"

namespace affmtl {

std::string encode_param_file(const nlohmann::json& header, const std::vector<NamedParam>& params) {
  BinaryWriter w;
  w.u32(kParamFormatVersion);
  w.string(header.dump());
  w.u64(params.size());
  for (const auto& p : params) {
    w.string(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) w.u64(e);
    for (double v : p.tensor.values()) w.f64(v);
  }
  return w.bytes();
}

ParamFile decode_param_file(std::string_view bytes, const std::string& source) {
  BinaryReader r(bytes, source);
  ParamFile f;
  f.version = r.u32();
  if (f.version != kParamFormatVersion)
    throw IoError(source + ": unsupported parameter format version " + std::to_string(f.version));
  try {
    f.header = nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(source + ": bad header: " + e.what());
  }
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.string();
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) t.shape.push_back(r.u64());
    t.values.resize(numel(t.shape));
    for (auto& v : t.values) v = r.f64();
    f.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw IoError(source + ": trailing bytes after last tensor");
  return f;
}

void save_param_file(const std::filesystem::path& path, const nlohmann::json& header,
                     const std::vector<NamedParam>& params) {
  write_file_atomic(path, encode_param_file(header, params));
}

ParamFile load_param_file(const std::filesystem::path& path) {
  return decode_param_file(read_file(path), path.string());
}

nlohmann::json arch_to_json(const ArchSpec& s) {
  return {{"input_dim", s.input_dim},
          {"feature_dim", s.feature_dim},
          {"encoder_hidden", s.encoder_hidden},
          {"leaky_slope", s.leaky_slope},
          {"fusion", s.fusion},
          {"fusion_passthrough", s.fusion_passthrough},
          {"dropout", s.dropout},
          {"temporal", s.temporal},
          {"temporal_heads", s.temporal_heads.to_string()}};
}

ArchSpec arch_from_json(const nlohmann::json& j) {
  try {
    ArchSpec s;
    s.input_dim = j.at("input_dim").get<std::size_t>();
    s.feature_dim = j.at("feature_dim").get<std::size_t>();
    s.encoder_hidden = j.at("encoder_hidden").get<std::size_t>();
    s.leaky_slope = j.at("leaky_slope").get<double>();
    s.fusion = j.at("fusion").get<bool>();
    s.fusion_passthrough = j.at("fusion_passthrough").get<bool>();
    s.dropout = j.at("dropout").get<double>();
    s.temporal = j.at("temporal").get<bool>();
    std::vector<std::string> heads;
    const auto joined = j.at("temporal_heads").get<std::string>();
    std::size_t start = 0;
    while (start < joined.size()) {
      const auto bar = joined.find('|', start);
      const auto end = bar == std::string::npos ? joined.size() : bar;
      heads.push_back(joined.substr(start, end - start));
      start = end + 1;
    }
    s.temporal_heads = TaskSet::parse(heads);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("architecture header: ") + e.what());
  }
}

Model model_from_param_file(const ParamFile& file) {
  if (!file.header.contains("architecture")) throw IoError("parameter file lacks an architecture");
  Model m = Model::init(arch_from_json(file.header.at("architecture")), 0);
  for (auto& p : m.parameters()) {
    const StoredTensor* found = nullptr;
    for (const auto& t : file.tensors)
      if (t.name == p.name) found = &t;
    if (!found) throw IoError("parameter file is missing '" + p.name + "'");
    if (found->shape != p.tensor.shape())
      throw IoError("parameter '" + p.name + "' has shape " + to_string(found->shape) +
                    ", expected " + to_string(p.tensor.shape()));
    Tensor handle = p.tensor;
    auto dst = handle.mutable_values();
    std::copy(found->values.begin(), found->values.end(), dst.begin());
  }
  return m;
}

}  // namespace affmtl

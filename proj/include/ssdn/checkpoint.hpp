#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ssdn/nn.hpp"

namespace ssdn {

namespace detail {

constexpr char kCkptMagic[8] = {'S', 'S', 'D', 'N', 'C', 'K', 'P', 'T'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 4) {
    return "f32";
  } else {
    return "f64";
  }
}

}  // namespace detail

// Self-describing container: magic, version, json header (entry table plus
// caller metadata), then raw little-endian scalars.
template <typename T>
void save_checkpoint(const std::string& path, const ParamRegistry<T>& reg,
                     const nlohmann::json& meta) {
  nlohmann::json header;
  header["meta"] = meta;
  header["entries"] = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& p : reg.params()) {
    nlohmann::json e;
    e["name"] = p.name;
    e["group"] = param_group_name(p.group);
    e["dtype"] = detail::dtype_name<T>();
    e["shape"] = p.value.shape();
    e["offset"] = offset;
    const uint64_t nbytes = sizeof(T) * static_cast<uint64_t>(p.value.size());
    e["nbytes"] = nbytes;
    offset += nbytes;
    header["entries"].push_back(std::move(e));
  }
  const std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("save_checkpoint: cannot open '" + path + "' for writing");
  f.write(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  const uint32_t version = detail::kCkptVersion;
  f.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t hlen = htext.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& p : reg.params()) {
    f.write(reinterpret_cast<const char*>(p.value.data()),
            static_cast<std::streamsize>(sizeof(T) * p.value.size()));
  }
  if (!f) throw FormatError("save_checkpoint: write failed for '" + path + "'");
}

template <typename T>
std::pair<ParamRegistry<T>, nlohmann::json> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("load_checkpoint: cannot open '" + path + "'");
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, detail::kCkptMagic, sizeof(magic)) != 0) {
    throw FormatError("load_checkpoint: bad magic in '" + path + "'");
  }
  uint32_t version = 0;
  f.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!f || version != detail::kCkptVersion) {
    throw FormatError("load_checkpoint: unsupported format version " + std::to_string(version));
  }
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  if (!f) throw FormatError("load_checkpoint: truncated header length");
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw FormatError("load_checkpoint: truncated header");
  nlohmann::json header = nlohmann::json::parse(htext, nullptr, false);
  if (header.is_discarded()) throw FormatError("load_checkpoint: malformed header json");

  ParamRegistry<T> reg;
  for (const auto& e : header.at("entries")) {
    const std::string name = e.at("name").get<std::string>();
    const std::string dtype = e.at("dtype").get<std::string>();
    if (dtype != detail::dtype_name<T>()) {
      throw FormatError("load_checkpoint: entry '" + name + "' has dtype " + dtype +
                        ", expected " + detail::dtype_name<T>());
    }
    const Shape shape = e.at("shape").get<Shape>();
    Tensor<T> t(shape);
    const uint64_t nbytes = e.at("nbytes").get<uint64_t>();
    if (nbytes != sizeof(T) * static_cast<uint64_t>(t.size())) {
      throw FormatError("load_checkpoint: entry '" + name + "' byte count mismatch");
    }
    f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(nbytes));
    if (!f) throw FormatError("load_checkpoint: truncated payload at '" + name + "'");
    reg.add(name, std::move(t), parse_param_group(e.at("group").get<std::string>()));
  }
  return {std::move(reg), header.at("meta")};
}

}  // namespace ssdn

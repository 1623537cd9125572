#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mea/tensor.hpp"

namespace mea {

/// Ordered collection of named tensors with an optional JSON attribute block.
///
/// On-disk layout: one UTF-8 JSON manifest line per tensor,
///   {"name":..., "shape":[...], "dtype":"f64", "offset":..., "len":...}
/// where offset and len are byte counts into the payload; a blank line; then
/// the concatenated little-endian f64 payload. An optional first line of the
/// form {"attributes":{...}} carries model metadata.
class TensorBundle {
 public:
  void set(const std::string& name, Tensor t);
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  std::optional<Tensor> find(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  nlohmann::json& attributes() { return attributes_; }
  const nlohmann::json& attributes() const { return attributes_; }

  /// Total payload bytes (8 per element).
  std::size_t payload_bytes() const;

  std::string serialize() const;
  static TensorBundle deserialize(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static TensorBundle load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  nlohmann::json attributes_ = nlohmann::json::object();
};

}  // namespace mea

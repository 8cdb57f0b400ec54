#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sing/types.hpp"

namespace sing {

enum class DType { f32, f64, i64 };

std::string_view to_string(DType dtype) noexcept;
std::size_t dtype_width(DType dtype) noexcept;

/// One entry of `manifest.json`'s `tensors` array. Byte order is always
/// little-endian and is written as the literal "little".
struct TensorManifestEntry {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::int64_t> shape;
  std::string file;

  std::int64_t element_count() const;
  std::int64_t byte_count() const;
};

inline constexpr int kFormatVersion = 1;
inline constexpr const char* kManifestName = "manifest.json";

/// Accumulates tensors and manifest fields, then writes the whole directory
/// in `commit()`. Tensors are stored row-major with no header.
class TensorDirectoryWriter {
 public:
  explicit TensorDirectoryWriter(std::filesystem::path directory);

  void add(const std::string& name, const MatrixF& matrix);
  void add(const std::string& name, const VectorF& vector);
  void add(const std::string& name, const Labels& labels);
  void add(const std::string& name, const Matrix& matrix);  // stored as f64
  void add(const std::string& name, const Vector& vector);  // stored as f64

  /// Extra top-level manifest fields (everything except format_version and
  /// tensors).
  nlohmann::json& fields() { return fields_; }

  void commit();

 private:
  void stage(TensorManifestEntry entry, std::vector<char> bytes);

  std::filesystem::path directory_;
  nlohmann::json fields_ = nlohmann::json::object();
  std::vector<TensorManifestEntry> entries_;
  std::vector<std::vector<char>> payloads_;
};

/// Parses and schema-checks `manifest.json`; tensor files are read lazily
/// and size-checked against the declared shape.
class TensorDirectoryReader {
 public:
  explicit TensorDirectoryReader(std::filesystem::path directory);

  const nlohmann::json& manifest() const { return manifest_; }
  const std::vector<TensorManifestEntry>& entries() const { return entries_; }
  bool has(const std::string& name) const;
  const TensorManifestEntry& entry(const std::string& name) const;

  MatrixF read_f32_matrix(const std::string& name) const;
  VectorF read_f32_vector(const std::string& name) const;
  Labels read_i64_vector(const std::string& name) const;
  Matrix read_f64_matrix(const std::string& name) const;
  Vector read_f64_vector(const std::string& name) const;

  /// Raw little-endian payload after the byte-count check.
  std::vector<char> read_bytes(const std::string& name) const;

 private:
  const TensorManifestEntry& expect(const std::string& name, DType dtype, std::size_t rank) const;

  std::filesystem::path directory_;
  nlohmann::json manifest_;
  std::vector<TensorManifestEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace sing

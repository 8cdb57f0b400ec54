#include "sing/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sing/error.hpp"

namespace sing {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
std::vector<char> to_little_endian(const T* data, std::size_t count) {
  std::vector<char> bytes(count * sizeof(T));
  if (count > 0) std::memcpy(bytes.data(), data, bytes.size());
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i)
      std::reverse(bytes.begin() + i * sizeof(T), bytes.begin() + (i + 1) * sizeof(T));
  }
  return bytes;
}

template <typename T>
void from_little_endian(std::vector<char> bytes, T* out, std::size_t count) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < count; ++i)
      std::reverse(bytes.begin() + i * sizeof(T), bytes.begin() + (i + 1) * sizeof(T));
  }
  if (count > 0) std::memcpy(out, bytes.data(), count * sizeof(T));
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

DType parse_dtype(const std::string& text, const std::string& tensor) {
  if (text == "f32") return DType::f32;
  if (text == "f64") return DType::f64;
  if (text == "i64") return DType::i64;
  throw ValidationError("manifest schema", "tensor '" + tensor + "' has unknown dtype '" + text + "'");
}

bool is_safe_relative(const std::string& file) {
  const fs::path p(file);
  if (file.empty() || p.is_absolute() || p.has_root_name()) return false;
  return std::none_of(p.begin(), p.end(), [](const fs::path& part) { return part == ".."; });
}

TensorManifestEntry parse_entry(const json& node) {
  auto schema_error = [](const std::string& what) { return ValidationError("manifest schema", what); };
  if (!node.is_object()) throw schema_error("tensor entry is not an object");
  if (!node.contains("name") || !node["name"].is_string()) throw schema_error("tensor entry without string 'name'");

  TensorManifestEntry entry;
  entry.name = node["name"].get<std::string>();
  const std::string& n = entry.name;

  if (!node.contains("dtype") || !node["dtype"].is_string()) throw schema_error("tensor '" + n + "' lacks 'dtype'");
  entry.dtype = parse_dtype(node["dtype"].get<std::string>(), n);

  if (!node.contains("shape") || !node["shape"].is_array()) throw schema_error("tensor '" + n + "' lacks 'shape'");
  for (const auto& dim : node["shape"]) {
    if (!dim.is_number_integer() || dim.get<std::int64_t>() < 0)
      throw schema_error("tensor '" + n + "' has a non-integer or negative dimension");
    entry.shape.push_back(dim.get<std::int64_t>());
  }

  if (!node.contains("file") || !node["file"].is_string()) throw schema_error("tensor '" + n + "' lacks 'file'");
  entry.file = node["file"].get<std::string>();
  if (!is_safe_relative(entry.file))
    throw schema_error("tensor '" + n + "' file '" + entry.file + "' is not a relative path inside the directory");

  if (!node.contains("byte_order") || node["byte_order"] != "little")
    throw schema_error("tensor '" + n + "' byte_order must be \"little\"");
  return entry;
}

}  // namespace

std::string_view to_string(DType dtype) noexcept {
  switch (dtype) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i64: return "i64";
  }
  return "?";
}

std::size_t dtype_width(DType dtype) noexcept {
  return dtype == DType::f32 ? 4 : 8;
}

std::int64_t TensorManifestEntry::element_count() const {
  std::int64_t count = 1;
  for (auto dim : shape) count *= dim;
  return count;
}

std::int64_t TensorManifestEntry::byte_count() const {
  return element_count() * static_cast<std::int64_t>(dtype_width(dtype));
}

// --- writer ---------------------------------------------------------------

TensorDirectoryWriter::TensorDirectoryWriter(fs::path directory) : directory_(std::move(directory)) {}

void TensorDirectoryWriter::stage(TensorManifestEntry entry, std::vector<char> bytes) {
  const bool duplicate = std::any_of(entries_.begin(), entries_.end(),
                                     [&](const TensorManifestEntry& e) { return e.name == entry.name; });
  if (duplicate) throw ValidationError("duplicate tensor name", "'" + entry.name + "' added twice");
  entry.file = entry.name + ".bin";
  entries_.push_back(std::move(entry));
  payloads_.push_back(std::move(bytes));
}

void TensorDirectoryWriter::add(const std::string& name, const MatrixF& matrix) {
  stage({name, DType::f32, {matrix.rows(), matrix.cols()}, {}},
        to_little_endian(matrix.data(), static_cast<std::size_t>(matrix.size())));
}

void TensorDirectoryWriter::add(const std::string& name, const VectorF& vector) {
  stage({name, DType::f32, {vector.size()}, {}}, to_little_endian(vector.data(), static_cast<std::size_t>(vector.size())));
}

void TensorDirectoryWriter::add(const std::string& name, const Labels& labels) {
  stage({name, DType::i64, {static_cast<std::int64_t>(labels.size())}, {}}, to_little_endian(labels.data(), labels.size()));
}

void TensorDirectoryWriter::add(const std::string& name, const Matrix& matrix) {
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> row_major = matrix;
  stage({name, DType::f64, {matrix.rows(), matrix.cols()}, {}},
        to_little_endian(row_major.data(), static_cast<std::size_t>(row_major.size())));
}

void TensorDirectoryWriter::add(const std::string& name, const Vector& vector) {
  stage({name, DType::f64, {vector.size()}, {}}, to_little_endian(vector.data(), static_cast<std::size_t>(vector.size())));
}

void TensorDirectoryWriter::commit() {
  std::error_code ec;
  fs::create_directories(directory_, ec);
  if (ec) throw IoError("cannot create directory " + directory_.string() + ": " + ec.message());

  json manifest = fields_;
  manifest["format_version"] = kFormatVersion;
  json tensors = json::array();
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& entry = entries_[i];
    const fs::path path = directory_ / entry.file;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(payloads_[i].data(), static_cast<std::streamsize>(payloads_[i].size()));
    if (!out) throw IoError("write failed for " + path.string());
    tensors.push_back({{"name", entry.name},
                       {"dtype", to_string(entry.dtype)},
                       {"shape", entry.shape},
                       {"file", entry.file},
                       {"byte_order", "little"}});
  }
  manifest["tensors"] = std::move(tensors);

  const fs::path manifest_path = directory_ / kManifestName;
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + manifest_path.string() + " for writing");
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + manifest_path.string());
}

// --- reader ---------------------------------------------------------------

TensorDirectoryReader::TensorDirectoryReader(fs::path directory) : directory_(std::move(directory)) {
  const fs::path manifest_path = directory_ / kManifestName;
  if (!fs::is_regular_file(manifest_path))
    throw IoError("no " + std::string(kManifestName) + " in " + directory_.string());
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  try {
    manifest_ = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("manifest schema", std::string("invalid JSON: ") + e.what());
  }

  if (!manifest_.is_object()) throw ValidationError("manifest schema", "manifest is not a JSON object");
  if (!manifest_.contains("format_version") || manifest_["format_version"] != kFormatVersion)
    throw ValidationError("manifest schema", "format_version must be 1");
  if (!manifest_.contains("tensors") || !manifest_["tensors"].is_array())
    throw ValidationError("manifest schema", "missing 'tensors' array");

  for (const auto& node : manifest_["tensors"]) {
    TensorManifestEntry entry = parse_entry(node);
    if (index_.count(entry.name)) throw ValidationError("duplicate tensor name", "'" + entry.name + "'");
    index_.emplace(entry.name, entries_.size());
    entries_.push_back(std::move(entry));
  }
}

bool TensorDirectoryReader::has(const std::string& name) const { return index_.count(name) > 0; }

const TensorManifestEntry& TensorDirectoryReader::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValidationError("missing tensor", "manifest declares no tensor '" + name + "'");
  return entries_[it->second];
}

std::vector<char> TensorDirectoryReader::read_bytes(const std::string& name) const {
  const auto& e = entry(name);
  const fs::path path = directory_ / e.file;
  if (!fs::is_regular_file(path))
    throw ValidationError("missing tensor file", "tensor '" + name + "' expects " + path.string());

  const auto actual = static_cast<std::int64_t>(fs::file_size(path));
  if (actual != e.byte_count()) {
    throw ValidationError("byte count mismatch", "expected " + std::to_string(e.byte_count()) + " bytes for tensor '" +
                                                     name + "' (" + std::string(to_string(e.dtype)) + " " +
                                                     shape_string(e.shape) + "), file has " + std::to_string(actual));
  }
  std::vector<char> bytes(static_cast<std::size_t>(actual));
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!in && !bytes.empty()) throw IoError("short read on " + path.string());
  return bytes;
}

const TensorManifestEntry& TensorDirectoryReader::expect(const std::string& name, DType dtype, std::size_t rank) const {
  const auto& e = entry(name);
  if (e.dtype != dtype)
    throw ValidationError("manifest schema", "tensor '" + name + "' must be " + std::string(to_string(dtype)) +
                                                 ", manifest says " + std::string(to_string(e.dtype)));
  if (e.shape.size() != rank)
    throw ValidationError("manifest schema", "tensor '" + name + "' must have rank " + std::to_string(rank) +
                                                 ", manifest shape is " + shape_string(e.shape));
  return e;
}

MatrixF TensorDirectoryReader::read_f32_matrix(const std::string& name) const {
  const auto& e = expect(name, DType::f32, 2);
  MatrixF out(e.shape[0], e.shape[1]);
  from_little_endian(read_bytes(name), out.data(), static_cast<std::size_t>(out.size()));
  return out;
}

VectorF TensorDirectoryReader::read_f32_vector(const std::string& name) const {
  const auto& e = expect(name, DType::f32, 1);
  VectorF out(e.shape[0]);
  from_little_endian(read_bytes(name), out.data(), static_cast<std::size_t>(out.size()));
  return out;
}

Labels TensorDirectoryReader::read_i64_vector(const std::string& name) const {
  const auto& e = expect(name, DType::i64, 1);
  Labels out(static_cast<std::size_t>(e.shape[0]));
  from_little_endian(read_bytes(name), out.data(), out.size());
  return out;
}

Matrix TensorDirectoryReader::read_f64_matrix(const std::string& name) const {
  const auto& e = expect(name, DType::f64, 2);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> row_major(e.shape[0], e.shape[1]);
  from_little_endian(read_bytes(name), row_major.data(), static_cast<std::size_t>(row_major.size()));
  return row_major;
}

Vector TensorDirectoryReader::read_f64_vector(const std::string& name) const {
  const auto& e = expect(name, DType::f64, 1);
  Vector out(e.shape[0]);
  from_little_endian(read_bytes(name), out.data(), static_cast<std::size_t>(out.size()));
  return out;
}

}  // namespace sing

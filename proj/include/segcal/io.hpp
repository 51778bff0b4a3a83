#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "segcal/core.hpp"

namespace segcal {

enum class DType { kF32, kF64, kU8, kI64 };

const char* dtype_name(DType dtype);  // "f32", "f64", "u8", "i64"
DType parse_dtype(const std::string& name);

// A dense row-major tensor as read from or written to disk.
struct TensorFile {
  using Payload = std::variant<std::vector<float>, std::vector<double>,
                               std::vector<std::uint8_t>, std::vector<std::int64_t>>;

  Shape shape;
  Payload payload;

  DType dtype() const noexcept { return static_cast<DType>(payload.index()); }
  std::size_t size() const noexcept;
  bool is_floating() const noexcept { return dtype() == DType::kF32 || dtype() == DType::kF64; }

  std::vector<double> to_doubles() const;
  // Floating values must be integral.
  std::vector<std::int64_t> to_integers() const;

  bool operator==(const TensorFile&) const = default;
};

// Reads a ".npy" (format 1.0 or 2.0, little-endian) file, or a raw
// little-endian payload described by a sidecar "<path>.json" holding
// {"dtype": "f32", "shape": [..], "fortran_order": false}.
TensorFile read_tensor(const std::filesystem::path& path);
TensorFile read_npy(std::istream& in, const std::string& name = "<stream>");

void write_tensor(const TensorFile& tensor, const std::filesystem::path& path);
void write_npy(const TensorFile& tensor, std::ostream& out);
void write_raw_tensor(const TensorFile& tensor, const std::filesystem::path& path);

// Probability and logit tensors are channel-first: (C, spatial...).
ChannelArray channel_array_from_tensor(const TensorFile& tensor);
ProbabilityMap probability_map_from_tensor(const TensorFile& tensor);
TensorFile tensor_from_channel_array(const ChannelArray& array, DType dtype = DType::kF64);

// Labels are either an integer class map with the spatial shape, or a one-hot
// (C, spatial...) floating map decoded by per-voxel argmax (a 0.5 threshold
// for a single channel).
LabelMap label_map_from_tensor(const TensorFile& tensor, const Shape& spatial,
                               std::size_t num_classes);
TensorFile tensor_from_label_map(const LabelMap& labels, DType dtype = DType::kU8);

// Provenance record written by every CLI run.
struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  BinConfig bins;
  std::string loss_spec;  // omitted when empty
  std::optional<double> temperature;
  nlohmann::json cases = nlohmann::json::array();
  nlohmann::json aggregate = nlohmann::json::object();
  std::string tool_version;

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
};

// Sorted keys, two-space indent, shortest round-trip reals; byte-stable.
std::string manifest_text(const RunManifest& manifest);
void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);
RunManifest read_manifest(const std::filesystem::path& path);

}  // namespace segcal

#include "segcal/io.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "segcal/error.hpp"
#include "segcal/version.hpp"

namespace segcal {

static_assert(std::endian::native == std::endian::little,
              "tensor I/O assumes a little-endian host");

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kU8: return "u8";
    case DType::kI64: return "i64";
  }
  return "?";
}

DType parse_dtype(const std::string& name) {
  for (DType d : {DType::kF32, DType::kF64, DType::kU8, DType::kI64}) {
    if (name == dtype_name(d)) return d;
  }
  throw ParseError("unsupported dtype '" + name + "' (expected f32, f64, u8 or i64)");
}

std::size_t TensorFile::size() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, payload);
}

std::vector<double> TensorFile::to_doubles() const {
  return std::visit(
      [](const auto& v) {
        std::vector<double> out(v.size());
        for (std::size_t k = 0; k < v.size(); ++k) out[k] = static_cast<double>(v[k]);
        return out;
      },
      payload);
}

std::vector<std::int64_t> TensorFile::to_integers() const {
  return std::visit(
      [](const auto& v) {
        std::vector<std::int64_t> out(v.size());
        for (std::size_t k = 0; k < v.size(); ++k) {
          const double d = static_cast<double>(v[k]);
          if (d != std::floor(d) || !std::isfinite(d)) {
            throw InputDomainError("non-integral value " + std::to_string(d) +
                                   " at flat index " + std::to_string(k));
          }
          out[k] = static_cast<std::int64_t>(v[k]);
        }
        return out;
      },
      payload);
}

namespace {

std::size_t element_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kU8: return 1;
    case DType::kI64: return 8;
  }
  return 0;
}

const char* npy_descr(DType d) {
  switch (d) {
    case DType::kF32: return "<f4";
    case DType::kF64: return "<f8";
    case DType::kU8: return "|u1";
    case DType::kI64: return "<i8";
  }
  return "";
}

DType dtype_from_descr(const std::string& descr, const std::string& name) {
  if (descr == "<f4") return DType::kF32;
  if (descr == "<f8") return DType::kF64;
  if (descr == "|u1" || descr == "<u1") return DType::kU8;
  if (descr == "<i8") return DType::kI64;
  throw ParseError(name + ": unsupported dtype descriptor '" + descr +
                   "' (expected <f4, <f8, |u1 or <i8)");
}

TensorFile::Payload make_payload(DType d, std::size_t n) {
  switch (d) {
    case DType::kF32: return std::vector<float>(n);
    case DType::kF64: return std::vector<double>(n);
    case DType::kU8: return std::vector<std::uint8_t>(n);
    case DType::kI64: return std::vector<std::int64_t>(n);
  }
  return {};
}

char* payload_bytes(TensorFile::Payload& p) {
  return std::visit([](auto& v) { return reinterpret_cast<char*>(v.data()); }, p);
}

const char* payload_bytes(const TensorFile::Payload& p) {
  return std::visit([](const auto& v) { return reinterpret_cast<const char*>(v.data()); }, p);
}

// Reads `bytes` bytes of payload that begin at `offset` in the file.
void read_payload(std::istream& in, TensorFile& t, std::size_t offset, const std::string& name) {
  const std::size_t bytes = t.size() * element_size(t.dtype());
  in.read(payload_bytes(t.payload), static_cast<std::streamsize>(bytes));
  const auto got = static_cast<std::size_t>(in.gcount());
  if (got != bytes) {
    throw ParseError(name + ": truncated payload at offset " + std::to_string(offset + got) +
                     ": expected " + std::to_string(bytes) + " bytes from offset " +
                     std::to_string(offset) + ", got " + std::to_string(got));
  }
}

// Column-major payload to row-major.
void to_row_major(TensorFile& t) {
  const Shape& shape = t.shape;
  if (shape.size() < 2) return;
  std::visit(
      [&](auto& src) {
        auto dst = src;
        std::vector<std::size_t> index(shape.size(), 0);
        for (std::size_t flat = 0; flat < src.size(); ++flat) {
          std::size_t f_off = 0, stride = 1;
          for (std::size_t d = 0; d < shape.size(); ++d) {
            f_off += index[d] * stride;
            stride *= shape[d];
          }
          dst[flat] = src[f_off];
          for (std::size_t d = shape.size(); d-- > 0;) {
            if (++index[d] < shape[d]) break;
            index[d] = 0;
          }
        }
        src = std::move(dst);
      },
      t.payload);
}

// Minimal reader for the Python-literal header dict of a .npy file.
class HeaderParser {
 public:
  HeaderParser(std::string text, std::string name, std::size_t offset)
      : s_(std::move(text)), name_(std::move(name)), base_(offset) {}

  void parse(std::string& descr, bool& fortran, Shape& shape) {
    bool have_descr = false, have_fortran = false, have_shape = false;
    expect('{');
    while (true) {
      skip_ws();
      if (peek() == '}') break;
      const std::string key = quoted();
      expect(':');
      if (key == "descr") {
        descr = quoted();
        have_descr = true;
      } else if (key == "fortran_order") {
        fortran = boolean();
        have_fortran = true;
      } else if (key == "shape") {
        shape = tuple();
        have_shape = true;
      } else {
        fail("unexpected header key '" + key + "'");
      }
      skip_ws();
      if (peek() == ',') ++pos_;
    }
    if (!have_descr || !have_fortran || !have_shape) {
      fail("header must define descr, fortran_order and shape");
    }
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError(name_ + ": bad .npy header at offset " + std::to_string(base_ + pos_) +
                     ": " + what);
  }
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  char peek() {
    skip_ws();
    if (pos_ >= s_.size()) fail("unexpected end of header");
    return s_[pos_];
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  std::string quoted() {
    const char q = peek();
    if (q != '\'' && q != '"') fail("expected a quoted string");
    const auto end = s_.find(q, pos_ + 1);
    if (end == std::string::npos) fail("unterminated string");
    std::string out = s_.substr(pos_ + 1, end - pos_ - 1);
    pos_ = end + 1;
    return out;
  }
  bool boolean() {
    peek();
    if (s_.compare(pos_, 4, "True") == 0) { pos_ += 4; return true; }
    if (s_.compare(pos_, 5, "False") == 0) { pos_ += 5; return false; }
    fail("expected True or False");
  }
  Shape tuple() {
    expect('(');
    Shape shape;
    while (peek() != ')') {
      std::size_t v = 0;
      bool digits = false;
      while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
        v = v * 10 + static_cast<std::size_t>(s_[pos_++] - '0');
        digits = true;
      }
      if (!digits) fail("expected a dimension");
      shape.push_back(v);
      if (peek() == ',') ++pos_;
    }
    ++pos_;
    return shape;
  }

  std::string s_;
  std::string name_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[] = "\x93NUMPY";

}  // namespace

TensorFile read_npy(std::istream& in, const std::string& name) {
  char magic[6];
  in.read(magic, 6);
  if (in.gcount() != 6 || std::memcmp(magic, kMagic, 6) != 0) {
    throw ParseError(name + ": bad magic at offset 0 (not a .npy file)");
  }
  unsigned char version[2];
  in.read(reinterpret_cast<char*>(version), 2);
  if (in.gcount() != 2) throw ParseError(name + ": truncated version at offset 6");
  if (version[0] != 1 && version[0] != 2) {
    throw ParseError(name + ": unsupported .npy version " + std::to_string(version[0]) + "." +
                     std::to_string(version[1]) + " at offset 6");
  }
  const std::size_t len_bytes = version[0] == 1 ? 2 : 4;
  unsigned char len_buf[4] = {0, 0, 0, 0};
  in.read(reinterpret_cast<char*>(len_buf), static_cast<std::streamsize>(len_bytes));
  if (static_cast<std::size_t>(in.gcount()) != len_bytes) {
    throw ParseError(name + ": truncated header length at offset 8");
  }
  const std::size_t header_len = len_buf[0] | (len_buf[1] << 8) |
                                 (static_cast<std::size_t>(len_buf[2]) << 16) |
                                 (static_cast<std::size_t>(len_buf[3]) << 24);
  const std::size_t header_offset = 8 + len_bytes;
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (static_cast<std::size_t>(in.gcount()) != header_len) {
    throw ParseError(name + ": truncated header at offset " +
                     std::to_string(header_offset + static_cast<std::size_t>(in.gcount())));
  }

  std::string descr;
  bool fortran = false;
  TensorFile t;
  HeaderParser(header, name, header_offset).parse(descr, fortran, t.shape);
  t.payload = make_payload(dtype_from_descr(descr, name), shape_volume(t.shape));
  read_payload(in, t, header_offset + header_len, name);
  if (fortran) to_row_major(t);
  return t;
}

TensorFile read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  char probe[6] = {0};
  in.read(probe, 6);
  const bool is_npy = in.gcount() == 6 && std::memcmp(probe, kMagic, 6) == 0;
  in.clear();
  in.seekg(0);
  if (is_npy) return read_npy(in, path.string());

  std::filesystem::path sidecar = path;
  sidecar += ".json";
  std::ifstream side(sidecar);
  if (!side) {
    throw ParseError(path.string() + ": bad magic at offset 0 and no sidecar '" +
                     sidecar.string() + "' describing a raw payload");
  }
  nlohmann::json desc;
  try {
    desc = nlohmann::json::parse(side);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(sidecar.string() + ": " + e.what());
  }
  if (!desc.is_object() || !desc.contains("dtype") || !desc.contains("shape") ||
      !desc["dtype"].is_string() || !desc["shape"].is_array()) {
    throw ParseError(sidecar.string() + ": sidecar needs a string 'dtype' and an array 'shape'");
  }
  TensorFile t;
  for (const auto& d : desc["shape"]) {
    if (!d.is_number_unsigned()) throw ParseError(sidecar.string() + ": shape entries must be non-negative integers");
    t.shape.push_back(d.get<std::size_t>());
  }
  t.payload = make_payload(parse_dtype(desc["dtype"].get<std::string>()), shape_volume(t.shape));
  read_payload(in, t, 0, path.string());
  if (desc.value("fortran_order", false)) to_row_major(t);
  return t;
}

void write_npy(const TensorFile& t, std::ostream& out) {
  if (t.size() != shape_volume(t.shape)) {
    throw StructuralError("tensor payload has " + std::to_string(t.size()) +
                          " values but its shape needs " + std::to_string(shape_volume(t.shape)));
  }
  std::string header = std::string("{'descr': '") + npy_descr(t.dtype()) +
                       "', 'fortran_order': False, 'shape': (";
  for (std::size_t d = 0; d < t.shape.size(); ++d) {
    header += std::to_string(t.shape[d]);
    if (t.shape.size() == 1 || d + 1 < t.shape.size()) header += ",";
    if (d + 1 < t.shape.size()) header += " ";
  }
  header += "), }";
  // Pad so the payload starts on a 64-byte boundary; the header ends in '\n'.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';
  if (header.size() > 65535) throw StructuralError("tensor header too long for .npy 1.0");

  out.write(kMagic, 6);
  const unsigned char meta[4] = {1, 0, static_cast<unsigned char>(header.size() & 0xff),
                                 static_cast<unsigned char>(header.size() >> 8)};
  out.write(reinterpret_cast<const char*>(meta), 4);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload_bytes(t.payload),
            static_cast<std::streamsize>(t.size() * element_size(t.dtype())));
}

void write_tensor(const TensorFile& tensor, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  write_npy(tensor, out);
  out.close();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

void write_raw_tensor(const TensorFile& t, const std::filesystem::path& path) {
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(payload_bytes(t.payload),
              static_cast<std::streamsize>(t.size() * element_size(t.dtype())));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
  }
  nlohmann::json desc = {{"dtype", dtype_name(t.dtype())}, {"shape", t.shape},
                         {"fortran_order", false}};
  std::filesystem::path sidecar = path;
  sidecar += ".json";
  std::ofstream side(sidecar, std::ios::trunc);
  if (!side) throw IoError("cannot open '" + sidecar.string() + "' for writing");
  side << desc.dump(2) << "\n";
  if (!side) throw IoError("failed writing '" + sidecar.string() + "'");
}

// ---------------------------------------------------------------------------
// Domain conversions

ChannelArray channel_array_from_tensor(const TensorFile& t) {
  if (t.shape.size() < 2) {
    throw StructuralError("channel-first tensor needs at least 2 dimensions (C, spatial...), got " +
                          std::to_string(t.shape.size()));
  }
  if (!t.is_floating()) throw StructuralError("probability/logit tensors must be f32 or f64");
  Shape spatial(t.shape.begin() + 1, t.shape.end());
  return ChannelArray(std::move(spatial), t.shape.front(), t.to_doubles());
}

ProbabilityMap probability_map_from_tensor(const TensorFile& t) {
  return ProbabilityMap(channel_array_from_tensor(t));
}

TensorFile tensor_from_channel_array(const ChannelArray& a, DType dtype) {
  TensorFile t;
  t.shape.push_back(a.num_classes());
  t.shape.insert(t.shape.end(), a.spatial_shape().begin(), a.spatial_shape().end());
  const auto v = a.values();
  switch (dtype) {
    case DType::kF32: t.payload = std::vector<float>(v.begin(), v.end()); break;
    case DType::kF64: t.payload = std::vector<double>(v.begin(), v.end()); break;
    default: throw StructuralError("channel arrays are written as f32 or f64");
  }
  return t;
}

LabelMap label_map_from_tensor(const TensorFile& t, const Shape& spatial, std::size_t num_classes) {
  if (t.shape == spatial) {
    const auto ints = t.to_integers();
    std::vector<std::int32_t> labels(ints.begin(), ints.end());
    for (std::size_t i = 0; i < ints.size(); ++i) {
      if (ints[i] < 0 || ints[i] > INT32_MAX) {
        throw InputDomainError("label " + std::to_string(ints[i]) + " at voxel " +
                               std::to_string(i) + " is not a class index");
      }
    }
    LabelMap map(spatial, std::move(labels));
    map.check_compatible(spatial, num_classes);
    return map;
  }
  Shape onehot_shape{num_classes};
  onehot_shape.insert(onehot_shape.end(), spatial.begin(), spatial.end());
  if (t.shape == onehot_shape && t.is_floating()) {
    const ChannelArray onehot = channel_array_from_tensor(t);
    std::vector<std::int32_t> labels(onehot.num_voxels(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (num_classes == 1) {
        labels[i] = onehot(0, i) >= 0.5 ? 1 : 0;
        continue;
      }
      std::size_t best = 0;
      for (std::size_t c = 1; c < num_classes; ++c) {
        if (onehot(c, i) > onehot(best, i)) best = c;
      }
      labels[i] = static_cast<std::int32_t>(best);
    }
    return LabelMap(spatial, std::move(labels));
  }
  std::string got;
  for (auto d : t.shape) got += std::to_string(d) + " ";
  throw StructuralError("label tensor shape (" + got +
                        ") is neither the spatial shape nor a one-hot (C, spatial...) map");
}

TensorFile tensor_from_label_map(const LabelMap& labels, DType dtype) {
  TensorFile t;
  t.shape = labels.spatial_shape();
  const auto v = labels.values();
  switch (dtype) {
    case DType::kU8: {
      std::vector<std::uint8_t> out(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] < 0 || v[i] > 255) throw StructuralError("label does not fit in u8");
        out[i] = static_cast<std::uint8_t>(v[i]);
      }
      t.payload = std::move(out);
      break;
    }
    case DType::kI64: t.payload = std::vector<std::int64_t>(v.begin(), v.end()); break;
    default: throw StructuralError("label maps are written as u8 or i64");
  }
  return t;
}

// ---------------------------------------------------------------------------
// Manifest

nlohmann::json RunManifest::to_json() const {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = config;
  j["seed"] = seed;
  j["bins"] = bins.num_bins;
  if (!loss_spec.empty()) j["loss_spec"] = loss_spec;
  if (temperature) j["temperature"] = *temperature;
  j["cases"] = cases;
  j["aggregate"] = aggregate;
  j["tool_version"] = tool_version.empty() ? std::string(kVersion) : tool_version;
  return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.command = j.at("command").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.bins.num_bins = j.at("bins").get<std::size_t>();
    if (j.contains("loss_spec")) m.loss_spec = j["loss_spec"].get<std::string>();
    if (j.contains("temperature")) m.temperature = j["temperature"].get<double>();
    m.cases = j.at("cases");
    m.aggregate = j.at("aggregate");
    m.tool_version = j.at("tool_version").get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed manifest: ") + e.what());
  }
}

std::string manifest_text(const RunManifest& manifest) {
  return manifest.to_json().dump(2) + "\n";
}

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path) {
  const std::string text = manifest_text(manifest);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.close();
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
  return RunManifest::from_json(j);
}

}  // namespace segcal

// SPDX-License-Identifier: Apache-2.0
#include "sardiff/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sardiff {

static_assert(std::endian::native == std::endian::little, "TNSR I/O assumes a little-endian host");

namespace {

constexpr std::array<char, 4> kMagic{'T', 'N', 'S', 'R'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw std::runtime_error("TNSR: unexpected end of stream");
  return v;
}

void expect_magic(std::istream& is) {
  std::array<char, 4> m{};
  is.read(m.data(), 4);
  if (!is || m != kMagic) throw std::runtime_error("TNSR: bad magic");
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t, DType dtype) {
  os.write(kMagic.data(), 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(os, d);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  if (dtype == DType::f64) {
    os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * 8));
  } else {
    for (double v : t.data()) put<float>(os, static_cast<float>(v));
  }
}

Tensor read_tensor(std::istream& is) {
  expect_magic(is);
  const auto rank = get<std::uint32_t>(is);
  if (rank > 16) throw std::runtime_error("TNSR: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(is));
  const auto dtype = get<std::uint8_t>(is);
  std::vector<double> data(shape_numel(shape));
  if (dtype == static_cast<std::uint8_t>(DType::f64)) {
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 8));
    if (!is) throw std::runtime_error("TNSR: truncated tensor data");
  } else if (dtype == static_cast<std::uint8_t>(DType::f32)) {
    for (double& v : data) v = get<float>(is);
  } else {
    throw std::runtime_error("TNSR: unknown dtype tag " + std::to_string(dtype));
  }
  return Tensor(std::move(shape), std::move(data));
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open '" + tmp.string() + "' for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt, DType dtype) {
  const std::string header = ckpt.header.dump();
  std::ostringstream body(std::ios::binary);
  std::vector<std::uint64_t> offsets;

  std::uint64_t prefix = 4 + 4 + 8 + header.size() + 8;
  for (const Param& p : ckpt.tensors.entries()) prefix += 4 + p.name.size() + 8;
  for (const Param& p : ckpt.tensors.entries()) {
    offsets.push_back(prefix + static_cast<std::uint64_t>(body.tellp()));
    write_tensor(body, p.value, dtype);
  }

  std::ostringstream os(std::ios::binary);
  os.write(kMagic.data(), 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  put<std::uint64_t>(os, ckpt.tensors.entries().size());
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    const std::string& name = ckpt.tensors.entries()[i].name;
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint64_t>(os, offsets[i]);
  }
  os << body.str();
  write_file_atomic(path, os.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint '" + path.string() + "'");
  try {
    expect_magic(is);
    const auto version = get<std::uint32_t>(is);
    if (version != kCheckpointVersion) throw std::runtime_error("unsupported version " + std::to_string(version));
    const auto header_len = get<std::uint64_t>(is);
    std::string header(header_len, '\0');
    is.read(header.data(), static_cast<std::streamsize>(header_len));
    const auto count = get<std::uint64_t>(is);
    std::vector<std::pair<std::string, std::uint64_t>> manifest;
    for (std::uint64_t i = 0; i < count; ++i) {
      const auto len = get<std::uint32_t>(is);
      std::string name(len, '\0');
      is.read(name.data(), len);
      manifest.emplace_back(std::move(name), get<std::uint64_t>(is));
    }
    Checkpoint ckpt;
    ckpt.header = nlohmann::json::parse(header);
    for (auto& [name, offset] : manifest) {
      is.seekg(static_cast<std::streamoff>(offset));
      ckpt.tensors.add(name, read_tensor(is));
    }
    return ckpt;
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint '" + path.string() + "': " + e.what());
  }
}

void check_config_fields(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                         std::string_view what) {
  if (!j.is_object()) throw std::invalid_argument(std::string(what) + ": config must be a JSON object");
  if (!j.contains("version")) throw std::invalid_argument(std::string(what) + ": missing \"version\" field");
  if (!j.at("version").is_number_integer() || j.at("version").get<int>() != kConfigVersion) {
    throw std::invalid_argument(std::string(what) + ": unsupported config version " + j.at("version").dump());
  }
  for (const auto& [key, value] : j.items()) {
    if (key == "version") continue;
    bool known = false;
    for (std::string_view a : allowed) known = known || a == key;
    if (!known) throw std::invalid_argument(std::string(what) + ": unknown field \"" + key + "\"");
  }
}

}  // namespace sardiff

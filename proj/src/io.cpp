#include "serkd/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace serkd::io {
namespace {

static_assert(std::endian::native == std::endian::little, "SRKD streams assume a little-endian host");

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b, 4);
}

void read_exact(std::istream& is, void* dst, std::size_t n) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("truncated SRKD stream");
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  read_exact(is, b, 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_header(std::ostream& os, std::uint8_t dtype, const Shape& shape) {
  if (shape.size() > 255) throw FormatError("rank exceeds 255");
  os.write(kMagic, 4);
  const char meta[3] = {static_cast<char>(kVersion), static_cast<char>(dtype), static_cast<char>(shape.size())};
  os.write(meta, 3);
  for (auto d : shape) {
    if (d > 0xFFFFFFFFu) throw FormatError("dimension exceeds u32");
    put_u32(os, static_cast<std::uint32_t>(d));
  }
}

Shape read_header(std::istream& is, std::uint8_t expected_dtype) {
  char magic[4];
  read_exact(is, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad SRKD magic");
  unsigned char meta[3];
  read_exact(is, meta, 3);
  if (meta[0] != kVersion) throw FormatError("unsupported SRKD version " + std::to_string(meta[0]));
  if (meta[1] != expected_dtype) throw FormatError("unexpected SRKD dtype " + std::to_string(meta[1]));
  Shape shape(meta[2]);
  for (auto& d : shape) {
    d = get_u32(is);
    if (d == 0) throw FormatError("zero dimension in SRKD header");
  }
  return shape;
}

template <typename Stream>
Stream open(const std::filesystem::path& path, std::ios::openmode mode) {
  Stream s(path, mode | std::ios::binary);
  if (!s) throw FormatError("cannot open " + path.string());
  return s;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  write_header(os, kFloat64, t.shape());
  const auto v = t.values();
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is, bool requires_grad) {
  const Shape shape = read_header(is, kFloat64);
  std::vector<double> data(element_count(shape));
  read_exact(is, data.data(), data.size() * sizeof(double));
  return Tensor::from(shape, data, requires_grad);
}

void write_indices(std::ostream& os, const Shape& shape, std::span<const std::uint32_t> values) {
  if (element_count(shape) != values.size()) throw DimensionError("index payload does not match " + to_string(shape));
  write_header(os, kUint32, shape);
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * 4));
}

std::vector<std::uint32_t> read_indices(std::istream& is, Shape* shape) {
  const Shape s = read_header(is, kUint32);
  std::vector<std::uint32_t> data(element_count(s));
  read_exact(is, data.data(), data.size() * 4);
  if (shape) *shape = s;
  return data;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  auto os = open<std::ofstream>(path, std::ios::out | std::ios::trunc);
  write_tensor(os, t);
}

Tensor load_tensor(const std::filesystem::path& path, bool requires_grad) {
  auto is = open<std::ifstream>(path, std::ios::in);
  return read_tensor(is, requires_grad);
}

void save_indices(const std::filesystem::path& path, const Shape& shape, std::span<const std::uint32_t> values) {
  auto os = open<std::ofstream>(path, std::ios::out | std::ios::trunc);
  write_indices(os, shape, values);
}

std::vector<std::uint32_t> load_indices(const std::filesystem::path& path, Shape* shape) {
  auto is = open<std::ifstream>(path, std::ios::in);
  return read_indices(is, shape);
}

void write_archive(std::ostream& os, const NamedTensors& entries) {
  os.write("SRKA", 4);
  os.put(static_cast<char>(kVersion));
  put_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(os, t);
  }
}

NamedTensors read_archive(std::istream& is, bool requires_grad) {
  char magic[4];
  read_exact(is, magic, 4);
  if (std::memcmp(magic, "SRKA", 4) != 0) throw FormatError("bad archive magic");
  unsigned char version = 0;
  read_exact(is, &version, 1);
  if (version != kVersion) throw FormatError("unsupported archive version");
  const std::uint32_t count = get_u32(is);
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get_u32(is), '\0');
    read_exact(is, name.data(), name.size());
    out.emplace(std::move(name), read_tensor(is, requires_grad));
  }
  return out;
}

void save_archive(const std::filesystem::path& path, const NamedTensors& entries) {
  auto os = open<std::ofstream>(path, std::ios::out | std::ios::trunc);
  write_archive(os, entries);
}

NamedTensors load_archive(const std::filesystem::path& path, bool requires_grad) {
  auto is = open<std::ifstream>(path, std::ios::in);
  return read_archive(is, requires_grad);
}

}  // namespace serkd::io

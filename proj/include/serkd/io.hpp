#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "serkd/tensor.hpp"

namespace serkd::io {

// Tensor dump layout: "SRKD", version byte, dtype byte, rank byte, rank
// little-endian u32 dims, then the row-major little-endian payload.
inline constexpr char kMagic[4] = {'S', 'R', 'K', 'D'};
inline constexpr std::uint8_t kVersion = 0x01;
inline constexpr std::uint8_t kFloat64 = 0x01;
inline constexpr std::uint8_t kUint32 = 0x02;

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is, bool requires_grad = false);

/// Index arrays (labels, hard superpixel assignments) use the same header
/// with the u32 dtype tag.
void write_indices(std::ostream& os, const Shape& shape, std::span<const std::uint32_t> values);
std::vector<std::uint32_t> read_indices(std::istream& is, Shape* shape = nullptr);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path, bool requires_grad = false);
void save_indices(const std::filesystem::path& path, const Shape& shape, std::span<const std::uint32_t> values);
std::vector<std::uint32_t> load_indices(const std::filesystem::path& path, Shape* shape = nullptr);

/// Named-tensor archive. std::map keeps entries lexicographic by name, which
/// is also the on-disk order: "SRKA", version byte, u32 entry count, then per
/// entry a u32 name length, the name bytes and a tensor dump.
using NamedTensors = std::map<std::string, Tensor>;

void write_archive(std::ostream& os, const NamedTensors& entries);
NamedTensors read_archive(std::istream& is, bool requires_grad = false);
void save_archive(const std::filesystem::path& path, const NamedTensors& entries);
NamedTensors load_archive(const std::filesystem::path& path, bool requires_grad = false);

}  // namespace serkd::io

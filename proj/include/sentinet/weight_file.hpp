#pragma once

// Binary weight file, little-endian:
//
//   "DSBW"                    magic
//   u32 version               currently 1
//   u32 num_classes
//   f32 x 3                   channel means (R, G, B)
//   u32 vocabulary checksum   CRC-32 of the vocabulary, 0 when unknown
//   u32 record count
//   records, each:
//     u32 name length, name bytes (UTF-8)
//     u8  dtype tag           1 = f32
//     u32 rank, u32 x rank extents
//     f32 x product(extents)  row-major
//   u32 CRC-32 of every preceding byte of the file

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sentinet/tensor.hpp"

namespace sentinet {

inline constexpr std::uint32_t kWeightFormatVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;

struct WeightRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct WeightFile {
  std::uint32_t version = kWeightFormatVersion;
  std::uint32_t num_classes = 0;
  std::array<float, 3> channel_means{0.f, 0.f, 0.f};
  std::uint32_t vocabulary_checksum = 0;
  std::vector<WeightRecord> records;
};

std::vector<std::uint8_t> encode_weight_file(const WeightFile& file);
WeightFile decode_weight_file(std::span<const std::uint8_t> bytes);

void write_weight_file(const WeightFile& file, const std::filesystem::path& path);
WeightFile read_weight_file(const std::filesystem::path& path);

std::uint32_t crc32(std::span<const std::uint8_t> bytes);

}  // namespace sentinet

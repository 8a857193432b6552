#include "sentinet/weight_file.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "sentinet/errors.hpp"

namespace sentinet {

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes a uInt length; feed in chunks.
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
    crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(n));
    offset += n;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace {

constexpr char kMagic[4] = {'D', 'S', 'B', 'W'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::uint8_t u8(const char* field) {
    need(1, field);
    return in_[pos_++];
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* field) { return std::bit_cast<float>(u32(field)); }
  std::span<const std::uint8_t> bytes(std::size_t n, const char* field) {
    need(n, field);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (in_.size() - pos_ < n)
      throw FormatError(std::string("weight file truncated while reading ") + field);
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_weight_file(const WeightFile& file) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(file.version);
  w.u32(file.num_classes);
  for (float m : file.channel_means) w.f32(m);
  w.u32(file.vocabulary_checksum);
  w.u32(static_cast<std::uint32_t>(file.records.size()));
  for (const auto& r : file.records) {
    if (static_cast<Index>(r.data.size()) != shape_size(r.shape))
      throw ShapeError("weight record " + r.name + ": data does not match shape");
    w.u32(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.u8(kDtypeF32);
    w.u32(static_cast<std::uint32_t>(r.shape.size()));
    for (Index e : r.shape) w.u32(static_cast<std::uint32_t>(e));
    for (float v : r.data) w.f32(v);
  }
  auto& buf = w.buffer();
  const std::uint32_t crc = crc32(buf);
  w.u32(crc);
  return std::move(buf);
}

WeightFile decode_weight_file(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("weight file: bad magic (expected \"DSBW\")");
  if (bytes.size() < 8) throw FormatError("weight file truncated while reading version");
  Reader r(bytes);
  r.bytes(4, "magic");
  WeightFile file;
  file.version = r.u32("version");
  if (file.version != kWeightFormatVersion)
    throw FormatError("weight file: unsupported version " + std::to_string(file.version));
  if (bytes.size() < 12) throw FormatError("weight file truncated while reading num_classes");

  // Verify the trailer before trusting any length field in the body.
  if (bytes.size() < 4 + 4 + 4 + 12 + 4 + 4 + 4)
    throw FormatError("weight file truncated while reading header");
  const auto body = bytes.first(bytes.size() - 4);
  Reader trailer(bytes.last(4));
  const std::uint32_t stored = trailer.u32("checksum");
  const std::uint32_t computed = crc32(body);
  if (stored != computed)
    throw FormatError("weight file: checksum mismatch (stored " + std::to_string(stored) +
                      ", computed " + std::to_string(computed) + ")");

  Reader in(body);
  in.bytes(8, "magic");
  file.num_classes = in.u32("num_classes");
  for (float& m : file.channel_means) m = in.f32("channel_means");
  file.vocabulary_checksum = in.u32("vocabulary_checksum");
  const std::uint32_t count = in.u32("record_count");
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightRecord rec;
    const std::uint32_t name_len = in.u32("record name length");
    const auto name = in.bytes(name_len, "record name");
    rec.name.assign(name.begin(), name.end());
    const std::uint8_t dtype = in.u8("dtype");
    if (dtype != kDtypeF32)
      throw FormatError("weight record " + rec.name + ": unknown dtype tag " + std::to_string(dtype));
    const std::uint32_t rank = in.u32("rank");
    if (rank == 0 || rank > 8) throw FormatError("weight record " + rec.name + ": bad rank " + std::to_string(rank));
    std::size_t count_values = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t e = in.u32("extent");
      if (e == 0) throw FormatError("weight record " + rec.name + ": zero extent");
      rec.shape.push_back(static_cast<Index>(e));
      count_values *= e;
      if (count_values > in.remaining()) throw FormatError("weight file truncated while reading record " + rec.name);
    }
    const auto raw = in.bytes(count_values * 4, "record data");
    rec.data.resize(count_values);
    for (std::size_t k = 0; k < count_values; ++k) {
      std::uint32_t v = 0;
      for (int b = 0; b < 4; ++b) v |= std::uint32_t(raw[4 * k + b]) << (8 * b);
      rec.data[k] = std::bit_cast<float>(v);
    }
    file.records.push_back(std::move(rec));
  }
  if (in.remaining() != 0) throw FormatError("weight file: trailing bytes after last record");
  return file;
}

void write_weight_file(const WeightFile& file, const std::filesystem::path& path) {
  const auto bytes = encode_weight_file(file);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

WeightFile read_weight_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open weight file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_weight_file(bytes);
}

}  // namespace sentinet

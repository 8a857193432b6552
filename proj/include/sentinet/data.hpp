#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sentinet/layers.hpp"

namespace sentinet {

// ---------------------------------------------------------------------------
// Vocabulary: one "adjective noun" per line, index = line number (0-based).

class AnpVocabulary {
 public:
  AnpVocabulary() = default;
  explicit AnpVocabulary(std::vector<std::string> entries);

  Index size() const { return static_cast<Index>(entries_.size()); }
  const std::string& anp(Index i) const { return entries_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::string>& entries() const { return entries_; }
  std::string adjective(Index i) const;
  std::string noun(Index i) const;
  std::optional<Index> index_of(const std::string& anp) const;

  /// CRC-32 of the entries joined by '\n'; stored in weight files.
  std::uint32_t checksum() const;

 private:
  std::vector<std::string> entries_;
};

AnpVocabulary parse_vocabulary(std::istream& in, const std::string& source = "vocabulary");
AnpVocabulary load_vocabulary(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Manifest: path<TAB>anp_index<TAB>split<TAB>publisher_id per line.

enum class Split { train, test };

struct ManifestRecord {
  std::string path;
  Index anp_index = 0;
  Split split = Split::train;
  std::string publisher_id;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::filesystem::path base_dir;  // relative record paths resolve against this

  std::filesystem::path resolve(const ManifestRecord& r) const;
  /// Indices of records in the given split, in file order.
  std::vector<std::size_t> split_indices(Split split) const;
};

DatasetManifest parse_manifest(std::istream& in, const std::string& source = "manifest");
DatasetManifest load_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, std::ostream& out);

struct PublisherViolation {
  Index anp = 0;
  std::string publisher_id;

  friend bool operator==(const PublisherViolation&, const PublisherViolation&) = default;
  friend auto operator<=>(const PublisherViolation&, const PublisherViolation&) = default;
};

struct AnpCount {
  Index anp = 0;
  Index count = 0;

  friend bool operator==(const AnpCount&, const AnpCount&) = default;
};

struct ManifestReport {
  std::vector<PublisherViolation> publisher_violations;  // sorted by (anp, publisher)
  std::vector<AnpCount> under_threshold;                 // warnings, sorted by anp
  std::vector<Index> train_counts;                       // per ANP
  std::vector<Index> test_counts;                        // per ANP

  bool clean() const { return publisher_violations.empty(); }
};

/// Checks the split rules: no ANP may have a publisher in both splits (hard
/// violation); ANPs with training images but fewer than min_train_images of
/// them are reported as warnings. The result does not depend on record order.
ManifestReport validate_manifest(const DatasetManifest& manifest, const AnpVocabulary& vocab,
                                 Index min_train_images = 100);

void write_manifest_report(const ManifestReport& report, const AnpVocabulary& vocab, std::ostream& out);

// ---------------------------------------------------------------------------
// Images: float Tensor [3,H,W], RGB, values in [0, 255].

using ImageTensor = Tensor<float>;
using ChannelMeans = std::array<double, 3>;

inline constexpr Index kCanonicalSize = 256;
inline constexpr Index kCropSize = 227;
inline constexpr Index kCropRange = kCanonicalSize - kCropSize + 1;  // offsets 0..29
inline constexpr Index kCenterOffset = (kCanonicalSize - kCropSize) / 2;

ImageTensor read_ppm(const std::filesystem::path& path);
ImageTensor decode_ppm(std::span<const std::uint8_t> bytes, const std::string& source = "image");
void write_ppm(const ImageTensor& image, const std::filesystem::path& path);

/// Decoders for formats other than binary PPM plug in here, keyed by
/// lower-case file extension including the dot (".jpg").
using ImageDecoder = std::function<ImageTensor(const std::filesystem::path&)>;
void register_image_decoder(const std::string& extension, ImageDecoder decoder);

/// Dispatches on extension to a registered decoder, falling back to PPM.
/// Throws DataError when the file cannot be decoded.
ImageTensor load_image(const std::filesystem::path& path);

/// Bilinear resample of each axis independently to 256 x 256 (half-pixel
/// centres, edge clamped). An input already 256 x 256 is returned unchanged.
ImageTensor resize_to_canonical(const ImageTensor& image, Index size = kCanonicalSize);

struct CropWindow {
  Index y = 0;
  Index x = 0;
  bool flip = false;

  friend bool operator==(const CropWindow&, const CropWindow&) = default;
};

/// Offset y then offset x uniform in [0, 29], then a fair coin for the flip.
CropWindow draw_crop(Rng& rng);

/// 227 x 227 window of a canonical image, optionally mirrored left-right,
/// with the per-channel means subtracted.
ImageTensor extract_crop(const ImageTensor& canonical, CropWindow window, const ChannelMeans& means);

ImageTensor augment_train(const ImageTensor& canonical, const ChannelMeans& means, Rng& rng);
ImageTensor center_crop(const ImageTensor& canonical, const ChannelMeans& means);

using ImageLoader = std::function<ImageTensor(const std::filesystem::path&)>;

/// Per-channel mean over the canonical-size training images. Unreadable
/// records are skipped.
ChannelMeans compute_channel_means(const DatasetManifest& manifest, const ImageLoader& loader = load_image);

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  Tensor<float> images;               // [B,3,227,227]
  std::vector<Index> labels;          // anp_index per item
  std::vector<std::size_t> records;   // manifest record index per item
  std::vector<std::size_t> skipped;   // records that failed to load
  std::vector<std::string> warnings;  // one per skipped record
};

/// Loads, resizes and crops the given records. Train mode augments item i with
/// rng.split(i); test mode takes the centre crop and never reads rng.
/// Undecodable records are skipped with a warning; a batch with no loadable
/// record throws DataError.
Batch make_batch(const DatasetManifest& manifest, std::span<const std::size_t> record_indices, Mode mode,
                 const ChannelMeans& means, Rng& rng, const ImageLoader& loader = load_image);

}  // namespace sentinet

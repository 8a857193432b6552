#pragma once

// Toy ANP dataset: coloured stripe patterns, one colour x orientation per
// class, with per-image phase and pixel noise. Held in memory; write_to()
// puts it on disk for the CLI.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>

#include "sentinet/data.hpp"

namespace sentinet::testing {

struct SyntheticDataset {
  AnpVocabulary vocab;
  DatasetManifest manifest;
  std::shared_ptr<std::map<std::string, ImageTensor>> images = std::make_shared<std::map<std::string, ImageTensor>>();

  /// Looks images up by file name; unknown names fail like an unreadable file.
  ImageLoader loader() const {
    auto store = images;
    return [store](const std::filesystem::path& p) -> ImageTensor {
      const auto it = store->find(p.filename().string());
      if (it == store->end()) throw DataError("cannot open image " + p.string());
      return it->second;
    };
  }

  /// PPM files, manifest.tsv and vocab.txt under dir.
  void write_to(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (const auto& [name, image] : *images) write_ppm(image, dir / name);
    std::ofstream m(dir / "manifest.tsv");
    write_manifest(manifest, m);
    std::ofstream v(dir / "vocab.txt");
    for (const auto& e : vocab.entries()) v << e << '\n';
  }
};

inline constexpr std::array<std::array<float, 3>, 4> kStripeColours{
    {{220.f, 40.f, 40.f}, {40.f, 200.f, 40.f}, {40.f, 60.f, 220.f}, {220.f, 200.f, 40.f}}};
inline constexpr std::array<const char*, 4> kColourNames{"red", "green", "blue", "yellow"};

/// Class c has colour c % 4 and horizontal (c < 4) or vertical stripes.
inline ImageTensor stripe_image(Index cls, Index size, Rng& rng, double noise = 20.0) {
  const auto& colour = kStripeColours[static_cast<std::size_t>(cls % 4)];
  const bool vertical = cls >= 4;
  const Index period = std::max<Index>(4, size / 2);
  const auto phase = static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(period)));
  ImageTensor img({3, size, size});
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      const bool on = ((vertical ? x : y) + phase) % period < period / 2;
      for (Index c = 0; c < 3; ++c) {
        const double base = on ? colour[static_cast<std::size_t>(c)] : 30.0;
        img.at(c, y, x) = static_cast<float>(std::clamp(base + rng.gaussian(0.0, noise), 0.0, 255.0));
      }
    }
  return img;
}

/// per_class training images per class (8 classes at most) and test_per_class
/// test images, publishers disjoint between splits.
inline SyntheticDataset make_synthetic_dataset(Index classes = 8, Index per_class = 50, Index test_per_class = 0,
                                               std::uint64_t seed = 1, Index size = 64) {
  SyntheticDataset d;
  std::vector<std::string> names;
  for (Index c = 0; c < classes; ++c)
    names.push_back(std::string(kColourNames[static_cast<std::size_t>(c % 4)]) + (c < 4 ? " rows" : " columns"));
  d.vocab = AnpVocabulary(names);
  Rng rng(seed);
  auto add = [&](Index c, Index i, Split split) {
    const std::string name = std::string(split == Split::train ? "train" : "test") + "_" + std::to_string(c) + "_" +
                             std::to_string(i) + ".ppm";
    (*d.images)[name] = stripe_image(c, size, rng);
    const std::string publisher =
        split == Split::train ? "pub" + std::to_string(c) + "_" + std::to_string(i % 5) : "test_pub" + std::to_string(c);
    d.manifest.records.push_back({name, c, split, publisher});
  };
  // Interleave classes so file order is not sorted by label.
  for (Index i = 0; i < per_class; ++i)
    for (Index c = 0; c < classes; ++c) add(c, i, Split::train);
  for (Index i = 0; i < test_per_class; ++i)
    for (Index c = 0; c < classes; ++c) add(c, i, Split::test);
  return d;
}

}  // namespace sentinet::testing

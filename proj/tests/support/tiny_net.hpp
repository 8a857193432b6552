#pragma once

// Full-topology networks small enough for finite differences and fast tests.

#include <filesystem>
#include <string>

#include "sentinet/network.hpp"

namespace sentinet::testing {

/// Same layer sequence, narrow channels, 67 x 67 input so pool5 is 1 x 1.
inline Architecture tiny_architecture(Index num_classes = 5) {
  Architecture a;
  a.num_classes = num_classes;
  a.input_size = 67;
  a.conv_channels = {4, 8, 8, 8, 8};
  a.fc_width = 6;
  return a;
}

/// Width-reduced network at the real 227 x 227 input, for runs through the
/// data pipeline.
inline Architecture desk_architecture(Index num_classes = 8) {
  Architecture a;
  a.num_classes = num_classes;
  a.conv_channels = {8, 16, 16, 16, 16};
  a.fc_width = 64;
  return a;
}

/// Weights drawn wide enough that activations are well away from ReLU kinks
/// and pooling ties, biases small and random.
template <typename Scalar>
Network<Scalar> tiny_network(Rng& rng, Index num_classes = 5, double weight_std = 0.3) {
  auto model = build<Scalar>(tiny_architecture(num_classes));
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    *params[i] = tensor_gaussian<Scalar>(params[i]->shape(), 0.0, i % 2 == 0 ? weight_std : 0.1, rng);
  return model;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("sentinet_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace sentinet::testing

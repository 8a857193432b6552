#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "sentinet/network.hpp"
#include "sentinet/optim.hpp"

namespace sentinet::cli {

/// Flat key = value run configuration. Command-line flags are applied on top
/// of the file with set().
struct RunConfig {
  std::filesystem::path manifest;
  std::filesystem::path vocab;
  std::filesystem::path weights;
  std::filesystem::path pretrained;
  std::filesystem::path out;
  std::filesystem::path relevance;

  TrainConfig train;
  std::optional<double> base_lr;  // unset: 0.01 from scratch, 0.001 fine-tuning
  bool subtract_mean = true;
  std::array<Index, 5> conv_channels = Architecture{}.conv_channels;
  Index fc_width = Architecture{}.fc_width;
  double dropout_rate = Architecture{}.dropout_rate;
  std::string init = "fixed";  // scratch weights: "fixed" (0.01) or "fan_in"

  Index k = 10;
  std::string mode = "annotation";
  Index subset_size = 1200;
  Index min_train_images = 100;

  /// Assigns one key; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);

  /// Writes every key in a form load_run_config() reads back unchanged.
  void echo(std::ostream& out) const;

  Architecture architecture(Index num_classes) const;
  TrainConfig resolved_train(double default_lr) const;
  InitStddevs init_stddevs(const Architecture& arch) const;
};

RunConfig parse_run_config(std::istream& in, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);
/// Reads a file on top of an existing configuration.
void merge_run_config(RunConfig& config, std::istream& in, const std::string& source);

inline constexpr double kScratchBaseLr = 0.01;
inline constexpr double kFinetuneBaseLr = 0.001;

}  // namespace sentinet::cli

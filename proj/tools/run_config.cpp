#include "run_config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace sentinet::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config: '" + key + "' expects true or false, got '" + v + "'");
}

std::string exact(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string value = trim(raw);
  if (key == "manifest") manifest = value;
  else if (key == "vocab") vocab = value;
  else if (key == "weights") weights = value;
  else if (key == "pretrained") pretrained = value;
  else if (key == "out") out = value;
  else if (key == "relevance") relevance = value;
  else if (key == "seed") train.seed = static_cast<std::uint64_t>(to_int(key, value));
  else if (key == "max_iterations" || key == "iterations") train.max_iterations = to_int(key, value);
  else if (key == "batch_size") train.batch_size = to_int(key, value);
  else if (key == "base_lr") {
    if (value == "default") base_lr.reset();
    else base_lr = to_double(key, value);
  }
  else if (key == "momentum") train.momentum = to_double(key, value);
  else if (key == "weight_decay") train.weight_decay = to_double(key, value);
  else if (key == "lr_drop_every") train.lr_drop_every = to_int(key, value);
  else if (key == "lr_factor") train.lr_factor = to_double(key, value);
  else if (key == "snapshot_every") train.snapshot_every = to_int(key, value);
  else if (key == "subtract_mean") subtract_mean = to_bool(key, value);
  else if (key == "conv_channels") {
    std::stringstream ss(value);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
      if (i == conv_channels.size()) throw ConfigError("config: conv_channels takes exactly 5 values");
      conv_channels[i++] = to_int(key, trim(item));
    }
    if (i != conv_channels.size()) throw ConfigError("config: conv_channels takes exactly 5 values");
  }
  else if (key == "fc_width") fc_width = to_int(key, value);
  else if (key == "dropout_rate") dropout_rate = to_double(key, value);
  else if (key == "init") {
    if (value != "fixed" && value != "fan_in") throw ConfigError("config: init must be 'fixed' or 'fan_in'");
    init = value;
  }
  else if (key == "k") k = to_int(key, value);
  else if (key == "mode") {
    if (value != "annotation" && value != "retrieval")
      throw ConfigError("config: mode must be 'annotation' or 'retrieval'");
    mode = value;
  }
  else if (key == "subset_size") subset_size = to_int(key, value);
  else if (key == "min_train_images") min_train_images = to_int(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

void RunConfig::echo(std::ostream& os) const {
  os << "manifest = " << manifest.string() << '\n'
     << "vocab = " << vocab.string() << '\n'
     << "weights = " << weights.string() << '\n'
     << "pretrained = " << pretrained.string() << '\n'
     << "out = " << out.string() << '\n'
     << "relevance = " << relevance.string() << '\n'
     << "seed = " << train.seed << '\n'
     << "max_iterations = " << train.max_iterations << '\n'
     << "batch_size = " << train.batch_size << '\n'
     << "base_lr = " << (base_lr ? exact(*base_lr) : std::string("default")) << '\n'
     << "momentum = " << exact(train.momentum) << '\n'
     << "weight_decay = " << exact(train.weight_decay) << '\n'
     << "lr_drop_every = " << train.lr_drop_every << '\n'
     << "lr_factor = " << exact(train.lr_factor) << '\n'
     << "snapshot_every = " << train.snapshot_every << '\n'
     << "subtract_mean = " << (subtract_mean ? "true" : "false") << '\n'
     << "conv_channels = " << conv_channels[0] << ',' << conv_channels[1] << ',' << conv_channels[2] << ','
     << conv_channels[3] << ',' << conv_channels[4] << '\n'
     << "fc_width = " << fc_width << '\n'
     << "dropout_rate = " << exact(dropout_rate) << '\n'
     << "init = " << init << '\n'
     << "k = " << k << '\n'
     << "mode = " << mode << '\n'
     << "subset_size = " << subset_size << '\n'
     << "min_train_images = " << min_train_images << '\n';
}

Architecture RunConfig::architecture(Index num_classes) const {
  Architecture a;
  a.num_classes = num_classes;
  a.conv_channels = conv_channels;
  a.fc_width = fc_width;
  a.dropout_rate = dropout_rate;
  return a;
}

TrainConfig RunConfig::resolved_train(double default_lr) const {
  TrainConfig t = train;
  t.base_lr = base_lr.value_or(default_lr);
  return t;
}

InitStddevs RunConfig::init_stddevs(const Architecture& arch) const {
  return init == "fan_in" ? fan_in_stddevs(arch) : fixed_stddevs();
}

void merge_run_config(RunConfig& config, std::istream& in, const std::string& source) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(line_no) + ": expected 'key = value'");
    try {
      config.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

RunConfig parse_run_config(std::istream& in, const std::string& source) {
  RunConfig c;
  merge_run_config(c, in, source);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_run_config(in, path.string());
}

}  // namespace sentinet::cli

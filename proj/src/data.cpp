#include "sentinet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "sentinet/weight_file.hpp"

namespace sentinet {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

// Vocabulary ------------------------------------------------------------------

AnpVocabulary::AnpVocabulary(std::vector<std::string> entries) : entries_(std::move(entries)) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    const auto space = e.find(' ');
    if (space == std::string::npos || space == 0 || space + 1 == e.size() ||
        e.find(' ', space + 1) != std::string::npos)
      throw FormatError("ANP '" + e + "' at index " + std::to_string(i) + " is not \"adjective noun\"");
  }
}

std::string AnpVocabulary::adjective(Index i) const {
  const auto& e = anp(i);
  return e.substr(0, e.find(' '));
}

std::string AnpVocabulary::noun(Index i) const {
  const auto& e = anp(i);
  return e.substr(e.find(' ') + 1);
}

std::optional<Index> AnpVocabulary::index_of(const std::string& anp) const {
  const auto it = std::find(entries_.begin(), entries_.end(), anp);
  if (it == entries_.end()) return std::nullopt;
  return static_cast<Index>(it - entries_.begin());
}

std::uint32_t AnpVocabulary::checksum() const {
  std::string joined;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (i) joined += '\n';
    joined += entries_[i];
  }
  return crc32({reinterpret_cast<const std::uint8_t*>(joined.data()), joined.size()});
}

AnpVocabulary parse_vocabulary(std::istream& in, const std::string& source) {
  std::vector<std::string> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    std::istringstream tokens(line);
    std::vector<std::string> words{std::istream_iterator<std::string>(tokens), {}};
    if (words.size() != 2)
      throw FormatError(source + ":" + std::to_string(line_no) + ": expected \"adjective noun\", got '" + line + "'");
    entries.push_back(words[0] + " " + words[1]);
  }
  if (entries.empty()) throw DataError(source + ": vocabulary is empty");
  return AnpVocabulary(std::move(entries));
}

AnpVocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocabulary " + path.string());
  return parse_vocabulary(in, path.string());
}

// Manifest --------------------------------------------------------------------

std::filesystem::path DatasetManifest::resolve(const ManifestRecord& r) const {
  const std::filesystem::path p(r.path);
  return p.is_absolute() ? p : base_dir / p;
}

std::vector<std::size_t> DatasetManifest::split_indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

DatasetManifest parse_manifest(std::istream& in, const std::string& source) {
  DatasetManifest m;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    const auto fields = split_tabs(line);
    if (fields.size() != 4)
      throw FormatError(where + "expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    ManifestRecord r;
    r.path = fields[0];
    if (r.path.empty()) throw FormatError(where + "empty image path");
    long long idx = -1;
    const auto& f1 = fields[1];
    const auto [ptr, ec] = std::from_chars(f1.data(), f1.data() + f1.size(), idx);
    if (ec != std::errc() || ptr != f1.data() + f1.size() || idx < 0)
      throw FormatError(where + "bad anp_index '" + f1 + "'");
    r.anp_index = static_cast<Index>(idx);
    if (fields[2] == "train")
      r.split = Split::train;
    else if (fields[2] == "test")
      r.split = Split::test;
    else
      throw FormatError(where + "split must be 'train' or 'test', got '" + fields[2] + "'");
    r.publisher_id = fields[3];
    m.records.push_back(std::move(r));
  }
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  auto m = parse_manifest(in, path.string());
  m.base_dir = path.parent_path();
  return m;
}

void write_manifest(const DatasetManifest& manifest, std::ostream& out) {
  for (const auto& r : manifest.records)
    out << r.path << '\t' << r.anp_index << '\t' << (r.split == Split::train ? "train" : "test") << '\t'
        << r.publisher_id << '\n';
}

ManifestReport validate_manifest(const DatasetManifest& manifest, const AnpVocabulary& vocab,
                                 Index min_train_images) {
  ManifestReport report;
  const auto n = static_cast<std::size_t>(vocab.size());
  report.train_counts.assign(n, 0);
  report.test_counts.assign(n, 0);
  std::vector<std::set<std::string>> train_publishers(n), test_publishers(n);
  for (const auto& r : manifest.records) {
    if (r.anp_index >= vocab.size())
      throw FormatError("record '" + r.path + "': anp_index " + std::to_string(r.anp_index) +
                        " outside vocabulary of " + std::to_string(vocab.size()));
    const auto k = static_cast<std::size_t>(r.anp_index);
    if (r.split == Split::train) {
      ++report.train_counts[k];
      train_publishers[k].insert(r.publisher_id);
    } else {
      ++report.test_counts[k];
      test_publishers[k].insert(r.publisher_id);
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    for (const auto& pub : test_publishers[k])
      if (train_publishers[k].contains(pub)) report.publisher_violations.push_back({static_cast<Index>(k), pub});
    if (report.train_counts[k] > 0 && report.train_counts[k] < min_train_images)
      report.under_threshold.push_back({static_cast<Index>(k), report.train_counts[k]});
  }
  return report;
}

void write_manifest_report(const ManifestReport& report, const AnpVocabulary& vocab, std::ostream& out) {
  out << "status\t" << (report.clean() ? "clean" : "violations") << '\n';
  for (const auto& v : report.publisher_violations)
    out << "publisher_overlap\t" << v.anp << '\t' << vocab.anp(v.anp) << '\t' << v.publisher_id << '\n';
  for (const auto& w : report.under_threshold)
    out << "few_train_images\t" << w.anp << '\t' << vocab.anp(w.anp) << '\t' << w.count << '\n';
  out << "anp\tname\ttrain\ttest\n";
  for (Index k = 0; k < vocab.size(); ++k) {
    const auto i = static_cast<std::size_t>(k);
    out << k << '\t' << vocab.anp(k) << '\t' << report.train_counts[i] << '\t' << report.test_counts[i] << '\n';
  }
}

// Images ----------------------------------------------------------------------

ImageTensor decode_ppm(std::span<const std::uint8_t> bytes, const std::string& source) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    long value = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      value = value * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw DataError(source + ": PPM " + what + " too large");
    }
    if (digits == 0) throw DataError(source + ": malformed PPM header (" + what + ")");
    return value;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw DataError(source + ": not a binary PPM (P6)");
  pos = 2;
  const long width = read_int("width");
  const long height = read_int("height");
  const long maxval = read_int("maxval");
  if (width < 1 || height < 1) throw DataError(source + ": PPM has zero extent");
  if (maxval < 1 || maxval > 255) throw DataError(source + ": only 8-bit PPM is supported");
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw DataError(source + ": malformed PPM header");
  ++pos;
  const auto pixels = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos < 3 * pixels) throw DataError(source + ": truncated PPM pixel data");
  ImageTensor img({3, height, width});
  const float scale = 255.0f / static_cast<float>(maxval);
  for (std::size_t p = 0; p < pixels; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      img[static_cast<Index>(c * pixels + p)] = static_cast<float>(bytes[pos + 3 * p + c]) * scale;
  return img;
}

ImageTensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes, path.string());
}

void write_ppm(const ImageTensor& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: image must be [3,H,W]");
  const Index h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<char> row(static_cast<std::size_t>(3 * w));
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) {
        const float v = std::clamp(std::round(image.at(c, y, x)), 0.0f, 255.0f);
        row[static_cast<std::size_t>(3 * x + c)] = static_cast<char>(static_cast<unsigned char>(v));
      }
    out.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError("failed writing " + path.string());
}

namespace {
std::mutex& decoder_mutex() {
  static std::mutex m;
  return m;
}
std::map<std::string, ImageDecoder>& decoders() {
  static std::map<std::string, ImageDecoder> d;
  return d;
}
}  // namespace

void register_image_decoder(const std::string& extension, ImageDecoder decoder) {
  std::lock_guard lock(decoder_mutex());
  decoders()[extension] = std::move(decoder);
}

ImageTensor load_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  ImageDecoder decoder;
  {
    std::lock_guard lock(decoder_mutex());
    if (const auto it = decoders().find(ext); it != decoders().end()) decoder = it->second;
  }
  auto img = decoder ? decoder(path) : read_ppm(path);
  if (img.rank() != 3 || img.dim(0) != 3) throw DataError(path.string() + ": decoder did not return a [3,H,W] image");
  return img;
}

ImageTensor resize_to_canonical(const ImageTensor& image, Index size) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("resize: image must be [3,H,W]");
  const Index in_h = image.dim(1), in_w = image.dim(2);
  if (in_h == size && in_w == size) return image;

  struct Tap {
    Index lo, hi;
    float frac;
  };
  auto taps = [size](Index in) {
    std::vector<Tap> t(static_cast<std::size_t>(size));
    const double ratio = static_cast<double>(in) / static_cast<double>(size);
    for (Index o = 0; o < size; ++o) {
      const double src = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<Index>(std::floor(src));
      const Index hi = std::min(lo + 1, in - 1);
      t[static_cast<std::size_t>(o)] = {lo, hi, static_cast<float>(src - static_cast<double>(lo))};
    }
    return t;
  };
  const auto ty = taps(in_h);
  const auto tx = taps(in_w);
  ImageTensor out({3, size, size});
  for (Index c = 0; c < 3; ++c)
    for (Index y = 0; y < size; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (Index x = 0; x < size; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const float top = image.at(c, a.lo, b.lo) + b.frac * (image.at(c, a.lo, b.hi) - image.at(c, a.lo, b.lo));
        const float bot = image.at(c, a.hi, b.lo) + b.frac * (image.at(c, a.hi, b.hi) - image.at(c, a.hi, b.lo));
        out.at(c, y, x) = top + a.frac * (bot - top);
      }
    }
  return out;
}

CropWindow draw_crop(Rng& rng) {
  CropWindow w;
  w.y = static_cast<Index>(rng.uniform_int(kCropRange));
  w.x = static_cast<Index>(rng.uniform_int(kCropRange));
  w.flip = rng.bernoulli(0.5);
  return w;
}

ImageTensor extract_crop(const ImageTensor& canonical, CropWindow window, const ChannelMeans& means) {
  if (canonical.shape() != Shape{3, kCanonicalSize, kCanonicalSize})
    throw ShapeError("crop: expected a 3x256x256 image, got " + shape_string(canonical.shape()));
  if (window.y < 0 || window.y >= kCropRange || window.x < 0 || window.x >= kCropRange)
    throw ParameterError("crop: offset outside [0, 29]");
  ImageTensor out({3, kCropSize, kCropSize});
  for (Index c = 0; c < 3; ++c) {
    const auto mean = static_cast<float>(means[static_cast<std::size_t>(c)]);
    for (Index y = 0; y < kCropSize; ++y)
      for (Index x = 0; x < kCropSize; ++x) {
        const Index sx = window.flip ? window.x + kCropSize - 1 - x : window.x + x;
        out.at(c, y, x) = canonical.at(c, window.y + y, sx) - mean;
      }
  }
  return out;
}

ImageTensor augment_train(const ImageTensor& canonical, const ChannelMeans& means, Rng& rng) {
  return extract_crop(canonical, draw_crop(rng), means);
}

ImageTensor center_crop(const ImageTensor& canonical, const ChannelMeans& means) {
  return extract_crop(canonical, {kCenterOffset, kCenterOffset, false}, means);
}

ChannelMeans compute_channel_means(const DatasetManifest& manifest, const ImageLoader& loader) {
  std::array<double, 3> sum{0, 0, 0};
  std::size_t images = 0;
  for (const auto i : manifest.split_indices(Split::train)) {
    ImageTensor img;
    try {
      img = resize_to_canonical(loader(manifest.resolve(manifest.records[i])));
    } catch (const Error&) {
      continue;
    }
    const auto m = img.matrix(3, kCanonicalSize * kCanonicalSize);
    for (Index c = 0; c < 3; ++c) sum[static_cast<std::size_t>(c)] += m.row(c).template cast<double>().mean();
    ++images;
  }
  if (images == 0) throw DataError("no readable training images to compute channel means");
  // Rounded to f32, the precision the weight file keeps, so a saved model
  // reloads with exactly the means it was trained with. The volatile stops
  // GCC 11's -O3 vectorizer from dropping the float round trip.
  for (auto& s : sum) {
    volatile float stored = static_cast<float>(s / static_cast<double>(images));
    s = stored;
  }
  return sum;
}

Batch make_batch(const DatasetManifest& manifest, std::span<const std::size_t> record_indices, Mode mode,
                 const ChannelMeans& means, Rng& rng, const ImageLoader& loader) {
  Batch batch;
  std::vector<ImageTensor> crops;
  for (std::size_t pos = 0; pos < record_indices.size(); ++pos) {
    const std::size_t idx = record_indices[pos];
    const auto& rec = manifest.records.at(idx);
    try {
      const auto canonical = resize_to_canonical(loader(manifest.resolve(rec)));
      if (mode == Mode::train) {
        Rng item_rng = rng.split(pos);
        crops.push_back(augment_train(canonical, means, item_rng));
      } else {
        crops.push_back(center_crop(canonical, means));
      }
    } catch (const DataError& e) {
      batch.skipped.push_back(idx);
      batch.warnings.push_back(std::string("skipping ") + rec.path + ": " + e.what());
      continue;
    }
    batch.labels.push_back(rec.anp_index);
    batch.records.push_back(idx);
  }
  if (crops.empty()) throw DataError("batch has no loadable images");
  const Index per = 3 * kCropSize * kCropSize;
  batch.images = Tensor<float>({static_cast<Index>(crops.size()), 3, kCropSize, kCropSize});
  for (std::size_t b = 0; b < crops.size(); ++b) batch.images.vec().segment(static_cast<Index>(b) * per, per) = crops[b].vec();
  return batch;
}

}  // namespace sentinet

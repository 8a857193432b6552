#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sentinet/data.hpp"
#include "sentinet/network.hpp"

namespace sentinet {

/// Softmax outputs for M test images over K ANPs.
struct PredictionMatrix {
  Eigen::MatrixXd probs;  // [M, K]
  std::vector<Index> labels;
  std::vector<std::string> image_ids;

  Index images() const { return probs.rows(); }
  Index classes() const { return probs.cols(); }

  /// Throws unless dimensions agree, labels are in range and every row sums
  /// to 1 within tolerance.
  void validate(double tolerance = 1e-5) const;
};

/// Position of `label` when row is sorted by descending probability, ties
/// placing the lower class index first. Zero-based.
Index label_rank(const Eigen::Ref<const Eigen::RowVectorXd>& row, Index label);

struct TopKAccuracy {
  double overall = 0.0;
  std::map<Index, double> per_anp;  // ANPs that have at least one image
};

/// Fraction of images whose label is among the k most probable classes.
TopKAccuracy topk_accuracy(const PredictionMatrix& pred, Index k);

inline constexpr std::array<Index, 3> kReportedK{1, 5, 10};

struct AnnotationReport {
  std::array<Index, 3> k{};  // k actually used, min(kReportedK, K)
  std::array<double, 3> overall{};
  std::map<Index, std::array<double, 3>> per_anp;
  std::map<Index, Index> images_per_anp;
  std::vector<Index> ranked_by_top10;  // every evaluated ANP, best first

  std::vector<Index> subset;  // top-n ANPs by top-10 accuracy
  std::array<double, 3> subset_overall{};
};

struct AnpSubset {
  std::vector<Index> anps;
  std::array<double, 3> overall{};  // image-level accuracy over images of these ANPs
};

/// The n ANPs with the highest top-10 accuracy (ties to the lower index),
/// with top-1/5/10 recomputed over the images whose label is in the subset.
/// n larger than the number of evaluated ANPs selects all of them.
AnpSubset select_top_anps(const PredictionMatrix& pred, const AnnotationReport& report, Index n = 1200);

/// Top-1/5/10 per ANP and overall, plus the top-n subset.
AnnotationReport annotation_report(const PredictionMatrix& pred, Index subset_size = 1200);

/// AP over the first `depth` ranks:
///   (1 / min(P, depth)) * sum_{r <= depth} rel(r) * (positives in top r) / r
/// where P = num_positives. relevance[r] is 1 for a positive at rank r + 1.
double average_precision_at(std::span<const std::uint8_t> relevance, Index num_positives, Index depth = 20);

/// AP@20 of a ranked list of image ids against a positive set.
double average_precision_at_20(std::span<const std::string> ranking, const std::set<std::string>& positives);

// Retrieval -----------------------------------------------------------------------

/// One manual relevance judgement: image_id<TAB>anp_index<TAB>0|1.
struct RelevanceRecord {
  std::string image_id;
  Index anp_index = 0;
  bool relevant = false;
};

std::vector<RelevanceRecord> parse_relevance(std::istream& in, const std::string& source = "relevance");
std::vector<RelevanceRecord> load_relevance(const std::filesystem::path& path);

struct RetrievalReport {
  std::map<Index, double> ap;  // per ANP
  std::map<std::string, std::pair<Index, double>> noun_map;  // noun -> (ANP count, mAP)
  double overall_map = 0.0;
};

/// Ranks each ANP's judged images by score(image_id, anp) descending, ties by
/// ascending image id, and scores AP@20. Per-noun and overall mAP are
/// unweighted means over ANPs.
RetrievalReport retrieval_from_scores(const std::vector<RelevanceRecord>& judgements, const AnpVocabulary& vocab,
                                      const std::function<double(const std::string&, Index)>& score);

// Report tables -----------------------------------------------------------------

void write_annotation_table(const std::vector<std::pair<std::string, AnnotationReport>>& runs, std::ostream& out);
void write_per_anp_table(const AnnotationReport& report, const AnpVocabulary& vocab, std::ostream& out);
void write_retrieval_tables(const RetrievalReport& report, const AnpVocabulary& vocab, std::ostream& ap_out,
                            std::ostream& noun_out);

// Model-driven evaluation ---------------------------------------------------------

/// Test-mode probabilities for one raw image: canonical resize, centre crop,
/// one forward pass.
template <typename Scalar>
Tensor<Scalar> image_probabilities(const Network<Scalar>& model, const ImageTensor& image) {
  const auto crop = center_crop(resize_to_canonical(image), model.channel_means);
  Tensor<Scalar> batch = reshape(crop.template cast<Scalar>(), {1, 3, kCropSize, kCropSize});
  return predict(model, batch);
}

struct Annotation {
  Index anp = 0;
  std::string name;
  double probability = 0.0;
};

/// The k most probable ANPs for an image, by descending probability (ties to
/// the lower index).
template <typename Scalar>
std::vector<Annotation> annotate(const Network<Scalar>& model, const AnpVocabulary& vocab, const ImageTensor& image,
                                 Index k) {
  if (vocab.size() != model.num_classes())
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " ANPs but the model has " +
                      std::to_string(model.num_classes()) + " classes");
  if (k < 1 || k > model.num_classes()) throw ParameterError("annotate: k must be in [1, K]");
  const auto probs = image_probabilities(model, image);
  std::vector<Index> order(static_cast<std::size_t>(probs.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return probs[a] > probs[b]; });
  std::vector<Annotation> out;
  for (Index i = 0; i < k; ++i) {
    const Index c = order[static_cast<std::size_t>(i)];
    out.push_back({c, vocab.anp(c), static_cast<double>(probs[c])});
  }
  return out;
}

/// Centre-crop predictions for the given manifest records. Records that fail
/// to load are reported through `skipped`.
template <typename Scalar>
PredictionMatrix predict_records(const Network<Scalar>& model, const DatasetManifest& manifest,
                                 std::span<const std::size_t> records, std::vector<std::size_t>* skipped = nullptr,
                                 const ImageLoader& loader = load_image, Index chunk = 32) {
  PredictionMatrix pred;
  pred.probs.resize(0, model.num_classes());
  std::vector<Eigen::RowVectorXd> rows;
  Rng unused(0);
  for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(chunk)) {
    const auto slice = records.subspan(start, std::min<std::size_t>(static_cast<std::size_t>(chunk), records.size() - start));
    Batch b;
    try {
      b = make_batch(manifest, slice, Mode::test, model.channel_means, unused, loader);
    } catch (const DataError&) {
      if (skipped) skipped->insert(skipped->end(), slice.begin(), slice.end());
      continue;
    }
    if (skipped) skipped->insert(skipped->end(), b.skipped.begin(), b.skipped.end());
    Tensor<Scalar> images;
    if constexpr (std::is_same_v<Scalar, float>)
      images = std::move(b.images);
    else
      images = b.images.template cast<Scalar>();
    const auto probs = predict(model, images);
    for (std::size_t i = 0; i < b.records.size(); ++i) {
      rows.push_back(probs.matrix().row(static_cast<Index>(i)).template cast<double>());
      pred.labels.push_back(b.labels[i]);
      pred.image_ids.push_back(manifest.records[b.records[i]].path);
    }
  }
  pred.probs.resize(static_cast<Index>(rows.size()), model.num_classes());
  for (std::size_t i = 0; i < rows.size(); ++i) pred.probs.row(static_cast<Index>(i)) = rows[i];
  return pred;
}

/// Scores every judged image once and ranks it for each ANP it is judged for.
/// Image ids resolve against base_dir like manifest paths.
template <typename Scalar>
RetrievalReport retrieval_eval(const Network<Scalar>& model, const std::vector<RelevanceRecord>& judgements,
                               const AnpVocabulary& vocab, const std::filesystem::path& base_dir,
                               const ImageLoader& loader = load_image) {
  if (vocab.size() != model.num_classes())
    throw ConfigError("vocabulary and model class counts differ");
  if (judgements.empty()) throw DataError("no relevance annotations");
  std::map<std::string, Eigen::VectorXd> cache;
  for (const auto& j : judgements) {
    if (cache.contains(j.image_id)) continue;
    const std::filesystem::path p(j.image_id);
    const auto probs = image_probabilities(model, loader(p.is_absolute() ? p : base_dir / p));
    cache.emplace(j.image_id, probs.vec().template cast<double>());
  }
  return retrieval_from_scores(judgements, vocab,
                               [&](const std::string& id, Index anp) { return cache.at(id)[anp]; });
}

}  // namespace sentinet

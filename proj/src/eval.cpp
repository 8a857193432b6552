#include "sentinet/eval.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>

namespace sentinet {

void PredictionMatrix::validate(double tolerance) const {
  if (static_cast<Index>(labels.size()) != probs.rows())
    throw ShapeError("prediction matrix: one label per row required");
  if (!image_ids.empty() && static_cast<Index>(image_ids.size()) != probs.rows())
    throw ShapeError("prediction matrix: one image id per row required");
  for (Index i = 0; i < probs.rows(); ++i) {
    const auto label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= probs.cols()) throw IndexError("prediction matrix: label out of range");
    if (std::abs(probs.row(i).sum() - 1.0) > tolerance)
      throw DataError("prediction matrix: row " + std::to_string(i) + " does not sum to 1");
  }
}

Index label_rank(const Eigen::Ref<const Eigen::RowVectorXd>& row, Index label) {
  const double p = row[label];
  Index rank = 0;
  for (Index j = 0; j < row.size(); ++j)
    if (row[j] > p || (row[j] == p && j < label)) ++rank;
  return rank;
}

namespace {

void check_k(const PredictionMatrix& pred, Index k) {
  if (k < 1) throw ParameterError("top-k: k must be at least 1");
  if (k > pred.classes())
    throw ParameterError("top-k: k = " + std::to_string(k) + " exceeds " + std::to_string(pred.classes()) + " classes");
}

}  // namespace

TopKAccuracy topk_accuracy(const PredictionMatrix& pred, Index k) {
  check_k(pred, k);
  if (static_cast<Index>(pred.labels.size()) != pred.images()) throw ShapeError("top-k: one label per row required");
  TopKAccuracy r;
  std::map<Index, std::pair<Index, Index>> hits;  // anp -> (correct, total)
  Index correct = 0;
  for (Index i = 0; i < pred.images(); ++i) {
    const Index label = pred.labels[static_cast<std::size_t>(i)];
    const bool hit = label_rank(pred.probs.row(i), label) < k;
    correct += hit;
    auto& h = hits[label];
    h.first += hit;
    ++h.second;
  }
  r.overall = pred.images() ? static_cast<double>(correct) / static_cast<double>(pred.images()) : 0.0;
  for (const auto& [anp, h] : hits) r.per_anp[anp] = static_cast<double>(h.first) / static_cast<double>(h.second);
  return r;
}

AnpSubset select_top_anps(const PredictionMatrix& pred, const AnnotationReport& report, Index n) {
  AnpSubset s;
  const Index take = std::min<Index>(std::max<Index>(n, 0), static_cast<Index>(report.ranked_by_top10.size()));
  s.anps.assign(report.ranked_by_top10.begin(), report.ranked_by_top10.begin() + take);
  const std::set<Index> members(s.anps.begin(), s.anps.end());
  std::array<Index, 3> correct{};
  Index total = 0;
  for (Index i = 0; i < pred.images(); ++i) {
    const Index label = pred.labels[static_cast<std::size_t>(i)];
    if (!members.contains(label)) continue;
    ++total;
    const Index rank = label_rank(pred.probs.row(i), label);
    for (std::size_t j = 0; j < 3; ++j) correct[j] += rank < report.k[j];
  }
  for (std::size_t j = 0; j < 3; ++j)
    s.overall[j] = total ? static_cast<double>(correct[j]) / static_cast<double>(total) : 0.0;
  return s;
}

AnnotationReport annotation_report(const PredictionMatrix& pred, Index subset_size) {
  AnnotationReport r;
  for (std::size_t j = 0; j < 3; ++j) {
    r.k[j] = std::min(kReportedK[j], pred.classes());
    const auto acc = topk_accuracy(pred, r.k[j]);
    r.overall[j] = acc.overall;
    for (const auto& [anp, a] : acc.per_anp) r.per_anp[anp][j] = a;
  }
  for (const auto label : pred.labels) ++r.images_per_anp[label];
  for (const auto& [anp, acc] : r.per_anp) r.ranked_by_top10.push_back(anp);
  std::stable_sort(r.ranked_by_top10.begin(), r.ranked_by_top10.end(),
                   [&](Index a, Index b) { return r.per_anp.at(a)[2] > r.per_anp.at(b)[2]; });
  const auto subset = select_top_anps(pred, r, subset_size);
  r.subset = subset.anps;
  r.subset_overall = subset.overall;
  return r;
}

double average_precision_at(std::span<const std::uint8_t> relevance, Index num_positives, Index depth) {
  if (depth < 1) throw ParameterError("AP: depth must be positive");
  if (static_cast<Index>(relevance.size()) < depth)
    throw ParameterError("AP@" + std::to_string(depth) + " needs at least " + std::to_string(depth) +
                         " ranked items, got " + std::to_string(relevance.size()));
  if (num_positives < 1) throw ParameterError("AP: no positives");
  double sum = 0.0;
  Index hits = 0;
  for (Index r = 0; r < depth; ++r)
    if (relevance[static_cast<std::size_t>(r)]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  return sum / static_cast<double>(std::min(num_positives, depth));
}

double average_precision_at_20(std::span<const std::string> ranking, const std::set<std::string>& positives) {
  std::vector<std::uint8_t> rel(ranking.size());
  for (std::size_t i = 0; i < ranking.size(); ++i) rel[i] = positives.contains(ranking[i]);
  return average_precision_at(rel, static_cast<Index>(positives.size()), 20);
}

std::vector<RelevanceRecord> parse_relevance(std::istream& in, const std::string& source) {
  std::vector<RelevanceRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto where = source + ":" + std::to_string(line_no) + ": ";
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos)
      throw FormatError(where + "expected image_id<TAB>anp_index<TAB>relevant");
    RelevanceRecord r;
    r.image_id = line.substr(0, t1);
    const std::string idx = line.substr(t1 + 1, t2 - t1 - 1);
    long long v = -1;
    const auto [ptr, ec] = std::from_chars(idx.data(), idx.data() + idx.size(), v);
    if (ec != std::errc() || ptr != idx.data() + idx.size() || v < 0) throw FormatError(where + "bad anp_index '" + idx + "'");
    r.anp_index = static_cast<Index>(v);
    const std::string rel = line.substr(t2 + 1);
    if (rel != "0" && rel != "1") throw FormatError(where + "relevance must be 0 or 1");
    r.relevant = rel == "1";
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RelevanceRecord> load_relevance(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open relevance file " + path.string());
  return parse_relevance(in, path.string());
}

RetrievalReport retrieval_from_scores(const std::vector<RelevanceRecord>& judgements, const AnpVocabulary& vocab,
                                      const std::function<double(const std::string&, Index)>& score) {
  if (judgements.empty()) throw DataError("no relevance annotations");
  std::map<Index, std::vector<std::pair<std::string, bool>>> per_anp;
  for (const auto& j : judgements) {
    if (j.anp_index >= vocab.size()) throw FormatError("relevance: anp_index " + std::to_string(j.anp_index) + " outside vocabulary");
    per_anp[j.anp_index].emplace_back(j.image_id, j.relevant);
  }
  RetrievalReport report;
  std::map<std::string, std::vector<double>> by_noun;
  for (auto& [anp, items] : per_anp) {
    if (items.size() < 20)
      throw DataError("ANP '" + vocab.anp(anp) + "' has " + std::to_string(items.size()) +
                      " judged images; AP@20 needs at least 20");
    std::vector<std::pair<double, std::size_t>> keyed;
    Index positives = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      keyed.emplace_back(score(items[i].first, anp), i);
      positives += items[i].second;
    }
    if (positives == 0) throw DataError("ANP '" + vocab.anp(anp) + "' has no positive judgements");
    std::sort(keyed.begin(), keyed.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return items[a.second].first < items[b.second].first;
    });
    std::vector<std::uint8_t> rel;
    for (const auto& [s, i] : keyed) rel.push_back(items[i].second);
    const double ap = average_precision_at(rel, positives, 20);
    report.ap[anp] = ap;
    by_noun[vocab.noun(anp)].push_back(ap);
  }
  double total = 0.0;
  for (const auto& [anp, ap] : report.ap) total += ap;
  report.overall_map = total / static_cast<double>(report.ap.size());
  for (const auto& [noun, aps] : by_noun) {
    double s = 0.0;
    for (double a : aps) s += a;
    report.noun_map[noun] = {static_cast<Index>(aps.size()), s / static_cast<double>(aps.size())};
  }
  return report;
}

namespace {
std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}
}  // namespace

void write_annotation_table(const std::vector<std::pair<std::string, AnnotationReport>>& runs, std::ostream& out) {
  out << "run\tfull_top1\tfull_top5\tfull_top10\tsubset_top1\tsubset_top5\tsubset_top10\tsubset_anps\n";
  for (const auto& [name, r] : runs) {
    out << name;
    for (double v : r.overall) out << '\t' << fixed6(v);
    for (double v : r.subset_overall) out << '\t' << fixed6(v);
    out << '\t' << r.subset.size() << '\n';
  }
}

void write_per_anp_table(const AnnotationReport& report, const AnpVocabulary& vocab, std::ostream& out) {
  out << "rank\tanp\tname\timages\ttop1\ttop5\ttop10\n";
  Index rank = 1;
  for (const Index anp : report.ranked_by_top10) {
    const auto& a = report.per_anp.at(anp);
    out << rank++ << '\t' << anp << '\t' << vocab.anp(anp) << '\t' << report.images_per_anp.at(anp) << '\t'
        << fixed6(a[0]) << '\t' << fixed6(a[1]) << '\t' << fixed6(a[2]) << '\n';
  }
}

void write_retrieval_tables(const RetrievalReport& report, const AnpVocabulary& vocab, std::ostream& ap_out,
                            std::ostream& noun_out) {
  ap_out << "anp\tname\tnoun\tap@20\n";
  for (const auto& [anp, ap] : report.ap)
    ap_out << anp << '\t' << vocab.anp(anp) << '\t' << vocab.noun(anp) << '\t' << fixed6(ap) << '\n';
  noun_out << "noun\tanps\tmAP\n";
  for (const auto& [noun, v] : report.noun_map) noun_out << noun << '\t' << v.first << '\t' << fixed6(v.second) << '\n';
  noun_out << "all\t" << report.ap.size() << '\t' << fixed6(report.overall_map) << '\n';
}

}  // namespace sentinet

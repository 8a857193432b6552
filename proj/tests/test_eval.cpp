#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <sstream>

#include "sentinet/eval.hpp"
#include "support/synthetic.hpp"
#include "support/tiny_net.hpp"

using namespace sentinet;
using sentinet::testing::desk_architecture;
using sentinet::testing::make_synthetic_dataset;

namespace {

PredictionMatrix random_predictions(Index m, Index k, Rng& rng, bool with_ties = false) {
  PredictionMatrix p;
  p.probs.resize(m, k);
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < k; ++j)
      p.probs(i, j) = with_ties ? static_cast<double>(rng.uniform_int(4) + 1) : rng.uniform01() + 1e-3;
    p.probs.row(i) /= p.probs.row(i).sum();
    p.labels.push_back(static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(k))));
  }
  return p;
}

// Sorts the whole row; the label's position in that order is its rank.
bool in_top_k_by_sorting(const Eigen::RowVectorXd& row, Index label, Index k) {
  std::vector<Index> order(static_cast<std::size_t>(row.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return row[a] != row[b] ? row[a] > row[b] : a < b; });
  return std::find(order.begin(), order.begin() + k, label) != order.begin() + k;
}

// AP@20 straight from the definition: precision at r recounted from scratch.
double brute_force_ap20(const std::vector<std::string>& ranking, const std::set<std::string>& positives) {
  double total = 0;
  for (std::size_t r = 1; r <= 20; ++r) {
    if (!positives.contains(ranking[r - 1])) continue;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < r; ++i) hits += positives.count(ranking[i]);
    total += static_cast<double>(hits) / static_cast<double>(r);
  }
  return total / static_cast<double>(std::min<std::size_t>(positives.size(), 20));
}

std::vector<std::string> ids(std::size_t n, const std::string& prefix = "img") {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(1000 + i));
  return out;
}

}  // namespace

TEST_CASE("label_rank and top-k semantics") {
  Eigen::RowVectorXd row(6);
  row << 0.1, 0.3, 0.05, 0.2, 0.25, 0.1;
  CHECK(label_rank(row, 1) == 0);
  CHECK(label_rank(row, 3) == 2);
  CHECK(label_rank(row, 0) == 3);
  CHECK(label_rank(row, 5) == 4);  // tie with class 0 ranks below it
  CHECK(label_rank(row, 2) == 5);

  PredictionMatrix p;
  p.probs = row;
  p.labels = {3};
  CHECK(topk_accuracy(p, 1).overall == 0.0);
  CHECK(topk_accuracy(p, 3).overall == 1.0);
  CHECK(topk_accuracy(p, 5).overall == 1.0);
  CHECK_THROWS_AS(topk_accuracy(p, 0), ParameterError);
  CHECK_THROWS_AS(topk_accuracy(p, 7), ParameterError);
}

TEST_CASE("top-k: uniform predictions at k = K") {
  PredictionMatrix p;
  p.probs = Eigen::MatrixXd::Constant(9, 4, 0.25);
  p.labels = {0, 1, 2, 3, 3, 2, 1, 0, 3};
  CHECK(topk_accuracy(p, 4).overall == 1.0);
  CHECK(topk_accuracy(p, 1).overall == doctest::Approx(2.0 / 9));  // only label 0 wins ties
  CHECK_NOTHROW(p.validate());
}

TEST_CASE("top-k: matches sorting each row") {
  Rng rng(1);
  for (bool ties : {false, true}) {
    const auto p = random_predictions(50, 11, rng, ties);
    for (Index k = 1; k <= 11; ++k) {
      const auto acc = topk_accuracy(p, k);
      std::map<Index, std::pair<int, int>> per;
      int hits = 0;
      for (Index i = 0; i < 50; ++i) {
        const Index label = p.labels[static_cast<std::size_t>(i)];
        const bool hit = in_top_k_by_sorting(p.probs.row(i), label, k);
        hits += hit;
        per[label].first += hit;
        per[label].second += 1;
      }
      CHECK(acc.overall == static_cast<double>(hits) / 50.0);
      for (const auto& [anp, h] : per) CHECK(acc.per_anp.at(anp) == static_cast<double>(h.first) / h.second);
    }
  }
}

TEST_CASE("top-k: monotone in k") {
  Rng rng(2);
  const auto p = random_predictions(80, 15, rng);
  for (Index k = 2; k <= 15; ++k) {
    const auto lo = topk_accuracy(p, k - 1), hi = topk_accuracy(p, k);
    CHECK(lo.overall <= hi.overall);
    for (const auto& [anp, a] : lo.per_anp) CHECK(a <= hi.per_anp.at(anp));
  }
  const auto r = annotation_report(p);
  CHECK(r.overall[0] <= r.overall[1]);
  CHECK(r.overall[1] <= r.overall[2]);
}

TEST_CASE("annotation report: subset selection") {
  // Three ANPs with top-10 accuracies 0.9, 0.5, 0.1 over 10 images each, K = 20.
  PredictionMatrix p;
  const Index K = 20;
  p.probs = Eigen::MatrixXd::Constant(30, K, 0.0);
  for (Index anp = 0; anp < 3; ++anp) {
    const int good = anp == 0 ? 9 : anp == 1 ? 5 : 1;
    for (int i = 0; i < 10; ++i) {
      const Index row = anp * 10 + i;
      for (Index j = 0; j < K; ++j) p.probs(row, j) = static_cast<double>(K - j);  // class 0 most probable
      if (i < good) std::swap(p.probs(row, anp), p.probs(row, 3));  // rank 3: inside top 10
      else std::swap(p.probs(row, anp), p.probs(row, 15));          // rank 15: outside
      p.probs.row(row) /= p.probs.row(row).sum();
      p.labels.push_back(anp);
    }
  }
  const auto r = annotation_report(p, 2);
  CHECK(r.per_anp.at(0)[2] == doctest::Approx(0.9));
  CHECK(r.per_anp.at(1)[2] == doctest::Approx(0.5));
  CHECK(r.per_anp.at(2)[2] == doctest::Approx(0.1));
  CHECK(r.subset == std::vector<Index>{0, 1});
  CHECK(r.subset_overall[2] == doctest::Approx(14.0 / 20));
  CHECK(r.k == std::array<Index, 3>{1, 5, 10});

  const auto all = select_top_anps(p, r, 1200);
  CHECK(all.anps.size() == 3);
  for (std::size_t j = 0; j < 3; ++j) CHECK(all.overall[j] == r.overall[j]);
}

TEST_CASE("annotation report: ties at the cutoff go to the lower index") {
  PredictionMatrix p;
  p.probs = Eigen::MatrixXd::Constant(3, 12, 1.0 / 12);
  p.labels = {7, 2, 5};
  const auto r = annotation_report(p, 2);
  // Uniform rows put every label inside the top 10, so all three tie at 1.0.
  CHECK(r.ranked_by_top10 == std::vector<Index>{2, 5, 7});
  CHECK(r.subset == std::vector<Index>{2, 5});
}

TEST_CASE("annotation report: k is clamped to the class count") {
  Rng rng(3);
  const auto p = random_predictions(12, 4, rng);
  const auto r = annotation_report(p);
  CHECK(r.k == std::array<Index, 3>{1, 4, 4});
  CHECK(r.overall[2] == 1.0);
  std::ostringstream table;
  write_annotation_table({{"toy", r}}, table);
  CHECK(table.str().rfind("run\tfull_top1\tfull_top5\tfull_top10\tsubset_top1\tsubset_top5\tsubset_top10\tsubset_anps\n", 0) == 0);
  CHECK(table.str().find("toy\t") != std::string::npos);
}

TEST_CASE("AP@20: reference cases") {
  const auto ranking = ids(60);
  std::set<std::string> first20(ranking.begin(), ranking.begin() + 20);
  CHECK(average_precision_at_20(ranking, first20) == 1.0);
  std::set<std::string> last20(ranking.begin() + 40, ranking.end());
  CHECK(average_precision_at_20(ranking, last20) == 0.0);
  // One positive at rank 2: precision 1/2, normalised by min(1, 20).
  CHECK(average_precision_at_20(ranking, {ranking[1]}) == 0.5);
  // Positives at ranks 1 and 3 out of 4 total: (1 + 2/3) / 4.
  CHECK(average_precision_at_20(ranking, {ranking[0], ranking[2], ranking[30], ranking[31]}) ==
        doctest::Approx((1.0 + 2.0 / 3.0) / 4.0));

  const std::vector<std::string> short_list = ids(19);
  CHECK_THROWS_AS(average_precision_at_20(short_list, {short_list[0]}), ParameterError);
  CHECK_THROWS_AS(average_precision_at_20(ranking, {}), ParameterError);
}

TEST_CASE("AP@20: brute force on 1000 random 20/40 rankings") {
  Rng rng(4);
  auto ranking = ids(60);
  const std::set<std::string> positives(ranking.begin(), ranking.begin() + 20);
  double mean = 0;
  for (int t = 0; t < 1000; ++t) {
    for (std::size_t i = ranking.size() - 1; i > 0; --i) std::swap(ranking[i], ranking[rng.uniform_int(i + 1)]);
    const double ap = average_precision_at_20(ranking, positives);
    CHECK(ap == brute_force_ap20(ranking, positives));
    mean += ap / 1000;
  }
  // Expectation under a uniformly random order: the item at rank r is
  // positive with probability 20/60 and then has (r-1) * 19/59 positives
  // expected above it.
  double expected = 0;
  for (int r = 1; r <= 20; ++r) expected += (20.0 / 60.0) * (1.0 + (r - 1) * 19.0 / 59.0) / r / 20.0;
  CHECK(expected == doctest::Approx(0.148).epsilon(0.01));
  CHECK(std::abs(mean - expected) < 0.02);
}

TEST_CASE("AP@20: items below rank 20 do not matter") {
  Rng rng(5);
  auto ranking = ids(60);
  std::set<std::string> positives;
  for (std::size_t i = 0; i < 60; i += 3) positives.insert(ranking[i]);
  const double ap = average_precision_at_20(ranking, positives);
  for (int t = 0; t < 50; ++t) {
    for (std::size_t i = 59; i > 20; --i) std::swap(ranking[i], ranking[20 + rng.uniform_int(i - 20 + 1)]);
    CHECK(average_precision_at_20(ranking, positives) == ap);
  }
}

TEST_CASE("relevance files") {
  std::istringstream in("a.ppm\t3\t1\nb.ppm\t0\t0\r\n\n");
  const auto r = parse_relevance(in);
  REQUIRE(r.size() == 2);
  CHECK(r[0].image_id == "a.ppm");
  CHECK(r[0].anp_index == 3);
  CHECK(r[0].relevant);
  CHECK_FALSE(r[1].relevant);
  std::istringstream bad("a.ppm\t3\t2\n");
  CHECK_THROWS_AS(parse_relevance(bad), FormatError);
  std::istringstream fields("a.ppm\t3\n");
  CHECK_THROWS_AS(parse_relevance(fields), FormatError);
  CHECK_THROWS_AS(load_relevance("/nonexistent/rel.tsv"), DataError);
}

TEST_CASE("retrieval: six nouns over 135 ANPs") {
  const std::vector<std::string> nouns{"car", "dog", "dress", "face", "flower", "food"};
  std::vector<std::string> entries;
  for (int i = 0; i < 135; ++i) entries.push_back("adj" + std::to_string(i) + " " + nouns[static_cast<std::size_t>(i % 6)]);
  const AnpVocabulary vocab(entries);
  std::vector<RelevanceRecord> judgements;
  Rng rng(6);
  for (Index anp = 0; anp < 135; ++anp)
    for (int i = 0; i < 60; ++i)
      judgements.push_back({"a" + std::to_string(anp) + "_" + std::to_string(i), anp, i < 20});
  std::map<std::pair<std::string, Index>, double> scores;
  for (const auto& j : judgements) scores[{j.image_id, j.anp_index}] = rng.uniform01() + (j.relevant ? 0.3 : 0.0);
  auto score = [&](const std::string& id, Index anp) { return scores.at({id, anp}); };

  const auto report = retrieval_from_scores(judgements, vocab, score);
  CHECK(report.ap.size() == 135);
  REQUIRE(report.noun_map.size() == 6);
  Index anps = 0;
  for (const auto& [noun, v] : report.noun_map) anps += v.first;
  CHECK(anps == 135);
  CHECK(report.noun_map.at("car").first == 23);
  CHECK(report.noun_map.at("food").first == 22);

  double mean = 0;
  for (const auto& [anp, ap] : report.ap) mean += ap / 135;
  CHECK(report.overall_map == doctest::Approx(mean).epsilon(1e-12));
  double dog = 0;
  for (const auto& [anp, ap] : report.ap) dog += vocab.noun(anp) == "dog" ? ap / 23 : 0.0;
  CHECK(report.noun_map.at("dog").second == doctest::Approx(dog).epsilon(1e-12));

  auto shuffled = judgements;
  for (std::size_t i = shuffled.size() - 1; i > 0; --i) std::swap(shuffled[i], shuffled[rng.uniform_int(i + 1)]);
  const auto again = retrieval_from_scores(shuffled, vocab, score);
  CHECK(again.ap == report.ap);
  CHECK(again.overall_map == report.overall_map);

  std::ostringstream ap_out, noun_out;
  write_retrieval_tables(report, vocab, ap_out, noun_out);
  CHECK(noun_out.str().rfind("noun\tanps\tmAP\n", 0) == 0);
  CHECK(noun_out.str().find("\nall\t135\t") != std::string::npos);
}

TEST_CASE("retrieval: perfect scores, ties and errors") {
  const AnpVocabulary vocab({"happy dog", "cute dog"});
  std::vector<RelevanceRecord> judgements;
  for (int i = 0; i < 60; ++i) judgements.push_back({"x" + std::to_string(100 + i), 0, i % 3 == 0});
  const auto perfect = retrieval_from_scores(judgements, vocab, [&](const std::string& id, Index) {
    return (std::stoi(id.substr(1)) - 100) % 3 == 0 ? 1.0 : 0.0;
  });
  CHECK(perfect.ap.at(0) == 1.0);
  CHECK(perfect.noun_map.at("dog").second == 1.0);

  // All scores equal: ranking falls back to ascending image id.
  const auto tied = retrieval_from_scores(judgements, vocab, [](const std::string&, Index) { return 0.5; });
  std::vector<std::string> by_id;
  std::set<std::string> positives;
  for (const auto& j : judgements) {
    by_id.push_back(j.image_id);
    if (j.relevant) positives.insert(j.image_id);
  }
  std::sort(by_id.begin(), by_id.end());
  CHECK(tied.ap.at(0) == average_precision_at_20(by_id, positives));

  auto none = [](const std::string&, Index) { return 0.0; };
  CHECK_THROWS_AS(retrieval_from_scores({}, vocab, none), DataError);
  std::vector<RelevanceRecord> few(judgements.begin(), judgements.begin() + 19);
  CHECK_THROWS_AS(retrieval_from_scores(few, vocab, none), DataError);
  auto negatives = judgements;
  for (auto& j : negatives) j.relevant = false;
  CHECK_THROWS_AS(retrieval_from_scores(negatives, vocab, none), DataError);
}

TEST_CASE("model-driven: annotate, predict_records, retrieval_eval") {
  const auto d = make_synthetic_dataset(8, 1, 3);
  auto model = build<float>(desk_architecture(8));
  Rng rng(7);
  init_scratch(model, rng, fan_in_stddevs(model.architecture()));
  model.channel_means = {100, 100, 100};
  const auto image = d.loader()("test_2_0.ppm");

  const auto top10 = annotate(model, d.vocab, image, 8);
  REQUIRE(top10.size() == 8);
  for (std::size_t i = 1; i < top10.size(); ++i) CHECK(top10[i].probability <= top10[i - 1].probability);
  double total = 0;
  for (const auto& a : top10) total += a.probability;
  CHECK(std::abs(total - 1.0) < 1e-5);
  const auto top1 = annotate(model, d.vocab, image, 1);
  REQUIRE(top1.size() == 1);
  CHECK(top1[0].anp == top10[0].anp);
  CHECK(top1[0].name == d.vocab.anp(top1[0].anp));
  CHECK_THROWS_AS(annotate(model, AnpVocabulary({"a b", "c d"}), image, 1), ConfigError);

  auto m = d.manifest;
  auto test = m.split_indices(Split::test);
  m.records.push_back({"absent.ppm", 1, Split::test, "q"});
  test.push_back(m.records.size() - 1);
  std::vector<std::size_t> skipped;
  const auto pred = predict_records(model, m, test, &skipped, d.loader(), 5);
  CHECK(pred.images() == 24);
  CHECK(skipped == std::vector<std::size_t>{m.records.size() - 1});
  CHECK_NOTHROW(pred.validate());
  const auto probs = image_probabilities(model, image);
  const auto row = std::find(pred.image_ids.begin(), pred.image_ids.end(), "test_2_0.ppm") - pred.image_ids.begin();
  for (Index j = 0; j < 8; ++j) CHECK(pred.probs(row, j) == doctest::Approx(probs[j]).epsilon(1e-6));

  std::vector<RelevanceRecord> judgements;
  for (const auto i : d.manifest.split_indices(Split::test))
    for (Index anp : {Index{0}, Index{5}}) judgements.push_back({d.manifest.records[i].path, anp, d.manifest.records[i].anp_index == anp});
  const auto report = retrieval_eval(model, judgements, d.vocab, "", d.loader());
  const auto direct = retrieval_from_scores(judgements, d.vocab, [&](const std::string& id, Index anp) {
    return static_cast<double>(image_probabilities(model, d.loader()(id))[anp]);
  });
  CHECK(report.ap == direct.ap);
  CHECK_THROWS_AS(retrieval_eval(model, {}, d.vocab, "", d.loader()), DataError);
}

#include <doctest.h>

#include <cmath>
#include <fstream>

#include "sentinet/network.hpp"
#include "support/gradcheck.hpp"
#include "support/tiny_net.hpp"

using namespace sentinet;
using sentinet::testing::TempDir;
using sentinet::testing::tiny_architecture;
using sentinet::testing::tiny_network;

namespace {

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

template <typename Scalar>
Tensor<Scalar> tiny_batch(Index items, Rng& rng) {
  return tensor_gaussian<Scalar>({items, 3, 67, 67}, 0.0, 1.0, rng);
}

}  // namespace

TEST_CASE("shapes: every stage of the reference topology") {
  const std::vector<std::pair<std::string, Shape>> expected{
      {"data", {3, 227, 227}},  {"conv1", {96, 55, 55}},  {"pool1", {96, 27, 27}},  {"norm1", {96, 27, 27}},
      {"conv2", {256, 27, 27}}, {"pool2", {256, 13, 13}}, {"norm2", {256, 13, 13}}, {"conv3", {384, 13, 13}},
      {"conv4", {384, 13, 13}}, {"conv5", {256, 13, 13}}, {"pool5", {256, 6, 6}},   {"fc6", {4096}},
      {"fc7", {4096}},          {"fc8", {2089}}};
  const auto shapes = data_shapes(Architecture{});
  REQUIRE(shapes.size() == expected.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    CHECK(shapes[i].name == expected[i].first);
    CHECK(shapes[i].shape == expected[i].second);
  }

  const auto model = build<float>(2089);
  Rng rng(0);
  const auto act = forward_item(model, Tensor<float>({3, 227, 227}), Mode::test, rng);
  const auto stages = act.stage_shapes();
  for (std::size_t i = 0; i < stages.size(); ++i) CHECK(stages[i] == expected[i].second);
}

TEST_CASE("parameters: reference count") {
  const auto model = build<float>(2089);
  CHECK(model.parameter_count() == 65426857);
  CHECK(model.weight_count() == 65415200);
  CHECK(model.parameter_count() - model.weight_count() == 11657);
  const auto shapes = parameter_shapes(Architecture{});
  CHECK(shapes[0].shape == Shape{96, 3, 11, 11});
  CHECK(shapes[2].shape == Shape{256, 48, 5, 5});
  CHECK(shapes[4].shape == Shape{384, 256, 3, 3});
  CHECK(shapes[6].shape == Shape{384, 192, 3, 3});
  CHECK(shapes[8].shape == Shape{256, 192, 3, 3});
  CHECK(shapes[10].shape == Shape{4096, 9216});
  CHECK(shapes[12].shape == Shape{4096, 4096});
  CHECK(shapes[14].shape == Shape{2089, 4096});
}

TEST_CASE("build: class count limits") {
  CHECK(build<float>(2).fc_weights(2).shape() == Shape{2, 4096});
  CHECK_THROWS_AS(build<float>(1), ParameterError);
  Architecture odd;
  odd.input_size = 226;
  CHECK_THROWS_AS(data_shapes(odd), ShapeError);
  Architecture bad_groups;
  bad_groups.conv_channels[1] = 255;
  CHECK_THROWS_AS(data_shapes(bad_groups), ShapeError);
}

TEST_CASE("forward: wrong input shape and labels") {
  Rng rng(1);
  const auto model = tiny_network<double>(rng);
  CHECK_THROWS_AS(forward_item(model, Tensor<double>({3, 66, 66}), Mode::test, rng), ShapeError);
  const auto batch = tiny_batch<double>(1, rng);
  const std::vector<Index> bad{5};
  CHECK_THROWS_AS(loss_and_gradients(model, batch, std::span<const Index>(bad), Mode::test, rng), IndexError);
}

TEST_CASE("init: scratch recipe") {
  auto model = build<float>(2089);
  Rng rng(42);
  init_scratch(model, rng);
  for (int l = 0; l < 5; ++l) {
    const double want = (l == 1 || l == 3 || l == 4) ? 0.1 : 0.0;
    CHECK((model.conv(l).bias.vec().array() == static_cast<float>(want)).all());
  }
  CHECK((model.fc_bias(0).vec().array() == 0.1f).all());
  CHECK((model.fc_bias(1).vec().array() == 0.1f).all());
  CHECK((model.fc_bias(2).vec().array() == 0.0f).all());

  const auto w = model.fc_weights(0).vec().cast<double>();
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().mean());
  CHECK(std::abs(mean) < 1e-5);
  CHECK(std::abs(sd - 0.01) < 0.0001);

  auto again = build<float>(2089);
  Rng same(42);
  init_scratch(again, same);
  CHECK(again == model);
}

TEST_CASE("init: different seeds differ") {
  auto a = build<float>(tiny_architecture());
  auto b = build<float>(tiny_architecture());
  Rng ra(1), rb(2);
  init_scratch(a, ra);
  init_scratch(b, rb);
  CHECK_FALSE(a == b);
}

TEST_CASE("weights: save and load are bit-identical") {
  TempDir dir("weights");
  Rng rng(3);
  auto model = tiny_network<float>(rng);
  model.channel_means = {104.5, 117.25, 123.0};
  model.vocabulary_checksum = 0xDEADBEEF;
  save_weights(model, dir / "a.dsbw");
  const auto loaded = load_weights<float>(dir / "a.dsbw");
  CHECK(loaded == model);
  CHECK(loaded.architecture() == model.architecture());
  CHECK(loaded.channel_means == model.channel_means);
  CHECK(loaded.vocabulary_checksum == 0xDEADBEEF);
  save_weights(loaded, dir / "b.dsbw");
  CHECK(read_bytes(dir / "a.dsbw") == read_bytes(dir / "b.dsbw"));

  // A reloaded model predicts exactly what the original did.
  const auto batch = tiny_batch<float>(2, rng);
  CHECK(predict(loaded, batch) == predict(model, batch));
}

TEST_CASE("weights: corrupt files are rejected") {
  TempDir dir("corrupt");
  Rng rng(4);
  save_weights(tiny_network<float>(rng), dir / "ok.dsbw");
  const auto bytes = read_bytes(dir / "ok.dsbw");

  SUBCASE("truncated") {
    for (std::size_t keep : {std::size_t{0}, std::size_t{3}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
      write_bytes(dir / "t.dsbw", std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep)));
      CHECK_THROWS_AS(load_weights<float>(dir / "t.dsbw"), FormatError);
    }
  }
  SUBCASE("bad magic") {
    auto b = bytes;
    b[0] = 'X';
    write_bytes(dir / "m.dsbw", b);
    CHECK_THROWS_WITH_AS(load_weights<float>(dir / "m.dsbw"), doctest::Contains("magic"), FormatError);
  }
  SUBCASE("flipped payload byte") {
    auto b = bytes;
    b[b.size() / 2] ^= 0x40;
    write_bytes(dir / "c.dsbw", b);
    CHECK_THROWS_WITH_AS(load_weights<float>(dir / "c.dsbw"), doctest::Contains("checksum"), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_weights<float>(dir / "none.dsbw"), DataError); }
}

TEST_CASE("weights: crc32 reference value") {
  const std::string s = "123456789";
  CHECK(crc32(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size())) == 0xCBF43926u);
}

TEST_CASE("finetune: copies the shared layers and redraws the top") {
  TempDir dir("finetune");
  Rng rng(5);
  auto pretrained = tiny_network<float>(rng, 7);
  pretrained.channel_means = {10.0, 20.0, 30.0};
  save_weights(pretrained, dir / "pre.dsbw");

  auto model = build<float>(tiny_architecture(3));
  Rng init(6);
  init_finetune(model, dir / "pre.dsbw", init);
  for (int l = 0; l < 5; ++l) {
    CHECK(model.conv(l).weights == pretrained.conv(l).weights);
    CHECK(model.conv(l).bias == pretrained.conv(l).bias);
  }
  for (int l = 0; l < 2; ++l) {
    CHECK(model.fc_weights(l) == pretrained.fc_weights(l));
    CHECK(model.fc_bias(l) == pretrained.fc_bias(l));
  }
  CHECK(model.fc_weights(2).shape() == Shape{3, 6});
  CHECK(model.fc_bias(2).vec().isZero(0));
  CHECK(model.fc_weights(2).vec().cwiseAbs().maxCoeff() < 0.06f);
  CHECK(model.channel_means == pretrained.channel_means);

  auto wider = tiny_architecture(3);
  wider.conv_channels[2] = 10;
  auto mismatch = build<float>(wider);
  CHECK_THROWS_AS(init_finetune(mismatch, dir / "pre.dsbw", init), FormatError);
}

TEST_CASE("finetune: test-mode features do not depend on the seed") {
  Rng rng(7);
  const auto pretrained = to_weight_file(tiny_network<double>(rng, 4));
  auto a = build<double>(tiny_architecture(9));
  auto b = build<double>(tiny_architecture(9));
  Rng ra(100), rb(200);
  init_finetune(a, pretrained, ra);
  init_finetune(b, pretrained, rb);
  CHECK_FALSE(a.fc_weights(2) == b.fc_weights(2));
  const auto x = tiny_batch<double>(1, rng);
  Rng unused(0);
  const auto fa = forward_item(a, detail::batch_item(x, 0), Mode::test, unused);
  const auto fb = forward_item(b, detail::batch_item(x, 0), Mode::test, unused);
  CHECK(fa.fc_out[1] == fb.fc_out[1]);
}

TEST_CASE("forward: deterministic given weights, input and rng") {
  Rng rng(8);
  const auto model = tiny_network<float>(rng);
  const auto batch = tiny_batch<float>(3, rng);
  CHECK(predict(model, batch) == predict(model, batch));

  Rng r1(9), r2(9), r3(10);
  const auto t1 = forward(model, batch, Mode::train, r1);
  const auto t2 = forward(model, batch, Mode::train, r2);
  const auto t3 = forward(model, batch, Mode::train, r3);
  CHECK(t1.probs == t2.probs);
  CHECK_FALSE(t1.probs == t3.probs);

  // Test mode ignores the rng entirely.
  Rng r4(11);
  CHECK(forward(model, batch, Mode::test, r4).probs == predict(model, batch));
  for (Index b = 0; b < 3; ++b) CHECK(std::abs(t1.probs.matrix().row(b).sum() - 1.0f) < 1e-5f);
}

TEST_CASE("backward: forward + backward equals the fused pass") {
  Rng rng(12);
  const auto model = tiny_network<double>(rng);
  const auto batch = tiny_batch<double>(3, rng);
  const std::vector<Index> labels{0, 4, 2};
  Rng r1(13), r2(13);
  const auto fwd = forward(model, batch, Mode::train, r1);
  const auto split = backward(model, fwd.activations, std::span<const Index>(labels));
  const auto fused = loss_and_gradients(model, batch, std::span<const Index>(labels), Mode::train, r2);
  CHECK(split.mean_loss == fused.mean_loss);
  for (std::size_t i = 0; i < split.gradients.size(); ++i) CHECK(split.gradients[i] == fused.gradients[i]);
}

TEST_CASE("backward: a duplicated item gives the single-item gradient") {
  Rng rng(14);
  const auto model = tiny_network<double>(rng);
  const auto one = tiny_batch<double>(1, rng);
  Tensor<double> two({2, 3, 67, 67});
  two.vec().head(one.size()) = one.vec();
  two.vec().tail(one.size()) = one.vec();
  const std::vector<Index> l1{3}, l2{3, 3};
  Rng unused(0);
  const auto g1 = loss_and_gradients(model, one, std::span<const Index>(l1), Mode::test, unused);
  const auto g2 = loss_and_gradients(model, two, std::span<const Index>(l2), Mode::test, unused);
  CHECK(g1.mean_loss == doctest::Approx(g2.mean_loss).epsilon(1e-14));
  for (std::size_t i = 0; i < g1.gradients.size(); ++i)
    CHECK((g1.gradients[i].vec() - g2.gradients[i].vec()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("backward: saturated prediction has near-zero loss and gradient") {
  Rng rng(15);
  auto model = tiny_network<double>(rng);
  model.fc_weights(2).set_zero();
  model.fc_bias(2) = Tensor<double>({5}, {0, 0, 30, 0, 0});
  const auto batch = tiny_batch<double>(2, rng);
  const std::vector<Index> labels{2, 2};
  Rng unused(0);
  const auto r = loss_and_gradients(model, batch, std::span<const Index>(labels), Mode::test, unused);
  CHECK(r.mean_loss < 1e-4);
  for (const auto& g : r.gradients) CHECK(g.vec().cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("backward: finite differences through the whole network") {
  Rng rng(16);
  auto model = tiny_network<double>(rng);
  const auto batch = tiny_batch<double>(2, rng);
  const std::vector<Index> labels{1, 3};
  const Rng dropout_rng(17);

  auto loss = [&] {
    Rng r = dropout_rng;
    return loss_and_gradients(model, batch, std::span<const Index>(labels), Mode::train, r).mean_loss;
  };
  Rng r = dropout_rng;
  const auto analytic = loss_and_gradients(model, batch, std::span<const Index>(labels), Mode::train, r).gradients;

  for (const auto& g : analytic) REQUIRE(g.vec().cwiseAbs().maxCoeff() > 1e-6);  // no dead layer

  auto params = model.parameters();
  Rng pick(18);
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& t = *params[p];
    const Index samples = std::min<Index>(t.size(), 12);
    for (Index s = 0; s < samples; ++s) {
      const Index i = t.size() <= 12 ? s : static_cast<Index>(pick.uniform_int(static_cast<std::uint64_t>(t.size())));
      const double saved = t[i];
      t[i] = saved + sentinet::testing::kStep;
      const double up = loss();
      t[i] = saved - sentinet::testing::kStep;
      const double down = loss();
      t[i] = saved;
      const double numeric = (up - down) / (2 * sentinet::testing::kStep);
      const double a = analytic[p][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-4});
      worst = std::max(worst, err);
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("backward: a small step against the gradient lowers the loss") {
  Rng rng(19);
  auto model = tiny_network<double>(rng);
  const auto batch = tiny_batch<double>(4, rng);
  const std::vector<Index> labels{0, 1, 2, 3};
  Rng unused(0);
  const auto before = loss_and_gradients(model, batch, std::span<const Index>(labels), Mode::test, unused);
  auto params = model.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) params[p]->vec() -= 1e-5 * before.gradients[p].vec();
  const auto after = loss_and_gradients(model, batch, std::span<const Index>(labels), Mode::test, unused);
  CHECK(after.mean_loss < before.mean_loss);
}

TEST_CASE("network: precision cast round trip") {
  Rng rng(20);
  const auto f = tiny_network<float>(rng);
  CHECK(f.cast<double>().cast<float>() == f);
}

TEST_CASE("init: per-layer standard deviations") {
  const auto fixed = fixed_stddevs();
  for (const double s : fixed) CHECK(s == 0.01);
  const auto scaled = fan_in_stddevs(Architecture{});
  CHECK(scaled[0] == 0.01);
  CHECK(scaled[1] == doctest::Approx(1.0 / std::sqrt(48.0 * 25)));
  CHECK(scaled[5] == doctest::Approx(1.0 / std::sqrt(9216.0)));
  CHECK(scaled[7] == doctest::Approx(0.3 / std::sqrt(4096.0)));

  // Same draws, same biases: the fixed overload is the default recipe.
  auto a = build<float>(tiny_architecture());
  auto b = build<float>(tiny_architecture());
  Rng ra(21), rb(21);
  init_scratch(a, ra);
  init_scratch(b, rb, fixed);
  CHECK(a == b);
}

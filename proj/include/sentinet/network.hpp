#pragma once

// The fixed eight-weight-layer classifier:
//
//   data -> conv1 -> relu -> pool1 -> norm1
//        -> conv2 -> relu -> pool2 -> norm2
//        -> conv3 -> relu -> conv4 -> relu -> conv5 -> relu -> pool5
//        -> fc6 -> relu -> dropout -> fc7 -> relu -> dropout -> fc8 -> softmax
//
// Kernel sizes, strides, paddings and grouping are fixed; the channel widths,
// the hidden fc width, the class count and the input extent are carried by an
// Architecture so that width-reduced copies of the same graph can be trained
// at desk scale.

#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "sentinet/layers.hpp"
#include "sentinet/weight_file.hpp"

namespace sentinet {

inline constexpr int kConvLayers = 5;
inline constexpr int kFcLayers = 3;
inline constexpr std::array<Index, kConvLayers> kConvKernel{11, 5, 3, 3, 3};
inline constexpr std::array<Index, kConvLayers> kConvStride{4, 1, 1, 1, 1};
inline constexpr std::array<Index, kConvLayers> kConvPad{0, 2, 1, 1, 1};
inline constexpr std::array<Index, kConvLayers> kConvGroups{1, 2, 1, 2, 2};
inline constexpr std::array<const char*, kConvLayers + kFcLayers> kLayerNames{
    "conv1", "conv2", "conv3", "conv4", "conv5", "fc6", "fc7", "fc8"};
// Bias constant of each weight layer under scratch initialization.
inline constexpr std::array<double, kConvLayers + kFcLayers> kScratchBias{0.0, 0.1, 0.0, 0.1,
                                                                         0.1, 0.1, 0.1, 0.0};
inline constexpr double kInitStddev = 0.01;
inline constexpr Index kPoolSize = 3;
inline constexpr Index kPoolStride = 2;
inline constexpr Index kInputChannels = 3;

struct Architecture {
  Index num_classes = 2089;
  Index input_size = 227;
  std::array<Index, kConvLayers> conv_channels{96, 256, 384, 384, 256};
  Index fc_width = 4096;
  double dropout_rate = 0.5;
  LrnParams lrn{};

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct NamedShape {
  std::string name;
  Shape shape;
};

/// Data size after every stage, from "data" through "fc8". Throws ShapeError
/// when the architecture does not tile (non-integral conv/pool outputs or
/// channel counts that do not split into groups).
inline std::vector<NamedShape> data_shapes(const Architecture& a) {
  if (a.num_classes < 2) throw ParameterError("num_classes must be at least 2");
  if (a.fc_width < 1) throw ParameterError("fc width must be positive");
  Index in_c = kInputChannels;
  for (int l = 0; l < kConvLayers; ++l) {
    const Index c = a.conv_channels[static_cast<std::size_t>(l)];
    const Index g = kConvGroups[static_cast<std::size_t>(l)];
    if (c < 1 || c % g != 0 || in_c % g != 0)
      throw ShapeError(std::string(kLayerNames[static_cast<std::size_t>(l)]) +
                       ": channel counts must divide into groups");
    in_c = c;
  }
  const auto& ch = a.conv_channels;
  std::vector<NamedShape> s;
  Index e = a.input_size;
  s.push_back({"data", {kInputChannels, e, e}});
  e = window_output_extent(e, kConvKernel[0], kConvStride[0], kConvPad[0], "conv1");
  s.push_back({"conv1", {ch[0], e, e}});
  e = window_output_extent(e, kPoolSize, kPoolStride, 0, "pool1");
  s.push_back({"pool1", {ch[0], e, e}});
  s.push_back({"norm1", {ch[0], e, e}});
  e = window_output_extent(e, kConvKernel[1], kConvStride[1], kConvPad[1], "conv2");
  s.push_back({"conv2", {ch[1], e, e}});
  e = window_output_extent(e, kPoolSize, kPoolStride, 0, "pool2");
  s.push_back({"pool2", {ch[1], e, e}});
  s.push_back({"norm2", {ch[1], e, e}});
  for (int l = 2; l < kConvLayers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    e = window_output_extent(e, kConvKernel[li], kConvStride[li], kConvPad[li], kLayerNames[li]);
    s.push_back({kLayerNames[li], {ch[li], e, e}});
  }
  e = window_output_extent(e, kPoolSize, kPoolStride, 0, "pool5");
  s.push_back({"pool5", {ch[4], e, e}});
  s.push_back({"fc6", {a.fc_width}});
  s.push_back({"fc7", {a.fc_width}});
  s.push_back({"fc8", {a.num_classes}});
  return s;
}

/// Parameter tensor shapes in storage order: conv1.weight, conv1.bias, ...,
/// fc8.weight, fc8.bias.
inline std::vector<NamedShape> parameter_shapes(const Architecture& a) {
  const auto data = data_shapes(a);
  std::vector<NamedShape> p;
  Index in_c = kInputChannels;
  for (int l = 0; l < kConvLayers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const Index c = a.conv_channels[li];
    const Index k = kConvKernel[li];
    p.push_back({std::string(kLayerNames[li]) + ".weight", {c, in_c / kConvGroups[li], k, k}});
    p.push_back({std::string(kLayerNames[li]) + ".bias", {c}});
    in_c = c;
  }
  const Index flat = shape_size(data[10].shape);  // pool5
  const std::array<Index, 3> fan_in{flat, a.fc_width, a.fc_width};
  const std::array<Index, 3> fan_out{a.fc_width, a.fc_width, a.num_classes};
  for (int l = 0; l < kFcLayers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    const std::string name = kLayerNames[li + kConvLayers];
    p.push_back({name + ".weight", {fan_out[li], fan_in[li]}});
    p.push_back({name + ".bias", {fan_out[li]}});
  }
  return p;
}

/// Network parameters plus the metadata stored alongside them.
template <typename Scalar_>
class Network {
 public:
  using Scalar = Scalar_;

  Network() : Network(Architecture{}) {}

  /// Allocates zero-filled parameters for the architecture.
  explicit Network(const Architecture& arch) : arch_(arch) {
    const auto shapes = parameter_shapes(arch_);
    for (int l = 0; l < kConvLayers; ++l) {
      const auto li = static_cast<std::size_t>(l);
      conv_[li].weights = Tensor<Scalar>(shapes[2 * li].shape);
      conv_[li].bias = Tensor<Scalar>(shapes[2 * li + 1].shape);
      conv_[li].stride = kConvStride[li];
      conv_[li].pad = kConvPad[li];
      conv_[li].groups = kConvGroups[li];
    }
    for (int l = 0; l < kFcLayers; ++l) {
      const auto li = static_cast<std::size_t>(l);
      fc_weights_[li] = Tensor<Scalar>(shapes[2 * (li + kConvLayers)].shape);
      fc_bias_[li] = Tensor<Scalar>(shapes[2 * (li + kConvLayers) + 1].shape);
    }
  }

  const Architecture& architecture() const { return arch_; }
  Index num_classes() const { return arch_.num_classes; }

  ConvParams<Scalar>& conv(int i) { return conv_.at(static_cast<std::size_t>(i)); }
  const ConvParams<Scalar>& conv(int i) const { return conv_.at(static_cast<std::size_t>(i)); }
  Tensor<Scalar>& fc_weights(int i) { return fc_weights_.at(static_cast<std::size_t>(i)); }
  const Tensor<Scalar>& fc_weights(int i) const { return fc_weights_.at(static_cast<std::size_t>(i)); }
  Tensor<Scalar>& fc_bias(int i) { return fc_bias_.at(static_cast<std::size_t>(i)); }
  const Tensor<Scalar>& fc_bias(int i) const { return fc_bias_.at(static_cast<std::size_t>(i)); }

  /// The 16 parameter tensors in storage order (weight then bias per layer).
  std::vector<Tensor<Scalar>*> parameters() {
    std::vector<Tensor<Scalar>*> p;
    for (auto& c : conv_) {
      p.push_back(&c.weights);
      p.push_back(&c.bias);
    }
    for (std::size_t i = 0; i < kFcLayers; ++i) {
      p.push_back(&fc_weights_[i]);
      p.push_back(&fc_bias_[i]);
    }
    return p;
  }
  std::vector<const Tensor<Scalar>*> parameters() const {
    auto p = const_cast<Network*>(this)->parameters();
    return {p.begin(), p.end()};
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto* t : parameters()) n += t->size();
    return n;
  }
  Index weight_count() const {
    Index n = 0;
    const auto p = parameters();
    for (std::size_t i = 0; i < p.size(); i += 2) n += p[i]->size();
    return n;
  }

  std::array<double, 3> channel_means{0.0, 0.0, 0.0};
  std::uint32_t vocabulary_checksum = 0;

  template <typename Other>
  Network<Other> cast() const {
    Network<Other> out(arch_);
    auto dst = out.parameters();
    const auto src = parameters();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i] = src[i]->template cast<Other>();
    out.channel_means = channel_means;
    out.vocabulary_checksum = vocabulary_checksum;
    return out;
  }

  friend bool operator==(const Network& a, const Network& b) {
    if (!(a.arch_ == b.arch_) || a.channel_means != b.channel_means ||
        a.vocabulary_checksum != b.vocabulary_checksum)
      return false;
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
      if (!(*pa[i] == *pb[i])) return false;
    return true;
  }

 private:
  Architecture arch_;
  std::array<ConvParams<Scalar>, kConvLayers> conv_;
  std::array<Tensor<Scalar>, kFcLayers> fc_weights_;
  std::array<Tensor<Scalar>, kFcLayers> fc_bias_;
};

template <typename Scalar = Real>
Network<Scalar> build(Index num_classes) {
  if (num_classes < 2) throw ParameterError("num_classes must be at least 2");
  Architecture a;
  a.num_classes = num_classes;
  return Network<Scalar>(a);
}

template <typename Scalar = Real>
Network<Scalar> build(const Architecture& arch) {
  return Network<Scalar>(arch);
}

/// Weight standard deviation per layer, conv1 .. fc8.
using InitStddevs = std::array<double, kConvLayers + kFcLayers>;

inline InitStddevs fixed_stddevs(double stddev = kInitStddev) {
  InitStddevs s;
  s.fill(stddev);
  return s;
}

/// Narrow models lose the signal under a fixed 0.01: conv1 keeps 0.01,
/// conv2 .. fc7 take 1 / sqrt(fan_in) and fc8 0.3 / sqrt(fan_in).
inline InitStddevs fan_in_stddevs(const Architecture& a) {
  const auto shapes = parameter_shapes(a);
  InitStddevs s;
  for (std::size_t l = 0; l < s.size(); ++l) {
    const Shape& w = shapes[2 * l].shape;
    const auto fan_in = static_cast<double>(shape_size(w) / w[0]);
    s[l] = l == 0 ? kInitStddev : (l + 1 == s.size() ? 0.3 : 1.0) / std::sqrt(fan_in);
  }
  return s;
}

namespace detail {
template <typename Scalar>
void init_layer(Tensor<Scalar>& weights, Tensor<Scalar>& bias, double stddev, double bias_value, Rng& rng) {
  weights = tensor_gaussian<Scalar>(weights.shape(), 0.0, stddev, rng);
  bias = tensor_constant<Scalar>(bias.shape(), static_cast<Scalar>(bias_value));
}
}  // namespace detail

/// Every weight ~ N(0, 0.01^2), drawn layer by layer (conv1 .. fc8) in
/// row-major order; biases of conv2, conv4, conv5, fc6, fc7 set to 0.1 and
/// the rest to 0. The overload takes per-layer standard deviations and keeps
/// the draw order and biases.
template <typename Scalar>
Network<Scalar>& init_scratch(Network<Scalar>& model, Rng& rng, const InitStddevs& stddevs) {
  auto params = model.parameters();
  for (std::size_t l = 0; l < kLayerNames.size(); ++l)
    detail::init_layer(*params[2 * l], *params[2 * l + 1], stddevs[l], kScratchBias[l], rng);
  return model;
}

template <typename Scalar>
Network<Scalar>& init_scratch(Network<Scalar>& model, Rng& rng) {
  return init_scratch(model, rng, fixed_stddevs());
}

// Weight file conversion ----------------------------------------------------

template <typename Scalar>
WeightFile to_weight_file(const Network<Scalar>& model) {
  WeightFile f;
  f.num_classes = static_cast<std::uint32_t>(model.num_classes());
  for (std::size_t c = 0; c < 3; ++c) f.channel_means[c] = static_cast<float>(model.channel_means[c]);
  f.vocabulary_checksum = model.vocabulary_checksum;
  const auto shapes = parameter_shapes(model.architecture());
  const auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    WeightRecord r{shapes[i].name, params[i]->shape(), {}};
    r.data.resize(static_cast<std::size_t>(params[i]->size()));
    for (Index k = 0; k < params[i]->size(); ++k) r.data[static_cast<std::size_t>(k)] = static_cast<float>((*params[i])[k]);
    f.records.push_back(std::move(r));
  }
  return f;
}

/// Recovers the architecture from record shapes: channel widths from the conv
/// weights, fc width and class count from the fc weights, and the input
/// extent from the pool5 extent implied by fc6's fan-in.
inline Architecture architecture_of(const WeightFile& f) {
  const std::size_t expected = 2 * kLayerNames.size();
  if (f.records.size() != expected)
    throw FormatError("weight file: expected " + std::to_string(expected) + " records, found " +
                      std::to_string(f.records.size()));
  for (std::size_t l = 0; l < kLayerNames.size(); ++l)
    for (std::size_t part = 0; part < 2; ++part) {
      const std::string want = std::string(kLayerNames[l]) + (part ? ".bias" : ".weight");
      if (f.records[2 * l + part].name != want)
        throw FormatError("weight file: record " + std::to_string(2 * l + part) + " is '" +
                          f.records[2 * l + part].name + "', expected '" + want + "'");
    }
  Architecture a;
  for (std::size_t l = 0; l < kConvLayers; ++l) {
    const auto& s = f.records[2 * l].shape;
    if (s.size() != 4) throw FormatError("weight file: " + f.records[2 * l].name + " must be rank 4");
    a.conv_channels[l] = s[0];
  }
  const auto& fc6 = f.records[2 * kConvLayers].shape;
  const auto& fc8 = f.records[2 * (kConvLayers + 2)].shape;
  if (fc6.size() != 2 || fc8.size() != 2) throw FormatError("weight file: fc weights must be rank 2");
  a.fc_width = fc6[0];
  a.num_classes = fc8[0];
  if (static_cast<Index>(f.num_classes) != a.num_classes)
    throw FormatError("weight file: num_classes header " + std::to_string(f.num_classes) +
                      " disagrees with fc8 shape");
  const Index c5 = a.conv_channels[4];
  const Index area = c5 > 0 && fc6[1] % c5 == 0 ? fc6[1] / c5 : 0;
  const auto side = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(area))));
  if (side < 1 || side * side != area) throw FormatError("weight file: fc6 fan-in is not c5 x d x d");
  // pool5 extent d comes from an input of 32 d + 35 pixels.
  a.input_size = 32 * side + 35;
  std::vector<NamedShape> want;
  try {
    want = parameter_shapes(a);
  } catch (const Error& e) {
    throw FormatError(std::string("weight file: inconsistent layer shapes: ") + e.what());
  }
  for (std::size_t i = 0; i < want.size(); ++i)
    if (want[i].shape != f.records[i].shape)
      throw FormatError("weight file: " + want[i].name + " has shape " + shape_string(f.records[i].shape) +
                        ", expected " + shape_string(want[i].shape));
  return a;
}

template <typename Scalar = Real>
Network<Scalar> from_weight_file(const WeightFile& f) {
  Network<Scalar> model(architecture_of(f));
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& r = f.records[i];
    for (Index k = 0; k < params[i]->size(); ++k) (*params[i])[k] = static_cast<Scalar>(r.data[static_cast<std::size_t>(k)]);
  }
  for (std::size_t c = 0; c < 3; ++c) model.channel_means[c] = f.channel_means[c];
  model.vocabulary_checksum = f.vocabulary_checksum;
  return model;
}

template <typename Scalar>
void save_weights(const Network<Scalar>& model, const std::filesystem::path& path) {
  write_weight_file(to_weight_file(model), path);
}

template <typename Scalar = Real>
Network<Scalar> load_weights(const std::filesystem::path& path) {
  return from_weight_file<Scalar>(read_weight_file(path));
}

/// Copies conv1 .. fc7 from a pretrained file and redraws fc8 with the
/// scratch recipe (N(0, 0.01^2) weights, zero bias). The pretrained class
/// count may differ; every other layer must match exactly. Channel means are
/// inherited from the pretrained file.
template <typename Scalar>
Network<Scalar>& init_finetune(Network<Scalar>& model, const WeightFile& pretrained, Rng& rng) {
  const Architecture src = architecture_of(pretrained);
  Architecture expect = model.architecture();
  expect.num_classes = src.num_classes;
  expect.dropout_rate = src.dropout_rate;
  expect.lrn = src.lrn;
  if (!(src == expect))
    throw FormatError("pretrained weights do not match the model below the top layer");
  auto params = model.parameters();
  for (std::size_t i = 0; i + 2 < params.size(); ++i) {
    const auto& r = pretrained.records[i];
    for (Index k = 0; k < params[i]->size(); ++k) (*params[i])[k] = static_cast<Scalar>(r.data[static_cast<std::size_t>(k)]);
  }
  detail::init_layer(*params[params.size() - 2], *params.back(), kInitStddev, 0.0, rng);
  for (std::size_t c = 0; c < 3; ++c) model.channel_means[c] = pretrained.channel_means[c];
  return model;
}

template <typename Scalar>
Network<Scalar>& init_finetune(Network<Scalar>& model, const std::filesystem::path& pretrained, Rng& rng) {
  return init_finetune(model, read_weight_file(pretrained), rng);
}

// Forward / backward ---------------------------------------------------------

/// Everything one item's backward pass needs, retained from its forward pass.
template <typename Scalar>
struct ItemActivations {
  Tensor<Scalar> data;
  std::array<Tensor<Scalar>, kConvLayers> conv;  // post-ReLU
  std::array<MaxPoolResult<Scalar>, 3> pool;     // pool1, pool2, pool5
  std::array<Tensor<Scalar>, 2> norm;
  std::array<Tensor<Scalar>, 2> fc_relu;  // fc6, fc7 post-ReLU
  std::array<DropoutState<Scalar>, 2> dropout;
  std::array<Tensor<Scalar>, 2> fc_out;  // fc6, fc7 after dropout
  Tensor<Scalar> logits;
  Tensor<Scalar> probs;

  /// Data size after each stage in the same order as data_shapes().
  std::vector<Shape> stage_shapes() const {
    return {data.shape(),    conv[0].shape(),      pool[0].output.shape(), norm[0].shape(),
            conv[1].shape(), pool[1].output.shape(), norm[1].shape(),     conv[2].shape(),
            conv[3].shape(), conv[4].shape(),      pool[2].output.shape(), fc_relu[0].shape(),
            fc_relu[1].shape(), logits.shape()};
  }
};

template <typename Scalar>
struct BatchActivations {
  Mode mode = Mode::test;
  std::vector<ItemActivations<Scalar>> items;
};

template <typename Scalar>
struct ForwardResult {
  BatchActivations<Scalar> activations;
  Tensor<Scalar> probs;  // [B, K]
};

/// Gradients in parameters() order.
template <typename Scalar>
using Gradients = std::vector<Tensor<Scalar>>;

template <typename Scalar>
struct BackwardResult {
  Gradients<Scalar> gradients;
  double mean_loss = 0.0;
};

template <typename Scalar>
ItemActivations<Scalar> forward_item(const Network<Scalar>& model, Tensor<Scalar> image, Mode mode,
                                     Rng& rng) {
  const Architecture& a = model.architecture();
  const Shape want{kInputChannels, a.input_size, a.input_size};
  if (image.shape() != want)
    throw ShapeError("network input must be " + shape_string(want) + ", got " + shape_string(image.shape()));
  ItemActivations<Scalar> act;
  act.data = std::move(image);
  act.conv[0] = relu_forward(conv_forward(act.data, model.conv(0)));
  act.pool[0] = maxpool_forward(act.conv[0], kPoolSize, kPoolStride);
  act.norm[0] = lrn_forward(act.pool[0].output, a.lrn);
  act.conv[1] = relu_forward(conv_forward(act.norm[0], model.conv(1)));
  act.pool[1] = maxpool_forward(act.conv[1], kPoolSize, kPoolStride);
  act.norm[1] = lrn_forward(act.pool[1].output, a.lrn);
  act.conv[2] = relu_forward(conv_forward(act.norm[1], model.conv(2)));
  act.conv[3] = relu_forward(conv_forward(act.conv[2], model.conv(3)));
  act.conv[4] = relu_forward(conv_forward(act.conv[3], model.conv(4)));
  act.pool[2] = maxpool_forward(act.conv[4], kPoolSize, kPoolStride);
  const Tensor<Scalar>* x = &act.pool[2].output;
  for (int l = 0; l < 2; ++l) {
    const auto li = static_cast<std::size_t>(l);
    act.fc_relu[li] = relu_forward(fc_forward(*x, model.fc_weights(l), model.fc_bias(l)));
    act.dropout[li] = DropoutState<Scalar>{a.dropout_rate, mode, {}};
    act.fc_out[li] = dropout_forward(act.fc_relu[li], act.dropout[li], rng);
    x = &act.fc_out[li];
  }
  act.logits = fc_forward(*x, model.fc_weights(2), model.fc_bias(2));
  act.probs = softmax(act.logits);
  return act;
}

/// Accumulates one item's parameter gradients into grads and returns its loss.
template <typename Scalar>
double backward_item(const Network<Scalar>& model, const ItemActivations<Scalar>& act, Index label,
                     Gradients<Scalar>& grads) {
  const Architecture& a = model.architecture();
  if (label < 0 || label >= a.num_classes)
    throw IndexError("label " + std::to_string(label) + " outside [0, " + std::to_string(a.num_classes) + ")");
  auto sl = softmax_loss(act.logits, label);
  auto accumulate = [&grads](std::size_t slot, const Tensor<Scalar>& g) { grads[slot].vec() += g.vec(); };

  Tensor<Scalar> g = std::move(sl.grad_logits);
  const std::array<const Tensor<Scalar>*, 3> fc_in{&act.pool[2].output, &act.fc_out[0], &act.fc_out[1]};
  for (int l = 2; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    if (l < 2) {
      g = dropout_backward(act.dropout[li], std::move(g));
      g = relu_backward(act.fc_relu[li], std::move(g));
    }
    auto fg = fc_backward(*fc_in[li], model.fc_weights(l), g);
    accumulate(2 * (kConvLayers + li), fg.weights);
    accumulate(2 * (kConvLayers + li) + 1, fg.bias);
    g = std::move(fg.input);
  }
  g = maxpool_backward<Scalar>(act.pool[2].argmax, act.pool[2].input_shape, g);

  const std::array<const Tensor<Scalar>*, kConvLayers> conv_in{&act.data, &act.norm[0], &act.norm[1],
                                                               &act.conv[2], &act.conv[3]};
  for (int l = kConvLayers - 1; l >= 0; --l) {
    const auto li = static_cast<std::size_t>(l);
    g = relu_backward(act.conv[li], std::move(g));
    auto cg = conv_backward(*conv_in[li], model.conv(l), g, l > 0);
    accumulate(2 * li, cg.weights);
    accumulate(2 * li + 1, cg.bias);
    if (l == 0) break;
    g = std::move(cg.input);
    if (l == 1 || l == 2) {
      const std::size_t stage = li - 1;  // norm/pool feeding this conv
      g = lrn_backward(act.pool[stage].output, g, a.lrn);
      g = maxpool_backward<Scalar>(act.pool[stage].argmax, act.pool[stage].input_shape, g);
    }
  }
  return sl.loss;
}

template <typename Scalar>
Gradients<Scalar> zero_gradients(const Network<Scalar>& model) {
  Gradients<Scalar> g;
  for (const auto* p : model.parameters()) g.emplace_back(p->shape());
  return g;
}

namespace detail {
template <typename Scalar>
Tensor<Scalar> batch_item(const Tensor<Scalar>& batch, Index b) {
  const Index per = batch.size() / batch.dim(0);
  Tensor<Scalar> item(Shape(batch.shape().begin() + 1, batch.shape().end()));
  item.vec() = batch.vec().segment(b * per, per);
  return item;
}

template <typename Scalar>
void check_batch(const Network<Scalar>& model, const Tensor<Scalar>& batch) {
  const Index s = model.architecture().input_size;
  if (batch.rank() != 4 || batch.dim(1) != kInputChannels || batch.dim(2) != s || batch.dim(3) != s)
    throw ShapeError("batch must be [B,3," + std::to_string(s) + "," + std::to_string(s) + "], got " +
                     shape_string(batch.shape()));
}
}  // namespace detail

/// Runs every item of a [B,3,S,S] batch. In train mode item b's dropout masks
/// are drawn from rng.split(b); test mode never reads rng.
template <typename Scalar>
ForwardResult<Scalar> forward(const Network<Scalar>& model, const Tensor<Scalar>& batch, Mode mode, Rng& rng) {
  detail::check_batch(model, batch);
  ForwardResult<Scalar> r;
  r.activations.mode = mode;
  const Index items = batch.dim(0);
  r.probs = Tensor<Scalar>({items, model.num_classes()});
  for (Index b = 0; b < items; ++b) {
    Rng item_rng = mode == Mode::train ? rng.split(static_cast<std::uint64_t>(b)) : Rng(0);
    r.activations.items.push_back(forward_item(model, detail::batch_item(batch, b), mode, item_rng));
    r.probs.matrix().row(b) = r.activations.items.back().probs.vec().transpose();
  }
  return r;
}

/// Batch-mean loss and batch-mean gradients; items are accumulated in batch
/// order.
template <typename Scalar>
BackwardResult<Scalar> backward(const Network<Scalar>& model, const BatchActivations<Scalar>& acts,
                                std::span<const Index> labels) {
  if (labels.size() != acts.items.size()) throw ShapeError("backward: one label per batch item required");
  if (acts.items.empty()) throw ShapeError("backward: empty batch");
  BackwardResult<Scalar> r{zero_gradients(model), 0.0};
  for (std::size_t b = 0; b < acts.items.size(); ++b)
    r.mean_loss += backward_item(model, acts.items[b], labels[b], r.gradients);
  const auto n = static_cast<double>(acts.items.size());
  r.mean_loss /= n;
  for (auto& g : r.gradients) g.vec() *= static_cast<Scalar>(1.0 / n);
  return r;
}

/// forward + backward without retaining a whole batch of activations. Gives
/// bit-identical results to backward(forward(...)).
template <typename Scalar>
BackwardResult<Scalar> loss_and_gradients(const Network<Scalar>& model, const Tensor<Scalar>& batch,
                                          std::span<const Index> labels, Mode mode, Rng& rng) {
  detail::check_batch(model, batch);
  if (static_cast<Index>(labels.size()) != batch.dim(0))
    throw ShapeError("one label per batch item required");
  BackwardResult<Scalar> r{zero_gradients(model), 0.0};
  for (Index b = 0; b < batch.dim(0); ++b) {
    Rng item_rng = mode == Mode::train ? rng.split(static_cast<std::uint64_t>(b)) : Rng(0);
    const auto act = forward_item(model, detail::batch_item(batch, b), mode, item_rng);
    r.mean_loss += backward_item(model, act, labels[static_cast<std::size_t>(b)], r.gradients);
  }
  const auto n = static_cast<double>(batch.dim(0));
  r.mean_loss /= n;
  for (auto& g : r.gradients) g.vec() *= static_cast<Scalar>(1.0 / n);
  return r;
}

/// Test-mode class probabilities [B, K].
template <typename Scalar>
Tensor<Scalar> predict(const Network<Scalar>& model, const Tensor<Scalar>& batch) {
  detail::check_batch(model, batch);
  Tensor<Scalar> probs({batch.dim(0), model.num_classes()});
  Rng unused(0);
  for (Index b = 0; b < batch.dim(0); ++b)
    probs.matrix().row(b) = forward_item(model, detail::batch_item(batch, b), Mode::test, unused).probs.vec().transpose();
  return probs;
}

}  // namespace sentinet

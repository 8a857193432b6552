#pragma once

// Forward and backward transforms for the layer kinds of the network.
//
// Every function operates on a single item ([C,H,W] feature maps or flat
// vectors); batching is a loop in the network. All functions are pure except
// dropout_forward, which draws from the rng it is handed.
//
// Summation order: convolution lowers each group to a matrix product over an
// im2col buffer (rows ordered channel, kernel row, kernel column; columns
// ordered output row, output column) and evaluates it with Eigen's GEMM.
// Bias gradients are row sums over output positions in ascending order.
// Nothing here is multithreaded, so identical inputs give identical bits.

#include <cmath>
#include <string>
#include <vector>

#include "sentinet/tensor.hpp"

namespace sentinet {

enum class Mode { train, test };

// ---------------------------------------------------------------------------
// Convolution

template <typename Scalar>
struct ConvParams {
  Tensor<Scalar> weights;  // [out_channels, in_channels / groups, kH, kW]
  Tensor<Scalar> bias;     // [out_channels]
  Index stride = 1;
  Index pad = 0;
  Index groups = 1;

  Index out_channels() const { return weights.dim(0); }
  Index in_channels() const { return weights.dim(1) * groups; }
  Index kernel_h() const { return weights.dim(2); }
  Index kernel_w() const { return weights.dim(3); }
};

template <typename Scalar>
struct ConvGrads {
  Tensor<Scalar> input;  // empty when not requested
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

/// Output extent of a strided window; throws unless the window tiles exactly.
inline Index window_output_extent(Index in, Index kernel, Index stride, Index pad,
                                  const char* what) {
  const Index span = in + 2 * pad - kernel;
  if (stride < 1 || span < 0 || span % stride != 0)
    throw ShapeError(std::string(what) + ": extent " + std::to_string(in) + " with kernel " +
                     std::to_string(kernel) + ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad) + " does not give an integral output size");
  return span / stride + 1;
}

namespace detail {

template <typename Scalar>
void check_conv(const Tensor<Scalar>& input, const ConvParams<Scalar>& p) {
  if (input.rank() != 3) throw ShapeError("conv: input must be [C,H,W], got " + shape_string(input.shape()));
  if (p.weights.rank() != 4) throw ShapeError("conv: weights must be 4-D");
  if (p.groups < 1) throw ShapeError("conv: groups must be positive");
  if (p.out_channels() % p.groups != 0)
    throw ShapeError("conv: out_channels not divisible by groups");
  if (input.dim(0) != p.in_channels())
    throw ShapeError("conv: input has " + std::to_string(input.dim(0)) + " channels, weights expect " +
                     std::to_string(p.in_channels()));
  if (p.bias.rank() != 1 || p.bias.dim(0) != p.out_channels())
    throw ShapeError("conv: bias must be [out_channels]");
}

// Lowers the channels [c0, c0 + channels) of one group into col [K, P].
template <typename Scalar>
void im2col(const Tensor<Scalar>& input, Index c0, Index channels, Index kh, Index kw,
            Index stride, Index pad, Index out_h, Index out_w, RowMatrix<Scalar>& col) {
  const Index in_h = input.dim(1);
  const Index in_w = input.dim(2);
  col.resize(channels * kh * kw, out_h * out_w);
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < kh; ++ky)
      for (Index kx = 0; kx < kw; ++kx) {
        Scalar* row = col.row((c * kh + ky) * kw + kx).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            const bool inside = iy >= 0 && iy < in_h && ix >= 0 && ix < in_w;
            row[oy * out_w + ox] = inside ? input.at(c0 + c, iy, ix) : Scalar(0);
          }
        }
      }
}

// Adjoint of im2col: scatters col [K, P] back, accumulating overlaps.
template <typename Scalar>
void col2im(const RowMatrix<Scalar>& col, Index c0, Index channels, Index kh, Index kw,
            Index stride, Index pad, Index out_h, Index out_w, Tensor<Scalar>& grad_input) {
  const Index in_h = grad_input.dim(1);
  const Index in_w = grad_input.dim(2);
  for (Index c = 0; c < channels; ++c)
    for (Index ky = 0; ky < kh; ++ky)
      for (Index kx = 0; kx < kw; ++kx) {
        const Scalar* row = col.row((c * kh + ky) * kw + kx).data();
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= in_h) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= in_w) continue;
            grad_input.at(c0 + c, iy, ix) += row[oy * out_w + ox];
          }
        }
      }
}

}  // namespace detail

/// Grouped 2-D convolution of a [C,H,W] input. Group g's output channels see
/// only input channels [g*C/groups, (g+1)*C/groups).
template <typename Scalar>
Tensor<Scalar> conv_forward(const Tensor<Scalar>& input, const ConvParams<Scalar>& p) {
  detail::check_conv(input, p);
  const Index kh = p.kernel_h(), kw = p.kernel_w();
  const Index out_h = window_output_extent(input.dim(1), kh, p.stride, p.pad, "conv");
  const Index out_w = window_output_extent(input.dim(2), kw, p.stride, p.pad, "conv");
  const Index group_in = p.weights.dim(1);
  const Index group_out = p.out_channels() / p.groups;
  const Index k = group_in * kh * kw;

  Tensor<Scalar> out({p.out_channels(), out_h, out_w});
  auto out_m = out.matrix(p.out_channels(), out_h * out_w);
  const auto w_m = p.weights.matrix(p.out_channels(), k);
  RowMatrix<Scalar> col;
  for (Index g = 0; g < p.groups; ++g) {
    detail::im2col(input, g * group_in, group_in, kh, kw, p.stride, p.pad, out_h, out_w, col);
    out_m.middleRows(g * group_out, group_out).noalias() = w_m.middleRows(g * group_out, group_out) * col;
  }
  out_m.colwise() += p.bias.vec();
  return out;
}

/// Adjoints of conv_forward with respect to input, weights and bias.
template <typename Scalar>
ConvGrads<Scalar> conv_backward(const Tensor<Scalar>& input, const ConvParams<Scalar>& p,
                                const Tensor<Scalar>& grad_out, bool need_input_grad = true) {
  detail::check_conv(input, p);
  const Index kh = p.kernel_h(), kw = p.kernel_w();
  const Index out_h = window_output_extent(input.dim(1), kh, p.stride, p.pad, "conv");
  const Index out_w = window_output_extent(input.dim(2), kw, p.stride, p.pad, "conv");
  if (grad_out.shape() != Shape{p.out_channels(), out_h, out_w})
    throw ShapeError("conv_backward: grad_out " + shape_string(grad_out.shape()) +
                     " does not match output shape");
  const Index group_in = p.weights.dim(1);
  const Index group_out = p.out_channels() / p.groups;
  const Index k = group_in * kh * kw;

  ConvGrads<Scalar> grads;
  grads.weights = Tensor<Scalar>(p.weights.shape());
  grads.bias = Tensor<Scalar>(p.bias.shape());
  if (need_input_grad) grads.input = Tensor<Scalar>(input.shape());

  const auto g_m = grad_out.matrix(p.out_channels(), out_h * out_w);
  const auto w_m = p.weights.matrix(p.out_channels(), k);
  auto gw_m = grads.weights.matrix(p.out_channels(), k);
  grads.bias.vec() = g_m.rowwise().sum();

  RowMatrix<Scalar> col;
  RowMatrix<Scalar> dcol;
  for (Index g = 0; g < p.groups; ++g) {
    detail::im2col(input, g * group_in, group_in, kh, kw, p.stride, p.pad, out_h, out_w, col);
    const auto g_rows = g_m.middleRows(g * group_out, group_out);
    gw_m.middleRows(g * group_out, group_out).noalias() = g_rows * col.transpose();
    if (need_input_grad) {
      dcol.noalias() = w_m.middleRows(g * group_out, group_out).transpose() * g_rows;
      detail::col2im(dcol, g * group_in, group_in, kh, kw, p.stride, p.pad, out_h, out_w, grads.input);
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// ReLU

template <typename Scalar>
Tensor<Scalar> relu_forward(Tensor<Scalar> x) {
  x.vec() = x.vec().cwiseMax(Scalar(0));
  return x;
}

/// Passes grad_out where x > 0. x may be either the ReLU input or its output;
/// both have the same positive set.
template <typename Scalar>
Tensor<Scalar> relu_backward(const Tensor<Scalar>& x, Tensor<Scalar> grad_out) {
  if (x.shape() != grad_out.shape()) throw ShapeError("relu_backward: shape mismatch");
  grad_out.vec() = (x.vec().array() > Scalar(0)).select(grad_out.vec(), Scalar(0));
  return grad_out;
}

// ---------------------------------------------------------------------------
// Max pooling

template <typename Scalar>
struct MaxPoolResult {
  Tensor<Scalar> output;
  std::vector<Index> argmax;  // linear input index per output element
  Shape input_shape;
};

/// Overlapping max pooling over each channel. Ties resolve to the lowest
/// linear input index (the first maximum in row-major window order).
template <typename Scalar>
MaxPoolResult<Scalar> maxpool_forward(const Tensor<Scalar>& x, Index size = 3, Index stride = 2) {
  if (x.rank() != 3) throw ShapeError("maxpool: input must be [C,H,W]");
  const Index channels = x.dim(0), in_h = x.dim(1), in_w = x.dim(2);
  const Index out_h = window_output_extent(in_h, size, stride, 0, "maxpool");
  const Index out_w = window_output_extent(in_w, size, stride, 0, "maxpool");
  MaxPoolResult<Scalar> r{Tensor<Scalar>({channels, out_h, out_w}), {}, x.shape()};
  r.argmax.resize(static_cast<std::size_t>(r.output.size()));
  Index o = 0;
  for (Index c = 0; c < channels; ++c)
    for (Index oy = 0; oy < out_h; ++oy)
      for (Index ox = 0; ox < out_w; ++ox, ++o) {
        Index best = (c * in_h + oy * stride) * in_w + ox * stride;
        Scalar best_v = x[best];
        for (Index ky = 0; ky < size; ++ky)
          for (Index kx = 0; kx < size; ++kx) {
            const Index i = (c * in_h + oy * stride + ky) * in_w + ox * stride + kx;
            if (x[i] > best_v) {
              best_v = x[i];
              best = i;
            }
          }
        r.output[o] = best_v;
        r.argmax[static_cast<std::size_t>(o)] = best;
      }
  return r;
}

/// Routes each output gradient to its recorded argmax, summing overlaps.
template <typename Scalar>
Tensor<Scalar> maxpool_backward(std::span<const Index> argmax, const Shape& input_shape,
                                 const Tensor<Scalar>& grad_out) {
  if (static_cast<Index>(argmax.size()) != grad_out.size())
    throw ShapeError("maxpool_backward: argmax/grad_out size mismatch");
  Tensor<Scalar> grad_in(input_shape);
  for (Index o = 0; o < grad_out.size(); ++o) grad_in[argmax[static_cast<std::size_t>(o)]] += grad_out[o];
  return grad_in;
}

// ---------------------------------------------------------------------------
// Local response normalization across channels

struct LrnParams {
  double k = 2.0;
  int n = 5;
  double alpha = 1e-4;
  double beta = 0.75;

  friend bool operator==(const LrnParams&, const LrnParams&) = default;
};

namespace detail {

inline void check_lrn(const LrnParams& p) {
  if (p.n < 1 || p.n % 2 == 0) throw ParameterError("lrn: window size must be odd and positive");
}

// scale(i, s) = k + alpha * sum_{|j - i| <= n/2} a(j, s)^2
template <typename Scalar>
RowMatrix<Scalar> lrn_scale(const Tensor<Scalar>& a, const LrnParams& p) {
  const Index channels = a.dim(0);
  const Index plane = a.size() / channels;
  const auto a_m = a.matrix(channels, plane);
  const RowMatrix<Scalar> sq = a_m.array().square().matrix();
  const Index half = p.n / 2;
  RowMatrix<Scalar> scale(channels, plane);
  for (Index i = 0; i < channels; ++i) {
    const Index lo = std::max<Index>(0, i - half);
    const Index hi = std::min<Index>(channels - 1, i + half);
    scale.row(i) = sq.middleRows(lo, hi - lo + 1).colwise().sum();
  }
  scale.array() = Scalar(p.k) + Scalar(p.alpha) * scale.array();
  return scale;
}

}  // namespace detail

/// b(i) = a(i) / (k + alpha * sum over the n neighbouring channels of a(j)^2)^beta,
/// the neighbourhood clipped at the first and last channel.
template <typename Scalar>
Tensor<Scalar> lrn_forward(const Tensor<Scalar>& a, const LrnParams& p = {}) {
  detail::check_lrn(p);
  if (a.rank() < 1) throw ShapeError("lrn: empty input");
  const RowMatrix<Scalar> scale = detail::lrn_scale(a, p);
  Tensor<Scalar> b(a.shape());
  const Index channels = a.dim(0);
  b.matrix(channels, a.size() / channels).array() =
      a.matrix(channels, a.size() / channels).array() * scale.array().pow(Scalar(-p.beta));
  return b;
}

template <typename Scalar>
Tensor<Scalar> lrn_backward(const Tensor<Scalar>& a, const Tensor<Scalar>& grad_out,
                            const LrnParams& p = {}) {
  detail::check_lrn(p);
  if (a.shape() != grad_out.shape()) throw ShapeError("lrn_backward: shape mismatch");
  const Index channels = a.dim(0);
  const Index plane = a.size() / channels;
  const RowMatrix<Scalar> scale = detail::lrn_scale(a, p);
  const auto a_m = a.matrix(channels, plane);
  const auto g_m = grad_out.matrix(channels, plane);
  const RowMatrix<Scalar> scale_pow = scale.array().pow(Scalar(-p.beta));
  // ratio(i) = g(i) * a(i) * scale(i)^(-beta-1)
  const RowMatrix<Scalar> ratio = (g_m.array() * a_m.array() * scale_pow.array() / scale.array()).matrix();
  const Index half = p.n / 2;
  Tensor<Scalar> grad_in(a.shape());
  auto gi_m = grad_in.matrix(channels, plane);
  const Scalar coeff = Scalar(2.0 * p.alpha * p.beta);
  for (Index j = 0; j < channels; ++j) {
    const Index lo = std::max<Index>(0, j - half);
    const Index hi = std::min<Index>(channels - 1, j + half);
    gi_m.row(j) = (g_m.row(j).array() * scale_pow.row(j).array() -
                   coeff * a_m.row(j).array() * ratio.middleRows(lo, hi - lo + 1).colwise().sum().array())
                      .matrix();
  }
  return grad_in;
}

// ---------------------------------------------------------------------------
// Dropout (inverted: survivors scaled by 1 / (1 - rate) while training)

template <typename Scalar>
struct DropoutState {
  double rate = 0.5;
  Mode mode = Mode::train;
  Tensor<Scalar> mask;  // 0/1 per element, filled by a train-mode forward

  Scalar scale() const { return Scalar(1.0 / (1.0 - rate)); }
};

namespace detail {
inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must be in [0, 1)");
}
}  // namespace detail

/// Test mode returns x unchanged and never touches rng. Train mode draws one
/// uniform per element in row-major order and drops it when the draw < rate.
template <typename Scalar>
Tensor<Scalar> dropout_forward(Tensor<Scalar> x, DropoutState<Scalar>& s, Rng& rng) {
  detail::check_dropout_rate(s.rate);
  if (s.mode == Mode::test) return x;
  s.mask = Tensor<Scalar>(x.shape());
  for (Index i = 0; i < x.size(); ++i) s.mask[i] = rng.uniform01() < s.rate ? Scalar(0) : Scalar(1);
  x.vec().array() *= s.mask.vec().array() * s.scale();
  return x;
}

template <typename Scalar>
Tensor<Scalar> dropout_backward(const DropoutState<Scalar>& s, Tensor<Scalar> grad_out) {
  detail::check_dropout_rate(s.rate);
  if (s.mode == Mode::test) return grad_out;
  if (s.mask.shape() != grad_out.shape()) throw ShapeError("dropout_backward: mask shape mismatch");
  grad_out.vec().array() *= s.mask.vec().array() * s.scale();
  return grad_out;
}

// ---------------------------------------------------------------------------
// Fully connected

template <typename Scalar>
struct FcGrads {
  Tensor<Scalar> input;
  Tensor<Scalar> weights;
  Tensor<Scalar> bias;
};

namespace detail {
template <typename Scalar>
void check_fc(const Tensor<Scalar>& x, const Tensor<Scalar>& weights, const Tensor<Scalar>& bias) {
  if (weights.rank() != 2) throw ShapeError("fc: weights must be [D_out, D_in]");
  if (x.size() != weights.dim(1))
    throw ShapeError("fc: input of " + std::to_string(x.size()) + " values, weights expect " +
                     std::to_string(weights.dim(1)));
  if (bias.rank() != 1 || bias.dim(0) != weights.dim(0)) throw ShapeError("fc: bias must be [D_out]");
}
}  // namespace detail

/// y = W x + b. x may have any shape with D_in elements; it is read flat.
template <typename Scalar>
Tensor<Scalar> fc_forward(const Tensor<Scalar>& x, const Tensor<Scalar>& weights,
                          const Tensor<Scalar>& bias) {
  detail::check_fc(x, weights, bias);
  Tensor<Scalar> y({weights.dim(0)});
  y.vec().noalias() = weights.matrix() * x.vec();
  y.vec() += bias.vec();
  return y;
}

template <typename Scalar>
FcGrads<Scalar> fc_backward(const Tensor<Scalar>& x, const Tensor<Scalar>& weights,
                            const Tensor<Scalar>& grad_out, bool need_input_grad = true) {
  if (grad_out.rank() != 1 || grad_out.dim(0) != weights.dim(0))
    throw ShapeError("fc_backward: grad_out must be [D_out]");
  if (weights.rank() != 2 || x.size() != weights.dim(1)) throw ShapeError("fc_backward: shape mismatch");
  FcGrads<Scalar> g;
  g.weights = Tensor<Scalar>(weights.shape());
  g.weights.matrix().noalias() = grad_out.vec() * x.vec().transpose();
  g.bias = grad_out;
  if (need_input_grad) {
    g.input = Tensor<Scalar>(x.shape());
    g.input.vec().noalias() = weights.matrix().transpose() * grad_out.vec();
  }
  return g;
}

// ---------------------------------------------------------------------------
// Softmax and multinomial logistic loss

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  if (logits.rank() != 1) throw ShapeError("softmax: logits must be 1-D");
  Tensor<Scalar> probs(logits.shape());
  const Scalar max = logits.vec().maxCoeff();
  probs.vec() = (logits.vec().array() - max).exp().matrix();
  probs.vec() /= probs.vec().sum();
  return probs;
}

template <typename Scalar>
struct SoftmaxLoss {
  Tensor<Scalar> probs;
  double loss = 0.0;
  Tensor<Scalar> grad_logits;
};

/// Negative log-probability of label, with the gradient probs - onehot(label).
template <typename Scalar>
SoftmaxLoss<Scalar> softmax_loss(const Tensor<Scalar>& logits, Index label) {
  if (logits.rank() != 1) throw ShapeError("softmax_loss: logits must be 1-D");
  if (label < 0 || label >= logits.size())
    throw IndexError("label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
  SoftmaxLoss<Scalar> r;
  r.probs = softmax(logits);
  // Log-sum-exp evaluated in double so saturated logits keep a usable loss.
  const double max = static_cast<double>(logits.vec().maxCoeff());
  double sum = 0.0;
  for (Index i = 0; i < logits.size(); ++i) sum += std::exp(static_cast<double>(logits[i]) - max);
  r.loss = std::log(sum) - (static_cast<double>(logits[label]) - max);
  r.grad_logits = r.probs;
  r.grad_logits[label] -= Scalar(1);
  return r;
}

}  // namespace sentinet

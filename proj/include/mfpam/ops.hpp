#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "mfpam/autodiff.hpp"
#include "mfpam/tensor.hpp"

namespace mfpam {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
MatMap<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MatMap<T>(t.raw(), Eigen::Index(rows), Eigen::Index(cols));
}
template <typename T>
CMatMap<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMatMap<T>(t.raw(), Eigen::Index(rows), Eigen::Index(cols));
}

template <typename T>
Var<T> op_output(Tensor<T> value, std::initializer_list<Var<T>> inputs) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || (in && in->requires_grad);
  return make_var(std::move(value), rg);
}

template <typename T>
bool wants(const Var<T>& v) {
  return v && v->requires_grad;
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

/// Zero padding applied to the two ends of the time axis.
struct Padding {
  std::size_t left = 0;
  std::size_t right = 0;

  static Padding symmetric(std::size_t p) { return {p, p}; }

  /// Total padding dilation*(K-1), split floor-left / ceil-right, which
  /// makes the output length ceil(T / stride) for any kernel parity.
  static Padding same(std::size_t kernel, std::size_t dilation = 1) {
    const std::size_t total = dilation * (kernel - 1);
    return {total / 2, total - total / 2};
  }
};

inline std::size_t conv_output_length(std::size_t length, std::size_t kernel,
                                      std::size_t stride, std::size_t dilation,
                                      Padding pad) {
  const std::size_t span = dilation * (kernel - 1) + 1;
  const std::size_t padded = length + pad.left + pad.right;
  if (span > padded)
    throw ConfigError("conv1d: kernel span " + std::to_string(span) +
                      " exceeds padded length " + std::to_string(padded));
  return (padded - span) / stride + 1;
}

/// 1-D cross-correlation. input [C_in x T], weight [C_out x C_in x K],
/// bias [C_out] (may be null).
template <typename T>
Var<T> conv1d(Tape<T>& tape, const Var<T>& input, const Var<T>& weight,
              const Var<T>& bias, std::size_t stride = 1,
              std::size_t dilation = 1, Padding pad = {}) {
  using namespace detail;
  const auto& x = input->value;
  const auto& w = weight->value;
  require(x.rank() == 2, "conv1d: input must be [C_in x T], got " +
                             shape_str(x.shape()));
  require(w.rank() == 3, "conv1d: weight must be [C_out x C_in x K], got " +
                             shape_str(w.shape()));
  require(stride >= 1 && dilation >= 1, "conv1d: stride/dilation must be >= 1");
  const std::size_t cin = x.extent(0), len = x.extent(1);
  const std::size_t cout = w.extent(0), k = w.extent(2);
  if (w.extent(1) != cin)
    throw ConfigError("conv1d: weight expects " + std::to_string(w.extent(1)) +
                      " input channels, input has " + std::to_string(cin));
  if (bias) require(bias->value.size() == cout, "conv1d: bias size mismatch");
  const std::size_t tout = conv_output_length(len, k, stride, dilation, pad);

  // im2col: rows (c, k), columns output time
  Tensor<T> cols(Shape{cin * k, tout});
  for (std::size_t c = 0; c < cin; ++c) {
    const T* xc = x.raw() + c * len;
    for (std::size_t kk = 0; kk < k; ++kk) {
      T* row = cols.raw() + (c * k + kk) * tout;
      const std::ptrdiff_t off = std::ptrdiff_t(kk * dilation) - std::ptrdiff_t(pad.left);
      for (std::size_t t = 0; t < tout; ++t) {
        const std::ptrdiff_t src = std::ptrdiff_t(t * stride) + off;
        row[t] = (src >= 0 && src < std::ptrdiff_t(len)) ? xc[src] : T(0);
      }
    }
  }

  Tensor<T> out(Shape{cout, tout});
  auto om = as_mat(out, cout, tout);
  om.noalias() = as_mat(w, cout, cin * k) * as_mat(cols, cin * k, tout);
  if (bias) {
    for (std::size_t o = 0; o < cout; ++o) om.row(Eigen::Index(o)).array() += bias->value[o];
  }
  auto result = op_output<T>(std::move(out), {input, weight, bias});
  if (!result->requires_grad) return result;

  tape.record(
      result,
      [=, cols = std::move(cols)]() {
        const auto& g = result->grad;
        auto gm = as_mat(g, cout, tout);
        if (wants(weight)) {
          auto& wg = weight->ensure_grad();
          as_mat(wg, cout, cin * k).noalias() +=
              gm * as_mat(cols, cin * k, tout).transpose();
        }
        if (wants(bias)) {
          auto& bg = bias->ensure_grad();
          for (std::size_t o = 0; o < cout; ++o) bg[o] += gm.row(Eigen::Index(o)).sum();
        }
        if (wants(input)) {
          Tensor<T> dcols(Shape{cin * k, tout});
          as_mat(dcols, cin * k, tout).noalias() =
              as_mat(weight->value, cout, cin * k).transpose() * gm;
          auto& xg = input->ensure_grad();
          for (std::size_t c = 0; c < cin; ++c) {
            T* xgc = xg.raw() + c * len;
            for (std::size_t kk = 0; kk < k; ++kk) {
              const T* row = dcols.raw() + (c * k + kk) * tout;
              const std::ptrdiff_t off =
                  std::ptrdiff_t(kk * dilation) - std::ptrdiff_t(pad.left);
              for (std::size_t t = 0; t < tout; ++t) {
                const std::ptrdiff_t src = std::ptrdiff_t(t * stride) + off;
                if (src >= 0 && src < std::ptrdiff_t(len)) xgc[src] += row[t];
              }
            }
          }
        }
      },
      {input, weight, bias});
  return result;
}

/// Per-channel convolution (multiplier 1). weight [C x K], bias [C].
template <typename T>
Var<T> depthwise_conv1d(Tape<T>& tape, const Var<T>& input,
                        const Var<T>& weight, const Var<T>& bias,
                        std::size_t stride = 1, Padding pad = {}) {
  using namespace detail;
  const auto& x = input->value;
  const auto& w = weight->value;
  require(x.rank() == 2 && w.rank() == 2,
          "depthwise_conv1d: expected [C x T] input and [C x K] weight");
  const std::size_t ch = x.extent(0), len = x.extent(1), k = w.extent(1);
  if (w.extent(0) != ch)
    throw ConfigError("depthwise_conv1d: weight has " +
                      std::to_string(w.extent(0)) + " channels, input has " +
                      std::to_string(ch));
  if (bias) require(bias->value.size() == ch, "depthwise_conv1d: bias size mismatch");
  const std::size_t tout = conv_output_length(len, k, stride, 1, pad);

  Tensor<T> out(Shape{ch, tout});
  for (std::size_t c = 0; c < ch; ++c) {
    const T* xc = x.raw() + c * len;
    const T* wc = w.raw() + c * k;
    T* oc = out.raw() + c * tout;
    const T b = bias ? bias->value[c] : T(0);
    for (std::size_t t = 0; t < tout; ++t) {
      T acc = b;
      const std::ptrdiff_t base = std::ptrdiff_t(t * stride) - std::ptrdiff_t(pad.left);
      for (std::size_t kk = 0; kk < k; ++kk) {
        const std::ptrdiff_t src = base + std::ptrdiff_t(kk);
        if (src >= 0 && src < std::ptrdiff_t(len)) acc += wc[kk] * xc[src];
      }
      oc[t] = acc;
    }
  }
  auto result = op_output<T>(std::move(out), {input, weight, bias});
  if (!result->requires_grad) return result;

  tape.record(
      result,
      [=]() {
        const auto& g = result->grad;
        const auto& xv = input->value;
        const auto& wv = weight->value;
        T* xg = wants(input) ? input->ensure_grad().raw() : nullptr;
        T* wg = wants(weight) ? weight->ensure_grad().raw() : nullptr;
        T* bg = wants(bias) ? bias->ensure_grad().raw() : nullptr;
        for (std::size_t c = 0; c < ch; ++c) {
          const T* gc = g.raw() + c * tout;
          const T* xc = xv.raw() + c * len;
          const T* wc = wv.raw() + c * k;
          for (std::size_t t = 0; t < tout; ++t) {
            const T gt = gc[t];
            if (bg) bg[c] += gt;
            const std::ptrdiff_t base =
                std::ptrdiff_t(t * stride) - std::ptrdiff_t(pad.left);
            for (std::size_t kk = 0; kk < k; ++kk) {
              const std::ptrdiff_t src = base + std::ptrdiff_t(kk);
              if (src < 0 || src >= std::ptrdiff_t(len)) continue;
              if (wg) wg[c * k + kk] += gt * xc[src];
              if (xg) xg[c * len + std::size_t(src)] += gt * wc[kk];
            }
          }
        }
      },
      {input, weight, bias});
  return result;
}

/// 1x1 convolution: weight [C_out x C_in], bias [C_out].
template <typename T>
Var<T> pointwise_conv1d(Tape<T>& tape, const Var<T>& input,
                        const Var<T>& weight, const Var<T>& bias) {
  using namespace detail;
  const auto& x = input->value;
  const auto& w = weight->value;
  require(x.rank() == 2 && w.rank() == 2,
          "pointwise_conv1d: expected [C x T] input and [C_out x C_in] weight");
  const std::size_t cin = x.extent(0), len = x.extent(1), cout = w.extent(0);
  if (w.extent(1) != cin)
    throw ConfigError("pointwise_conv1d: weight expects " +
                      std::to_string(w.extent(1)) + " channels, input has " +
                      std::to_string(cin));
  if (bias) require(bias->value.size() == cout, "pointwise_conv1d: bias size mismatch");
  Tensor<T> out(Shape{cout, len});
  auto om = as_mat(out, cout, len);
  om.noalias() = as_mat(w, cout, cin) * as_mat(x, cin, len);
  if (bias)
    for (std::size_t o = 0; o < cout; ++o) om.row(Eigen::Index(o)).array() += bias->value[o];
  auto result = op_output<T>(std::move(out), {input, weight, bias});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        auto gm = as_mat(result->grad, cout, len);
        if (wants(weight))
          as_mat(weight->ensure_grad(), cout, cin).noalias() +=
              gm * as_mat(input->value, cin, len).transpose();
        if (wants(bias)) {
          auto& bg = bias->ensure_grad();
          for (std::size_t o = 0; o < cout; ++o) bg[o] += gm.row(Eigen::Index(o)).sum();
        }
        if (wants(input))
          as_mat(input->ensure_grad(), cin, len).noalias() +=
              as_mat(weight->value, cout, cin).transpose() * gm;
      },
      {input, weight, bias});
  return result;
}

/// Depthwise convolution followed by a pointwise channel mix.
template <typename T>
Var<T> depthwise_separable_conv1d(Tape<T>& tape, const Var<T>& input,
                                  const Var<T>& dw_weight, const Var<T>& dw_bias,
                                  const Var<T>& pw_weight, const Var<T>& pw_bias,
                                  std::size_t stride = 1,
                                  std::optional<Padding> pad = std::nullopt) {
  const Padding p = pad.value_or(Padding::same(dw_weight->value.extent(1)));
  auto mid = depthwise_conv1d(tape, input, dw_weight, dw_bias, stride, p);
  return pointwise_conv1d(tape, mid, pw_weight, pw_bias);
}

/// Affine map over the last axis. input [N x D_in] or [D_in].
template <typename T>
Var<T> linear(Tape<T>& tape, const Var<T>& input, const Var<T>& weight,
              const Var<T>& bias) {
  using namespace detail;
  const auto& x = input->value;
  const auto& w = weight->value;
  require(w.rank() == 2, "linear: weight must be [D_out x D_in]");
  require(x.rank() == 1 || x.rank() == 2, "linear: input must be rank 1 or 2");
  const std::size_t din = w.extent(1), dout = w.extent(0);
  const std::size_t n = x.rank() == 1 ? 1 : x.extent(0);
  if (x.shape().back() != din)
    throw ConfigError("linear: input last extent " +
                      std::to_string(x.shape().back()) + " != D_in " +
                      std::to_string(din));
  if (bias) require(bias->value.size() == dout, "linear: bias size mismatch");
  Tensor<T> out(x.rank() == 1 ? Shape{dout} : Shape{n, dout});
  auto om = as_mat(out, n, dout);
  om.noalias() = as_mat(x, n, din) * as_mat(w, dout, din).transpose();
  if (bias) om.rowwise() += CVecMap<T>(bias->value.raw(), Eigen::Index(dout)).transpose();
  auto result = op_output<T>(std::move(out), {input, weight, bias});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        auto gm = as_mat(result->grad, n, dout);
        if (wants(weight))
          as_mat(weight->ensure_grad(), dout, din).noalias() +=
              gm.transpose() * as_mat(input->value, n, din);
        if (wants(bias))
          VecMap<T>(bias->ensure_grad().raw(), Eigen::Index(dout)) +=
              gm.colwise().sum().transpose();
        if (wants(input))
          as_mat(input->ensure_grad(), n, din).noalias() +=
              gm * as_mat(weight->value, dout, din);
      },
      {input, weight, bias});
  return result;
}

enum class ActivationKind { relu, swish, sigmoid, snake };

struct Activation {
  ActivationKind kind = ActivationKind::relu;
  double a = 1.0;  // snake frequency; unused otherwise

  static Activation relu() { return {ActivationKind::relu, 1.0}; }
  static Activation swish() { return {ActivationKind::swish, 1.0}; }
  static Activation sigmoid() { return {ActivationKind::sigmoid, 1.0}; }
  static Activation snake(double a) { return {ActivationKind::snake, a}; }
};

/// x + sin^2(a x) / a
template <typename T>
T snake_value(T a, T x) {
  const T s = std::sin(a * x);
  return x + s * s / a;
}

template <typename T>
Var<T> activation(Tape<T>& tape, const Var<T>& input, Activation act) {
  using namespace detail;
  if (act.kind == ActivationKind::snake && !(act.a > 0))
    throw ConfigError("snake: a must be positive, got " + std::to_string(act.a));
  const auto& x = input->value;
  Tensor<T> out(x.shape());
  const T a = T(act.a);
  const std::size_t n = x.size();
  switch (act.kind) {
    case ActivationKind::relu:
      // written so a NaN input stays NaN
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] < T(0) ? T(0) : x[i];
      break;
    case ActivationKind::swish:
      for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * sigmoid(x[i]);
      break;
    case ActivationKind::sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid(x[i]);
      break;
    case ActivationKind::snake:
      for (std::size_t i = 0; i < n; ++i) out[i] = snake_value(a, x[i]);
      break;
  }
  auto result = op_output<T>(std::move(out), {input});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        const auto& xv = input->value;
        const auto& yv = result->value;
        const auto& g = result->grad;
        auto& xg = input->ensure_grad();
        switch (act.kind) {
          case ActivationKind::relu:
            for (std::size_t i = 0; i < n; ++i)
              if (xv[i] > T(0)) xg[i] += g[i];
            break;
          case ActivationKind::swish:
            for (std::size_t i = 0; i < n; ++i) {
              const T s = sigmoid(xv[i]);
              xg[i] += g[i] * (s + xv[i] * s * (T(1) - s));
            }
            break;
          case ActivationKind::sigmoid:
            for (std::size_t i = 0; i < n; ++i)
              xg[i] += g[i] * yv[i] * (T(1) - yv[i]);
            break;
          case ActivationKind::snake:
            // d/dx [x + sin^2(ax)/a] = 1 + sin(2ax)
            for (std::size_t i = 0; i < n; ++i)
              xg[i] += g[i] * (T(1) + std::sin(T(2) * a * xv[i]));
            break;
        }
      },
      {input});
  return result;
}

enum class ResampleMode { nearest, linear };

/// Resizes the time axis of [C x T]. Linear mode aligns the first and last
/// samples of input and output.
template <typename T>
Var<T> resample_time(Tape<T>& tape, const Var<T>& input, std::size_t target,
                     ResampleMode mode) {
  using namespace detail;
  const auto& x = input->value;
  require(x.rank() == 2, "resample_time: input must be [C x T]");
  require(target >= 1 && x.extent(1) >= 1, "resample_time: lengths must be >= 1");
  const std::size_t ch = x.extent(0), len = x.extent(1);
  if (target == len) {
    // identity; still a fresh node so the graph stays uniform
    auto result = op_output<T>(Tensor<T>(x), {input});
    if (result->requires_grad)
      tape.record(
          result,
          [=]() {
            auto& xg = input->ensure_grad();
            const auto& g = result->grad;
            for (std::size_t i = 0; i < g.size(); ++i) xg[i] += g[i];
          },
          {input});
    return result;
  }
  // each output sample reads lo with weight (1-frac) and hi with weight frac
  std::vector<std::size_t> lo(target), hi(target);
  std::vector<T> frac(target);
  for (std::size_t i = 0; i < target; ++i) {
    if (mode == ResampleMode::nearest) {
      lo[i] = hi[i] = std::min(len - 1, (i * len) / target);
      frac[i] = T(0);
    } else {
      const double pos = target == 1 ? 0.0
                                     : double(i) * double(len - 1) / double(target - 1);
      std::size_t l = std::min(len - 1, std::size_t(std::floor(pos)));
      lo[i] = l;
      hi[i] = std::min(len - 1, l + 1);
      frac[i] = T(pos - double(l));
    }
  }
  Tensor<T> out(Shape{ch, target});
  for (std::size_t c = 0; c < ch; ++c) {
    const T* xc = x.raw() + c * len;
    T* oc = out.raw() + c * target;
    for (std::size_t i = 0; i < target; ++i)
      oc[i] = xc[lo[i]] + frac[i] * (xc[hi[i]] - xc[lo[i]]);
  }
  auto result = op_output<T>(std::move(out), {input});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        auto& xg = input->ensure_grad();
        const auto& g = result->grad;
        for (std::size_t c = 0; c < ch; ++c) {
          T* xgc = xg.raw() + c * len;
          const T* gc = g.raw() + c * target;
          for (std::size_t i = 0; i < target; ++i) {
            xgc[lo[i]] += (T(1) - frac[i]) * gc[i];
            xgc[hi[i]] += frac[i] * gc[i];
          }
        }
      },
      {input});
  return result;
}

template <typename T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.shape() != b->value.shape())
    throw ConfigError("add: shape mismatch " + shape_str(a->value.shape()) +
                      " vs " + shape_str(b->value.shape()));
  Tensor<T> out(a->value);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
  auto result = detail::op_output<T>(std::move(out), {a, b});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        const auto& g = result->grad;
        for (const auto* v : {&a, &b}) {
          if (!detail::wants(*v)) continue;
          auto& vg = (*v)->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) vg[i] += g[i];
        }
      },
      {a, b});
  return result;
}

/// Elementwise product.
template <typename T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
  if (a->value.shape() != b->value.shape())
    throw ConfigError("mul: shape mismatch");
  Tensor<T> out(a->value);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
  auto result = detail::op_output<T>(std::move(out), {a, b});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        const auto& g = result->grad;
        if (detail::wants(a)) {
          auto& ag = a->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * b->value[i];
        }
        if (detail::wants(b)) {
          auto& bg = b->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * a->value[i];
        }
      },
      {a, b});
  return result;
}

template <typename T>
Var<T> scale(Tape<T>& tape, const Var<T>& a, T factor) {
  Tensor<T> out(a->value);
  for (auto& v : out.storage()) v *= factor;
  auto result = detail::op_output<T>(std::move(out), {a});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        auto& ag = a->ensure_grad();
        const auto& g = result->grad;
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * factor;
      },
      {a});
  return result;
}

/// Sum of all elements as a scalar.
template <typename T>
Var<T> sum(Tape<T>& tape, const Var<T>& a) {
  T s = T(0);
  for (T v : a->value.storage()) s += v;
  auto result = detail::op_output<T>(Tensor<T>::scalar(s), {a});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        auto& ag = a->ensure_grad();
        const T g = result->grad[0];
        for (auto& v : ag.storage()) v += g;
      },
      {a});
  return result;
}

/// Stacks [C_k x T] tensors along the channel axis.
template <typename T>
Var<T> concat_channels(Tape<T>& tape, const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  const std::size_t len = parts[0]->value.extent(1);
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require(p->value.rank() == 2 && p->value.extent(1) == len,
                    "concat_channels: all inputs must be [C x T] with equal T");
    total += p->value.extent(0);
    rg = rg || p->requires_grad;
  }
  Tensor<T> out(Shape{total, len});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p->value.storage().begin(), p->value.storage().end(),
              out.storage().begin() + std::ptrdiff_t(off));
    off += p->value.size();
  }
  auto result = make_var(std::move(out), rg);
  if (!rg) return result;
  tape.record(
      result,
      [=]() {
        std::size_t o = 0;
        for (const auto& p : parts) {
          if (p->requires_grad) {
            auto& pg = p->ensure_grad();
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += result->grad[o + i];
          }
          o += p->value.size();
        }
      },
      parts);
  return result;
}

template <typename T>
Var<T> transpose(Tape<T>& tape, const Var<T>& a) {
  detail::require(a->value.rank() == 2, "transpose: input must be rank 2");
  const std::size_t r = a->value.extent(0), c = a->value.extent(1);
  Tensor<T> out(Shape{c, r});
  detail::as_mat(out, c, r) = detail::as_mat(a->value, r, c).transpose();
  auto result = detail::op_output<T>(std::move(out), {a});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=]() {
        detail::as_mat(a->ensure_grad(), r, c) +=
            detail::as_mat(result->grad, c, r).transpose();
      },
      {a});
  return result;
}

/// Fast normalized fusion blend: sum_k relu(w_k) X_k / (sum_k relu(w_k) + eps).
template <typename T>
Var<T> weighted_blend(Tape<T>& tape, const std::vector<Var<T>>& inputs,
                      const Var<T>& weights, T eps) {
  detail::require(!inputs.empty(), "weighted_blend: no inputs");
  detail::require(weights->value.size() == inputs.size(),
                  "weighted_blend: need one weight per input");
  detail::require(eps > T(0), "weighted_blend: epsilon must be positive");
  const Shape& shape = inputs[0]->value.shape();
  for (const auto& in : inputs)
    detail::require(in->value.shape() == shape,
                    "weighted_blend: inputs must share one shape");
  const std::size_t n = inputs.size();
  std::vector<T> r(n);
  T s = T(0);
  for (std::size_t k = 0; k < n; ++k) {
    r[k] = std::max(T(0), weights->value[k]);
    s += r[k];
  }
  const T denom = s + eps;
  Tensor<T> out(shape);
  for (std::size_t k = 0; k < n; ++k) {
    const T c = r[k] / denom;
    const auto& xv = inputs[k]->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * xv[i];
  }
  bool rg = weights->requires_grad;
  for (const auto& in : inputs) rg = rg || in->requires_grad;
  auto result = make_var(std::move(out), rg);
  if (!rg) return result;
  std::vector<Var<T>> all = inputs;
  all.push_back(weights);
  tape.record(
      result,
      [=]() {
        const auto& g = result->grad;
        const auto& y = result->value;
        for (std::size_t k = 0; k < n; ++k) {
          const auto& xv = inputs[k]->value;
          if (inputs[k]->requires_grad) {
            auto& xg = inputs[k]->ensure_grad();
            const T c = r[k] / denom;
            for (std::size_t i = 0; i < g.size(); ++i) xg[i] += c * g[i];
          }
          if (weights->requires_grad && weights->value[k] > T(0)) {
            // d y / d r_k = (X_k - y) / denom
            T acc = T(0);
            for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * (xv[i] - y[i]);
            weights->ensure_grad()[k] += acc / denom;
          }
        }
      },
      all);
  return result;
}

/// Weights of one LSTM direction. Gate rows are ordered input, forget,
/// cell candidate, output.
template <typename T>
struct LstmWeights {
  Var<T> w_ih;  // [4H x C]
  Var<T> w_hh;  // [4H x H]
  Var<T> bias;  // [4H]
};

namespace detail {

template <typename T>
Var<T> lstm_direction(Tape<T>& tape, const Var<T>& input,
                      const LstmWeights<T>& p, bool reverse) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  const auto& x = input->value;
  const std::size_t c = x.extent(0), len = x.extent(1);
  const std::size_t h4 = p.w_ih->value.extent(0), h = h4 / 4;
  require(h4 % 4 == 0 && p.w_ih->value.extent(1) == c,
          "lstm: w_ih must be [4H x C] matching input channels");
  require(p.w_hh->value.extent(0) == h4 && p.w_hh->value.extent(1) == h,
          "lstm: w_hh must be [4H x H]");
  require(p.bias->value.size() == h4, "lstm: bias must be [4H]");
  require(len >= 1, "lstm: sequence must be non-empty");

  const Eigen::Index H = Eigen::Index(h), T4 = Eigen::Index(h4), L = Eigen::Index(len);
  const Mat X = as_mat(x, c, len);  // column t = input at time t
  const Mat Wih = as_mat(p.w_ih->value, h4, c);
  const Mat Whh = as_mat(p.w_hh->value, h4, h);
  const Vec b = CVecMap<T>(p.bias->value.raw(), T4);

  Mat gates(T4, L);   // post-activation i, f, g, o
  Mat cells(H, L);
  Mat hidden(H, L);
  Mat hprev(H, L);    // h fed into step t
  Mat pre = Wih * X;
  pre.colwise() += b;

  Vec hv = Vec::Zero(H), cv = Vec::Zero(H);
  for (Eigen::Index s = 0; s < L; ++s) {
    const Eigen::Index t = reverse ? L - 1 - s : s;
    hprev.col(t) = hv;
    Vec z = pre.col(t) + Whh * hv;
    for (Eigen::Index j = 0; j < H; ++j) {
      const T ig = sigmoid(z(j));
      const T fg = sigmoid(z(H + j));
      const T gg = std::tanh(z(2 * H + j));
      const T og = sigmoid(z(3 * H + j));
      const T cn = fg * cv(j) + ig * gg;
      gates(j, t) = ig;
      gates(H + j, t) = fg;
      gates(2 * H + j, t) = gg;
      gates(3 * H + j, t) = og;
      cv(j) = cn;
      hv(j) = og * std::tanh(cn);
    }
    cells.col(t) = cv;
    hidden.col(t) = hv;
  }
  Tensor<T> out(Shape{h, len});
  as_mat(out, h, len) = hidden;
  auto result = op_output<T>(std::move(out), {input, p.w_ih, p.w_hh, p.bias});
  if (!result->requires_grad) return result;

  tape.record(
      result,
      [=]() {
        const Mat G = as_mat(result->grad, h, len);
        const Mat Whh_ = as_mat(p.w_hh->value, h4, h);
        Mat dZ(T4, L);
        Vec dh_next = Vec::Zero(H), dc_next = Vec::Zero(H);
        for (Eigen::Index s = L - 1; s >= 0; --s) {
          const Eigen::Index t = reverse ? L - 1 - s : s;
          const Eigen::Index tp = reverse ? t + 1 : t - 1;
          const bool has_prev = s > 0;
          Vec dh = G.col(t) + dh_next;
          for (Eigen::Index j = 0; j < H; ++j) {
            const T ig = gates(j, t), fg = gates(H + j, t);
            const T gg = gates(2 * H + j, t), og = gates(3 * H + j, t);
            const T tc = std::tanh(cells(j, t));
            const T dout = dh(j) * tc;
            const T dc = dh(j) * og * (T(1) - tc * tc) + dc_next(j);
            const T cprev = has_prev ? cells(j, tp) : T(0);
            dZ(j, t) = dc * gg * ig * (T(1) - ig);
            dZ(H + j, t) = dc * cprev * fg * (T(1) - fg);
            dZ(2 * H + j, t) = dc * ig * (T(1) - gg * gg);
            dZ(3 * H + j, t) = dout * og * (T(1) - og);
            dc_next(j) = dc * fg;
          }
          dh_next = Whh_.transpose() * dZ.col(t);
        }
        if (wants(p.w_ih))
          as_mat(p.w_ih->ensure_grad(), h4, c) += dZ * X.transpose();
        if (wants(p.w_hh))
          as_mat(p.w_hh->ensure_grad(), h4, h) += dZ * hprev.transpose();
        if (wants(p.bias))
          VecMap<T>(p.bias->ensure_grad().raw(), T4) += dZ.rowwise().sum();
        if (wants(input)) {
          const Mat Wih_ = as_mat(p.w_ih->value, h4, c);
          as_mat(input->ensure_grad(), c, len) += Wih_.transpose() * dZ;
        }
      },
      {input, p.w_ih, p.w_hh, p.bias});
  return result;
}

}  // namespace detail

/// LSTM over the time axis of [C x T] with zero initial state. When a
/// backward direction is given, both directional outputs are summed so the
/// result keeps H channels.
template <typename T>
Var<T> lstm_sequence(Tape<T>& tape, const Var<T>& input,
                     const LstmWeights<T>& forward,
                     const std::optional<LstmWeights<T>>& backward = std::nullopt) {
  detail::require(input->value.rank() == 2, "lstm: input must be [C x T]");
  auto out = detail::lstm_direction(tape, input, forward, false);
  if (!backward) return out;
  auto rev = detail::lstm_direction(tape, input, *backward, true);
  return add(tape, out, rev);
}

/// Binary cross-entropy summed over bins and averaged over frames.
/// probs and targets are [frames x bins]. Probabilities are clamped to
/// [clamp, 1 - clamp]; the gradient is evaluated at the clamped value.
template <typename T>
Var<T> bce_loss(Tape<T>& tape, const Var<T>& probs, const Tensor<T>& targets,
                T clamp = T(1e-7)) {
  const auto& p = probs->value;
  if (p.shape() != targets.shape())
    throw ConfigError("bce_loss: prediction " + shape_str(p.shape()) +
                      " vs target " + shape_str(targets.shape()));
  const std::size_t frames = p.rank() == 1 ? 1 : p.extent(0);
  // compensated double accumulation; the loss sums thousands of terms and
  // finite-difference checks resolve it to a few ulp
  double total = 0.0, carry = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(double(p[i]), double(clamp), 1.0 - double(clamp));
    const double y = double(targets[i]);
    const double term = -y * std::log(q) - (1.0 - y) * std::log1p(-q);
    const double t = total + term;
    carry += std::abs(total) >= std::abs(term) ? (total - t) + term : (term - t) + total;
    total = t;
  }
  total += carry;
  auto result = detail::op_output<T>(Tensor<T>::scalar(T(total / double(frames))), {probs});
  if (!result->requires_grad) return result;
  tape.record(
      result,
      [=, targets = targets]() {
        auto& pg = probs->ensure_grad();
        const T g = result->grad[0] / T(frames);
        const auto& pv = probs->value;
        for (std::size_t i = 0; i < pv.size(); ++i) {
          const T q = std::clamp(pv[i], clamp, T(1) - clamp);
          pg[i] += g * (q - targets[i]) / (q * (T(1) - q));
        }
      },
      {probs});
  return result;
}

}  // namespace mfpam

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "clinfuse/tensor.hpp"

namespace clinfuse {

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

template <typename Scalar>
void require_finite(const BasicTensor<Scalar>& t, const char* op) {
  if (!t.value().allFinite()) throw NumericError(std::string(op) + ": input contains NaN or Inf");
}

template <typename Scalar>
void require_rank(const BasicTensor<Scalar>& t, std::size_t rank, const char* op) {
  require(t.defined(), std::string(op) + ": undefined input");
  require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                shape_string(t.shape()));
}

// Unfolds one [C,H,W] image into a (C*k*k) x (Ho*Wo) row-major patch matrix.
template <typename Scalar>
void im2col(const Scalar* x, Index channels, Index height, Index width, Index k, Index stride, Index pad,
            Index out_h, Index out_w, Scalar* cols) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = cols + ((c * k + ky) * k + kx) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            row[oy * out_w + ox] = (iy >= 0 && iy < height && ix >= 0 && ix < width)
                                       ? x[(c * height + iy) * width + ix]
                                       : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* cols, Index channels, Index height, Index width, Index k, Index stride, Index pad,
            Index out_h, Index out_w, Scalar* dx) {
  const Index plane = out_h * out_w;
  for (Index c = 0; c < channels; ++c) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* row = cols + ((c * k + ky) * k + kx) * plane;
        for (Index oy = 0; oy < out_h; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= height) continue;
          for (Index ox = 0; ox < out_w; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < width) dx[(c * height + iy) * width + ix] += row[oy * out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation over [B,Cin,H,W] with a [Cout,Cin,k,k] kernel.
/// `bias` may be an undefined tensor (no bias term).
template <typename Scalar>
BasicTensor<Scalar> conv2d(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& weight,
                           const BasicTensor<Scalar>& bias, Index stride = 1, Index pad = 0) {
  using detail::require;
  using Vector = typename BasicTensor<Scalar>::Vector;
  using Mat = detail::RowMatrix<Scalar>;
  detail::require_rank(input, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d weight");
  const Index batch = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const Index cout = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == cin, "conv2d: weight expects " + std::to_string(weight.dim(1)) +
                                    " input channels, input has " + std::to_string(cin));
  require(weight.dim(3) == k && (k == 1 || k == 3), "conv2d: kernel must be 1x1 or 3x3");
  require(stride >= 1 && pad >= 0, "conv2d: stride must be positive and pad non-negative");
  require(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d: kernel larger than padded input");
  const bool has_bias = bias.defined();
  if (has_bias) require(bias.rank() == 1 && bias.dim(0) == cout, "conv2d: bias must have shape [Cout]");
  detail::require_finite(input, "conv2d");
  detail::require_finite(weight, "conv2d");

  const Index oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
  const Index plane = oh * ow, patch = cin * k * k;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  Vector out(batch * cout * plane);
  const auto wm = detail::ConstRowMap<Scalar>(weight.data(), cout, patch);
  Mat cols(patch, plane);
  for (Index b = 0; b < batch; ++b) {
    const Scalar* xb = input.data() + b * cin * h * w;
    auto yb = detail::RowMap<Scalar>(out.data() + b * cout * plane, cout, plane);
    if (pointwise) {
      yb.noalias() = wm * detail::ConstRowMap<Scalar>(xb, cin, plane);
    } else {
      detail::im2col(xb, cin, h, w, k, stride, pad, oh, ow, cols.data());
      yb.noalias() = wm * cols;
    }
    if (has_bias) yb.colwise() += bias.value();
  }

  std::vector<std::shared_ptr<TensorNode<Scalar>>> inputs{input.node_ptr(), weight.node_ptr()};
  if (has_bias) inputs.push_back(bias.node_ptr());
  return BasicTensor<Scalar>::result(
      {batch, cout, oh, ow}, std::move(out), "conv2d", std::move(inputs),
      [=](TensorNode<Scalar>& self) {
        auto& x = *self.inputs[0];
        auto& wt = *self.inputs[1];
        const auto wmat = detail::ConstRowMap<Scalar>(wt.value.data(), cout, patch);
        Mat patches(patch, plane);
        Mat dcols(patch, plane);
        for (Index b = 0; b < batch; ++b) {
          const Scalar* xb = x.value.data() + b * cin * h * w;
          const auto dy = detail::ConstRowMap<Scalar>(self.grad.data() + b * cout * plane, cout, plane);
          if (wt.requires_grad) {
            auto dw = detail::RowMap<Scalar>(wt.grad_buffer().data(), cout, patch);
            if (pointwise) {
              dw.noalias() += dy * detail::ConstRowMap<Scalar>(xb, cin, plane).transpose();
            } else {
              detail::im2col(xb, cin, h, w, k, stride, pad, oh, ow, patches.data());
              dw.noalias() += dy * patches.transpose();
            }
          }
          if (has_bias && self.inputs[2]->requires_grad) self.inputs[2]->grad_buffer() += dy.rowwise().sum();
          if (x.requires_grad) {
            Scalar* dx = x.grad_buffer().data() + b * cin * h * w;
            if (pointwise) {
              detail::RowMap<Scalar>(dx, cin, plane).noalias() += wmat.transpose() * dy;
            } else {
              dcols.noalias() = wmat.transpose() * dy;
              detail::col2im(dcols.data(), cin, h, w, k, stride, pad, oh, ow, dx);
            }
          }
        }
      });
}

/// out = input * weight^T + bias, input [B,Din], weight [Dout,Din], bias [Dout].
template <typename Scalar>
BasicTensor<Scalar> fully_connected(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& weight,
                                    const BasicTensor<Scalar>& bias) {
  using Vector = typename BasicTensor<Scalar>::Vector;
  detail::require_rank(input, 2, "fully_connected");
  detail::require_rank(weight, 2, "fully_connected weight");
  detail::require_rank(bias, 1, "fully_connected bias");
  const Index batch = input.dim(0), din = input.dim(1), dout = weight.dim(0);
  detail::require(weight.dim(1) == din, "fully_connected: weight expects width " + std::to_string(weight.dim(1)) +
                                            ", input has " + std::to_string(din));
  detail::require(bias.dim(0) == dout, "fully_connected: bias width mismatch");
  detail::require_finite(input, "fully_connected");
  detail::require_finite(weight, "fully_connected");

  Vector out(batch * dout);
  auto y = detail::RowMap<Scalar>(out.data(), batch, dout);
  y.noalias() = detail::ConstRowMap<Scalar>(input.data(), batch, din) *
                detail::ConstRowMap<Scalar>(weight.data(), dout, din).transpose();
  y.rowwise() += bias.value().transpose();

  return BasicTensor<Scalar>::result(
      {batch, dout}, std::move(out), "fully_connected",
      {input.node_ptr(), weight.node_ptr(), bias.node_ptr()}, [=](TensorNode<Scalar>& self) {
        auto& x = *self.inputs[0];
        auto& wt = *self.inputs[1];
        auto& bs = *self.inputs[2];
        const auto dy = detail::ConstRowMap<Scalar>(self.grad.data(), batch, dout);
        if (x.requires_grad) {
          detail::RowMap<Scalar>(x.grad_buffer().data(), batch, din).noalias() +=
              dy * detail::ConstRowMap<Scalar>(wt.value.data(), dout, din);
        }
        if (wt.requires_grad) {
          detail::RowMap<Scalar>(wt.grad_buffer().data(), dout, din).noalias() +=
              dy.transpose() * detail::ConstRowMap<Scalar>(x.value.data(), batch, din);
        }
        if (bs.requires_grad) bs.grad_buffer() += dy.colwise().sum().transpose();
      });
}

/// Elementwise max(0, x); the subgradient at exactly 0 is 0.
template <typename Scalar>
BasicTensor<Scalar> relu(const BasicTensor<Scalar>& input) {
  typename BasicTensor<Scalar>::Vector out = input.value().cwiseMax(Scalar(0));
  return BasicTensor<Scalar>::result(input.shape(), std::move(out), "relu", {input.node_ptr()},
                                     [](TensorNode<Scalar>& self) {
                                       auto& x = *self.inputs[0];
                                       x.grad_buffer().array() +=
                                           (x.value.array() > Scalar(0)).select(self.grad.array(), Scalar(0));
                                     });
}

template <typename Scalar>
BasicTensor<Scalar> sigmoid(const BasicTensor<Scalar>& input) {
  typename BasicTensor<Scalar>::Vector out =
      (Scalar(1) / (Scalar(1) + (-input.value().array()).exp())).matrix();
  return BasicTensor<Scalar>::result(input.shape(), std::move(out), "sigmoid", {input.node_ptr()},
                                     [](TensorNode<Scalar>& self) {
                                       auto& x = *self.inputs[0];
                                       const auto s = self.value.array();
                                       x.grad_buffer().array() += self.grad.array() * s * (Scalar(1) - s);
                                     });
}

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  typename BasicTensor<Scalar>::Vector out = a.value() + b.value();
  return BasicTensor<Scalar>::result(a.shape(), std::move(out), "add", {a.node_ptr(), b.node_ptr()},
                                     [](TensorNode<Scalar>& self) {
                                       for (auto& in : self.inputs) {
                                         if (in->requires_grad) in->grad_buffer() += self.grad;
                                       }
                                     });
}

/// Sum of all elements as a [1] tensor.
template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& input) {
  typename BasicTensor<Scalar>::Vector out(1);
  out(0) = input.value().sum();
  return BasicTensor<Scalar>::result({1}, std::move(out), "sum", {input.node_ptr()},
                                     [](TensorNode<Scalar>& self) {
                                       self.inputs[0]->grad_buffer().array() += self.grad(0);
                                     });
}

enum class NormMode { Train, Eval };

template <typename Scalar>
struct RunningStats {
  typename BasicTensor<Scalar>::Vector mean;
  typename BasicTensor<Scalar>::Vector var;

  static RunningStats init(Index channels) {
    return {BasicTensor<Scalar>::Vector::Zero(channels), BasicTensor<Scalar>::Vector::Ones(channels)};
  }
};

struct NormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

namespace detail {

template <typename Scalar>
void check_norm_args(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& gamma,
                     const BasicTensor<Scalar>& beta, const RunningStats<Scalar>& stats) {
  require_rank(input, 4, "batch_norm");
  const Index c = input.dim(1);
  require(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
          "batch_norm: gamma/beta must have shape [" + std::to_string(c) + "]");
  require(stats.mean.size() == c && stats.var.size() == c, "batch_norm: running stats width mismatch");
}

// Shared affine stage: out = gamma * xhat + beta, with xhat given per element.
template <typename Scalar>
BasicTensor<Scalar> norm_affine(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& gamma,
                                const BasicTensor<Scalar>& beta, typename BasicTensor<Scalar>::Vector xhat,
                                typename BasicTensor<Scalar>::Vector inv_std, bool batch_stats) {
  const Index batch = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  typename BasicTensor<Scalar>::Vector out(xhat.size());
  for (Index b = 0; b < batch; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * plane;
      out.segment(off, plane) = (xhat.segment(off, plane).array() * gamma.value()(ch) + beta.value()(ch)).matrix();
    }
  }
  return BasicTensor<Scalar>::result(
      input.shape(), std::move(out), batch_stats ? "batch_norm_train" : "batch_norm_eval",
      {input.node_ptr(), gamma.node_ptr(), beta.node_ptr()},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<Scalar>& self) {
        auto& x = *self.inputs[0];
        auto& g = *self.inputs[1];
        auto& bt = *self.inputs[2];
        const Scalar n = static_cast<Scalar>(batch * plane);
        for (Index ch = 0; ch < c; ++ch) {
          Scalar sum_dy = 0, sum_dy_xhat = 0;
          for (Index b = 0; b < batch; ++b) {
            const Index off = (b * c + ch) * plane;
            sum_dy += self.grad.segment(off, plane).sum();
            sum_dy_xhat += self.grad.segment(off, plane).dot(xhat.segment(off, plane));
          }
          if (g.requires_grad) g.grad_buffer()(ch) += sum_dy_xhat;
          if (bt.requires_grad) bt.grad_buffer()(ch) += sum_dy;
          if (!x.requires_grad) continue;
          const Scalar gam = g.value(ch);
          auto& dx = x.grad_buffer();
          for (Index b = 0; b < batch; ++b) {
            const Index off = (b * c + ch) * plane;
            if (batch_stats) {
              dx.segment(off, plane).array() +=
                  gam * inv_std(ch) / n *
                  (n * self.grad.segment(off, plane).array() - sum_dy - xhat.segment(off, plane).array() * sum_dy_xhat);
            } else {
              dx.segment(off, plane).array() += gam * inv_std(ch) * self.grad.segment(off, plane).array();
            }
          }
        }
      });
}

}  // namespace detail

/// Per-channel normalization with batch statistics; updates the running
/// estimates (unbiased variance) with the configured momentum.
template <typename Scalar>
BasicTensor<Scalar> batch_norm_train(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& gamma,
                                     const BasicTensor<Scalar>& beta, RunningStats<Scalar>& stats,
                                     const NormOptions& opts = {}) {
  using Vector = typename BasicTensor<Scalar>::Vector;
  detail::check_norm_args(input, gamma, beta, stats);
  const Index batch = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  const Index n = batch * plane;
  detail::require(n >= 2, "batch_norm: train mode needs at least two values per channel");
  Vector xhat(input.numel());
  Vector inv_std(c);
  const auto& x = input.value();
  for (Index ch = 0; ch < c; ++ch) {
    Scalar mean = 0;
    for (Index b = 0; b < batch; ++b) mean += x.segment((b * c + ch) * plane, plane).sum();
    mean /= static_cast<Scalar>(n);
    Scalar var = 0;
    for (Index b = 0; b < batch; ++b) {
      var += (x.segment((b * c + ch) * plane, plane).array() - mean).square().sum();
    }
    var /= static_cast<Scalar>(n);
    inv_std(ch) = Scalar(1) / std::sqrt(var + static_cast<Scalar>(opts.epsilon));
    for (Index b = 0; b < batch; ++b) {
      const Index off = (b * c + ch) * plane;
      xhat.segment(off, plane) = ((x.segment(off, plane).array() - mean) * inv_std(ch)).matrix();
    }
    const auto m = static_cast<Scalar>(opts.momentum);
    stats.mean(ch) = (Scalar(1) - m) * stats.mean(ch) + m * mean;
    stats.var(ch) = (Scalar(1) - m) * stats.var(ch) + m * var * static_cast<Scalar>(n) / static_cast<Scalar>(n - 1);
  }
  return detail::norm_affine(input, gamma, beta, std::move(xhat), std::move(inv_std), true);
}

/// Per-channel normalization with the running estimates; does not mutate them.
template <typename Scalar>
BasicTensor<Scalar> batch_norm_eval(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& gamma,
                                    const BasicTensor<Scalar>& beta, const RunningStats<Scalar>& stats,
                                    const NormOptions& opts = {}) {
  using Vector = typename BasicTensor<Scalar>::Vector;
  detail::check_norm_args(input, gamma, beta, stats);
  const Index batch = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  Vector inv_std = (stats.var.array() + static_cast<Scalar>(opts.epsilon)).rsqrt().matrix();
  Vector xhat(input.numel());
  for (Index b = 0; b < batch; ++b) {
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * plane;
      xhat.segment(off, plane) = ((input.value().segment(off, plane).array() - stats.mean(ch)) * inv_std(ch)).matrix();
    }
  }
  return detail::norm_affine(input, gamma, beta, std::move(xhat), std::move(inv_std), false);
}

template <typename Scalar>
BasicTensor<Scalar> batch_norm(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& gamma,
                               const BasicTensor<Scalar>& beta, RunningStats<Scalar>& stats, NormMode mode,
                               const NormOptions& opts = {}) {
  return mode == NormMode::Train ? batch_norm_train(input, gamma, beta, stats, opts)
                                 : batch_norm_eval(input, gamma, beta, stats, opts);
}

/// Spatial mean per channel: [B,C,H,W] -> [B,C].
template <typename Scalar>
BasicTensor<Scalar> global_avg_pool(const BasicTensor<Scalar>& input) {
  detail::require_rank(input, 4, "global_avg_pool");
  const Index batch = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  const auto x = detail::ConstRowMap<Scalar>(input.data(), batch * c, plane);
  typename BasicTensor<Scalar>::Vector out = x.rowwise().sum() / static_cast<Scalar>(plane);
  return BasicTensor<Scalar>::result({batch, c}, std::move(out), "global_avg_pool", {input.node_ptr()},
                                     [=](TensorNode<Scalar>& self) {
                                       auto dx = detail::RowMap<Scalar>(self.inputs[0]->grad_buffer().data(),
                                                                        batch * c, plane);
                                       dx.colwise() += self.grad / static_cast<Scalar>(plane);
                                     });
}

/// out[b,c,j,k] = input[b,c,j,k] * scale[b,c].
template <typename Scalar>
BasicTensor<Scalar> channel_scale(const BasicTensor<Scalar>& input, const BasicTensor<Scalar>& scale) {
  detail::require_rank(input, 4, "channel_scale");
  detail::require_rank(scale, 2, "channel_scale scale");
  const Index batch = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  detail::require(scale.dim(0) == batch && scale.dim(1) == c,
                  "channel_scale: scale " + shape_string(scale.shape()) + " does not match input " +
                      shape_string(input.shape()));
  typename BasicTensor<Scalar>::Vector out(input.numel());
  detail::RowMap<Scalar>(out.data(), batch * c, plane) =
      detail::ConstRowMap<Scalar>(input.data(), batch * c, plane).array().colwise() * scale.value().array();
  return BasicTensor<Scalar>::result(
      input.shape(), std::move(out), "channel_scale", {input.node_ptr(), scale.node_ptr()},
      [=](TensorNode<Scalar>& self) {
        auto& x = *self.inputs[0];
        auto& s = *self.inputs[1];
        const auto dy = detail::ConstRowMap<Scalar>(self.grad.data(), batch * c, plane);
        if (x.requires_grad) {
          detail::RowMap<Scalar>(x.grad_buffer().data(), batch * c, plane).array() +=
              dy.array().colwise() * s.value.array();
        }
        if (s.requires_grad) {
          s.grad_buffer() += (dy.cwiseProduct(detail::ConstRowMap<Scalar>(x.value.data(), batch * c, plane)))
                                 .rowwise()
                                 .sum();
        }
      });
}

/// Concatenates along dimension 1 for rank-2 ([B,D]) or rank-4 ([B,C,H,W])
/// tensors. An undefined operand acts as an empty block.
template <typename Scalar>
BasicTensor<Scalar> concat_channels(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (!b.defined()) return a;
  if (!a.defined()) return b;
  detail::require(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 4), "concat_channels: rank mismatch");
  detail::require(a.dim(0) == b.dim(0), "concat_channels: batch mismatch");
  Index inner = 1;
  for (std::size_t i = 2; i < a.rank(); ++i) {
    detail::require(a.dim(i) == b.dim(i), "concat_channels: spatial mismatch " + shape_string(a.shape()) + " vs " +
                                              shape_string(b.shape()));
    inner *= a.dim(i);
  }
  const Index batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const Index la = ca * inner, lb = cb * inner;
  typename BasicTensor<Scalar>::Vector out(batch * (la + lb));
  for (Index n = 0; n < batch; ++n) {
    out.segment(n * (la + lb), la) = a.value().segment(n * la, la);
    out.segment(n * (la + lb) + la, lb) = b.value().segment(n * lb, lb);
  }
  Shape shape = a.shape();
  shape[1] = ca + cb;
  return BasicTensor<Scalar>::result(std::move(shape), std::move(out), "concat_channels",
                                     {a.node_ptr(), b.node_ptr()}, [=](TensorNode<Scalar>& self) {
                                       auto& x = *self.inputs[0];
                                       auto& y = *self.inputs[1];
                                       for (Index n = 0; n < batch; ++n) {
                                         if (x.requires_grad)
                                           x.grad_buffer().segment(n * la, la) += self.grad.segment(n * (la + lb), la);
                                         if (y.requires_grad)
                                           y.grad_buffer().segment(n * lb, lb) +=
                                               self.grad.segment(n * (la + lb) + la, lb);
                                       }
                                     });
}

/// Channels [begin, begin+count) of a rank-2 or rank-4 tensor.
template <typename Scalar>
BasicTensor<Scalar> slice_channels(const BasicTensor<Scalar>& input, Index begin, Index count) {
  detail::require(input.rank() == 2 || input.rank() == 4, "slice_channels: rank must be 2 or 4");
  detail::require(begin >= 0 && count >= 1 && begin + count <= input.dim(1), "slice_channels: range out of bounds");
  Index inner = 1;
  for (std::size_t i = 2; i < input.rank(); ++i) inner *= input.dim(i);
  const Index batch = input.dim(0), c = input.dim(1);
  typename BasicTensor<Scalar>::Vector out(batch * count * inner);
  for (Index n = 0; n < batch; ++n) {
    out.segment(n * count * inner, count * inner) = input.value().segment((n * c + begin) * inner, count * inner);
  }
  Shape shape = input.shape();
  shape[1] = count;
  return BasicTensor<Scalar>::result(std::move(shape), std::move(out), "slice_channels", {input.node_ptr()},
                                     [=](TensorNode<Scalar>& self) {
                                       auto& dx = self.inputs[0]->grad_buffer();
                                       for (Index n = 0; n < batch; ++n) {
                                         dx.segment((n * c + begin) * inner, count * inner) +=
                                             self.grad.segment(n * count * inner, count * inner);
                                       }
                                     });
}

/// Row-wise softmax over [B,K] with max subtraction.
template <typename Scalar>
BasicTensor<Scalar> softmax(const BasicTensor<Scalar>& input) {
  detail::require_rank(input, 2, "softmax");
  const Index batch = input.dim(0), k = input.dim(1);
  detail::require(k >= 2, "softmax: need at least two classes");
  typename BasicTensor<Scalar>::Vector out(input.numel());
  const auto x = detail::ConstRowMap<Scalar>(input.data(), batch, k);
  auto p = detail::RowMap<Scalar>(out.data(), batch, k);
  for (Index b = 0; b < batch; ++b) {
    p.row(b) = (x.row(b).array() - x.row(b).maxCoeff()).exp().matrix();
    p.row(b) /= p.row(b).sum();
  }
  return BasicTensor<Scalar>::result(input.shape(), std::move(out), "softmax", {input.node_ptr()},
                                     [=](TensorNode<Scalar>& self) {
                                       const auto pr = detail::ConstRowMap<Scalar>(self.value.data(), batch, k);
                                       const auto dp = detail::ConstRowMap<Scalar>(self.grad.data(), batch, k);
                                       auto dx = detail::RowMap<Scalar>(self.inputs[0]->grad_buffer().data(), batch, k);
                                       for (Index b = 0; b < batch; ++b) {
                                         const Scalar dot = dp.row(b).dot(pr.row(b));
                                         dx.row(b).array() += pr.row(b).array() * (dp.row(b).array() - dot);
                                       }
                                     });
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean over the batch of -log(max(p[b, label_b], 1e-12)).
template <typename Scalar>
BasicTensor<Scalar> cross_entropy_loss(const BasicTensor<Scalar>& probs, std::span<const int> labels) {
  detail::require_rank(probs, 2, "cross_entropy_loss");
  const Index batch = probs.dim(0), k = probs.dim(1);
  detail::require(static_cast<Index>(labels.size()) == batch, "cross_entropy_loss: label count mismatch");
  detail::require_finite(probs, "cross_entropy_loss");
  const auto p = detail::ConstRowMap<Scalar>(probs.data(), batch, k);
  const auto floor = static_cast<Scalar>(kProbabilityFloor);
  Scalar total = 0;
  for (Index b = 0; b < batch; ++b) {
    const int label = labels[static_cast<std::size_t>(b)];
    if (label < 0 || label >= k) {
      throw std::out_of_range("cross_entropy_loss: label " + std::to_string(label) + " outside [0," +
                              std::to_string(k) + ")");
    }
    detail::require(std::abs(p.row(b).sum() - Scalar(1)) < Scalar(1e-6),
                    "cross_entropy_loss: probability row does not sum to 1");
    total -= std::log(std::max(p(b, label), floor));
  }
  typename BasicTensor<Scalar>::Vector out(1);
  out(0) = total / static_cast<Scalar>(batch);
  std::vector<int> labs(labels.begin(), labels.end());
  return BasicTensor<Scalar>::result({1}, std::move(out), "cross_entropy_loss", {probs.node_ptr()},
                                     [=, labs = std::move(labs)](TensorNode<Scalar>& self) {
                                       auto& pin = *self.inputs[0];
                                       auto& dp = pin.grad_buffer();
                                       for (Index b = 0; b < batch; ++b) {
                                         const Index j = b * k + labs[static_cast<std::size_t>(b)];
                                         const Scalar pj = pin.value(j);
                                         if (pj >= floor) dp(j) -= self.grad(0) / (static_cast<Scalar>(batch) * pj);
                                       }
                                     });
}

}  // namespace clinfuse

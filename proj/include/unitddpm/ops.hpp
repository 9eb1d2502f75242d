#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "unitddpm/errors.hpp"
#include "unitddpm/tensor.hpp"

namespace unitddpm {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

inline void add_into(Buffer& dst, const Buffer& src, double scale = 1.0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_nchw(const Tensor& x, const char* op) {
  require(x.rank() == 4, std::string(op) + ": expected [B,C,H,W], got " + shape_str(x.shape()));
}

// Patch geometry shared by conv2d and its transpose. `image` is the
// larger (H, W) grid sampled by the kernel; `out` is the sliding grid.
struct PatchGeometry {
  std::size_t batch, channels, height, width, kernel, stride, padding, out_h, out_w;

  std::size_t rows() const { return channels * kernel * kernel; }
  std::size_t cols() const { return batch * out_h * out_w; }
};

// col[(c,ki,kj), (b,oi,oj)] = image[b, c, oi*s - p + ki, oj*s - p + kj] (zero outside).
inline void im2col(const double* image, const PatchGeometry& g, double* col) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* src = image + (b * g.channels + c) * g.height * g.width;
          double* dst = row + b * plane;
          for (std::size_t oi = 0; oi < g.out_h; ++oi) {
            const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.height)) {
              for (std::size_t oj = 0; oj < g.out_w; ++oj) dst[oi * g.out_w + oj] = 0.0;
              continue;
            }
            for (std::size_t oj = 0; oj < g.out_w; ++oj) {
              const auto jj =
                  static_cast<std::ptrdiff_t>(oj * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
              dst[oi * g.out_w + oj] =
                  (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.width)) ? 0.0 : src[ii * g.width + jj];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-and-adds columns back onto the image.
inline void col2im(const double* col, const PatchGeometry& g, double* image) {
  const std::size_t plane = g.out_h * g.out_w;
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const double* row = col + ((c * g.kernel + ki) * g.kernel + kj) * ncols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* dst = image + (b * g.channels + c) * g.height * g.width;
          const double* src = row + b * plane;
          for (std::size_t oi = 0; oi < g.out_h; ++oi) {
            const auto ii = static_cast<std::ptrdiff_t>(oi * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
            if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(g.height)) continue;
            for (std::size_t oj = 0; oj < g.out_w; ++oj) {
              const auto jj =
                  static_cast<std::ptrdiff_t>(oj * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
              if (jj < 0 || jj >= static_cast<std::ptrdiff_t>(g.width)) continue;
              dst[ii * g.width + jj] += src[oi * g.out_w + oj];
            }
          }
        }
      }
    }
  }
}

// [B, C, P] <-> [C, B*P] channel-major layout used by the GEMMs.
inline void nchw_to_cm(const double* src, std::size_t batch, std::size_t channels, std::size_t plane, double* dst) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(src + (b * channels + c) * plane, plane, dst + c * batch * plane + b * plane);
}

inline void cm_to_nchw(const double* src, std::size_t batch, std::size_t channels, std::size_t plane, double* dst) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(src + c * batch * plane + b * plane, plane, dst + (b * channels + c) * plane);
}

template <class Fn>
Tensor unary_op(const Tensor& x, Fn&& fwd_and_deriv) {
  Buffer out(x.numel());
  Buffer deriv(x.numel());
  const auto v = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) fwd_and_deriv(v[i], out[i], deriv[i]);
  auto src = x.node();
  Shape shape = x.shape();
  return make_result(std::move(shape), std::move(out), {x},
                     [src, deriv = std::move(deriv)](Node& o) {
                       auto& g = src->ensure_grad();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * deriv[i];
                     });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto na = a.node(), nb = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [na, nb](detail::Node& o) {
    if (na->requires_grad) detail::add_into(na->ensure_grad(), o.grad);
    if (nb->requires_grad) detail::add_into(nb->ensure_grad(), o.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto na = a.node(), nb = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [na, nb](detail::Node& o) {
    if (na->requires_grad) detail::add_into(na->ensure_grad(), o.grad);
    if (nb->requires_grad) detail::add_into(nb->ensure_grad(), o.grad, -1.0);
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto na = a.node(), nb = b.node();
  return make_result(a.shape(), std::move(out), {a, b}, [na, nb](detail::Node& o) {
    if (na->requires_grad) {
      auto& g = na->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * nb->value[i];
    }
    if (nb->requires_grad) {
      auto& g = nb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * na->value[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double s) {
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
  auto src = x.node();
  return make_result(x.shape(), std::move(out), {x},
                     [src, s](detail::Node& o) { detail::add_into(src->ensure_grad(), o.grad, s); });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
  auto src = x.node();
  return make_result(x.shape(), std::move(out), {x},
                     [src](detail::Node& o) { detail::add_into(src->ensure_grad(), o.grad); });
}

// a*x + b*y with constant coefficients.
inline Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
  detail::require_same_shape(x, y, "axpby");
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x[i] + b * y[i];
  auto nx = x.node(), ny = y.node();
  return make_result(x.shape(), std::move(out), {x, y}, [nx, ny, a, b](detail::Node& o) {
    if (nx->requires_grad) detail::add_into(nx->ensure_grad(), o.grad, a);
    if (ny->requires_grad) detail::add_into(ny->ensure_grad(), o.grad, b);
  });
}

// x * s where s is a one-element tensor (broadcast).
inline Tensor mul_by_scalar(const Tensor& x, const Tensor& s) {
  require(s.numel() == 1, "mul_by_scalar: scale must have one element, got " + shape_str(s.shape()));
  const double sv = s[0];
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sv * x[i];
  auto nx = x.node(), ns = s.node();
  return make_result(x.shape(), std::move(out), {x, s}, [nx, ns](detail::Node& o) {
    if (nx->requires_grad) detail::add_into(nx->ensure_grad(), o.grad, ns->value[0]);
    if (ns->requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * nx->value[i];
      ns->ensure_grad()[0] += acc;
    }
  });
}

// x + s where s is a one-element tensor (broadcast).
inline Tensor add_broadcast_scalar(const Tensor& x, const Tensor& s) {
  require(s.numel() == 1, "add_broadcast_scalar: offset must have one element, got " + shape_str(s.shape()));
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s[0];
  auto nx = x.node(), ns = s.node();
  return make_result(x.shape(), std::move(out), {x, s}, [nx, ns](detail::Node& o) {
    if (nx->requires_grad) detail::add_into(nx->ensure_grad(), o.grad);
    if (ns->requires_grad) {
      double acc = 0.0;
      for (double g : o.grad) acc += g;
      ns->ensure_grad()[0] += acc;
    }
  });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(x, [](double v, double& y, double& d) {
    y = v > 0.0 ? v : 0.0;
    d = v > 0.0 ? 1.0 : 0.0;
  });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(x, [](double v, double& y, double& d) {
    y = std::tanh(v);
    d = 1.0 - y * y;
  });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary_op(x, [](double v, double& y, double& d) {
    y = std::abs(v);
    d = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
  });
}

inline Tensor square(const Tensor& x) {
  return detail::unary_op(x, [](double v, double& y, double& d) {
    y = v * v;
    d = 2.0 * v;
  });
}

// ------------------------------------------------------------------ reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  auto src = x.node();
  return make_result({1}, {acc}, {x}, [src](detail::Node& o) {
    for (double& g : src->ensure_grad()) g += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// Σ|x|
inline Tensor l1_norm(const Tensor& x) { return sum(abs(x)); }

// Σx²
inline Tensor sq_l2_norm(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v * v;
  auto src = x.node();
  return make_result({1}, {acc}, {x}, [src](detail::Node& o) {
    auto& g = src->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * src->value[i] * o.grad[0];
  });
}

// Per-element mean of (a-b)².
inline Tensor mean_squared_error(const Tensor& a, const Tensor& b) {
  return scale(sq_l2_norm(sub(a, b)), 1.0 / static_cast<double>(a.numel()));
}

// Per-element mean of |a-b|.
inline Tensor mean_abs_error(const Tensor& a, const Tensor& b) {
  return scale(l1_norm(sub(a, b)), 1.0 / static_cast<double>(a.numel()));
}

// ------------------------------------------------------------- shape helpers

// Concatenates [B,Ca,H,W] and [B,Cb,H,W] along channels.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  detail::require_nchw(a, "concat_channels");
  detail::require_nchw(b, "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  Buffer out(batch * (ca + cb) * plane);
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.values().data() + n * ca * plane, ca * plane, out.data() + n * (ca + cb) * plane);
    std::copy_n(b.values().data() + n * cb * plane, cb * plane, out.data() + (n * (ca + cb) + ca) * plane);
  }
  auto na = a.node(), nb = b.node();
  return make_result({batch, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                     [na, nb, batch, ca, cb, plane](detail::Node& o) {
                       for (std::size_t n = 0; n < batch; ++n) {
                         const double* g = o.grad.data() + n * (ca + cb) * plane;
                         if (na->requires_grad) {
                           double* d = na->ensure_grad().data() + n * ca * plane;
                           for (std::size_t i = 0; i < ca * plane; ++i) d[i] += g[i];
                         }
                         if (nb->requires_grad) {
                           double* d = nb->ensure_grad().data() + n * cb * plane;
                           for (std::size_t i = 0; i < cb * plane; ++i) d[i] += g[ca * plane + i];
                         }
                       }
                     });
}

// Adds v[c] to every element of channel c of x [B,C,H,W].
inline Tensor add_channel_bias(const Tensor& x, const Tensor& v) {
  detail::require_nchw(x, "add_channel_bias");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(v.numel() == channels,
          "add_channel_bias: bias has " + std::to_string(v.numel()) + " entries for " + std::to_string(channels) +
              " channels");
  Buffer out(x.values().begin(), x.values().end());
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      double* p = out.data() + (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += v[c];
    }
  auto nx = x.node(), nv = v.node();
  return make_result(x.shape(), std::move(out), {x, v}, [nx, nv, batch, channels, plane](detail::Node& o) {
    if (nx->requires_grad) detail::add_into(nx->ensure_grad(), o.grad);
    if (nv->requires_grad) {
      auto& g = nv->ensure_grad();
      for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t c = 0; c < channels; ++c) {
          const double* p = o.grad.data() + (n * channels + c) * plane;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          g[c] += acc;
        }
    }
  });
}

// y = x Wᵀ + b for x [N,in], W [out,in], b [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(1),
          "linear: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(weight.shape()));
  require(bias.numel() == weight.dim(0), "linear: bias length does not match output features");
  const std::size_t n = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  Buffer out(n * out_f);
  detail::ConstMatrixMap xm(x.values().data(), n, in);
  detail::ConstMatrixMap wm(weight.values().data(), out_f, in);
  detail::MatrixMap om(out.data(), n, out_f);
  om.noalias() = xm * wm.transpose();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < out_f; ++c) om(r, c) += bias[c];
  auto nx = x.node(), nw = weight.node(), nb = bias.node();
  return make_result({n, out_f}, std::move(out), {x, weight, bias}, [nx, nw, nb, n, in, out_f](detail::Node& o) {
    detail::ConstMatrixMap gm(o.grad.data(), n, out_f);
    if (nx->requires_grad) {
      detail::MatrixMap gx(nx->ensure_grad().data(), n, in);
      gx.noalias() += gm * detail::ConstMatrixMap(nw->value.data(), out_f, in);
    }
    if (nw->requires_grad) {
      detail::MatrixMap gw(nw->ensure_grad().data(), out_f, in);
      gw.noalias() += gm.transpose() * detail::ConstMatrixMap(nx->value.data(), n, in);
    }
    if (nb->requires_grad) {
      auto& g = nb->ensure_grad();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < out_f; ++c) g[c] += gm(r, c);
    }
  });
}

// ---------------------------------------------------------------- convolution

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  require_config(stride >= 1, "conv: stride must be >= 1");
  require_config(in + 2 * padding >= kernel, "conv: kernel " + std::to_string(kernel) +
                                                  " larger than padded input " + std::to_string(in + 2 * padding));
  const std::size_t span = in + 2 * padding - kernel;
  require_config(span % stride == 0, "conv: (in + 2*padding - kernel) = " + std::to_string(span) +
                                         " is not divisible by stride " + std::to_string(stride));
  return span / stride + 1;
}

// input [B,Cin,H,W], weight [Cout,Cin,k,k], optional bias [Cout].
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
  detail::require_nchw(input, "conv2d");
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3),
          "conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(weight.shape()));
  require(weight.dim(1) == input.dim(1), "conv2d: input has " + std::to_string(input.dim(1)) +
                                             " channels, weight expects " + std::to_string(weight.dim(1)));
  require(!bias.defined() || bias.numel() == weight.dim(0), "conv2d: bias length does not match Cout");
  const std::size_t k = weight.dim(2), cout = weight.dim(0);
  const detail::PatchGeometry g{input.dim(0),
                                input.dim(1),
                                input.dim(2),
                                input.dim(3),
                                k,
                                stride,
                                padding,
                                conv_output_extent(input.dim(2), k, stride, padding),
                                conv_output_extent(input.dim(3), k, stride, padding)};
  const std::size_t plane = g.out_h * g.out_w;

  auto col = std::make_shared<Buffer>(g.rows() * g.cols());
  detail::im2col(input.values().data(), g, col->data());
  Buffer cm(cout * g.cols());
  detail::MatrixMap(cm.data(), cout, g.cols()).noalias() =
      detail::ConstMatrixMap(weight.values().data(), cout, g.rows()) *
      detail::ConstMatrixMap(col->data(), g.rows(), g.cols());
  Buffer out(cm.size());
  detail::cm_to_nchw(cm.data(), g.batch, cout, plane, out.data());
  if (bias.defined())
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t c = 0; c < cout; ++c) {
        double* p = out.data() + (n * cout + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bias[c];
      }

  auto nx = input.node(), nw = weight.node();
  auto nb = bias.defined() ? bias.node() : nullptr;
  auto fn = [nx, nw, nb, col, g, cout, plane](detail::Node& o) {
    Buffer gcm(cout * g.cols());
    detail::nchw_to_cm(o.grad.data(), g.batch, cout, plane, gcm.data());
    detail::ConstMatrixMap gm(gcm.data(), cout, g.cols());
    if (nw->requires_grad) {
      detail::MatrixMap(nw->ensure_grad().data(), cout, g.rows()).noalias() +=
          gm * detail::ConstMatrixMap(col->data(), g.rows(), g.cols()).transpose();
    }
    if (nb && nb->requires_grad) {
      auto& gb = nb->ensure_grad();
      for (std::size_t c = 0; c < cout; ++c) gb[c] += gm.row(static_cast<Eigen::Index>(c)).sum();
    }
    if (nx->requires_grad) {
      Buffer gcol(g.rows() * g.cols());
      detail::MatrixMap(gcol.data(), g.rows(), g.cols()).noalias() =
          detail::ConstMatrixMap(nw->value.data(), cout, g.rows()).transpose() * gm;
      detail::col2im(gcol.data(), g, nx->ensure_grad().data());
    }
  };
  Shape shape{g.batch, cout, g.out_h, g.out_w};
  if (bias.defined()) return make_result(std::move(shape), std::move(out), {input, weight, bias}, std::move(fn));
  return make_result(std::move(shape), std::move(out), {input, weight}, std::move(fn));
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding) {
  return conv2d(input, weight, Tensor(), stride, padding);
}

// Adjoint of conv2d with respect to its input. input [B,Cin,H,W],
// weight [Cin,Cout,k,k]; output extent (H-1)*stride - 2*padding + k.
inline Tensor conv_transpose2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
                               std::size_t padding) {
  detail::require_nchw(input, "conv_transpose2d");
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3),
          "conv_transpose2d: weight must be [Cin,Cout,k,k], got " + shape_str(weight.shape()));
  require(weight.dim(0) == input.dim(1), "conv_transpose2d: input has " + std::to_string(input.dim(1)) +
                                             " channels, weight expects " + std::to_string(weight.dim(0)));
  require(!bias.defined() || bias.numel() == weight.dim(1), "conv_transpose2d: bias length does not match Cout");
  require_config(stride >= 1, "conv_transpose2d: stride must be >= 1");
  const std::size_t cin = weight.dim(0), cout = weight.dim(1), k = weight.dim(2);
  const std::size_t h = input.dim(2), w = input.dim(3);
  require_config((h - 1) * stride + k > 2 * padding && (w - 1) * stride + k > 2 * padding,
                 "conv_transpose2d: padding too large for input");
  const std::size_t oh = (h - 1) * stride + k - 2 * padding, ow = (w - 1) * stride + k - 2 * padding;
  const detail::PatchGeometry g{input.dim(0), cout, oh, ow, k, stride, padding, h, w};
  const std::size_t plane_in = h * w, plane_out = oh * ow;

  auto xcm = std::make_shared<Buffer>(cin * g.cols());
  detail::nchw_to_cm(input.values().data(), g.batch, cin, plane_in, xcm->data());
  Buffer col(g.rows() * g.cols());
  detail::MatrixMap(col.data(), g.rows(), g.cols()).noalias() =
      detail::ConstMatrixMap(weight.values().data(), cin, g.rows()).transpose() *
      detail::ConstMatrixMap(xcm->data(), cin, g.cols());
  Buffer out(g.batch * cout * plane_out, 0.0);
  detail::col2im(col.data(), g, out.data());
  if (bias.defined())
    for (std::size_t n = 0; n < g.batch; ++n)
      for (std::size_t c = 0; c < cout; ++c) {
        double* p = out.data() + (n * cout + c) * plane_out;
        for (std::size_t i = 0; i < plane_out; ++i) p[i] += bias[c];
      }

  auto nx = input.node(), nw = weight.node();
  auto nb = bias.defined() ? bias.node() : nullptr;
  auto fn = [nx, nw, nb, xcm, g, cin, cout, plane_in, plane_out](detail::Node& o) {
    Buffer gcol(g.rows() * g.cols());
    detail::im2col(o.grad.data(), g, gcol.data());
    detail::ConstMatrixMap gc(gcol.data(), g.rows(), g.cols());
    if (nw->requires_grad) {
      detail::MatrixMap(nw->ensure_grad().data(), cin, g.rows()).noalias() +=
          detail::ConstMatrixMap(xcm->data(), cin, g.cols()) * gc.transpose();
    }
    if (nb && nb->requires_grad) {
      auto& gb = nb->ensure_grad();
      for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t c = 0; c < cout; ++c) {
          const double* p = o.grad.data() + (n * cout + c) * plane_out;
          double acc = 0.0;
          for (std::size_t i = 0; i < plane_out; ++i) acc += p[i];
          gb[c] += acc;
        }
    }
    if (nx->requires_grad) {
      Buffer gxcm(cin * g.cols());
      detail::MatrixMap(gxcm.data(), cin, g.cols()).noalias() =
          detail::ConstMatrixMap(nw->value.data(), cin, g.rows()) * gc;
      Buffer gx(g.batch * cin * plane_in);
      detail::cm_to_nchw(gxcm.data(), g.batch, cin, plane_in, gx.data());
      detail::add_into(nx->ensure_grad(), gx);
    }
  };
  Shape shape{g.batch, cout, oh, ow};
  if (bias.defined()) return make_result(std::move(shape), std::move(out), {input, weight, bias}, std::move(fn));
  return make_result(std::move(shape), std::move(out), {input, weight}, std::move(fn));
}

// ----------------------------------------------------------------- batch norm

enum class NormMode {
  train,           // batch statistics, running averages updated
  batch_no_update, // batch statistics, running averages left alone
  eval,            // running averages
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

// x [B,C,H,W]; gamma, beta, running_mean, running_var [C]. Running
// variance tracks the unbiased batch variance.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                         Tensor& running_var, NormMode mode, BatchNormOptions opt = {}) {
  detail::require_nchw(x, "batch_norm");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  require(gamma.numel() == channels && beta.numel() == channels && running_mean.numel() == channels &&
              running_var.numel() == channels,
          "batch_norm: parameter length does not match " + std::to_string(channels) + " channels");
  const std::size_t count = batch * plane;
  const bool use_batch = mode != NormMode::eval;
  require(!use_batch || count > 1, "batch_norm: batch statistics need more than one value per channel");

  auto xhat = std::make_shared<Buffer>(x.numel());
  auto inv_std = std::make_shared<Buffer>(channels);
  Buffer out(x.numel());
  const auto xv = x.values();
  for (std::size_t c = 0; c < channels; ++c) {
    double mu, var;
    if (use_batch) {
      double acc = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = xv.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = xv.data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<double>(count);
      if (mode == NormMode::train) {
        auto rm = running_mean.mutable_values();
        auto rv = running_var.mutable_values();
        rm[c] = (1.0 - opt.momentum) * rm[c] + opt.momentum * mu;
        rv[c] = (1.0 - opt.momentum) * rv[c] + opt.momentum * sq / static_cast<double>(count - 1);
      }
    } else {
      mu = running_mean[c];
      var = running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + opt.eps);
    (*inv_std)[c] = is;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t base = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double h = (xv[base + i] - mu) * is;
        (*xhat)[base + i] = h;
        out[base + i] = gamma[c] * h + beta[c];
      }
    }
  }

  auto nx = x.node(), ng = gamma.node(), nb = beta.node();
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [nx, ng, nb, xhat, inv_std, use_batch, batch, channels, plane, count](detail::Node& o) {
                       for (std::size_t c = 0; c < channels; ++c) {
                         double sum_dy = 0.0, sum_dy_xhat = 0.0;
                         for (std::size_t n = 0; n < batch; ++n) {
                           const std::size_t base = (n * channels + c) * plane;
                           for (std::size_t i = 0; i < plane; ++i) {
                             sum_dy += o.grad[base + i];
                             sum_dy_xhat += o.grad[base + i] * (*xhat)[base + i];
                           }
                         }
                         if (ng->requires_grad) ng->ensure_grad()[c] += sum_dy_xhat;
                         if (nb->requires_grad) nb->ensure_grad()[c] += sum_dy;
                         if (!nx->requires_grad) continue;
                         auto& gx = nx->ensure_grad();
                         const double k = ng->value[c] * (*inv_std)[c];
                         const double mean_dy = sum_dy / static_cast<double>(count);
                         const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(count);
                         for (std::size_t n = 0; n < batch; ++n) {
                           const std::size_t base = (n * channels + c) * plane;
                           for (std::size_t i = 0; i < plane; ++i) {
                             const double dy = o.grad[base + i];
                             gx[base + i] += use_batch ? k * (dy - mean_dy - (*xhat)[base + i] * mean_dy_xhat)
                                                       : k * dy;
                           }
                         }
                       }
                     });
}

// --------------------------------------------------------------- sampling

inline Tensor gaussian_sample(Shape shape, Rng& rng) { return Tensor::randn(std::move(shape), rng); }

}  // namespace unitddpm

#include <Eigen/Core>
#include <algorithm>
#include <memory>

#include "stlab/error.hpp"
#include "stlab/ops.hpp"

namespace stlab::ops {

namespace {

using detail::Node;

struct ConvGeometry {
  std::size_t batch, cin, hin, win;
  std::size_t cout, k1, k2;
  std::size_t hout, wout;
  Padding pad;
  // Kernel taps that touch at least one real (non-padding) input cell.
  std::size_t m0, m1, n0, n1;

  std::size_t taps() const { return cin * (m1 - m0) * (n1 - n0); }
  std::size_t positions() const { return batch * hout * wout; }
};

std::size_t first_live_tap(std::size_t lead_pad, std::size_t out_extent) {
  return lead_pad > out_extent - 1 ? lead_pad - (out_extent - 1) : 0;
}

ConvGeometry conv_geometry(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                           Padding pad) {
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  if (is.size() != 3 && is.size() != 4) {
    throw ShapeError("conv2d: input must be [Cin,H,W] or [B,Cin,H,W], got " + shape_str(is));
  }
  if (ks.size() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin,k1,k2], got " + shape_str(ks));
  ConvGeometry g{};
  const std::size_t off = is.size() == 4 ? 1 : 0;
  g.batch = is.size() == 4 ? is[0] : 1;
  g.cin = is[off];
  g.hin = is[off + 1];
  g.win = is[off + 2];
  g.cout = ks[0];
  g.k1 = ks[2];
  g.k2 = ks[3];
  g.pad = pad;
  if (ks[1] != g.cin) {
    throw ShapeError("conv2d: input channel dimension is " + std::to_string(g.cin) +
                     " but kernel expects " + std::to_string(ks[1]));
  }
  const std::size_t hp = g.hin + pad.top + pad.bottom;
  const std::size_t wp = g.win + pad.left + pad.right;
  if (g.k1 > hp) {
    throw ShapeError("conv2d: kernel height " + std::to_string(g.k1) +
                     " exceeds padded input height " + std::to_string(hp));
  }
  if (g.k2 > wp) {
    throw ShapeError("conv2d: kernel width " + std::to_string(g.k2) +
                     " exceeds padded input width " + std::to_string(wp));
  }
  if (bias.defined() && bias.shape() != Shape{g.cout}) {
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(g.cout) + "], got " +
                     shape_str(bias.shape()));
  }
  g.hout = hp - g.k1 + 1;
  g.wout = wp - g.k2 + 1;
  g.m0 = first_live_tap(pad.top, g.hout);
  g.m1 = std::min(g.k1, g.hin + pad.top);
  g.n0 = first_live_tap(pad.left, g.wout);
  g.n1 = std::min(g.k2, g.win + pad.left);
  return g;
}

// Column p = (b*hout + i)*wout + j holds the receptive field of output (b,i,j).
Eigen::MatrixXd im2col(const ConvGeometry& g, const double* in) {
  const std::size_t km = g.m1 - g.m0, kn = g.n1 - g.n0;
  Eigen::MatrixXd cols(g.taps(), g.positions());
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t i = 0; i < g.hout; ++i)
      for (std::size_t j = 0; j < g.wout; ++j) {
        const std::size_t p = (b * g.hout + i) * g.wout + j;
        double* col = cols.col(p).data();
        std::size_t r = 0;
        for (std::size_t c = 0; c < g.cin; ++c) {
          const double* plane = in + (b * g.cin + c) * g.hin * g.win;
          for (std::size_t m = g.m0; m < g.m0 + km; ++m) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + m) - static_cast<std::ptrdiff_t>(g.pad.top);
            const bool row_ok = ii >= 0 && ii < static_cast<std::ptrdiff_t>(g.hin);
            for (std::size_t n = g.n0; n < g.n0 + kn; ++n, ++r) {
              const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + n) - static_cast<std::ptrdiff_t>(g.pad.left);
              col[r] = (row_ok && jj >= 0 && jj < static_cast<std::ptrdiff_t>(g.win))
                           ? plane[ii * static_cast<std::ptrdiff_t>(g.win) + jj]
                           : 0.0;
            }
          }
        }
      }
  return cols;
}

void col2im_add(const ConvGeometry& g, const Eigen::MatrixXd& dcols, double* din) {
  const std::size_t km = g.m1 - g.m0, kn = g.n1 - g.n0;
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t i = 0; i < g.hout; ++i)
      for (std::size_t j = 0; j < g.wout; ++j) {
        const std::size_t p = (b * g.hout + i) * g.wout + j;
        const double* col = dcols.col(p).data();
        std::size_t r = 0;
        for (std::size_t c = 0; c < g.cin; ++c) {
          double* plane = din + (b * g.cin + c) * g.hin * g.win;
          for (std::size_t m = g.m0; m < g.m0 + km; ++m) {
            const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(i + m) - static_cast<std::ptrdiff_t>(g.pad.top);
            const bool row_ok = ii >= 0 && ii < static_cast<std::ptrdiff_t>(g.hin);
            for (std::size_t n = g.n0; n < g.n0 + kn; ++n, ++r) {
              const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(j + n) - static_cast<std::ptrdiff_t>(g.pad.left);
              if (row_ok && jj >= 0 && jj < static_cast<std::ptrdiff_t>(g.win)) {
                plane[ii * static_cast<std::ptrdiff_t>(g.win) + jj] += col[r];
              }
            }
          }
        }
      }
}

Eigen::MatrixXd kernel_matrix(const ConvGeometry& g, const double* k) {
  const std::size_t km = g.m1 - g.m0, kn = g.n1 - g.n0;
  Eigen::MatrixXd mat(g.cout, g.taps());
  for (std::size_t o = 0; o < g.cout; ++o) {
    std::size_t r = 0;
    for (std::size_t c = 0; c < g.cin; ++c)
      for (std::size_t m = g.m0; m < g.m0 + km; ++m)
        for (std::size_t n = g.n0; n < g.n0 + kn; ++n, ++r)
          mat(o, r) = k[((o * g.cin + c) * g.k1 + m) * g.k2 + n];
  }
  return mat;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding padding) {
  const auto g = conv_geometry(input, kernel, bias, padding);
  const std::size_t plane = g.hout * g.wout;
  std::vector<double> out(g.batch * g.cout * plane, 0.0);

  auto cols = std::make_shared<Eigen::MatrixXd>();
  auto kmat = std::make_shared<Eigen::MatrixXd>();
  if (g.taps() > 0) {
    *cols = im2col(g, input.values().data());
    *kmat = kernel_matrix(g, kernel.values().data());
    Eigen::MatrixXd res = (*kmat) * (*cols);
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t o = 0; o < g.cout; ++o) {
        double* dst = out.data() + (b * g.cout + o) * plane;
        for (std::size_t q = 0; q < plane; ++q) dst[q] = res(o, b * plane + q);
      }
  }
  if (bias.defined()) {
    auto bv = bias.values();
    for (std::size_t b = 0; b < g.batch; ++b)
      for (std::size_t o = 0; o < g.cout; ++o) {
        double* dst = out.data() + (b * g.cout + o) * plane;
        for (std::size_t q = 0; q < plane; ++q) dst[q] += bv[o];
      }
  }

  Shape out_shape = input.rank() == 4 ? Shape{g.batch, g.cout, g.hout, g.wout}
                                      : Shape{g.cout, g.hout, g.wout};
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::record(
      "conv2d", std::move(out_shape), std::move(out), inputs,
      [g, cols, kmat](Node& o, std::span<Node* const> in) {
        const std::size_t plane = g.hout * g.wout;
        Eigen::MatrixXd grad(g.cout, g.positions());
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t c = 0; c < g.cout; ++c) {
            const double* src = o.grad.data() + (b * g.cout + c) * plane;
            for (std::size_t q = 0; q < plane; ++q) grad(c, b * plane + q) = src[q];
          }
        if (in.size() > 2 && in[2]->requires_grad) {
          auto& gb = in[2]->grad_buffer();
          for (std::size_t c = 0; c < g.cout; ++c) gb[c] += grad.row(c).sum();
        }
        if (g.taps() == 0) return;
        if (in[1]->requires_grad) {
          Eigen::MatrixXd dk = grad * cols->transpose();
          auto& gk = in[1]->grad_buffer();
          const std::size_t km = g.m1 - g.m0, kn = g.n1 - g.n0;
          for (std::size_t oc = 0; oc < g.cout; ++oc) {
            std::size_t r = 0;
            for (std::size_t c = 0; c < g.cin; ++c)
              for (std::size_t m = g.m0; m < g.m0 + km; ++m)
                for (std::size_t n = g.n0; n < g.n0 + kn; ++n, ++r)
                  gk[((oc * g.cin + c) * g.k1 + m) * g.k2 + n] += dk(oc, r);
          }
        }
        if (in[0]->requires_grad) {
          Eigen::MatrixXd dcols = kmat->transpose() * grad;
          col2im_add(g, dcols, in[0]->grad_buffer().data());
        }
      });
}

Tensor conv_transpose_row(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  if (is.size() != 3 && is.size() != 4) {
    throw ShapeError("conv_transpose_row: input must be [C,T,1] or [B,C,T,1], got " + shape_str(is));
  }
  if (is.back() != 1) {
    throw ShapeError("conv_transpose_row: input width must be 1, got " + std::to_string(is.back()));
  }
  const std::size_t off = is.size() == 4 ? 1 : 0;
  const std::size_t batch = is.size() == 4 ? is[0] : 1;
  const std::size_t ch = is[off], steps = is[off + 1];
  if (ks.size() != 3 || ks[0] != ch || ks[1] != 1) {
    throw ShapeError("conv_transpose_row: kernel must be [" + std::to_string(ch) + ",1,S], got " +
                     shape_str(ks));
  }
  const std::size_t width = ks[2];
  if (bias.defined() && bias.shape() != Shape{ch}) {
    throw ShapeError("conv_transpose_row: bias must have shape [" + std::to_string(ch) + "]");
  }
  auto iv = input.values();
  auto kv = kernel.values();
  std::vector<double> out(batch * ch * steps * width);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      const double shift = bias.defined() ? bias.values()[c] : 0.0;
      for (std::size_t t = 0; t < steps; ++t) {
        const double v = iv[(b * ch + c) * steps + t];
        double* dst = out.data() + ((b * ch + c) * steps + t) * width;
        for (std::size_t s = 0; s < width; ++s) dst[s] = v * kv[c * width + s] + shift;
      }
    }
  Shape out_shape = is.size() == 4 ? Shape{batch, ch, steps, width} : Shape{ch, steps, width};
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  return detail::record(
      "conv_transpose_row", std::move(out_shape), std::move(out), inputs,
      [batch, ch, steps, width](Node& o, std::span<Node* const> in) {
        const bool gi = in[0]->requires_grad, gk = in[1]->requires_grad;
        const bool gb = in.size() > 2 && in[2]->requires_grad;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < ch; ++c) {
            const double* kr = in[1]->value.data() + c * width;
            for (std::size_t t = 0; t < steps; ++t) {
              const std::size_t row = (b * ch + c) * steps + t;
              const double* g = o.grad.data() + row * width;
              const double v = in[0]->value[row];
              double acc = 0.0, gsum = 0.0;
              for (std::size_t s = 0; s < width; ++s) {
                acc += g[s] * kr[s];
                gsum += g[s];
              }
              if (gi) in[0]->grad_buffer()[row] += acc;
              if (gk) {
                double* dk = in[1]->grad_buffer().data() + c * width;
                for (std::size_t s = 0; s < width; ++s) dk[s] += g[s] * v;
              }
              if (gb) in[2]->grad_buffer()[c] += gsum;
            }
          }
      });
}

}  // namespace stlab::ops

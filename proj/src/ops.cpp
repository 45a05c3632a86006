#include <Eigen/Core>
#include <cmath>
#include <numeric>

#include "stlab/error.hpp"
#include "stlab/ops.hpp"

namespace stlab::ops {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void accumulate(Node* in, std::span<const double> g) {
  if (!in->requires_grad) return;
  auto& buf = in->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <class F, class DF>
Tensor unary(const char* name, const Tensor& x, F f, DF df) {
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return detail::record(name, x.shape(), std::move(out), {x},
                        [df](Node& o, std::span<Node* const> in) {
                          if (!in[0]->requires_grad) return;
                          auto& g = in[0]->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            g[i] += o.grad[i] * df(in[0]->value[i], o.value[i]);
                          }
                        });
}

// Collapses `shape` into (prod before axis, extent, prod after axis).
struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::record("add", a.shape(), std::move(out), {a, b},
                        [](Node& o, std::span<Node* const> in) {
                          accumulate(in[0], o.grad);
                          accumulate(in[1], o.grad);
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::record("sub", a.shape(), std::move(out), {a, b},
                        [](Node& o, std::span<Node* const> in) {
                          accumulate(in[0], o.grad);
                          if (in[1]->requires_grad) {
                            auto& g = in[1]->grad_buffer();
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                          }
                        });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::record("hadamard", a.shape(), std::move(out), {a, b},
                        [](Node& o, std::span<Node* const> in) {
                          for (int k = 0; k < 2; ++k) {
                            if (!in[k]->requires_grad) continue;
                            auto& g = in[k]->grad_buffer();
                            const auto& other = in[1 - k]->value;
                            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * other[i];
                          }
                        });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary("add_scalar", x, [offset](double v) { return v + offset; },
               [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x,
               [](double v) {
                 if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
                 double e = std::exp(v);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& x) {
  auto xv = x.values();
  double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  return detail::record("sum", Shape{1}, {s}, {x}, [](Node& o, std::span<Node* const> in) {
    if (!in[0]->requires_grad) return;
    for (auto& g : in[0]->grad_buffer()) g += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  auto xv = x.values();
  double n = static_cast<double>(xv.size());
  double s = std::accumulate(xv.begin(), xv.end(), 0.0) / n;
  return detail::record("mean", Shape{1}, {s}, {x}, [n](Node& o, std::span<Node* const> in) {
    if (!in[0]->requires_grad) return;
    for (auto& g : in[0]->grad_buffer()) g += o.grad[0] / n;
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xv = x.values();
  return detail::record("reshape", std::move(shape), std::vector<double>(xv.begin(), xv.end()),
                        {x}, [](Node& o, std::span<Node* const> in) { accumulate(in[0], o.grad); });
}

Tensor transpose(const Tensor& x, std::size_t axis_a, std::size_t axis_b) {
  const auto& shape = x.shape();
  if (axis_a >= shape.size() || axis_b >= shape.size()) {
    throw ShapeError("transpose: axis out of range for " + shape_str(shape));
  }
  if (axis_a == axis_b) return reshape(x, shape);
  if (axis_a > axis_b) std::swap(axis_a, axis_b);
  std::size_t pre = 1, mid = 1, post = 1;
  for (std::size_t i = 0; i < axis_a; ++i) pre *= shape[i];
  for (std::size_t i = axis_a + 1; i < axis_b; ++i) mid *= shape[i];
  for (std::size_t i = axis_b + 1; i < shape.size(); ++i) post *= shape[i];
  const std::size_t na = shape[axis_a], nb = shape[axis_b];
  Shape out_shape = shape;
  std::swap(out_shape[axis_a], out_shape[axis_b]);

  // in index [p,a,m,b,q] -> out index [p,b,m,a,q]
  auto map_index = [=](std::size_t p, std::size_t a, std::size_t m, std::size_t b,
                       std::size_t q, bool to_out) {
    if (to_out) return (((p * nb + b) * mid + m) * na + a) * post + q;
    return (((p * na + a) * mid + m) * nb + b) * post + q;
  };
  auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t p = 0; p < pre; ++p)
    for (std::size_t a = 0; a < na; ++a)
      for (std::size_t m = 0; m < mid; ++m)
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t q = 0; q < post; ++q)
            out[map_index(p, a, m, b, q, true)] = xv[map_index(p, a, m, b, q, false)];

  return detail::record(
      "transpose", std::move(out_shape), std::move(out), {x},
      [=](Node& o, std::span<Node* const> in) {
        if (!in[0]->requires_grad) return;
        auto& g = in[0]->grad_buffer();
        for (std::size_t p = 0; p < pre; ++p)
          for (std::size_t a = 0; a < na; ++a)
            for (std::size_t m = 0; m < mid; ++m)
              for (std::size_t b = 0; b < nb; ++b)
                for (std::size_t q = 0; q < post; ++q)
                  g[map_index(p, a, m, b, q, false)] += o.grad[map_index(p, a, m, b, q, true)];
      });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat: extent mismatch on axis " + std::to_string(i) + ": " +
                         shape_str(s) + " vs " + shape_str(first));
      }
    }
    extents.push_back(s[axis]);
    total += s[axis];
  }
  auto split = split_at(first, axis);
  Shape out_shape = first;
  out_shape[axis] = total;
  std::vector<double> out(split.outer * total * split.inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].values();
    const std::size_t block = extents[k] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(v.begin() + o * block, block,
                  out.begin() + (o * total + offset) * split.inner);
    }
    offset += extents[k];
  }
  return detail::record("concat", std::move(out_shape), std::move(out), parts,
                        [split, total, extents](Node& o, std::span<Node* const> in) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < in.size(); ++k) {
                            const std::size_t block = extents[k] * split.inner;
                            if (in[k]->requires_grad) {
                              auto& g = in[k]->grad_buffer();
                              for (std::size_t q = 0; q < split.outer; ++q) {
                                const double* src = o.grad.data() + (q * total + off) * split.inner;
                                double* dst = g.data() + q * block;
                                for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                              }
                            }
                            off += extents[k];
                          }
                        });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw ShapeError("slice: axis out of range for " + shape_str(shape));
  if (begin >= end || end > shape[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for extent " + std::to_string(shape[axis]));
  }
  auto split = split_at(shape, axis);
  const std::size_t len = end - begin;
  Shape out_shape = shape;
  out_shape[axis] = len;
  auto xv = x.values();
  std::vector<double> out(split.outer * len * split.inner);
  for (std::size_t o = 0; o < split.outer; ++o) {
    std::copy_n(xv.begin() + (o * split.extent + begin) * split.inner, len * split.inner,
                out.begin() + o * len * split.inner);
  }
  return detail::record("slice", std::move(out_shape), std::move(out), {x},
                        [split, begin, len](Node& o, std::span<Node* const> in) {
                          if (!in[0]->requires_grad) return;
                          auto& g = in[0]->grad_buffer();
                          for (std::size_t q = 0; q < split.outer; ++q) {
                            double* dst = g.data() + (q * split.extent + begin) * split.inner;
                            const double* src = o.grad.data() + q * len * split.inner;
                            for (std::size_t i = 0; i < len * split.inner; ++i) dst[i] += src[i];
                          }
                        });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
  };
  if (as.size() == 2 && bs.size() == 3) {
    // Shared left factor: out[b] = A * X[b].
    const std::size_t m = as[0], k = as[1], batch = bs[0], n = bs[2];
    if (bs[1] != k) fail();
    std::vector<double> out(batch * m * n);
    ConstRowMap A(a.values().data(), m, k);
    for (std::size_t q = 0; q < batch; ++q) {
      ConstRowMap X(b.values().data() + q * k * n, k, n);
      RowMap(out.data() + q * m * n, m, n).noalias() = A * X;
    }
    return detail::record(
        "matmul", Shape{batch, m, n}, std::move(out), {a, b},
        [m, k, n, batch](Node& o, std::span<Node* const> in) {
          ConstRowMap A(in[0]->value.data(), m, k);
          for (std::size_t q = 0; q < batch; ++q) {
            ConstRowMap G(o.grad.data() + q * m * n, m, n);
            if (in[0]->requires_grad) {
              ConstRowMap X(in[1]->value.data() + q * k * n, k, n);
              RowMap(in[0]->grad_buffer().data(), m, k).noalias() += G * X.transpose();
            }
            if (in[1]->requires_grad) {
              RowMap(in[1]->grad_buffer().data() + q * k * n, k, n).noalias() += A.transpose() * G;
            }
          }
        });
  }
  std::size_t rows = 0, k = 0, n = 0;
  Shape out_shape;
  if (as.size() == 2 && bs.size() == 2) {
    rows = as[0];
    k = as[1];
    if (bs[0] != k) fail();
    n = bs[1];
    out_shape = {rows, n};
  } else if (as.size() == 3 && bs.size() == 2) {
    rows = as[0] * as[1];
    k = as[2];
    if (bs[0] != k) fail();
    n = bs[1];
    out_shape = {as[0], as[1], n};
  } else {
    fail();
  }
  std::vector<double> out(rows * n);
  RowMap(out.data(), rows, n).noalias() =
      ConstRowMap(a.values().data(), rows, k) * ConstRowMap(b.values().data(), k, n);
  return detail::record("matmul", std::move(out_shape), std::move(out), {a, b},
                        [rows, k, n](Node& o, std::span<Node* const> in) {
                          ConstRowMap G(o.grad.data(), rows, n);
                          if (in[0]->requires_grad) {
                            RowMap(in[0]->grad_buffer().data(), rows, k).noalias() +=
                                G * ConstRowMap(in[1]->value.data(), k, n).transpose();
                          }
                          if (in[1]->requires_grad) {
                            RowMap(in[1]->grad_buffer().data(), k, n).noalias() +=
                                ConstRowMap(in[0]->value.data(), rows, k).transpose() * G;
                          }
                        });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  const auto& xs = x.shape();
  const auto& bs = bias.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    throw ShapeError("add_bias: bias " + shape_str(bs) + " does not match trailing dims of " +
                     shape_str(xs));
  }
  const std::size_t inner = bias.size();
  const std::size_t outer = x.size() / inner;
  auto xv = x.values();
  auto bv = bias.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xv[o * inner + i] + bv[i];
  return detail::record("add_bias", xs, std::move(out), {x, bias},
                        [outer, inner](Node& o, std::span<Node* const> in) {
                          accumulate(in[0], o.grad);
                          if (in[1]->requires_grad) {
                            auto& g = in[1]->grad_buffer();
                            for (std::size_t q = 0; q < outer; ++q)
                              for (std::size_t i = 0; i < inner; ++i) g[i] += o.grad[q * inner + i];
                          }
                        });
}

namespace {

struct ChannelLayout {
  std::size_t batch;
  std::size_t channels;
  std::size_t inner;
};

ChannelLayout channel_layout(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const auto& s = x.shape();
  if (s.size() < 2) throw ShapeError("batch_norm: need rank >= 2, got " + shape_str(s));
  ChannelLayout l{s[0], s[1], 1};
  for (std::size_t i = 2; i < s.size(); ++i) l.inner *= s[i];
  if (gamma.shape() != Shape{l.channels} || beta.shape() != Shape{l.channels}) {
    throw ShapeError("batch_norm: scale/shift must have shape [" + std::to_string(l.channels) + "]");
  }
  return l;
}

}  // namespace

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  BatchMoments* moments) {
  const auto l = channel_layout(x, gamma, beta);
  if (l.batch < 2) throw ShapeError("batch_norm: training mode needs a batch of at least 2");
  const double count = static_cast<double>(l.batch * l.inner);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> mu(l.channels, 0.0), var(l.channels, 0.0), inv_std(l.channels);
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double* p = xv.data() + (b * l.channels + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) mu[c] += p[i];
    }
  for (auto& m : mu) m /= count;
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const double* p = xv.data() + (b * l.channels + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) var[c] += (p[i] - mu[c]) * (p[i] - mu[c]);
    }
  for (std::size_t c = 0; c < l.channels; ++c) {
    var[c] /= count;
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  std::vector<double> xhat(xv.size()), out(xv.size());
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (b * l.channels + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) {
        xhat[base + i] = (xv[base + i] - mu[c]) * inv_std[c];
        out[base + i] = gv[c] * xhat[base + i] + bv[c];
      }
    }
  if (moments) *moments = BatchMoments{mu, var};
  return detail::record(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [l, count, xhat = std::move(xhat), inv_std](Node& o, std::span<Node* const> in) {
        std::vector<double> sum_g(l.channels, 0.0), sum_gx(l.channels, 0.0);
        for (std::size_t b = 0; b < l.batch; ++b)
          for (std::size_t c = 0; c < l.channels; ++c) {
            const std::size_t base = (b * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
              sum_g[c] += o.grad[base + i];
              sum_gx[c] += o.grad[base + i] * xhat[base + i];
            }
          }
        if (in[1]->requires_grad) {
          auto& g = in[1]->grad_buffer();
          for (std::size_t c = 0; c < l.channels; ++c) g[c] += sum_gx[c];
        }
        if (in[2]->requires_grad) {
          auto& g = in[2]->grad_buffer();
          for (std::size_t c = 0; c < l.channels; ++c) g[c] += sum_g[c];
        }
        if (in[0]->requires_grad) {
          auto& g = in[0]->grad_buffer();
          const auto& gamma_v = in[1]->value;
          for (std::size_t b = 0; b < l.batch; ++b)
            for (std::size_t c = 0; c < l.channels; ++c) {
              const std::size_t base = (b * l.channels + c) * l.inner;
              const double k = gamma_v[c] * inv_std[c];
              const double mg = sum_g[c] / count, mgx = sum_gx[c] / count;
              for (std::size_t i = 0; i < l.inner; ++i) {
                g[base + i] += k * (o.grad[base + i] - mg - xhat[base + i] * mgx);
              }
            }
        }
      });
}

Tensor batch_norm_fixed(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const std::vector<double>& mean, const std::vector<double>& var,
                        double eps) {
  const auto l = channel_layout(x, gamma, beta);
  if (mean.size() != l.channels || var.size() != l.channels) {
    throw ShapeError("batch_norm_fixed: moment vectors must have " + std::to_string(l.channels) +
                     " entries");
  }
  std::vector<double> inv_std(l.channels);
  for (std::size_t c = 0; c < l.channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < l.batch; ++b)
    for (std::size_t c = 0; c < l.channels; ++c) {
      const std::size_t base = (b * l.channels + c) * l.inner;
      for (std::size_t i = 0; i < l.inner; ++i) {
        out[base + i] = gv[c] * (xv[base + i] - mean[c]) * inv_std[c] + bv[c];
      }
    }
  return detail::record(
      "batch_norm_fixed", x.shape(), std::move(out), {x, gamma, beta},
      [l, mean, inv_std](Node& o, std::span<Node* const> in) {
        for (std::size_t b = 0; b < l.batch; ++b)
          for (std::size_t c = 0; c < l.channels; ++c) {
            const std::size_t base = (b * l.channels + c) * l.inner;
            for (std::size_t i = 0; i < l.inner; ++i) {
              const double g = o.grad[base + i];
              const double xhat = (in[0]->value[base + i] - mean[c]) * inv_std[c];
              if (in[0]->requires_grad) in[0]->grad_buffer()[base + i] += g * in[1]->value[c] * inv_std[c];
              if (in[1]->requires_grad) in[1]->grad_buffer()[c] += g * xhat;
              if (in[2]->requires_grad) in[2]->grad_buffer()[c] += g;
            }
          }
      });
}

}  // namespace stlab::ops

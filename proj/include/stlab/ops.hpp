#pragma once

// Differentiable tensor operations. Shapes must match exactly; the only
// implicit broadcast is tensor-scalar (scale, add_scalar) and the explicit
// trailing-dimension bias of add_bias.

#include <cstddef>
#include <vector>

#include "stlab/tensor.hpp"

namespace stlab::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor square(const Tensor& x);

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Swaps two axes.
Tensor transpose(const Tensor& x, std::size_t axis_a, std::size_t axis_b);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// Half-open range [begin, end) along `axis`.
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);

// [m,k]x[k,n], [B,m,k]x[k,n] (right factor shared by the batch) or
// [m,k]x[B,k,n] (left factor shared by the batch).
Tensor matmul(const Tensor& a, const Tensor& b);

// Adds `bias` to every leading-index slice of `x`; bias shape must equal the
// trailing dimensions of x (e.g. x [B,S,F] + bias [S,F] or bias [F]).
Tensor add_bias(const Tensor& x, const Tensor& bias);

struct Padding {
  std::size_t top = 0;
  std::size_t bottom = 0;
  std::size_t left = 0;
  std::size_t right = 0;
};

// Cross-correlation. input [Cin,H,W] or [B,Cin,H,W]; kernel [Cout,Cin,k1,k2];
// bias [Cout] or undefined. Output keeps the input's rank.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, Padding padding);

// Expands a width-1 map into width S with a per-channel learned row:
// out[c,t,s] = in[c,t,0] * kernel[c,0,s] + bias[c].
// input [C,T,1] or [B,C,T,1]; kernel [C,1,S]; bias [C] or undefined.
Tensor conv_transpose_row(const Tensor& input, const Tensor& kernel, const Tensor& bias);

struct BatchMoments {
  std::vector<double> mean;
  std::vector<double> var;  // biased (population) variance
};

// Per-channel normalisation over every axis but axis 1, using the batch's own
// moments, followed by gamma * xhat + beta. x has rank >= 2 with batch >= 2.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  BatchMoments* moments = nullptr);
// Same transform with fixed moments (inference).
Tensor batch_norm_fixed(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        const std::vector<double>& mean, const std::vector<double>& var,
                        double eps);

}  // namespace stlab::ops

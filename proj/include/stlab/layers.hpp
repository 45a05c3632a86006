#pragma once

// Building blocks shared by the six forecasters: the agnostic causal
// convolution block, the ConvLSTM cell (spatial 3x3 or agnostic gates),
// high-order graph convolution, a node-wise LSTM, batch normalisation and
// the spatially local regressor head.

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "stlab/ops.hpp"
#include "stlab/tensor.hpp"

namespace stlab::layers {

enum class Mode { Train, Eval };

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

// Seeded uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) parameter factory.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor uniform(Shape shape, std::size_t fan_in);
  Tensor constant(Shape shape, double value);

 private:
  std::mt19937_64 rng_;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, double momentum = 0.1, double eps = 1e-7);

  // Train mode normalises with batch moments and updates running moments;
  // eval mode uses the running moments.
  Tensor forward(const Tensor& x, Mode mode);

  void collect(std::vector<NamedParam>& out, const std::string& prefix) const;
  void collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix);

  Tensor gamma, beta;
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-7;
};

// Causal convolution over all S columns at once (kernel 1 x t_past x S with
// t_past-1 rows of top padding) producing H maps of T x 1, each expanded back
// to T x S by a learned per-channel row.
class AgnosticConvBlock {
 public:
  AgnosticConvBlock() = default;
  AgnosticConvBlock(std::size_t in_channels, std::size_t hidden, std::size_t t_past,
                    std::size_t width, Initializer& init);

  // [B,C,T,S] -> [B,H,T,1]
  Tensor stage1(const Tensor& x) const;
  // [B,C,T,S] -> [B,H,T,S]
  Tensor forward(const Tensor& x) const;

  std::size_t t_past() const { return t_past_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t width() const { return width_; }
  static std::size_t parameter_count(std::size_t in_channels, std::size_t hidden,
                                     std::size_t t_past, std::size_t width);

  void collect(std::vector<NamedParam>& out, const std::string& prefix) const;

  Tensor kernel, bias, row_kernel, row_bias;

 private:
  std::size_t in_channels_ = 0, hidden_ = 0, t_past_ = 0, width_ = 0;
};

enum class GateConv { Spatial3x3, Agnostic };

// ConvLSTM cell. Gate pre-activations for (i, f, c, o) are produced by one
// convolution over concat(x_t, h_{t-1}) along channels, which is the same
// parameter set as the eight separate input/state kernels.
class ConvLstmCell {
 public:
  struct State {
    Tensor h;
    Tensor c;
  };

  ConvLstmCell() = default;
  ConvLstmCell(GateConv gates, std::size_t in_channels, std::size_t hidden, std::size_t width,
               Initializer& init, bool ungated_cell_write = false);

  // Zero state shaped [B,H,rows,S].
  State initial_state(std::size_t batch, std::size_t rows = 1) const;
  // x_t [B,Cin,rows,S]
  State step(const Tensor& x_t, const State& prev) const;

  GateConv gates() const { return gates_; }
  std::size_t hidden() const { return hidden_; }
  void collect(std::vector<NamedParam>& out, const std::string& prefix) const;

  Tensor gate_kernel, gate_bias;  // [4H, Cin+H, kh, kw], [4H]
  Tensor row_kernel, row_bias;    // agnostic gates only: [4H,1,S], [4H]

 private:
  GateConv gates_ = GateConv::Spatial3x3;
  std::size_t in_channels_ = 0, hidden_ = 0, width_ = 0;
  bool ungated_write_ = false;
};

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// min{A^k + I, 1} for k = 1..hops. A must be square and binary.
std::vector<Matrix> reach_masks(const Matrix& adjacency, std::size_t hops);

// Sum over k of (W_k o reach_k) X Theta_k + B_k.
class GraphConvLayer {
 public:
  GraphConvLayer() = default;
  GraphConvLayer(const Matrix& adjacency, std::size_t hops, std::size_t in_features,
                 std::size_t out_features, Initializer& init);

  // [S,F] or [B,S,F] -> [.., S, F']
  Tensor forward(const Tensor& x) const;

  const std::vector<Matrix>& masks() const { return masks_; }
  std::size_t nodes() const { return nodes_; }
  void collect(std::vector<NamedParam>& out, const std::string& prefix) const;

  std::vector<Tensor> weights;      // [S,S]
  std::vector<Tensor> projections;  // [F,F']
  std::vector<Tensor> biases;       // [S,F']

 private:
  std::vector<Matrix> masks_;
  std::vector<Tensor> mask_tensors_;
  std::size_t nodes_ = 0, in_features_ = 0, out_features_ = 0;
};

// LSTM applied independently at every node with shared weights.
class NodeLstm {
 public:
  struct State {
    Tensor h;
    Tensor c;
  };

  NodeLstm() = default;
  NodeLstm(std::size_t in_features, std::size_t hidden, Initializer& init,
           bool ungated_cell_write = false);

  State initial_state(std::size_t batch, std::size_t nodes) const;
  // x [B,S,F]
  State step(const Tensor& x, const State& prev) const;
  void collect(std::vector<NamedParam>& out, const std::string& prefix) const;

  Tensor weight;  // [F+H, 4H]
  Tensor bias;    // [4H]

 private:
  std::size_t in_features_ = 0, hidden_ = 0;
  bool ungated_write_ = false;
};

// Pointwise (kernel 1) convolution over the flattened (H*T) x S latent image.
class RegressorHead {
 public:
  RegressorHead() = default;
  RegressorHead(std::size_t hidden, std::size_t steps, std::size_t horizon, Initializer& init);

  // [B,H,T,S] -> [B,T',S] or [H,T,S] -> [T',S]
  Tensor forward(const Tensor& latent) const;

  static std::size_t parameter_count(std::size_t hidden, std::size_t steps, std::size_t horizon) {
    return hidden * steps * horizon + horizon;
  }
  void collect(std::vector<NamedParam>& out, const std::string& prefix) const;

  Tensor weight;  // [T', H*T, 1, 1]
  Tensor bias;    // [T']

 private:
  std::size_t hidden_ = 0, steps_ = 0, horizon_ = 0;
};

}  // namespace stlab::layers

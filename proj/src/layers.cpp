#include "stlab/layers.hpp"

#include <cmath>

#include "stlab/error.hpp"

namespace stlab::layers {

namespace {

std::string idx_name(const std::string& prefix, const char* stem, std::size_t k) {
  return prefix + stem + std::to_string(k);
}

// Splits [B,4H,...] gate pre-activations into the four gate blocks.
struct Gates {
  Tensor i, f, g, o;
};

Gates split_gates(const Tensor& z, std::size_t axis, std::size_t hidden) {
  return Gates{ops::sigmoid(ops::slice(z, axis, 0, hidden)),
               ops::sigmoid(ops::slice(z, axis, hidden, 2 * hidden)),
               ops::tanh(ops::slice(z, axis, 2 * hidden, 3 * hidden)),
               ops::sigmoid(ops::slice(z, axis, 3 * hidden, 4 * hidden))};
}

Tensor next_cell(const Gates& g, const Tensor& c_prev, bool ungated_write) {
  auto carry = ops::hadamard(g.f, c_prev);
  auto write = ungated_write ? g.g : ops::hadamard(g.i, g.g);
  return ops::add(carry, write);
}

void require_positive(std::size_t v, const char* what) {
  if (v == 0) throw ShapeError(std::string(what) + " must be positive");
}

}  // namespace

Tensor Initializer::uniform(Shape shape, std::size_t fan_in) {
  double bound = std::sqrt(1.0 / static_cast<double>(fan_in == 0 ? 1 : fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng_);
  return Tensor(std::move(shape), std::move(v), true);
}

Tensor Initializer::constant(Shape shape, double value) {
  return Tensor::full(std::move(shape), value, true);
}

// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(std::size_t channels, double momentum_, double eps_)
    : gamma(Tensor::full({channels}, 1.0, true)),
      beta(Tensor::zeros({channels}, true)),
      running_mean(channels, 0.0),
      running_var(channels, 1.0),
      momentum(momentum_),
      eps(eps_) {}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) {
  if (x.rank() < 2 || x.dim(1) != running_mean.size()) {
    throw ShapeError("batch norm expects channel axis 1 of size " +
                     std::to_string(running_mean.size()) + ", got " + shape_str(x.shape()));
  }
  if (mode == Mode::Eval) {
    return ops::batch_norm_fixed(x, gamma, beta, running_mean, running_var, eps);
  }
  ops::BatchMoments moments;
  auto y = ops::batch_norm(x, gamma, beta, eps, &moments);
  double count = static_cast<double>(x.size() / x.dim(1));
  double unbias = count > 1 ? count / (count - 1.0) : 1.0;
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * moments.mean[c];
    running_var[c] = (1.0 - momentum) * running_var[c] + momentum * moments.var[c] * unbias;
  }
  return y;
}

void BatchNorm::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + "gamma", gamma});
  out.push_back({prefix + "beta", beta});
}

void BatchNorm::collect_buffers(std::vector<NamedBuffer>& out, const std::string& prefix) {
  out.push_back({prefix + "running_mean", &running_mean});
  out.push_back({prefix + "running_var", &running_var});
}

// ---------------------------------------------------------------------------

AgnosticConvBlock::AgnosticConvBlock(std::size_t in_channels, std::size_t hidden,
                                     std::size_t t_past, std::size_t width, Initializer& init)
    : in_channels_(in_channels), hidden_(hidden), t_past_(t_past), width_(width) {
  require_positive(in_channels, "in_channels");
  require_positive(hidden, "hidden width");
  require_positive(t_past, "t_past");
  require_positive(width, "width");
  std::size_t fan = in_channels * t_past * width;
  kernel = init.uniform({hidden, in_channels, t_past, width}, fan);
  bias = init.uniform({hidden}, fan);
  row_kernel = init.uniform({hidden, 1, width}, width);
  row_bias = init.uniform({hidden}, width);
}

std::size_t AgnosticConvBlock::parameter_count(std::size_t in_channels, std::size_t hidden,
                                               std::size_t t_past, std::size_t width) {
  return hidden * (in_channels * t_past * width + 1) + hidden * (width + 1);
}

Tensor AgnosticConvBlock::stage1(const Tensor& x) const {
  if (x.rank() < 3 || x.dim(x.rank() - 1) != width_) {
    throw ShapeError("agnostic block expects width " + std::to_string(width_) + ", got " +
                     shape_str(x.shape()));
  }
  return ops::conv2d(x, kernel, bias, ops::Padding{t_past_ - 1, 0, 0, 0});
}

Tensor AgnosticConvBlock::forward(const Tensor& x) const {
  return ops::conv_transpose_row(stage1(x), row_kernel, row_bias);
}

void AgnosticConvBlock::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + "kernel", kernel});
  out.push_back({prefix + "bias", bias});
  out.push_back({prefix + "row_kernel", row_kernel});
  out.push_back({prefix + "row_bias", row_bias});
}

// ---------------------------------------------------------------------------

ConvLstmCell::ConvLstmCell(GateConv gates, std::size_t in_channels, std::size_t hidden,
                           std::size_t width, Initializer& init, bool ungated_cell_write)
    : gates_(gates),
      in_channels_(in_channels),
      hidden_(hidden),
      width_(width),
      ungated_write_(ungated_cell_write) {
  require_positive(in_channels, "in_channels");
  require_positive(hidden, "hidden width");
  require_positive(width, "width");
  std::size_t cin = in_channels + hidden;
  if (gates == GateConv::Spatial3x3) {
    gate_kernel = init.uniform({4 * hidden, cin, 3, 3}, cin * 9);
    gate_bias = init.uniform({4 * hidden}, cin * 9);
  } else {
    gate_kernel = init.uniform({4 * hidden, cin, 1, width}, cin * width);
    gate_bias = init.uniform({4 * hidden}, cin * width);
    row_kernel = init.uniform({4 * hidden, 1, width}, width);
    row_bias = init.uniform({4 * hidden}, width);
  }
}

ConvLstmCell::State ConvLstmCell::initial_state(std::size_t batch, std::size_t rows) const {
  return State{Tensor::zeros({batch, hidden_, rows, width_}),
               Tensor::zeros({batch, hidden_, rows, width_})};
}

ConvLstmCell::State ConvLstmCell::step(const Tensor& x_t, const State& prev) const {
  if (x_t.rank() != 4 || x_t.dim(1) != in_channels_ || x_t.dim(3) != width_) {
    throw ShapeError("ConvLSTM step expects [B," + std::to_string(in_channels_) + ",rows," +
                     std::to_string(width_) + "], got " + shape_str(x_t.shape()));
  }
  Shape state_shape{x_t.dim(0), hidden_, x_t.dim(2), width_};
  if (prev.h.shape() != state_shape || prev.c.shape() != state_shape) {
    throw ShapeError("ConvLSTM state must be " + shape_str(state_shape));
  }
  auto joined = ops::concat({x_t, prev.h}, 1);
  Tensor z;
  if (gates_ == GateConv::Spatial3x3) {
    z = ops::conv2d(joined, gate_kernel, gate_bias, ops::Padding{1, 1, 1, 1});
  } else {
    z = ops::conv_transpose_row(ops::conv2d(joined, gate_kernel, gate_bias, ops::Padding{}),
                                row_kernel, row_bias);
  }
  auto g = split_gates(z, 1, hidden_);
  auto c = next_cell(g, prev.c, ungated_write_);
  auto h = ops::hadamard(g.o, ops::tanh(c));
  return State{h, c};
}

void ConvLstmCell::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + "gate_kernel", gate_kernel});
  out.push_back({prefix + "gate_bias", gate_bias});
  if (gates_ == GateConv::Agnostic) {
    out.push_back({prefix + "row_kernel", row_kernel});
    out.push_back({prefix + "row_bias", row_bias});
  }
}

// ---------------------------------------------------------------------------

std::vector<Matrix> reach_masks(const Matrix& adjacency, std::size_t hops) {
  if (adjacency.rows() != adjacency.cols() || adjacency.rows() == 0) {
    throw ShapeError("adjacency must be a non-empty square matrix");
  }
  for (Eigen::Index i = 0; i < adjacency.size(); ++i) {
    double v = adjacency.data()[i];
    if (v != 0.0 && v != 1.0) throw InputError("adjacency must be binary");
  }
  if (hops == 0) throw InputError("graph convolution needs at least one hop");
  std::vector<Matrix> masks;
  Matrix power = Matrix::Identity(adjacency.rows(), adjacency.cols());
  for (std::size_t k = 1; k <= hops; ++k) {
    power = power * adjacency;
    // Only the sparsity pattern matters; clamp to keep walk counts bounded.
    power = power.cwiseMin(1.0);
    Matrix reach = power + Matrix::Identity(adjacency.rows(), adjacency.cols());
    masks.push_back(reach.cwiseMin(1.0));
  }
  return masks;
}

GraphConvLayer::GraphConvLayer(const Matrix& adjacency, std::size_t hops,
                               std::size_t in_features, std::size_t out_features,
                               Initializer& init)
    : masks_(reach_masks(adjacency, hops)),
      nodes_(static_cast<std::size_t>(adjacency.rows())),
      in_features_(in_features),
      out_features_(out_features) {
  require_positive(in_features, "in_features");
  require_positive(out_features, "out_features");
  for (std::size_t k = 0; k < hops; ++k) {
    weights.push_back(init.uniform({nodes_, nodes_}, nodes_));
    projections.push_back(init.uniform({in_features, out_features}, in_features));
    biases.push_back(init.uniform({nodes_, out_features}, in_features));
    const auto& m = masks_[k];
    mask_tensors_.push_back(
        Tensor({nodes_, nodes_}, std::vector<double>(m.data(), m.data() + m.size())));
  }
}

Tensor GraphConvLayer::forward(const Tensor& x) const {
  std::size_t r = x.rank();
  if ((r != 2 && r != 3) || x.dim(r - 2) != nodes_ || x.dim(r - 1) != in_features_) {
    throw ShapeError("graph convolution expects [.., " + std::to_string(nodes_) + "," +
                     std::to_string(in_features_) + "], got " + shape_str(x.shape()));
  }
  Tensor total;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    auto w = ops::hadamard(weights[k], mask_tensors_[k]);
    auto mixed = ops::matmul(w, x);
    auto term = ops::add_bias(ops::matmul(mixed, projections[k]), biases[k]);
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

void GraphConvLayer::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
  for (std::size_t k = 0; k < weights.size(); ++k) {
    out.push_back({idx_name(prefix, "weight", k + 1), weights[k]});
    out.push_back({idx_name(prefix, "projection", k + 1), projections[k]});
    out.push_back({idx_name(prefix, "bias", k + 1), biases[k]});
  }
}

// ---------------------------------------------------------------------------

NodeLstm::NodeLstm(std::size_t in_features, std::size_t hidden, Initializer& init,
                   bool ungated_cell_write)
    : in_features_(in_features), hidden_(hidden), ungated_write_(ungated_cell_write) {
  require_positive(in_features, "in_features");
  require_positive(hidden, "hidden width");
  weight = init.uniform({in_features + hidden, 4 * hidden}, in_features + hidden);
  bias = init.uniform({4 * hidden}, in_features + hidden);
}

NodeLstm::State NodeLstm::initial_state(std::size_t batch, std::size_t nodes) const {
  return State{Tensor::zeros({batch, nodes, hidden_}), Tensor::zeros({batch, nodes, hidden_})};
}

NodeLstm::State NodeLstm::step(const Tensor& x, const State& prev) const {
  if (x.rank() != 3 || x.dim(2) != in_features_) {
    throw ShapeError("node LSTM expects [B,S," + std::to_string(in_features_) + "], got " +
                     shape_str(x.shape()));
  }
  auto joined = ops::concat({x, prev.h}, 2);
  auto z = ops::add_bias(ops::matmul(joined, weight), bias);
  auto g = split_gates(z, 2, hidden_);
  auto c = next_cell(g, prev.c, ungated_write_);
  auto h = ops::hadamard(g.o, ops::tanh(c));
  return State{h, c};
}

void NodeLstm::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + "weight", weight});
  out.push_back({prefix + "bias", bias});
}

// ---------------------------------------------------------------------------

RegressorHead::RegressorHead(std::size_t hidden, std::size_t steps, std::size_t horizon,
                             Initializer& init)
    : hidden_(hidden), steps_(steps), horizon_(horizon) {
  require_positive(hidden, "hidden width");
  require_positive(steps, "steps");
  require_positive(horizon, "horizon");
  weight = init.uniform({horizon, hidden * steps, 1, 1}, hidden * steps);
  bias = init.uniform({horizon}, hidden * steps);
}

Tensor RegressorHead::forward(const Tensor& latent) const {
  bool batched = latent.rank() == 4;
  if ((latent.rank() != 3 && !batched) || latent.dim(batched ? 1 : 0) != hidden_ ||
      latent.dim(batched ? 2 : 1) != steps_) {
    throw ShapeError("regressor head expects [B," + std::to_string(hidden_) + "," +
                     std::to_string(steps_) + ",S], got " + shape_str(latent.shape()));
  }
  std::size_t width = latent.dim(latent.rank() - 1);
  std::size_t batch = batched ? latent.dim(0) : 1;
  auto img = ops::reshape(latent, {batch, hidden_ * steps_, 1, width});
  auto y = ops::conv2d(img, weight, bias, ops::Padding{});
  if (batched) return ops::reshape(y, {batch, horizon_, width});
  return ops::reshape(y, {horizon_, width});
}

void RegressorHead::collect(std::vector<NamedParam>& out, const std::string& prefix) const {
  out.push_back({prefix + "weight", weight});
  out.push_back({prefix + "bias", bias});
}

}  // namespace stlab::layers

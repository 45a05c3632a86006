#pragma once

// The six forecasters behind one interface: [B,T,S] in, [B,T',S] out.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stlab/layers.hpp"

namespace stlab::models {

using layers::Matrix;
using layers::Mode;
using layers::NamedBuffer;
using layers::NamedParam;

enum class ModelKind { ACnn, Cnn, AConvLstm, ConvLstm, AGcnLstm, GcnLstm };

inline constexpr ModelKind kAllKinds[] = {ModelKind::ACnn,      ModelKind::Cnn,
                                          ModelKind::AConvLstm, ModelKind::ConvLstm,
                                          ModelKind::AGcnLstm,  ModelKind::GcnLstm};

std::string_view kind_name(ModelKind kind);
ModelKind parse_kind(std::string_view name);
bool is_agnostic(ModelKind kind);
// A-CNN <-> CNN, A-ConvLSTM <-> ConvLSTM, A-GCN-LSTM <-> GCN-LSTM.
ModelKind twin(ModelKind kind);

struct ModelConfig {
  ModelKind kind = ModelKind::ACnn;
  std::size_t T = 6;
  std::size_t T_out = 1;
  std::size_t S = 1;
  std::size_t H = 4;
  std::size_t t_past = 0;  // A-CNN only
  std::size_t hops = 0;    // GCN variants only
  Matrix adjacency;        // GCN-LSTM only
  std::uint64_t seed = 0;
  bool ungated_cell_write = false;

  // Fills kind-specific defaults (t_past = min(3,T), hops = 3) where unset.
  static ModelConfig make(ModelKind kind, std::size_t T, std::size_t T_out, std::size_t S,
                          std::size_t H, std::uint64_t seed = 0);
  void validate() const;
};

struct ParamCount {
  std::size_t conv = 0;
  std::size_t norm = 0;
  std::size_t head = 0;
  std::size_t stage() const { return conv + norm; }
  std::size_t total() const { return conv + norm + head; }
};

class ConvStage;

class Forecaster {
 public:
  explicit Forecaster(ModelConfig cfg);
  ~Forecaster();
  Forecaster(Forecaster&&) noexcept;
  Forecaster& operator=(Forecaster&&) noexcept;

  // [B,T,S] -> [B,T',S], or [T,S] -> [T',S].
  Tensor forward(const Tensor& x, Mode mode);
  // Convolutional stage output, [B,H,T,S].
  Tensor latent(const Tensor& x, Mode mode);

  const ModelConfig& config() const { return cfg_; }
  std::vector<NamedParam> parameters() const;
  std::vector<NamedBuffer> buffers();
  ParamCount count() const;

  // Flat copy of every parameter followed by every buffer, in declaration order.
  std::vector<double> state();
  void load_state(std::span<const double> flat);

 private:
  ModelConfig cfg_;
  std::unique_ptr<ConvStage> stage_;
  layers::RegressorHead head_;
};

Forecaster build_model(const ModelConfig& cfg);
ParamCount count_parameters(const Forecaster& f);
// Closed-form count for a configuration (no allocation).
ParamCount count_parameters(const ModelConfig& cfg);

// Largest H whose convolutional stage (conv + norm) count does not exceed target_params.
ModelConfig match_hidden_width(std::size_t target_params, ModelConfig cfg);

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
};

void save_checkpoint(const std::filesystem::path& path, Forecaster& f,
                     const CheckpointMeta& meta = {});
Forecaster load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

}  // namespace stlab::models

#pragma once

// MSE objective, RMSprop with momentum and weight decay, early stopping with
// learning-rate decay, and the A-CNN lag grid search.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stlab/error.hpp"
#include "stlab/models.hpp"

namespace stlab::training {

using models::Forecaster;
using models::Mode;

struct TrainConfig {
  std::size_t batch_size = 256;
  double momentum = 0.9;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  double rmsprop_alpha = 0.99;
  double epsilon = 1e-8;
  std::size_t max_epochs = 200;
  std::size_t early_stop_patience = 10;
  double lr_decay_factor = 0.5;
  std::size_t lr_decay_patience = 5;
  std::uint64_t seed = 0;
  bool coupled_l2 = false;
  bool record_timing = false;

  void validate() const;
};

// Windows stored flat: x is n*T*S, y is n*T'*S, both row-major.
struct SampleSet {
  std::size_t T = 0, T_out = 0, S = 0;
  std::vector<double> x, y;

  std::size_t size() const { return T * S == 0 ? 0 : x.size() / (T * S); }
  Tensor batch_x(std::span<const std::size_t> idx) const;
  Tensor batch_y(std::span<const std::size_t> idx) const;
  SampleSet subset(std::span<const std::size_t> idx) const;
};

Tensor mse(const Tensor& pred, const Tensor& target);

// Per-tensor optimiser slot.
struct RmsPropSlot {
  std::vector<double> square_avg;
  std::vector<double> momentum_buf;
};

// One update of a single parameter tensor. Slots start empty (zero state).
void rmsprop_step(std::span<double> param, std::span<const double> grad, RmsPropSlot& slot,
                  const TrainConfig& cfg, double lr, const std::string& name = "parameter");

class RmsProp {
 public:
  explicit RmsProp(std::vector<models::NamedParam> params) : params_(std::move(params)) {}
  // Applies the update from each parameter's gradient buffer, then clears it.
  void step(const TrainConfig& cfg, double lr);

 private:
  std::vector<models::NamedParam> params_;
  std::vector<RmsPropSlot> slots_;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mse = 0;
  double val_mse = 0;
  double lr = 0;
  double wall_ms = 0;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_mse = 0;
  bool early_stopped = false;

  void write_csv(const std::filesystem::path& path) const;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, History h) : NumericError(what), history(std::move(h)) {}
  History history;
};

// Mean squared error over a set in eval mode, evaluated in fixed-size chunks.
double evaluate_mse(Forecaster& f, const SampleSet& set, std::size_t chunk = 512);
// Eval-mode predictions, flat n*T'*S.
std::vector<double> predict(Forecaster& f, const SampleSet& set, std::size_t chunk = 512);

// Trains in place and leaves the best-validation weights loaded.
History train(Forecaster& f, const SampleSet& train_set, const SampleSet& val_set,
              const TrainConfig& cfg);

struct GridSearchResult {
  std::size_t best_t_past = 0;
  std::vector<std::pair<std::size_t, double>> val_rmse;  // candidate order
};

GridSearchResult grid_search_tpast(std::span<const std::size_t> candidates,
                                   const models::ModelConfig& base, const SampleSet& train_set,
                                   const SampleSet& val_set, const TrainConfig& cfg);

// {2, 3, 5, 7, T} restricted to lags <= T, deduplicated and sorted.
std::vector<std::size_t> default_tpast_grid(std::size_t T);

}  // namespace stlab::training

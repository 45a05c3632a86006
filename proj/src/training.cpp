#include "stlab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace stlab::training {

void TrainConfig::validate() const {
  auto rate = [](double v, const char* name, bool zero_ok) {
    bool ok = std::isfinite(v) && v <= 1.0 && (zero_ok ? v >= 0.0 : v > 0.0);
    if (!ok) throw InputError(std::string(name) + " must lie in " + (zero_ok ? "[0,1]" : "(0,1]"));
  };
  rate(lr, "lr", false);
  rate(momentum, "momentum", true);
  rate(weight_decay, "weight_decay", true);
  rate(rmsprop_alpha, "rmsprop_alpha", false);
  rate(lr_decay_factor, "lr_decay_factor", false);
  if (!(epsilon > 0.0)) throw InputError("epsilon must be positive");
  if (batch_size == 0) throw InputError("batch_size must be positive");
  if (max_epochs == 0) throw InputError("max_epochs must be positive");
  if (early_stop_patience == 0 || lr_decay_patience == 0) {
    throw InputError("patience values must be positive");
  }
}

namespace {

Tensor gather(const std::vector<double>& flat, std::size_t rows, std::size_t cols,
              std::span<const std::size_t> idx) {
  std::size_t per = rows * cols;
  std::vector<double> out(idx.size() * per);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(idx[b] * per), per,
                out.begin() + static_cast<std::ptrdiff_t>(b * per));
  }
  return Tensor({idx.size(), rows, cols}, std::move(out));
}

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                   std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  std::size_t n = order.size();
  std::size_t bs = std::min(batch_size, n);
  for (std::size_t start = 0; start < n; start += bs) {
    std::size_t end = std::min(n, start + bs);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  // A trailing singleton cannot be batch-normalised; fold it into its neighbour.
  if (batches.size() >= 2 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

}  // namespace

Tensor SampleSet::batch_x(std::span<const std::size_t> idx) const { return gather(x, T, S, idx); }
Tensor SampleSet::batch_y(std::span<const std::size_t> idx) const {
  return gather(y, T_out, S, idx);
}

SampleSet SampleSet::subset(std::span<const std::size_t> idx) const {
  SampleSet out{T, T_out, S, {}, {}};
  out.x.reserve(idx.size() * T * S);
  out.y.reserve(idx.size() * T_out * S);
  for (auto i : idx) {
    out.x.insert(out.x.end(), x.begin() + static_cast<std::ptrdiff_t>(i * T * S),
                 x.begin() + static_cast<std::ptrdiff_t>((i + 1) * T * S));
    out.y.insert(out.y.end(), y.begin() + static_cast<std::ptrdiff_t>(i * T_out * S),
                 y.begin() + static_cast<std::ptrdiff_t>((i + 1) * T_out * S));
  }
  return out;
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  return ops::mean(ops::square(ops::sub(pred, target)));
}

void rmsprop_step(std::span<double> param, std::span<const double> grad, RmsPropSlot& slot,
                  const TrainConfig& cfg, double lr, const std::string& name) {
  if (grad.size() != param.size()) throw ShapeError("rmsprop: gradient size mismatch for " + name);
  for (double g : grad) {
    if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + name);
  }
  if (slot.square_avg.empty()) {
    slot.square_avg.assign(param.size(), 0.0);
    slot.momentum_buf.assign(param.size(), 0.0);
  }
  const double a = cfg.rmsprop_alpha, mu = cfg.momentum, wd = cfg.weight_decay;
  for (std::size_t i = 0; i < param.size(); ++i) {
    double g = grad[i];
    if (cfg.coupled_l2) g += wd * param[i];
    double& v = slot.square_avg[i];
    double& m = slot.momentum_buf[i];
    v = a * v + (1.0 - a) * g * g;
    m = mu * m + g / (std::sqrt(v) + cfg.epsilon);
    double decay = cfg.coupled_l2 ? 0.0 : lr * wd * param[i];
    param[i] -= lr * m + decay;
  }
}

void RmsProp::step(const TrainConfig& cfg, double lr) {
  if (slots_.empty()) slots_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].tensor;
    std::vector<double> zeros;
    std::span<const double> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.size(), 0.0);
      g = zeros;
    }
    rmsprop_step(p.values_mut(), g, slots_[i], cfg, lr, params_[i].name);
    p.zero_grad();
  }
}

void History::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "epoch,train_mse,val_mse,lr,wall_ms\n";
  char buf[256];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.train_mse,
                  e.val_mse, e.lr, e.wall_ms);
    out << buf;
  }
}

std::vector<double> predict(Forecaster& f, const SampleSet& set, std::size_t chunk) {
  std::vector<double> out;
  out.reserve(set.y.size());
  std::size_t n = set.size();
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    std::size_t end = std::min(n, start + chunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto y = f.forward(set.batch_x(idx), Mode::Eval);
    out.insert(out.end(), y.values().begin(), y.values().end());
  }
  return out;
}

double evaluate_mse(Forecaster& f, const SampleSet& set, std::size_t chunk) {
  auto pred = predict(f, set, chunk);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - set.y[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

History train(Forecaster& f, const SampleSet& train_set, const SampleSet& val_set,
              const TrainConfig& cfg) {
  cfg.validate();
  const auto& mc = f.config();
  for (const auto* s : {&train_set, &val_set}) {
    if (s->size() == 0) throw InputError("training and validation sets must be non-empty");
    if (s->T != mc.T || s->T_out != mc.T_out || s->S != mc.S) {
      throw ShapeError("sample set extents do not match the model configuration");
    }
  }

  std::mt19937_64 rng(cfg.seed);
  RmsProp opt(f.parameters());
  History hist;
  hist.best_val_mse = std::numeric_limits<double>::infinity();
  std::vector<double> best_state = f.state();
  double lr = cfg.lr;
  std::size_t stale = 0, since_decay = 0;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    for (const auto& batch : make_batches(order, cfg.batch_size)) {
      Tape tape;
      TapeScope scope(tape);
      auto loss = mse(f.forward(train_set.batch_x(batch), Mode::Train), train_set.batch_y(batch));
      double value = loss.item();
      try {
        if (!std::isfinite(value)) throw NumericError("non-finite training loss");
        tape.backward(loss);
        opt.step(cfg, lr);
      } catch (const NumericError& e) {
        throw TrainingDiverged("training diverged in epoch " + std::to_string(epoch) + ": " +
                                   e.what(),
                               hist);
      }
      loss_sum += value * static_cast<double>(batch.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_mse = loss_sum / static_cast<double>(train_set.size());
    rec.val_mse = evaluate_mse(f, val_set);
    rec.lr = lr;
    if (cfg.record_timing) {
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                        .count();
    }
    hist.epochs.push_back(rec);
    if (!std::isfinite(rec.val_mse)) {
      throw TrainingDiverged("validation loss became non-finite in epoch " + std::to_string(epoch),
                             hist);
    }

    if (rec.val_mse < hist.best_val_mse) {
      hist.best_val_mse = rec.val_mse;
      hist.best_epoch = epoch;
      best_state = f.state();
      stale = 0;
      since_decay = 0;
    } else {
      ++stale;
      ++since_decay;
      if (since_decay >= cfg.lr_decay_patience) {
        lr *= cfg.lr_decay_factor;
        since_decay = 0;
      }
      if (stale >= cfg.early_stop_patience) {
        hist.early_stopped = true;
        break;
      }
    }
  }
  f.load_state(best_state);
  return hist;
}

std::vector<std::size_t> default_tpast_grid(std::size_t T) {
  std::vector<std::size_t> grid;
  for (std::size_t c : {std::size_t{2}, std::size_t{3}, std::size_t{5}, std::size_t{7}, T}) {
    if (c >= 1 && c <= T) grid.push_back(c);
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

GridSearchResult grid_search_tpast(std::span<const std::size_t> candidates,
                                   const models::ModelConfig& base, const SampleSet& train_set,
                                   const SampleSet& val_set, const TrainConfig& cfg) {
  if (candidates.empty()) throw InputError("t_past grid is empty");
  GridSearchResult res;
  double best = std::numeric_limits<double>::infinity();
  for (auto c : candidates) {
    if (c == 0 || c > base.T) {
      throw InputError("t_past candidate " + std::to_string(c) + " outside [1, T]");
    }
    auto mc = base;
    mc.t_past = c;
    Forecaster f(mc);
    train(f, train_set, val_set, cfg);
    double rmse = std::sqrt(evaluate_mse(f, val_set));
    res.val_rmse.emplace_back(c, rmse);
    if (rmse < best || (rmse == best && c < res.best_t_past)) {
      best = rmse;
      res.best_t_past = c;
    }
  }
  return res;
}

}  // namespace stlab::training

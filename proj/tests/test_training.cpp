#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>

#include "doctest.h"
#include "stlab/training.hpp"

using namespace stlab;
using namespace stlab::training;
using models::Matrix;
using models::ModelConfig;
using models::ModelKind;

namespace {

// Target row s at horizon 0 is rule(x, s) where x is the [T,S] input window.
using Rule = std::function<double(const double* x, std::size_t T, std::size_t S, std::size_t s)>;

SampleSet make_set(std::size_t n, std::size_t T, std::size_t S, std::uint64_t seed,
                   const Rule& rule) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  SampleSet set{T, 1, S, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = set.x.size();
    for (std::size_t k = 0; k < T * S; ++k) set.x.push_back(d(rng));
    for (std::size_t s = 0; s < S; ++s) set.y.push_back(rule(set.x.data() + off, T, S, s));
  }
  return set;
}

double last_times_two(const double* x, std::size_t T, std::size_t S, std::size_t s) {
  return 2.0 * x[(T - 1) * S + s];
}

ModelConfig config_for(ModelKind kind, std::size_t T, std::size_t S, std::size_t H,
                       std::uint64_t seed) {
  auto c = ModelConfig::make(kind, T, 1, S, H, seed);
  if (kind == ModelKind::GcnLstm) {
    c.adjacency = Matrix::Zero(S, S);
    for (std::size_t i = 0; i + 1 < S; ++i) c.adjacency(i, i + 1) = c.adjacency(i + 1, i) = 1;
  }
  return c;
}

}  // namespace

TEST_CASE("mse values") {
  Tensor a({2, 1, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(mse(a, a).item() == 0.0);
  CHECK(mse(ops::add_scalar(a, 2.0), a).item() == 4.0);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d;
  std::vector<double> p(24), t(24);
  for (auto& v : p) v = d(rng);
  for (auto& v : t) v = d(rng);
  double direct = 0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) direct += std::pow(p[i * 6 + j] - t[i * 6 + j], 2);
  direct /= 24.0;
  CHECK(std::abs(mse(Tensor({4, 1, 6}, p), Tensor({4, 1, 6}, t)).item() - direct) < 1e-12);
  CHECK_THROWS_AS(mse(a, Tensor::zeros({2, 3})), ShapeError);
}

TEST_CASE("rmsprop hand-evaluated first step") {
  TrainConfig cfg;
  cfg.rmsprop_alpha = 0.99;
  cfg.momentum = 0.0;
  cfg.weight_decay = 0.0;
  cfg.epsilon = 1e-8;
  std::vector<double> theta{1.0};
  std::vector<double> g{1.0};
  RmsPropSlot slot;
  rmsprop_step(theta, g, slot, cfg, 0.1);
  CHECK(slot.square_avg[0] == doctest::Approx(0.01).epsilon(1e-15));
  double want = 1.0 - 0.1 * 1.0 / (std::sqrt(0.01) + 1e-8);
  CHECK(std::abs(theta[0] - want) < 1e-15);
  CHECK(std::abs(theta[0] - 1e-7) < 1e-12);
}

TEST_CASE("rmsprop with zero gradient and no decay leaves parameters unchanged") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  std::vector<double> theta{0.5, -2.0, 3.0};
  std::vector<double> g(3, 0.0);
  RmsPropSlot slot;
  for (int i = 0; i < 5; ++i) rmsprop_step(theta, g, slot, cfg, 0.01);
  CHECK(theta == std::vector<double>{0.5, -2.0, 3.0});
}

TEST_CASE("weight decay strictly shrinks parameters under zero data gradient") {
  TrainConfig cfg;
  std::vector<double> theta{0.5, -2.0, 3.0};
  std::vector<double> g(3, 0.0);
  RmsPropSlot slot;
  double norm = 1e300;
  for (int i = 0; i < 20; ++i) {
    rmsprop_step(theta, g, slot, cfg, 0.01);
    double n = 0;
    for (double v : theta) n += v * v;
    CHECK(n < norm);
    norm = n;
  }
}

TEST_CASE("rmsprop descends a quadratic bowl") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  cfg.momentum = 0.0;
  std::vector<double> theta{5.0};
  RmsPropSlot slot;
  double prev = 25.0;
  for (int i = 0; i < 100; ++i) {
    std::vector<double> g{2.0 * theta[0]};
    rmsprop_step(theta, g, slot, cfg, 0.01);
    double f = theta[0] * theta[0];
    CHECK(f < prev);
    prev = f;
  }
}

TEST_CASE("rmsprop rejects a non-finite gradient by name") {
  TrainConfig cfg;
  std::vector<double> theta{1.0};
  std::vector<double> g{std::nan("")};
  RmsPropSlot slot;
  try {
    rmsprop_step(theta, g, slot, cfg, 0.1, "head.weight");
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("head.weight") != std::string::npos);
  }
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InputError);
  cfg = TrainConfig{};
  cfg.early_stop_patience = 0;
  CHECK_THROWS_AS(cfg.validate(), InputError);
  cfg = TrainConfig{};
  cfg.lr_decay_factor = 1.5;
  CHECK_THROWS_AS(cfg.validate(), InputError);
}

TEST_CASE("improving validation runs every epoch without decay") {
  auto tr = make_set(64, 3, 3, 1, last_times_two);
  auto va = make_set(32, 3, 3, 2, last_times_two);
  models::Forecaster f(config_for(ModelKind::AConvLstm, 3, 3, 2, 5));
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.lr = 5e-3;
  cfg.max_epochs = 6;
  auto h = train(f, tr, va, cfg);
  bool improving = true;
  for (std::size_t i = 1; i < h.epochs.size(); ++i)
    improving = improving && h.epochs[i].val_mse < h.epochs[i - 1].val_mse;
  REQUIRE(improving);
  CHECK(h.epochs.size() == 6);
  CHECK_FALSE(h.early_stopped);
  for (const auto& e : h.epochs) CHECK(e.lr == cfg.lr);
}

TEST_CASE("constant validation loss stops after patience + 1 epochs with decay") {
  auto tr = make_set(40, 3, 3, 3, last_times_two);
  auto va = make_set(20, 3, 3, 4, last_times_two);
  // No batch norm and a vanishing step: weights, hence val loss, never move.
  models::Forecaster f(config_for(ModelKind::AConvLstm, 3, 3, 2, 6));
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.lr = 1e-300;
  cfg.early_stop_patience = 4;
  cfg.lr_decay_patience = 2;
  auto h = train(f, tr, va, cfg);
  CHECK(h.epochs.size() == 5);
  CHECK(h.early_stopped);
  CHECK(h.best_epoch == 1);
  CHECK(h.epochs[3].lr == cfg.lr * 0.5);
  for (const auto& e : h.epochs) CHECK(e.val_mse == h.epochs[0].val_mse);
}

TEST_CASE("training restores the best-validation weights exactly") {
  auto tr = make_set(80, 4, 3, 5, last_times_two);
  auto va = make_set(30, 4, 3, 6, last_times_two);
  for (auto k : {ModelKind::ACnn, ModelKind::Cnn}) {
    models::Forecaster f(config_for(k, 4, 3, 2, 7));
    TrainConfig cfg;
    cfg.batch_size = 16;
    cfg.lr = 0.05;  // noisy on purpose so the best epoch is not the last
    cfg.max_epochs = 12;
    cfg.early_stop_patience = 3;
    auto h = train(f, tr, va, cfg);
    double best = h.epochs[0].val_mse;
    for (const auto& e : h.epochs) best = std::min(best, e.val_mse);
    CHECK(h.best_val_mse == best);
    CHECK(evaluate_mse(f, va) == best);
  }
}

TEST_CASE("training is bit-reproducible") {
  auto tr = make_set(50, 3, 4, 7, last_times_two);
  auto va = make_set(20, 3, 4, 8, last_times_two);
  auto run = [&] {
    models::Forecaster f(config_for(ModelKind::ACnn, 3, 4, 2, 9));
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.max_epochs = 4;
    cfg.seed = 99;
    auto h = train(f, tr, va, cfg);
    return std::make_pair(f.state(), h.epochs.back().train_mse);
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("divergence raises with history attached") {
  auto tr = make_set(20, 3, 2, 9, last_times_two);
  auto va = make_set(10, 3, 2, 10, last_times_two);
  for (auto& v : tr.y) v *= 1e300;
  models::Forecaster f(config_for(ModelKind::AConvLstm, 3, 2, 2, 1));
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epochs = 3;
  CHECK_THROWS_AS(train(f, tr, va, cfg), TrainingDiverged);
}

TEST_CASE("history CSV layout") {
  History h;
  h.epochs.push_back({1, 0.5, 0.25, 1e-3, 0.0});
  auto path = std::filesystem::temp_directory_path() / "stlab_history.csv";
  h.write_csv(path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "epoch,train_mse,val_mse,lr,wall_ms");
  CHECK(row == "1,0.5,0.25,0.001,0");
  std::filesystem::remove(path);
}

TEST_CASE("every model learns y = 2x within 200 epochs") {
  const std::size_t T = 3, S = 4;
  auto tr = make_set(256, T, S, 11, last_times_two);
  auto va = make_set(64, T, S, 12, last_times_two);
  for (auto k : models::kAllKinds) {
    CAPTURE(models::kind_name(k));
    models::Forecaster f(config_for(k, T, S, 8, 13));
    TrainConfig cfg;
    cfg.batch_size = 32;
    cfg.lr = 3e-3;
    cfg.max_epochs = 200;
    cfg.early_stop_patience = 20;
    train(f, tr, va, cfg);
    CHECK(std::sqrt(evaluate_mse(f, va)) < 0.1);
  }
}

TEST_CASE("default t_past grid") {
  CHECK(default_tpast_grid(12) == std::vector<std::size_t>{2, 3, 5, 7, 12});
  CHECK(default_tpast_grid(4) == std::vector<std::size_t>{2, 3, 4});
  CHECK(default_tpast_grid(1) == std::vector<std::size_t>{1});
}

TEST_CASE("grid search over t_past") {
  const std::size_t T = 4, S = 1;
  // Reachable only with at least three lags: y = x[T-1] + x[T-3].
  auto rule = [](const double* x, std::size_t T_, std::size_t, std::size_t) {
    return x[T_ - 1] + x[T_ - 3];
  };
  auto tr = make_set(200, T, S, 21, rule);
  auto va = make_set(60, T, S, 22, rule);
  auto base = ModelConfig::make(ModelKind::ACnn, T, 1, S, 4, 3);
  TrainConfig cfg;
  cfg.batch_size = 20;
  cfg.lr = 1e-2;
  cfg.max_epochs = 60;

  std::vector<std::size_t> single{2};
  CHECK(grid_search_tpast(single, base, tr, va, cfg).best_t_past == 2);

  std::vector<std::size_t> cands{1, 2, 3};
  auto res = grid_search_tpast(cands, base, tr, va, cfg);
  CHECK(res.best_t_past == 3);
  CHECK(res.val_rmse[2].second < 0.5 * res.val_rmse[1].second);

  std::vector<std::size_t> dup{3, 2, 2};
  cfg.max_epochs = 2;
  auto tie = grid_search_tpast(dup, base, tr, va, cfg);
  CHECK(tie.val_rmse[1].second == tie.val_rmse[2].second);
  std::vector<std::size_t> same{2, 2};
  CHECK(grid_search_tpast(same, base, tr, va, cfg).best_t_past == 2);

  std::vector<std::size_t> bad{5};
  CHECK_THROWS_AS(grid_search_tpast(bad, base, tr, va, cfg), InputError);
}

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>

#include "doctest.h"
#include "stlab/error.hpp"
#include "stlab/models.hpp"
#include "support/gradcheck.hpp"

using namespace stlab;
using namespace stlab::models;
using stlab::testing::gradcheck;
using stlab::testing::random_tensor;

namespace {

Matrix ring_adjacency(std::size_t S) {
  Matrix a = Matrix::Zero(S, S);
  for (std::size_t i = 0; i < S; ++i) {
    a(i, (i + 1) % S) = a((i + 1) % S, i) = 1;
  }
  return a;
}

ModelConfig config_for(ModelKind kind, std::size_t T, std::size_t T_out, std::size_t S,
                       std::size_t H, std::uint64_t seed) {
  auto c = ModelConfig::make(kind, T, T_out, S, H, seed);
  if (kind == ModelKind::GcnLstm) c.adjacency = ring_adjacency(S);
  return c;
}

Tensor copy_of(const Tensor& t) {
  return Tensor(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
}

}  // namespace

TEST_CASE("kind names round-trip and twins pair up") {
  for (auto k : kAllKinds) {
    CHECK(parse_kind(kind_name(k)) == k);
    CHECK(twin(twin(k)) == k);
    CHECK(is_agnostic(k) != is_agnostic(twin(k)));
  }
  CHECK(parse_kind("a_convlstm") == ModelKind::AConvLstm);
  CHECK_THROWS_AS(parse_kind("RNN"), InputError);
}

TEST_CASE("config validation") {
  auto c = ModelConfig::make(ModelKind::ACnn, 6, 1, 4, 2);
  CHECK_NOTHROW(c.validate());
  c.t_past = 7;
  CHECK_THROWS_AS(c.validate(), InputError);
  auto d = ModelConfig::make(ModelKind::Cnn, 6, 1, 4, 2);
  d.t_past = 2;
  CHECK_THROWS_AS(d.validate(), InputError);
  auto g = ModelConfig::make(ModelKind::GcnLstm, 6, 1, 4, 2);
  CHECK_THROWS_AS(g.validate(), InputError);
  g.adjacency = ring_adjacency(4);
  CHECK_NOTHROW(g.validate());
  g.adjacency(0, 0) = 1;
  CHECK_THROWS_AS(g.validate(), InputError);
  auto a = ModelConfig::make(ModelKind::AGcnLstm, 6, 1, 4, 2);
  a.hops = 0;
  CHECK_THROWS_AS(a.validate(), InputError);
}

TEST_CASE("CNN maps 6x8 to 2x8") {
  auto f = build_model(ModelConfig::make(ModelKind::Cnn, 6, 2, 8, 4, 1));
  std::mt19937_64 rng(1);
  auto y = f.forward(random_tensor({6, 8}, rng, -1, 1, false), Mode::Eval);
  CHECK(y.shape() == Shape{2, 8});
  CHECK_THROWS_AS(f.forward(Tensor::zeros({5, 8}), Mode::Eval), ShapeError);
}

TEST_CASE("every model maps finite input to finite output of the right shape") {
  std::mt19937_64 rng(2);
  for (auto k : kAllKinds) {
    CAPTURE(kind_name(k));
    auto f = build_model(config_for(k, 5, 2, 6, 3, 7));
    auto x = random_tensor({3, 5, 6}, rng, -2, 2, false);
    for (auto mode : {Mode::Train, Mode::Eval}) {
      auto y = f.forward(x, mode);
      CHECK(y.shape() == Shape{3, 2, 6});
      for (double v : y.values()) CHECK(std::isfinite(v));
      CHECK(f.latent(x, mode).shape() == Shape{3, 3, 5, 6});
    }
  }
}

TEST_CASE("A-CNN forward matches a direct-summation reimplementation") {
  const std::size_t T = 6, Tp = 2, S = 5, H = 3, tp = 3;
  auto f = build_model(ModelConfig::make(ModelKind::ACnn, T, Tp, S, H, 9));
  // Move running statistics away from their defaults.
  std::mt19937_64 rng(3);
  for (int i = 0; i < 3; ++i) f.forward(random_tensor({4, T, S}, rng, -1, 2, false), Mode::Train);
  auto x = random_tensor({2, T, S}, rng, -1, 1, false);
  auto y = f.forward(x, Mode::Eval);

  std::map<std::string, Tensor> p;
  for (auto& np : f.parameters()) p[np.name] = np.tensor;
  auto bufs = f.buffers();
  const auto& rm = *bufs[0].values;
  const auto& rv = *bufs[1].values;
  const double eps = 1e-7;

  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> latent(H * T * S);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t) {
        double col = p["conv.bias"].at({h});
        for (std::size_t m = 0; m < tp; ++m) {
          long src = long(t) + long(m) - long(tp - 1);
          if (src < 0) continue;
          for (std::size_t s = 0; s < S; ++s)
            col += x.at({b, std::size_t(src), s}) * p["conv.kernel"].at({h, 0, m, s});
        }
        for (std::size_t s = 0; s < S; ++s) {
          double v = col * p["conv.row_kernel"].at({h, 0, s}) + p["conv.row_bias"].at({h});
          v = (v - rm[h]) / std::sqrt(rv[h] + eps) * p["norm.gamma"].at({h}) +
              p["norm.beta"].at({h});
          latent[(h * T + t) * S + s] = std::max(0.0, v);
        }
      }
    for (std::size_t o = 0; o < Tp; ++o)
      for (std::size_t s = 0; s < S; ++s) {
        double acc = p["head.bias"].at({o});
        for (std::size_t c = 0; c < H * T; ++c)
          acc += p["head.weight"].at({o, c, 0, 0}) * latent[c * S + s];
        CHECK(std::abs(acc - y.at({b, o, s})) < 1e-10);
      }
  }
}

TEST_CASE("A-GCN-LSTM output column depends only on its own input column") {
  const std::size_t S = 5, T = 4;
  auto f = build_model(ModelConfig::make(ModelKind::AGcnLstm, T, 2, S, 3, 11));
  std::mt19937_64 rng(4);
  auto x = random_tensor({1, T, S}, rng, -1, 1, false);
  auto y = f.forward(x, Mode::Eval);
  for (std::size_t m = 0; m < S; ++m) {
    auto xp = copy_of(x);
    for (std::size_t t = 0; t < T; ++t) xp.values_mut()[t * S + m] += 5.0 * (t + 1);
    auto yp = f.forward(xp, Mode::Eval);
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t j = 0; j < S; ++j)
        if (j != m) CHECK(yp.at({0, o, j}) == y.at({0, o, j}));
  }
}

TEST_CASE("spatial kernels see column order, A-GCN-LSTM is equivariant with its weights") {
  const std::size_t S = 6, T = 4;
  std::mt19937_64 rng(5);
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  auto x = random_tensor({2, T, S}, rng, -1, 1, false);
  auto xp = Tensor::zeros({2, T, S});
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < S; ++j)
        xp.values_mut()[(b * T + t) * S + j] = x.at({b, t, perm[j]});

  for (auto k : {ModelKind::Cnn, ModelKind::ConvLstm}) {
    auto f = build_model(ModelConfig::make(k, T, 1, S, 3, 21));
    auto y = f.forward(x, Mode::Eval);
    auto yp = f.forward(xp, Mode::Eval);
    double diff = 0;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t j = 0; j < S; ++j)
        diff = std::max(diff, std::abs(yp.at({b, 0, j}) - y.at({b, 0, perm[j]})));
    CHECK(diff > 1e-6);
  }

  auto f = build_model(ModelConfig::make(ModelKind::AGcnLstm, T, 1, S, 3, 22));
  auto g = build_model(ModelConfig::make(ModelKind::AGcnLstm, T, 1, S, 3, 22));
  // Node-specific graph weights travel with their node.
  auto pf = f.parameters();
  auto pg = g.parameters();
  for (std::size_t i = 0; i < pf.size(); ++i) {
    const auto& name = pf[i].name;
    auto src = pf[i].tensor.values();
    auto dst = pg[i].tensor.values_mut();
    if (name.find("graph.weight") != std::string::npos) {
      for (std::size_t a = 0; a < S; ++a)
        for (std::size_t c = 0; c < S; ++c) dst[a * S + c] = src[perm[a] * S + perm[c]];
    } else if (name.find("graph.bias") != std::string::npos) {
      std::size_t F = pf[i].tensor.dim(1);
      for (std::size_t a = 0; a < S; ++a)
        for (std::size_t c = 0; c < F; ++c) dst[a * F + c] = src[perm[a] * F + c];
    }
  }
  auto y = f.forward(x, Mode::Eval);
  auto yp = g.forward(xp, Mode::Eval);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t j = 0; j < S; ++j) CHECK(yp.at({b, 0, j}) == y.at({b, 0, perm[j]}));
}

TEST_CASE("parameter counts: closed form, enumeration and gradient-bearing scalars agree") {
  std::mt19937_64 rng(6);
  for (auto k : kAllKinds) {
    CAPTURE(kind_name(k));
    auto cfg = config_for(k, 5, 2, 6, 3, 1);
    auto f = build_model(cfg);
    auto pc = count_parameters(f);
    auto closed = count_parameters(cfg);
    CHECK(pc.conv == closed.conv);
    CHECK(pc.norm == closed.norm);
    CHECK(pc.head == closed.head);
    CHECK(pc.head == 3 * 5 * 2 + 2);

    Tape tape;
    TapeScope scope(tape);
    tape.backward(ops::sum(f.forward(random_tensor({2, 5, 6}, rng, -1, 1, false), Mode::Train)));
    std::size_t with_grad = 0;
    for (const auto& p : f.parameters()) {
      if (p.tensor.has_grad()) with_grad += p.tensor.grad().size();
    }
    CHECK(with_grad == pc.total());
  }
  auto acnn = ModelConfig::make(ModelKind::ACnn, 6, 2, 10, 8);
  CHECK(count_parameters(acnn).conv == 336);
}

TEST_CASE("match_hidden_width") {
  for (auto k : kAllKinds) {
    CAPTURE(kind_name(k));
    auto base = config_for(k, 6, 2, 9, 1, 0);
    auto min_total = count_parameters(base).stage();
    CHECK(match_hidden_width(min_total, base).H == 1);
    CHECK_THROWS_AS(match_hidden_width(min_total - 1, base), InputError);

    auto five = base;
    five.H = 5;
    CHECK(match_hidden_width(count_parameters(five).stage(), base).H == 5);

    std::mt19937_64 rng(7 + static_cast<int>(k));
    std::uniform_int_distribution<std::size_t> d(min_total, min_total * 40);
    for (int i = 0; i < 25; ++i) {
      auto target = d(rng);
      auto got = match_hidden_width(target, base);
      auto next = got;
      next.H += 1;
      CHECK(count_parameters(got).stage() <= target);
      CHECK(count_parameters(next).stage() > target);
    }
  }
}

TEST_CASE("same seed builds identical models, different seeds differ") {
  for (auto k : kAllKinds) {
    auto a = build_model(config_for(k, 4, 1, 5, 2, 3));
    auto b = build_model(config_for(k, 4, 1, 5, 2, 3));
    auto c = build_model(config_for(k, 4, 1, 5, 2, 4));
    CHECK(a.state() == b.state());
    CHECK(a.state() != c.state());
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  auto dir = std::filesystem::temp_directory_path() / "stlab_ckpt_test";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(8);
  for (auto k : kAllKinds) {
    CAPTURE(kind_name(k));
    auto f = build_model(config_for(k, 4, 2, 5, 2, 13));
    f.forward(random_tensor({3, 4, 5}, rng, -1, 1, false), Mode::Train);
    auto path = dir / (std::string(kind_name(k)) + ".ckpt");
    save_checkpoint(path, f, CheckpointMeta{13, 7});
    CheckpointMeta meta;
    auto g = load_checkpoint(path, &meta);
    CHECK(meta.epoch == 7);
    CHECK(meta.seed == 13);
    CHECK(g.state() == f.state());
    auto x = random_tensor({2, 4, 5}, rng, -1, 1, false);
    auto yf = f.forward(x, Mode::Eval);
    auto yg = g.forward(x, Mode::Eval);
    for (std::size_t i = 0; i < yf.size(); ++i) CHECK(yf.values()[i] == yg.values()[i]);
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("full models pass the gradient check") {
  std::mt19937_64 rng(9);
  for (auto k : kAllKinds) {
    CAPTURE(kind_name(k));
    auto f = build_model(config_for(k, 3, 2, 4, 2, 17));
    std::vector<Tensor> leaves{random_tensor({2, 3, 4}, rng)};
    for (auto& p : f.parameters()) leaves.push_back(p.tensor);
    auto r = gradcheck(leaves,
                       [&](const std::vector<Tensor>& l) { return f.forward(l[0], Mode::Train); },
                       23);
    INFO(r.detail);
    CHECK(r.ok);
    CHECK(r.kinks * 50 <= r.checked);
  }
}

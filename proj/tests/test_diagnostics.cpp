#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "stlab/diagnostics.hpp"
#include "stlab/error.hpp"

using namespace stlab;
using namespace stlab::diagnostics;

namespace {

// Direct double-sum evaluation of the Moran formula.
double moran_oracle(const std::vector<double>& x, const Matrix& w) {
  std::size_t S = x.size();
  double mean = 0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(S);
  double num = 0, den = 0, wsum = 0;
  for (std::size_t i = 0; i < S; ++i) {
    den += (x[i] - mean) * (x[i] - mean);
    for (std::size_t j = 0; j < S; ++j) {
      num += w(i, j) * (x[i] - mean) * (x[j] - mean);
      wsum += w(i, j);
    }
  }
  return static_cast<double>(S) / wsum * num / den;
}

// Direct evaluation of the cort formula.
double cort_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, sa = 0, sb = 0;
  for (std::size_t t = 0; t + 1 < a.size(); ++t) {
    num += (a[t + 1] - a[t]) * (b[t + 1] - b[t]);
    sa += (a[t + 1] - a[t]) * (a[t + 1] - a[t]);
    sb += (b[t + 1] - b[t]) * (b[t + 1] - b[t]);
  }
  return num / (std::sqrt(sa) * std::sqrt(sb));
}

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

Matrix random_weights(std::size_t S, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Matrix w(S, S);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) w(i, j) = i == j ? 0.0 : (u(rng) < 0.4 ? u(rng) : 0.0);
  w(0, 1) = 1.0;
  return w;
}

}  // namespace

TEST_CASE("Moran's I on a checkerboard is -1") {
  Matrix w = Matrix::Zero(4, 4);
  for (auto [i, j] : {std::pair{0, 1}, {0, 2}, {1, 3}, {2, 3}}) w(i, j) = w(j, i) = 1;
  std::vector<double> x{1, -1, -1, 1};
  CHECK(morans_i(x, w) == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(moran_oracle(x, w) == doctest::Approx(-1.0).epsilon(1e-14));
  std::vector<double> flat{2, 2, 2, 2};
  CHECK_THROWS_AS(morans_i(flat, w), NumericError);
}

TEST_CASE("Moran's I matches the direct sum and its invariances") {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    std::size_t S = 6 + static_cast<std::size_t>(rep % 7);
    auto w = random_weights(S, rng);
    auto x = random_vec(S, rng);
    double I = morans_i(x, w);
    CHECK(std::abs(I - moran_oracle(x, w)) < 1e-12);

    std::vector<double> affine(S);
    for (std::size_t i = 0; i < S; ++i) affine[i] = -3.5 * x[i] + 11.0;
    CHECK(std::abs(morans_i(affine, w) - I) < 1e-12);

    std::vector<std::size_t> p(S);
    std::iota(p.begin(), p.end(), std::size_t{0});
    std::shuffle(p.begin(), p.end(), rng);
    std::vector<double> xp(S);
    Matrix wp(S, S);
    for (std::size_t i = 0; i < S; ++i) {
      xp[i] = x[p[i]];
      for (std::size_t j = 0; j < S; ++j) wp(i, j) = w(p[i], p[j]);
    }
    CHECK(std::abs(morans_i(xp, wp) - I) < 1e-12);
  }
}

TEST_CASE("Moran's I permutation null mean is -1/(S-1)") {
  std::mt19937_64 rng(4);
  std::size_t S = 16;
  auto coords = std::vector<data::Coord>();
  for (std::size_t i = 0; i < S; ++i) coords.push_back({double(i % 4), double(i / 4)});
  auto w = data::build_adjacency(coords);
  auto x = random_vec(S, rng);
  std::vector<double> samples;
  for (int k = 0; k < 1000; ++k) {
    std::shuffle(x.begin(), x.end(), rng);
    samples.push_back(morans_i(x, w));
  }
  double m = std::accumulate(samples.begin(), samples.end(), 0.0) / 1000.0;
  double v = 0;
  for (double s : samples) v += (s - m) * (s - m);
  double se = std::sqrt(v / 999.0 / 1000.0);
  CHECK(std::abs(m - (-1.0 / 15.0)) < 3 * se);
}

TEST_CASE("Moran series on synthetic fields") {
  auto indep = data::synth_generate(25, 2000, 0.0, 5);
  auto w0 = data::build_adjacency(indep.coords);
  auto r0 = morans_i_series(indep.values, w0, 99, 1);
  CHECK(std::abs(r0.mean_i) < 0.15);
  CHECK(r0.skipped == 0);
  CHECK(r0.per_step.size() == 2000);

  auto corr = data::synth_generate(25, 2000, 3.0, 5);
  auto r3 = morans_i_series(corr.values, w0, 999, 1);
  CHECK(r3.mean_i > 0.3);
  CHECK(r3.p_value < 0.05);
  MESSAGE("mean I: corr_len 0 -> " << r0.mean_i << ", corr_len 3 -> " << r3.mean_i);

  SUBCASE("constant rows are skipped and counted") {
    Matrix v = corr.values.topRows(20);
    v.row(3).setConstant(1.5);
    auto r = morans_i_series(v, w0, 19, 0);
    CHECK(r.skipped == 1);
    CHECK(std::isnan(r.per_step[3]));
    Matrix flat = Matrix::Constant(4, 25, 2.0);
    CHECK_THROWS_AS(morans_i_series(flat, w0, 19, 0), InputError);
  }
  SUBCASE("seeded p-values are reproducible") {
    Matrix v = corr.values.topRows(30);
    CHECK(morans_i_series(v, w0, 99, 3).p_value == morans_i_series(v, w0, 99, 3).p_value);
  }
}

TEST_CASE("cort") {
  std::mt19937_64 rng(9);
  auto x = random_vec(50, rng);
  std::vector<double> y(50), neg(50);
  for (std::size_t i = 0; i < 50; ++i) {
    y[i] = 2 * x[i] + 7;
    neg[i] = -x[i];
  }
  CHECK(cort(x, x) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cort(x, y) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(cort(x, neg) == doctest::Approx(-1.0).epsilon(1e-14));
  for (int rep = 0; rep < 20; ++rep) {
    auto a = random_vec(30, rng), b = random_vec(30, rng);
    double c = cort(a, b);
    CHECK(std::abs(c - cort_oracle(a, b)) < 1e-12);
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
  std::vector<double> flat(50, 3.0);
  CHECK_THROWS_AS(cort(flat, x), NumericError);
  CHECK_THROWS_AS(cort(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST_CASE("atdm weight and distance") {
  CHECK(atdm_weight(0.0, 2.0) == 1.0);
  CHECK(atdm_weight(1.0, 2.0) == doctest::Approx(2.0 / (1.0 + std::exp(2.0))).epsilon(1e-15));
  CHECK(atdm_weight(1.0, 2.0) == doctest::Approx(0.2384).epsilon(1e-3));
  CHECK(atdm_weight(-1.0, 2.0) == doctest::Approx(1.7616).epsilon(1e-3));
  for (double a = -1.0; a < 1.0; a += 0.1) {
    CHECK(atdm_weight(a + 0.1, 2.0) < atdm_weight(a, 2.0));
    CHECK(atdm_weight(a, 2.0) > 0.0);
    CHECK(atdm_weight(a, 2.0) < 2.0);
  }
  CHECK_THROWS_AS(atdm_weight(0.5, -1.0), InputError);

  std::mt19937_64 rng(2);
  auto x = random_vec(40, rng), y = random_vec(40, rng);
  CHECK(atdm(x, x, 3.0) == 0.0);
  CHECK(atdm(x, y) == atdm(y, x));
  CHECK(atdm(x, y) >= 0.0);

  // Orthogonal increments give cort 0, so ATDM is the normalised distance.
  std::vector<double> a{0, 1, 1}, b{0, 0, 1};
  CHECK(cort(a, b) == 0.0);
  CHECK(atdm(a, b, 5.0) == doctest::Approx(std::sqrt(1.0 / 3.0)).epsilon(1e-15));
}

TEST_CASE("atdm over a dataset") {
  std::mt19937_64 rng(12);
  auto x = random_vec(60, rng);
  Matrix same(60, 2);
  for (Eigen::Index t = 0; t < 60; ++t) same(t, 0) = same(t, 1) = x[t];
  auto r = atdm_dataset(same, 2.0, 12);
  CHECK(r.atdm == 0.0);
  CHECK(r.atdm_adj == 0.0);

  // Linear trends with a constant offset are reproduced exactly by smoothing.
  Matrix lin(80, 3);
  for (Eigen::Index t = 0; t < 80; ++t) {
    lin(t, 0) = 0.5 * t;
    lin(t, 1) = 0.5 * t + 3.0;
    lin(t, 2) = 0.5 * t - 1.0;
  }
  auto l = atdm_dataset(lin, 2.0, 12);
  CHECK(std::abs(l.atdm - l.atdm_adj) < 1e-10);

  CHECK_THROWS_AS(atdm_dataset(lin, 2.0, 80), InputError);
  auto ma = moving_average(lin, 5);
  CHECK(ma.rows() == 76);
  CHECK(ma(0, 0) == doctest::Approx(1.0));

  auto synth = data::synth_generate(9, 1500, 0.0, 3);
  auto s = atdm_dataset(synth.values);
  MESSAGE("synthetic ATDM " << s.atdm << ", adjusted " << s.atdm_adj);
  CHECK(s.atdm_adj < s.atdm);
}

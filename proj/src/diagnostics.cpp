#include "stlab/diagnostics.hpp"

#include <algorithm>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "stlab/error.hpp"

namespace stlab::diagnostics {

namespace {

// Centers x into z; returns false when x is constant.
bool center(std::span<const double> x, std::vector<double>& z, double& ss) {
  double n = static_cast<double>(x.size());
  double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  z.resize(x.size());
  ss = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    z[i] = x[i] - mean;
    ss += z[i] * z[i];
  }
  double tol = 1e-12 * std::max(1.0, std::abs(mean));
  return ss > tol * tol * n;
}

double quadratic(const Matrix& w, const std::vector<double>& z) {
  Eigen::Map<const Eigen::VectorXd> v(z.data(), static_cast<Eigen::Index>(z.size()));
  return v.dot(w * v);
}

std::vector<double> increments(std::span<const double> a) {
  std::vector<double> d(a.size() - 1);
  for (std::size_t t = 0; t + 1 < a.size(); ++t) d[t] = a[t + 1] - a[t];
  return d;
}

void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("series lengths differ");
  if (a.size() < 2) throw InputError("series need at least two timesteps");
}

std::vector<double> column(const Matrix& m, Eigen::Index s) {
  std::vector<double> c(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index t = 0; t < m.rows(); ++t) c[static_cast<std::size_t>(t)] = m(t, s);
  return c;
}

}  // namespace

void validate_weights(const Matrix& w) {
  if (w.rows() != w.cols() || w.rows() < 2) throw InputError("spatial weights must be square, S >= 2");
  if (!w.allFinite() || (w.array() < 0.0).any()) {
    throw InputError("spatial weights must be finite and non-negative");
  }
  if (w.diagonal().cwiseAbs().maxCoeff() != 0.0) {
    throw InputError("spatial weights must have a zero diagonal");
  }
  if (!(w.sum() > 0.0)) throw InputError("spatial weights sum to zero");
}

double morans_i(std::span<const double> x, const Matrix& w) {
  validate_weights(w);
  if (x.size() != static_cast<std::size_t>(w.rows())) {
    throw ShapeError("Moran's I: " + std::to_string(x.size()) + " values for " +
                     std::to_string(w.rows()) + " locations");
  }
  std::vector<double> z;
  double ss = 0;
  if (!center(x, z, ss)) throw NumericError("Moran's I is undefined for a constant field");
  return static_cast<double>(x.size()) / w.sum() * quadratic(w, z) / ss;
}

MoranSeries morans_i_series(const Matrix& values, const Matrix& w, std::size_t permutations,
                            std::uint64_t seed) {
  validate_weights(w);
  const auto S = static_cast<std::size_t>(values.cols());
  if (S != static_cast<std::size_t>(w.rows())) throw ShapeError("weights do not match locations");
  if (permutations == 0) throw InputError("at least one permutation is required");
  const double scale = static_cast<double>(S) / w.sum();
  const double null_mean = -1.0 / (static_cast<double>(S) - 1.0);

  std::mt19937_64 rng(seed);
  MoranSeries out;
  out.per_step.assign(static_cast<std::size_t>(values.rows()),
                      std::numeric_limits<double>::quiet_NaN());
  double sum_i = 0.0, fisher = 0.0;
  std::size_t used = 0;
  std::vector<double> row(S), z;
  for (Eigen::Index t = 0; t < values.rows(); ++t) {
    for (std::size_t s = 0; s < S; ++s) row[s] = values(t, static_cast<Eigen::Index>(s));
    double ss = 0;
    if (!center(row, z, ss)) {
      ++out.skipped;
      continue;
    }
    double obs = scale * quadratic(w, z) / ss;
    double dev = std::abs(obs - null_mean) * (1.0 - 1e-12);
    std::size_t extreme = 0;
    for (std::size_t p = 0; p < permutations; ++p) {
      std::shuffle(z.begin(), z.end(), rng);
      if (std::abs(scale * quadratic(w, z) / ss - null_mean) >= dev) ++extreme;
    }
    double pv = static_cast<double>(extreme + 1) / static_cast<double>(permutations + 1);
    out.per_step[static_cast<std::size_t>(t)] = obs;
    sum_i += obs;
    fisher += -2.0 * std::log(pv);
    ++used;
  }
  if (used == 0) throw InputError("every timestep is spatially constant");
  out.mean_i = sum_i / static_cast<double>(used);
  out.p_value = boost::math::gamma_q(static_cast<double>(used), fisher / 2.0);
  return out;
}

double cort(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b);
  auto da = increments(a), db = increments(b);
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t t = 0; t < da.size(); ++t) {
    ab += da[t] * db[t];
    aa += da[t] * da[t];
    bb += db[t] * db[t];
  }
  if (aa == 0.0 || bb == 0.0) throw NumericError("cort is undefined for a series without increments");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

double atdm_weight(double x, double k) {
  if (!(k >= 0.0)) throw InputError("ATDM k must be non-negative");
  return 2.0 / (1.0 + std::exp(k * x));
}

double atdm(std::span<const double> a, std::span<const double> b, double k) {
  double c = cort(a, b);
  double d2 = 0;
  for (std::size_t t = 0; t < a.size(); ++t) d2 += (a[t] - b[t]) * (a[t] - b[t]);
  return atdm_weight(c, k) * std::sqrt(d2 / static_cast<double>(a.size()));
}

Matrix moving_average(const Matrix& values, std::size_t window) {
  const auto N = static_cast<std::size_t>(values.rows());
  if (window == 0) throw InputError("moving-average window must be positive");
  if (window >= N) {
    throw InputError("moving-average window " + std::to_string(window) +
                     " must be shorter than the series (" + std::to_string(N) + " steps)");
  }
  const auto w = static_cast<Eigen::Index>(window);
  Matrix out(values.rows() - w + 1, values.cols());
  for (Eigen::Index t = 0; t < out.rows(); ++t) {
    out.row(t) = values.middleRows(t, w).colwise().sum() / static_cast<double>(window);
  }
  return out;
}

AtdmSummary atdm_dataset(const Matrix& values, double k, std::size_t window) {
  const auto S = values.cols();
  if (S < 2) throw InputError("ATDM needs at least two locations");
  auto smooth = moving_average(values, window);
  auto mean_over_pairs = [&](const Matrix& m) {
    std::vector<std::vector<double>> cols;
    for (Eigen::Index s = 0; s < S; ++s) cols.push_back(column(m, s));
    double acc = 0;
    std::size_t pairs = 0;
    for (Eigen::Index i = 0; i < S; ++i)
      for (Eigen::Index j = i + 1; j < S; ++j) {
        acc += atdm(cols[static_cast<std::size_t>(i)], cols[static_cast<std::size_t>(j)], k);
        ++pairs;
      }
    return acc / static_cast<double>(pairs);
  };
  return AtdmSummary{mean_over_pairs(values), mean_over_pairs(smooth)};
}

}  // namespace stlab::diagnostics

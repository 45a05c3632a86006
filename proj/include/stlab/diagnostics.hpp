#pragma once

// Spatial autocorrelation (Moran's I) and the adaptive temporal dissimilarity
// measure used to characterise datasets.

#include <cstdint>
#include <span>
#include <vector>

#include "stlab/data.hpp"

namespace stlab::diagnostics {

using data::Matrix;

// Throws InputError unless w is square, non-negative, zero-diagonal and has a positive sum.
void validate_weights(const Matrix& w);

// Throws NumericError when x is constant.
double morans_i(std::span<const double> x, const Matrix& w);

struct MoranSeries {
  double mean_i = 0;
  double p_value = 1;
  std::vector<double> per_step;  // NaN where the timestep was constant
  std::size_t skipped = 0;
};

// Per-timestep I averaged over non-constant rows. Each row gets a two-sided
// permutation p-value (deviation from the null mean -1/(S-1)); the row
// p-values are combined with Fisher's method.
MoranSeries morans_i_series(const Matrix& values, const Matrix& w,
                            std::size_t permutations = 999, std::uint64_t seed = 0);

// Cosine similarity of first differences.
double cort(std::span<const double> a, std::span<const double> b);
// 2 / (1 + exp(k x))
double atdm_weight(double x, double k);
// atdm_weight(cort) times the Euclidean distance divided by sqrt(N).
double atdm(std::span<const double> a, std::span<const double> b, double k = 2.0);

// Centered moving average; output has N - window + 1 rows.
Matrix moving_average(const Matrix& values, std::size_t window);

struct AtdmSummary {
  double atdm = 0;
  double atdm_adj = 0;
};

// Means over unordered location pairs of the raw and smoothed columns.
AtdmSummary atdm_dataset(const Matrix& values, double k = 2.0, std::size_t window = 12);

}  // namespace stlab::diagnostics

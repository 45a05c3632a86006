#pragma once

// Forecast error metrics, the Friedman rank test, Wilcoxon signed-rank
// post-hoc tests and multiple-comparison adjustments.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stlab/data.hpp"

namespace stlab::stats {

using data::Matrix;

double rmse(std::span<const double> pred, std::span<const double> truth);
double bias(std::span<const double> pred, std::span<const double> truth);

struct StatReport {
  std::string test_name;
  std::string hypothesis;
  double statistic = 0;
  std::optional<double> df;
  double p_raw = 1;
  std::optional<double> p_holm;
  std::optional<double> p_bh;
  double alpha = 0.05;
  bool reject = false;
  std::size_t n_hypotheses = 1;
  bool exact = false;       // p from an exact null distribution
  bool degenerate = false;  // e.g. all paired differences zero
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
};

// Average ranks (1-based) with ties sharing the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

// scores: blocks x algorithms. Chi-squared approximation for the p-value.
StatReport friedman(const Matrix& scores, bool lower_is_better = true, double alpha = 0.05);
// Exact p-value of the Friedman statistic under independent uniform
// within-block permutations of each block's ranks.
double friedman_exact_p(const Matrix& scores, bool lower_is_better = true);

// Two-sided. Exact null for n <= 12 non-zero differences, normal
// approximation with tie and continuity correction above.
StatReport wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b,
                                double alpha = 0.05);
double wilcoxon_exact_p(std::span<const double> a, std::span<const double> b);
double wilcoxon_normal_p(std::span<const double> a, std::span<const double> b);

std::vector<double> adjust_holm(std::span<const double> p);
std::vector<double> adjust_bh(std::span<const double> p);

// Fills p_holm/p_bh over the family, sets n_hypotheses and reject (Holm-adjusted p < alpha).
void adjust_family(std::vector<StatReport>& reports);

using ModelScores = std::map<std::string, std::vector<double>>;

// Agnostic-vs-traditional pairs: A-CNN/CNN, A-ConvLSTM/ConvLSTM, A-GCN-LSTM/GCN-LSTM.
std::vector<std::pair<std::string, std::string>> traditional_pairs();

struct Comparison {
  StatReport friedman;
  bool posthoc_run = false;
  std::vector<StatReport> posthoc;

  nlohmann::json to_json() const;
};

// Friedman over every model, then (when rejected) Wilcoxon on each pair present
// in results, adjusted jointly. Empty pairs means traditional_pairs().
Comparison compare_models(const ModelScores& results, double alpha = 0.05,
                          std::vector<std::pair<std::string, std::string>> pairs = {});

// Aligned text table: hypothesis, statistic, p_unajusted, p_holm, p_BH, reject.
std::string render_table(const std::vector<StatReport>& reports);
std::string render_comparison(const Comparison& c);

}  // namespace stlab::stats

#include "stlab/stats.hpp"

#include <algorithm>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "stlab/error.hpp"

namespace stlab::stats {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b, const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": lengths differ (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
  if (a.empty()) throw InputError(std::string(what) + ": empty input");
}

void check_p(std::span<const double> p) {
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("p-values must lie in [0,1]");
  }
}

std::vector<std::size_t> ascending(std::span<const double> p) {
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  return idx;
}

// Within-block ranks, rank 1 = best.
Matrix block_ranks(const Matrix& scores, bool lower_is_better) {
  Matrix r(scores.rows(), scores.cols());
  std::vector<double> row(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index b = 0; b < scores.rows(); ++b) {
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      row[static_cast<std::size_t>(j)] = lower_is_better ? scores(b, j) : -scores(b, j);
    }
    auto ranks = average_ranks(row);
    for (Eigen::Index j = 0; j < scores.cols(); ++j) r(b, j) = ranks[static_cast<std::size_t>(j)];
  }
  return r;
}

double friedman_statistic(std::span<const double> rank_sums, double B) {
  double A = static_cast<double>(rank_sums.size());
  double acc = 0;
  for (double R : rank_sums) {
    double d = R / B - (A + 1.0) / 2.0;
    acc += d * d;
  }
  return 12.0 * B / (A * (A + 1.0)) * acc;
}

void validate_scores(const Matrix& scores) {
  if (scores.rows() < 2 || scores.cols() < 2) {
    throw InputError("Friedman test needs at least 2 blocks and 2 algorithms");
  }
  if (!scores.allFinite()) throw InputError("Friedman test scores must be finite");
}

struct SignedRanks {
  std::vector<long> doubled;  // 2 x rank of |d|, non-zero differences only
  long doubled_positive = 0;
  std::vector<std::size_t> tie_sizes;
};

SignedRanks signed_ranks(std::span<const double> a, std::span<const double> b) {
  std::vector<double> d, mag;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double v = a[i] - b[i];
    if (!std::isfinite(v)) throw InputError("Wilcoxon test inputs must be finite");
    if (v != 0.0) {
      d.push_back(v);
      mag.push_back(std::abs(v));
    }
  }
  SignedRanks out;
  auto ranks = average_ranks(mag);
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto r2 = std::lround(2.0 * ranks[i]);
    out.doubled.push_back(r2);
    if (d[i] > 0) out.doubled_positive += r2;
  }
  std::vector<double> sorted = mag;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    if (j - i > 1) out.tie_sizes.push_back(j - i);
    i = j;
  }
  return out;
}

std::string fmt(double v, const char* spec = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

double rmse(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred, truth, "rmse");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

double bias(std::span<const double> pred, std::span<const double> truth) {
  check_pair(pred, truth, "bias");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += pred[i] - truth[i];
  return acc / static_cast<double>(pred.size());
}

nlohmann::json StatReport::to_json() const {
  nlohmann::json j;
  j["test"] = test_name;
  j["hypothesis"] = hypothesis;
  j["statistic"] = statistic;
  j["df"] = df ? nlohmann::json(*df) : nlohmann::json(nullptr);
  j["p_raw"] = p_raw;
  j["p_holm"] = p_holm ? nlohmann::json(*p_holm) : nlohmann::json(nullptr);
  j["p_bh"] = p_bh ? nlohmann::json(*p_bh) : nlohmann::json(nullptr);
  j["alpha"] = alpha;
  j["reject"] = reject;
  j["n_hypotheses"] = n_hypotheses;
  j["exact"] = exact;
  j["degenerate"] = degenerate;
  j["warnings"] = warnings;
  return j;
}

std::vector<double> average_ranks(std::span<const double> values) {
  auto idx = ascending(values);
  std::vector<double> r(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && values[idx[j]] == values[idx[i]]) ++j;
    double avg = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) r[idx[k]] = avg;
    i = j;
  }
  return r;
}

StatReport friedman(const Matrix& scores, bool lower_is_better, double alpha) {
  validate_scores(scores);
  auto ranks = block_ranks(scores, lower_is_better);
  const double B = static_cast<double>(scores.rows());
  const double A = static_cast<double>(scores.cols());
  std::vector<double> sums(static_cast<std::size_t>(scores.cols()));
  for (Eigen::Index j = 0; j < scores.cols(); ++j) sums[static_cast<std::size_t>(j)] = ranks.col(j).sum();

  StatReport r;
  r.test_name = "Friedman";
  r.hypothesis = "all models perform equally";
  r.statistic = friedman_statistic(sums, B);
  r.df = A - 1.0;
  r.p_raw = std::clamp(boost::math::gamma_q((A - 1.0) / 2.0, r.statistic / 2.0), 0.0, 1.0);
  r.alpha = alpha;
  r.reject = r.p_raw < alpha;
  for (Eigen::Index b = 0; b < scores.rows(); ++b) {
    if ((scores.row(b).array() == scores(b, 0)).all()) {
      r.warnings.push_back("block " + std::to_string(b) + " is fully tied; average ranks used");
    }
  }
  return r;
}

double friedman_exact_p(const Matrix& scores, bool lower_is_better) {
  validate_scores(scores);
  if (scores.cols() > 6) throw InputError("exact Friedman enumeration supports at most 6 algorithms");
  auto ranks = block_ranks(scores, lower_is_better);
  const auto A = static_cast<std::size_t>(scores.cols());
  const double B = static_cast<double>(scores.rows());

  // Distribution of doubled rank-sum vectors.
  std::map<std::vector<long>, double> dist{{std::vector<long>(A, 0), 1.0}};
  std::vector<long> observed(A, 0);
  for (Eigen::Index b = 0; b < scores.rows(); ++b) {
    std::vector<long> row(A);
    for (std::size_t j = 0; j < A; ++j) {
      row[j] = std::lround(2.0 * ranks(b, static_cast<Eigen::Index>(j)));
      observed[j] += row[j];
    }
    std::vector<std::vector<long>> perms;
    std::vector<std::size_t> order(A);
    std::iota(order.begin(), order.end(), std::size_t{0});
    do {
      std::vector<long> p(A);
      for (std::size_t j = 0; j < A; ++j) p[j] = row[order[j]];
      perms.push_back(std::move(p));
    } while (std::next_permutation(order.begin(), order.end()));
    const double w = 1.0 / static_cast<double>(perms.size());
    std::map<std::vector<long>, double> next;
    for (const auto& [sums, prob] : dist) {
      for (const auto& p : perms) {
        auto s = sums;
        for (std::size_t j = 0; j < A; ++j) s[j] += p[j];
        next[s] += prob * w;
      }
    }
    dist = std::move(next);
  }
  auto stat_of = [&](const std::vector<long>& s) {
    std::vector<double> sums(A);
    for (std::size_t j = 0; j < A; ++j) sums[j] = static_cast<double>(s[j]) / 2.0;
    return friedman_statistic(sums, B);
  };
  double obs = stat_of(observed);
  double p = 0;
  for (const auto& [sums, prob] : dist) {
    if (stat_of(sums) >= obs - 1e-9 * std::max(1.0, obs)) p += prob;
  }
  return std::clamp(p, 0.0, 1.0);
}

double wilcoxon_exact_p(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b, "wilcoxon");
  auto sr = signed_ranks(a, b);
  if (sr.doubled.empty()) return 1.0;
  if (sr.doubled.size() > 30) throw InputError("exact Wilcoxon enumeration supports n <= 30");
  long total = std::accumulate(sr.doubled.begin(), sr.doubled.end(), 0L);
  std::vector<double> count(static_cast<std::size_t>(total) + 1, 0.0);
  count[0] = 1.0;
  for (long r : sr.doubled) {
    for (long s = total; s >= r; --s) count[static_cast<std::size_t>(s)] += count[static_cast<std::size_t>(s - r)];
  }
  double all = std::ldexp(1.0, static_cast<int>(sr.doubled.size()));
  double lower = 0, upper = 0;
  for (long s = 0; s <= total; ++s) {
    if (s <= sr.doubled_positive) lower += count[static_cast<std::size_t>(s)];
    if (s >= sr.doubled_positive) upper += count[static_cast<std::size_t>(s)];
  }
  return std::min(1.0, 2.0 * std::min(lower, upper) / all);
}

double wilcoxon_normal_p(std::span<const double> a, std::span<const double> b) {
  check_pair(a, b, "wilcoxon");
  auto sr = signed_ranks(a, b);
  if (sr.doubled.empty()) return 1.0;
  double n = static_cast<double>(sr.doubled.size());
  double w = static_cast<double>(sr.doubled_positive) / 2.0;
  double mean = n * (n + 1.0) / 4.0;
  double var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
  for (auto t : sr.tie_sizes) {
    double td = static_cast<double>(t);
    var -= (td * td * td - td) / 48.0;
  }
  if (var <= 0) return 1.0;
  double z = std::max(0.0, std::abs(w - mean) - 0.5) / std::sqrt(var);
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

StatReport wilcoxon_signed_rank(std::span<const double> a, std::span<const double> b, double alpha) {
  check_pair(a, b, "wilcoxon");
  auto sr = signed_ranks(a, b);
  StatReport r;
  r.test_name = "Wilcoxon signed-rank";
  r.alpha = alpha;
  r.statistic = static_cast<double>(sr.doubled_positive) / 2.0;
  const std::size_t n = sr.doubled.size();
  if (n == 0) {
    r.p_raw = 1.0;
    r.degenerate = true;
    r.exact = true;
    r.warnings.push_back("all paired differences are zero");
  } else if (n <= 12) {
    r.p_raw = wilcoxon_exact_p(a, b);
    r.exact = true;
  } else {
    r.p_raw = wilcoxon_normal_p(a, b);
  }
  if (n > 0 && n < 5) {
    r.warnings.push_back("only " + std::to_string(n) + " non-zero differences; the test has little power");
  }
  r.reject = r.p_raw < alpha;
  return r;
}

std::vector<double> adjust_holm(std::span<const double> p) {
  check_p(p);
  const std::size_t m = p.size();
  auto idx = ascending(p);
  std::vector<double> out(m);
  double running = 0;
  for (std::size_t i = 0; i < m; ++i) {
    double v = std::min(1.0, static_cast<double>(m - i) * p[idx[i]]);
    running = std::max(running, v);
    out[idx[i]] = running;
  }
  return out;
}

std::vector<double> adjust_bh(std::span<const double> p) {
  check_p(p);
  const std::size_t m = p.size();
  auto idx = ascending(p);
  std::vector<double> out(m);
  double running = 1.0;
  for (std::size_t i = m; i-- > 0;) {
    double v = std::min(1.0, static_cast<double>(m) * p[idx[i]] / static_cast<double>(i + 1));
    running = std::min(running, v);
    // m * p / m can round below p
    out[idx[i]] = std::max(running, p[idx[i]]);
  }
  return out;
}

void adjust_family(std::vector<StatReport>& reports) {
  std::vector<double> raw;
  for (const auto& r : reports) raw.push_back(r.p_raw);
  auto holm = adjust_holm(raw);
  auto bh = adjust_bh(raw);
  for (std::size_t i = 0; i < reports.size(); ++i) {
    reports[i].p_holm = holm[i];
    reports[i].p_bh = bh[i];
    reports[i].n_hypotheses = reports.size();
    reports[i].reject = holm[i] < reports[i].alpha;
  }
}

std::vector<std::pair<std::string, std::string>> traditional_pairs() {
  return {{"A-CNN", "CNN"}, {"A-ConvLSTM", "ConvLSTM"}, {"A-GCN-LSTM", "GCN-LSTM"}};
}

nlohmann::json Comparison::to_json() const {
  nlohmann::json j;
  j["friedman"] = friedman.to_json();
  j["posthoc_run"] = posthoc_run;
  j["posthoc"] = nlohmann::json::array();
  for (const auto& r : posthoc) j["posthoc"].push_back(r.to_json());
  return j;
}

Comparison compare_models(const ModelScores& results, double alpha,
                          std::vector<std::pair<std::string, std::string>> pairs) {
  if (results.size() < 2) throw InputError("comparison needs at least two models");
  const std::size_t blocks = results.begin()->second.size();
  for (const auto& [name, s] : results) {
    if (s.size() != blocks) {
      throw InputError("misaligned blocks: " + name + " has " + std::to_string(s.size()) +
                       " scores, expected " + std::to_string(blocks));
    }
  }
  Matrix scores(static_cast<Eigen::Index>(blocks), static_cast<Eigen::Index>(results.size()));
  Eigen::Index j = 0;
  for (const auto& [name, s] : results) {
    for (std::size_t b = 0; b < blocks; ++b) scores(static_cast<Eigen::Index>(b), j) = s[b];
    ++j;
  }
  Comparison c;
  c.friedman = friedman(scores, true, alpha);
  if (!c.friedman.reject) return c;

  if (pairs.empty()) pairs = traditional_pairs();
  for (const auto& [a, b] : pairs) {
    auto ia = results.find(a), ib = results.find(b);
    if (ia == results.end() || ib == results.end()) continue;
    auto r = wilcoxon_signed_rank(ia->second, ib->second, alpha);
    r.hypothesis = a + " vs " + b;
    c.posthoc.push_back(std::move(r));
  }
  if (!c.posthoc.empty()) adjust_family(c.posthoc);
  c.posthoc_run = true;
  return c;
}

std::string render_table(const std::vector<StatReport>& reports) {
  std::vector<std::vector<std::string>> rows{
      {"Hypothesis", "statistic", "p_unajusted", "p_holm", "p_BH", "reject"}};
  for (const auto& r : reports) {
    rows.push_back({r.hypothesis + (r.reject ? " *" : ""), fmt(r.statistic), fmt(r.p_raw),
                    r.p_holm ? fmt(*r.p_holm) : "-", r.p_bh ? fmt(*r.p_bh) : "-",
                    r.reject ? "yes" : "no"});
  }
  std::vector<std::size_t> width(rows.front().size(), 0);
  for (const auto& row : rows)
    for (std::size_t k = 0; k < row.size(); ++k) width[k] = std::max(width[k], row[k].size());
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t k = 0; k < row.size(); ++k) {
      out << row[k] << std::string(width[k] - row[k].size(), ' ');
      out << (k + 1 < row.size() ? "  " : "\n");
    }
  }
  return out.str();
}

std::string render_comparison(const Comparison& c) {
  std::ostringstream out;
  out << "Friedman statistic = " << fmt(c.friedman.statistic) << ", df = "
      << fmt(c.friedman.df.value_or(0)) << ", p = " << fmt(c.friedman.p_raw) << " ("
      << (c.friedman.reject ? "rejected" : "not rejected") << " at alpha = "
      << fmt(c.friedman.alpha) << ")\n";
  out << render_table(c.posthoc);
  if (!c.posthoc_run) {
    out << "Post-hoc comparisons not run.\n";
  } else if (c.posthoc.empty()) {
    out << "No agnostic/traditional pairs present.\n";
  }
  return out.str();
}

}  // namespace stlab::stats

#include "stlab/data.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <random>

#include "json.hpp"
#include "stlab/error.hpp"

namespace stlab::data {

void StSeries::validate() const {
  std::size_t S = locations();
  if (S == 0 || steps() == 0) throw InputError("series is empty");
  if (timestamps.size() != steps()) throw InputError("timestamp count differs from row count");
  if (coords.size() != S || names.size() != S) {
    throw InputError("coordinates and names must have one entry per location");
  }
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values.data()[i])) throw InputError("series contains non-finite values");
  }
  for (std::size_t t = 1; t < timestamps.size(); ++t) {
    if (timestamps[t] <= timestamps[t - 1]) {
      throw InputError("timestamps must be strictly increasing (row " + std::to_string(t) + ")");
    }
    if (timestamps[t] - timestamps[t - 1] != timestep) {
      throw InputError("timestamps must have a constant stride (row " + std::to_string(t) + ")");
    }
  }
}

// ---------------------------------------------------------------------------

ZScore zscore_fit(const Matrix& values, std::size_t row_begin, std::size_t row_end,
                  std::span<const std::string> names) {
  if (row_end <= row_begin || row_end > static_cast<std::size_t>(values.rows())) {
    throw InputError("z-score fit range is empty or out of bounds");
  }
  std::size_t S = static_cast<std::size_t>(values.cols());
  double n = static_cast<double>(row_end - row_begin);
  ZScore z{std::vector<double>(S), std::vector<double>(S)};
  for (std::size_t s = 0; s < S; ++s) {
    double m = 0;
    for (std::size_t t = row_begin; t < row_end; ++t) m += values(t, s);
    m /= n;
    double v = 0;
    for (std::size_t t = row_begin; t < row_end; ++t) v += (values(t, s) - m) * (values(t, s) - m);
    double sd = std::sqrt(v / n);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(m)))) {
      std::string who = s < names.size() ? names[s] : "column " + std::to_string(s);
      throw InputError("location " + who + " is constant over the fitting range");
    }
    z.mean[s] = m;
    z.std[s] = sd;
  }
  return z;
}

ZScore zscore_fit(const Matrix& values, std::span<const std::string> names) {
  return zscore_fit(values, 0, static_cast<std::size_t>(values.rows()), names);
}

Matrix zscore_apply(const ZScore& z, const Matrix& values) {
  if (static_cast<std::size_t>(values.cols()) != z.mean.size()) {
    throw ShapeError("z-score location count mismatch");
  }
  Matrix out(values.rows(), values.cols());
  for (Eigen::Index t = 0; t < values.rows(); ++t)
    for (Eigen::Index s = 0; s < values.cols(); ++s)
      out(t, s) = (values(t, s) - z.mean[s]) / z.std[s];
  return out;
}

Matrix zscore_invert(const ZScore& z, const Matrix& values) {
  if (static_cast<std::size_t>(values.cols()) != z.mean.size()) {
    throw ShapeError("z-score location count mismatch");
  }
  Matrix out(values.rows(), values.cols());
  for (Eigen::Index t = 0; t < values.rows(); ++t)
    for (Eigen::Index s = 0; s < values.cols(); ++s)
      out(t, s) = values(t, s) * z.std[s] + z.mean[s];
  return out;
}

// ---------------------------------------------------------------------------

std::size_t window_count(std::size_t steps, std::size_t T, std::size_t T_out) {
  if (T == 0 || T_out == 0) throw InputError("T and T' must be positive");
  if (steps < T + T_out) {
    throw InputError("series of " + std::to_string(steps) + " steps is shorter than T+T' = " +
                     std::to_string(T + T_out));
  }
  return steps - T - T_out + 1;
}

std::vector<Sample> make_windows(const Matrix& values, std::size_t T, std::size_t T_out) {
  auto n = window_count(static_cast<std::size_t>(values.rows()), T, T_out);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(Sample{values.middleRows(i, T), values.middleRows(i + T, T_out), i});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> FoldSpec::train_indices() const {
  std::vector<std::size_t> idx;
  for (const auto& r : train)
    for (std::size_t i = r.begin; i < r.end; ++i) idx.push_back(i);
  return idx;
}

std::size_t FoldSpec::train_size() const {
  std::size_t n = 0;
  for (const auto& r : train) n += r.size();
  return n;
}

std::vector<FoldSpec> blocked_cv(std::size_t num_windows, std::size_t T, std::size_t T_out,
                                 std::size_t folds) {
  if (folds < 3) throw InputError("blocked cross-validation needs at least 3 folds");
  if (T == 0 || T_out == 0) throw InputError("T and T' must be positive");
  const std::size_t gap = T + T_out - 1;
  std::vector<std::size_t> edge(folds + 1);
  for (std::size_t k = 0; k <= folds; ++k) edge[k] = k * num_windows / folds;
  // Worst case a block loses a gap at both ends; train pieces must survive too.
  for (std::size_t k = 0; k < folds; ++k) {
    if (edge[k + 1] - edge[k] <= 2 * gap) {
      throw InputError(std::to_string(num_windows) + " windows are too few for " +
                       std::to_string(folds) + " folds with gaps of " + std::to_string(gap));
    }
  }

  enum class Role { Train, Val, Test };
  std::vector<FoldSpec> out;
  for (std::size_t f = 0; f < folds; ++f) {
    std::size_t v = (f + folds - 1) % folds;
    struct Seg {
      Role role;
      std::size_t begin, end;
    };
    std::vector<Seg> segs;
    for (std::size_t k = 0; k < folds; ++k) {
      Role r = k == f ? Role::Test : (k == v ? Role::Val : Role::Train);
      if (!segs.empty() && segs.back().role == r) {
        segs.back().end = edge[k + 1];
      } else {
        segs.push_back({r, edge[k], edge[k + 1]});
      }
    }
    std::vector<Seg> trimmed = segs;
    for (std::size_t i = 0; i + 1 < segs.size(); ++i) {
      Role a = segs[i].role, b = segs[i + 1].role;
      if (b == Role::Test || (a == Role::Train && b == Role::Val)) {
        trimmed[i].end -= gap;
      } else {
        trimmed[i + 1].begin += gap;
      }
    }
    FoldSpec spec;
    spec.fold = f;
    spec.gap = gap;
    for (const auto& s : trimmed) {
      IndexRange r{s.begin, s.end};
      if (s.role == Role::Train) spec.train.push_back(r);
      if (s.role == Role::Val) spec.val = r;
      if (s.role == Role::Test) spec.test = r;
    }
    spec.test_block = IndexRange{edge[f], edge[f + 1]};
    out.push_back(std::move(spec));
  }
  return out;
}

std::string folds_to_json(const std::vector<FoldSpec>& folds) {
  auto range = [](const IndexRange& r) { return nlohmann::json::array({r.begin, r.end}); };
  auto arr = nlohmann::json::array();
  for (const auto& f : folds) {
    nlohmann::json j;
    j["fold"] = f.fold;
    j["gap"] = f.gap;
    j["train"] = nlohmann::json::array();
    for (const auto& r : f.train) j["train"].push_back(range(r));
    j["val"] = range(f.val);
    j["test"] = range(f.test);
    arr.push_back(j);
  }
  return arr.dump(2);
}

// ---------------------------------------------------------------------------

namespace {

double distance(const Coord& a, const Coord& b) { return std::hypot(a.x - b.x, a.y - b.y); }

void require_finite(std::span<const Coord> coords) {
  for (const auto& c : coords) {
    if (!std::isfinite(c.x) || !std::isfinite(c.y)) throw InputError("coordinates must be finite");
  }
}

}  // namespace

std::vector<Merge> agglomerate(std::span<const Coord> coords) {
  std::size_t S = coords.size();
  if (S < 2) throw InputError("clustering needs at least two locations");
  require_finite(coords);

  struct Cluster {
    std::vector<std::size_t> members;
    std::size_t min_index;
  };
  std::vector<Cluster> clusters;
  for (std::size_t i = 0; i < S; ++i) clusters.push_back({{i}, i});
  std::vector<std::vector<double>> d(S, std::vector<double>(S, 0.0));
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) d[i][j] = distance(coords[i], coords[j]);
  std::vector<bool> alive(S, true);

  std::vector<Merge> merges;
  for (std::size_t step = 0; step + 1 < S; ++step) {
    std::size_t ba = 0, bb = 0;
    double best = std::numeric_limits<double>::infinity();
    std::pair<std::size_t, std::size_t> best_key{S, S};
    for (std::size_t a = 0; a < S; ++a) {
      if (!alive[a]) continue;
      for (std::size_t b = a + 1; b < S; ++b) {
        if (!alive[b]) continue;
        std::pair<std::size_t, std::size_t> key = std::minmax(clusters[a].min_index, clusters[b].min_index);
        if (d[a][b] < best || (d[a][b] == best && key < best_key)) {
          best = d[a][b];
          best_key = key;
          ba = a;
          bb = b;
        }
      }
    }
    if (clusters[bb].min_index < clusters[ba].min_index) std::swap(ba, bb);
    Merge m{clusters[ba].members, clusters[bb].members, best};
    merges.push_back(m);

    double na = static_cast<double>(clusters[ba].members.size());
    double nb = static_cast<double>(clusters[bb].members.size());
    for (std::size_t k = 0; k < S; ++k) {
      if (!alive[k] || k == ba || k == bb) continue;
      double v = (na * d[ba][k] + nb * d[bb][k]) / (na + nb);
      d[ba][k] = d[k][ba] = v;
    }
    auto& dst = clusters[ba].members;
    dst.insert(dst.end(), clusters[bb].members.begin(), clusters[bb].members.end());
    clusters[ba].min_index = std::min(clusters[ba].min_index, clusters[bb].min_index);
    alive[bb] = false;
  }
  return merges;
}

std::vector<std::size_t> dendrogram_order(std::span<const Coord> coords) {
  auto merges = agglomerate(coords);
  // Members of each merged cluster are stored as left-then-right leaf order.
  const auto& root = merges.back();
  std::vector<std::size_t> order = root.left;
  order.insert(order.end(), root.right.begin(), root.right.end());
  return order;
}

Matrix build_adjacency(std::span<const Coord> coords, std::size_t neighbours) {
  std::size_t S = coords.size();
  if (S < neighbours + 1) {
    throw InputError("adjacency needs at least " + std::to_string(neighbours + 1) +
                     " locations, got " + std::to_string(S));
  }
  require_finite(coords);
  Matrix a = Matrix::Zero(static_cast<Eigen::Index>(S), static_cast<Eigen::Index>(S));
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < S; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < S; ++j) {
      if (j != i) cand.emplace_back(distance(coords[i], coords[j]), j);
    }
    std::sort(cand.begin(), cand.end());
    for (std::size_t k = 0; k < neighbours; ++k) {
      auto j = cand[k].second;
      a(i, j) = a(j, i) = 1.0;
    }
  }
  return a;
}

StSeries select_columns(const StSeries& series, std::span<const std::size_t> order) {
  std::size_t S = series.locations();
  if (order.size() != S) throw InputError("column order must list every location once");
  std::vector<bool> seen(S, false);
  for (auto j : order) {
    if (j >= S || seen[j]) throw InputError("column order is not a permutation");
    seen[j] = true;
  }
  StSeries out;
  out.values.resize(series.values.rows(), series.values.cols());
  for (std::size_t j = 0; j < S; ++j) {
    out.values.col(static_cast<Eigen::Index>(j)) =
        series.values.col(static_cast<Eigen::Index>(order[j]));
    out.coords.push_back(series.coords[order[j]]);
    out.names.push_back(series.names[order[j]]);
  }
  out.timestamps = series.timestamps;
  out.timestep = series.timestep;
  return out;
}

Permuted permute_space(const StSeries& series, std::uint64_t seed) {
  std::vector<std::size_t> perm(series.locations());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  return Permuted{select_columns(series, perm), perm};
}

// ---------------------------------------------------------------------------

StSeries synth_generate(std::size_t S, std::size_t N, double corr_len, std::uint64_t seed,
                        const SynthParams& p) {
  if (S == 0 || N == 0) throw InputError("synthetic series needs S > 0 and N > 0");
  if (!(corr_len >= 0.0)) throw InputError("corr_len must be non-negative");
  auto side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(S))));
  StSeries out;
  for (std::size_t i = 0; i < S; ++i) {
    out.coords.push_back(Coord{static_cast<double>(i % side), static_cast<double>(i / side)});
    char name[32];
    std::snprintf(name, sizeof name, "loc%03zu", i);
    out.names.emplace_back(name);
  }

  auto Si = static_cast<Eigen::Index>(S);
  Matrix L = Matrix::Identity(Si, Si);
  if (corr_len > 0.0) {
    Matrix K(Si, Si);
    for (Eigen::Index i = 0; i < Si; ++i)
      for (Eigen::Index j = 0; j < Si; ++j) {
        double d = distance(out.coords[i], out.coords[j]);
        K(i, j) = std::exp(-d * d / (2.0 * corr_len * corr_len));
      }
    K.diagonal().array() += 1e-8;
    Eigen::LLT<Eigen::MatrixXd> llt(K);
    L = llt.matrixL();
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  auto field = [&]() {
    Eigen::VectorXd z(Si);
    for (Eigen::Index i = 0; i < Si; ++i) z(i) = gauss(rng);
    return Eigen::VectorXd(L * z);
  };
  Eigen::VectorXd amp = (field().array() * p.amplitude_sd + 1.0).matrix();
  Eigen::VectorXd phase = field() * p.phase_sd;

  out.values.resize(static_cast<Eigen::Index>(N), Si);
  Eigen::VectorXd latent = field() * p.ar_sd;
  double innov = p.ar_sd * std::sqrt(1.0 - p.ar_coef * p.ar_coef);
  const double w = 2.0 * std::numbers::pi / p.period;
  for (std::size_t t = 0; t < N; ++t) {
    if (t > 0) latent = p.ar_coef * latent + innov * field();
    for (Eigen::Index s = 0; s < Si; ++s) {
      double diurnal = amp(s) * std::sin(w * static_cast<double>(t) + phase(s));
      out.values(static_cast<Eigen::Index>(t), s) = diurnal + latent(s) + p.noise_sd * gauss(rng);
    }
    out.timestamps.push_back(p.start + static_cast<std::int64_t>(t) * p.timestep);
  }
  out.timestep = p.timestep;
  return out;
}

}  // namespace stlab::data

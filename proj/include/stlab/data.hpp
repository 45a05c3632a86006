#pragma once

// Spatio-temporal series: ingestion, normalisation, windowing, blocked
// cross-validation, spatial ordering, adjacency and synthetic generation.

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace stlab::data {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Coord {
  double x = 0;
  double y = 0;
};

// values is N x S, time-major.
struct StSeries {
  Matrix values;
  std::vector<std::int64_t> timestamps;  // seconds since the Unix epoch
  std::vector<Coord> coords;
  std::vector<std::string> names;
  std::int64_t timestep = 0;

  std::size_t steps() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t locations() const { return static_cast<std::size_t>(values.cols()); }
  void validate() const;
};

std::int64_t parse_timestamp(const std::string& text);
std::string format_timestamp(std::int64_t seconds);

struct LoadReport {
  std::size_t missing_filled = 0;
};

// Wide CSV (timestamp, one column per location) plus a name,x,y sidecar.
StSeries load_csv(const std::filesystem::path& values_path,
                  const std::filesystem::path& coords_path, LoadReport* report = nullptr);
void write_csv(const StSeries& series, const std::filesystem::path& values_path,
               const std::filesystem::path& coords_path);

// Per-location moments (population standard deviation).
struct ZScore {
  std::vector<double> mean;
  std::vector<double> std;
};

// Fits on rows [row_begin, row_end); names label errors when provided.
ZScore zscore_fit(const Matrix& values, std::size_t row_begin, std::size_t row_end,
                  std::span<const std::string> names = {});
ZScore zscore_fit(const Matrix& values, std::span<const std::string> names = {});
Matrix zscore_apply(const ZScore& z, const Matrix& values);
Matrix zscore_invert(const ZScore& z, const Matrix& values);

struct Sample {
  Matrix x;  // T x S
  Matrix y;  // T' x S
  std::size_t origin = 0;
};

std::size_t window_count(std::size_t steps, std::size_t T, std::size_t T_out);
std::vector<Sample> make_windows(const Matrix& values, std::size_t T, std::size_t T_out);

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;  // exclusive
  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
};

struct FoldSpec {
  std::size_t fold = 0;
  std::vector<IndexRange> train;  // time-ordered, at most two pieces
  IndexRange val;
  IndexRange test;
  IndexRange test_block;  // test block before trimming (equals test)
  std::size_t gap = 0;

  std::vector<std::size_t> train_indices() const;
  std::size_t train_size() const;
};

// Ten contiguous blocks; fold f tests on block f and validates on block f-1
// (cyclic). T+T'-1 windows are dropped on the non-test side of each border
// between different sets, and on the train side of train/validation borders.
std::vector<FoldSpec> blocked_cv(std::size_t num_windows, std::size_t T, std::size_t T_out,
                                 std::size_t folds = 10);
std::string folds_to_json(const std::vector<FoldSpec>& folds);

// Agglomerative average-linkage clustering on Euclidean distance.
struct Merge {
  std::vector<std::size_t> left;   // members, left child holds the smaller minimum index
  std::vector<std::size_t> right;
  double height = 0;
};
std::vector<Merge> agglomerate(std::span<const Coord> coords);
// Leaf order of the dendrogram built by agglomerate().
std::vector<std::size_t> dendrogram_order(std::span<const Coord> coords);

// Symmetrised (OR) binary k-nearest-neighbour adjacency, zero diagonal.
Matrix build_adjacency(std::span<const Coord> coords, std::size_t neighbours = 4);

// Column j of the result is column order[j] of the input (values, coords, names).
StSeries select_columns(const StSeries& series, std::span<const std::size_t> order);

struct Permuted {
  StSeries series;
  std::vector<std::size_t> permutation;
};
Permuted permute_space(const StSeries& series, std::uint64_t seed);

struct SynthParams {
  double period = 24.0;
  double amplitude_sd = 0.3;
  double phase_sd = 0.5;
  double ar_coef = 0.9;
  double ar_sd = 1.0;
  double noise_sd = 0.5;
  std::int64_t start = 1577836800;  // 2020-01-01T00:00:00
  std::int64_t timestep = 3600;
};

// Locations on a ceil(sqrt(S)) grid with unit spacing. Amplitude, phase and the
// AR(1) innovations share a squared-exponential spatial covariance with length
// scale corr_len (independent locations when corr_len == 0).
StSeries synth_generate(std::size_t S, std::size_t N, double corr_len, std::uint64_t seed,
                        const SynthParams& params = {});

}  // namespace stlab::data

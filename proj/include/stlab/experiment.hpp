#pragma once

// Config-driven experiment orchestration: dataset diagnostics, blocked
// cross-validated model runs, the spatial permutation experiment and report
// generation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stlab/data.hpp"
#include "stlab/diagnostics.hpp"
#include "stlab/models.hpp"
#include "stlab/stats.hpp"
#include "stlab/training.hpp"

namespace stlab::experiment {

struct DatasetSpec {
  bool synthetic = true;
  std::filesystem::path values;  // csv source
  std::filesystem::path coords;
  std::size_t synth_locations = 25;
  std::size_t synth_steps = 2000;
  double synth_corr_len = 0.0;
  std::uint64_t synth_seed = 0;
  data::SynthParams synth;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::size_t T = 12;
  std::size_t T_out = 1;
  std::size_t hidden = 8;         // used when target_params == 0
  std::size_t target_params = 0;  // convolutional-stage budget per model
  std::vector<models::ModelKind> models{std::begin(models::kAllKinds),
                                        std::end(models::kAllKinds)};
  std::vector<std::size_t> t_past_grid;  // empty: {2,3,5,7,T}
  std::size_t hops = 3;
  std::size_t neighbours = 4;
  bool ungated_cell_write = false;
  training::TrainConfig train;
  std::uint64_t seed = 0;
  std::size_t folds = 10;
  bool global_zscore = false;
  std::uint64_t permutation_seed = 1;
  std::filesystem::path out_dir = "results";
  std::size_t jobs = 1;
  double alpha = 0.05;
  double atdm_k = 2.0;
  std::size_t atdm_window = 12;
  std::size_t moran_permutations = 999;

  void validate() const;
};

// INI-style "key = value" sections; relative paths resolve against the file's directory.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
std::string config_template();
nlohmann::json config_to_json(const ExperimentConfig& cfg);

// Synthetic or CSV series, columns in dendrogram leaf order.
data::StSeries load_dataset(const ExperimentConfig& cfg);

struct FoldResult {
  std::string model;
  std::size_t fold = 0;
  double rmse = 0;
  double bias = 0;
  double seconds = 0;
  std::size_t params = 0;
  std::string status = "ok";  // ok | diverged
  std::size_t hidden = 0;
  std::size_t t_past = 0;
  std::size_t epochs = 0;
  std::size_t best_epoch = 0;
  std::uint64_t seed = 0;
  training::History history;
};

struct RunResult {
  std::vector<FoldResult> folds;  // (model, fold) order
  std::vector<data::FoldSpec> specs;

  bool all_ok() const;
  stats::ModelScores rmse_by_model(bool ok_only = true) const;
  nlohmann::json summary() const;
};

using Progress = std::function<void(const FoldResult&)>;

// Seed shared by every model in a fold.
std::uint64_t fold_seed(std::uint64_t base, std::size_t fold);

// Trains and evaluates every configured model on every fold of `series`.
RunResult run_models(const ExperimentConfig& cfg, const data::StSeries& series,
                     const Progress& progress = {});

void write_folds_csv(const RunResult& r, const std::filesystem::path& path);
// One <model>_fold<k>.csv training history per fold.
void write_histories(const RunResult& r, const std::filesystem::path& dir);
// Accepts any CSV with model, fold and rmse columns (bias, seconds, params, status optional).
RunResult read_folds_csv(const std::filesystem::path& path);

struct DiagnoseResult {
  diagnostics::MoranSeries moran;
  diagnostics::AtdmSummary atdm;
  nlohmann::json to_json() const;
};
DiagnoseResult diagnose(const ExperimentConfig& cfg, const data::StSeries& series);

struct PermtestResult {
  RunResult original;
  RunResult permuted;
  std::vector<std::size_t> permutation;
  std::vector<stats::StatReport> reports;  // one per model, adjusted jointly
  nlohmann::json to_json() const;
};
// The permuted run sees the columns (with coordinates and names) in shuffled order.
PermtestResult permtest(const ExperimentConfig& cfg, const data::StSeries& series,
                        const Progress& progress = {});

struct PlotData {
  std::vector<std::tuple<std::string, std::size_t, double>> rows;  // model, fold, rmse
  std::vector<std::tuple<std::string, double, double>> annotations;  // model, mean, median
};
PlotData plot_data(const RunResult& r);
void write_plot_data(const PlotData& p, const std::filesystem::path& long_csv,
                     const std::filesystem::path& annotation_csv);

// Model scores from several result files; duplicate model names get a "[k]" suffix.
stats::ModelScores merge_results(const std::vector<RunResult>& results);

}  // namespace stlab::experiment

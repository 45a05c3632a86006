// stlab: command-line front end for dataset diagnostics, cross-validated model
// runs, the spatial permutation experiment and report generation.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stlab/data.hpp"
#include "stlab/error.hpp"
#include "stlab/experiment.hpp"
#include "stlab/stats.hpp"

namespace fs = std::filesystem;
using namespace stlab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitPartial = 1;
constexpr int kExitInput = 2;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::size_t> jobs;
  std::optional<std::uint64_t> seed;
  std::optional<double> alpha;
};

void add_common(CLI::App* cmd, Common& c, bool config_required) {
  auto* opt = cmd->add_option("-c,--config", c.config, "Experiment config file");
  if (config_required) opt->required();
  cmd->add_option("-o,--out", c.out, "Output directory (overrides STLAB_OUT_DIR and the config)");
  cmd->add_option("-j,--jobs", c.jobs, "Parallel model/fold jobs")->check(CLI::PositiveNumber);
  cmd->add_option("-s,--seed", c.seed, "Base seed");
  cmd->add_option("-a,--alpha", c.alpha, "Significance level")->check(CLI::Range(0.0, 1.0));
}

experiment::ExperimentConfig resolve(const Common& c) {
  experiment::ExperimentConfig cfg;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw IoError("config file not found: " + c.config);
    cfg = experiment::load_config(c.config);
  }
  if (c.jobs) cfg.jobs = *c.jobs;
  if (c.seed) cfg.seed = *c.seed;
  if (c.alpha) cfg.alpha = *c.alpha;
  if (!c.out.empty()) {
    cfg.out_dir = c.out;
  } else if (const char* env = std::getenv("STLAB_OUT_DIR"); env && *env) {
    cfg.out_dir = env;
  }
  cfg.validate();
  return cfg;
}

fs::path prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

std::string num(double v) {
  if (!std::isfinite(v)) return "NaN";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void log_fold(const experiment::FoldResult& f) {
  std::cerr << f.model << " fold " << f.fold << ": rmse " << f.rmse << " (" << f.status << ")\n";
}

nlohmann::json seeds_json(const experiment::ExperimentConfig& cfg) {
  nlohmann::json j;
  j["base"] = cfg.seed;
  j["permutation"] = cfg.permutation_seed;
  j["dataset"] = cfg.dataset.synth_seed;
  j["folds"] = nlohmann::json::array();
  for (std::size_t f = 0; f < cfg.folds; ++f) j["folds"].push_back(experiment::fold_seed(cfg.seed, f));
  return j;
}

void write_run(const experiment::ExperimentConfig& cfg, const experiment::RunResult& r,
               const fs::path& dir) {
  prepare_dir(dir);
  experiment::write_folds_csv(r, dir / "folds.csv");
  experiment::write_histories(r, dir / "history");
  auto summary = r.summary();
  summary["config"] = experiment::config_to_json(cfg);
  summary["seeds"] = seeds_json(cfg);
  write_json(dir / "summary.json", summary);
  write_json(dir / "folds.json", nlohmann::json::parse(data::folds_to_json(r.specs)));
}

int cmd_diagnose(const Common& c) {
  auto cfg = resolve(c);
  auto series = experiment::load_dataset(cfg);
  auto d = experiment::diagnose(cfg, series);
  auto dir = prepare_dir(cfg.out_dir);
  auto j = d.to_json();
  j["locations"] = series.locations();
  j["timesteps"] = series.steps();
  j["seeds"] = seeds_json(cfg);
  write_json(dir / "diagnose.json", j);
  std::string csv = "timestep,timestamp,morans_i\n";
  for (std::size_t t = 0; t < d.moran.per_step.size(); ++t)
    csv += std::to_string(t) + "," + data::format_timestamp(series.timestamps[t]) + "," +
           num(d.moran.per_step[t]) + "\n";
  write_text(dir / "morans_i.csv", csv);
  std::cout << j.dump(2) << "\n";
  return kExitOk;
}

int cmd_run(const Common& c) {
  auto cfg = resolve(c);
  auto series = experiment::load_dataset(cfg);
  auto r = experiment::run_models(cfg, series, log_fold);
  write_run(cfg, r, cfg.out_dir);
  std::cout << r.summary().dump(2) << "\n";
  return r.all_ok() ? kExitOk : kExitPartial;
}

int cmd_permtest(const Common& c) {
  auto cfg = resolve(c);
  auto series = experiment::load_dataset(cfg);
  auto r = experiment::permtest(cfg, series, log_fold);
  auto dir = prepare_dir(cfg.out_dir);
  write_run(cfg, r.original, dir / "original");
  write_run(cfg, r.permuted, dir / "permuted");
  auto j = r.to_json();
  j["config"] = experiment::config_to_json(cfg);
  j["seeds"] = seeds_json(cfg);
  write_json(dir / "permtest.json", j);
  auto table = stats::render_table(r.reports);
  write_text(dir / "permtest.txt", table);
  std::cout << table;
  return r.original.all_ok() && r.permuted.all_ok() ? kExitOk : kExitPartial;
}

int cmd_compare(const Common& c, const std::vector<std::string>& inputs) {
  auto cfg = resolve(c);
  std::vector<experiment::RunResult> results;
  for (const auto& p : inputs) results.push_back(experiment::read_folds_csv(p));
  auto cmp = stats::compare_models(experiment::merge_results(results), cfg.alpha);
  auto dir = prepare_dir(cfg.out_dir);
  auto j = cmp.to_json();
  j["inputs"] = inputs;
  write_json(dir / "comparison.json", j);
  auto table = stats::render_comparison(cmp);
  write_text(dir / "comparison.txt", table);
  std::cout << table;
  return kExitOk;
}

int cmd_plotdata(const Common& c, const std::string& input) {
  auto cfg = resolve(c);
  auto p = experiment::plot_data(experiment::read_folds_csv(input));
  auto dir = prepare_dir(cfg.out_dir);
  experiment::write_plot_data(p, dir / "rmse_long.csv", dir / "rmse_annotations.csv");
  return kExitOk;
}

int cmd_synth(const Common& c) {
  auto cfg = resolve(c);
  if (!cfg.dataset.synthetic) throw InputError("synth requires a synthetic [dataset] section");
  auto dir = prepare_dir(cfg.out_dir);
  const auto& d = cfg.dataset;
  auto series = data::synth_generate(d.synth_locations, d.synth_steps, d.synth_corr_len,
                                     d.synth_seed, d.synth);
  data::write_csv(series, dir / "values.csv", dir / "coords.csv");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal forecasting experiments"};
  app.require_subcommand(1);
  Common common;
  std::vector<std::string> compare_inputs;
  std::string plot_input;
  std::string template_path;

  auto* diagnose = app.add_subcommand("diagnose", "Moran's I and ATDM of a dataset");
  add_common(diagnose, common, true);
  auto* run = app.add_subcommand("run", "Train and evaluate models under blocked cross-validation");
  add_common(run, common, true);
  auto* perm = app.add_subcommand("permtest", "Compare original and spatially permuted runs");
  add_common(perm, common, true);
  auto* compare = app.add_subcommand("compare", "Friedman and Wilcoxon tests over folds.csv files");
  add_common(compare, common, false);
  compare->add_option("results", compare_inputs, "folds.csv files")->required()->check(CLI::ExistingFile);
  auto* plot = app.add_subcommand("plotdata", "Plot-ready RMSE distributions from a folds.csv");
  add_common(plot, common, false);
  plot->add_option("results", plot_input, "folds.csv file")->required()->check(CLI::ExistingFile);
  auto* synth = app.add_subcommand("synth", "Write the configured synthetic dataset as CSV");
  add_common(synth, common, true);
  auto* tmpl = app.add_subcommand("template", "Print a config template with every default");
  tmpl->add_option("path", template_path, "Write to this file instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (*diagnose) return cmd_diagnose(common);
    if (*run) return cmd_run(common);
    if (*perm) return cmd_permtest(common);
    if (*compare) return cmd_compare(common, compare_inputs);
    if (*plot) return cmd_plotdata(common, plot_input);
    if (*synth) return cmd_synth(common);
    if (*tmpl) {
      if (template_path.empty()) {
        std::cout << experiment::config_template();
      } else {
        write_text(template_path, experiment::config_template());
      }
      return kExitOk;
    }
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitPartial;
  }
  return kExitOk;
}

#include "stlab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "stlab/error.hpp"

namespace stlab::experiment {

using data::Matrix;
using models::ModelKind;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Windows starting at each index: x = rows [i, i+T), y = rows [i+T, i+T+T').
training::SampleSet make_set(const Matrix& values, std::size_t T, std::size_t T_out,
                             const std::vector<std::size_t>& idx) {
  const auto S = static_cast<std::size_t>(values.cols());
  training::SampleSet set{T, T_out, S, {}, {}};
  set.x.reserve(idx.size() * T * S);
  set.y.reserve(idx.size() * T_out * S);
  const double* base = values.data();
  for (auto i : idx) {
    set.x.insert(set.x.end(), base + i * S, base + (i + T) * S);
    set.y.insert(set.y.end(), base + (i + T) * S, base + (i + T + T_out) * S);
  }
  return set;
}

std::vector<std::size_t> range_indices(const data::IndexRange& r) {
  std::vector<std::size_t> v;
  for (auto i = r.begin; i < r.end; ++i) v.push_back(i);
  return v;
}

// Rows touched by the training windows of a fold.
Matrix training_rows(const Matrix& values, const data::FoldSpec& spec, std::size_t span) {
  std::vector<Eigen::Index> rows;
  for (const auto& r : spec.train) {
    if (r.empty()) continue;
    for (auto t = r.begin; t < r.end + span - 1; ++t) rows.push_back(static_cast<Eigen::Index>(t));
  }
  Matrix out(static_cast<Eigen::Index>(rows.size()), values.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = values.row(rows[k]);
  return out;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  if (n == 0) return std::numeric_limits<double>::quiet_NaN();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

double mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double acc = 0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

nlohmann::json finite_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

struct Task {
  ModelKind kind;
  std::size_t fold;
};

}  // namespace

void ExperimentConfig::validate() const {
  if (T == 0 || T_out == 0) throw InputError("T and T_out must be positive");
  if (models.empty()) throw InputError("at least one model is required");
  if (target_params == 0 && hidden == 0) throw InputError("hidden must be positive");
  if (folds < 3) throw InputError("folds must be at least 3");
  if (jobs == 0) throw InputError("jobs must be positive");
  if (!(alpha > 0.0 && alpha < 1.0)) throw InputError("alpha must lie in (0,1)");
  if (hops == 0) throw InputError("hops must be positive");
  if (neighbours == 0) throw InputError("neighbours must be positive");
  if (!(atdm_k >= 0.0)) throw InputError("atdm_k must be non-negative");
  if (atdm_window == 0) throw InputError("atdm_window must be positive");
  if (moran_permutations == 0) throw InputError("moran_permutations must be positive");
  for (auto c : t_past_grid) {
    if (c == 0 || c > T) throw InputError("t_past_grid entries must lie in [1, T]");
  }
  if (dataset.synthetic) {
    if (dataset.synth_locations == 0 || dataset.synth_steps == 0) {
      throw InputError("synthetic dataset needs positive locations and steps");
    }
    if (!(dataset.synth_corr_len >= 0.0)) throw InputError("synth corr_len must be non-negative");
  } else {
    for (const auto* p : {&dataset.values, &dataset.coords}) {
      if (p->empty()) throw InputError("csv dataset needs both values and coords paths");
      if (!std::filesystem::exists(*p)) throw IoError("file not found: " + p->string());
    }
  }
  train.validate();
}

data::StSeries load_dataset(const ExperimentConfig& cfg) {
  data::StSeries raw;
  if (cfg.dataset.synthetic) {
    raw = data::synth_generate(cfg.dataset.synth_locations, cfg.dataset.synth_steps,
                               cfg.dataset.synth_corr_len, cfg.dataset.synth_seed,
                               cfg.dataset.synth);
  } else {
    raw = data::load_csv(cfg.dataset.values, cfg.dataset.coords);
  }
  if (raw.locations() < 2) return raw;
  auto order = data::dendrogram_order(raw.coords);
  return data::select_columns(raw, order);
}

std::uint64_t fold_seed(std::uint64_t base, std::size_t fold) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(fold) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

RunResult run_models(const ExperimentConfig& cfg, const data::StSeries& series,
                     const Progress& progress) {
  cfg.validate();
  series.validate();
  const std::size_t S = series.locations();
  const std::size_t span = cfg.T + cfg.T_out;
  const auto windows = data::window_count(series.steps(), cfg.T, cfg.T_out);

  RunResult result;
  result.specs = data::blocked_cv(windows, cfg.T, cfg.T_out, cfg.folds);

  Matrix adjacency;
  if (std::find(cfg.models.begin(), cfg.models.end(), ModelKind::GcnLstm) != cfg.models.end()) {
    adjacency = data::build_adjacency(series.coords, cfg.neighbours);
  }

  std::vector<Task> tasks;
  for (auto k : cfg.models)
    for (std::size_t f = 0; f < result.specs.size(); ++f) tasks.push_back({k, f});
  result.folds.resize(tasks.size());

  auto run_task = [&](const Task& task) {
    const auto& spec = result.specs[task.fold];
    const auto seed = fold_seed(cfg.seed, task.fold);
    auto z = cfg.global_zscore ? data::zscore_fit(series.values, series.names)
                               : data::zscore_fit(training_rows(series.values, spec, span), series.names);
    Matrix norm = data::zscore_apply(z, series.values);
    auto train_set = make_set(norm, cfg.T, cfg.T_out, spec.train_indices());
    auto val_set = make_set(norm, cfg.T, cfg.T_out, range_indices(spec.val));
    auto test_idx = range_indices(spec.test);
    auto test_set = make_set(norm, cfg.T, cfg.T_out, test_idx);
    auto truth = make_set(series.values, cfg.T, cfg.T_out, test_idx).y;

    auto mc = models::ModelConfig::make(task.kind, cfg.T, cfg.T_out, S, cfg.hidden, seed);
    if (mc.hops != 0) mc.hops = cfg.hops;
    if (task.kind == ModelKind::GcnLstm) mc.adjacency = adjacency;
    mc.ungated_cell_write = cfg.ungated_cell_write;
    if (cfg.target_params > 0) mc = models::match_hidden_width(cfg.target_params, mc);

    auto tcfg = cfg.train;
    tcfg.seed = seed;
    FoldResult fr;
    fr.model = std::string(models::kind_name(task.kind));
    fr.fold = task.fold;
    fr.seed = seed;
    auto t0 = std::chrono::steady_clock::now();
    try {
      if (task.kind == ModelKind::ACnn) {
        auto grid = cfg.t_past_grid.empty() ? training::default_tpast_grid(cfg.T) : cfg.t_past_grid;
        if (grid.size() == 1) {
          mc.t_past = grid.front();
        } else {
          mc.t_past = training::grid_search_tpast(grid, mc, train_set, val_set, tcfg).best_t_past;
        }
        if (cfg.target_params > 0) mc = models::match_hidden_width(cfg.target_params, mc);
      }
      models::Forecaster f(mc);
      auto hist = training::train(f, train_set, val_set, tcfg);
      auto pred = training::predict(f, test_set);
      for (std::size_t i = 0; i < pred.size(); ++i) {
        std::size_t s = i % S;
        pred[i] = pred[i] * z.std[s] + z.mean[s];
      }
      fr.rmse = stats::rmse(pred, truth);
      fr.bias = stats::bias(pred, truth);
      fr.epochs = hist.epochs.size();
      fr.best_epoch = hist.best_epoch;
      fr.history = std::move(hist);
      fr.params = f.count().total();
    } catch (const training::TrainingDiverged& e) {
      fr.status = "diverged";
      fr.rmse = fr.bias = std::numeric_limits<double>::quiet_NaN();
      fr.epochs = e.history.epochs.size();
      fr.history = e.history;
      fr.params = models::count_parameters(mc).total();
    }
    fr.hidden = mc.H;
    fr.t_past = mc.t_past;
    if (cfg.train.record_timing) {
      fr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return fr;
  };

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&]() {
    while (true) {
      std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      {
        std::lock_guard lock(mu);
        if (failure) return;
      }
      try {
        auto fr = run_task(tasks[i]);
        std::lock_guard lock(mu);
        result.folds[i] = fr;
        if (progress) progress(fr);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  std::size_t n_threads = std::min(cfg.jobs, tasks.size());
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return result;
}

bool RunResult::all_ok() const {
  return std::all_of(folds.begin(), folds.end(), [](const FoldResult& f) { return f.status == "ok"; });
}

stats::ModelScores RunResult::rmse_by_model(bool ok_only) const {
  stats::ModelScores out;
  for (const auto& f : folds) {
    auto& v = out[f.model];
    if (!ok_only || f.status == "ok") v.push_back(f.rmse);
  }
  return out;
}

nlohmann::json RunResult::summary() const {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const FoldResult*>> by_model;
  for (const auto& f : folds) {
    if (!by_model.count(f.model)) order.push_back(f.model);
    by_model[f.model].push_back(&f);
  }
  nlohmann::json models = nlohmann::json::array();
  for (const auto& name : order) {
    std::vector<double> rmse, bias, secs;
    std::size_t params = 0;
    for (const auto* f : by_model[name]) {
      params = f->params;
      if (f->status != "ok") continue;
      rmse.push_back(f->rmse);
      bias.push_back(f->bias);
      secs.push_back(f->seconds);
    }
    nlohmann::json m;
    m["model"] = name;
    m["folds"] = by_model[name].size();
    m["folds_ok"] = rmse.size();
    m["rmse_mean"] = finite_or_null(mean(rmse));
    m["rmse_median"] = finite_or_null(median(rmse));
    m["bias_mean"] = finite_or_null(mean(bias));
    m["seconds_mean"] = finite_or_null(mean(secs));
    m["params"] = params;
    if (rmse.empty()) m["error"] = "no fold finished";
    models.push_back(m);
  }
  nlohmann::json j;
  j["models"] = models;
  j["all_ok"] = all_ok();
  return j;
}

void write_folds_csv(const RunResult& r, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "model,fold,rmse,bias,seconds,params,status,hidden,t_past,epochs,best_epoch,seed\n";
  for (const auto& f : r.folds) {
    out << f.model << ',' << f.fold << ',' << num(f.rmse) << ',' << num(f.bias) << ','
        << num(f.seconds) << ',' << f.params << ',' << f.status << ',' << f.hidden << ','
        << f.t_past << ',' << f.epochs << ',' << f.best_epoch << ',' << f.seed << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

void write_histories(const RunResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (const auto& f : r.folds) {
    char name[64];
    std::snprintf(name, sizeof name, "_fold%02zu.csv", f.fold);
    f.history.write_csv(dir / (f.model + name));
  }
}

RunResult read_folds_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw InputError(path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"model", "fold", "rmse"}) {
    if (!col.count(need)) throw InputError(path.string() + " has no '" + need + "' column");
  }
  auto get = [&](const std::vector<std::string>& cells, const char* key) -> std::string {
    auto it = col.find(key);
    if (it == col.end() || it->second >= cells.size()) return {};
    return cells[it->second];
  };
  auto to_double = [&](const std::string& s) {
    if (s.empty()) return 0.0;
    try {
      return std::stod(s);
    } catch (const std::exception&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };
  RunResult r;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    FoldResult f;
    f.model = get(cells, "model");
    try {
      f.fold = std::stoul(get(cells, "fold"));
    } catch (const std::exception&) {
      throw InputError(path.string() + " line " + std::to_string(lineno) + ": bad fold index");
    }
    f.rmse = to_double(get(cells, "rmse"));
    f.bias = to_double(get(cells, "bias"));
    f.seconds = to_double(get(cells, "seconds"));
    auto params = get(cells, "params");
    f.params = params.empty() ? 0 : std::stoul(params);
    auto status = get(cells, "status");
    f.status = status.empty() ? (std::isfinite(f.rmse) ? "ok" : "diverged") : status;
    r.folds.push_back(f);
  }
  return r;
}

nlohmann::json DiagnoseResult::to_json() const {
  nlohmann::json j;
  j["morans_i"] = finite_or_null(moran.mean_i);
  j["morans_p"] = finite_or_null(moran.p_value);
  j["atdm"] = atdm.atdm;
  j["atdm_adj"] = atdm.atdm_adj;
  j["skipped_timesteps"] = moran.skipped;
  return j;
}

DiagnoseResult diagnose(const ExperimentConfig& cfg, const data::StSeries& series) {
  series.validate();
  auto w = data::build_adjacency(series.coords, cfg.neighbours);
  DiagnoseResult r;
  bool any_varying = false;
  for (Eigen::Index t = 0; t < series.values.rows() && !any_varying; ++t)
    any_varying = series.values.row(t).maxCoeff() > series.values.row(t).minCoeff();
  if (any_varying) {
    r.moran = diagnostics::morans_i_series(series.values, w, cfg.moran_permutations, cfg.seed);
  } else {
    diagnostics::validate_weights(w);
    r.moran.mean_i = r.moran.p_value = std::numeric_limits<double>::quiet_NaN();
    r.moran.per_step.assign(series.steps(), r.moran.mean_i);
    r.moran.skipped = series.steps();
  }
  r.atdm = diagnostics::atdm_dataset(series.values, cfg.atdm_k, cfg.atdm_window);
  return r;
}

nlohmann::json PermtestResult::to_json() const {
  nlohmann::json j;
  j["permutation"] = permutation;
  j["reports"] = nlohmann::json::array();
  for (const auto& r : reports) j["reports"].push_back(r.to_json());
  j["original"] = original.summary();
  j["permuted"] = permuted.summary();
  return j;
}

PermtestResult permtest(const ExperimentConfig& cfg, const data::StSeries& series,
                        const Progress& progress) {
  PermtestResult out;
  out.original = run_models(cfg, series, progress);
  auto perm = data::permute_space(series, cfg.permutation_seed);
  out.permutation = perm.permutation;
  out.permuted = run_models(cfg, perm.series, progress);

  for (auto kind : cfg.models) {
    std::string name(models::kind_name(kind));
    std::vector<double> a, b;
    for (std::size_t i = 0; i < out.original.folds.size(); ++i) {
      const auto& o = out.original.folds[i];
      const auto& p = out.permuted.folds[i];
      if (o.model != name || o.status != "ok" || p.status != "ok") continue;
      a.push_back(o.rmse);
      b.push_back(p.rmse);
    }
    stats::StatReport r;
    if (a.empty()) {
      r.test_name = "Wilcoxon signed-rank";
      r.degenerate = true;
      r.alpha = cfg.alpha;
      r.warnings.push_back("no fold finished in both runs");
    } else {
      r = stats::wilcoxon_signed_rank(a, b, cfg.alpha);
    }
    r.hypothesis = name + " vs " + name + "-perm";
    out.reports.push_back(std::move(r));
  }
  stats::adjust_family(out.reports);
  return out;
}

PlotData plot_data(const RunResult& r) {
  PlotData p;
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> by_model;
  for (const auto& f : r.folds) {
    if (f.status != "ok") continue;
    if (!by_model.count(f.model)) order.push_back(f.model);
    by_model[f.model].push_back(f.rmse);
    p.rows.emplace_back(f.model, f.fold, f.rmse);
  }
  for (const auto& m : order) p.annotations.emplace_back(m, mean(by_model[m]), median(by_model[m]));
  return p;
}

void write_plot_data(const PlotData& p, const std::filesystem::path& long_csv,
                     const std::filesystem::path& annotation_csv) {
  std::ofstream a(long_csv);
  if (!a) throw IoError("cannot write " + long_csv.string());
  a << "model,fold,rmse\n";
  for (const auto& [m, f, v] : p.rows) a << m << ',' << f << ',' << num(v) << '\n';
  std::ofstream b(annotation_csv);
  if (!b) throw IoError("cannot write " + annotation_csv.string());
  b << "model,mean,median\n";
  for (const auto& [m, mu, med] : p.annotations) b << m << ',' << num(mu) << ',' << num(med) << '\n';
  if (!a || !b) throw IoError("failed writing plot data");
}

stats::ModelScores merge_results(const std::vector<RunResult>& results) {
  std::map<std::string, std::size_t> seen;
  for (const auto& r : results)
    for (const auto& [name, s] : r.rmse_by_model()) ++seen[name];
  stats::ModelScores out;
  for (std::size_t k = 0; k < results.size(); ++k) {
    for (auto& [name, s] : results[k].rmse_by_model()) {
      auto key = seen[name] > 1 ? name + " [" + std::to_string(k + 1) + "]" : name;
      out[key] = s;
    }
  }
  return out;
}

}  // namespace stlab::experiment

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "stlab/error.hpp"
#include "stlab/experiment.hpp"

namespace stlab::experiment {

namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>> kKeys{
    {"dataset",
     {"source", "values", "coords", "synth_locations", "synth_steps", "synth_corr_len",
      "synth_seed", "synth_period", "synth_amplitude_sd", "synth_phase_sd", "synth_ar_coef",
      "synth_ar_sd", "synth_noise_sd"}},
    {"model",
     {"models", "T", "T_out", "hidden", "target_params", "t_past_grid", "hops", "neighbours",
      "ungated_cell_write"}},
    {"training",
     {"batch_size", "lr", "momentum", "weight_decay", "rmsprop_alpha", "epsilon", "max_epochs",
      "early_stop_patience", "lr_decay_factor", "lr_decay_patience", "coupled_l2",
      "record_timing"}},
    {"experiment",
     {"seed", "folds", "global_zscore", "permutation_seed", "out", "jobs", "alpha"}},
    {"diagnostics", {"atdm_k", "atdm_window", "moran_permutations"}},
};

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  template <class T>
  void get(const std::string& key, T& target) const {
    auto v = tree_.get_optional<std::string>(pt::ptree::path_type(key, '/'));
    if (!v) return;
    std::string s = boost::algorithm::trim_copy(*v);
    if constexpr (std::is_same_v<T, bool>) {
      auto l = boost::algorithm::to_lower_copy(s);
      if (l == "true" || l == "yes" || l == "on" || l == "1") {
        target = true;
      } else if (l == "false" || l == "no" || l == "off" || l == "0") {
        target = false;
      } else {
        throw InputError("config key " + key + ": expected a boolean, got '" + s + "'");
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      target = s;
    } else {
      std::istringstream in(s);
      T parsed{};
      if (!(in >> parsed) || !(in >> std::ws).eof() ||
          (std::is_unsigned_v<T> && !s.empty() && s.front() == '-')) {
        throw InputError("config key " + key + ": cannot parse '" + s + "'");
      }
      target = parsed;
    }
  }

  std::optional<std::string> raw(const std::string& key) const {
    auto v = tree_.get_optional<std::string>(pt::ptree::path_type(key, '/'));
    if (!v) return std::nullopt;
    return boost::algorithm::trim_copy(*v);
  }

 private:
  const pt::ptree& tree_;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> parts, out;
  boost::algorithm::split(parts, s, boost::is_any_of(","));
  for (auto& p : parts) {
    boost::algorithm::trim(p);
    if (!p.empty()) out.push_back(p);
  }
  return out;
}

std::filesystem::path resolve(const std::string& p, const std::filesystem::path& base) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path;
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw InputError(std::string("config: ") + e.message() + " (line " +
                     std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    auto it = kKeys.find(section);
    if (it == kKeys.end()) {
      if (body.empty()) throw InputError("config: key '" + section + "' outside any section");
      throw InputError("config: unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      if (!it->second.count(key)) throw InputError("config: unknown key " + section + "." + key);
    }
  }

  ExperimentConfig c;
  Reader r(tree);
  auto& d = c.dataset;
  if (auto src = r.raw("dataset/source")) {
    auto s = boost::algorithm::to_lower_copy(*src);
    if (s == "synth" || s == "synthetic") {
      d.synthetic = true;
    } else if (s == "csv") {
      d.synthetic = false;
    } else {
      throw InputError("config key dataset.source must be 'synth' or 'csv'");
    }
  }
  if (auto v = r.raw("dataset/values")) d.values = resolve(*v, base_dir);
  if (auto v = r.raw("dataset/coords")) d.coords = resolve(*v, base_dir);
  r.get("dataset/synth_locations", d.synth_locations);
  r.get("dataset/synth_steps", d.synth_steps);
  r.get("dataset/synth_corr_len", d.synth_corr_len);
  r.get("dataset/synth_seed", d.synth_seed);
  r.get("dataset/synth_period", d.synth.period);
  r.get("dataset/synth_amplitude_sd", d.synth.amplitude_sd);
  r.get("dataset/synth_phase_sd", d.synth.phase_sd);
  r.get("dataset/synth_ar_coef", d.synth.ar_coef);
  r.get("dataset/synth_ar_sd", d.synth.ar_sd);
  r.get("dataset/synth_noise_sd", d.synth.noise_sd);

  if (auto v = r.raw("model/models")) {
    c.models.clear();
    auto names = split_list(*v);
    if (names.size() == 1 && boost::algorithm::to_lower_copy(names[0]) == "all") {
      c.models.assign(std::begin(models::kAllKinds), std::end(models::kAllKinds));
    } else {
      for (const auto& n : names) c.models.push_back(models::parse_kind(n));
    }
  }
  r.get("model/T", c.T);
  r.get("model/T_out", c.T_out);
  r.get("model/hidden", c.hidden);
  r.get("model/target_params", c.target_params);
  if (auto v = r.raw("model/t_past_grid")) {
    c.t_past_grid.clear();
    for (const auto& s : split_list(*v)) {
      try {
        c.t_past_grid.push_back(std::stoul(s));
      } catch (const std::exception&) {
        throw InputError("config key model.t_past_grid: cannot parse '" + s + "'");
      }
    }
  }
  r.get("model/hops", c.hops);
  r.get("model/neighbours", c.neighbours);
  r.get("model/ungated_cell_write", c.ungated_cell_write);

  auto& t = c.train;
  r.get("training/batch_size", t.batch_size);
  r.get("training/lr", t.lr);
  r.get("training/momentum", t.momentum);
  r.get("training/weight_decay", t.weight_decay);
  r.get("training/rmsprop_alpha", t.rmsprop_alpha);
  r.get("training/epsilon", t.epsilon);
  r.get("training/max_epochs", t.max_epochs);
  r.get("training/early_stop_patience", t.early_stop_patience);
  r.get("training/lr_decay_factor", t.lr_decay_factor);
  r.get("training/lr_decay_patience", t.lr_decay_patience);
  r.get("training/coupled_l2", t.coupled_l2);
  r.get("training/record_timing", t.record_timing);

  r.get("experiment/seed", c.seed);
  r.get("experiment/folds", c.folds);
  r.get("experiment/global_zscore", c.global_zscore);
  r.get("experiment/permutation_seed", c.permutation_seed);
  if (auto v = r.raw("experiment/out")) c.out_dir = resolve(*v, base_dir);
  r.get("experiment/jobs", c.jobs);
  r.get("experiment/alpha", c.alpha);

  r.get("diagnostics/atdm_k", c.atdm_k);
  r.get("diagnostics/atdm_window", c.atdm_window);
  r.get("diagnostics/moran_permutations", c.moran_permutations);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path());
}

std::string config_template() {
  return R"(# stlab experiment configuration. Every key is optional; defaults shown.

[dataset]
# synth | csv
source = synth
# csv: wide values file (timestamp + one column per location) and name,x,y sidecar
# values = data/values.csv
# coords = data/coords.csv
synth_locations = 25
synth_steps = 2000
# spatial correlation length in grid units; 0 gives independent locations
synth_corr_len = 0
synth_seed = 0
synth_period = 24
synth_amplitude_sd = 0.3
synth_phase_sd = 0.5
synth_ar_coef = 0.9
synth_ar_sd = 1.0
synth_noise_sd = 0.5

[model]
# comma list of A-CNN, CNN, A-ConvLSTM, ConvLSTM, A-GCN-LSTM, GCN-LSTM, or all
models = all
T = 12
T_out = 1
hidden = 8
# when > 0, each model gets the largest hidden width whose convolutional stage fits
target_params = 0
# A-CNN lags searched on the validation block; empty means 2,3,5,7,T
t_past_grid =
hops = 3
neighbours = 4
# cell state adds the candidate without the input gate
ungated_cell_write = false

[training]
batch_size = 256
lr = 0.001
momentum = 0.9
weight_decay = 0.001
rmsprop_alpha = 0.99
epsilon = 1e-08
max_epochs = 200
early_stop_patience = 10
lr_decay_factor = 0.5
lr_decay_patience = 5
coupled_l2 = false
# wall-clock per epoch and fold; off keeps outputs bit-reproducible
record_timing = false

[experiment]
seed = 0
folds = 10
global_zscore = false
permutation_seed = 1
out = results
jobs = 1
alpha = 0.05

[diagnostics]
atdm_k = 2
atdm_window = 12
moran_permutations = 999
)";
}

nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  auto& d = j["dataset"];
  d["source"] = c.dataset.synthetic ? "synth" : "csv";
  if (c.dataset.synthetic) {
    d["synth_locations"] = c.dataset.synth_locations;
    d["synth_steps"] = c.dataset.synth_steps;
    d["synth_corr_len"] = c.dataset.synth_corr_len;
    d["synth_seed"] = c.dataset.synth_seed;
    d["synth_period"] = c.dataset.synth.period;
    d["synth_amplitude_sd"] = c.dataset.synth.amplitude_sd;
    d["synth_phase_sd"] = c.dataset.synth.phase_sd;
    d["synth_ar_coef"] = c.dataset.synth.ar_coef;
    d["synth_ar_sd"] = c.dataset.synth.ar_sd;
    d["synth_noise_sd"] = c.dataset.synth.noise_sd;
  } else {
    d["values"] = c.dataset.values.string();
    d["coords"] = c.dataset.coords.string();
  }
  auto& m = j["model"];
  m["models"] = nlohmann::json::array();
  for (auto k : c.models) m["models"].push_back(std::string(models::kind_name(k)));
  m["T"] = c.T;
  m["T_out"] = c.T_out;
  m["hidden"] = c.hidden;
  m["target_params"] = c.target_params;
  m["t_past_grid"] = c.t_past_grid;
  m["hops"] = c.hops;
  m["neighbours"] = c.neighbours;
  m["ungated_cell_write"] = c.ungated_cell_write;
  auto& t = j["training"];
  t["batch_size"] = c.train.batch_size;
  t["lr"] = c.train.lr;
  t["momentum"] = c.train.momentum;
  t["weight_decay"] = c.train.weight_decay;
  t["rmsprop_alpha"] = c.train.rmsprop_alpha;
  t["epsilon"] = c.train.epsilon;
  t["max_epochs"] = c.train.max_epochs;
  t["early_stop_patience"] = c.train.early_stop_patience;
  t["lr_decay_factor"] = c.train.lr_decay_factor;
  t["lr_decay_patience"] = c.train.lr_decay_patience;
  t["coupled_l2"] = c.train.coupled_l2;
  t["record_timing"] = c.train.record_timing;
  auto& e = j["experiment"];
  e["seed"] = c.seed;
  e["folds"] = c.folds;
  e["global_zscore"] = c.global_zscore;
  e["permutation_seed"] = c.permutation_seed;
  e["alpha"] = c.alpha;
  auto& g = j["diagnostics"];
  g["atdm_k"] = c.atdm_k;
  g["atdm_window"] = c.atdm_window;
  g["moran_permutations"] = c.moran_permutations;
  return j;
}

}  // namespace stlab::experiment

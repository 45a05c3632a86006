// End-to-end checks of the stlab executable: exit codes, output files and determinism.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kBinary = STLAB_CLI_PATH;

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("stlab_cli_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run(const std::string& args, const fs::path& log) {
  std::string cmd = "\"" + kBinary.string() + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

std::vector<std::vector<std::string>> read_rows(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

const char* kSmallConfig = R"(
[dataset]
source = synth
synth_locations = 6
synth_steps = 400
synth_corr_len = 1
synth_seed = 3

[model]
models = A-CNN, GCN-LSTM
T = 4
hidden = 4
t_past_grid = 2

[training]
batch_size = 64
max_epochs = 2

[experiment]
seed = 11
)";

}  // namespace

TEST_CASE("template round-trips through a run") {
  auto dir = scratch("template");
  CHECK(run("template \"" + (dir / "t.ini").string() + "\"", dir / "log") == 0);
  auto text = slurp(dir / "t.ini");
  CHECK(text.find("[dataset]") != std::string::npos);
  CHECK(text.find("[training]") != std::string::npos);
  CHECK(run("synth --config \"" + (dir / "t.ini").string() + "\" --out \"" + dir.string() + "\"",
            dir / "log") == 0);
  CHECK(fs::exists(dir / "values.csv"));
  CHECK(fs::exists(dir / "coords.csv"));
}

TEST_CASE("configuration and IO errors exit with code 2 and name the path") {
  auto dir = scratch("errors");
  auto missing = (dir / "nope.ini").string();
  CHECK(run("run --config \"" + missing + "\"", dir / "log") == 2);
  CHECK(slurp(dir / "log").find("nope.ini") != std::string::npos);

  spit(dir / "bad.ini", "[model]\nmodels = A-CNN\nunknown_key = 1\n");
  CHECK(run("run --config \"" + (dir / "bad.ini").string() + "\"", dir / "log") == 2);
  CHECK(slurp(dir / "log").find("unknown_key") != std::string::npos);

  spit(dir / "csv.ini", "[dataset]\nsource = csv\nvalues = missing_values.csv\ncoords = c.csv\n");
  CHECK(run("diagnose --config \"" + (dir / "csv.ini").string() + "\" --out \"" + dir.string() + "\"",
            dir / "log") == 2);
  CHECK(slurp(dir / "log").find("missing_values.csv") != std::string::npos);

  CHECK(run("frobnicate", dir / "log") == 2);
  CHECK(run("compare \"" + (dir / "absent.csv").string() + "\"", dir / "log") == 2);
}

TEST_CASE("run writes one row per model and fold and reruns bit-exactly") {
  auto dir = scratch("run");
  spit(dir / "cfg.ini", kSmallConfig);
  auto cfg = (dir / "cfg.ini").string();
  REQUIRE(run("run --config \"" + cfg + "\" --out \"" + (dir / "a").string() + "\"", dir / "log") == 0);
  REQUIRE(run("run --config \"" + cfg + "\" --out \"" + (dir / "b").string() + "\" --jobs 2", dir / "log") == 0);

  auto rows = read_rows(dir / "a" / "folds.csv");
  REQUIRE(rows.size() == 1 + 2 * 10);
  CHECK(rows[0][0] == "model");
  CHECK(rows[0][1] == "fold");
  CHECK(rows[0][2] == "rmse");
  CHECK(rows[0][3] == "bias");
  CHECK(rows[0][4] == "seconds");
  CHECK(rows[0][5] == "params");
  for (const auto* f : {"folds.csv", "summary.json", "folds.json"})
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

  auto summary = nlohmann::json::parse(slurp(dir / "a" / "summary.json"));
  CHECK(summary["seeds"]["base"] == 11);
  REQUIRE(summary["models"].size() == 2);
  CHECK(summary["models"][0]["model"] == "A-CNN");
  CHECK(summary["models"][1]["model"] == "GCN-LSTM");
  auto history = read_rows(dir / "a" / "history" / "GCN-LSTM_fold09.csv");
  REQUIRE(history.size() >= 2);
  CHECK(history[0] == std::vector<std::string>{"epoch", "train_mse", "val_mse", "lr", "wall_ms"});

  // STLAB_OUT_DIR applies when --out is absent.
  auto env_dir = dir / "env";
  std::string cmd = "STLAB_OUT_DIR=\"" + env_dir.string() + "\" \"" + kBinary.string() + "\" run --config \"" +
                    cfg + "\" > \"" + (dir / "log").string() + "\" 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(slurp(env_dir / "folds.csv") == slurp(dir / "a" / "folds.csv"));

  SUBCASE("plotdata annotations are the fold means and medians") {
    REQUIRE(run("plotdata \"" + (dir / "a" / "folds.csv").string() + "\" --out \"" + (dir / "p").string() + "\"",
                dir / "log") == 0);
    std::map<std::string, std::vector<double>> by_model;
    for (std::size_t i = 1; i < rows.size(); ++i) by_model[rows[i][0]].push_back(std::stod(rows[i][2]));
    auto ann = read_rows(dir / "p" / "rmse_annotations.csv");
    REQUIRE(ann.size() == 3);
    CHECK(ann[0] == std::vector<std::string>{"model", "mean", "median"});
    for (std::size_t i = 1; i < ann.size(); ++i) {
      auto v = by_model.at(ann[i][0]);
      double sum = 0;
      for (double x : v) sum += x;
      std::sort(v.begin(), v.end());
      CHECK(std::abs(std::stod(ann[i][1]) - sum / v.size()) <= 1e-12);
      CHECK(std::stod(ann[i][2]) == doctest::Approx(0.5 * (v[4] + v[5])).epsilon(1e-15));
    }
    CHECK(read_rows(dir / "p" / "rmse_long.csv").size() == rows.size());

    REQUIRE(run("compare \"" + (dir / "p" / "rmse_long.csv").string() + "\" --out \"" + (dir / "c1").string() + "\"",
                dir / "log") == 0);
    REQUIRE(run("compare \"" + (dir / "a" / "folds.csv").string() + "\" --out \"" + (dir / "c2").string() + "\"",
                dir / "log") == 0);
    CHECK(slurp(dir / "c1" / "comparison.txt") == slurp(dir / "c2" / "comparison.txt"));
    auto c1 = nlohmann::json::parse(slurp(dir / "c1" / "comparison.json"));
    auto c2 = nlohmann::json::parse(slurp(dir / "c2" / "comparison.json"));
    CHECK(c1["friedman"] == c2["friedman"]);
  }

  SUBCASE("a result file compared with itself gives Friedman p = 1") {
    std::string single;
    for (const auto& line : read_rows(dir / "a" / "folds.csv")) {
      if (line[0] != "model" && line[0] != "A-CNN") continue;
      for (std::size_t i = 0; i < line.size(); ++i) single += (i ? "," : "") + line[i];
      single += "\n";
    }
    spit(dir / "single.csv", single);
    auto f = (dir / "single.csv").string();
    REQUIRE(run("compare \"" + f + "\" \"" + f + "\" --out \"" + (dir / "c").string() + "\"", dir / "log") == 0);
    auto cmp = nlohmann::json::parse(slurp(dir / "c" / "comparison.json"));
    CHECK(cmp["friedman"]["p_raw"].get<double>() == doctest::Approx(1.0));
    auto table = slurp(dir / "c" / "comparison.txt");
    auto a = table.find("p_unajusted"), b = table.find("p_holm"), c = table.find("p_BH");
    REQUIRE(a != std::string::npos);
    CHECK(a < b);
    CHECK(b < c);
  }
}

TEST_CASE("compare reports a constructed dominant model") {
  auto dir = scratch("compare");
  std::string csv = "model,fold,rmse\n";
  for (int f = 0; f < 10; ++f) {
    csv += "good," + std::to_string(f) + "," + std::to_string(1.0 + 0.01 * f) + "\n";
    csv += "mid," + std::to_string(f) + "," + std::to_string(1.5 + 0.02 * f) + "\n";
    csv += "bad," + std::to_string(f) + "," + std::to_string(2.0 + 0.015 * f) + "\n";
  }
  spit(dir / "r.csv", csv);
  REQUIRE(run("compare \"" + (dir / "r.csv").string() + "\" --out \"" + dir.string() + "\"", dir / "log") == 0);
  auto cmp = nlohmann::json::parse(slurp(dir / "comparison.json"));
  CHECK(cmp["friedman"]["reject"] == true);
  CHECK(cmp["friedman"]["p_raw"].get<double>() < 1e-3);
}

TEST_CASE("diagnose on identical columns reports zero ATDM") {
  auto dir = scratch("diagnose");
  std::string values = "timestamp,a,b,c,d,e\n";
  for (int t = 0; t < 60; ++t) {
    char ts[32];
    std::snprintf(ts, sizeof ts, "2020-01-%02d %02d:00:00", 1 + t / 24, t % 24);
    double v = std::sin(0.3 * t) + 0.01 * t;
    values += ts;
    for (int s = 0; s < 5; ++s) values += "," + std::to_string(v);
    values += "\n";
  }
  spit(dir / "v.csv", values);
  spit(dir / "c.csv", "name,x,y\na,0,0\nb,1,0\nc,2,0\nd,3,0\ne,4,0\n");
  spit(dir / "cfg.ini", "[dataset]\nsource = csv\nvalues = v.csv\ncoords = c.csv\n[model]\nneighbours = 2\n");
  REQUIRE(run("diagnose --config \"" + (dir / "cfg.ini").string() + "\" --out \"" + dir.string() + "\"",
              dir / "log") == 0);
  auto j = nlohmann::json::parse(slurp(dir / "diagnose.json"));
  CHECK(j["atdm"].get<double>() == 0.0);
  CHECK(j["atdm_adj"].get<double>() == 0.0);
  CHECK(j["skipped_timesteps"] == 60);
  CHECK(j["morans_i"].is_null());
  auto rows = read_rows(dir / "morans_i.csv");
  CHECK(rows.size() == 61);
  CHECK(rows[0] == std::vector<std::string>{"timestep", "timestamp", "morans_i"});
}

TEST_CASE("diagnose on uncorrelated synthetic data finds little autocorrelation") {
  auto dir = scratch("diag_synth");
  spit(dir / "cfg.ini",
       "[dataset]\nsynth_locations = 25\nsynth_steps = 300\nsynth_corr_len = 0\nsynth_seed = 5\n"
       "[diagnostics]\nmoran_permutations = 99\n");
  REQUIRE(run("diagnose --config \"" + (dir / "cfg.ini").string() + "\" --out \"" + dir.string() + "\"",
              dir / "log") == 0);
  auto j = nlohmann::json::parse(slurp(dir / "diagnose.json"));
  CHECK(std::abs(j["morans_i"].get<double>()) < 0.15);
  auto first = slurp(dir / "diagnose.json");
  REQUIRE(run("diagnose --config \"" + (dir / "cfg.ini").string() + "\" --out \"" + dir.string() + "\"",
              dir / "log") == 0);
  CHECK(slurp(dir / "diagnose.json") == first);
}

TEST_CASE("every model learns a linear target") {
  // Sinusoids obey an exact linear recurrence, so each forecaster can fit them.
  auto dir = scratch("linear");
  std::string values = "timestamp,a,b,c,d,e,f\n";
  for (int t = 0; t < 720; ++t) {
    char ts[32];
    std::snprintf(ts, sizeof ts, "2021-03-%02d %02d:00:00", 1 + t / 24, t % 24);
    values += ts;
    for (int s = 0; s < 6; ++s) values += "," + std::to_string(std::sqrt(2.0) * std::sin(0.25 * t + 0.7 * s));
    values += "\n";
  }
  spit(dir / "v.csv", values);
  spit(dir / "c.csv", "name,x,y\na,0,0\nb,1,0\nc,2,0\nd,3,0\ne,4,0\nf,5,0\n");
  spit(dir / "cfg.ini",
       "[dataset]\nsource = csv\nvalues = v.csv\ncoords = c.csv\n"
       "[model]\nT = 4\nhidden = 8\nt_past_grid = 4\n"
       "[training]\nbatch_size = 32\nmax_epochs = 30\nlr = 0.003\n"
       "[experiment]\nseed = 1\n");
  REQUIRE(run("run --config \"" + (dir / "cfg.ini").string() + "\" --out \"" + dir.string() + "\"",
              dir / "log") == 0);
  auto j = nlohmann::json::parse(slurp(dir / "summary.json"));
  REQUIRE(j["models"].size() == 6);
  for (auto& [name, m] : j["models"].items()) {
    INFO(name);
    CHECK(m["rmse_mean"].get<double>() < 0.2);
  }
}

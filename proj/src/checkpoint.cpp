#include <bit>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "stlab/error.hpp"
#include "stlab/models.hpp"

namespace stlab::models {

namespace {

constexpr const char* kFormat = "stlab-checkpoint";
constexpr int kVersion = 1;

std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
    return r;
  }
  return v;
}

nlohmann::json config_json(const ModelConfig& c) {
  nlohmann::json j;
  j["kind"] = std::string(kind_name(c.kind));
  j["T"] = c.T;
  j["T_out"] = c.T_out;
  j["S"] = c.S;
  j["H"] = c.H;
  j["t_past"] = c.t_past;
  j["hops"] = c.hops;
  j["seed"] = c.seed;
  j["ungated_cell_write"] = c.ungated_cell_write;
  if (c.adjacency.size() != 0) {
    auto rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < c.adjacency.rows(); ++i) {
      std::string row;
      for (Eigen::Index k = 0; k < c.adjacency.cols(); ++k) row += c.adjacency(i, k) != 0 ? '1' : '0';
      rows.push_back(row);
    }
    j["adjacency"] = rows;
  } else {
    j["adjacency"] = nullptr;
  }
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.kind = parse_kind(j.at("kind").get<std::string>());
  c.T = j.at("T").get<std::size_t>();
  c.T_out = j.at("T_out").get<std::size_t>();
  c.S = j.at("S").get<std::size_t>();
  c.H = j.at("H").get<std::size_t>();
  c.t_past = j.at("t_past").get<std::size_t>();
  c.hops = j.at("hops").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.ungated_cell_write = j.value("ungated_cell_write", false);
  if (!j.at("adjacency").is_null()) {
    const auto& rows = j.at("adjacency");
    auto n = static_cast<Eigen::Index>(rows.size());
    c.adjacency = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      auto row = rows[static_cast<std::size_t>(i)].get<std::string>();
      if (static_cast<Eigen::Index>(row.size()) != n) throw InputError("checkpoint adjacency is not square");
      for (Eigen::Index k = 0; k < n; ++k) c.adjacency(i, k) = row[static_cast<std::size_t>(k)] == '1' ? 1.0 : 0.0;
    }
  }
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, Forecaster& f, const CheckpointMeta& meta) {
  nlohmann::json header;
  header["format"] = kFormat;
  header["version"] = kVersion;
  header["config"] = config_json(f.config());
  header["seed"] = meta.seed;
  header["epoch"] = meta.epoch;
  auto tensors = nlohmann::json::array();
  for (const auto& p : f.parameters()) tensors.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  for (const auto& b : f.buffers()) tensors.push_back({{"name", b.name}, {"shape", {b.values->size()}}});
  header["tensors"] = tensors;

  auto flat = f.state();
  header["count"] = flat.size();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for (double v : flat) {
    auto bits = to_le(std::bit_cast<std::uint64_t>(v));
    char buf[8];
    std::memcpy(buf, &bits, 8);
    out.write(buf, 8);
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Forecaster load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint header is not valid JSON: " + std::string(e.what()));
  }
  if (header.value("format", "") != kFormat || header.value("version", 0) != kVersion) {
    throw InputError("unsupported checkpoint format in " + path.string());
  }
  Forecaster f(config_from_json(header.at("config")));
  auto count = header.at("count").get<std::size_t>();
  std::vector<double> flat(count);
  for (auto& v : flat) {
    char buf[8];
    if (!in.read(buf, 8)) throw InputError("checkpoint payload truncated: " + path.string());
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    v = std::bit_cast<double>(to_le(bits));
  }
  f.load_state(flat);
  if (meta) {
    meta->seed = header.at("seed").get<std::uint64_t>();
    meta->epoch = header.at("epoch").get<std::size_t>();
  }
  return f;
}

}  // namespace stlab::models

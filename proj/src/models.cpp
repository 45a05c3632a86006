#include "stlab/models.hpp"

#include <algorithm>

#include "stlab/error.hpp"

namespace stlab::models {

using layers::Initializer;

namespace {

constexpr std::size_t kDefaultHops = 3;
constexpr std::size_t kMaxHidden = 1 << 16;

}  // namespace

std::string_view kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::ACnn: return "A-CNN";
    case ModelKind::Cnn: return "CNN";
    case ModelKind::AConvLstm: return "A-ConvLSTM";
    case ModelKind::ConvLstm: return "ConvLSTM";
    case ModelKind::AGcnLstm: return "A-GCN-LSTM";
    case ModelKind::GcnLstm: return "GCN-LSTM";
  }
  return "?";
}

ModelKind parse_kind(std::string_view name) {
  auto lower = [](std::string_view s) {
    std::string out;
    for (char c : s) {
      if (c == '-' || c == '_' || c == ' ') continue;
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    return out;
  };
  auto key = lower(name);
  for (auto k : kAllKinds) {
    if (lower(kind_name(k)) == key) return k;
  }
  throw InputError("unknown model kind '" + std::string(name) + "'");
}

bool is_agnostic(ModelKind kind) {
  return kind == ModelKind::ACnn || kind == ModelKind::AConvLstm || kind == ModelKind::AGcnLstm;
}

ModelKind twin(ModelKind kind) {
  switch (kind) {
    case ModelKind::ACnn: return ModelKind::Cnn;
    case ModelKind::Cnn: return ModelKind::ACnn;
    case ModelKind::AConvLstm: return ModelKind::ConvLstm;
    case ModelKind::ConvLstm: return ModelKind::AConvLstm;
    case ModelKind::AGcnLstm: return ModelKind::GcnLstm;
    case ModelKind::GcnLstm: return ModelKind::AGcnLstm;
  }
  return kind;
}

ModelConfig ModelConfig::make(ModelKind kind, std::size_t T, std::size_t T_out, std::size_t S,
                              std::size_t H, std::uint64_t seed) {
  ModelConfig c;
  c.kind = kind;
  c.T = T;
  c.T_out = T_out;
  c.S = S;
  c.H = H;
  c.seed = seed;
  if (kind == ModelKind::ACnn) c.t_past = std::min<std::size_t>(3, T);
  if (kind == ModelKind::AGcnLstm || kind == ModelKind::GcnLstm) c.hops = kDefaultHops;
  return c;
}

void ModelConfig::validate() const {
  auto name = std::string(kind_name(kind));
  if (T == 0 || T_out == 0 || S == 0 || H == 0) {
    throw InputError(name + ": T, T', S and H must all be positive");
  }
  if (kind == ModelKind::ACnn) {
    if (t_past == 0 || t_past > T) {
      throw InputError(name + ": t_past must be in [1, T], got " + std::to_string(t_past));
    }
  } else if (t_past != 0) {
    throw InputError(name + ": t_past applies to A-CNN only");
  }
  bool graph = kind == ModelKind::AGcnLstm || kind == ModelKind::GcnLstm;
  if (graph && hops == 0) throw InputError(name + ": hop order k must be positive");
  if (!graph && hops != 0) throw InputError(name + ": hop order applies to GCN variants only");
  if (kind == ModelKind::GcnLstm) {
    if (adjacency.rows() != static_cast<Eigen::Index>(S) ||
        adjacency.cols() != static_cast<Eigen::Index>(S)) {
      throw InputError(name + ": adjacency must be " + std::to_string(S) + "x" +
                       std::to_string(S));
    }
    for (Eigen::Index i = 0; i < adjacency.rows(); ++i) {
      if (adjacency(i, i) != 0.0) throw InputError(name + ": adjacency diagonal must be zero");
      for (Eigen::Index j = 0; j < adjacency.cols(); ++j) {
        double v = adjacency(i, j);
        if (v != 0.0 && v != 1.0) throw InputError(name + ": adjacency must be binary");
        if (v != adjacency(j, i)) throw InputError(name + ": adjacency must be symmetric");
      }
    }
  } else if (adjacency.size() != 0) {
    throw InputError(name + ": adjacency applies to GCN-LSTM only");
  }
}

// ---------------------------------------------------------------------------

class ConvStage {
 public:
  virtual ~ConvStage() = default;
  // [B,T,S] -> [B,H,T,S]
  virtual Tensor forward(const Tensor& x, Mode mode) = 0;
  virtual void collect(std::vector<NamedParam>& out) const = 0;
  virtual void collect_buffers(std::vector<NamedBuffer>&) {}
};

namespace {

Tensor as_image(const Tensor& x) {
  return ops::reshape(x, {x.dim(0), 1, x.dim(1), x.dim(2)});
}

class ACnnStage : public ConvStage {
 public:
  ACnnStage(const ModelConfig& c, Initializer& init)
      : block_(1, c.H, c.t_past, c.S, init), norm_(c.H) {}
  Tensor forward(const Tensor& x, Mode mode) override {
    return ops::relu(norm_.forward(block_.forward(as_image(x)), mode));
  }
  void collect(std::vector<NamedParam>& out) const override {
    block_.collect(out, "conv.");
    norm_.collect(out, "norm.");
  }
  void collect_buffers(std::vector<NamedBuffer>& out) override {
    norm_.collect_buffers(out, "norm.");
  }

 private:
  layers::AgnosticConvBlock block_;
  layers::BatchNorm norm_;
};

class CnnStage : public ConvStage {
 public:
  CnnStage(const ModelConfig& c, Initializer& init)
      : kernel_(init.uniform({c.H, 1, 3, 3}, 9)), bias_(init.uniform({c.H}, 9)), norm_(c.H) {}
  Tensor forward(const Tensor& x, Mode mode) override {
    auto y = ops::conv2d(as_image(x), kernel_, bias_, ops::Padding{1, 1, 1, 1});
    return ops::relu(norm_.forward(y, mode));
  }
  void collect(std::vector<NamedParam>& out) const override {
    out.push_back({"conv.kernel", kernel_});
    out.push_back({"conv.bias", bias_});
    norm_.collect(out, "norm.");
  }
  void collect_buffers(std::vector<NamedBuffer>& out) override {
    norm_.collect_buffers(out, "norm.");
  }

 private:
  Tensor kernel_, bias_;
  layers::BatchNorm norm_;
};

class ConvLstmStage : public ConvStage {
 public:
  ConvLstmStage(const ModelConfig& c, layers::GateConv gates, Initializer& init)
      : cell_(gates, 1, c.H, c.S, init, c.ungated_cell_write) {}
  Tensor forward(const Tensor& x, Mode) override {
    auto img = as_image(x);
    auto state = cell_.initial_state(x.dim(0), 1);
    std::vector<Tensor> hs;
    for (std::size_t t = 0; t < x.dim(1); ++t) {
      state = cell_.step(ops::slice(img, 2, t, t + 1), state);
      hs.push_back(state.h);
    }
    return ops::relu(ops::concat(hs, 2));
  }
  void collect(std::vector<NamedParam>& out) const override { cell_.collect(out, "conv."); }

 private:
  layers::ConvLstmCell cell_;
};

class GcnLstmStage : public ConvStage {
 public:
  GcnLstmStage(const ModelConfig& c, const Matrix& adjacency, Initializer& init)
      : H_(c.H),
        gconv_(adjacency, c.hops, 1, c.H, init),
        lstm_(c.H, c.H, init, c.ungated_cell_write) {}
  Tensor forward(const Tensor& x, Mode) override {
    std::size_t B = x.dim(0), T = x.dim(1), S = x.dim(2);
    auto state = lstm_.initial_state(B, S);
    std::vector<Tensor> hs;
    for (std::size_t t = 0; t < T; ++t) {
      auto x_t = ops::reshape(ops::slice(x, 1, t, t + 1), {B, S, 1});
      auto g = ops::relu(gconv_.forward(x_t));
      state = lstm_.step(g, state);
      hs.push_back(ops::reshape(state.h, {B, 1, S, H_}));
    }
    auto seq = ops::concat(hs, 1);  // [B,T,S,H]
    return ops::transpose(ops::transpose(seq, 1, 3), 2, 3);
  }
  void collect(std::vector<NamedParam>& out) const override {
    gconv_.collect(out, "conv.graph.");
    lstm_.collect(out, "conv.lstm.");
  }

 private:
  std::size_t H_;
  layers::GraphConvLayer gconv_;
  layers::NodeLstm lstm_;
};

std::unique_ptr<ConvStage> make_stage(const ModelConfig& c, Initializer& init) {
  switch (c.kind) {
    case ModelKind::ACnn: return std::make_unique<ACnnStage>(c, init);
    case ModelKind::Cnn: return std::make_unique<CnnStage>(c, init);
    case ModelKind::AConvLstm:
      return std::make_unique<ConvLstmStage>(c, layers::GateConv::Agnostic, init);
    case ModelKind::ConvLstm:
      return std::make_unique<ConvLstmStage>(c, layers::GateConv::Spatial3x3, init);
    case ModelKind::AGcnLstm:
      return std::make_unique<GcnLstmStage>(
          c, Matrix::Identity(static_cast<Eigen::Index>(c.S), static_cast<Eigen::Index>(c.S)),
          init);
    case ModelKind::GcnLstm: return std::make_unique<GcnLstmStage>(c, c.adjacency, init);
  }
  throw InputError("unknown model kind");
}

}  // namespace

// ---------------------------------------------------------------------------

Forecaster::Forecaster(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Initializer init(cfg_.seed);
  stage_ = make_stage(cfg_, init);
  head_ = layers::RegressorHead(cfg_.H, cfg_.T, cfg_.T_out, init);
}

Forecaster::~Forecaster() = default;
Forecaster::Forecaster(Forecaster&&) noexcept = default;
Forecaster& Forecaster::operator=(Forecaster&&) noexcept = default;

Tensor Forecaster::latent(const Tensor& x, Mode mode) {
  bool single = x.rank() == 2;
  if ((x.rank() != 3 && !single) || x.dim(single ? 0 : 1) != cfg_.T ||
      x.dim(single ? 1 : 2) != cfg_.S) {
    throw ShapeError(std::string(kind_name(cfg_.kind)) + " expects input [B," +
                     std::to_string(cfg_.T) + "," + std::to_string(cfg_.S) + "], got " +
                     shape_str(x.shape()));
  }
  auto batched = single ? ops::reshape(x, {1, cfg_.T, cfg_.S}) : x;
  return stage_->forward(batched, mode);
}

Tensor Forecaster::forward(const Tensor& x, Mode mode) {
  auto y = head_.forward(latent(x, mode));
  if (x.rank() == 2) return ops::reshape(y, {cfg_.T_out, cfg_.S});
  return y;
}

std::vector<NamedParam> Forecaster::parameters() const {
  std::vector<NamedParam> out;
  stage_->collect(out);
  head_.collect(out, "head.");
  return out;
}

std::vector<NamedBuffer> Forecaster::buffers() {
  std::vector<NamedBuffer> out;
  stage_->collect_buffers(out);
  return out;
}

ParamCount Forecaster::count() const {
  ParamCount pc;
  for (const auto& p : parameters()) {
    if (p.name.rfind("head.", 0) == 0) {
      pc.head += p.tensor.size();
    } else if (p.name.rfind("norm.", 0) == 0) {
      pc.norm += p.tensor.size();
    } else {
      pc.conv += p.tensor.size();
    }
  }
  return pc;
}

std::vector<double> Forecaster::state() {
  std::vector<double> flat;
  for (const auto& p : parameters()) {
    auto v = p.tensor.values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  for (const auto& b : buffers()) flat.insert(flat.end(), b.values->begin(), b.values->end());
  return flat;
}

void Forecaster::load_state(std::span<const double> flat) {
  std::size_t pos = 0;
  auto take = [&](std::span<double> dst) {
    if (pos + dst.size() > flat.size()) throw InputError("model state is too short");
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(pos),
              flat.begin() + static_cast<std::ptrdiff_t>(pos + dst.size()), dst.begin());
    pos += dst.size();
  };
  for (auto& p : parameters()) take(p.tensor.values_mut());
  for (auto& b : buffers()) take(*b.values);
  if (pos != flat.size()) throw InputError("model state is too long");
}

Forecaster build_model(const ModelConfig& cfg) { return Forecaster(cfg); }

ParamCount count_parameters(const Forecaster& f) { return f.count(); }

ParamCount count_parameters(const ModelConfig& c) {
  ParamCount pc;
  std::size_t H = c.H, S = c.S;
  switch (c.kind) {
    case ModelKind::ACnn:
      pc.conv = layers::AgnosticConvBlock::parameter_count(1, H, c.t_past, S);
      pc.norm = 2 * H;
      break;
    case ModelKind::Cnn:
      pc.conv = 9 * H + H;
      pc.norm = 2 * H;
      break;
    case ModelKind::ConvLstm:
      pc.conv = 4 * H * (1 + H) * 9 + 4 * H;
      break;
    case ModelKind::AConvLstm:
      pc.conv = 4 * H * (1 + H) * S + 4 * H + 4 * H * S + 4 * H;
      break;
    case ModelKind::AGcnLstm:
    case ModelKind::GcnLstm:
      pc.conv = c.hops * (S * S + H + S * H) + 2 * H * 4 * H + 4 * H;
      break;
  }
  pc.head = layers::RegressorHead::parameter_count(H, c.T, c.T_out);
  return pc;
}

ModelConfig match_hidden_width(std::size_t target_params, ModelConfig cfg) {
  cfg.H = 1;
  if (count_parameters(cfg).stage() > target_params) {
    throw InputError(std::string(kind_name(cfg.kind)) + ": parameter budget " +
                     std::to_string(target_params) + " is below the minimum " +
                     std::to_string(count_parameters(cfg).stage()));
  }
  while (cfg.H < kMaxHidden) {
    ModelConfig next = cfg;
    next.H = cfg.H + 1;
    if (count_parameters(next).stage() > target_params) break;
    cfg = next;
  }
  return cfg;
}

}  // namespace stlab::models

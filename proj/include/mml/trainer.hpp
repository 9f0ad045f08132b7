// Licensed under the Apache License, Version 2.0. See LICENSE in the project root.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mml/centre_bank.hpp"
#include "mml/datagen.hpp"
#include "mml/losses.hpp"
#include "mml/numeric.hpp"

namespace mml {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Embedder: affine layers with a hidden-layer activation; the last layer is linear.

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "tanh"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

struct EmbedderParams {
  std::vector<std::size_t> layer_sizes;  // input, hidden..., embedding
  std::vector<Activation> activations;   // one per hidden layer
  std::vector<Matrix> weights;           // layer l: sizes[l] x sizes[l+1]
  std::vector<std::vector<double>> biases;

  std::size_t num_layers() const { return weights.size(); }
  std::size_t input_dim() const { return layer_sizes.front(); }
  std::size_t output_dim() const { return layer_sizes.back(); }

  friend bool operator==(const EmbedderParams&, const EmbedderParams&) = default;
};

struct EmbedderGrads {
  std::vector<Matrix> weights;
  std::vector<std::vector<double>> biases;
};

inline void validate(const EmbedderParams& p) {
  if (p.layer_sizes.size() < 2) throw ConfigError("embedder needs at least input and output sizes");
  const std::size_t layers = p.layer_sizes.size() - 1;
  if (p.weights.size() != layers || p.biases.size() != layers || p.activations.size() != layers - 1) {
    throw ConfigError("embedder: layer count mismatch");
  }
  for (std::size_t l = 0; l < layers; ++l) {
    if (p.weights[l].rows() != p.layer_sizes[l] || p.weights[l].cols() != p.layer_sizes[l + 1] ||
        p.biases[l].size() != p.layer_sizes[l + 1]) {
      throw ConfigError("embedder: layer " + std::to_string(l) + " shape mismatch");
    }
  }
}

// Gaussian weights with variance 1/fan_in, zero biases.
inline EmbedderParams init_embedder(const std::vector<std::size_t>& sizes, Activation act, Rng& rng) {
  if (sizes.size() < 2) throw ConfigError("embedder needs at least input and output sizes");
  EmbedderParams p;
  p.layer_sizes = sizes;
  p.activations.assign(sizes.size() - 2, act);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    if (sizes[l] == 0 || sizes[l + 1] == 0) throw ConfigError("embedder: zero-width layer");
    Matrix w(sizes[l], sizes[l + 1]);
    const double sd = 1.0 / std::sqrt(static_cast<double>(sizes[l]));
    for (double& v : w.data()) v = sd * rng.normal();
    p.weights.push_back(std::move(w));
    p.biases.emplace_back(sizes[l + 1], 0.0);
  }
  return p;
}

namespace detail {

inline double activate(Activation a, double x) { return a == Activation::relu ? (x > 0.0 ? x : 0.0) : std::tanh(x); }

// Derivative expressed through the activation output.
inline double activate_grad(Activation a, double pre, double post) {
  if (a == Activation::relu) return pre > 0.0 ? 1.0 : 0.0;
  return 1.0 - post * post;
}

// Layer inputs (index 0 = network input) and pre-activations of every layer.
struct ForwardTrace {
  std::vector<Matrix> inputs;
  std::vector<Matrix> pre;
  Matrix output;
};

inline ForwardTrace forward_trace(const EmbedderParams& p, const Matrix& x) {
  if (x.cols() != p.input_dim()) {
    throw ConfigError("forward_embed: input has " + std::to_string(x.cols()) + " columns, expected " +
                      std::to_string(p.input_dim()));
  }
  ForwardTrace t;
  Matrix h = x;
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    t.inputs.push_back(h);
    Matrix z = matmul(h, p.weights[l]);
    for (std::size_t i = 0; i < z.rows(); ++i)
      for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += p.biases[l][j];
    t.pre.push_back(z);
    if (l + 1 < p.num_layers()) {
      for (double& v : z.data()) v = activate(p.activations[l], v);
    }
    h = std::move(z);
  }
  t.output = std::move(h);
  return t;
}

}  // namespace detail

inline Matrix forward_embed(const EmbedderParams& p, const Matrix& inputs) {
  return detail::forward_trace(p, inputs).output;
}

// Reverse-mode gradients of sum_i <grad_features_i, f_i> w.r.t. every parameter.
inline EmbedderGrads backward_embed(const EmbedderParams& p, const Matrix& inputs,
                                    const Matrix& grad_features) {
  if (grad_features.rows() != inputs.rows() || grad_features.cols() != p.output_dim()) {
    throw ConfigError("backward_embed: grad_features " + grad_features.shape_string() +
                      " does not match " + std::to_string(inputs.rows()) + "x" +
                      std::to_string(p.output_dim()));
  }
  const auto t = detail::forward_trace(p, inputs);
  EmbedderGrads g;
  g.weights.resize(p.num_layers());
  g.biases.resize(p.num_layers());
  Matrix delta = grad_features;
  for (std::size_t l = p.num_layers(); l-- > 0;) {
    if (l + 1 < p.num_layers()) {
      const Matrix& pre = t.pre[l];
      const Matrix& post = t.inputs[l + 1];
      for (std::size_t i = 0; i < delta.size(); ++i) {
        delta.data()[i] *= detail::activate_grad(p.activations[l], pre.data()[i], post.data()[i]);
      }
    }
    g.weights[l] = matmul(transpose(t.inputs[l]), delta);
    g.biases[l].assign(delta.cols(), 0.0);
    for (std::size_t i = 0; i < delta.rows(); ++i)
      for (std::size_t j = 0; j < delta.cols(); ++j) g.biases[l][j] += delta(i, j);
    if (l > 0) delta = matmul(delta, transpose(p.weights[l]));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Training configuration and state

enum class Scheme { softmax = 1, softmax_centre = 2, softmax_centre_mml = 3 };

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::softmax: return "I";
    case Scheme::softmax_centre: return "II";
    default: return "III";
  }
}

inline Scheme parse_scheme(const std::string& s) {
  if (s == "I" || s == "1") return Scheme::softmax;
  if (s == "II" || s == "2") return Scheme::softmax_centre;
  if (s == "III" || s == "3") return Scheme::softmax_centre_mml;
  throw ConfigError("unknown scheme '" + s + "' (expected I, II or III)");
}

struct TrainConfig {
  Scheme scheme = Scheme::softmax_centre_mml;
  double alpha = 0.01;
  double beta = 0.01;
  double gamma = 0.5;
  MmlConfig mml;
  std::size_t batch_size = 64;
  std::size_t iterations = 2000;
  double base_lr = 0.05;
  std::size_t lr_decay_every = 1000;
  double lr_decay_factor = 0.1;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::string warm_start;  // checkpoint path, empty = cold start
  std::vector<std::size_t> hidden{32};
  std::size_t embedding_dim = 8;
  Activation activation = Activation::tanh;
  CentreInit centre_init = CentreInit::zeros;
  double centre_init_sigma = 1.0;
  std::size_t trace_interval = 1;

  // Loss weights after applying the scheme.
  double effective_alpha() const { return scheme == Scheme::softmax ? 0.0 : alpha; }
  double effective_beta() const { return scheme == Scheme::softmax_centre_mml ? beta : 0.0; }
  bool updates_centres() const { return scheme != Scheme::softmax; }
};

inline void validate(const TrainConfig& c) {
  if (c.batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  if (!(c.base_lr >= 0.0)) throw ConfigError("train.base_lr must be >= 0");
  if (c.lr_decay_every == 0) throw ConfigError("train.lr_decay_every must be >= 1");
  if (!(c.mml.margin >= 0.0)) throw ConfigError("train.margin must be >= 0");
  if (c.embedding_dim == 0) throw ConfigError("model.embedding_dim must be >= 1");
  if (c.trace_interval == 0) throw ConfigError("train.trace_interval must be >= 1");
  validate_gamma(c.gamma);
}

inline double learning_rate(const TrainConfig& c, std::uint64_t t) {
  return c.base_lr * std::pow(c.lr_decay_factor, static_cast<double>(t / c.lr_decay_every));
}

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json hidden = nlohmann::json::array();
  for (auto h : c.hidden) hidden.push_back(h);
  return {{"scheme", to_string(c.scheme)},
          {"alpha", format_double(c.alpha)},
          {"beta", format_double(c.beta)},
          {"gamma", format_double(c.gamma)},
          {"margin", format_double(c.mml.margin)},
          {"coupling", to_string(c.mml.coupling)},
          {"pair_scope", to_string(c.mml.pair_scope)},
          {"batch_size", c.batch_size},
          {"iterations", c.iterations},
          {"base_lr", format_double(c.base_lr)},
          {"lr_decay_every", c.lr_decay_every},
          {"lr_decay_factor", format_double(c.lr_decay_factor)},
          {"weight_decay", format_double(c.weight_decay)},
          {"seed", c.seed},
          {"warm_start", c.warm_start},
          {"hidden", hidden},
          {"embedding_dim", c.embedding_dim},
          {"activation", to_string(c.activation)}};
}

// Uniform reshuffle of the training indices at every epoch boundary.
struct BatchSampler {
  Rng rng;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  std::vector<std::size_t> next(std::size_t batch_size) {
    if (order.empty()) throw DataError("batch sampler: no training samples");
    std::vector<std::size_t> out;
    out.reserve(batch_size);
    while (out.size() < batch_size) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      out.push_back(order[cursor++]);
    }
    return out;
  }

  friend bool operator==(const BatchSampler&, const BatchSampler&) = default;
};

struct TrainState {
  EmbedderParams embedder;
  ClassifierHead head;
  CentreBank bank;
  std::uint64_t iteration = 0;
  BatchSampler sampler;

  friend bool operator==(const TrainState&, const TrainState&) = default;
};

struct Checkpoint {
  TrainState state;
  nlohmann::json config = nlohmann::json::object();
};

inline BatchSampler make_sampler(const Dataset& ds, std::uint64_t seed) {
  BatchSampler s{Rng(seed).split(Stream::sampling), ds.indices(Split::train), 0};
  s.cursor = s.order.size();  // first draw shuffles
  return s;
}

inline TrainState init_state(const TrainConfig& cfg, const Dataset& ds) {
  validate(cfg);
  Rng init = Rng(cfg.seed).split(Stream::init);
  std::vector<std::size_t> sizes{ds.inputs.cols()};
  sizes.insert(sizes.end(), cfg.hidden.begin(), cfg.hidden.end());
  sizes.push_back(cfg.embedding_dim);

  TrainState st;
  st.embedder = init_embedder(sizes, cfg.activation, init);
  const std::size_t k = ds.num_classes();
  st.head.weights = Matrix(cfg.embedding_dim, k);
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.embedding_dim));
  for (double& v : st.head.weights.data()) v = sd * init.normal();
  st.head.biases.assign(k, 0.0);
  st.bank = init_centres(k, cfg.embedding_dim,
                         {cfg.centre_init, cfg.centre_init_sigma, init.split(7).next_u64()}, cfg.gamma);
  st.sampler = make_sampler(ds, cfg.seed);
  return st;
}

struct StepMetrics {
  double loss_total = 0.0;
  double loss_softmax = 0.0;
  double loss_centre = 0.0;
  double loss_mml = 0.0;
  double lr = 0.0;

  friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, TrainState snapshot)
      : std::runtime_error(what), snapshot_(std::move(snapshot)) {}
  const TrainState& snapshot() const { return snapshot_; }

 private:
  TrainState snapshot_;
};

// One iteration: loss and feature gradient, head update from the softmax
// gradient, centre rule update, embedder update, iteration increment.
inline StepMetrics train_step(TrainState& st, const TrainConfig& cfg, const Matrix& inputs,
                              std::span<const int> labels) {
  const double lr = learning_rate(cfg, st.iteration);
  const Matrix features = forward_embed(st.embedder, inputs);
  LossBundle loss;
  try {
    if (!features.all_finite()) throw LossError("non-finite features");
    loss = total_loss(features, labels, st.head, st.bank.centres, cfg.effective_alpha(),
                      cfg.effective_beta(), cfg.mml);
  } catch (const NumericError& e) {
    throw DivergenceError("iteration " + std::to_string(st.iteration) + ": " + e.what(), st);
  } catch (const LossError& e) {
    throw DivergenceError("iteration " + std::to_string(st.iteration) + ": " + e.what(), st);
  }

  auto gw = std::move(*loss.grad_weights);
  auto gb = std::move(*loss.grad_biases);
  auto ge = backward_embed(st.embedder, inputs, loss.grad_features);
  if (cfg.weight_decay != 0.0) {
    for (std::size_t i = 0; i < gw.size(); ++i) gw.data()[i] += cfg.weight_decay * st.head.weights.data()[i];
    for (std::size_t l = 0; l < ge.weights.size(); ++l)
      for (std::size_t i = 0; i < ge.weights[l].size(); ++i)
        ge.weights[l].data()[i] += cfg.weight_decay * st.embedder.weights[l].data()[i];
  }

  for (std::size_t i = 0; i < gw.size(); ++i) st.head.weights.data()[i] -= lr * gw.data()[i];
  for (std::size_t j = 0; j < gb.size(); ++j) st.head.biases[j] -= lr * gb[j];

  if (cfg.updates_centres()) {
    st.bank = apply_update(std::move(st.bank), centre_delta(st.bank, features, labels));
  }

  for (std::size_t l = 0; l < ge.weights.size(); ++l) {
    auto& w = st.embedder.weights[l].data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * ge.weights[l].data()[i];
    for (std::size_t j = 0; j < ge.biases[l].size(); ++j) st.embedder.biases[l][j] -= lr * ge.biases[l][j];
  }
  ++st.iteration;
  return {loss.value, loss.parts.softmax, loss.parts.centre, loss.parts.mml, lr};
}

struct TraceRow {
  std::uint64_t iter = 0;
  StepMetrics metrics;
  double min_centre_sqdist = 0.0;
  std::size_t violating_pairs = 0;
};

inline std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string out = "iter,loss_total,loss_softmax,loss_centre,loss_mml,lr,min_centre_sqdist,violating_pairs\n";
  for (const auto& r : rows) {
    out += std::to_string(r.iter) + ',' + format_double(r.metrics.loss_total) + ',' +
           format_double(r.metrics.loss_softmax) + ',' + format_double(r.metrics.loss_centre) + ',' +
           format_double(r.metrics.loss_mml) + ',' + format_double(r.metrics.lr) + ',' +
           format_double(r.min_centre_sqdist) + ',' + std::to_string(r.violating_pairs) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint serialisation. Every double is stored as its shortest
// round-trip decimal string so save -> load -> save is byte-stable.

namespace detail {

inline nlohmann::json doubles_to_json(const std::vector<double>& v) {
  nlohmann::json a = nlohmann::json::array();
  for (double x : v) a.push_back(format_double(x));
  return a;
}

inline std::vector<double> doubles_from_json(const nlohmann::json& a, const std::string& what) {
  if (!a.is_array()) throw CheckpointError(what + ": expected array");
  std::vector<double> out;
  out.reserve(a.size());
  for (const auto& x : a) {
    if (!x.is_string()) throw CheckpointError(what + ": expected decimal strings");
    try {
      out.push_back(parse_double(x.get<std::string>()));
    } catch (const NumericError& e) {
      throw CheckpointError(what + ": " + e.what());
    }
  }
  return out;
}

inline nlohmann::json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", doubles_to_json(m.data())}};
}

inline Matrix matrix_from_json(const nlohmann::json& j, const std::string& what) {
  try {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  doubles_from_json(j.at("data"), what));
  } catch (const NumericError& e) {
    throw CheckpointError(what + ": " + e.what());
  }
}

}  // namespace detail

inline std::string checkpoint_to_string(const Checkpoint& ck) {
  const auto& st = ck.state;
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < st.embedder.num_layers(); ++l) {
    layers.push_back({{"weights", detail::matrix_to_json(st.embedder.weights[l])},
                      {"biases", detail::doubles_to_json(st.embedder.biases[l])},
                      {"activation", l + 1 < st.embedder.num_layers()
                                         ? to_string(st.embedder.activations[l])
                                         : std::string("linear")}});
  }
  nlohmann::json j = {
      {"format", "mml-checkpoint"},
      {"version", 1},
      {"config", ck.config},
      {"iteration", st.iteration},
      {"embedder", {{"layer_sizes", st.embedder.layer_sizes}, {"layers", layers}}},
      {"head", {{"weights", detail::matrix_to_json(st.head.weights)},
                {"biases", detail::doubles_to_json(st.head.biases)}}},
      {"centres", {{"centres", detail::matrix_to_json(st.bank.centres)},
                   {"gamma", format_double(st.bank.gamma)},
                   {"update_count", st.bank.update_count}}},
      {"rng", {{"engine", st.sampler.rng.state()},
               {"order", st.sampler.order},
               {"cursor", st.sampler.cursor}}}};
  return j.dump(1) + "\n";
}

inline Checkpoint checkpoint_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed JSON: ") + e.what());
  }
  try {
    if (j.at("format") != "mml-checkpoint" || j.at("version") != 1) {
      throw CheckpointError("checkpoint: unsupported format/version");
    }
    Checkpoint ck;
    ck.config = j.at("config");
    auto& st = ck.state;
    st.iteration = j.at("iteration").get<std::uint64_t>();
    const auto& em = j.at("embedder");
    st.embedder.layer_sizes = em.at("layer_sizes").get<std::vector<std::size_t>>();
    const auto& layers = em.at("layers");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string name = "embedder layer " + std::to_string(l);
      st.embedder.weights.push_back(detail::matrix_from_json(layers[l].at("weights"), name));
      st.embedder.biases.push_back(detail::doubles_from_json(layers[l].at("biases"), name));
      if (l + 1 < layers.size()) {
        st.embedder.activations.push_back(parse_activation(layers[l].at("activation").get<std::string>()));
      }
    }
    validate(st.embedder);
    st.head.weights = detail::matrix_from_json(j.at("head").at("weights"), "head");
    st.head.biases = detail::doubles_from_json(j.at("head").at("biases"), "head");
    if (st.head.biases.size() != st.head.weights.cols()) throw CheckpointError("head: bias length mismatch");
    const auto& c = j.at("centres");
    st.bank.centres = detail::matrix_from_json(c.at("centres"), "centres");
    st.bank.gamma = parse_double(c.at("gamma").get<std::string>());
    st.bank.update_count = c.at("update_count").get<std::uint64_t>();
    const auto& r = j.at("rng");
    st.sampler.rng = Rng::from_state(r.at("engine").get<std::string>());
    st.sampler.order = r.at("order").get<std::vector<std::size_t>>();
    st.sampler.cursor = r.at("cursor").get<std::size_t>();
    if (st.sampler.cursor > st.sampler.order.size()) throw CheckpointError("rng: cursor out of range");
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  } catch (const NumericError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint '" + path + "'");
  os << checkpoint_to_string(ck);
  if (!os) throw CheckpointError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return checkpoint_from_string(ss.str());
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TraceRow> trace;
};

inline void check_compatible(const TrainState& warm, const TrainState& fresh) {
  if (warm.embedder.layer_sizes != fresh.embedder.layer_sizes) {
    throw CheckpointError("warm start: embedder layer sizes differ from the configured model");
  }
  if (warm.embedder.activations != fresh.embedder.activations) {
    throw CheckpointError("warm start: activations differ from the configured model");
  }
  if (!warm.head.weights.same_shape(fresh.head.weights)) {
    throw CheckpointError("warm start: classifier head " + warm.head.weights.shape_string() +
                          " vs expected " + fresh.head.weights.shape_string());
  }
  if (!warm.bank.centres.same_shape(fresh.bank.centres)) {
    throw CheckpointError("warm start: centre bank " + warm.bank.centres.shape_string() +
                          " vs expected " + fresh.bank.centres.shape_string());
  }
}

// Initial state for a run: fresh parameters, or the parameters of `warm` with
// this run's sampler, centre rate and a reset iteration counter.
inline TrainState start_state(const TrainConfig& cfg, const Dataset& ds, const Checkpoint* warm) {
  TrainState st = init_state(cfg, ds);
  if (warm) {
    check_compatible(warm->state, st);
    st.embedder = warm->state.embedder;
    st.head = warm->state.head;
    st.bank.centres = warm->state.bank.centres;
  }
  return st;
}

inline TrainResult train(const TrainConfig& cfg, const Dataset& ds, const Checkpoint* warm,
                         nlohmann::json config_echo = nullptr) {
  if (ds.size() == 0) throw DataError("train: empty dataset");
  TrainResult res;
  res.checkpoint.config = config_echo.is_null() ? to_json(cfg) : std::move(config_echo);
  TrainState st = start_state(cfg, ds, warm);

  std::vector<int> labels(cfg.batch_size);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const auto idx = st.sampler.next(cfg.batch_size);
    const Matrix x = gather_rows(ds.inputs, idx);
    for (std::size_t b = 0; b < idx.size(); ++b) labels[b] = ds.labels[idx[b]];
    const StepMetrics m = train_step(st, cfg, x, labels);
    if (st.iteration % cfg.trace_interval == 0) {
      const auto nn = nearest_centre_distances(st.bank);
      res.trace.push_back({st.iteration, m, *std::min_element(nn.begin(), nn.end()),
                           violating_pairs(st.bank, cfg.mml.margin).size()});
    }
  }
  res.checkpoint.state = std::move(st);
  return res;
}

// As train(), warm-starting from cfg.warm_start when it names a checkpoint file.
inline TrainResult run_training(const TrainConfig& cfg, const Dataset& ds, nlohmann::json config_echo = nullptr) {
  std::optional<Checkpoint> warm;
  if (!cfg.warm_start.empty()) warm = load_checkpoint(cfg.warm_start);
  return train(cfg, ds, warm ? &*warm : nullptr, std::move(config_echo));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check of the scheme's objective.
//
// In coupled mode the MML term is differentiated through the batch-mean centre
// surrogate: each in-batch class centre moves by the mean displacement of its
// batch features, which is exactly the Jacobian the coupled gradient uses.

struct GradcheckOptions {
  std::size_t samples = 200;
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  std::size_t warmup_steps = 5;
  // Denominator floor for the relative error, below which errors are absolute.
  double scale_floor = 1e-4;
  // Scales every analytic gradient; 1.0 disables the fault.
  double corrupt_factor = 1.0;
};

struct GradcheckEntry {
  std::string component;
  std::string coordinate;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<std::string> components;
  std::vector<double> max_rel_error;  // parallel to components
  std::size_t coordinates_checked = 0;
  double tolerance = 0.0;
  std::vector<GradcheckEntry> failures;

  bool passed() const { return failures.empty(); }
  double max_error() const {
    double m = 0.0;
    for (double e : max_rel_error) m = std::max(m, e);
    return m;
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

// Objective pieces evaluated at (embedder, head, feature offset).
struct GradcheckProblem {
  const TrainConfig& cfg;
  Matrix inputs;
  std::vector<int> labels;
  Matrix centres;
  Matrix base_features;

  Matrix features(const EmbedderParams& em, const Matrix& offset) const {
    Matrix f = forward_embed(em, inputs);
    for (std::size_t i = 0; i < f.size(); ++i) f.data()[i] += offset.data()[i];
    return f;
  }

  Matrix surrogate_centres(const Matrix& f) const {
    Matrix c = centres;
    if (cfg.mml.coupling == Coupling::detached) return c;
    Matrix shift(c.rows(), c.cols());
    std::vector<std::size_t> counts(c.rows(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto y = static_cast<std::size_t>(labels[i]);
      ++counts[y];
      for (std::size_t k = 0; k < c.cols(); ++k) shift(y, k) += f(i, k) - base_features(i, k);
    }
    for (std::size_t j = 0; j < c.rows(); ++j)
      if (counts[j] > 0)
        for (std::size_t k = 0; k < c.cols(); ++k) c(j, k) += shift(j, k) / static_cast<double>(counts[j]);
    return c;
  }

  // softmax, centre, mml, total
  std::array<double, 4> values(const EmbedderParams& em, const ClassifierHead& head, const Matrix& offset) const {
    const Matrix f = features(em, offset);
    const double s = softmax_ce(f, labels, head).value;
    const double c = centre_loss(f, labels, centres).value;
    const double m = mml(f, labels, surrogate_centres(f), cfg.mml).value;
    return {s, c, m, s + cfg.effective_alpha() * c + cfg.effective_beta() * m};
  }
};

}  // namespace detail

inline GradcheckReport gradcheck(const TrainConfig& cfg, const Dataset& ds, const GradcheckOptions& opt) {
  if (!(opt.epsilon > 0.0)) throw ConfigError("gradcheck: epsilon must be > 0");
  TrainState st = init_state(cfg, ds);
  std::vector<int> labels(cfg.batch_size);
  for (std::size_t s = 0; s < opt.warmup_steps; ++s) {
    const auto idx = st.sampler.next(cfg.batch_size);
    for (std::size_t b = 0; b < idx.size(); ++b) labels[b] = ds.labels[idx[b]];
    train_step(st, cfg, gather_rows(ds.inputs, idx), labels);
  }
  const auto idx = st.sampler.next(cfg.batch_size);
  for (std::size_t b = 0; b < idx.size(); ++b) labels[b] = ds.labels[idx[b]];

  detail::GradcheckProblem prob{cfg, gather_rows(ds.inputs, idx), labels, st.bank.centres, Matrix()};
  prob.base_features = forward_embed(st.embedder, prob.inputs);
  const Matrix& f0 = prob.base_features;
  const Matrix zero_offset(f0.rows(), f0.cols());

  GradcheckReport rep;
  rep.tolerance = opt.tolerance;
  std::vector<std::size_t> comp_ids{0};
  if (cfg.scheme != Scheme::softmax) comp_ids.push_back(1);
  if (cfg.scheme == Scheme::softmax_centre_mml) comp_ids.push_back(2);
  comp_ids.push_back(3);
  const char* names[] = {"softmax", "centre", "mml", "total"};
  for (auto c : comp_ids) rep.components.push_back(names[c]);
  rep.max_rel_error.assign(comp_ids.size(), 0.0);

  // Analytic feature gradients per component.
  const LossBundle ls = softmax_ce(f0, labels, st.head);
  const LossBundle lc = centre_loss(f0, labels, st.bank.centres);
  const LossBundle lm = mml(f0, labels, st.bank.centres, cfg.mml);
  const LossBundle lt = total_loss(f0, labels, st.head, st.bank.centres, cfg.effective_alpha(),
                                   cfg.effective_beta(), cfg.mml);
  const std::array<const LossBundle*, 4> bundles{&ls, &lc, &lm, &lt};
  std::array<EmbedderGrads, 4> pgrads;
  for (auto c : comp_ids) pgrads[c] = backward_embed(st.embedder, prob.inputs, bundles[c]->grad_features);

  Rng rng = Rng(cfg.seed).split(Stream::gradcheck);
  for (std::size_t s = 0; s < opt.samples; ++s) {
    // kinds: 0 feature, 1 embedder weight, 2 embedder bias, 3 head weight, 4 head bias
    const std::size_t kind = rng.below(5);
    EmbedderParams em_p = st.embedder, em_m = st.embedder;
    ClassifierHead hd_p = st.head, hd_m = st.head;
    Matrix off_p = zero_offset, off_m = zero_offset;
    std::array<double, 4> analytic{};
    std::string coord;
    if (kind == 0) {
      const std::size_t i = rng.below(f0.size());
      off_p.data()[i] += opt.epsilon;
      off_m.data()[i] -= opt.epsilon;
      for (auto c : comp_ids) analytic[c] = bundles[c]->grad_features.data()[i];
      coord = "feature[" + std::to_string(i / f0.cols()) + "," + std::to_string(i % f0.cols()) + "]";
    } else if (kind == 1 || kind == 2) {
      const std::size_t l = rng.below(st.embedder.num_layers());
      if (kind == 1) {
        const std::size_t i = rng.below(st.embedder.weights[l].size());
        em_p.weights[l].data()[i] += opt.epsilon;
        em_m.weights[l].data()[i] -= opt.epsilon;
        for (auto c : comp_ids) analytic[c] = pgrads[c].weights[l].data()[i];
        coord = "embedder.w" + std::to_string(l) + "[" + std::to_string(i) + "]";
      } else {
        const std::size_t i = rng.below(st.embedder.biases[l].size());
        em_p.biases[l][i] += opt.epsilon;
        em_m.biases[l][i] -= opt.epsilon;
        for (auto c : comp_ids) analytic[c] = pgrads[c].biases[l][i];
        coord = "embedder.b" + std::to_string(l) + "[" + std::to_string(i) + "]";
      }
    } else if (kind == 3) {
      const std::size_t i = rng.below(st.head.weights.size());
      hd_p.weights.data()[i] += opt.epsilon;
      hd_m.weights.data()[i] -= opt.epsilon;
      analytic[0] = ls.grad_weights->data()[i];
      analytic[3] = lt.grad_weights->data()[i];
      coord = "head.w[" + std::to_string(i) + "]";
    } else {
      const std::size_t i = rng.below(st.head.biases.size());
      hd_p.biases[i] += opt.epsilon;
      hd_m.biases[i] -= opt.epsilon;
      analytic[0] = (*ls.grad_biases)[i];
      analytic[3] = (*lt.grad_biases)[i];
      coord = "head.b[" + std::to_string(i) + "]";
    }
    const auto vp = prob.values(em_p, hd_p, off_p);
    const auto vm = prob.values(em_m, hd_m, off_m);
    for (std::size_t ci = 0; ci < comp_ids.size(); ++ci) {
      const auto c = comp_ids[ci];
      const double a = analytic[c] * opt.corrupt_factor;
      const double num = (vp[c] - vm[c]) / (2.0 * opt.epsilon);
      const double err = relative_error(a, num, opt.scale_floor);
      rep.max_rel_error[ci] = std::max(rep.max_rel_error[ci], err);
      if (err > opt.tolerance) rep.failures.push_back({names[c], coord, a, num, err});
    }
    ++rep.coordinates_checked;
  }
  return rep;
}

}  // namespace mml

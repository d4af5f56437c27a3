#pragma once

// MLP classifier, SGD with momentum, step-decay schedule and the mixup
// ranking training loop, plus checkpoint and logits persistence.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rankcal/autodiff.hpp"
#include "rankcal/csv.hpp"
#include "rankcal/dataset.hpp"
#include "rankcal/error.hpp"
#include "rankcal/losses.hpp"
#include "rankcal/mixup.hpp"
#include "rankcal/rng.hpp"

namespace rankcal {

struct ModelSpec {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden{128, 128};
  std::size_t classes = 10;
  std::uint64_t init_seed = 1;

  void validate() const {
    if (input_dim < 1 || classes < 1) throw ContractError("model dimensions must be >= 1");
    for (std::size_t h : hidden) {
      if (h < 1) throw ContractError("hidden widths must be >= 1");
    }
  }

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(classes);
    return w;
  }
};

struct Layer {
  Tensor weight;  // fan_in × fan_out
  Tensor bias;    // fan_out
};

struct Model {
  ModelSpec spec;
  std::vector<Layer> layers;

  /// weight0, bias0, weight1, ...
  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
    return out;
  }

  friend bool operator==(const Model& a, const Model& b) { return a.layers_equal(b); }

 private:
  bool layers_equal(const Model& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (!(layers[i].weight == o.layers[i].weight) || !(layers[i].bias == o.layers[i].bias)) return false;
    }
    return true;
  }
};

/// He initialisation: weights ~ N(0, 2/fan_in), zero biases.
inline Model init_model(const ModelSpec& spec) {
  spec.validate();
  Rng rng(mix_seed(spec.init_seed, 10));
  Model m{spec, {}};
  const auto w = spec.widths();
  for (std::size_t l = 0; l + 1 < w.size(); ++l) {
    Layer layer{Tensor({w[l], w[l + 1]}), Tensor({w[l + 1]})};
    const double std_dev = std::sqrt(2.0 / static_cast<double>(w[l]));
    for (double& v : layer.weight.data) v = std_dev * rng.normal();
    m.layers.push_back(std::move(layer));
  }
  return m;
}

/// Leaf variables for every parameter, in Model::parameters() order.
inline std::vector<Var> parameter_leaves(Graph& g, const Model& model, bool requires_grad) {
  std::vector<Var> out;
  for (const auto& l : model.layers) {
    out.push_back(g.leaf(l.weight, requires_grad));
    out.push_back(g.leaf(l.bias, requires_grad));
  }
  return out;
}

/// Logits of an MLP with ReLU hidden layers.
inline Var forward(std::span<const Var> params, Var x) {
  Var h = x;
  const std::size_t n_layers = params.size() / 2;
  for (std::size_t l = 0; l < n_layers; ++l) {
    h = add_bias(matmul(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 < n_layers) h = relu(h);
  }
  return h;
}

inline Tensor predict_logits(const Model& model, const Tensor& features) {
  Graph g;
  const auto params = parameter_leaves(g, model, false);
  return forward(params, g.constant(features)).value();
}

// ---------------------------------------------------------------------------
// Optimiser

/// v ← μ·v + g;  p ← p − lr·v
inline void sgd_step(std::span<Tensor* const> params, std::span<const Tensor> grads, std::span<Tensor> velocity,
                     double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw DimensionError("sgd_step: parameter, gradient and velocity counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (p.shape != grads[i].shape || p.shape != velocity[i].shape) {
      throw DimensionError("sgd_step: shape mismatch for parameter " + std::to_string(i) + ": " +
                           to_string(p.shape) + " vs grad " + to_string(grads[i].shape));
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
      velocity[i].data[k] = momentum * velocity[i].data[k] + grads[i].data[k];
      p.data[k] -= lr * velocity[i].data[k];
    }
  }
}

struct TrainConfig {
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  double lr = 0.1;
  double momentum = 0.9;
  std::vector<std::size_t> decay_epochs{30, 45};
  double decay_factor = 0.1;
  LossConfig loss{};
  std::size_t group_size = 4;  // Q: the anchor plus Q−1 mixed samples
  double alpha = 2.0;
  std::uint64_t seed = 1;

  /// Decay points at 50% and 75% of `epochs`.
  static std::vector<std::size_t> default_decay(std::size_t epochs) { return {epochs / 2, (3 * epochs) / 4}; }

  void validate() const {
    if (epochs < 1 || batch_size < 1) throw ContractError("epochs and batch_size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractError("lr must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ContractError("momentum must lie in [0, 1)");
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) throw ContractError("decay_factor must lie in (0, 1]");
    if (group_size < 2) throw ContractError("group size Q must be >= 2");
    BetaParams{alpha}.validate();
    loss.validate();
  }
};

inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.lr;
  for (std::size_t e : cfg.decay_epochs) {
    if (e <= epoch) lr *= cfg.decay_factor;
  }
  return lr;
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct Checkpoint {
  Model model;
  TrainConfig config;
  std::size_t epoch = 0;  // epochs completed
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::vector<EpochLog> history;
};

namespace detail {

// Contiguous batches of `order`; a trailing batch of one sample joins the previous batch.
inline std::vector<std::span<const std::size_t>> make_batches(std::span<const std::size_t> order, std::size_t size) {
  std::vector<std::span<const std::size_t>> out;
  for (std::size_t start = 0; start < order.size(); start += size) {
    out.push_back(order.subspan(start, std::min(size, order.size() - start)));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    const std::size_t begin = static_cast<std::size_t>(out[out.size() - 2].data() - order.data());
    out.pop_back();
    out.back() = order.subspan(begin);
  }
  return out;
}

inline double accuracy_of(const Tensor& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  const std::size_t k = logits.cols();
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits(i, j) > logits(i, best)) best = j;
    }
    hits += static_cast<int>(best) == labels[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.rows());
}

}  // namespace detail

struct StepResult {
  double loss = 0.0;
  std::vector<Tensor> grads;  // Model::parameters() order
};

/// Loss and parameter gradients for one batch. Raw and mixed inputs run through
/// the same parameter leaves of one graph; CE sees raw samples and their labels
/// only, the ranking term sees confidences of raw and mixed samples.
inline StepResult batch_gradients(const Model& model, const LabeledDataset& batch, const TrainConfig& cfg,
                                  Rng& mixup_rng) {
  Graph g;
  const auto params = parameter_leaves(g, model, true);
  Var logits_raw = forward(params, g.constant(batch.features));
  Var ce = cross_entropy(logits_raw, batch.labels);

  std::optional<Var> calib;
  if (cfg.loss.mode != LossMode::ce_only) {
    const std::size_t b = batch.size();
    const std::size_t d = batch.dim();
    const auto groups = build_groups(batch.features, cfg.group_size, BetaParams{cfg.alpha}, mixup_rng);
    std::vector<Var> confs{max_over_classes(softmax(logits_raw))};
    for (std::size_t q = 0; q + 1 < cfg.group_size; ++q) {
      Tensor mixed({b, d});
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t k = 0; k < d; ++k) mixed(i, k) = groups[i].mixed_inputs(q, k);
      }
      confs.push_back(max_over_classes(softmax(forward(params, g.constant(std::move(mixed))))));
    }
    ConfidenceBatch cb{concat(confs), {}};
    for (std::size_t i = 0; i < b; ++i) {
      GroupConfidences gc{i, {}, groups[i].lambdas};
      for (std::size_t q = 0; q + 1 < cfg.group_size; ++q) gc.augmented.push_back((q + 1) * b + i);
      cb.groups.push_back(std::move(gc));
    }
    calib = cfg.loss.mode == LossMode::mrl ? mrl(cb, cfg.loss.margin) : m_ndcg(cb);
  }
  Var total = total_loss(ce, calib, cfg.loss);
  StepResult out{total.item(), {}};
  if (!std::isfinite(out.loss)) return out;
  g.backward(total);
  for (const Var& p : params) out.grads.push_back(g.grad(p));
  return out;
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains a fresh model. Deterministic given cfg.seed and spec.init_seed.
inline Checkpoint fit(const LabeledDataset& train, const LabeledDataset& val, const ModelSpec& spec,
                      const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  train.validate();
  val.validate();
  if (train.dim() != spec.input_dim || val.dim() != spec.input_dim) {
    throw DimensionError("dataset dimension differs from model input_dim " + std::to_string(spec.input_dim));
  }
  if (static_cast<std::size_t>(train.num_classes) != spec.classes || val.num_classes != train.num_classes) {
    throw ContractError("train/val class counts differ from the model's");
  }
  if (train.size() < 2) throw ContractError("training set needs at least 2 samples");

  Checkpoint ck{init_model(spec), cfg, 0, 0.0, 0.0, {}};
  auto params = ck.model.parameters();
  std::vector<Tensor> velocity;
  for (Tensor* p : params) velocity.emplace_back(p->shape);

  Rng shuffle_rng(mix_seed(cfg.seed, 20));
  Rng mixup_rng(mix_seed(cfg.seed, 21));
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    const double lr = lr_at(epoch, cfg);
    double loss_sum = 0.0;
    const auto batches = detail::make_batches(order, cfg.batch_size);
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const LabeledDataset batch = subset(train, batches[bi], SplitTag::train);
      StepResult step;
      try {
        step = batch_gradients(ck.model, batch, cfg, mixup_rng);
      } catch (const Error& e) {
        throw Error("epoch " + std::to_string(epoch) + ", batch " + std::to_string(bi) + ": " + e.what());
      }
      if (!std::isfinite(step.loss)) {
        throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi));
      }
      sgd_step(params, step.grads, velocity, lr, cfg.momentum);
      loss_sum += step.loss;
    }

    EpochLog log{epoch, loss_sum / static_cast<double>(batches.size()), 0.0, 0.0};
    {
      Graph g;
      const auto leaves = parameter_leaves(g, ck.model, false);
      Var logits = forward(leaves, g.constant(val.features));
      log.val_loss = cross_entropy(logits, val.labels).item();
      log.val_accuracy = detail::accuracy_of(logits.value(), val.labels);
    }
    ck.history.push_back(log);
    ck.epoch = epoch + 1;
    ck.train_loss = log.train_loss;
    ck.val_loss = log.val_loss;
    if (on_epoch) on_epoch(log);
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Persistence

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"decay_epochs", c.decay_epochs},
          {"decay_factor", c.decay_factor},
          {"loss", to_string(c.loss.mode)},
          {"w", c.loss.w},
          {"margin", c.loss.margin},
          {"q", c.group_size},
          {"alpha", c.alpha},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<std::size_t>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.momentum = j.at("momentum").get<double>();
  c.decay_epochs = j.at("decay_epochs").get<std::vector<std::size_t>>();
  c.decay_factor = j.at("decay_factor").get<double>();
  c.loss.mode = parse_loss_mode(j.at("loss").get<std::string>());
  c.loss.w = j.at("w").get<double>();
  c.loss.margin = j.at("margin").get<double>();
  c.group_size = j.at("q").get<std::size_t>();
  c.alpha = j.at("alpha").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"input_dim", s.input_dim}, {"hidden", s.hidden}, {"classes", s.classes}, {"init_seed", s.init_seed}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  return {j.at("input_dim").get<std::size_t>(), j.at("hidden").get<std::vector<std::size_t>>(),
          j.at("classes").get<std::size_t>(), j.at("init_seed").get<std::uint64_t>()};
}

inline constexpr int kCheckpointVersion = 1;

/// Line 1: JSON header with format, version, model spec, config and losses.
/// Then one CSV line per parameter tensor: name,rows,cols,values...
inline std::string checkpoint_text(const Checkpoint& ck) {
  nlohmann::json head{{"format", "rankcal-checkpoint"},
                      {"version", kCheckpointVersion},
                      {"model", to_json(ck.model.spec)},
                      {"config", to_json(ck.config)},
                      {"epoch", ck.epoch},
                      {"train_loss", ck.train_loss},
                      {"val_loss", ck.val_loss}};
  std::string out = head.dump() + '\n';
  for (std::size_t l = 0; l < ck.model.layers.size(); ++l) {
    const Layer& layer = ck.model.layers[l];
    for (const auto& [name, t] : {std::pair<std::string, const Tensor*>{"weight", &layer.weight},
                                  std::pair<std::string, const Tensor*>{"bias", &layer.bias}}) {
      const std::size_t r = t->rank() == 2 ? t->rows() : 1;
      const std::size_t c = t->rank() == 2 ? t->cols() : t->size();
      out += "layer" + std::to_string(l) + '.' + name + ',' + std::to_string(r) + ',' + std::to_string(c);
      for (double v : t->data) out += ',' + csv::format_double(v);
      out += '\n';
    }
  }
  return out;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  csv::write_atomic(path, checkpoint_text(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string src = path.string();
  const auto lines = csv::read_lines(path);
  if (lines.empty()) throw ParseError(src, 1, "empty checkpoint");
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(lines[0]);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(src, 1, std::string("bad checkpoint header: ") + e.what());
  }
  if (head.value("format", "") != "rankcal-checkpoint" || head.value("version", 0) != kCheckpointVersion) {
    throw ParseError(src, 1, "not a version " + std::to_string(kCheckpointVersion) + " rankcal checkpoint");
  }
  Checkpoint ck;
  try {
    ck.model.spec = model_spec_from_json(head.at("model"));
    ck.config = train_config_from_json(head.at("config"));
    ck.epoch = head.at("epoch").get<std::size_t>();
    ck.train_loss = head.at("train_loss").get<double>();
    ck.val_loss = head.at("val_loss").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(src, 1, std::string("bad checkpoint header: ") + e.what());
  }
  ck.model.spec.validate();
  const auto widths = ck.model.spec.widths();
  const std::size_t n_layers = widths.size() - 1;
  if (lines.size() != 1 + 2 * n_layers) {
    throw ParseError(src, lines.size(), "expected " + std::to_string(2 * n_layers) + " parameter lines");
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    Layer layer;
    for (std::size_t part = 0; part < 2; ++part) {
      const std::size_t line_no = 2 + 2 * l + part;
      const auto f = csv::split(lines[line_no - 1]);
      const std::size_t rows = part == 0 ? widths[l] : 1;
      const std::size_t cols = widths[l + 1];
      const std::string name = "layer" + std::to_string(l) + (part == 0 ? ".weight" : ".bias");
      if (f.size() != 3 + rows * cols || f[0] != name || f[1] != std::to_string(rows) ||
          f[2] != std::to_string(cols)) {
        throw ParseError(src, line_no, "expected " + name + " with shape " + std::to_string(rows) + "x" +
                                           std::to_string(cols));
      }
      std::vector<double> values;
      for (std::size_t k = 3; k < f.size(); ++k) {
        auto v = csv::parse_double(f[k]);
        if (!v) throw ParseError(src, line_no, "not a number: '" + std::string(f[k]) + "'");
        values.push_back(*v);
      }
      if (part == 0) {
        layer.weight = Tensor({rows, cols}, std::move(values));
      } else {
        layer.bias = Tensor({cols}, std::move(values));
      }
    }
    ck.model.layers.push_back(std::move(layer));
  }
  return ck;
}

/// CSV `z0,...,z{K-1},label`, one row per sample.
inline std::string logits_text(const Model& model, const LabeledDataset& ds) {
  ds.validate();
  if (ds.dim() != model.spec.input_dim) throw DimensionError("dataset dimension differs from the model's");
  return csv::write_labeled_table('z', predict_logits(model, ds.features), ds.labels);
}

inline void dump_logits(const Checkpoint& ck, const LabeledDataset& ds, const std::filesystem::path& path) {
  csv::write_atomic(path, logits_text(ck.model, ds));
}

struct LogitsFile {
  Tensor logits;
  std::vector<int> labels;
};

inline LogitsFile load_logits(const std::filesystem::path& path) {
  auto t = csv::read_labeled_table(path, 'z');
  if (t.values.cols() < 2) throw ParseError(path.string(), 1, "logits need at least 2 classes");
  for (std::size_t i = 0; i < t.labels.size(); ++i) {
    if (static_cast<std::size_t>(t.labels[i]) >= t.values.cols()) {
      throw ParseError(path.string(), i + 2, "label " + std::to_string(t.labels[i]) + " exceeds class count");
    }
  }
  return {std::move(t.values), std::move(t.labels)};
}

}  // namespace rankcal

#pragma once

// One train+evaluate run and parameter sweeps built from it.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rankcal/calibrate.hpp"
#include "rankcal/csv.hpp"
#include "rankcal/dataset.hpp"
#include "rankcal/metrics.hpp"
#include "rankcal/train.hpp"

namespace rankcal {

struct DataBundle {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
  std::optional<LabeledDataset> ood;
};

/// Loads train/val/test (and ood.csv when present) from a directory written by
/// gen-data. The class count is the largest label over all files plus one.
inline DataBundle load_bundle(const std::filesystem::path& dir) {
  const auto train_path = dir / "train.csv";
  const auto val_path = dir / "val.csv";
  const auto test_path = dir / "test.csv";
  const auto ood_path = dir / "ood.csv";
  DataBundle b{load_csv(train_path, std::nullopt, SplitTag::train), load_csv(val_path, std::nullopt, SplitTag::val),
               load_csv(test_path, std::nullopt, SplitTag::test), std::nullopt};
  if (std::filesystem::exists(ood_path)) b.ood = load_csv(ood_path, std::nullopt, SplitTag::test);
  int k = std::max({b.train.num_classes, b.val.num_classes, b.test.num_classes, b.ood ? b.ood->num_classes : 2});
  b.train.num_classes = b.val.num_classes = b.test.num_classes = k;
  if (b.ood) b.ood->num_classes = k;
  if (b.val.dim() != b.train.dim() || b.test.dim() != b.train.dim() || (b.ood && b.ood->dim() != b.train.dim())) {
    throw DimensionError("dataset files in " + dir.string() + " disagree on feature dimension");
  }
  return b;
}

struct GenerateOptions {
  SyntheticSpec spec;
  SplitFractions fractions;
  std::optional<double> ood_shift;
  std::size_t ood_n_per_class = 120;
};

/// Splits are seeded by spec.seed. OOD samples reuse the class means and shift
/// direction of spec.seed with an independent noise stream.
inline DataBundle generate_bundle(const GenerateOptions& opt) {
  auto parts = split(generate_gaussian_mixture(opt.spec), opt.fractions, opt.spec.seed);
  DataBundle b{std::move(parts.train), std::move(parts.val), std::move(parts.test), std::nullopt};
  if (opt.ood_shift) {
    SyntheticSpec ood = opt.spec;
    ood.n_per_class = opt.ood_n_per_class;
    ood.sample_salt = opt.spec.sample_salt + 1;
    b.ood = generate_ood_shift(ood, *opt.ood_shift);
  }
  return b;
}

inline void save_bundle(const DataBundle& b, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_csv(b.train, dir / "train.csv");
  save_csv(b.val, dir / "val.csv");
  save_csv(b.test, dir / "test.csv");
  if (b.ood) save_csv(*b.ood, dir / "ood.csv");
}

struct EvalSummary {
  double acc = 0.0;
  double ece = 0.0;
  double aece = 0.0;
  double oe = 0.0;
  double ue = 0.0;
};

inline EvalSummary summarize(const Tensor& logits, std::span<const int> labels, double temperature,
                             std::size_t bins) {
  const auto ps = predict(apply_temperature(logits, temperature), labels);
  const auto width = reliability_table(ps, bins, BinScheme::equal_width);
  return {accuracy(ps), calibration_error(width), aece(ps, bins), overconfidence_error(width),
          underconfidence_error(width)};
}

struct RunResult {
  Checkpoint checkpoint;
  Temperature temperature;
  EvalSummary test;
  EvalSummary test_post_ts;
  Tensor val_logits;
  Tensor test_logits;
  std::optional<Tensor> ood_logits;
};

/// Trains from scratch, fits T on validation logits, evaluates on test.
inline RunResult run_experiment(const DataBundle& data, const ModelSpec& spec, const TrainConfig& cfg,
                                std::size_t bins = 15) {
  RunResult r{fit(data.train, data.val, spec, cfg), {}, {}, {}, {}, {}, std::nullopt};
  r.val_logits = predict_logits(r.checkpoint.model, data.val.features);
  r.test_logits = predict_logits(r.checkpoint.model, data.test.features);
  if (data.ood) r.ood_logits = predict_logits(r.checkpoint.model, data.ood->features);
  r.temperature = fit_temperature(r.val_logits, data.val.labels);
  r.test = summarize(r.test_logits, data.test.labels, 1.0, bins);
  r.test_post_ts = summarize(r.test_logits, data.test.labels, r.temperature.value, bins);
  return r;
}

/// Mean predictive entropy AUROC, OOD samples positive.
inline double entropy_auroc(const Tensor& id_logits, const Tensor& ood_logits) {
  const auto h_id = entropies(apply_temperature(id_logits, 1.0));
  const auto h_ood = entropies(apply_temperature(ood_logits, 1.0));
  return auroc(h_id, h_ood);
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { margin, q, alpha };

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::margin: return "margin";
    case SweepAxis::q: return "q";
    case SweepAxis::alpha: return "alpha";
  }
  return "?";
}

inline SweepAxis parse_sweep_axis(std::string_view s) {
  if (s == "margin") return SweepAxis::margin;
  if (s == "q") return SweepAxis::q;
  if (s == "alpha") return SweepAxis::alpha;
  throw ContractError("unknown sweep axis '" + std::string(s) + "' (expected margin, q or alpha)");
}

/// Base config with one axis set to `value`. Q must be an integer >= 2.
inline TrainConfig with_axis(TrainConfig cfg, SweepAxis axis, double value) {
  switch (axis) {
    case SweepAxis::margin: cfg.loss.margin = value; break;
    case SweepAxis::alpha: cfg.alpha = value; break;
    case SweepAxis::q:
      if (!(value >= 2.0) || value != std::floor(value)) {
        throw ContractError("q must be an integer >= 2, got " + csv::format_shortest(value));
      }
      cfg.group_size = static_cast<std::size_t>(value);
      break;
  }
  return cfg;
}

struct SweepRow {
  SweepAxis axis = SweepAxis::margin;
  double value = 0.0;
  std::uint64_t seed = 0;
  EvalSummary test;
  double ece_post_ts = 0.0;
  std::string status = "ok";  // "ok" or "error: ..."
  bool ok() const { return status == "ok"; }
};

struct SweepPlan {
  SweepAxis axis = SweepAxis::margin;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
  std::size_t bins = 15;
};

/// A sweep seed drives both the model initialisation and the training streams;
/// the dataset is fixed by the caller.
inline SweepRow run_sweep_point(const DataBundle& data, ModelSpec spec, const TrainConfig& base, SweepAxis axis,
                                double value, std::uint64_t seed, std::size_t bins) {
  SweepRow row{axis, value, seed, {}, 0.0, "ok"};
  try {
    TrainConfig cfg = with_axis(base, axis, value);
    cfg.seed = seed;
    spec.init_seed = seed;
    const auto r = run_experiment(data, spec, cfg, bins);
    row.test = r.test;
    row.ece_post_ts = r.test_post_ts.ece;
  } catch (const std::exception& e) {
    row.status = std::string("error: ") + e.what();
  }
  return row;
}

/// Rows in (value, seed) order regardless of `jobs`.
inline std::vector<SweepRow> run_sweep(const DataBundle& data, const ModelSpec& spec, const TrainConfig& base,
                                       const SweepPlan& plan) {
  if (plan.values.empty() || plan.seeds.empty()) throw ContractError("sweep needs at least one value and one seed");
  const std::size_t total = plan.values.size() * plan.seeds.size();
  std::vector<SweepRow> rows(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < total; i = next++) {
      const double v = plan.values[i / plan.seeds.size()];
      const std::uint64_t s = plan.seeds[i % plan.seeds.size()];
      rows[i] = run_sweep_point(data, spec, base, plan.axis, v, s, plan.bins);
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(plan.jobs, total));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  return rows;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "axis,value,seed,acc,ece,aece,oe,ue,ece_post_ts,status\n";
  for (const auto& r : rows) {
    std::string status = r.status;
    for (char& c : status) {
      if (c == ',' || c == '\n' || c == '\r') c = ';';
    }
    out += to_string(r.axis) + ',' + csv::format_shortest(r.value) + ',' + std::to_string(r.seed) + ',';
    if (r.ok()) {
      out += csv::format_double(r.test.acc) + ',' + csv::format_double(r.test.ece) + ',' +
             csv::format_double(r.test.aece) + ',' + csv::format_double(r.test.oe) + ',' +
             csv::format_double(r.test.ue) + ',' + csv::format_double(r.ece_post_ts);
    } else {
      out += ",,,,,";
    }
    out += ',' + status + '\n';
  }
  return out;
}

}  // namespace rankcal

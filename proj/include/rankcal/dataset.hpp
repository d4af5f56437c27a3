#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rankcal/csv.hpp"
#include "rankcal/error.hpp"
#include "rankcal/rng.hpp"
#include "rankcal/tensor.hpp"

namespace rankcal {

enum class SplitTag { train, val, test };

inline const char* to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "?";
}

/// Feature matrix [N×D] with one class label in [0, K) per row.
struct LabeledDataset {
  Tensor features;
  std::vector<int> labels;
  int num_classes = 0;
  SplitTag split = SplitTag::train;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  void validate() const {
    if (num_classes < 2) throw ContractError("dataset needs at least 2 classes");
    if (features.rank() != 2 || features.rows() != labels.size()) {
      throw DimensionError("dataset has " + std::to_string(labels.size()) + " labels for features " +
                           to_string(features.shape));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || labels[i] >= num_classes) {
        throw ContractError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                            " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

/// Rows `indices` of `ds`, in the given order.
inline LabeledDataset subset(const LabeledDataset& ds, std::span<const std::size_t> indices, SplitTag tag) {
  const std::size_t d = ds.dim();
  std::vector<double> data;
  data.reserve(indices.size() * d);
  std::vector<int> labels;
  labels.reserve(indices.size());
  for (std::size_t i : indices) {
    auto row = ds.features.data.begin() + static_cast<std::ptrdiff_t>(i * d);
    data.insert(data.end(), row, row + static_cast<std::ptrdiff_t>(d));
    labels.push_back(ds.labels[i]);
  }
  return {Tensor({indices.size(), d}, std::move(data)), std::move(labels), ds.num_classes, tag};
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian mixtures

struct SyntheticSpec {
  int classes = 10;
  std::size_t dim = 32;
  std::size_t n_per_class = 1200;
  double spread = 1.0;  // within-class standard deviation
  double radius = 1.0;  // norm of every class mean
  std::uint64_t seed = 1;
  // Selects a fresh noise stream while keeping the class means of `seed`.
  std::uint64_t sample_salt = 0;

  void validate() const {
    if (classes < 2) throw ContractError("synthetic spec: classes must be >= 2");
    if (dim < 1 || n_per_class < 1) throw ContractError("synthetic spec: dim and n_per_class must be >= 1");
    if (!(std::isfinite(spread) && spread > 0.0) || !(std::isfinite(radius) && radius > 0.0)) {
      throw ContractError("synthetic spec: spread and radius must be finite and positive");
    }
  }
};

namespace detail {

inline std::vector<double> random_unit_vector(Rng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& x : v) {
      x = rng.normal();
      norm += x * x;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

inline std::vector<std::vector<double>> class_means(const SyntheticSpec& spec) {
  Rng rng(mix_seed(spec.seed, 0));
  std::vector<std::vector<double>> means;
  for (int c = 0; c < spec.classes; ++c) {
    auto m = random_unit_vector(rng, spec.dim);
    for (double& x : m) x *= spec.radius;
    means.push_back(std::move(m));
  }
  return means;
}

inline LabeledDataset sample_mixture(const SyntheticSpec& spec, const std::vector<std::vector<double>>& means) {
  Rng rng(mix_seed(spec.seed ^ (spec.sample_salt * 0x2545F4914F6CDD1DULL), 1));
  const std::size_t n = spec.n_per_class * static_cast<std::size_t>(spec.classes);
  LabeledDataset ds{Tensor({n, spec.dim}), std::vector<int>(n), spec.classes, SplitTag::train};
  std::size_t row = 0;
  for (int c = 0; c < spec.classes; ++c) {
    for (std::size_t k = 0; k < spec.n_per_class; ++k, ++row) {
      for (std::size_t j = 0; j < spec.dim; ++j) {
        ds.features(row, j) = means[static_cast<std::size_t>(c)][j] + spec.spread * rng.normal();
      }
      ds.labels[row] = c;
    }
  }
  return ds;
}

}  // namespace detail

/// Isotropic Gaussian classes around means placed on a sphere of the given
/// radius. Rows are ordered by class. Pure function of `spec`.
inline LabeledDataset generate_gaussian_mixture(const SyntheticSpec& spec) {
  spec.validate();
  return detail::sample_mixture(spec, detail::class_means(spec));
}

/// Same generator with every class mean translated by shift·radius along one
/// seed-determined unit direction. shift = 0 reproduces the in-distribution data.
inline LabeledDataset generate_ood_shift(const SyntheticSpec& spec, double shift) {
  spec.validate();
  if (!(shift >= 0.0) || !std::isfinite(shift)) throw ContractError("ood shift must be finite and >= 0");
  auto means = detail::class_means(spec);
  Rng rng(mix_seed(spec.seed, 2));
  const auto direction = detail::random_unit_vector(rng, spec.dim);
  for (auto& m : means) {
    for (std::size_t j = 0; j < spec.dim; ++j) m[j] += shift * spec.radius * direction[j];
  }
  auto ds = detail::sample_mixture(spec, means);
  ds.split = SplitTag::test;
  return ds;
}

// ---------------------------------------------------------------------------
// Stratified splitting

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Index sets of a stratified train/val/test partition, each sorted ascending.
inline std::array<std::vector<std::size_t>, 3> split_indices(const LabeledDataset& ds, SplitFractions f,
                                                             std::uint64_t seed) {
  ds.validate();
  const std::array<double, 3> fr{f.train, f.val, f.test};
  for (double x : fr) {
    if (!(x > 0.0)) throw ContractError("split fractions must be positive");
  }
  if (std::abs(fr[0] + fr[1] + fr[2] - 1.0) > 1e-9) throw ContractError("split fractions must sum to 1");

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(ds.num_classes));
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);

  Rng rng(mix_seed(seed, 3));
  std::array<std::vector<std::size_t>, 3> out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& members = by_class[c];
    const std::size_t n = members.size();
    if (n == 0) continue;
    if (n < 3) {
      throw ContractError("stratification: class " + std::to_string(c) + " has " + std::to_string(n) +
                          " samples, fewer than the 3 splits");
    }
    rng.shuffle(std::span<std::size_t>(members));
    std::array<std::size_t, 3> count{};
    count[0] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fr[0] * static_cast<double>(n))));
    count[1] = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fr[1] * static_cast<double>(n))));
    while (count[0] + count[1] >= n) {
      --count[count[0] >= count[1] ? 0 : 1];
    }
    count[2] = n - count[0] - count[1];
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      out[s].insert(out[s].end(), members.begin() + static_cast<std::ptrdiff_t>(pos),
                    members.begin() + static_cast<std::ptrdiff_t>(pos + count[s]));
      pos += count[s];
    }
  }
  for (auto& idx : out) std::sort(idx.begin(), idx.end());
  return out;
}

struct DatasetSplits {
  LabeledDataset train;
  LabeledDataset val;
  LabeledDataset test;
};

inline DatasetSplits split(const LabeledDataset& ds, SplitFractions f, std::uint64_t seed) {
  const auto idx = split_indices(ds, f, seed);
  return {subset(ds, idx[0], SplitTag::train), subset(ds, idx[1], SplitTag::val),
          subset(ds, idx[2], SplitTag::test)};
}

// ---------------------------------------------------------------------------
// CSV persistence: header f0,...,f{D-1},label

inline void save_csv(const LabeledDataset& ds, const std::filesystem::path& path) {
  ds.validate();
  csv::write_atomic(path, csv::write_labeled_table('f', ds.features, ds.labels));
}

/// Loads a dataset. With `num_classes` given, labels >= num_classes are parse
/// errors; otherwise K is inferred as max(label)+1 (at least 2).
inline LabeledDataset load_csv(const std::filesystem::path& path, std::optional<int> num_classes = std::nullopt,
                               SplitTag tag = SplitTag::train) {
  if (num_classes && *num_classes < 2) throw ContractError("num_classes must be >= 2");
  std::optional<int> max_label;
  if (num_classes) max_label = *num_classes - 1;
  auto table = csv::read_labeled_table(path, 'f', max_label);
  int k = num_classes.value_or(0);
  if (!num_classes) {
    k = 2;
    for (int l : table.labels) k = std::max(k, l + 1);
  }
  return {std::move(table.values), std::move(table.labels), k, tag};
}

}  // namespace rankcal

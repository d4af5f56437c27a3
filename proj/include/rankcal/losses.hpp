#pragma once

// Training objectives: cross-entropy on raw samples, the mixup ranking loss
// (MRL) and the mixup NDCG loss (M-NDCG), plus their weighted combination.
//
// The ranking losses read confidences (max softmax probabilities) from one
// graph-connected vector. A GroupConfidences names which entries of that vector
// belong to an anchor and its mixed samples.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rankcal/autodiff.hpp"
#include "rankcal/error.hpp"

namespace rankcal {

enum class LossMode { ce_only, mrl, m_ndcg };

inline const char* to_string(LossMode mode) {
  switch (mode) {
    case LossMode::ce_only: return "ce";
    case LossMode::mrl: return "mrl";
    case LossMode::m_ndcg: return "m-ndcg";
  }
  return "?";
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "ce" || s == "ce-only") return LossMode::ce_only;
  if (s == "mrl") return LossMode::mrl;
  if (s == "m-ndcg" || s == "mndcg") return LossMode::m_ndcg;
  throw ContractError("unknown loss mode '" + s + "' (expected ce, mrl or m-ndcg)");
}

struct LossConfig {
  LossMode mode = LossMode::m_ndcg;
  double w = 0.1;       // weight of the calibration term
  double margin = 2.0;  // MRL only

  void validate() const {
    if (!(std::isfinite(w) && w >= 0.0)) throw ContractError("loss weight w must be finite and >= 0");
    if (!(std::isfinite(margin) && margin >= 0.0)) throw ContractError("margin must be finite and >= 0");
  }
};

/// Positions of one anchor and its mixed samples inside a confidence vector.
struct GroupConfidences {
  std::size_t raw = 0;
  std::vector<std::size_t> augmented;
  std::vector<double> lambdas;  // coefficient of the anchor in each mixed sample
};

/// Graph-connected confidences shared by a batch of groups.
struct ConfidenceBatch {
  Var confidences;
  std::vector<GroupConfidences> groups;

  void validate() const {
    if (groups.empty()) throw ContractError("confidence batch has no groups");
    const std::size_t n = confidences.value().size();
    for (const auto& g : groups) {
      if (g.augmented.empty()) throw ContractError("group needs at least one augmented confidence");
      if (g.augmented.size() != g.lambdas.size()) {
        throw ContractError("group has " + std::to_string(g.augmented.size()) + " confidences but " +
                            std::to_string(g.lambdas.size()) + " coefficients");
      }
      if (g.raw >= n) throw DimensionError("raw confidence index out of range");
      for (std::size_t a : g.augmented) {
        if (a >= n) throw DimensionError("augmented confidence index out of range");
      }
    }
  }
};

/// Mean negative log-likelihood of `labels` under softmax(logits), evaluated
/// through log-softmax.
inline Var cross_entropy(Var logits, std::span<const int> labels) {
  return scale(mean(pick(log_softmax(logits), labels)), -1.0);
}

/// Mean over groups, and over each group's mixed samples, of
/// max(0, conf_aug − conf_raw + m).
inline Var mrl(const ConfidenceBatch& batch, double margin) {
  batch.validate();
  std::vector<SparseRow> diffs;
  SparseRow weights;
  const double per_group = 1.0 / static_cast<double>(batch.groups.size());
  for (const auto& g : batch.groups) {
    const double w = per_group / static_cast<double>(g.augmented.size());
    for (std::size_t a : g.augmented) {
      weights.terms.emplace_back(diffs.size(), w);
      diffs.push_back(SparseRow{{{a, 1.0}, {g.raw, -1.0}}});
    }
  }
  Var hinge = relu(add_scalar(linear_map(batch.confidences, std::move(diffs)), margin));
  return sum(linear_map(hinge, {std::move(weights)}));
}

/// 1 / log2(position + 1) for 1-based positions.
inline double rank_discount(std::size_t position) {
  return 1.0 / std::log2(static_cast<double>(position) + 1.0);
}

/// Order in which a group's mixed samples occupy positions 2..Q: coefficients
/// descending, ties kept in original order.
inline std::vector<std::size_t> lambda_order(const GroupConfidences& g) {
  std::vector<std::size_t> order(g.lambdas.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return g.lambdas[a] > g.lambdas[b]; });
  return order;
}

/// Ideal DCG of a group: the anchor's implicit coefficient 1 at position 1,
/// then the sorted coefficients.
inline double idcg(const GroupConfidences& g) {
  double total = rank_discount(1) * 1.0;
  const auto order = lambda_order(g);
  for (std::size_t q = 0; q < order.size(); ++q) total += rank_discount(q + 2) * g.lambdas[order[q]];
  return total;
}

namespace detail {

inline SparseRow dcg_row(const GroupConfidences& g) {
  SparseRow row;
  row.terms.emplace_back(g.raw, rank_discount(1));
  const auto order = lambda_order(g);
  for (std::size_t q = 0; q < order.size(); ++q) {
    row.terms.emplace_back(g.augmented[order[q]], rank_discount(q + 2));
  }
  return row;
}

}  // namespace detail

struct DcgPair {
  Var dcg;      // graph-connected
  double idcg;  // constant
};

/// DCG and IDCG of group `index`. The anchor's confidence sits at position 1 and
/// each mixed confidence at the position of its coefficient in descending order.
inline DcgPair dcg_idcg(const ConfidenceBatch& batch, std::size_t index) {
  batch.validate();
  const auto& g = batch.groups.at(index);
  return {sum(linear_map(batch.confidences, {detail::dcg_row(g)})), idcg(g)};
}

/// Mean over groups of 1 − DCG/IDCG. Not clamped: confidences above their
/// coefficients drive it below zero.
inline Var m_ndcg(const ConfidenceBatch& batch) {
  batch.validate();
  std::vector<SparseRow> dcg_rows;
  std::vector<double> ideal;
  for (const auto& g : batch.groups) {
    dcg_rows.push_back(detail::dcg_row(g));
    ideal.push_back(idcg(g));
  }
  Graph& graph = batch.confidences.graph();
  Var ratio = divide(linear_map(batch.confidences, std::move(dcg_rows)), graph.constant(Tensor::vector(ideal)));
  return add_scalar(scale(mean(ratio), -1.0), 1.0);
}

/// ce + w·calib, or ce alone in CE-only mode.
inline Var total_loss(Var ce, std::optional<Var> calib, const LossConfig& cfg) {
  cfg.validate();
  if (cfg.mode == LossMode::ce_only) return ce;
  if (!calib) throw ContractError("calibration term required for mode " + std::string(to_string(cfg.mode)));
  return add(ce, scale(*calib, cfg.w));
}

}  // namespace rankcal

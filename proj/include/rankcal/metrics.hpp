#pragma once

// Evaluation metrics over predictions: accuracy, ECE/AECE, over- and
// under-confidence errors, entropy and AUROC. None of these are differentiable.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "rankcal/csv.hpp"
#include "rankcal/error.hpp"
#include "rankcal/tensor.hpp"

namespace rankcal {

struct PredictionSet {
  std::vector<double> confidences;
  std::vector<int> predicted;
  std::vector<std::uint8_t> correct;

  std::size_t size() const noexcept { return confidences.size(); }
};

/// Argmax class (lowest index on ties), its probability and correctness per row.
inline PredictionSet predict(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2) throw DimensionError("predict expects N×K probabilities, got " + to_string(probs.shape));
  const std::size_t n = probs.rows();
  const std::size_t k = probs.cols();
  if (labels.size() != n) throw DimensionError("predict: label count differs from row count");
  PredictionSet ps;
  ps.confidences.reserve(n);
  ps.predicted.reserve(n);
  ps.correct.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    std::size_t best = 0;
    for (std::size_t j = 0; j < k; ++j) {
      total += probs(i, j);
      if (probs(i, j) > probs(i, best)) best = j;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ContractError("predict: row " + std::to_string(i) + " sums to " + csv::format_double(total));
    }
    ps.confidences.push_back(probs(i, best));
    ps.predicted.push_back(static_cast<int>(best));
    ps.correct.push_back(static_cast<int>(best) == labels[i] ? 1 : 0);
  }
  return ps;
}

inline double accuracy(const PredictionSet& ps) {
  if (ps.size() == 0) throw ContractError("accuracy of an empty prediction set");
  std::size_t hits = 0;
  for (auto c : ps.correct) hits += c;
  return static_cast<double>(hits) / static_cast<double>(ps.size());
}

// ---------------------------------------------------------------------------
// Reliability tables

enum class BinScheme { equal_width, equal_mass };

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_conf = 0.0;  // 0 for empty bins
  double mean_acc = 0.0;   // 0 for empty bins
};

struct ReliabilityTable {
  BinScheme scheme = BinScheme::equal_width;
  std::vector<ReliabilityBin> bins;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& b : bins) n += b.count;
    return n;
  }
};

inline double bin_edge(std::size_t h, std::size_t bins) {
  return static_cast<double>(h) / static_cast<double>(bins);
}

/// Equal-width bin of a confidence: bin h covers (h/H, (h+1)/H], bin 0 also holds 0.
inline std::size_t equal_width_bin(double conf, std::size_t bins) {
  std::size_t h = 0;
  if (conf > 0.0) {
    const double scaled = std::ceil(conf * static_cast<double>(bins));
    h = scaled < 1.0 ? 0 : std::min(bins - 1, static_cast<std::size_t>(scaled) - 1);
  }
  while (h > 0 && conf <= bin_edge(h, bins)) --h;
  while (h + 1 < bins && conf > bin_edge(h + 1, bins)) ++h;
  return h;
}

namespace detail {

inline void check_binning(const PredictionSet& ps, std::size_t bins) {
  if (bins < 1) throw ContractError("number of bins must be >= 1");
  if (ps.size() == 0) throw ContractError("calibration metrics need at least one prediction");
  if (ps.correct.size() != ps.size()) throw DimensionError("prediction set fields differ in length");
}

inline void finish_bin(ReliabilityBin& b, double conf_sum, double acc_sum) {
  if (b.count == 0) return;
  b.mean_conf = conf_sum / static_cast<double>(b.count);
  b.mean_acc = acc_sum / static_cast<double>(b.count);
}

// Sample order for equal-mass binning: ascending confidence, then correctness,
// so the order depends only on the multiset of (confidence, correct) pairs.
inline std::vector<std::size_t> mass_order(const PredictionSet& ps) {
  std::vector<std::size_t> order(ps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (ps.confidences[a] != ps.confidences[b]) return ps.confidences[a] < ps.confidences[b];
    return ps.correct[a] < ps.correct[b];
  });
  return order;
}

}  // namespace detail

/// Contiguous [begin, end) ranges of the sorted confidences for equal-mass bins.
/// Bin h targets ⌊N/H⌋ samples plus one for the first N mod H bins; a boundary
/// that would split equal confidences moves right past them.
inline std::vector<std::pair<std::size_t, std::size_t>> equal_mass_ranges(std::span<const double> sorted_conf,
                                                                           std::size_t bins) {
  const std::size_t n = sorted_conf.size();
  const std::size_t base = n / bins;
  const std::size_t extra = n % bins;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  std::size_t start = 0;
  std::size_t target = 0;
  for (std::size_t h = 0; h < bins; ++h) {
    target += base + (h < extra ? 1 : 0);
    std::size_t end = std::max(start, target);
    while (end > start && end < n && sorted_conf[end] == sorted_conf[end - 1]) ++end;
    ranges.emplace_back(start, end);
    start = end;
  }
  return ranges;
}

inline ReliabilityTable reliability_table(const PredictionSet& ps, std::size_t bins,
                                          BinScheme scheme = BinScheme::equal_width) {
  detail::check_binning(ps, bins);
  ReliabilityTable table{scheme, std::vector<ReliabilityBin>(bins)};
  if (scheme == BinScheme::equal_width) {
    std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::size_t h = equal_width_bin(ps.confidences[i], bins);
      table.bins[h].count += 1;
      conf_sum[h] += ps.confidences[i];
      acc_sum[h] += ps.correct[i] ? 1.0 : 0.0;
    }
    for (std::size_t h = 0; h < bins; ++h) {
      table.bins[h].lower = bin_edge(h, bins);
      table.bins[h].upper = bin_edge(h + 1, bins);
      detail::finish_bin(table.bins[h], conf_sum[h], acc_sum[h]);
    }
    return table;
  }

  const auto order = detail::mass_order(ps);
  std::vector<double> sorted(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = ps.confidences[order[i]];
  const auto ranges = equal_mass_ranges(sorted, bins);
  for (std::size_t h = 0; h < bins; ++h) {
    auto [begin, end] = ranges[h];
    ReliabilityBin& b = table.bins[h];
    b.count = end - begin;
    if (b.count == 0) continue;
    double conf_sum = 0.0, acc_sum = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      conf_sum += ps.confidences[order[i]];
      acc_sum += ps.correct[order[i]] ? 1.0 : 0.0;
    }
    b.lower = sorted[begin];
    b.upper = sorted[end - 1];
    detail::finish_bin(b, conf_sum, acc_sum);
  }
  return table;
}

/// Σ (|B|/N)·|acc(B) − conf(B)|
inline double calibration_error(const ReliabilityTable& t) {
  const double n = static_cast<double>(t.total());
  double e = 0.0;
  for (const auto& b : t.bins) {
    if (b.count == 0) continue;
    e += (static_cast<double>(b.count) / n) * std::abs(b.mean_acc - b.mean_conf);
  }
  return e;
}

/// Σ (|B|/N)·conf(B)·max(conf(B) − acc(B), 0)
inline double overconfidence_error(const ReliabilityTable& t) {
  const double n = static_cast<double>(t.total());
  double e = 0.0;
  for (const auto& b : t.bins) {
    if (b.count == 0) continue;
    e += (static_cast<double>(b.count) / n) * (b.mean_conf * std::max(b.mean_conf - b.mean_acc, 0.0));
  }
  return e;
}

/// Σ (|B|/N)·conf(B)·max(acc(B) − conf(B), 0)
inline double underconfidence_error(const ReliabilityTable& t) {
  const double n = static_cast<double>(t.total());
  double e = 0.0;
  for (const auto& b : t.bins) {
    if (b.count == 0) continue;
    e += (static_cast<double>(b.count) / n) * (b.mean_conf * std::max(b.mean_acc - b.mean_conf, 0.0));
  }
  return e;
}

inline double ece(const PredictionSet& ps, std::size_t bins = 15) {
  return calibration_error(reliability_table(ps, bins, BinScheme::equal_width));
}

inline double aece(const PredictionSet& ps, std::size_t bins = 15) {
  return calibration_error(reliability_table(ps, bins, BinScheme::equal_mass));
}

inline double oe(const PredictionSet& ps, std::size_t bins = 15) {
  return overconfidence_error(reliability_table(ps, bins, BinScheme::equal_width));
}

inline double ue(const PredictionSet& ps, std::size_t bins = 15) {
  return underconfidence_error(reliability_table(ps, bins, BinScheme::equal_width));
}

inline std::string reliability_csv(const ReliabilityTable& t) {
  std::string out = "bin_lower,bin_upper,count,mean_conf,mean_acc\n";
  for (const auto& b : t.bins) {
    out += csv::format_double(b.lower) + ',' + csv::format_double(b.upper) + ',' + std::to_string(b.count) + ',' +
           csv::format_double(b.mean_conf) + ',' + csv::format_double(b.mean_acc) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Uncertainty and OOD scoring

/// −Σ p log p, with 0·log 0 = 0.
inline double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

/// Row-wise entropies of an N×K probability matrix.
inline std::vector<double> entropies(const Tensor& probs) {
  const std::size_t k = probs.cols();
  std::vector<double> out(probs.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = entropy(std::span<const double>(probs.data.data() + i * k, k));
  }
  return out;
}

/// Area under the ROC curve with OOD as the positive class and higher scores
/// meaning "more OOD": (#{ood > id} + ½·#{ood == id}) / (n_id·n_ood), from
/// mid-rank sums.
inline double auroc(std::span<const double> scores_id, std::span<const double> scores_ood) {
  if (scores_id.empty() || scores_ood.empty()) throw ContractError("auroc needs non-empty score sets");
  const std::size_t n_id = scores_id.size();
  const std::size_t n_ood = scores_ood.size();
  std::vector<std::pair<double, bool>> all;
  all.reserve(n_id + n_ood);
  for (double s : scores_id) all.emplace_back(s, false);
  for (double s : scores_ood) all.emplace_back(s, true);
  for (const auto& [s, _] : all) {
    if (std::isnan(s)) throw NumericalError("auroc: NaN score");
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0.0;  // mid-ranks are half-integers, so this sum is exact
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::size_t positives = 0;
    while (j < all.size() && all[j].first == all[i].first) {
      positives += all[j].second ? 1 : 0;
      ++j;
    }
    const double mid_rank = static_cast<double>(i + 1 + j) / 2.0;
    rank_sum += mid_rank * static_cast<double>(positives);
    i = j;
  }
  const double u = rank_sum - static_cast<double>(n_ood) * static_cast<double>(n_ood + 1) / 2.0;
  return u / (static_cast<double>(n_id) * static_cast<double>(n_ood));
}

}  // namespace rankcal

#pragma once

// Post-hoc temperature scaling fitted on validation logits.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rankcal/csv.hpp"
#include "rankcal/error.hpp"
#include "rankcal/tensor.hpp"

namespace rankcal {

/// softmax(z / T) row-wise. With T = 1 the result is bitwise equal to the
/// autodiff softmax.
inline Tensor apply_temperature(const Tensor& logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ContractError("temperature must be finite and positive");
  }
  if (logits.rank() != 2) throw DimensionError("expected N×K logits, got " + to_string(logits.shape));
  const std::size_t k = logits.cols();
  Tensor out(logits.shape);
  std::vector<double> z(k);
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    for (std::size_t j = 0; j < k; ++j) z[j] = logits(r, j) / temperature;
    const double mx = *std::max_element(z.begin(), z.end());
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out(r, j) = std::exp(z[j] - mx);
      total += out(r, j);
    }
    for (std::size_t j = 0; j < k; ++j) out(r, j) /= total;
  }
  return out;
}

/// Mean −log softmax(z/T)[label].
inline double temperature_nll(const Tensor& logits, std::span<const int> labels, double temperature) {
  const std::size_t k = logits.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double mx = logits(r, 0) / temperature;
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, logits(r, j) / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(logits(r, j) / temperature - mx);
    total += mx + std::log(s) - logits(r, static_cast<std::size_t>(labels[r])) / temperature;
  }
  return total / static_cast<double>(logits.rows());
}

struct Temperature {
  double value = 1.0;
  double val_nll_before = 0.0;
  double val_nll_after = 0.0;
  bool degenerate = false;  // every logit row constant; T left at 1
  bool clipped = false;     // optimum sits on the search boundary
};

struct TemperatureSearch {
  double min_t = 0.05;
  double max_t = 10.0;
  double log_tolerance = 1e-4;
};

/// T minimising validation NLL of softmax(z/T), by golden-section search on
/// log T. Never returns a T with higher NLL than T = 1.
inline Temperature fit_temperature(const Tensor& logits, std::span<const int> labels, TemperatureSearch search = {}) {
  if (logits.rank() != 2 || logits.rows() == 0) throw ContractError("fit_temperature needs N >= 1 logit rows");
  if (labels.size() != logits.rows()) throw DimensionError("fit_temperature: label count differs from rows");
  const std::size_t k = logits.cols();
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw ContractError("fit_temperature: label out of range at row " + std::to_string(r));
    }
  }

  Temperature t;
  t.val_nll_before = temperature_nll(logits, labels, 1.0);
  if (!std::isfinite(t.val_nll_before)) throw NumericalError("fit_temperature: non-finite NLL at T = 1");

  bool all_flat = true;
  for (std::size_t r = 0; r < logits.rows() && all_flat; ++r) {
    for (std::size_t j = 1; j < k; ++j) {
      if (logits(r, j) != logits(r, 0)) {
        all_flat = false;
        break;
      }
    }
  }
  if (all_flat) {
    t.degenerate = true;
    t.val_nll_after = t.val_nll_before;
    return t;
  }

  auto nll_at = [&](double log_t) { return temperature_nll(logits, labels, std::exp(log_t)); };
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(search.min_t);
  double b = std::log(search.max_t);
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = nll_at(c);
  double fd = nll_at(d);
  while (b - a > search.log_tolerance) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = nll_at(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = nll_at(d);
    }
  }
  const double best_log = 0.5 * (a + b);
  t.value = std::exp(best_log);
  t.val_nll_after = nll_at(best_log);
  t.clipped = best_log - std::log(search.min_t) <= search.log_tolerance ||
              std::log(search.max_t) - best_log <= search.log_tolerance;
  if (!(t.val_nll_after <= t.val_nll_before)) {
    t.value = 1.0;
    t.val_nll_after = t.val_nll_before;
  }
  return t;
}

inline std::string temperature_csv(const Temperature& t) {
  return "T,val_nll_before,val_nll_after\n" + csv::format_double(t.value) + ',' +
         csv::format_double(t.val_nll_before) + ',' + csv::format_double(t.val_nll_after) + '\n';
}

inline Temperature read_temperature_csv(const std::filesystem::path& path) {
  const auto lines = csv::read_lines(path);
  if (lines.empty() || lines[0] != "T,val_nll_before,val_nll_after") {
    throw ParseError(path.string(), 1, "expected header T,val_nll_before,val_nll_after");
  }
  if (lines.size() < 2) throw ParseError(path.string(), 2, "missing temperature row");
  const auto f = csv::split(lines[1]);
  if (f.size() != 3) throw ParseError(path.string(), 2, "expected 3 fields");
  Temperature t;
  const auto v = csv::parse_double(f[0]);
  const auto before = csv::parse_double(f[1]);
  const auto after = csv::parse_double(f[2]);
  if (!v || !before || !after || !(*v > 0.0)) throw ParseError(path.string(), 2, "invalid temperature row");
  t.value = *v;
  t.val_nll_before = *before;
  t.val_nll_after = *after;
  return t;
}

}  // namespace rankcal

#pragma once

// Mixup augmentation with symmetric Beta coefficients, and the anchor/partner
// groups consumed by the ranking losses. Groups carry no labels: partners
// contribute only their inputs.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rankcal/error.hpp"
#include "rankcal/rng.hpp"
#include "rankcal/tensor.hpp"

namespace rankcal {

struct BetaParams {
  double alpha = 1.0;

  void validate() const {
    if (!(std::isfinite(alpha) && alpha > 0.0)) {
      throw ContractError("Beta shape parameter must be finite and positive");
    }
  }
};

/// log of a Gamma(shape, 1) draw. Marsaglia–Tsang squeeze/rejection for
/// shape >= 1; shape < 1 uses Gamma(shape+1)·U^(1/shape), kept in log space so
/// tiny shapes do not underflow.
inline double sample_log_gamma(double shape, Rng& rng) {
  if (shape < 1.0) {
    const double boosted = sample_log_gamma(shape + 1.0, rng);
    return boosted + std::log(rng.uniform_open()) / shape;
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_open();
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return std::log(d * v);
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return std::log(d * v);
  }
}

/// Draw from Beta(α, α) as G1/(G1+G2), strictly inside (0, 1).
inline double sample_beta(const BetaParams& params, Rng& rng) {
  params.validate();
  while (true) {
    const double lg1 = sample_log_gamma(params.alpha, rng);
    const double lg2 = sample_log_gamma(params.alpha, rng);
    const double l = 1.0 / (1.0 + std::exp(lg2 - lg1));
    if (l > 0.0 && l < 1.0) return l;
  }
}

/// Maps a coefficient to the dominant side: max(l, 1 − l).
inline double fold_lambda(double l) {
  if (!(l > 0.0 && l < 1.0)) throw ContractError("fold_lambda expects a coefficient in (0, 1)");
  return l >= 0.5 ? l : 1.0 - l;
}

/// λ·xi + (1 − λ)·xj
inline std::vector<double> mix_pair(std::span<const double> xi, std::span<const double> xj, double lambda) {
  if (!(lambda >= 0.5 && lambda <= 1.0)) throw ContractError("mix_pair expects lambda in [0.5, 1]");
  if (xi.size() != xj.size()) {
    throw DimensionError("mix_pair: rows of length " + std::to_string(xi.size()) + " and " +
                         std::to_string(xj.size()));
  }
  std::vector<double> out(xi.size());
  for (std::size_t k = 0; k < xi.size(); ++k) out[k] = lambda * xi[k] + (1.0 - lambda) * xj[k];
  return out;
}

/// One anchor row and its Q−1 mixed versions.
struct MixupGroup {
  std::size_t anchor_index = 0;
  std::vector<std::size_t> partner_indices;  // Q−1 entries, none equal to anchor_index
  std::vector<double> lambdas;               // Q−1 folded coefficients in [0.5, 1]
  Tensor mixed_inputs;                       // (Q−1)×D; row q mixes anchor with partner q
  std::size_t group_size = 2;                // Q
};

/// Builds one group per row of `batch` (a B×D feature slice).
///
/// Partners come from Q−1 independent random permutations of the batch; any
/// fixed point is swapped with a random other position, so no row is mixed with
/// itself. Coefficients are drawn independently per (anchor, q) and folded.
inline std::vector<MixupGroup> build_groups(const Tensor& batch, std::size_t group_size,
                                            const BetaParams& params, Rng& rng) {
  params.validate();
  if (batch.rank() != 2) throw DimensionError("build_groups expects a B×D batch, got " + to_string(batch.shape));
  const std::size_t b = batch.rows();
  const std::size_t d = batch.cols();
  if (b < 2) throw ContractError("build_groups needs a batch of at least 2 rows, got " + std::to_string(b));
  if (group_size < 2) throw ContractError("group size Q must be >= 2");
  const std::size_t n_mix = group_size - 1;

  std::vector<std::vector<std::size_t>> partners(n_mix, std::vector<std::size_t>(b));
  for (auto& perm : partners) {
    for (std::size_t i = 0; i < b; ++i) perm[i] = i;
    rng.shuffle(std::span<std::size_t>(perm));
    for (std::size_t i = 0; i < b; ++i) {
      if (perm[i] != i) continue;
      std::size_t j = static_cast<std::size_t>(rng.uniform_index(b - 1));
      if (j >= i) ++j;
      std::swap(perm[i], perm[j]);
    }
  }

  std::vector<MixupGroup> groups(b);
  for (std::size_t i = 0; i < b; ++i) {
    MixupGroup& g = groups[i];
    g.anchor_index = i;
    g.group_size = group_size;
    g.mixed_inputs = Tensor({n_mix, d});
    for (std::size_t q = 0; q < n_mix; ++q) {
      const std::size_t j = partners[q][i];
      const double lambda = fold_lambda(sample_beta(params, rng));
      g.partner_indices.push_back(j);
      g.lambdas.push_back(lambda);
      for (std::size_t k = 0; k < d; ++k) {
        g.mixed_inputs(q, k) = lambda * batch(i, k) + (1.0 - lambda) * batch(j, k);
      }
    }
  }
  return groups;
}

}  // namespace rankcal

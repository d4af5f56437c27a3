#pragma once

// Random instance generators and brute-force oracles shared by the test suites.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "rankcal/tensor.hpp"
#include "rankcal/train.hpp"

namespace testing_support {

using rankcal::Tensor;

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : eng_(seed) {}

  double uniform(double lo = 0.0, double hi = 1.0) {
    return lo + (hi - lo) * (static_cast<double>(eng_() >> 11) * 0x1.0p-53);
  }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(eng_() % n); }
  bool coin(double p = 0.5) { return uniform() < p; }
  // Box–Muller; tests need shape, not speed.
  double normal() {
    const double u = uniform(1e-300, 1.0);
    const double v = uniform();
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * M_PI * v);
  }
  Tensor matrix(std::size_t r, std::size_t c, double scale = 1.0) {
    Tensor t({r, c});
    for (double& x : t.data) x = scale * normal();
    return t;
  }
  std::vector<int> labels(std::size_t n, int k) {
    std::vector<int> out(n);
    for (int& l : out) l = static_cast<int>(index(static_cast<std::size_t>(k)));
    return out;
  }

 private:
  std::mt19937_64 eng_;
};

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.rows(), b.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// Max |analytic - central difference| / max(1, |analytic|) of one training
/// step's gradient, re-running the real step with identical mixup draws.
inline double step_gradient_error(const rankcal::Model& model, const rankcal::LabeledDataset& batch,
                                  const rankcal::TrainConfig& cfg, std::uint64_t mix_seed, double h = 1e-5) {
  rankcal::Rng r0(mix_seed);
  const auto analytic = rankcal::batch_gradients(model, batch, cfg, r0).grads;
  rankcal::Model probe = model;
  auto params = probe.parameters();
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p]->size(); ++i) {
      const double orig = params[p]->data[i];
      params[p]->data[i] = orig + h;
      rankcal::Rng ru(mix_seed);
      const double up = rankcal::batch_gradients(probe, batch, cfg, ru).loss;
      params[p]->data[i] = orig - h;
      rankcal::Rng rd(mix_seed);
      const double down = rankcal::batch_gradients(probe, batch, cfg, rd).loss;
      params[p]->data[i] = orig;
      const double a = analytic[p].data[i];
      worst = std::max(worst, std::abs(a - (up - down) / (2.0 * h)) / std::max(1.0, std::abs(a)));
    }
  }
  return worst;
}

}  // namespace testing_support

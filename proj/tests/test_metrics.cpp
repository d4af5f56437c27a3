#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "rankcal/metrics.hpp"
#include "metric_oracles.hpp"

using namespace rankcal;
using namespace testing_support;

namespace {

PredictionSet make_set(const std::vector<double>& conf, const std::vector<int>& correct) {
  PredictionSet ps;
  ps.confidences = conf;
  for (int c : correct) {
    ps.correct.push_back(static_cast<std::uint8_t>(c));
    ps.predicted.push_back(0);
  }
  return ps;
}

}  // namespace

TEST(Predict, Examples) {
  const auto ps = predict(Tensor::matrix(2, 3, {0.2, 0.5, 0.3, 0.5, 0.5, 0.0}), std::vector<int>{1, 1});
  EXPECT_EQ(ps.predicted, (std::vector<int>{1, 0}));
  EXPECT_EQ(ps.confidences, (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(ps.correct, (std::vector<std::uint8_t>{1, 0}));
}

TEST(Predict, MatchesLinearScan) {
  Gen gen(1);
  Tensor p({60, 4});
  for (std::size_t i = 0; i < 60; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 4; ++k) s += p(i, k) = gen.uniform(0.0, 1.0);
    for (std::size_t k = 0; k < 4; ++k) p(i, k) /= s;
  }
  const auto y = gen.labels(60, 4);
  const auto ps = predict(p, y);
  for (std::size_t i = 0; i < 60; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 4; ++k) best = p(i, k) > p(i, best) ? k : best;
    EXPECT_EQ(ps.predicted[i], static_cast<int>(best));
    EXPECT_EQ(ps.confidences[i], p(i, best));
    EXPECT_EQ(ps.correct[i], static_cast<int>(best) == y[i]);
  }
}

TEST(Predict, UnnormalisedRowNamesTheRow) {
  try {
    predict(Tensor::matrix(2, 2, {0.5, 0.5, 0.5, 0.6}), std::vector<int>{0, 0});
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos) << e.what();
  }
}

TEST(Ece, AllConfidentAtEightyPercent) {
  const auto ps = make_set({1, 1, 1, 1, 1}, {1, 1, 1, 1, 0});
  EXPECT_NEAR(ece(ps), 0.2, 1e-15);
  EXPECT_NEAR(oe(ps), 0.2, 1e-15);
  EXPECT_EQ(ue(ps), 0.0);
}

TEST(Ece, ConstructedCalibratedSetIsZero) {
  const auto ps = make_set({0.75, 0.75, 0.75, 0.75, 0.5, 0.5, 0.25, 0.25, 0.25, 0.25},
                           {1, 1, 1, 0, 1, 0, 1, 0, 0, 0});
  EXPECT_EQ(ece(ps), 0.0);
  EXPECT_EQ(oe(ps), 0.0);
  EXPECT_EQ(ue(ps), 0.0);
}

TEST(Ece, BoundaryBelongsToLowerBin) {
  EXPECT_EQ(equal_width_bin(1.0 / 15.0, 15), 0u);
  EXPECT_EQ(equal_width_bin(std::nextafter(1.0 / 15.0, 1.0), 15), 1u);
  EXPECT_EQ(equal_width_bin(0.0, 15), 0u);
  EXPECT_EQ(equal_width_bin(1.0, 15), 14u);
  for (int h = 1; h <= 15; ++h) EXPECT_EQ(equal_width_bin(static_cast<double>(h) / 15.0, 15), h - 1u);
}

TEST(Aece, ConstantConfidenceIsAbsoluteGap) {
  const auto ps = make_set(std::vector<double>(40, 0.7), std::vector<int>(40, 1));
  EXPECT_NEAR(aece(ps), 0.3, 1e-15);
}

TEST(Aece, DivisibleDistinctSetsGiveEqualBins) {
  Gen gen(2);
  PredictionSet ps;
  for (int i = 0; i < 45; ++i) {
    ps.confidences.push_back(0.2 + 0.01 * i);
    ps.correct.push_back(gen.coin() ? 1 : 0);
    ps.predicted.push_back(0);
  }
  const auto t = reliability_table(ps, 15, BinScheme::equal_mass);
  for (const auto& b : t.bins) EXPECT_EQ(b.count, 3u);
}

TEST(Aece, DuplicatesStayTogether) {
  const auto ranges = equal_mass_ranges(std::vector<double>{0.1, 0.2, 0.2, 0.2, 0.3, 0.4}, 3);
  ASSERT_EQ(ranges.size(), 3u);
  EXPECT_EQ(ranges[0], (std::pair<std::size_t, std::size_t>{0, 4}));
  EXPECT_EQ(ranges[1], (std::pair<std::size_t, std::size_t>{4, 4}));
  EXPECT_EQ(ranges[2], (std::pair<std::size_t, std::size_t>{4, 6}));
}

TEST(MetricOracles, ThousandRandomSetsMatchExactly) {
  Gen gen(3);
  for (int rep = 0; rep < 1000; ++rep) {
    const auto ps = random_set(gen);
    const double n = static_cast<double>(ps.size());
    const auto wb = width_bins(ps, 15);
    const auto mb = mass_bins(ps, 15);
    ASSERT_EQ(ece(ps, 15), fold(wb, n, Fold::gap)) << "rep " << rep;
    ASSERT_EQ(oe(ps, 15), fold(wb, n, Fold::over)) << "rep " << rep;
    ASSERT_EQ(ue(ps, 15), fold(wb, n, Fold::under)) << "rep " << rep;
    ASSERT_EQ(aece(ps, 15), fold(mb, n, Fold::gap)) << "rep " << rep;

    std::vector<double> id(1 + gen.index(200)), ood(1 + gen.index(200));
    for (double& x : id) x = gen.coin(0.3) ? static_cast<double>(gen.index(5)) : gen.normal();
    for (double& x : ood) x = gen.coin(0.3) ? static_cast<double>(gen.index(5)) : gen.normal() + 0.5;
    ASSERT_EQ(auroc(id, ood), auroc_pairs(id, ood)) << "rep " << rep;
  }
}

TEST(MetricInvariants, RangeAndTableConsistency) {
  Gen gen(4);
  for (int rep = 0; rep < 300; ++rep) {
    const auto ps = random_set(gen);
    for (auto scheme : {BinScheme::equal_width, BinScheme::equal_mass}) {
      const auto t = reliability_table(ps, 15, scheme);
      EXPECT_EQ(t.total(), ps.size());
      for (const auto& b : t.bins) {
        if (b.count == 0) {
          EXPECT_EQ(b.mean_conf, 0.0);
          EXPECT_EQ(b.mean_acc, 0.0);
        }
      }
    }
    const auto t = reliability_table(ps, 15);
    EXPECT_EQ(calibration_error(t), ece(ps));
    EXPECT_EQ(overconfidence_error(t), oe(ps));
    EXPECT_EQ(underconfidence_error(t), ue(ps));
    EXPECT_EQ(calibration_error(reliability_table(ps, 15, BinScheme::equal_mass)), aece(ps));
    for (double v : {ece(ps), aece(ps), oe(ps), ue(ps)}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    if (oe(ps) > 0.0) {
      EXPECT_TRUE(std::any_of(t.bins.begin(), t.bins.end(),
                              [](const ReliabilityBin& b) { return b.count > 0 && b.mean_conf > b.mean_acc; }));
    }
  }
}

TEST(MetricInvariants, PermutationInvariance) {
  Gen gen(5);
  for (int rep = 0; rep < 200; ++rep) {
    auto ps = random_set(gen);
    const double e = ece(ps), a = aece(ps), o = oe(ps), u = ue(ps);
    std::vector<std::size_t> perm(ps.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[gen.index(i)]);
    PredictionSet shuffled;
    for (std::size_t i : perm) {
      shuffled.confidences.push_back(ps.confidences[i]);
      shuffled.correct.push_back(ps.correct[i]);
      shuffled.predicted.push_back(ps.predicted[i]);
    }
    EXPECT_EQ(aece(shuffled), a);
    EXPECT_NEAR(ece(shuffled), e, 1e-15);
    EXPECT_NEAR(oe(shuffled), o, 1e-15);
    EXPECT_NEAR(ue(shuffled), u, 1e-15);
  }
}

TEST(MetricContract, EmptyOrBinless) {
  EXPECT_THROW(ece(PredictionSet{}), ContractError);
  EXPECT_THROW(ece(make_set({0.5}, {1}), 0), ContractError);
}

TEST(Entropy, Examples) {
  EXPECT_EQ(entropy(std::vector<double>{0, 1, 0}), 0.0);
  EXPECT_NEAR(entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}), std::log(4.0), 1e-15);
  Gen gen(6);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> p(6);
    double s = 0;
    for (double& x : p) s += x = gen.uniform(0.0, 1.0);
    long double h = 0.0L;
    for (double& x : p) {
      x /= s;
      h -= static_cast<long double>(x) * std::log(static_cast<long double>(x));
    }
    EXPECT_NEAR(entropy(p), static_cast<double>(h), 1e-14);
  }
}

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.2}, std::vector<double>{0.5, 0.9, 0.7}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.3, 0.1, 0.3}, std::vector<double>{0.1, 0.3, 0.3}), 0.5);
  EXPECT_THROW(auroc(std::vector<double>{}, std::vector<double>{1.0}), ContractError);
}

TEST(Auroc, SwappingRolesComplementsExactly) {
  Gen gen(7);
  for (int rep = 0; rep < 500; ++rep) {
    std::vector<double> a(1 + gen.index(50)), b(1 + gen.index(50));
    for (double& x : a) x = static_cast<double>(gen.index(6));
    for (double& x : b) x = gen.coin() ? static_cast<double>(gen.index(6)) : gen.normal();
    EXPECT_EQ(auroc(a, b) + auroc(b, a), 1.0);
  }
}

TEST(ReliabilityCsv, HeaderAndOneRowPerBin) {
  const auto text = reliability_csv(reliability_table(make_set({0.3, 0.9}, {0, 1}), 15));
  EXPECT_EQ(text.substr(0, text.find('\n')), "bin_lower,bin_upper,count,mean_conf,mean_acc");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 16);
}

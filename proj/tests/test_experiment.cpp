#include <gtest/gtest.h>

#include <filesystem>

#include "rankcal/experiment.hpp"

using namespace rankcal;

namespace {

GenerateOptions small_options() {
  GenerateOptions o;
  o.spec.classes = 3;
  o.spec.dim = 4;
  o.spec.n_per_class = 30;
  o.spec.spread = 0.5;
  o.ood_shift = 2.0;
  o.ood_n_per_class = 10;
  return o;
}

ModelSpec small_model() {
  ModelSpec m;
  m.input_dim = 4;
  m.hidden = {8};
  m.classes = 3;
  return m;
}

TrainConfig small_cfg() {
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 16;
  c.decay_epochs = {1};
  c.loss.mode = LossMode::mrl;
  c.group_size = 3;
  return c;
}

}  // namespace

TEST(Bundle, GenerateSaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "rankcal_test_bundle";
  std::filesystem::remove_all(dir);
  const auto b = generate_bundle(small_options());
  EXPECT_EQ(b.train.size() + b.val.size() + b.test.size(), 90u);
  ASSERT_TRUE(b.ood.has_value());
  EXPECT_EQ(b.ood->size(), 30u);
  save_bundle(b, dir);
  const auto back = load_bundle(dir);
  EXPECT_EQ(back.train.features, b.train.features);
  EXPECT_EQ(back.test.labels, b.test.labels);
  ASSERT_TRUE(back.ood.has_value());
  EXPECT_EQ(back.ood->features, b.ood->features);
  EXPECT_EQ(back.train.num_classes, 3);
  std::filesystem::remove_all(dir);
}

TEST(Bundle, NoShiftMeansNoOodSet) {
  auto o = small_options();
  o.ood_shift.reset();
  EXPECT_FALSE(generate_bundle(o).ood.has_value());
}

TEST(Experiment, ProducesConsistentSummaries) {
  const auto b = generate_bundle(small_options());
  const auto r = run_experiment(b, small_model(), small_cfg());
  EXPECT_EQ(r.test_logits.shape, (Shape{b.test.size(), 3}));
  ASSERT_TRUE(r.ood_logits.has_value());
  EXPECT_GT(r.temperature.value, 0.0);
  const auto again = summarize(r.test_logits, b.test.labels, r.temperature.value, 15);
  EXPECT_EQ(again.ece, r.test_post_ts.ece);
  EXPECT_EQ(r.test.acc, r.test_post_ts.acc);
  const double a = entropy_auroc(r.test_logits, *r.ood_logits);
  EXPECT_GE(a, 0.0);
  EXPECT_LE(a, 1.0);
  EXPECT_EQ(entropy_auroc(r.test_logits, r.test_logits), 0.5);
}

TEST(Sweep, AxisParsingAndValidation) {
  EXPECT_EQ(parse_sweep_axis("q"), SweepAxis::q);
  EXPECT_THROW(parse_sweep_axis("lr"), ContractError);
  EXPECT_EQ(with_axis(small_cfg(), SweepAxis::q, 6.0).group_size, 6u);
  EXPECT_EQ(with_axis(small_cfg(), SweepAxis::margin, 3.5).loss.margin, 3.5);
  EXPECT_EQ(with_axis(small_cfg(), SweepAxis::alpha, 0.5).alpha, 0.5);
  EXPECT_THROW(with_axis(small_cfg(), SweepAxis::q, 2.5), ContractError);
  EXPECT_THROW(with_axis(small_cfg(), SweepAxis::q, 1.0), ContractError);
}

TEST(Sweep, ParallelRunMatchesSerialRun) {
  const auto b = generate_bundle(small_options());
  SweepPlan plan{SweepAxis::q, {2, 3}, {1, 2}, 1, 15};
  const auto serial = sweep_csv(run_sweep(b, small_model(), small_cfg(), plan));
  plan.jobs = 3;
  EXPECT_EQ(sweep_csv(run_sweep(b, small_model(), small_cfg(), plan)), serial);
}

TEST(Sweep, FailedPointsAreRecordedNotFatal) {
  const auto b = generate_bundle(small_options());
  const auto rows = run_sweep(b, small_model(), small_cfg(), SweepPlan{SweepAxis::q, {2, 2.5}, {1}, 1, 15});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_TRUE(rows[0].ok());
  EXPECT_FALSE(rows[1].ok());
  const auto text = sweep_csv(rows);
  EXPECT_NE(text.find("q,2.5,1,,,,,,,error: "), std::string::npos) << text;
}

TEST(Sweep, CsvLayout) {
  std::vector<SweepRow> rows(1);
  rows[0].axis = SweepAxis::margin;
  rows[0].value = 0.1;
  rows[0].seed = 4;
  rows[0].test = {0.5, 0.25, 0.125, 0.0, 1.0};
  rows[0].ece_post_ts = 0.75;
  EXPECT_EQ(sweep_csv(rows), "axis,value,seed,acc,ece,aece,oe,ue,ece_post_ts,status\n"
                             "margin,0.1,4," + csv::format_double(0.5) + ',' + csv::format_double(0.25) + ',' +
                                 csv::format_double(0.125) + ',' + csv::format_double(0.0) + ',' +
                                 csv::format_double(1.0) + ',' + csv::format_double(0.75) + ",ok\n");
  rows[0].status = "error: a,b\nc";
  EXPECT_NE(sweep_csv(rows).find(",error: a;b;c\n"), std::string::npos);
}

TEST(Sweep, EmptyPlanIsContractError) {
  const auto b = generate_bundle(small_options());
  EXPECT_THROW(run_sweep(b, small_model(), small_cfg(), SweepPlan{SweepAxis::q, {}, {1}, 1, 15}), ContractError);
}

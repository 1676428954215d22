#include <gtest/gtest.h>

#include "dida/error.hpp"
#include "dida/verify.hpp"

using namespace dida;
using verify::VerifyConfig;

namespace {

VerifyConfig small(int trials) {
  VerifyConfig cfg;
  cfg.trials = trials;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(Verify, InvarianceSuitePasses) {
  auto cfg = small(6);
  cfg.sigmas = 10;
  const auto r = verify::run_invariance(cfg);
  EXPECT_TRUE(r.passed()) << r.report().dump();
  EXPECT_EQ(r.records.size(), 6u * 4u);
  EXPECT_LE(r.max_value, 1e-6);
}

TEST(Verify, OtOracleSuitePasses) {
  const auto r = verify::run_ot_oracle(small(60));
  EXPECT_TRUE(r.passed()) << r.report().dump();
  EXPECT_EQ(r.records.size(), 60u);
  EXPECT_LE(r.summary["max_marginal_error"].get<double>(), 1e-9);
}

TEST(Verify, StabilitySuitesPass) {
  auto cfg = small(8);
  cfg.max_dx = 3;
  cfg.max_n = 4;
  const auto p1 = verify::run_prop1(cfg);
  EXPECT_TRUE(p1.passed()) << p1.report().dump();
  EXPECT_EQ(p1.trials, 8);
  const auto p2 = verify::run_prop2(cfg);
  EXPECT_TRUE(p2.passed()) << p2.report().dump();
  EXPECT_GT(p2.summary["second_inequality_checks"].get<int>(), 0);
}

TEST(Verify, BudgetIsEnforcedUpfront) {
  auto cfg = small(2);
  cfg.max_dx = 8;
  cfg.budget = 5040;
  try {
    verify::run_prop1(cfg);
    FAIL() << "expected a capacity error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::capacity);
  }
}

TEST(Verify, GridSuitePassesAndGapShrinks) {
  const auto r = verify::run_lemma1(small(20));
  EXPECT_TRUE(r.passed()) << r.report().dump();
  EXPECT_TRUE(r.summary["gap_shrinks"].get<bool>());
  EXPECT_LE(r.max_value, 1.0);
}

TEST(Verify, GradientSuitePasses) {
  const auto r = verify::run_gradients(small(4));
  EXPECT_TRUE(r.passed()) << r.report().dump();
  EXPECT_EQ(r.records.size(), 8u);
}

TEST(Verify, Deterministic) {
  const auto a = verify::run_ot_oracle(small(10));
  const auto b = verify::run_ot_oracle(small(10));
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(a.records[i], b.records[i]);
}

TEST(Verify, UnknownSuiteAndKeysRejected) {
  EXPECT_THROW(verify::run_suite("prop3", small(1)), Error);
  EXPECT_THROW(verify::verify_config_from_json(io::Json{{"trails", 3}}), Error);
  const auto cfg = verify::verify_config_from_json(verify::to_json(small(7)));
  EXPECT_EQ(cfg.trials, 7);
  EXPECT_EQ(cfg.cells, small(7).cells);
}

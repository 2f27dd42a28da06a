#include "lrbf/bf.hpp"
#include "lrbf/error.hpp"
#include "support/builders.hpp"
#include "support/sigfig.hpp"

#include <gtest/gtest.h>

#include <boost/math/distributions/normal.hpp>

#include <cmath>

using namespace lrbf;
using testing_support::random_background;
using testing_support::scalar_params;
using testing_support::set1d;

namespace {

// Draws on which the subject model and the population model give x_c the
// same density, so lambda is exactly one everywhere.
PosteriorDraws unit_ratio_draws(Conditioning conditioning, std::size_t count) {
  PosteriorDraws d;
  d.tag = {Framework::specific_source, conditioning};
  Rng rng(4, 4);
  for (std::size_t t = 0; t < count; ++t) {
    const auto a = scalar_params(rng.normal(), 0.5 + rng.uniform(), 0.5 + rng.uniform());
    d.theta_a.push_back(a);
    d.theta_b.push_back({a.mu, a.sigma_b + a.sigma_w});
  }
  d.diagnostics.chain_lengths = {count};
  return d;
}

ChainConfig chain(int iterations, int burn_in, std::uint64_t seed) {
  ChainConfig c;
  c.iterations = iterations;
  c.burn_in = burn_in;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Estimators, UnitRatioGivesExactlyOne) {
  const auto lr = LrFunction::specific_source(set1d("c", {0.7}));
  const auto m2 = unit_ratio_draws(Conditioning::m2, 2000);
  const auto m1 = unit_ratio_draws(Conditioning::m1, 2000);
  const auto bg = unit_ratio_draws(Conditioning::background, 2000);
  EXPECT_EQ(bf_posterior_mean(m2, lr).value, 1.0);
  EXPECT_EQ(bf_inverse_mean(m1, lr).value, 1.0);
  EXPECT_EQ(bf_prior_form(bg, lr).value, 1.0);
  EXPECT_EQ(posterior_sd_lr(m2, lr), 0.0);
  EXPECT_EQ(bf_posterior_mean(m2, lr).mc_standard_error, 0.0);
}

TEST(Estimators, TagsAreEnforced) {
  const auto lr = LrFunction::specific_source(set1d("c", {0.7}));
  const auto m1 = unit_ratio_draws(Conditioning::m1, 2000);
  try {
    bf_posterior_mean(m1, lr);
    FAIL() << "M1 draws accepted by the posterior-mean form";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::model_tag_mismatch);
  }
  EXPECT_THROW(bf_inverse_mean(unit_ratio_draws(Conditioning::m2, 2000), lr), Error);
  EXPECT_THROW(posterior_sd_lr(m1, lr), Error);
  const auto cs = LrFunction::common_source(set1d("b", {0.1}), set1d("c", {0.7}));
  EXPECT_THROW(bf_posterior_mean(unit_ratio_draws(Conditioning::m2, 2000), cs), Error);
}

TEST(Estimators, TooFewDrawsRejected) {
  const auto lr = LrFunction::specific_source(set1d("c", {0.7}));
  try {
    bf_posterior_mean(unit_ratio_draws(Conditioning::m2, 999), lr);
    FAIL() << "999 draws accepted";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::insufficient_draws);
  }
}

TEST(LogMean, StableAtExtremeMagnitudes) {
  for (double level : {-700.0, 0.0, 700.0}) {
    std::vector<double> v;
    for (int i = 0; i < 1000; ++i) v.push_back(level + std::log(1.0 + (i % 10) / 10.0));
    const auto e = log_mean_exp(v);
    EXPECT_NEAR(e.log_mean, level + std::log(1.45), 1e-12);
  }
  std::vector<double> same(1000, 5.0);
  EXPECT_EQ(log_sum_exp(same), 5.0 + std::log(1000.0));
  EXPECT_EQ(log_mean_exp(same).log_standard_error, -std::numeric_limits<double>::infinity());
}

TEST(Estimators, SdMatchesDirectComputation) {
  Rng rng(3, 0);
  const auto db = random_background(scalar_params(0.0, 1.0, 1.0), 30, 4, rng);
  const auto xb = set1d("b", {0.2, 0.4});
  const auto xc = set1d("c", {0.1});
  const auto draws = gibbs_cs(db, xb, xc, weak_prior(1, Framework::common_source),
                              Conditioning::m2, chain(4000, 500, 3));
  const auto lr = LrFunction::common_source(xb, xc);
  const auto values = log_lr_values(draws, lr);
  double m = 0.0, s = 0.0;
  for (double v : values) m += std::exp(v);
  m /= static_cast<double>(values.size());
  for (double v : values) s += (std::exp(v) - m) * (std::exp(v) - m);
  EXPECT_NEAR(posterior_sd_lr(draws, lr), std::sqrt(s / (values.size() - 1.0)), 1e-12);
  EXPECT_NEAR(bf_posterior_mean(draws, lr).value, m, 1e-12 * m);
}

TEST(Estimators, ThreeFormsAgreeOnToyProblem) {
  Rng rng(21, 0);
  const auto db = random_background(scalar_params(0.0, 1.0, 1.0), 40, 5, rng);
  const auto xb = set1d("b", {0.3});
  const auto xc = set1d("c", {0.6});
  const PriorSpec prior = weak_prior(1, Framework::common_source);
  const auto lr = LrFunction::common_source(xb, xc);
  const auto cfg = chain(21000, 1000, 8);
  const auto pm = bf_posterior_mean(gibbs_cs(db, xb, xc, prior, Conditioning::m2, cfg), lr);
  const auto im = bf_inverse_mean(gibbs_cs(db, xb, xc, prior, Conditioning::m1, cfg), lr);
  const auto pf =
      bf_prior_form(gibbs_cs(db, xb, xc, prior, Conditioning::background, cfg), lr);
  const auto close = [](const BfEstimate& a, const BfEstimate& b) {
    return std::abs(a.value - b.value) <=
           3.0 * std::hypot(a.mc_standard_error, b.mc_standard_error);
  };
  EXPECT_TRUE(close(pm, im)) << pm.value << " vs " << im.value;
  EXPECT_TRUE(close(pm, pf)) << pm.value << " vs " << pf.value;
  EXPECT_TRUE(close(im, pf)) << im.value << " vs " << pf.value;
  EXPECT_EQ(pm.form, EstimatorForm::posterior_mean_m2);
  EXPECT_EQ(pm.n_draws, 20000u);
}

TEST(Estimators, PriorFormHelperRunsReferenceChain) {
  Rng rng(21, 1);
  const auto db = random_background(scalar_params(0.0, 1.0, 1.0), 20, 5, rng);
  const auto xb = set1d("b", {0.3});
  const auto xc = set1d("c", {0.6});
  const PriorSpec prior = weak_prior(1, Framework::specific_source);
  const auto cfg = chain(3000, 500, 2);
  const auto direct = bf_prior_form(prior, db, xb, xc, Framework::specific_source, cfg);
  const auto draws = gibbs_ss(db, xb, xc, prior, Conditioning::background, cfg);
  const auto manual = bf_prior_form(draws, LrFunction::specific_source(xc));
  EXPECT_EQ(direct.value, manual.value);
}

TEST(NormalQuantile, MatchesReferenceImplementation) {
  const boost::math::normal_distribution<double> n01;
  for (double p : {1e-300, 1e-20, 1e-8, 0.001, 0.025, 0.1, 0.3, 0.5, 0.7, 0.975, 0.999,
                   1.0 - 1e-10}) {
    const double ref = boost::math::quantile(n01, p);
    EXPECT_NEAR(normal_quantile(p), ref, 1e-14 * std::max(1.0, std::abs(ref))) << p;
  }
  EXPECT_NEAR(normal_quantile(0.975), 1.959963984540054, 1e-15);
  EXPECT_THROW(normal_quantile(0.0), Error);
  EXPECT_THROW(normal_quantile(1.0), Error);
  EXPECT_NEAR(normal_cdf(1.959963984540054), 0.975, 1e-15);
}

struct IntervalRow {
  double bf, sd, lower, upper;
};

void PrintTo(const IntervalRow& r, std::ostream* os) { *os << r.bf << "_" << r.sd; }

class IntervalTable : public ::testing::TestWithParam<IntervalRow> {};

TEST_P(IntervalTable, ReproducesReferenceEndpoints) {
  const auto row = GetParam();
  const auto i = credible_interval(row.bf, row.sd, 0.05);
  EXPECT_TRUE(testing_support::same_significant(i.upper, row.upper, 3)) << i.upper;
  EXPECT_TRUE(testing_support::same_significant(i.lower, row.lower, 3)) << i.lower;
  EXPECT_EQ(i.truncated(), row.lower == 0.0);
  if (i.truncated()) EXPECT_LT(i.lower_untruncated, 0.0);
  EXPECT_TRUE(i.contains(row.bf));
}

INSTANTIATE_TEST_SUITE_P(
    Rows, IntervalTable,
    ::testing::Values(IntervalRow{779.30, 249.7349, 289.83, 1268.77},
                      IntervalRow{5.10e-6, 9.84e-5, 0.0, 1.98e-4},
                      IntervalRow{3.04e-10, 4.35e-9, 0.0, 8.82e-9},
                      IntervalRow{7.11e-7, 8.86e-6, 0.0, 1.81e-5},
                      IntervalRow{4.54e-9, 8.41e-8, 0.0, 1.69e-7}),
    [](const ::testing::TestParamInfo<IntervalRow>& info) {
      return "row" + std::to_string(info.index);
    });

TEST(Interval, RejectsBadArguments) {
  EXPECT_THROW(credible_interval(1.0, 0.1, 0.0), Error);
  EXPECT_THROW(credible_interval(1.0, -0.1, 0.05), Error);
  EXPECT_THROW(credible_interval(std::nan(""), 0.1, 0.05), Error);
  const auto zero_width = credible_interval(2.0, 0.0, 0.05);
  EXPECT_EQ(zero_width.lower, 2.0);
  EXPECT_EQ(zero_width.upper, 2.0);
}

TEST(Interval, PosteriorOdds) {
  EXPECT_DOUBLE_EQ(posterior_odds(779.30, 0.01), 7.793);
  EXPECT_THROW(posterior_odds(0.0, 1.0), Error);
}

TEST(DeltaMethod, QuadraticForm) {
  Vector g(2);
  g << 1.0, 2.0;
  Matrix inv = Matrix::Zero(2, 2);
  inv(0, 0) = 2.0;
  inv(1, 1) = 3.0;
  EXPECT_DOUBLE_EQ(delta_method_variance(g, inv), 14.0);
  EXPECT_THROW(delta_method_variance(g, Matrix::Identity(3, 3)), Error);
}

TEST(Forms, NamesRoundTrip) {
  for (auto f : {EstimatorForm::prior_form, EstimatorForm::posterior_mean_m2,
                 EstimatorForm::inverse_mean_m1}) {
    EXPECT_EQ(parse_estimator_form(to_string(f)), f);
  }
  EXPECT_THROW(parse_estimator_form("harmonic"), Error);
}

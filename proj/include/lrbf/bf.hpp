#pragma once

// Bayes-factor estimators, the posterior spread of the likelihood ratio and
// the credible interval built from them.
//
// Three identities give the Bayes factor beta:
//   prior form          ratio of marginal likelihoods, each a Monte Carlo
//                       average over the posterior given the reference data
//   posterior mean (M2) E[lambda(theta)] under the posterior with the
//                       unknown-source sets arranged as in M2
//   inverse mean (M1)   1 / E[1 / lambda(theta)] under the M1 posterior
// All averages are taken in log space.

#include "lrbf/model.hpp"
#include "lrbf/sampler.hpp"

#include <span>
#include <string>
#include <vector>

namespace lrbf {

enum class EstimatorForm { prior_form, posterior_mean_m2, inverse_mean_m1 };

std::string_view to_string(EstimatorForm form);
EstimatorForm parse_estimator_form(std::string_view text);

struct BfEstimate {
  double log_value = 0.0;
  double value = 1.0;
  // On the value scale.
  double mc_standard_error = 0.0;
  EstimatorForm form = EstimatorForm::posterior_mean_m2;
  std::size_t n_draws = 0;
  std::size_t rejected_draws = 0;
  std::vector<std::string> warnings;
};

struct EstimatorOptions {
  std::size_t min_draws = 1000;
  std::size_t batches = 50;
  // Inverse-mean estimates warn when ESS of 1/lambda falls below this.
  double min_inverse_ess = 100.0;
};

/// Monte Carlo mean of exp(log_values) with a batch-means standard error,
/// kept in log space so that |log value| up to ~700 neither overflows nor
/// underflows.
struct LogMeanEstimate {
  double log_mean = 0.0;
  // log of the standard error of the mean; -inf when it is zero.
  double log_standard_error = 0.0;
};

LogMeanEstimate log_mean_exp(std::span<const double> log_values,
                             std::size_t batches = 50);

double log_sum_exp(std::span<const double> values);

/// log lambda(theta_t) for every stored draw.
std::vector<double> log_lr_values(const PosteriorDraws& draws,
                                  const LrFunction& lr);

BfEstimate bf_posterior_mean(const PosteriorDraws& draws, const LrFunction& lr,
                             const EstimatorOptions& options = {});

BfEstimate bf_inverse_mean(const PosteriorDraws& draws, const LrFunction& lr,
                           const EstimatorOptions& options = {});

/// Ratio of marginal likelihoods from draws of the reference posterior
/// (Conditioning::background).
BfEstimate bf_prior_form(const PosteriorDraws& reference_draws,
                         const LrFunction& lr,
                         const EstimatorOptions& options = {});

/// Runs the reference-posterior sampler, then evaluates the prior form.
BfEstimate bf_prior_form(const PriorSpec& prior, const BackgroundDatabase& db,
                         const ObservationSet& x_b, const ObservationSet& x_c,
                         Framework framework, const ChainConfig& config,
                         const EstimatorOptions& options = {});

/// Posterior standard deviation of lambda(theta) under the M2 posterior.
double posterior_sd_lr(const PosteriorDraws& draws, const LrFunction& lr);

/// grad^T info_inverse grad.
double delta_method_variance(const Vector& grad, const Matrix& info_inverse);

/// Standard normal quantile, Wichura's AS 241 (relative error ~1e-16).
double normal_quantile(double p);
double normal_cdf(double x);

struct LrInterval {
  double center = 0.0;
  double sigma_n = 0.0;
  double alpha = 0.05;
  double z = 0.0;
  double lower = 0.0;
  double lower_untruncated = 0.0;
  double upper = 0.0;

  bool truncated() const noexcept { return lower_untruncated < 0.0; }
  bool contains(double value) const noexcept {
    return value >= lower && value <= upper;
  }
};

LrInterval credible_interval(double bf, double sigma_n, double alpha);

double posterior_odds(double bf, double prior_odds);

}  // namespace lrbf

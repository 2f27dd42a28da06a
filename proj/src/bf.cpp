#include "lrbf/bf.hpp"

#include "lrbf/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace lrbf {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct ScaledSeries {
  double log_scale = kNegInf;  // max of the log values
  std::vector<double> values;  // exp(log_value - log_scale)
};

ScaledSeries scale(std::span<const double> log_values) {
  ScaledSeries out;
  for (double v : log_values) {
    if (std::isnan(v)) {
      throw Error(ErrorCode::invalid_argument, "NaN log likelihood ratio");
    }
    out.log_scale = std::max(out.log_scale, v);
  }
  if (!std::isfinite(out.log_scale)) {
    throw Error(ErrorCode::invalid_argument,
                "log likelihood ratios are not finite");
  }
  out.values.reserve(log_values.size());
  for (double v : log_values) out.values.push_back(std::exp(v - out.log_scale));
  return out;
}

double mean_of(std::span<const double> x) {
  return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

std::vector<double> batch_means(std::span<const double> x, std::size_t batches) {
  batches = std::max<std::size_t>(2, std::min(batches, x.size()));
  const std::size_t width = x.size() / batches;
  std::vector<double> means(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    means[b] = mean_of(x.subspan(b * width, width));
  }
  return means;
}

// Covariance of the grand means of two series, estimated from batch means.
double batch_covariance(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = mean_of(a);
  const double mb = mean_of(b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - ma) * (b[i] - mb);
  const double k = static_cast<double>(a.size());
  return s / (k - 1.0) / k;
}

void require_tag(const PosteriorDraws& draws, const LrFunction& lr,
                 Conditioning expected, std::string_view estimator) {
  if (draws.tag.framework != lr.framework()) {
    throw Error(ErrorCode::model_tag_mismatch,
                std::string(estimator) + ": draws belong to the " +
                    std::string(to_string(draws.tag.framework)) +
                    " framework");
  }
  if (draws.tag.conditioning != expected) {
    throw Error(ErrorCode::model_tag_mismatch,
                std::string(estimator) + " needs draws conditioned on " +
                    std::string(to_string(expected)) + ", got " +
                    std::string(to_string(draws.tag.conditioning)));
  }
}

void require_draws(std::size_t count, const EstimatorOptions& options) {
  if (count < options.min_draws) {
    throw Error(ErrorCode::insufficient_draws,
                std::to_string(count) + " draws, need at least " +
                    std::to_string(options.min_draws));
  }
}

// Evaluate in place so the estimator sees the draws in chain order.
template <typename F>
std::vector<double> evaluate(const PosteriorDraws& draws, F&& f) {
  std::vector<double> out(draws.size());
  for (std::size_t t = 0; t < draws.size(); ++t) out[t] = f(t);
  return out;
}

}  // namespace

std::string_view to_string(EstimatorForm form) {
  switch (form) {
    case EstimatorForm::prior_form: return "prior_form";
    case EstimatorForm::posterior_mean_m2: return "posterior_mean_m2";
    case EstimatorForm::inverse_mean_m1: return "inverse_mean_m1";
  }
  return "unknown";
}

EstimatorForm parse_estimator_form(std::string_view text) {
  if (text == "prior_form") return EstimatorForm::prior_form;
  if (text == "posterior_mean_m2") return EstimatorForm::posterior_mean_m2;
  if (text == "inverse_mean_m1") return EstimatorForm::inverse_mean_m1;
  throw Error(ErrorCode::invalid_argument,
              "unknown estimator form '" + std::string(text) + "'");
}

double log_sum_exp(std::span<const double> values) {
  const ScaledSeries s = scale(values);
  return s.log_scale + std::log(std::accumulate(s.values.begin(), s.values.end(), 0.0));
}

LogMeanEstimate log_mean_exp(std::span<const double> log_values,
                             std::size_t batches) {
  if (log_values.size() < 2) {
    throw Error(ErrorCode::insufficient_draws, "need at least two values");
  }
  const ScaledSeries s = scale(log_values);
  const double mean = mean_of(s.values);
  const auto bm = batch_means(s.values, batches);
  const double se = std::sqrt(std::max(0.0, batch_covariance(bm, bm)));
  return LogMeanEstimate{s.log_scale + std::log(mean),
                         se > 0.0 ? s.log_scale + std::log(se) : kNegInf};
}

std::vector<double> log_lr_values(const PosteriorDraws& draws,
                                  const LrFunction& lr) {
  if (lr.framework() == Framework::common_source) {
    return evaluate(draws, [&](std::size_t t) { return lr.log_lr(draws.theta_a[t]); });
  }
  if (draws.theta_b.size() != draws.theta_a.size()) {
    throw Error(ErrorCode::model_tag_mismatch,
                "specific-source evaluation needs theta_b draws");
  }
  return evaluate(draws, [&](std::size_t t) {
    return lr.log_lik_subject(draws.theta_b[t]) -
           lr.log_lik_population(draws.theta_a[t]);
  });
}

BfEstimate bf_posterior_mean(const PosteriorDraws& draws, const LrFunction& lr,
                             const EstimatorOptions& options) {
  require_tag(draws, lr, Conditioning::m2, "posterior-mean estimator");
  require_draws(draws.size(), options);
  const auto values = log_lr_values(draws, lr);
  const LogMeanEstimate e = log_mean_exp(values, options.batches);

  BfEstimate out;
  out.form = EstimatorForm::posterior_mean_m2;
  out.log_value = e.log_mean;
  out.value = std::exp(e.log_mean);
  out.mc_standard_error = std::exp(e.log_standard_error);
  out.n_draws = draws.size();
  out.rejected_draws = draws.diagnostics.pd_rejections;
  return out;
}

BfEstimate bf_inverse_mean(const PosteriorDraws& draws, const LrFunction& lr,
                           const EstimatorOptions& options) {
  require_tag(draws, lr, Conditioning::m1, "inverse-mean estimator");
  require_draws(draws.size(), options);
  auto values = log_lr_values(draws, lr);
  for (double& v : values) v = -v;
  const LogMeanEstimate e = log_mean_exp(values, options.batches);

  BfEstimate out;
  out.form = EstimatorForm::inverse_mean_m1;
  out.log_value = -e.log_mean;
  out.value = std::exp(out.log_value);
  // Delta method: se(1/m) = se(m) / m^2.
  out.mc_standard_error = std::exp(out.log_value + e.log_standard_error - e.log_mean);
  out.n_draws = draws.size();
  out.rejected_draws = draws.diagnostics.pd_rejections;

  const ScaledSeries inverse = scale(values);
  const double inverse_ess = ess(draws, [&](const PosteriorDraws&, std::size_t t) {
    return inverse.values[t];
  });
  if (inverse_ess < options.min_inverse_ess) {
    char message[128];
    std::snprintf(message, sizeof message, "heavy_tail: ESS of 1/lambda is %.4g, below %.4g",
                  inverse_ess, options.min_inverse_ess);
    out.warnings.emplace_back(message);
  }
  return out;
}

BfEstimate bf_prior_form(const PosteriorDraws& reference_draws,
                         const LrFunction& lr, const EstimatorOptions& options) {
  require_tag(reference_draws, lr, Conditioning::background, "prior-form estimator");
  require_draws(reference_draws.size(), options);

  const bool common = lr.framework() == Framework::common_source;
  std::vector<double> numerator;
  std::vector<double> denominator;
  if (common) {
    numerator = evaluate(reference_draws, [&](std::size_t t) {
      return lr.log_lik(reference_draws.theta_a[t], Model::m1);
    });
    denominator = evaluate(reference_draws, [&](std::size_t t) {
      return lr.log_lik(reference_draws.theta_a[t], Model::m2);
    });
  } else {
    if (reference_draws.theta_b.size() != reference_draws.size()) {
      throw Error(ErrorCode::model_tag_mismatch,
                  "specific-source evaluation needs theta_b draws");
    }
    numerator = evaluate(reference_draws, [&](std::size_t t) {
      return lr.log_lik_subject(reference_draws.theta_b[t]);
    });
    denominator = evaluate(reference_draws, [&](std::size_t t) {
      return lr.log_lik_population(reference_draws.theta_a[t]);
    });
  }

  const ScaledSeries num = scale(numerator);
  const ScaledSeries den = scale(denominator);
  const double num_mean = mean_of(num.values);
  const double den_mean = mean_of(den.values);
  const auto num_batches = batch_means(num.values, options.batches);
  const auto den_batches = batch_means(den.values, options.batches);
  // In the specific-source case theta_a and theta_b are independent under
  // the reference posterior, so the cross term vanishes.
  const double cross =
      common ? batch_covariance(num_batches, den_batches) / (num_mean * den_mean) : 0.0;
  const double relative_variance =
      batch_covariance(num_batches, num_batches) / (num_mean * num_mean) +
      batch_covariance(den_batches, den_batches) / (den_mean * den_mean) -
      2.0 * cross;

  BfEstimate out;
  out.form = EstimatorForm::prior_form;
  out.log_value = (num.log_scale + std::log(num_mean)) -
                  (den.log_scale + std::log(den_mean));
  out.value = std::exp(out.log_value);
  out.mc_standard_error = out.value * std::sqrt(std::max(0.0, relative_variance));
  out.n_draws = reference_draws.size();
  out.rejected_draws = reference_draws.diagnostics.pd_rejections;
  return out;
}

BfEstimate bf_prior_form(const PriorSpec& prior, const BackgroundDatabase& db,
                         const ObservationSet& x_b, const ObservationSet& x_c,
                         Framework framework, const ChainConfig& config,
                         const EstimatorOptions& options) {
  const PosteriorDraws draws =
      gibbs(framework, db, x_b, x_c, prior, Conditioning::background, config);
  const LrFunction lr = framework == Framework::common_source
                            ? LrFunction::common_source(x_b, x_c)
                            : LrFunction::specific_source(x_c);
  return bf_prior_form(draws, lr, options);
}

double posterior_sd_lr(const PosteriorDraws& draws, const LrFunction& lr) {
  require_tag(draws, lr, Conditioning::m2, "posterior standard deviation");
  if (draws.size() < 2) {
    throw Error(ErrorCode::insufficient_draws,
                "posterior standard deviation needs at least two draws");
  }
  const ScaledSeries s = scale(log_lr_values(draws, lr));
  const double m = mean_of(s.values);
  double ss = 0.0;
  for (double v : s.values) ss += (v - m) * (v - m);
  const double sd = std::sqrt(ss / static_cast<double>(s.values.size() - 1));
  return sd > 0.0 ? std::exp(s.log_scale + std::log(sd)) : 0.0;
}

double delta_method_variance(const Vector& grad, const Matrix& info_inverse) {
  if (info_inverse.rows() != grad.size() || info_inverse.cols() != grad.size()) {
    throw Error(ErrorCode::dimension_mismatch,
                "delta method: gradient and information matrix sizes differ");
  }
  return std::max(0.0, grad.dot(info_inverse * grad));
}

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw Error(ErrorCode::invalid_argument, "normal quantile needs p in (0, 1)");
  }
  const double q = p - 0.5;
  if (std::abs(q) <= 0.425) {
    const double r = 0.180625 - q * q;
    const double num =
        ((((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
               6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
             1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
           1.3314166789178437745e+2) * r + 3.3871328727963666080e+0));
    const double den =
        ((((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
               3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
             5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
           4.2313330701600911252e+1) * r + 1.0));
    return q * num / den;
  }
  double r = std::sqrt(-std::log(q < 0.0 ? p : 1.0 - p));
  double value;
  if (r <= 5.0) {
    r -= 1.6;
    const double num =
        (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
              2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
            3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
          4.63033784615654529590e+0) * r + 1.42343711074968357734e+0);
    const double den =
        (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
              1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
            6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
          2.05319162663775882187e+0) * r + 1.0);
    value = num / den;
  } else {
    r -= 5.0;
    const double num =
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
              1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
            2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
          5.46378491116411436990e+0) * r + 6.65790464350110377720e+0);
    const double den =
        (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
              1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
            1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
          5.99832206555887937690e-1) * r + 1.0);
    value = num / den;
  }
  return q < 0.0 ? -value : value;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

LrInterval credible_interval(double bf, double sigma_n, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw Error(ErrorCode::invalid_argument, "alpha must lie in (0, 1)");
  }
  if (!(bf >= 0.0) || !std::isfinite(bf) || !(sigma_n >= 0.0) ||
      !std::isfinite(sigma_n)) {
    throw Error(ErrorCode::invalid_argument,
                "interval needs a finite non-negative center and spread");
  }
  LrInterval out;
  out.center = bf;
  out.sigma_n = sigma_n;
  out.alpha = alpha;
  out.z = normal_quantile(1.0 - alpha / 2.0);
  out.lower_untruncated = bf - out.z * sigma_n;
  out.lower = std::max(0.0, out.lower_untruncated);
  out.upper = bf + out.z * sigma_n;
  return out;
}

double posterior_odds(double bf, double prior_odds) {
  if (!(bf > 0.0) || !(prior_odds > 0.0) || !std::isfinite(bf) ||
      !std::isfinite(prior_odds)) {
    throw Error(ErrorCode::invalid_argument,
                "posterior odds need positive, finite inputs");
  }
  return bf * prior_odds;
}

}  // namespace lrbf

#pragma once

// Simulation harness for the large-sample behaviour of the Bayes factor:
// consistency toward the true likelihood ratio, posterior coverage of the
// credible interval, and approximate normality of the lambda posterior.
// Also hosts maximum likelihood fitting and observed information, which feed
// the delta-method variance.

#include "lrbf/bf.hpp"
#include "lrbf/model.hpp"
#include "lrbf/sampler.hpp"

#include <atomic>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lrbf {

struct CaseData {
  BackgroundDatabase background;
  ObservationSet x_b;
  ObservationSet x_c;
};

/// Full-data log-likelihood of CaseData under a conditioning model, as a
/// function of the unconstrained parameter vector (see pack()).
class FullLikelihood {
 public:
  FullLikelihood(const CaseData& data, ConditioningModel model);

  Index parameter_count() const noexcept;
  Index dim() const noexcept { return p_; }
  double value(const Vector& theta) const;
  // Analytic gradient.
  double value_and_gradient(const Vector& theta, Vector& grad) const;
  // Moment estimates, used as the default optimizer start.
  Vector initial_point() const;

 private:
  struct Bucket {
    Index n;
    Matrix means;  // p x count
  };

  Framework framework_;
  Index p_;
  std::vector<Bucket> buckets_;
  Matrix within_scatter_;
  Index within_dof_ = 0;  // sum of (n_i - 1)
  Index items_ = 0;
  std::optional<GroupStats> subject_;
};

struct MleOptions {
  int max_iterations = 500;
  double gradient_tolerance = 1e-6;
  // Coordinates held at their initial value; empty means all free.
  std::vector<bool> fixed;
};

struct MleResult {
  Vector theta_hat;
  double log_likelihood = 0.0;
  double gradient_norm = 0.0;  // infinity norm over free coordinates
  int iterations = 0;
};

MleResult mle_fit(const FullLikelihood& likelihood,
                  const std::optional<Vector>& init = std::nullopt,
                  const MleOptions& options = {});

MleResult mle_fit(const CaseData& data, ConditioningModel model,
                  const std::optional<Vector>& init = std::nullopt,
                  const MleOptions& options = {});

using GradientFunction = std::function<Vector(const Vector&)>;

/// Inverse of the negative Hessian of a log-likelihood, the Hessian taken by
/// central differences of its gradient and symmetrized.
Matrix observed_info_inverse(const Vector& theta_hat,
                             const GradientFunction& gradient);

Matrix observed_info_inverse(const Vector& theta_hat, const CaseData& data,
                             ConditioningModel model);

/// Data-generating truth with the unknown-source sets frozen once.
/// For the specific-source framework x_b is regenerated for every sample
/// size, so only x_c is frozen.
struct TrueModelSpec {
  Framework framework = Framework::common_source;
  CommonSourceParams theta_a0;
  std::optional<SpecificSourceParams> theta_b0;
  Model generator = Model::m1;
  std::optional<ObservationSet> x_b;
  std::optional<ObservationSet> x_c;
  Index items_per_source = 5;
};

void validate(const TrueModelSpec& spec);

/// Draws the frozen unknown-source sets from the generating model.
void freeze_unknown_sources(TrueModelSpec& spec, Index n_b, Index n_c,
                            std::uint64_t seed);

/// n_a background sources from theta_a0 and, for the specific-source
/// framework, n_b subject items from theta_b0.
CaseData generate_synthetic(const TrueModelSpec& spec, Index n_a, Index n_b,
                            std::uint64_t seed);

double true_log_lr(const TrueModelSpec& spec);
double true_lr(const TrueModelSpec& spec);

LrFunction lr_function(const TrueModelSpec& spec);
LrFunction lr_function(Framework framework, const ObservationSet& x_b,
                       const ObservationSet& x_c);

/// 64-bit FNV-1a over the raw bytes of a set's items.
std::uint64_t trace_hash(const ObservationSet& set);

/// Kolmogorov-Smirnov distance between the standardized sample and N(0, 1).
/// A sample with zero variance gets 1.
double ks_normal_statistic(std::span<const double> values);

/// KS distance of the standardized lambda(theta_t) draws to N(0, 1).
double bvm_normality_check(const PosteriorDraws& draws, const LrFunction& lr,
                           const EstimatorOptions& options = {});

/// Fraction of values inside the interval.
double posterior_probability(std::span<const double> lambda,
                             const LrInterval& interval);

int worker_threads();

struct ExperimentConfig {
  std::vector<Index> schedule{50, 200, 800, 3200};
  int replicates = 50;
  EstimatorForm form = EstimatorForm::posterior_mean_m2;
  // Prior for every replicate; weak_prior() when unset.
  std::optional<PriorSpec> prior;
  // The seed field is ignored: each job derives its own.
  ChainConfig chain;
  EstimatorOptions estimator;
  std::uint64_t seed = 0;
  int threads = 0;  // 0: worker_threads()
  // Jobs not yet started are recorded as failed once this becomes true.
  const std::atomic<bool>* stop = nullptr;
};

struct ConsistencyRecord {
  Index n = 0;
  int replicate = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string failure;
  double bf = 0.0;
  double log_bf = 0.0;
  double mc_standard_error = 0.0;
  double true_lr = 0.0;
  double abs_rel_error = 0.0;
  double max_lambda = 0.0;  // over the draws used
  std::uint64_t trace_hash = 0;
};

struct ErrorSummary {
  Index n = 0;
  std::size_t completed = 0;
  std::size_t failures = 0;
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  double max = 0.0;
};

struct ConsistencyResult {
  Framework framework = Framework::common_source;
  EstimatorForm form = EstimatorForm::posterior_mean_m2;
  std::vector<Index> schedule;
  double true_lr = 0.0;
  std::vector<ConsistencyRecord> records;  // sorted by (n, replicate)
  std::vector<ErrorSummary> summary;       // one per schedule entry
  std::size_t failures = 0;
  bool trace_fixed = true;

  // Median error never increases along the schedule.
  bool median_non_increasing() const;
};

ConsistencyResult consistency_experiment(const TrueModelSpec& spec,
                                         const ExperimentConfig& config);

struct CoverageRecord {
  Index n = 0;
  int replicate = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string failure;
  double bf = 0.0;
  double sigma_n = 0.0;
  std::vector<double> probability;  // one per alpha
  // n * posterior variance of lambda / gamma^2; NaN when not computed.
  double variance_ratio = std::numeric_limits<double>::quiet_NaN();
};

struct CoverageSummary {
  Index n = 0;
  std::size_t completed = 0;
  std::size_t failures = 0;
  std::vector<double> mean_probability;  // one per alpha
  double mean_variance_ratio = std::numeric_limits<double>::quiet_NaN();
};

struct CoverageResult {
  Framework framework = Framework::common_source;
  std::vector<Index> schedule;
  std::vector<double> alphas;
  std::vector<CoverageRecord> records;
  std::vector<CoverageSummary> summary;
  std::size_t failures = 0;
  bool trace_fixed = true;
};

CoverageResult coverage_experiment(const TrueModelSpec& spec,
                                   const ExperimentConfig& config,
                                   std::span<const double> alphas,
                                   bool with_delta_method = true);

struct NormalityRecord {
  int replicate = 0;
  bool failed = false;
  std::string failure;
  double ks_small = 0.0;
  double ks_large = 0.0;
};

struct NormalityResult {
  Framework framework = Framework::common_source;
  Index small_n = 0;
  Index large_n = 0;
  std::vector<NormalityRecord> records;
  std::size_t failures = 0;
  // Fraction of completed replicates with ks_large < ks_small.
  double fraction_improved = 0.0;
  // t(2) draws pushed through the same statistic.
  double heavy_tail_statistic = 0.0;
  bool heavy_tail_flagged = false;
};

inline constexpr double kNormalityThreshold = 0.05;

/// Uses the first and last entries of config.schedule.
NormalityResult normality_experiment(const TrueModelSpec& spec,
                                     const ExperimentConfig& config);

}  // namespace lrbf

#pragma once

// Hierarchical Gaussian source model and the likelihood-ratio functions for
// the common-source and specific-source problems.
//
// A source contributes items x_1..x_n drawn iid Normal(a, sigma_w) around a
// latent source effect a ~ Normal(mu, sigma_b). Every density is evaluated in
// log space from per-set sufficient statistics (count, mean, scatter), so the
// cost is O(p^3) per set no matter how many items it holds.

#include <Eigen/Dense>

#include <string>
#include <string_view>
#include <vector>

namespace lrbf {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Framework { common_source, specific_source };

// M1: numerator model of the likelihood ratio, M2: denominator model.
enum class Model { m1, m2 };

std::string_view to_string(Framework framework);
std::string_view to_string(Model model);
Framework parse_framework(std::string_view text);

/// Feature vectors attributed to one, possibly unknown, source. Rows of
/// `items` are the individual observations.
class ObservationSet {
 public:
  ObservationSet(std::string label, Matrix items);

  const std::string& label() const noexcept { return label_; }
  const Matrix& items() const noexcept { return items_; }
  Index size() const noexcept { return items_.rows(); }
  Index dim() const noexcept { return items_.cols(); }

 private:
  std::string label_;
  Matrix items_;
};

ObservationSet concatenate(const ObservationSet& first,
                           const ObservationSet& second);

/// Known-source reference data. The label of each set is its source id.
/// Item counts may differ between sources.
class BackgroundDatabase {
 public:
  explicit BackgroundDatabase(std::vector<ObservationSet> sources);

  const std::vector<ObservationSet>& sources() const noexcept {
    return sources_;
  }
  std::size_t source_count() const noexcept { return sources_.size(); }
  Index dim() const noexcept { return sources_.front().dim(); }
  Index total_items() const noexcept;
  // Common item count, or 0 when sources differ in size.
  Index items_per_source() const noexcept;

 private:
  std::vector<ObservationSet> sources_;
};

/// theta_a: population of many sources.
struct CommonSourceParams {
  Vector mu;
  Matrix sigma_b;
  Matrix sigma_w;
};

/// theta_b: the population of the one specified subject.
struct SpecificSourceParams {
  Vector mu_b;
  Matrix sigma_wb;
};

struct JointParams {
  CommonSourceParams theta_a;
  SpecificSourceParams theta_b;
};

// Throw Error(invalid_parameter | dimension_mismatch) when violated.
void validate(const CommonSourceParams& theta);
void validate(const SpecificSourceParams& theta);
void validate(const JointParams& theta);
void require_spd(const Matrix& m, std::string_view what);

struct GroupStats {
  Index n = 0;
  Vector mean;
  Matrix scatter;  // sum of (x - mean)(x - mean)^T
};

GroupStats summarize(const ObservationSet& set);
// Statistics of the union of both sets; symmetric in its arguments.
GroupStats pool(const GroupStats& first, const GroupStats& second);

/// Sum of log Normal(x_i; mean, cov) over the items summarized by `stats`.
double log_iid_normal(const GroupStats& stats, const Vector& mean,
                      const Matrix& cov);

/// Log joint density of one source's items with the latent effect
/// integrated out.
double log_marginal_single_source(const GroupStats& stats,
                                  const CommonSourceParams& theta);
double log_marginal_single_source(const ObservationSet& x,
                                  const CommonSourceParams& theta);

double log_lik_cs(const ObservationSet& x_b, const ObservationSet& x_c,
                  const CommonSourceParams& theta, Model model);
/// log lambda_cs = log_lik_cs(M1) - log_lik_cs(M2).
double lr_cs(const ObservationSet& x_b, const ObservationSet& x_c,
             const CommonSourceParams& theta);

double log_lik_ss(const ObservationSet& x_c, const JointParams& theta,
                  Model model);
/// log lambda_ss = log_lik_ss(M1) - log_lik_ss(M2).
double lr_ss(const ObservationSet& x_c, const JointParams& theta);

// Unconstrained coordinates: means as-is, each covariance through the
// row-major lower triangle of its Cholesky factor with log-diagonal.
Index log_cholesky_size(Index p);
Index parameter_count(Framework framework, Index p);
Vector pack_log_cholesky(const Matrix& spd);
Matrix unpack_log_cholesky(const Eigen::Ref<const Vector>& values, Index p);
Vector pack(const CommonSourceParams& theta);
Vector pack(const JointParams& theta);
CommonSourceParams unpack_common(const Eigen::Ref<const Vector>& values,
                                 Index p);
JointParams unpack_joint(const Eigen::Ref<const Vector>& values, Index p);

/// The likelihood-ratio function for fixed unknown-source data, with the
/// sufficient statistics precomputed for repeated evaluation over draws.
class LrFunction {
 public:
  static LrFunction common_source(const ObservationSet& x_b,
                                  const ObservationSet& x_c);
  static LrFunction specific_source(const ObservationSet& x_c);

  Framework framework() const noexcept { return framework_; }
  Index dim() const noexcept { return dim_; }
  Index parameter_count() const noexcept {
    return lrbf::parameter_count(framework_, dim_);
  }

  // Common source.
  double log_lik(const CommonSourceParams& theta_a, Model model) const;
  double log_lr(const CommonSourceParams& theta_a) const;
  // Specific source: M1 depends on theta_b only, M2 on theta_a only.
  double log_lik_subject(const SpecificSourceParams& theta_b) const;
  double log_lik_population(const CommonSourceParams& theta_a) const;
  // Dispatches on the framework; common source ignores theta_b.
  double log_lr(const JointParams& theta) const;
  // Unconstrained coordinates as laid out by pack().
  double log_lr(const Vector& unconstrained) const;

 private:
  LrFunction(Framework framework, Index dim);

  Framework framework_;
  Index dim_;
  GroupStats x_b_;
  GroupStats x_c_;
  GroupStats pooled_;
};

/// Central finite-difference gradient of exp(log_lr) at `theta` (unconstrained
/// coordinates), step h_i = max(step, step * |theta_i|).
Vector lr_gradient(const Vector& theta, const LrFunction& lr,
                   double step = 1e-5);

}  // namespace lrbf

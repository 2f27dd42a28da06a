#include "lrbf/model.hpp"

#include "lrbf/error.hpp"

#include <cmath>
#include <numbers>
#include <set>

namespace lrbf {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

Eigen::LLT<Matrix> factor(const Matrix& m, std::string_view what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::invalid_parameter,
                std::string(what) + ": Cholesky factorization failed");
  }
  return llt;
}

double log_det(const Eigen::LLT<Matrix>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

void require_dim(Index got, Index want, std::string_view what) {
  if (got != want) {
    throw Error(ErrorCode::dimension_mismatch,
                std::string(what) + ": dimension " + std::to_string(got) +
                    ", expected " + std::to_string(want));
  }
}

}  // namespace

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::dimension_mismatch: return "dimension_mismatch";
    case ErrorCode::invalid_parameter: return "invalid_parameter";
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::model_tag_mismatch: return "model_tag_mismatch";
    case ErrorCode::insufficient_draws: return "insufficient_draws";
    case ErrorCode::chain_failure: return "chain_failure";
    case ErrorCode::non_convergence: return "non_convergence";
    case ErrorCode::non_pd_hessian: return "non_pd_hessian";
    case ErrorCode::empty_file: return "empty_file";
    case ErrorCode::bad_header: return "bad_header";
    case ErrorCode::ragged_row: return "ragged_row";
    case ErrorCode::non_numeric: return "non_numeric";
    case ErrorCode::duplicate_item: return "duplicate_item";
    case ErrorCode::io_failure: return "io_failure";
    case ErrorCode::invalid_config: return "invalid_config";
  }
  return "unknown";
}

bool is_validation_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::chain_failure:
    case ErrorCode::non_convergence:
    case ErrorCode::non_pd_hessian:
      return false;
    default:
      return true;
  }
}

std::string_view to_string(Framework framework) {
  return framework == Framework::common_source ? "common-source"
                                               : "specific-source";
}

std::string_view to_string(Model model) {
  return model == Model::m1 ? "M1" : "M2";
}

Framework parse_framework(std::string_view text) {
  if (text == "common-source" || text == "cs") return Framework::common_source;
  if (text == "specific-source" || text == "ss")
    return Framework::specific_source;
  throw Error(ErrorCode::invalid_argument,
              "unknown framework '" + std::string(text) + "'");
}

ObservationSet::ObservationSet(std::string label, Matrix items)
    : label_(std::move(label)), items_(std::move(items)) {
  if (items_.rows() == 0 || items_.cols() == 0) {
    throw Error(ErrorCode::invalid_argument,
                "observation set '" + label_ + "' is empty");
  }
  if (!items_.allFinite()) {
    throw Error(ErrorCode::invalid_argument,
                "observation set '" + label_ + "' has non-finite entries");
  }
}

ObservationSet concatenate(const ObservationSet& first,
                           const ObservationSet& second) {
  require_dim(second.dim(), first.dim(), "concatenate");
  Matrix items(first.size() + second.size(), first.dim());
  items << first.items(), second.items();
  return ObservationSet(first.label() + "+" + second.label(), std::move(items));
}

BackgroundDatabase::BackgroundDatabase(std::vector<ObservationSet> sources)
    : sources_(std::move(sources)) {
  if (sources_.size() < 2) {
    throw Error(ErrorCode::invalid_argument,
                "background database needs at least two sources");
  }
  std::set<std::string> ids;
  for (const auto& s : sources_) {
    require_dim(s.dim(), sources_.front().dim(), "background source");
    if (!ids.insert(s.label()).second) {
      throw Error(ErrorCode::invalid_argument,
                  "duplicate source id '" + s.label() + "'");
    }
  }
}

Index BackgroundDatabase::total_items() const noexcept {
  Index total = 0;
  for (const auto& s : sources_) total += s.size();
  return total;
}

Index BackgroundDatabase::items_per_source() const noexcept {
  const Index n = sources_.front().size();
  for (const auto& s : sources_) {
    if (s.size() != n) return 0;
  }
  return n;
}

void require_spd(const Matrix& m, std::string_view what) {
  if (m.rows() != m.cols() || m.rows() == 0) {
    throw Error(ErrorCode::dimension_mismatch,
                std::string(what) + ": matrix is not square");
  }
  if (!m.allFinite()) {
    throw Error(ErrorCode::invalid_parameter,
                std::string(what) + ": non-finite entries");
  }
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw Error(ErrorCode::invalid_parameter,
                std::string(what) + ": matrix is not symmetric");
  }
  factor(m, what);
}

void validate(const CommonSourceParams& theta) {
  const Index p = theta.mu.size();
  if (p < 1 || !theta.mu.allFinite()) {
    throw Error(ErrorCode::invalid_parameter, "mu: empty or non-finite");
  }
  require_dim(theta.sigma_b.rows(), p, "sigma_b");
  require_dim(theta.sigma_w.rows(), p, "sigma_w");
  require_spd(theta.sigma_b, "sigma_b");
  require_spd(theta.sigma_w, "sigma_w");
}

void validate(const SpecificSourceParams& theta) {
  const Index p = theta.mu_b.size();
  if (p < 1 || !theta.mu_b.allFinite()) {
    throw Error(ErrorCode::invalid_parameter, "mu_b: empty or non-finite");
  }
  require_dim(theta.sigma_wb.rows(), p, "sigma_wb");
  require_spd(theta.sigma_wb, "sigma_wb");
}

void validate(const JointParams& theta) {
  validate(theta.theta_a);
  validate(theta.theta_b);
  require_dim(theta.theta_b.mu_b.size(), theta.theta_a.mu.size(), "theta_b");
}

GroupStats summarize(const ObservationSet& set) {
  GroupStats stats;
  stats.n = set.size();
  stats.mean = set.items().colwise().mean().transpose();
  const Matrix centered = set.items().rowwise() - stats.mean.transpose();
  stats.scatter = centered.transpose() * centered;
  return stats;
}

GroupStats pool(const GroupStats& first, const GroupStats& second) {
  require_dim(second.mean.size(), first.mean.size(), "pool");
  GroupStats out;
  out.n = first.n + second.n;
  const double na = static_cast<double>(first.n);
  const double nb = static_cast<double>(second.n);
  const double n = na + nb;
  out.mean = (na * first.mean + nb * second.mean) / n;
  const Vector d = first.mean - second.mean;
  out.scatter = first.scatter + second.scatter + (na * nb / n) * (d * d.transpose());
  return out;
}

double log_iid_normal(const GroupStats& stats, const Vector& mean,
                      const Matrix& cov) {
  const Index p = mean.size();
  require_dim(stats.mean.size(), p, "observations");
  require_dim(cov.rows(), p, "covariance");
  const auto llt = factor(cov, "covariance");
  const Vector z = llt.matrixL().solve(stats.mean - mean);
  const double n = static_cast<double>(stats.n);
  const double trace = stats.n > 1 ? llt.solve(stats.scatter).trace() : 0.0;
  return -0.5 * (n * (p * kLog2Pi + log_det(llt)) + trace + n * z.squaredNorm());
}

double log_marginal_single_source(const GroupStats& stats,
                                  const CommonSourceParams& theta) {
  const Index p = theta.mu.size();
  require_dim(stats.mean.size(), p, "observations");
  const double n = static_cast<double>(stats.n);

  // The set mean is Normal(mu, sigma_b + sigma_w / n); the remaining
  // within-set variation depends on sigma_w only.
  GroupStats mean_only{1, stats.mean, Matrix()};
  const double between =
      log_iid_normal(mean_only, theta.mu, theta.sigma_b + theta.sigma_w / n);
  if (stats.n == 1) return between;

  const auto w = factor(theta.sigma_w, "sigma_w");
  const double within =
      -0.5 * ((n - 1.0) * (p * kLog2Pi + log_det(w)) + p * std::log(n) +
              w.solve(stats.scatter).trace());
  return between + within;
}

double log_marginal_single_source(const ObservationSet& x,
                                  const CommonSourceParams& theta) {
  return log_marginal_single_source(summarize(x), theta);
}

double log_lik_cs(const ObservationSet& x_b, const ObservationSet& x_c,
                  const CommonSourceParams& theta, Model model) {
  return LrFunction::common_source(x_b, x_c).log_lik(theta, model);
}

double lr_cs(const ObservationSet& x_b, const ObservationSet& x_c,
             const CommonSourceParams& theta) {
  return LrFunction::common_source(x_b, x_c).log_lr(theta);
}

double log_lik_ss(const ObservationSet& x_c, const JointParams& theta,
                  Model model) {
  const auto lr = LrFunction::specific_source(x_c);
  return model == Model::m1 ? lr.log_lik_subject(theta.theta_b)
                            : lr.log_lik_population(theta.theta_a);
}

double lr_ss(const ObservationSet& x_c, const JointParams& theta) {
  return LrFunction::specific_source(x_c).log_lr(theta);
}

Index log_cholesky_size(Index p) { return p * (p + 1) / 2; }

Index parameter_count(Framework framework, Index p) {
  const Index common = p + 2 * log_cholesky_size(p);
  return framework == Framework::common_source
             ? common
             : common + p + log_cholesky_size(p);
}

Vector pack_log_cholesky(const Matrix& spd) {
  const Index p = spd.rows();
  const Matrix l = factor(spd, "pack_log_cholesky").matrixL();
  Vector out(log_cholesky_size(p));
  Index k = 0;
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < i; ++j) out[k++] = l(i, j);
    out[k++] = std::log(l(i, i));
  }
  return out;
}

Matrix unpack_log_cholesky(const Eigen::Ref<const Vector>& values, Index p) {
  require_dim(values.size(), log_cholesky_size(p), "log-Cholesky block");
  Matrix l = Matrix::Zero(p, p);
  Index k = 0;
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < i; ++j) l(i, j) = values[k++];
    l(i, i) = std::exp(values[k++]);
  }
  return l * l.transpose();
}

Vector pack(const CommonSourceParams& theta) {
  const Index p = theta.mu.size();
  const Index q = log_cholesky_size(p);
  Vector out(p + 2 * q);
  out << theta.mu, pack_log_cholesky(theta.sigma_b),
      pack_log_cholesky(theta.sigma_w);
  return out;
}

Vector pack(const JointParams& theta) {
  const Index p = theta.theta_a.mu.size();
  const Index q = log_cholesky_size(p);
  Vector out(2 * p + 3 * q);
  out << pack(theta.theta_a), theta.theta_b.mu_b,
      pack_log_cholesky(theta.theta_b.sigma_wb);
  return out;
}

CommonSourceParams unpack_common(const Eigen::Ref<const Vector>& values,
                                 Index p) {
  const Index q = log_cholesky_size(p);
  if (values.size() < p + 2 * q) {
    throw Error(ErrorCode::dimension_mismatch, "unpack_common: too few values");
  }
  return CommonSourceParams{values.head(p),
                            unpack_log_cholesky(values.segment(p, q), p),
                            unpack_log_cholesky(values.segment(p + q, q), p)};
}

JointParams unpack_joint(const Eigen::Ref<const Vector>& values, Index p) {
  const Index q = log_cholesky_size(p);
  require_dim(values.size(), 2 * p + 3 * q, "unpack_joint");
  const Index offset = p + 2 * q;
  return JointParams{
      unpack_common(values.head(offset), p),
      SpecificSourceParams{values.segment(offset, p),
                           unpack_log_cholesky(values.segment(offset + p, q), p)}};
}

LrFunction::LrFunction(Framework framework, Index dim)
    : framework_(framework), dim_(dim) {}

LrFunction LrFunction::common_source(const ObservationSet& x_b,
                                     const ObservationSet& x_c) {
  require_dim(x_c.dim(), x_b.dim(), "x_c");
  LrFunction out(Framework::common_source, x_b.dim());
  out.x_b_ = summarize(x_b);
  out.x_c_ = summarize(x_c);
  out.pooled_ = pool(out.x_b_, out.x_c_);
  return out;
}

LrFunction LrFunction::specific_source(const ObservationSet& x_c) {
  LrFunction out(Framework::specific_source, x_c.dim());
  out.x_c_ = summarize(x_c);
  return out;
}

double LrFunction::log_lik(const CommonSourceParams& theta_a,
                           Model model) const {
  if (framework_ != Framework::common_source) {
    throw Error(ErrorCode::invalid_argument,
                "log_lik(theta_a, model) is defined for common source only");
  }
  if (model == Model::m1) return log_marginal_single_source(pooled_, theta_a);
  return log_marginal_single_source(x_b_, theta_a) +
         log_marginal_single_source(x_c_, theta_a);
}

double LrFunction::log_lr(const CommonSourceParams& theta_a) const {
  return log_lik(theta_a, Model::m1) - log_lik(theta_a, Model::m2);
}

double LrFunction::log_lik_subject(const SpecificSourceParams& theta_b) const {
  return log_iid_normal(x_c_, theta_b.mu_b, theta_b.sigma_wb);
}

double LrFunction::log_lik_population(const CommonSourceParams& theta_a) const {
  return log_marginal_single_source(x_c_, theta_a);
}

double LrFunction::log_lr(const JointParams& theta) const {
  if (framework_ == Framework::common_source) return log_lr(theta.theta_a);
  return log_lik_subject(theta.theta_b) - log_lik_population(theta.theta_a);
}

double LrFunction::log_lr(const Vector& unconstrained) const {
  require_dim(unconstrained.size(), parameter_count(), "parameter vector");
  if (framework_ == Framework::common_source) {
    return log_lr(unpack_common(unconstrained, dim_));
  }
  return log_lr(unpack_joint(unconstrained, dim_));
}

Vector lr_gradient(const Vector& theta, const LrFunction& lr, double step) {
  Vector grad(theta.size());
  Vector probe = theta;
  for (Index i = 0; i < theta.size(); ++i) {
    const double h = std::max(step, step * std::abs(theta[i]));
    probe[i] = theta[i] + h;
    const double up = std::exp(lr.log_lr(probe));
    probe[i] = theta[i] - h;
    const double down = std::exp(lr.log_lr(probe));
    probe[i] = theta[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace lrbf

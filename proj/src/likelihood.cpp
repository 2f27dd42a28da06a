#include "lrbf/error.hpp"
#include "lrbf/lab.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

namespace lrbf {

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

Matrix identity(Index p) { return Matrix::Identity(p, p); }

Matrix lower_factor(const Eigen::Ref<const Vector>& values, Index p) {
  Matrix l = Matrix::Zero(p, p);
  Index k = 0;
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < i; ++j) l(i, j) = values[k++];
    l(i, i) = std::exp(values[k++]);
  }
  return l;
}

// d loglik / d(log-Cholesky block) from the symmetric gradient G with
// respect to Sigma = L L^T.
Vector chain_to_log_cholesky(const Matrix& g, const Matrix& l) {
  const Index p = l.rows();
  const Matrix dl = 2.0 * g * l;
  Vector out(log_cholesky_size(p));
  Index k = 0;
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < i; ++j) out[k++] = dl(i, j);
    out[k++] = dl(i, i) * l(i, i);
  }
  return out;
}

struct Factored {
  Matrix cov;
  Eigen::LLT<Matrix> llt;
  double log_det;
  Matrix inverse;
};

Factored factor(const Matrix& cov) {
  Factored f{cov, Eigen::LLT<Matrix>(cov), 0.0, Matrix()};
  if (f.llt.info() != Eigen::Success) {
    throw Error(ErrorCode::invalid_parameter, "covariance is not positive definite");
  }
  f.log_det = 2.0 * f.llt.matrixLLT().diagonal().array().log().sum();
  f.inverse = f.llt.solve(identity(cov.rows()));
  return f;
}

double infinity_norm(const Vector& g, const std::vector<bool>& fixed) {
  double m = 0.0;
  for (Index i = 0; i < g.size(); ++i) {
    if (!fixed.empty() && fixed[static_cast<std::size_t>(i)]) continue;
    m = std::max(m, std::abs(g[i]));
  }
  return m;
}

}  // namespace

FullLikelihood::FullLikelihood(const CaseData& data, ConditioningModel model)
    : framework_(model.framework), p_(data.background.dim()) {
  if (data.x_b.dim() != p_ || data.x_c.dim() != p_) {
    throw Error(ErrorCode::dimension_mismatch,
                "unknown-source data dimension differs from the background");
  }
  std::vector<GroupStats> groups;
  for (const auto& s : data.background.sources()) groups.push_back(summarize(s));
  const GroupStats b = summarize(data.x_b);
  const GroupStats c = summarize(data.x_c);
  if (framework_ == Framework::common_source) {
    if (model.conditioning == Conditioning::m1) groups.push_back(pool(b, c));
    if (model.conditioning == Conditioning::m2) {
      groups.push_back(b);
      groups.push_back(c);
    }
  } else {
    subject_ = b;
    if (model.conditioning == Conditioning::m1) subject_ = pool(b, c);
    if (model.conditioning == Conditioning::m2) groups.push_back(c);
  }

  std::map<Index, std::vector<Vector>> by_size;
  within_scatter_ = Matrix::Zero(p_, p_);
  for (const auto& g : groups) {
    by_size[g.n].push_back(g.mean);
    if (g.n > 1) within_scatter_ += g.scatter;
    within_dof_ += g.n - 1;
    items_ += g.n;
  }
  for (const auto& [n, means] : by_size) {
    Bucket bucket{n, Matrix(p_, static_cast<Index>(means.size()))};
    for (std::size_t k = 0; k < means.size(); ++k) {
      bucket.means.col(static_cast<Index>(k)) = means[k];
    }
    buckets_.push_back(std::move(bucket));
  }
}

Index FullLikelihood::parameter_count() const noexcept {
  return lrbf::parameter_count(framework_, p_);
}

double FullLikelihood::value(const Vector& theta) const {
  Vector unused;
  return value_and_gradient(theta, unused);
}

double FullLikelihood::value_and_gradient(const Vector& theta, Vector& grad) const {
  if (theta.size() != parameter_count()) {
    throw Error(ErrorCode::dimension_mismatch, "parameter vector has wrong size");
  }
  const Index p = p_;
  const Index q = log_cholesky_size(p);
  const Vector mu = theta.head(p);
  const Matrix l_b = lower_factor(theta.segment(p, q), p);
  const Matrix l_w = lower_factor(theta.segment(p + q, q), p);
  const Matrix sigma_b = l_b * l_b.transpose();
  const Matrix sigma_w = l_w * l_w.transpose();

  double loglik = 0.0;
  Vector d_mu = Vector::Zero(p);
  Matrix g_b = Matrix::Zero(p, p);
  Matrix g_w = Matrix::Zero(p, p);

  // Each set mean is Normal(mu, sigma_b + sigma_w / n).
  for (const Bucket& bucket : buckets_) {
    const double n = static_cast<double>(bucket.n);
    const double k = static_cast<double>(bucket.means.cols());
    const Factored s = factor(sigma_b + sigma_w / n);
    const Matrix resid = bucket.means.colwise() - mu;
    const Matrix outer = resid * resid.transpose();
    loglik += -0.5 * (k * (p * kLog2Pi + s.log_det) + (s.inverse * outer).trace());
    d_mu += s.inverse * resid.rowwise().sum();
    const Matrix g_s = 0.5 * (s.inverse * outer * s.inverse - k * s.inverse);
    g_b += g_s;
    g_w += g_s / n;
  }

  // Within-set variation around each set mean.
  if (within_dof_ > 0) {
    const Factored w = factor(sigma_w);
    double log_n_sum = 0.0;
    for (const Bucket& bucket : buckets_) {
      if (bucket.n > 1) {
        log_n_sum += static_cast<double>(bucket.means.cols()) *
                     std::log(static_cast<double>(bucket.n));
      }
    }
    const double dof = static_cast<double>(within_dof_);
    loglik += -0.5 * (dof * (p * kLog2Pi + w.log_det) + p * log_n_sum +
                      (w.inverse * within_scatter_).trace());
    g_w += 0.5 * (w.inverse * within_scatter_ * w.inverse - dof * w.inverse);
  }

  grad.resize(theta.size());
  grad.head(p) = d_mu;
  grad.segment(p, q) = chain_to_log_cholesky(0.5 * (g_b + g_b.transpose()), l_b);
  grad.segment(p + q, q) = chain_to_log_cholesky(0.5 * (g_w + g_w.transpose()), l_w);

  if (subject_) {
    const Index offset = p + 2 * q;
    const Vector mu_b = theta.segment(offset, p);
    const Matrix l_s = lower_factor(theta.segment(offset + p, q), p);
    const Factored s = factor(l_s * l_s.transpose());
    const double n = static_cast<double>(subject_->n);
    const Vector d = subject_->mean - mu_b;
    const Matrix spread =
        (subject_->n > 1 ? subject_->scatter : Matrix::Zero(p, p)) + n * (d * d.transpose());
    loglik += -0.5 * (n * (p * kLog2Pi + s.log_det) + (s.inverse * spread).trace());
    grad.segment(offset, p) = n * (s.inverse * d);
    const Matrix g_s = 0.5 * (s.inverse * spread * s.inverse - n * s.inverse);
    grad.segment(offset + p, q) =
        chain_to_log_cholesky(0.5 * (g_s + g_s.transpose()), l_s);
  }
  return loglik;
}

Vector FullLikelihood::initial_point() const {
  const Index p = p_;
  Index groups = 0;
  Vector mean_sum = Vector::Zero(p);
  double inverse_size_sum = 0.0;
  for (const Bucket& b : buckets_) {
    groups += b.means.cols();
    mean_sum += b.means.rowwise().sum();
    inverse_size_sum += static_cast<double>(b.means.cols()) / static_cast<double>(b.n);
  }
  const Vector mu = mean_sum / static_cast<double>(groups);
  Matrix spread = Matrix::Zero(p, p);
  for (const Bucket& b : buckets_) {
    const Matrix r = b.means.colwise() - mu;
    spread += r * r.transpose();
  }
  spread /= static_cast<double>(std::max<Index>(1, groups - 1));

  Matrix sigma_w = identity(p);
  if (within_dof_ > p) {
    const Matrix pooled = within_scatter_ / static_cast<double>(within_dof_);
    if (Eigen::LLT<Matrix>(pooled).info() == Eigen::Success) sigma_w = pooled;
  }
  Matrix sigma_b = spread - sigma_w * (inverse_size_sum / static_cast<double>(groups));
  if (Eigen::LLT<Matrix>(sigma_b).info() != Eigen::Success) {
    sigma_b = Eigen::LLT<Matrix>(spread).info() == Eigen::Success ? Matrix(0.5 * spread)
                                                                   : identity(p);
  }
  const CommonSourceParams theta_a{mu, sigma_b, sigma_w};
  if (!subject_) return pack(theta_a);

  Matrix sigma_s = identity(p);
  if (subject_->n > p + 1) {
    const Matrix cov = subject_->scatter / static_cast<double>(subject_->n - 1);
    if (Eigen::LLT<Matrix>(cov).info() == Eigen::Success) sigma_s = cov;
  }
  return pack(JointParams{theta_a, SpecificSourceParams{subject_->mean, sigma_s}});
}

MleResult mle_fit(const FullLikelihood& likelihood, const std::optional<Vector>& init,
                  const MleOptions& options) {
  const Index k = likelihood.parameter_count();
  if (!options.fixed.empty() && static_cast<Index>(options.fixed.size()) != k) {
    throw Error(ErrorCode::dimension_mismatch, "fixed-coordinate mask has wrong size");
  }
  Vector x = init.value_or(likelihood.initial_point());
  if (x.size() != k) {
    throw Error(ErrorCode::dimension_mismatch, "initial point has wrong size");
  }
  const auto is_free = [&](Index i) {
    return options.fixed.empty() || !options.fixed[static_cast<std::size_t>(i)];
  };
  // Minimize the negative log-likelihood; non-PD trial points count as +inf.
  const auto objective = [&](const Vector& theta, Vector& grad) {
    try {
      const double f = -likelihood.value_and_gradient(theta, grad);
      grad = -grad;
      for (Index i = 0; i < k; ++i) {
        if (!is_free(i)) grad[i] = 0.0;
      }
      return std::isfinite(f) ? f : std::numeric_limits<double>::infinity();
    } catch (const Error&) {
      grad = Vector::Zero(k);
      return std::numeric_limits<double>::infinity();
    }
  };

  Vector g;
  double f = objective(x, g);
  if (!std::isfinite(f)) {
    throw Error(ErrorCode::invalid_argument, "log-likelihood is not finite at the start");
  }
  Matrix h_inv = identity(k);
  bool scaled = false;
  int iteration = 0;
  std::ostringstream trace;

  // Quasi-Newton phase.
  for (; iteration < options.max_iterations; ++iteration) {
    if (infinity_norm(g, options.fixed) < options.gradient_tolerance) break;
    Vector direction = -h_inv * g;
    if (g.dot(direction) >= 0.0) {
      h_inv = identity(k);
      direction = -g;
    }
    double step = 1.0;
    Vector x_new, g_new;
    double f_new = std::numeric_limits<double>::infinity();
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * direction;
      f_new = objective(x_new, g_new);
      if (f_new <= f + 1e-4 * step * g.dot(direction)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // stalled at rounding level; Newton polish follows
    const Vector s = x_new - x;
    const Vector y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        h_inv *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Matrix left = identity(k) - rho * s * y.transpose();
      h_inv = left * h_inv * left.transpose() + rho * s * s.transpose();
    }
    x = x_new;
    f = f_new;
    g = g_new;
    if (iteration % 25 == 0) trace << " it=" << iteration << " f=" << f
                                   << " |g|=" << infinity_norm(g, options.fixed);
  }

  // Newton polish on the gradient alone, which stays accurate after the
  // objective's decrease has dropped below its rounding error.
  for (int polish = 0; polish < 20 &&
                       infinity_norm(g, options.fixed) >= options.gradient_tolerance;
       ++polish, ++iteration) {
    Matrix hess(k, k);
    for (Index j = 0; j < k; ++j) {
      if (!is_free(j)) {
        hess.col(j) = Vector::Unit(k, j);
        continue;
      }
      const double h = 1e-5 * std::max(1.0, std::abs(x[j]));
      Vector probe = x, g_up, g_down;
      probe[j] += h;
      objective(probe, g_up);
      probe[j] = x[j] - h;
      objective(probe, g_down);
      hess.col(j) = (g_up - g_down) / (2.0 * h);
    }
    for (Index i = 0; i < k; ++i) {
      if (!is_free(i)) {
        hess.row(i) = Vector::Unit(k, i).transpose();
        hess.col(i) = Vector::Unit(k, i);
      }
    }
    hess = 0.5 * (hess + hess.transpose());
    const Vector step = -hess.ldlt().solve(g);
    Vector g_new;
    const double f_new = objective(x + step, g_new);
    if (!std::isfinite(f_new) ||
        infinity_norm(g_new, options.fixed) >= infinity_norm(g, options.fixed)) {
      break;
    }
    x += step;
    f = f_new;
    g = g_new;
  }

  const double norm = infinity_norm(g, options.fixed);
  if (!(norm < options.gradient_tolerance)) {
    std::ostringstream msg;
    msg << "maximum likelihood fit did not converge after " << iteration
        << " iterations (|grad|_inf = " << norm << ", f = " << f << ");"
        << trace.str();
    throw Error(ErrorCode::non_convergence, msg.str());
  }
  return MleResult{x, -f, norm, iteration};
}

MleResult mle_fit(const CaseData& data, ConditioningModel model,
                  const std::optional<Vector>& init, const MleOptions& options) {
  return mle_fit(FullLikelihood(data, model), init, options);
}

Matrix observed_info_inverse(const Vector& theta_hat, const GradientFunction& gradient) {
  const Index k = theta_hat.size();
  Matrix hess(k, k);
  for (Index j = 0; j < k; ++j) {
    const double h = 1e-5 * std::max(1.0, std::abs(theta_hat[j]));
    Vector probe = theta_hat;
    probe[j] += h;
    const Vector up = gradient(probe);
    probe[j] = theta_hat[j] - h;
    const Vector down = gradient(probe);
    if (up.size() != k || down.size() != k) {
      throw Error(ErrorCode::dimension_mismatch, "gradient has wrong size");
    }
    hess.col(j) = (up - down) / (2.0 * h);
  }
  const Matrix info = -0.5 * (hess + hess.transpose());
  const Eigen::LLT<Matrix> llt(info);
  if (llt.info() != Eigen::Success) {
    const double smallest =
        Eigen::SelfAdjointEigenSolver<Matrix>(info, Eigen::EigenvaluesOnly)
            .eigenvalues()
            .minCoeff();
    std::ostringstream msg;
    msg << "observed information is not positive definite (smallest eigenvalue "
        << smallest << ")";
    throw NonPdHessianError(msg.str(), smallest);
  }
  const Matrix inverse = llt.solve(identity(k));
  return 0.5 * (inverse + inverse.transpose());
}

Matrix observed_info_inverse(const Vector& theta_hat, const CaseData& data,
                             ConditioningModel model) {
  const FullLikelihood likelihood(data, model);
  return observed_info_inverse(theta_hat, [&](const Vector& theta) {
    Vector grad;
    likelihood.value_and_gradient(theta, grad);
    return grad;
  });
}

}  // namespace lrbf

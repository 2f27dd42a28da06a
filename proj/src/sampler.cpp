#include "lrbf/sampler.hpp"

#include "lrbf/error.hpp"

#include <algorithm>
#include <exception>
#include <limits>
#include <cmath>
#include <numeric>
#include <thread>

namespace lrbf {

namespace {

constexpr int kMaxPdRetries = 100;

void check_prior_block(const NormalPrior& prior, Index p, std::string_view what) {
  if (prior.mean.size() != p || prior.cov.rows() != p) {
    throw Error(ErrorCode::dimension_mismatch,
                std::string(what) + ": prior dimension mismatch");
  }
  require_spd(prior.cov, what);
}

void check_prior_block(const InverseWishartPrior& prior, Index p,
                       std::string_view what) {
  if (prior.scale.rows() != p) {
    throw Error(ErrorCode::dimension_mismatch,
                std::string(what) + ": prior dimension mismatch");
  }
  if (!(prior.dof > static_cast<double>(p) - 1.0)) {
    throw Error(ErrorCode::invalid_parameter,
                std::string(what) + ": degrees of freedom must exceed p - 1");
  }
  require_spd(prior.scale, what);
}

Matrix identity(Index p) { return Matrix::Identity(p, p); }

Matrix symmetrized(const Matrix& m) { return 0.5 * (m + m.transpose()); }

// Draws Normal(prec^{-1} rhs, prec^{-1}) given the factorization of prec.
Vector draw_gaussian(const Eigen::LLT<Matrix>& prec, const Vector& rhs,
                     Rng& rng) {
  Vector z(rhs.size());
  rng.fill_normal(z);
  prec.matrixU().solveInPlace(z);
  return prec.solve(rhs) + z;
}

Eigen::LLT<Matrix> factor_or_fail(const Matrix& m, std::string_view what) {
  Eigen::LLT<Matrix> llt(m);
  if (llt.info() != Eigen::Success) {
    throw Error(ErrorCode::chain_failure,
                std::string(what) + " lost positive definiteness");
  }
  return llt;
}

Matrix draw_covariance(double dof, const Matrix& scale, Rng& rng,
                       std::size_t& rejections) {
  for (int attempt = 0; attempt < kMaxPdRetries; ++attempt) {
    Matrix draw = sample_inverse_wishart(dof, scale, rng);
    if (draw.allFinite() && Eigen::LLT<Matrix>(draw).info() == Eigen::Success) {
      return draw;
    }
    ++rejections;
  }
  throw Error(ErrorCode::chain_failure,
              "inverse-Wishart draws repeatedly failed the PD check");
}

std::optional<Matrix> spd_or_nothing(const Matrix& m) {
  if (!m.allFinite() || Eigen::LLT<Matrix>(m).info() != Eigen::Success) {
    return std::nullopt;
  }
  return m;
}

// mu, sigma_b, sigma_w and one latent effect per group.
class PopulationSampler {
 public:
  PopulationSampler(const std::vector<GroupStats>& groups, const PriorSpec& prior)
      : p_(groups.front().mean.size()),
        group_count_(static_cast<Index>(groups.size())) {
    std::vector<std::size_t> order(groups.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      return groups[a].n < groups[b].n;
    });

    means_.resize(p_, group_count_);
    sizes_.resize(group_count_);
    within_total_ = Matrix::Zero(p_, p_);
    total_items_ = 0;
    for (Index k = 0; k < group_count_; ++k) {
      const GroupStats& g = groups[order[k]];
      means_.col(k) = g.mean;
      sizes_[k] = static_cast<double>(g.n);
      if (g.n > 1) within_total_ += g.scatter;
      total_items_ += g.n;
      if (buckets_.empty() || buckets_.back().n != g.n) {
        buckets_.push_back(Bucket{g.n, k, 0});
      }
      ++buckets_.back().count;
    }
    latent_ = means_;

    const Eigen::LLT<Matrix> v0(prior.mean_prior.cov);
    v0_inv_ = v0.solve(identity(p_));
    v0_inv_m0_ = v0_inv_ * prior.mean_prior.mean;
    between_ = prior.between_prior;
    within_ = prior.within_prior;
    fixed_b_ = prior.fixed_sigma_b.has_value();
    fixed_w_ = prior.fixed_sigma_w.has_value();

    mu_ = means_.rowwise().mean();
    if (fixed_w_) {
      sigma_w_ = *prior.fixed_sigma_w;
    } else {
      const Index dof = total_items_ - group_count_;
      std::optional<Matrix> pooled;
      if (dof > p_) pooled = spd_or_nothing(within_total_ / static_cast<double>(dof));
      sigma_w_ = pooled.value_or(identity(p_));
    }
    if (fixed_b_) {
      sigma_b_ = *prior.fixed_sigma_b;
    } else {
      std::optional<Matrix> spread;
      if (group_count_ > p_ + 1) {
        const Matrix centered = means_.colwise() - mu_;
        spread = spd_or_nothing(centered * centered.transpose() /
                                static_cast<double>(group_count_ - 1));
      }
      sigma_b_ = spread.value_or(identity(p_));
    }
  }

  void sweep(Rng& rng) {
    const auto llt_b = factor_or_fail(sigma_b_, "sigma_b");
    const auto llt_w = factor_or_fail(sigma_w_, "sigma_w");
    const Matrix prec_b = llt_b.solve(identity(p_));
    const Matrix prec_w = llt_w.solve(identity(p_));
    const Vector prec_b_mu = prec_b * mu_;

    // Latent effects, one bucket of equal-sized groups at a time.
    for (const Bucket& bucket : buckets_) {
      const double n = static_cast<double>(bucket.n);
      const Eigen::LLT<Matrix> prec(prec_b + n * prec_w);
      Matrix rhs = (n * prec_w) * means_.middleCols(bucket.begin, bucket.count);
      rhs.colwise() += prec_b_mu;
      noise_.resize(p_, bucket.count);
      rng.fill_normal(noise_);
      prec.matrixU().solveInPlace(noise_);
      latent_.middleCols(bucket.begin, bucket.count) = prec.solve(rhs) + noise_;
    }

    {
      const Eigen::LLT<Matrix> prec(v0_inv_ +
                                    static_cast<double>(group_count_) * prec_b);
      mu_ = draw_gaussian(prec, v0_inv_m0_ + prec_b * latent_.rowwise().sum(), rng);
    }

    if (!fixed_b_) {
      const Matrix centered = latent_.colwise() - mu_;
      sigma_b_ = draw_covariance(
          between_.dof + static_cast<double>(group_count_),
          between_.scale + centered * centered.transpose(), rng, pd_rejections_);
    }
    if (!fixed_w_) {
      const Matrix resid = means_ - latent_;
      const Matrix scatter =
          within_total_ + resid * sizes_.asDiagonal() * resid.transpose();
      sigma_w_ = draw_covariance(within_.dof + static_cast<double>(total_items_),
                                 within_.scale + symmetrized(scatter), rng,
                                 pd_rejections_);
    }
  }

  CommonSourceParams params() const { return {mu_, sigma_b_, sigma_w_}; }
  std::size_t latent_count() const { return static_cast<std::size_t>(group_count_); }
  std::size_t pd_rejections() const { return pd_rejections_; }

 private:
  struct Bucket {
    Index n;
    Index begin;
    Index count;
  };

  Index p_;
  Index group_count_;
  Matrix means_;
  Vector sizes_;
  Matrix within_total_;
  Index total_items_ = 0;
  std::vector<Bucket> buckets_;

  Matrix v0_inv_;
  Vector v0_inv_m0_;
  InverseWishartPrior between_;
  InverseWishartPrior within_;
  bool fixed_b_ = false;
  bool fixed_w_ = false;

  Matrix latent_;
  Vector mu_;
  Matrix sigma_b_;
  Matrix sigma_w_;
  Matrix noise_;
  std::size_t pd_rejections_ = 0;
};

// iid Normal(mu_b, sigma_wb) data with semi-conjugate priors.
class SubjectSampler {
 public:
  SubjectSampler(GroupStats data, const NormalPrior& mean_prior,
                 const InverseWishartPrior& within_prior)
      : data_(std::move(data)), within_(within_prior) {
    const Index p = data_.mean.size();
    const Eigen::LLT<Matrix> v0(mean_prior.cov);
    v0_inv_ = v0.solve(identity(p));
    v0_inv_m0_ = v0_inv_ * mean_prior.mean;
    mu_ = data_.mean;
    std::optional<Matrix> sample_cov;
    if (data_.n > p + 1) {
      sample_cov = spd_or_nothing(data_.scatter / static_cast<double>(data_.n - 1));
    }
    sigma_ = sample_cov.value_or(identity(p));
  }

  void sweep(Rng& rng) {
    const Index p = mu_.size();
    const double n = static_cast<double>(data_.n);
    const Matrix prec_w = factor_or_fail(sigma_, "sigma_wb").solve(identity(p));
    const Eigen::LLT<Matrix> prec(v0_inv_ + n * prec_w);
    mu_ = draw_gaussian(prec, v0_inv_m0_ + n * (prec_w * data_.mean), rng);
    const Vector d = data_.mean - mu_;
    const Matrix scatter = (data_.n > 1 ? data_.scatter : Matrix::Zero(p, p)) +
                           n * (d * d.transpose());
    sigma_ = draw_covariance(within_.dof + n, within_.scale + scatter, rng,
                             pd_rejections_);
  }

  SpecificSourceParams params() const { return {mu_, sigma_}; }
  std::size_t pd_rejections() const { return pd_rejections_; }

 private:
  GroupStats data_;
  InverseWishartPrior within_;
  Matrix v0_inv_;
  Vector v0_inv_m0_;
  Vector mu_;
  Matrix sigma_;
  std::size_t pd_rejections_ = 0;
};

struct ChainOutput {
  std::vector<CommonSourceParams> theta_a;
  std::vector<SpecificSourceParams> theta_b;
  std::size_t pd_rejections = 0;
  std::size_t latent_effects = 0;
  std::exception_ptr failure;
};

struct SamplerInputs {
  std::vector<GroupStats> population;
  std::optional<GroupStats> subject;
};

ChainOutput run_chain(const SamplerInputs& inputs, const PriorSpec& prior,
                      const ChainConfig& config, std::uint64_t chain_index) {
  ChainOutput out;
  try {
    Rng rng(config.seed, chain_index);
    PopulationSampler population(inputs.population, prior);
    std::optional<SubjectSampler> subject;
    if (inputs.subject) {
      subject.emplace(*inputs.subject, *prior.subject_mean_prior,
                      *prior.subject_within_prior);
    }
    const std::size_t keep = config.draws_per_chain();
    out.theta_a.reserve(keep);
    if (subject) out.theta_b.reserve(keep);
    for (int it = 0; it < config.iterations; ++it) {
      population.sweep(rng);
      if (subject) subject->sweep(rng);
      if (it >= config.burn_in && (it - config.burn_in) % config.thin == 0) {
        out.theta_a.push_back(population.params());
        if (subject) out.theta_b.push_back(subject->params());
      }
    }
    out.latent_effects = population.latent_count();
    out.pd_rejections = population.pd_rejections() +
                        (subject ? subject->pd_rejections() : 0);
  } catch (...) {
    out.failure = std::current_exception();
  }
  return out;
}

PosteriorDraws run_chains(const SamplerInputs& inputs, const PriorSpec& prior,
                          const ChainConfig& config, ConditioningModel tag) {
  validate(config);
  std::vector<ChainOutput> outputs(static_cast<std::size_t>(config.chains));
  if (config.chains == 1) {
    outputs[0] = run_chain(inputs, prior, config, 0);
  } else {
    std::vector<std::thread> workers;
    for (int c = 0; c < config.chains; ++c) {
      workers.emplace_back([&, c] {
        outputs[static_cast<std::size_t>(c)] =
            run_chain(inputs, prior, config, static_cast<std::uint64_t>(c));
      });
    }
    for (auto& w : workers) w.join();
  }

  PosteriorDraws draws;
  draws.tag = tag;
  draws.seed = config.seed;
  for (auto& out : outputs) {
    if (out.failure) std::rethrow_exception(out.failure);
    draws.diagnostics.chain_lengths.push_back(out.theta_a.size());
    draws.diagnostics.pd_rejections += out.pd_rejections;
    draws.diagnostics.latent_effects = out.latent_effects;
    std::move(out.theta_a.begin(), out.theta_a.end(),
              std::back_inserter(draws.theta_a));
    std::move(out.theta_b.begin(), out.theta_b.end(),
              std::back_inserter(draws.theta_b));
  }

  auto& ess_map = draws.diagnostics.ess;
  ess_map["mu[0]"] = ess(draws, [](const PosteriorDraws& d, std::size_t t) {
    return d.theta_a[t].mu[0];
  });
  ess_map["sigma_b[0,0]"] = ess(draws, [](const PosteriorDraws& d, std::size_t t) {
    return d.theta_a[t].sigma_b(0, 0);
  });
  ess_map["sigma_w[0,0]"] = ess(draws, [](const PosteriorDraws& d, std::size_t t) {
    return d.theta_a[t].sigma_w(0, 0);
  });
  if (!draws.theta_b.empty()) {
    ess_map["mu_b[0]"] = ess(draws, [](const PosteriorDraws& d, std::size_t t) {
      return d.theta_b[t].mu_b[0];
    });
    ess_map["sigma_wb[0,0]"] = ess(draws, [](const PosteriorDraws& d, std::size_t t) {
      return d.theta_b[t].sigma_wb(0, 0);
    });
  }
  return draws;
}

std::vector<GroupStats> background_groups(const BackgroundDatabase& db) {
  std::vector<GroupStats> groups;
  groups.reserve(db.source_count() + 2);
  for (const auto& source : db.sources()) groups.push_back(summarize(source));
  return groups;
}

void check_inputs(const BackgroundDatabase& db, const ObservationSet& x_b,
                  const ObservationSet& x_c) {
  if (x_b.dim() != db.dim() || x_c.dim() != db.dim()) {
    throw Error(ErrorCode::dimension_mismatch,
                "unknown-source data dimension differs from the background");
  }
}

}  // namespace

std::size_t ChainConfig::draws_per_chain() const {
  if (iterations <= burn_in || thin < 1) return 0;
  return static_cast<std::size_t>((iterations - burn_in + thin - 1) / thin);
}

void validate(const ChainConfig& config) {
  if (config.iterations < 1 || config.burn_in < 0 || config.thin < 1 ||
      config.chains < 1) {
    throw Error(ErrorCode::invalid_argument, "chain configuration out of range");
  }
  const std::size_t total =
      config.draws_per_chain() * static_cast<std::size_t>(config.chains);
  if (total < config.min_draws) {
    throw Error(ErrorCode::insufficient_draws,
                "chain would store " + std::to_string(total) +
                    " draws, below the floor of " +
                    std::to_string(config.min_draws));
  }
}

void validate(const PriorSpec& prior, Index p, Framework framework) {
  check_prior_block(prior.mean_prior, p, "mean prior");
  check_prior_block(prior.between_prior, p, "between-source prior");
  check_prior_block(prior.within_prior, p, "within-source prior");
  if (prior.fixed_sigma_b) require_spd(*prior.fixed_sigma_b, "fixed sigma_b");
  if (prior.fixed_sigma_w) require_spd(*prior.fixed_sigma_w, "fixed sigma_w");
  if (framework == Framework::specific_source) {
    if (!prior.subject_mean_prior || !prior.subject_within_prior) {
      throw Error(ErrorCode::invalid_parameter,
                  "specific-source analysis needs subject priors");
    }
    check_prior_block(*prior.subject_mean_prior, p, "subject mean prior");
    check_prior_block(*prior.subject_within_prior, p, "subject within prior");
  }
}

PriorSpec weak_prior(Index p, Framework framework) {
  PriorSpec prior;
  prior.mean_prior = {Vector::Zero(p), 100.0 * identity(p)};
  prior.between_prior = {static_cast<double>(p) + 2.0, identity(p)};
  prior.within_prior = {static_cast<double>(p) + 2.0, identity(p)};
  if (framework == Framework::specific_source) {
    prior.subject_mean_prior = prior.mean_prior;
    prior.subject_within_prior = prior.within_prior;
  }
  return prior;
}

PriorSpec derive_prior(const BackgroundDatabase& held_out, Framework framework) {
  const Index p = held_out.dim();
  const auto g = static_cast<Index>(held_out.source_count());
  if (g < p + 1) {
    throw Error(ErrorCode::invalid_argument,
                "held-out data needs at least p + 1 sources to derive a prior");
  }
  Matrix means(p, g);
  Matrix within = Matrix::Zero(p, p);
  double inverse_size_sum = 0.0;
  Index items = 0;
  for (Index k = 0; k < g; ++k) {
    const GroupStats s = summarize(held_out.sources()[static_cast<std::size_t>(k)]);
    means.col(k) = s.mean;
    within += s.scatter;
    inverse_size_sum += 1.0 / static_cast<double>(s.n);
    items += s.n;
  }
  if (items - g < p) {
    throw Error(ErrorCode::invalid_argument,
                "held-out data has too few replicates to estimate sigma_w");
  }
  const Vector m0 = means.rowwise().mean();
  const Matrix centered = means.colwise() - m0;
  const Matrix v0 = centered * centered.transpose() / static_cast<double>(g - 1);
  const Matrix sigma_w_hat = within / static_cast<double>(items - g);
  // cov(means) estimates sigma_b + sigma_w / n; fall back to cov(means) when
  // the corrected estimate is not positive definite.
  const Matrix sigma_b_hat =
      spd_or_nothing(v0 - sigma_w_hat * (inverse_size_sum / static_cast<double>(g)))
          .value_or(v0);

  const double dof = static_cast<double>(p) + 4.0;
  const double to_scale = dof - static_cast<double>(p) - 1.0;
  PriorSpec prior;
  prior.mean_prior = {m0, v0};
  prior.between_prior = {dof, to_scale * sigma_b_hat};
  prior.within_prior = {dof, to_scale * sigma_w_hat};
  if (framework == Framework::specific_source) {
    prior.subject_mean_prior = prior.mean_prior;
    prior.subject_within_prior = prior.within_prior;
  }
  validate(prior, p, framework);
  return prior;
}

std::string_view to_string(Conditioning conditioning) {
  switch (conditioning) {
    case Conditioning::background: return "background";
    case Conditioning::m1: return "M1";
    case Conditioning::m2: return "M2";
  }
  return "unknown";
}

JointParams PosteriorDraws::joint(std::size_t t) const {
  if (theta_b.empty()) return JointParams{theta_a[t], {}};
  return JointParams{theta_a[t], theta_b[t]};
}

PosteriorDraws gibbs_cs(const BackgroundDatabase& db, const ObservationSet& x_b,
                        const ObservationSet& x_c, const PriorSpec& prior,
                        Conditioning conditioning, const ChainConfig& config) {
  check_inputs(db, x_b, x_c);
  validate(prior, db.dim(), Framework::common_source);
  SamplerInputs inputs{background_groups(db), std::nullopt};
  const GroupStats b = summarize(x_b);
  const GroupStats c = summarize(x_c);
  switch (conditioning) {
    case Conditioning::background:
      break;
    case Conditioning::m1:
      inputs.population.push_back(pool(b, c));
      break;
    case Conditioning::m2:
      inputs.population.push_back(b);
      inputs.population.push_back(c);
      break;
  }
  return run_chains(inputs, prior, config,
                    {Framework::common_source, conditioning});
}

PosteriorDraws gibbs_ss(const BackgroundDatabase& db, const ObservationSet& x_b,
                        const ObservationSet& x_c, const PriorSpec& prior,
                        Conditioning conditioning, const ChainConfig& config) {
  check_inputs(db, x_b, x_c);
  validate(prior, db.dim(), Framework::specific_source);
  SamplerInputs inputs{background_groups(db), summarize(x_b)};
  const GroupStats c = summarize(x_c);
  switch (conditioning) {
    case Conditioning::background:
      break;
    case Conditioning::m1:
      inputs.subject = pool(*inputs.subject, c);
      break;
    case Conditioning::m2:
      inputs.population.push_back(c);
      break;
  }
  return run_chains(inputs, prior, config,
                    {Framework::specific_source, conditioning});
}

PosteriorDraws gibbs(Framework framework, const BackgroundDatabase& db,
                     const ObservationSet& x_b, const ObservationSet& x_c,
                     const PriorSpec& prior, Conditioning conditioning,
                     const ChainConfig& config) {
  return framework == Framework::common_source
             ? gibbs_cs(db, x_b, x_c, prior, conditioning, config)
             : gibbs_ss(db, x_b, x_c, prior, conditioning, config);
}

double ess(std::span<const double> series) {
  const std::size_t n = series.size();
  if (n < 10) {
    throw Error(ErrorCode::insufficient_draws, "ESS needs at least 10 values");
  }
  const double mean = std::accumulate(series.begin(), series.end(), 0.0) /
                      static_cast<double>(n);
  std::vector<double> centered(n);
  std::transform(series.begin(), series.end(), centered.begin(),
                 [mean](double x) { return x - mean; });
  const auto autocov = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t t = 0; t + lag < n; ++t) s += centered[t] * centered[t + lag];
    return s / static_cast<double>(n);
  };
  const double c0 = autocov(0);
  if (!(c0 > 0.0) || c0 <= 1e-300 * (mean * mean + 1.0)) {
    return static_cast<double>(n);
  }
  double tau = -1.0;
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; 2 * k + 1 < n; ++k) {
    double pair = (autocov(2 * k) + autocov(2 * k + 1)) / c0;
    if (pair <= 0.0) break;
    pair = std::min(pair, previous);
    previous = pair;
    tau += 2.0 * pair;
  }
  return std::max(1.0, static_cast<double>(n) / tau);
}

double ess(const PosteriorDraws& draws, const DrawFunctional& functional) {
  std::vector<std::size_t> lengths = draws.diagnostics.chain_lengths;
  if (lengths.empty()) lengths.push_back(draws.size());
  double total = 0.0;
  std::size_t offset = 0;
  std::vector<double> series;
  for (std::size_t len : lengths) {
    series.resize(len);
    for (std::size_t t = 0; t < len; ++t) series[t] = functional(draws, offset + t);
    total += ess(series);
    offset += len;
  }
  return total;
}

Matrix sample_inverse_wishart(double dof, const Matrix& scale, Rng& rng) {
  // Bartlett factor A of a Wishart(dof, scale^{-1}) draw; with scale = K K^T
  // the inverse-Wishart draw is (K A^{-T})(K A^{-T})^T.
  const Index p = scale.rows();
  Matrix a = Matrix::Zero(p, p);
  for (Index i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(rng.chi_squared(dof - static_cast<double>(i)));
    for (Index j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  const Eigen::LLT<Matrix> k(scale);
  const Matrix a_inv = a.triangularView<Eigen::Lower>().solve(identity(p));
  const Matrix b = k.matrixL() * a_inv.transpose();
  return symmetrized(b * b.transpose());
}

}  // namespace lrbf

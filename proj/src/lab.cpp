#include "lrbf/lab.hpp"

#include "lrbf/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <mutex>
#include <thread>

namespace lrbf {

namespace {

Matrix draw_normal_rows(const Vector& mean, const Matrix& cov, Index rows, Rng& rng) {
  const Eigen::LLT<Matrix> llt(cov);
  Matrix z(rows, mean.size());
  rng.fill_normal(z);
  Matrix out = z * llt.matrixL().transpose();
  out.rowwise() += mean.transpose();
  return out;
}

ObservationSet draw_source(const std::string& label, const CommonSourceParams& theta,
                           Index items, Rng& rng) {
  const Vector effect = draw_normal_rows(theta.mu, theta.sigma_b, 1, rng).row(0).transpose();
  return ObservationSet(label, draw_normal_rows(effect, theta.sigma_w, items, rng));
}

double quantile(std::vector<double> sorted, double q) {
  std::sort(sorted.begin(), sorted.end());
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

// Runs job(i) for i in [0, count) over `threads` workers. Each job writes only
// its own slot, so results do not depend on scheduling.
void parallel_for(std::size_t count, int threads, const std::function<void(std::size_t)>& job) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, count); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) job(i);
    });
  }
  for (auto& t : pool) t.join();
}

struct Job {
  std::size_t schedule_index;
  Index n;
  int replicate;
  std::uint64_t data_seed;
  std::uint64_t chain_seed;
};

std::vector<Job> make_jobs(const ExperimentConfig& config) {
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < config.schedule.size(); ++s) {
    const Index n = config.schedule[s];
    for (int r = 0; r < config.replicates; ++r) {
      const auto un = static_cast<std::uint64_t>(n);
      const auto ur = static_cast<std::uint64_t>(r);
      jobs.push_back({s, n, r, derive_seed(config.seed, un, ur, 1),
                      derive_seed(config.seed, un, ur, 2)});
    }
  }
  return jobs;
}

void validate(const ExperimentConfig& config) {
  if (config.schedule.empty()) {
    throw Error(ErrorCode::invalid_config, "sample-size schedule is empty");
  }
  for (Index n : config.schedule) {
    if (n < 2) throw Error(ErrorCode::invalid_config, "sample sizes must be at least 2");
  }
  if (config.replicates < 1) {
    throw Error(ErrorCode::invalid_config, "replicates must be positive");
  }
  validate(config.chain);
}

PriorSpec prior_for(const TrueModelSpec& spec, const ExperimentConfig& config) {
  return config.prior ? *config.prior : weak_prior(spec.theta_a0.mu.size(), spec.framework);
}

int thread_count(const ExperimentConfig& config) {
  return config.threads > 0 ? config.threads : worker_threads();
}

std::uint64_t unknown_hash(const TrueModelSpec& spec, const CaseData& data) {
  const std::uint64_t c = trace_hash(data.x_c);
  if (spec.framework == Framework::specific_source) return c;
  const std::uint64_t b = trace_hash(data.x_b);
  return b ^ (c * 0x9E3779B97F4A7C15ULL + 0x7F4A7C15ULL);
}

bool stopped(const ExperimentConfig& config) {
  return config.stop != nullptr && config.stop->load();
}

}  // namespace

void validate(const TrueModelSpec& spec) {
  validate(spec.theta_a0);
  const Index p = spec.theta_a0.mu.size();
  if (spec.items_per_source < 1) {
    throw Error(ErrorCode::invalid_parameter, "items per source must be positive");
  }
  if (spec.framework == Framework::specific_source) {
    if (!spec.theta_b0) {
      throw Error(ErrorCode::invalid_parameter,
                  "specific-source truth needs subject parameters");
    }
    validate(*spec.theta_b0);
    if (spec.theta_b0->mu_b.size() != p) {
      throw Error(ErrorCode::dimension_mismatch, "subject parameters have wrong dimension");
    }
  }
  for (const auto* set : {&spec.x_b, &spec.x_c}) {
    if (*set && (*set)->dim() != p) {
      throw Error(ErrorCode::dimension_mismatch, "frozen set has wrong dimension");
    }
  }
}

void freeze_unknown_sources(TrueModelSpec& spec, Index n_b, Index n_c, std::uint64_t seed) {
  validate(spec);
  Rng rng(seed, 0x5eed);
  const auto& theta = spec.theta_a0;
  if (spec.framework == Framework::common_source) {
    if (spec.generator == Model::m1) {
      const ObservationSet both = draw_source("x_bc", theta, n_b + n_c, rng);
      spec.x_b = ObservationSet("x_b", both.items().topRows(n_b));
      spec.x_c = ObservationSet("x_c", both.items().bottomRows(n_c));
    } else {
      spec.x_b = draw_source("x_b", theta, n_b, rng);
      spec.x_c = draw_source("x_c", theta, n_c, rng);
    }
    return;
  }
  if (spec.generator == Model::m1) {
    spec.x_c = ObservationSet(
        "x_c", draw_normal_rows(spec.theta_b0->mu_b, spec.theta_b0->sigma_wb, n_c, rng));
  } else {
    spec.x_c = draw_source("x_c", theta, n_c, rng);
  }
}

CaseData generate_synthetic(const TrueModelSpec& spec, Index n_a, Index n_b,
                            std::uint64_t seed) {
  validate(spec);
  if (!spec.x_c || (spec.framework == Framework::common_source && !spec.x_b)) {
    throw Error(ErrorCode::invalid_argument, "unknown-source sets have not been frozen");
  }
  if (n_a < 2) throw Error(ErrorCode::invalid_argument, "need at least two background sources");
  Rng rng(seed, 0);
  std::vector<ObservationSet> sources;
  sources.reserve(static_cast<std::size_t>(n_a));
  for (Index i = 0; i < n_a; ++i) {
    sources.push_back(
        draw_source("s" + std::to_string(i), spec.theta_a0, spec.items_per_source, rng));
  }
  if (spec.framework == Framework::common_source) {
    return CaseData{BackgroundDatabase(std::move(sources)), *spec.x_b, *spec.x_c};
  }
  if (n_b < 1) throw Error(ErrorCode::invalid_argument, "subject data needs at least one item");
  ObservationSet x_b(
      "x_b", draw_normal_rows(spec.theta_b0->mu_b, spec.theta_b0->sigma_wb, n_b, rng));
  return CaseData{BackgroundDatabase(std::move(sources)), std::move(x_b), *spec.x_c};
}

double true_log_lr(const TrueModelSpec& spec) {
  return lr_function(spec).log_lr(
      JointParams{spec.theta_a0, spec.theta_b0.value_or(SpecificSourceParams{})});
}

double true_lr(const TrueModelSpec& spec) { return std::exp(true_log_lr(spec)); }

LrFunction lr_function(Framework framework, const ObservationSet& x_b,
                       const ObservationSet& x_c) {
  return framework == Framework::common_source ? LrFunction::common_source(x_b, x_c)
                                               : LrFunction::specific_source(x_c);
}

LrFunction lr_function(const TrueModelSpec& spec) {
  if (!spec.x_c || (spec.framework == Framework::common_source && !spec.x_b)) {
    throw Error(ErrorCode::invalid_argument, "unknown-source sets have not been frozen");
  }
  return spec.framework == Framework::common_source
             ? LrFunction::common_source(*spec.x_b, *spec.x_c)
             : LrFunction::specific_source(*spec.x_c);
}

std::uint64_t trace_hash(const ObservationSet& set) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&](const unsigned char* bytes, std::size_t len) {
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  const std::int64_t shape[2] = {set.size(), set.dim()};
  mix(reinterpret_cast<const unsigned char*>(shape), sizeof shape);
  mix(reinterpret_cast<const unsigned char*>(set.items().data()),
      static_cast<std::size_t>(set.items().size()) * sizeof(double));
  return h;
}

double ks_normal_statistic(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) throw Error(ErrorCode::insufficient_draws, "KS statistic needs two values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0) || !std::isfinite(sd)) return 1.0;
  std::vector<double> z(values.begin(), values.end());
  for (double& v : z) v = (v - mean) / sd;
  std::sort(z.begin(), z.end());
  double d = 0.0;
  const double dn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = normal_cdf(z[i]);
    d = std::max({d, static_cast<double>(i + 1) / dn - f, f - static_cast<double>(i) / dn});
  }
  return d;
}

double bvm_normality_check(const PosteriorDraws& draws, const LrFunction& lr,
                           const EstimatorOptions& options) {
  if (draws.tag.conditioning != Conditioning::m2) {
    throw Error(ErrorCode::model_tag_mismatch, "normality check needs M2 posterior draws");
  }
  if (draws.size() < options.min_draws) {
    throw Error(ErrorCode::insufficient_draws, "too few draws for the normality check");
  }
  std::vector<double> values = log_lr_values(draws, lr);
  // Standardization removes the common scale factor exp(max).
  const double top = *std::max_element(values.begin(), values.end());
  for (double& v : values) v = std::exp(v - top);
  return ks_normal_statistic(values);
}

double posterior_probability(std::span<const double> lambda, const LrInterval& interval) {
  if (lambda.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t inside = 0;
  for (double v : lambda) inside += interval.contains(v) ? 1 : 0;
  return static_cast<double>(inside) / static_cast<double>(lambda.size());
}

int worker_threads() {
  if (const char* env = std::getenv("FORENSIC_BF_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v >= 1) return static_cast<int>(std::min(v, 1024L));
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

bool ConsistencyResult::median_non_increasing() const {
  double previous = std::numeric_limits<double>::infinity();
  for (const auto& s : summary) {
    if (s.completed == 0) continue;
    if (s.median > previous) return false;
    previous = s.median;
  }
  return true;
}

ConsistencyResult consistency_experiment(const TrueModelSpec& spec,
                                         const ExperimentConfig& config) {
  validate(spec);
  validate(config);
  const PriorSpec prior = prior_for(spec, config);
  const double lambda0 = true_lr(spec);
  const std::vector<Job> jobs = make_jobs(config);

  ConsistencyResult result;
  result.framework = spec.framework;
  result.form = config.form;
  result.schedule = config.schedule;
  result.true_lr = lambda0;
  result.records.resize(jobs.size());

  parallel_for(jobs.size(), thread_count(config), [&](std::size_t i) {
    const Job& job = jobs[i];
    ConsistencyRecord& rec = result.records[i];
    rec.n = job.n;
    rec.replicate = job.replicate;
    rec.seed = job.chain_seed;
    rec.true_lr = lambda0;
    if (stopped(config)) {
      rec.failed = true;
      rec.failure = "interrupted";
      return;
    }
    try {
      const CaseData data = generate_synthetic(spec, job.n, job.n, job.data_seed);
      rec.trace_hash = unknown_hash(spec, data);
      ChainConfig chain = config.chain;
      chain.seed = job.chain_seed;
      const LrFunction lr = lr_function(spec.framework, data.x_b, data.x_c);
      const Conditioning conditioning =
          config.form == EstimatorForm::posterior_mean_m2   ? Conditioning::m2
          : config.form == EstimatorForm::inverse_mean_m1 ? Conditioning::m1
                                                          : Conditioning::background;
      const PosteriorDraws draws = gibbs(spec.framework, data.background, data.x_b,
                                         data.x_c, prior, conditioning, chain);
      BfEstimate est;
      switch (config.form) {
        case EstimatorForm::posterior_mean_m2:
          est = bf_posterior_mean(draws, lr, config.estimator);
          break;
        case EstimatorForm::inverse_mean_m1:
          est = bf_inverse_mean(draws, lr, config.estimator);
          break;
        case EstimatorForm::prior_form:
          est = bf_prior_form(draws, lr, config.estimator);
          break;
      }
      const std::vector<double> values = log_lr_values(draws, lr);
      rec.max_lambda = std::exp(*std::max_element(values.begin(), values.end()));
      rec.bf = est.value;
      rec.log_bf = est.log_value;
      rec.mc_standard_error = est.mc_standard_error;
      rec.abs_rel_error = std::abs(est.value - lambda0) / lambda0;
    } catch (const std::exception& e) {
      rec.failed = true;
      rec.failure = e.what();
    }
  });

  std::vector<std::uint64_t> hashes;
  for (std::size_t s = 0; s < config.schedule.size(); ++s) {
    ErrorSummary summary;
    summary.n = config.schedule[s];
    std::vector<double> errors;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].schedule_index != s) continue;
      const auto& rec = result.records[i];
      if (rec.failed) {
        ++summary.failures;
        continue;
      }
      errors.push_back(rec.abs_rel_error);
      hashes.push_back(rec.trace_hash);
    }
    summary.completed = errors.size();
    if (!errors.empty()) {
      summary.median = quantile(errors, 0.5);
      summary.q25 = quantile(errors, 0.25);
      summary.q75 = quantile(errors, 0.75);
      summary.max = *std::max_element(errors.begin(), errors.end());
    }
    result.failures += summary.failures;
    result.summary.push_back(summary);
  }
  result.trace_fixed = std::adjacent_find(hashes.begin(), hashes.end(),
                                          std::not_equal_to<>()) == hashes.end();
  return result;
}

CoverageResult coverage_experiment(const TrueModelSpec& spec, const ExperimentConfig& config,
                                   std::span<const double> alphas, bool with_delta_method) {
  validate(spec);
  validate(config);
  if (alphas.empty()) throw Error(ErrorCode::invalid_config, "no alpha levels given");
  for (double a : alphas) {
    if (!(a > 0.0 && a < 1.0)) throw Error(ErrorCode::invalid_config, "alpha must be in (0, 1)");
  }
  const PriorSpec prior = prior_for(spec, config);
  const std::vector<Job> jobs = make_jobs(config);
  const ConditioningModel m2{spec.framework, Conditioning::m2};

  CoverageResult result;
  result.framework = spec.framework;
  result.schedule = config.schedule;
  result.alphas.assign(alphas.begin(), alphas.end());
  result.records.resize(jobs.size());
  std::vector<std::uint64_t> hash(jobs.size(), 0);

  parallel_for(jobs.size(), thread_count(config), [&](std::size_t i) {
    const Job& job = jobs[i];
    CoverageRecord& rec = result.records[i];
    rec.n = job.n;
    rec.replicate = job.replicate;
    rec.seed = job.chain_seed;
    if (stopped(config)) {
      rec.failed = true;
      rec.failure = "interrupted";
      return;
    }
    try {
      const CaseData data = generate_synthetic(spec, job.n, job.n, job.data_seed);
      hash[i] = unknown_hash(spec, data);
      ChainConfig chain = config.chain;
      chain.seed = job.chain_seed;
      const LrFunction lr = lr_function(spec.framework, data.x_b, data.x_c);
      const PosteriorDraws draws = gibbs(spec.framework, data.background, data.x_b,
                                         data.x_c, prior, Conditioning::m2, chain);
      const BfEstimate est = bf_posterior_mean(draws, lr, config.estimator);
      rec.bf = est.value;
      rec.sigma_n = posterior_sd_lr(draws, lr);
      std::vector<double> lambda = log_lr_values(draws, lr);
      for (double& v : lambda) v = std::exp(v);
      for (double a : alphas) {
        rec.probability.push_back(
            posterior_probability(lambda, credible_interval(rec.bf, rec.sigma_n, a)));
      }
      if (with_delta_method) {
        // The ratio is a diagnostic; a failed fit leaves it NaN.
        try {
          const MleResult fit = mle_fit(data, m2);
          const Vector grad = lr_gradient(fit.theta_hat, lr);
          const Matrix info_inv = observed_info_inverse(fit.theta_hat, data, m2);
          const double dv = delta_method_variance(grad, info_inv);
          if (dv > 0.0) rec.variance_ratio = rec.sigma_n * rec.sigma_n / dv;
        } catch (const Error&) {
        }
      }
    } catch (const std::exception& e) {
      rec.failed = true;
      rec.failure = e.what();
    }
  });

  std::vector<std::uint64_t> seen;
  for (std::size_t s = 0; s < config.schedule.size(); ++s) {
    CoverageSummary summary;
    summary.n = config.schedule[s];
    summary.mean_probability.assign(alphas.size(), 0.0);
    double ratio_sum = 0.0;
    std::size_t ratio_count = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].schedule_index != s) continue;
      const auto& rec = result.records[i];
      if (rec.failed) {
        ++summary.failures;
        continue;
      }
      ++summary.completed;
      seen.push_back(hash[i]);
      for (std::size_t a = 0; a < alphas.size(); ++a) {
        summary.mean_probability[a] += rec.probability[a];
      }
      if (std::isfinite(rec.variance_ratio)) {
        ratio_sum += rec.variance_ratio;
        ++ratio_count;
      }
    }
    if (summary.completed > 0) {
      for (double& m : summary.mean_probability) m /= static_cast<double>(summary.completed);
    } else {
      summary.mean_probability.assign(alphas.size(), std::numeric_limits<double>::quiet_NaN());
    }
    if (ratio_count > 0) summary.mean_variance_ratio = ratio_sum / static_cast<double>(ratio_count);
    result.failures += summary.failures;
    result.summary.push_back(std::move(summary));
  }
  result.trace_fixed =
      std::adjacent_find(seen.begin(), seen.end(), std::not_equal_to<>()) == seen.end();
  return result;
}

NormalityResult normality_experiment(const TrueModelSpec& spec, const ExperimentConfig& config) {
  validate(spec);
  validate(config);
  const PriorSpec prior = prior_for(spec, config);

  NormalityResult result;
  result.framework = spec.framework;
  result.small_n = config.schedule.front();
  result.large_n = config.schedule.back();
  result.records.resize(static_cast<std::size_t>(config.replicates));

  const auto statistic = [&](Index n, int replicate) {
    const auto un = static_cast<std::uint64_t>(n);
    const auto ur = static_cast<std::uint64_t>(replicate);
    const CaseData data =
        generate_synthetic(spec, n, n, derive_seed(config.seed, un, ur, 1));
    ChainConfig chain = config.chain;
    chain.seed = derive_seed(config.seed, un, ur, 2);
    const LrFunction lr = lr_function(spec.framework, data.x_b, data.x_c);
    const PosteriorDraws draws = gibbs(spec.framework, data.background, data.x_b, data.x_c,
                                       prior, Conditioning::m2, chain);
    return bvm_normality_check(draws, lr, config.estimator);
  };

  parallel_for(result.records.size(), thread_count(config), [&](std::size_t i) {
    NormalityRecord& rec = result.records[i];
    rec.replicate = static_cast<int>(i);
    if (stopped(config)) {
      rec.failed = true;
      rec.failure = "interrupted";
      return;
    }
    try {
      rec.ks_small = statistic(result.small_n, rec.replicate);
      rec.ks_large = statistic(result.large_n, rec.replicate);
    } catch (const std::exception& e) {
      rec.failed = true;
      rec.failure = e.what();
    }
  });

  std::size_t completed = 0;
  std::size_t improved = 0;
  for (const auto& rec : result.records) {
    if (rec.failed) {
      ++result.failures;
      continue;
    }
    ++completed;
    improved += rec.ks_large < rec.ks_small ? 1 : 0;
  }
  result.fraction_improved =
      completed > 0 ? static_cast<double>(improved) / static_cast<double>(completed) : 0.0;

  // Negative control: heavy-tailed draws of the same length as the chains.
  Rng rng(derive_seed(config.seed, 0x7a11), 0);
  std::vector<double> heavy(config.chain.draws_per_chain() *
                            static_cast<std::size_t>(config.chain.chains));
  for (double& v : heavy) v = rng.student_t(2.0);
  result.heavy_tail_statistic = ks_normal_statistic(heavy);
  result.heavy_tail_flagged = result.heavy_tail_statistic > kNormalityThreshold;
  return result;
}

}  // namespace lrbf

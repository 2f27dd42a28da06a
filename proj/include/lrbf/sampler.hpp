#pragma once

// Data-augmented Gibbs samplers for the posterior of the source-model
// parameters. Every full conditional is conjugate: latent source effects and
// means are Gaussian, covariances inverse-Wishart.

#include "lrbf/model.hpp"
#include "lrbf/rng.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lrbf {

struct NormalPrior {
  Vector mean;
  Matrix cov;
};

// Density proportional to |S|^{-(dof + p + 1)/2} exp(-tr(scale S^{-1}) / 2).
struct InverseWishartPrior {
  double dof = 0.0;
  Matrix scale;
};

struct PriorSpec {
  NormalPrior mean_prior;
  InverseWishartPrior between_prior;
  InverseWishartPrior within_prior;
  // Specific source only.
  std::optional<NormalPrior> subject_mean_prior;
  std::optional<InverseWishartPrior> subject_within_prior;
  // Point-mass priors: the covariance is held at this value.
  std::optional<Matrix> fixed_sigma_b;
  std::optional<Matrix> fixed_sigma_w;
};

void validate(const PriorSpec& prior, Index p, Framework framework);

/// Proper, weakly informative prior: mean Normal(0, 100 I); covariances
/// inverse-Wishart with dof p + 2 and scale I (prior mean I).
PriorSpec weak_prior(Index p, Framework framework);

/// Moment-matched prior from a held-out database: m0 and V0 are the mean
/// and covariance of the source means; each covariance gets dof p + 4 and a
/// scale that puts its prior mean at the held-out moment estimate.
PriorSpec derive_prior(const BackgroundDatabase& held_out, Framework framework);

/// Which data enters the posterior: the background (plus x_b for specific
/// source) alone, or everything with the unknown-source sets arranged as the
/// model prescribes.
enum class Conditioning { background, m1, m2 };

std::string_view to_string(Conditioning conditioning);

struct ConditioningModel {
  Framework framework = Framework::common_source;
  Conditioning conditioning = Conditioning::m2;

  bool operator==(const ConditioningModel&) const = default;
};

struct ChainConfig {
  // Sweeps per chain, burn-in included.
  int iterations = 10000;
  int burn_in = 2000;
  int thin = 1;
  int chains = 1;
  std::uint64_t seed = 0;
  // Minimum number of stored draws.
  std::size_t min_draws = 1000;

  std::size_t draws_per_chain() const;
};

void validate(const ChainConfig& config);

struct ChainDiagnostics {
  // Effective sample size of the first coordinate of each parameter block.
  std::map<std::string, double> ess;
  // Inverse-Wishart draws that failed the positive-definite check and were
  // redrawn.
  std::size_t pd_rejections = 0;
  // Latent source effects in the augmented state.
  std::size_t latent_effects = 0;
  std::vector<std::size_t> chain_lengths;
};

/// Draws after burn-in and thinning; chains are concatenated in chain order.
/// theta_b is empty for the common-source framework.
struct PosteriorDraws {
  ConditioningModel tag;
  std::vector<CommonSourceParams> theta_a;
  std::vector<SpecificSourceParams> theta_b;
  std::uint64_t seed = 0;
  ChainDiagnostics diagnostics;

  std::size_t size() const noexcept { return theta_a.size(); }
  JointParams joint(std::size_t t) const;
};

PosteriorDraws gibbs_cs(const BackgroundDatabase& db, const ObservationSet& x_b,
                        const ObservationSet& x_c, const PriorSpec& prior,
                        Conditioning conditioning, const ChainConfig& config);

PosteriorDraws gibbs_ss(const BackgroundDatabase& db, const ObservationSet& x_b,
                        const ObservationSet& x_c, const PriorSpec& prior,
                        Conditioning conditioning, const ChainConfig& config);

PosteriorDraws gibbs(Framework framework, const BackgroundDatabase& db,
                     const ObservationSet& x_b, const ObservationSet& x_c,
                     const PriorSpec& prior, Conditioning conditioning,
                     const ChainConfig& config);

/// Initial-positive-sequence (Geyer) effective sample size of a scalar
/// series. A constant series has ESS equal to its length.
double ess(std::span<const double> series);

using DrawFunctional = std::function<double(const PosteriorDraws&, std::size_t)>;

/// ESS of functional(theta_t), summed over chains.
double ess(const PosteriorDraws& draws, const DrawFunctional& functional);

Matrix sample_inverse_wishart(double dof, const Matrix& scale, Rng& rng);

}  // namespace lrbf

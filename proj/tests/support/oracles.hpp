#pragma once

// Independent reference computations for one-dimensional problems. Nothing
// here calls into the library: densities are written out from scratch and
// integrals are done by adaptive Gauss-Kronrod or by tensor-grid trapezoid
// rules over boxes that shrink onto the bulk of the integrand.

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace oracle {

inline constexpr double kLog2Pi = 1.8378770664093454836;

struct Group {
  double n = 0.0;
  double mean = 0.0;
  double scatter = 0.0;  // sum of squared deviations from the mean
};

inline Group group(const std::vector<double>& x) {
  Group g;
  g.n = static_cast<double>(x.size());
  for (double v : x) g.mean += v;
  g.mean /= g.n;
  for (double v : x) g.scatter += (v - g.mean) * (v - g.mean);
  return g;
}

inline Group pooled(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> all(a);
  all.insert(all.end(), b.begin(), b.end());
  return group(all);
}

// log N(x; mu 1, w I + b 1 1^T) through the Sherman-Morrison inverse and the
// determinant w^(n-1) (w + n b).
inline double log_marginal(const Group& g, double mu, double b, double w) {
  const double d = g.mean - mu;
  const double q = g.scatter + g.n * d * d;
  const double s = g.n * d;
  return -0.5 * g.n * kLog2Pi - 0.5 * (g.n - 1.0) * std::log(w) -
         0.5 * std::log(w + g.n * b) - 0.5 * (q / w - b * s * s / (w * (w + g.n * b)));
}

inline double log_marginal(const std::vector<double>& x, double mu, double b, double w) {
  return log_marginal(group(x), mu, b, w);
}

inline double log_iid(const Group& g, double m, double v) {
  const double d = g.mean - m;
  return -0.5 * g.n * (kLog2Pi + std::log(v)) - (g.scatter + g.n * d * d) / (2.0 * v);
}

// log of the integral over the latent effect a of
// N(a; mu, b) prod_i N(x_i; a, w), by adaptive 61-point Gauss-Kronrod.
inline double latent_quadrature(const std::vector<double>& x, double mu, double b, double w) {
  const double n = static_cast<double>(x.size());
  double sum = 0.0;
  for (double v : x) sum += v;
  const double post_prec = 1.0 / b + n / w;
  const double centre = (mu / b + sum / w) / post_prec;
  const double sd = 1.0 / std::sqrt(post_prec);
  const auto log_f = [&](double a) {
    double l = -0.5 * (kLog2Pi + std::log(b)) - 0.5 * (a - mu) * (a - mu) / b;
    for (double v : x) l += -0.5 * (kLog2Pi + std::log(w)) - 0.5 * (v - a) * (v - a) / w;
    return l;
  };
  const double shift = log_f(centre);
  const auto f = [&](double a) { return std::exp(log_f(a) - shift); };
  const double value = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
      f, centre - 14.0 * sd, centre + 14.0 * sd, 15, 1e-14);
  return std::log(value) + shift;
}

// Density of u = log(s2) when s2 is inverse-gamma(nu / 2, scale / 2), the
// one-dimensional inverse-Wishart(nu, scale), Jacobian included.
inline double log_inverse_gamma_logscale(double u, double nu, double scale) {
  const double a = 0.5 * nu;
  return a * std::log(0.5 * scale) - boost::math::lgamma(a) - a * u - 0.5 * scale * std::exp(-u);
}

inline double log_normal(double x, double m, double v) {
  return -0.5 * (kLog2Pi + std::log(v)) - 0.5 * (x - m) * (x - m) / v;
}

struct Prior1D {
  double m0 = 0.0;
  double v0 = 100.0;
  double nu_b = 3.0;
  double s_b = 1.0;
  double nu_w = 3.0;
  double s_w = 1.0;
};

template <std::size_t D>
using Point = std::array<double, D>;

template <std::size_t D>
struct GridResult {
  double log_integral = 0.0;
  std::vector<double> moments;
};

// Trapezoid rule on a tensor grid. The box is re-fitted after every pass to
// the region where the log integrand is within `drop` of its maximum, padded
// by two cells; a box that touches its own boundary is widened instead.
template <std::size_t D>
GridResult<D> grid_integrate(const std::function<double(const Point<D>&)>& log_f,
                             std::array<std::pair<double, double>, D> box,
                             const std::vector<std::function<double(const Point<D>&)>>& moments = {},
                             std::array<int, D> sizes = {}, double drop = 40.0) {
  const std::array<int, 3> passes{32, 56, 0};
  GridResult<D> out;
  int widenings = 0;
  for (int pass = 0; pass < 3; ++pass) {
    const bool final_pass = pass >= 2;
    std::array<int, D> m{};
    for (std::size_t d = 0; d < D; ++d) {
      m[d] = final_pass ? (sizes[d] > 0 ? sizes[d] : 90) : passes[static_cast<std::size_t>(pass)];
    }
    std::array<double, D> h{};
    for (std::size_t d = 0; d < D; ++d) {
      h[d] = (box[d].second - box[d].first) / (m[d] - 1);
    }
    std::size_t total = 1;
    for (int v : m) total *= static_cast<std::size_t>(v);
    std::vector<double> values(total);
    double top = -std::numeric_limits<double>::infinity();
    std::array<int, D> idx{};
    for (std::size_t k = 0; k < total; ++k) {
      Point<D> x;
      for (std::size_t d = 0; d < D; ++d) x[d] = box[d].first + idx[d] * h[d];
      values[k] = log_f(x);
      if (!std::isfinite(values[k])) values[k] = -std::numeric_limits<double>::infinity();
      top = std::max(top, values[k]);
      for (std::size_t d = 0; d < D; ++d) {
        if (++idx[d] < m[d]) break;
        idx[d] = 0;
      }
    }
    if (!std::isfinite(top)) throw std::runtime_error("oracle integrand is nowhere finite");

    std::array<int, D> lo, hi;
    lo.fill(std::numeric_limits<int>::max());
    hi.fill(-1);
    idx.fill(0);
    for (std::size_t k = 0; k < total; ++k) {
      if (values[k] > top - drop) {
        for (std::size_t d = 0; d < D; ++d) {
          lo[d] = std::min(lo[d], idx[d]);
          hi[d] = std::max(hi[d], idx[d]);
        }
      }
      for (std::size_t d = 0; d < D; ++d) {
        if (++idx[d] < m[d]) break;
        idx[d] = 0;
      }
    }
    bool touches = false;
    std::array<std::pair<double, double>, D> next = box;
    for (std::size_t d = 0; d < D; ++d) {
      const double width = box[d].second - box[d].first;
      if (lo[d] == 0) {
        next[d].first -= width;
        touches = true;
      } else {
        next[d].first = box[d].first + (lo[d] - 2) * h[d];
      }
      if (hi[d] == m[d] - 1) {
        next[d].second += width;
        touches = true;
      } else {
        next[d].second = box[d].first + (hi[d] + 2) * h[d];
      }
    }
    if (touches && widenings++ < 12) {
      box = next;
      pass = -1;  // restart the schedule on the wider box
      continue;
    }
    if (!final_pass) {
      box = next;
      continue;
    }

    double sum = 0.0;
    std::vector<double> msum(moments.size(), 0.0);
    idx.fill(0);
    for (std::size_t k = 0; k < total; ++k) {
      double weight = 1.0;
      for (std::size_t d = 0; d < D; ++d) {
        if (idx[d] == 0 || idx[d] == m[d] - 1) weight *= 0.5;
      }
      const double e = weight * std::exp(values[k] - top);
      sum += e;
      if (!moments.empty() && e > 0.0) {
        Point<D> x;
        for (std::size_t d = 0; d < D; ++d) x[d] = box[d].first + idx[d] * h[d];
        for (std::size_t j = 0; j < moments.size(); ++j) msum[j] += e * moments[j](x);
      }
      for (std::size_t d = 0; d < D; ++d) {
        if (++idx[d] < m[d]) break;
        idx[d] = 0;
      }
    }
    double log_volume = 0.0;
    for (double v : h) log_volume += std::log(v);
    out.log_integral = top + std::log(sum) + log_volume;
    for (double& v : msum) v /= sum;
    out.moments = msum;
    return out;
  }
  throw std::runtime_error("oracle grid did not settle");
}

inline double empirical_centre(const std::vector<Group>& groups) {
  double s = 0.0;
  for (const auto& g : groups) s += g.mean;
  return s / static_cast<double>(groups.size());
}

// Posterior over (mu, log sigma_b, log sigma_w) given groups that share the
// population model: returns the log evidence and posterior means of the
// requested functionals.
inline GridResult<3> population_posterior(
    const std::vector<Group>& groups, const Prior1D& prior,
    const std::vector<std::function<double(const Point<3>&)>>& moments = {}, int size = 90) {
  const auto log_f = [&](const Point<3>& t) {
    const double b = std::exp(t[1]);
    const double w = std::exp(t[2]);
    double l = log_normal(t[0], prior.m0, prior.v0) +
               log_inverse_gamma_logscale(t[1], prior.nu_b, prior.s_b) +
               log_inverse_gamma_logscale(t[2], prior.nu_w, prior.s_w);
    for (const auto& g : groups) l += log_marginal(g, t[0], b, w);
    return l;
  };
  const double c = empirical_centre(groups);
  return grid_integrate<3>(log_f, {{{c - 6.0, c + 6.0}, {-7.0, 4.0}, {-7.0, 4.0}}}, moments,
                           {size, size, size});
}

// Posterior over (mu_b, log sigma_wb) for iid subject data.
inline GridResult<2> subject_posterior(const Group& subject, const Prior1D& prior,
                                       int size = 400) {
  const auto log_f = [&](const Point<2>& t) {
    return log_normal(t[0], prior.m0, prior.v0) +
           log_inverse_gamma_logscale(t[1], prior.nu_w, prior.s_w) +
           log_iid(subject, t[0], std::exp(t[1]));
  };
  return grid_integrate<2>(log_f,
                           {{{subject.mean - 8.0, subject.mean + 8.0}, {-7.0, 4.0}}}, {},
                           {size, size});
}

// Bayes factor of M1 against M2 by direct evidence ratios.
inline double bf_common_source(const std::vector<std::vector<double>>& background,
                               const std::vector<double>& x_b, const std::vector<double>& x_c,
                               const Prior1D& prior, int size = 90) {
  std::vector<Group> base;
  for (const auto& s : background) base.push_back(group(s));
  std::vector<Group> m1 = base;
  m1.push_back(pooled(x_b, x_c));
  std::vector<Group> m2 = base;
  m2.push_back(group(x_b));
  m2.push_back(group(x_c));
  return std::exp(population_posterior(m1, prior, {}, size).log_integral -
                  population_posterior(m2, prior, {}, size).log_integral);
}

inline double bf_specific_source(const std::vector<std::vector<double>>& background,
                                 const std::vector<double>& x_b, const std::vector<double>& x_c,
                                 const Prior1D& population_prior, const Prior1D& subject_prior,
                                 int size = 90) {
  std::vector<Group> base;
  for (const auto& s : background) base.push_back(group(s));
  std::vector<Group> with_c = base;
  with_c.push_back(group(x_c));
  const double log_subject =
      subject_posterior(pooled(x_b, x_c), subject_prior).log_integral -
      subject_posterior(group(x_b), subject_prior).log_integral;
  const double log_population = population_posterior(base, population_prior, {}, size).log_integral -
                                population_posterior(with_c, population_prior, {}, size).log_integral;
  return std::exp(log_subject + log_population);
}

}  // namespace oracle

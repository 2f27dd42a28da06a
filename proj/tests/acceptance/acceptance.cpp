// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails.

#include "lrbf/bf.hpp"
#include "lrbf/io.hpp"
#include "lrbf/lab.hpp"
#include "lrbf/model.hpp"
#include "lrbf/sampler.hpp"
#include "support/builders.hpp"
#include "support/oracles.hpp"
#include "support/sigfig.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

using namespace lrbf;
using testing_support::random_background;
using testing_support::scalar_params;
using testing_support::set1d;
using testing_support::values1d;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Shell {
  int status = -1;
  std::string out;
};

Shell shell(const std::string& args) {
  const std::string cmd = std::string(LRBF_CLI) + " " + args + " 2>&1";
  Shell r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int raw = pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

ChainConfig chain(int iterations, int burn_in, std::uint64_t seed = 0) {
  ChainConfig c;
  c.iterations = iterations;
  c.burn_in = burn_in;
  c.seed = seed;
  return c;
}

std::vector<std::vector<double>> columns(const BackgroundDatabase& db) {
  std::vector<std::vector<double>> out;
  for (const auto& s : db.sources()) out.push_back(values1d(s));
  return out;
}

ObservationSet draw_set(const std::string& label, double mean, double var, int n, Rng& rng) {
  std::vector<double> x(static_cast<std::size_t>(n));
  for (double& v : x) v = mean + std::sqrt(var) * rng.normal();
  return set1d(label, x);
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

TrueModelSpec cs_truth() {
  TrueModelSpec spec;
  spec.framework = Framework::common_source;
  spec.theta_a0 = scalar_params(0.0, 1.0, 1.0);
  spec.x_b = set1d("x_b", {0.0});
  spec.x_c = set1d("x_c", {0.0});
  return spec;
}

TrueModelSpec ss_truth() {
  TrueModelSpec spec;
  spec.framework = Framework::specific_source;
  spec.theta_a0 = scalar_params(0.0, 1.0, 1.0);
  spec.theta_b0 = SpecificSourceParams{Vector::Constant(1, 0.5), Matrix::Constant(1, 1, 0.5)};
  spec.x_c = set1d("x_c", {0.3});
  return spec;
}

ExperimentConfig experiment(std::vector<Index> schedule, std::uint64_t seed) {
  ExperimentConfig c;
  c.schedule = std::move(schedule);
  c.replicates = 50;
  c.chain = chain(10000, 2000);
  c.seed = seed;
  return c;
}

// Interval endpoints from the command-line interval mode.
Outcome interval_arithmetic() {
  struct Row {
    double bf, sd, lower, upper;
  };
  const std::vector<Row> rows{{779.30, 249.7349, 289.83, 1268.77},
                              {5.10e-6, 9.84e-5, 0.0, 1.98e-4},
                              {3.04e-10, 4.35e-9, 0.0, 8.82e-9},
                              {7.11e-7, 8.86e-6, 0.0, 1.81e-5},
                              {4.54e-9, 8.41e-8, 0.0, 1.69e-7}};
  const fs::path dir = fs::temp_directory_path() / "lrbf_acceptance_interval";
  fs::create_directories(dir);
  Outcome o{true, ""};
  for (const auto& row : rows) {
    const fs::path out = dir / "interval.json";
    std::ostringstream args;
    args.precision(17);
    args << "interval --bf " << row.bf << " --sd " << row.sd << " --alpha 0.05 --out "
         << out.string();
    const auto r = shell(args.str());
    if (r.status != 0) return {false, "interval mode exited " + std::to_string(r.status)};
    const auto j = nlohmann::json::parse(io::read_text(out))["interval"];
    const double lo = j["lower"].get<double>();
    const double hi = j["upper"].get<double>();
    const bool ok = testing_support::same_significant(lo, row.lower, 3) &&
                    testing_support::same_significant(hi, row.upper, 3);
    o.pass = o.pass && ok;
    o.detail += "(" + fmt("%.6g", lo) + ", " + fmt("%.6g", hi) + ")" + (ok ? " " : "! ");
  }
  return o;
}

// Posterior-mean Bayes factor against grid quadrature of the evidence ratio.
Outcome oracle_equivalence() {
  const oracle::Prior1D prior;  // the weak prior in one dimension
  Outcome o{true, ""};
  for (int f = 0; f < 3; ++f) {
    Rng rng(derive_seed(20261014, static_cast<std::uint64_t>(f)), 0);
    const auto db = random_background(scalar_params(0.0, 1.0, 1.0), 30, 5, rng);
    double bf_oracle = 0.0;
    double bf_lib = 0.0;
    const auto cfg = chain(52000, 2000, 100 + static_cast<std::uint64_t>(f));
    if (f < 2) {
      // Fixture 0 has both sets from one source, fixture 1 from two.
      const double a_b = rng.normal();
      const double a_c = f == 0 ? a_b : rng.normal();
      const auto xb = draw_set("b", a_b, 1.0, 2, rng);
      const auto xc = draw_set("c", a_c, 1.0, 1, rng);
      const auto draws = gibbs_cs(db, xb, xc, weak_prior(1, Framework::common_source),
                                  Conditioning::m2, cfg);
      bf_lib = bf_posterior_mean(draws, LrFunction::common_source(xb, xc)).value;
      bf_oracle = oracle::bf_common_source(columns(db), values1d(xb), values1d(xc), prior);
    } else {
      const auto xb = draw_set("b", 0.5, 0.5, 10, rng);
      const auto xc = draw_set("c", 0.5, 0.5, 2, rng);
      const auto draws = gibbs_ss(db, xb, xc, weak_prior(1, Framework::specific_source),
                                  Conditioning::m2, cfg);
      bf_lib = bf_posterior_mean(draws, LrFunction::specific_source(xc)).value;
      bf_oracle =
          oracle::bf_specific_source(columns(db), values1d(xb), values1d(xc), prior, prior);
    }
    const double rel = std::abs(bf_lib / bf_oracle - 1.0);
    o.pass = o.pass && rel < 0.02;
    o.detail += (f < 2 ? "cs " : "ss ") + fmt("%.5g", bf_lib) + " vs " + fmt("%.5g", bf_oracle) +
                " (" + fmt("%.2f", 100.0 * rel) + "%) ";
  }
  return o;
}

// Posterior-mean, inverse-mean and prior forms agree within 3 combined SE.
Outcome dual_forms() {
  int agree = 0;
  const int total = 100;
  for (int r = 0; r < total; ++r) {
    const Framework fw = r % 2 == 0 ? Framework::common_source : Framework::specific_source;
    Rng rng(derive_seed(777, static_cast<std::uint64_t>(r)), 0);
    const auto db = random_background(scalar_params(0.0, 1.0, 1.0), 50, 5, rng);
    ObservationSet xb = fw == Framework::common_source ? draw_set("b", rng.normal(), 1.0, 2, rng)
                                                       : draw_set("b", 0.5, 0.5, 5, rng);
    ObservationSet xc = fw == Framework::common_source ? draw_set("c", rng.normal(), 1.0, 1, rng)
                                                       : draw_set("c", 0.5, 0.5, 1, rng);
    const PriorSpec prior = weak_prior(1, fw);
    const auto lr = lr_function(fw, xb, xc);
    const auto run = [&](Conditioning c, std::uint64_t k) {
      return gibbs(fw, db, xb, xc, prior, c, chain(10000, 1000, derive_seed(r, k)));
    };
    const auto pm = bf_posterior_mean(run(Conditioning::m2, 1), lr);
    const auto im = bf_inverse_mean(run(Conditioning::m1, 2), lr);
    const auto pf = bf_prior_form(run(Conditioning::background, 3), lr);
    const auto close = [](const BfEstimate& a, const BfEstimate& b) {
      return std::abs(a.value - b.value) <=
             3.0 * std::hypot(a.mc_standard_error, b.mc_standard_error);
    };
    if (close(pm, im) && close(pm, pf) && close(im, pf)) ++agree;
  }
  const double frac = static_cast<double>(agree) / total;
  return {frac >= 0.95, std::to_string(agree) + "/" + std::to_string(total) +
                            " replicates agree pairwise"};
}

Outcome consistency() {
  Outcome o{true, ""};
  for (const auto& spec : {cs_truth(), ss_truth()}) {
    const auto r = consistency_experiment(spec, experiment({50, 200, 800, 3200}, 4001));
    const double last = r.summary.back().median;
    const bool ok = r.median_non_increasing() && last < 0.10 && r.trace_fixed;
    o.pass = o.pass && ok;
    o.detail += std::string(to_string(spec.framework)) + " medians";
    for (const auto& s : r.summary) o.detail += " " + fmt("%.4f", s.median);
    o.detail += " (" + std::to_string(r.failures) + " failed)" + (ok ? "; " : "!; ");
  }
  return o;
}

Outcome coverage() {
  Outcome o{true, ""};
  const std::vector<double> alphas{0.05, 0.5};
  for (const auto& spec : {cs_truth(), ss_truth()}) {
    const auto r = coverage_experiment(spec, experiment({3200}, 5001), alphas, false);
    const auto& s = r.summary.back();
    const double p05 = s.mean_probability[0];
    const double p50 = s.mean_probability[1];
    const bool ok = p05 >= 0.90 && p05 <= 0.99 && p50 >= 0.45 && p50 <= 0.55;
    o.pass = o.pass && ok;
    o.detail += std::string(to_string(spec.framework)) + " P[0.05] " + fmt("%.4f", p05) +
                " P[0.5] " + fmt("%.4f", p50) + (ok ? "; " : "!; ");
  }
  return o;
}

Outcome normality() {
  Outcome o{true, ""};
  for (const auto& spec : {cs_truth(), ss_truth()}) {
    const auto r = normality_experiment(spec, experiment({50, 3200}, 6001));
    const bool ok = r.fraction_improved >= 0.80 && r.heavy_tail_statistic > kNormalityThreshold;
    o.pass = o.pass && ok;
    o.detail += std::string(to_string(spec.framework)) + " improved " +
                fmt("%.2f", r.fraction_improved) + " t2 KS " +
                fmt("%.4f", r.heavy_tail_statistic) + (ok ? "; " : "!; ");
  }
  return o;
}

Outcome likelihood() {
  Rng rng(90210, 0);
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const int n = 1 + static_cast<int>(rng.uniform() * 12);
    const double mu = 4.0 * (rng.uniform() - 0.5);
    const double b = std::exp(3.0 * (rng.uniform() - 0.5));
    const double w = std::exp(3.0 * (rng.uniform() - 0.5));
    std::vector<double> x(static_cast<std::size_t>(n));
    const double a = mu + std::sqrt(b) * rng.normal();
    for (double& v : x) v = a + std::sqrt(w) * rng.normal();
    const double lib = log_marginal_single_source(set1d("x", x), scalar_params(mu, b, w));
    const double ref = oracle::latent_quadrature(x, mu, b, w);
    worst = std::max(worst, std::abs(lib - ref) / std::abs(ref));
  }
  const auto zero = set1d("x", {0.0});
  const double fixture_err =
      std::abs(std::exp(lr_cs(zero, zero, scalar_params(0.0, 1.0, 1.0))) - 2.0 / std::sqrt(3.0));

  double asym = 0.0;
  double perm = 0.0;
  for (int k = 0; k < 100; ++k) {
    const Index p = 1 + k % 3;
    CommonSourceParams t{Vector::Zero(p), testing_support::random_spd(p, rng),
                         testing_support::random_spd(p, rng)};
    rng.fill_normal(t.mu);
    Matrix xb(1 + k % 4, p), xc(1 + k % 3, p);
    rng.fill_normal(xb);
    rng.fill_normal(xc);
    const double forward = lr_cs(ObservationSet("b", xb), ObservationSet("c", xc), t);
    asym = std::max(asym, std::abs(forward - lr_cs(ObservationSet("c", xc), ObservationSet("b", xb), t)));
    const Matrix rb = xb.colwise().reverse();
    const Matrix rc = xc.colwise().reverse();
    perm = std::max(perm, std::abs(forward - lr_cs(ObservationSet("b", rb), ObservationSet("c", rc), t)));
    const JointParams joint{t, {Vector::Zero(p), testing_support::random_spd(p, rng)}};
    perm = std::max(perm, std::abs(lr_ss(ObservationSet("c", xc), joint) -
                                   lr_ss(ObservationSet("c", rc), joint)));
  }
  const bool ok = worst < 1e-6 && fixture_err < 1e-8 && asym < 1e-10 && perm < 1e-10;
  return {ok, "quadrature max rel " + fmt("%.2e", worst) + ", 2/sqrt(3) err " +
                  fmt("%.1e", fixture_err) + ", symmetry " + fmt("%.1e", asym) +
                  ", permutation " + fmt("%.1e", perm)};
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "lrbf_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string fixtures = LRBF_FIXTURES;
  io::write_text(dir / "experiment.json",
                 "{\"schedule\":[40,80],\"replicates\":3,\"chain\":{\"iterations\":2000,"
                 "\"burn_in\":500}}");
  struct Case {
    std::string name;
    std::string args;
    std::string file;
  };
  const std::vector<Case> cases{
      {"estimate-cs", "estimate --config " + fixtures + "/cs1d/config.json --out ", "r.json"},
      {"estimate-ss", "estimate --config " + fixtures + "/cs1d/config_ss.json --out ", "r.json"},
      {"interval", "interval --bf 779.30 --sd 249.7349 --out ", "r.json"},
      {"ingest-check", "ingest-check --config " + fixtures + "/cs1d/config.json --out ", "r.json"},
      {"experiment", "experiment --kind consistency --seed 5 --config " +
                         (dir / "experiment.json").string() + " --out ",
       "consistency.json"}};
  Outcome o{true, ""};
  for (const auto& c : cases) {
    std::string text[2];
    bool ran = true;
    for (int k = 0; k < 2; ++k) {
      const fs::path out = dir / (c.name + std::to_string(k));
      const bool is_dir = c.file != "r.json";
      const fs::path target = is_dir ? out : fs::path(out.string() + ".json");
      const auto r = shell(c.args + target.string());
      ran = ran && r.status == 0;
      if (r.status == 0) text[k] = io::read_text(is_dir ? out / c.file : target);
    }
    const bool ok = ran && !text[0].empty() && text[0] == text[1];
    o.pass = o.pass && ok;
    o.detail += c.name + (ok ? " " : "! ");
  }
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"AC1 interval arithmetic", interval_arithmetic},
      {"AC2 oracle equivalence", oracle_equivalence},
      {"AC3 dual-form agreement", dual_forms},
      {"AC4 consistency", consistency},
      {"AC5 coverage", coverage},
      {"AC6 normality", normality},
      {"AC7 likelihood correctness", likelihood},
      {"AC8 determinism", determinism}};
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " ["
              << fmt("%.1f", secs) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}

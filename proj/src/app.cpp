#include "lrbf/app.hpp"

#include "lrbf/error.hpp"
#include "lrbf/io.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#ifndef LRBF_VERSION
#define LRBF_VERSION "0.0.0"
#endif

namespace lrbf::app {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void config_error(const std::string& message) {
  throw Error(ErrorCode::invalid_config, message);
}

const Json& require(const Json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    config_error(where + ": missing field '" + key + "'");
  }
  return obj.at(key);
}

double to_number(const Json& v, const std::string& where) {
  if (!v.is_number()) config_error(where + ": expected a number");
  return v.get<double>();
}

std::uint64_t to_seed(const Json& v, const std::string& where) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    config_error(where + ": seed must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

Vector to_vector(const Json& v, const std::string& where) {
  if (v.is_number()) return Vector::Constant(1, v.get<double>());
  if (!v.is_array() || v.empty()) config_error(where + ": expected a non-empty array");
  Vector out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Index>(i)] = to_number(v[i], where);
  return out;
}

// A number stands for a 1 x 1 matrix.
Matrix to_matrix(const Json& v, const std::string& where) {
  if (v.is_number()) return Matrix::Constant(1, 1, v.get<double>());
  if (!v.is_array() || v.empty()) config_error(where + ": expected an array of rows");
  const std::size_t rows = v.size();
  const std::size_t cols = v[0].is_array() ? v[0].size() : 0;
  if (cols == 0) config_error(where + ": expected an array of rows");
  Matrix out(static_cast<Index>(rows), static_cast<Index>(cols));
  for (std::size_t i = 0; i < rows; ++i) {
    if (!v[i].is_array() || v[i].size() != cols) config_error(where + ": ragged matrix");
    for (std::size_t j = 0; j < cols; ++j) {
      out(static_cast<Index>(i), static_cast<Index>(j)) = to_number(v[i][j], where);
    }
  }
  return out;
}

Json from_vector(const Vector& v) {
  Json out = Json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

Json from_matrix(const Matrix& m) {
  Json out = Json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    Json row = Json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    out.push_back(std::move(row));
  }
  return out;
}

NormalPrior parse_normal(const Json& v, const std::string& where) {
  return NormalPrior{to_vector(require(v, "mean", where), where + ".mean"),
                     to_matrix(require(v, "cov", where), where + ".cov")};
}

InverseWishartPrior parse_iw(const Json& v, const std::string& where) {
  return InverseWishartPrior{to_number(require(v, "dof", where), where + ".dof"),
                             to_matrix(require(v, "scale", where), where + ".scale")};
}

Json prior_to_json(const PriorSpec& prior) {
  const auto normal = [](const NormalPrior& n) {
    return Json{{"mean", from_vector(n.mean)}, {"cov", from_matrix(n.cov)}};
  };
  const auto iw = [](const InverseWishartPrior& w) {
    return Json{{"dof", w.dof}, {"scale", from_matrix(w.scale)}};
  };
  Json out{{"mean", normal(prior.mean_prior)},
           {"between", iw(prior.between_prior)},
           {"within", iw(prior.within_prior)}};
  if (prior.subject_mean_prior) out["subject_mean"] = normal(*prior.subject_mean_prior);
  if (prior.subject_within_prior) out["subject_within"] = iw(*prior.subject_within_prior);
  if (prior.fixed_sigma_b) out["fixed_sigma_b"] = from_matrix(*prior.fixed_sigma_b);
  if (prior.fixed_sigma_w) out["fixed_sigma_w"] = from_matrix(*prior.fixed_sigma_w);
  return out;
}

// "weak", {"derive_from": held-out CSV}, or explicit hyperparameters. An
// object without "mean" starts from the weak prior. Either covariance can be
// pinned with "fixed_sigma_b" / "fixed_sigma_w".
PriorSpec parse_prior(const Json& v, Index p, Framework framework, const fs::path& base_dir,
                      std::vector<InputFile>* inputs) {
  if (v.is_null() || (v.is_string() && v.get<std::string>() == "weak")) {
    return weak_prior(p, framework);
  }
  if (!v.is_object()) config_error("prior: expected \"weak\" or an object");
  PriorSpec prior;
  if (v.contains("derive_from")) {
    if (inputs == nullptr) config_error("prior.derive_from is not available here");
    const std::string given = v.at("derive_from").get<std::string>();
    const fs::path resolved = base_dir / given;
    inputs->push_back({"prior", given, resolved});
    const BackgroundDatabase held_out = io::read_database(resolved);
    if (held_out.dim() != p) {
      throw Error(ErrorCode::dimension_mismatch, "held-out prior data has wrong dimension");
    }
    prior = derive_prior(held_out, framework);
  } else if (v.contains("mean")) {
    prior.mean_prior = parse_normal(v.at("mean"), "prior.mean");
    prior.between_prior = parse_iw(require(v, "between", "prior"), "prior.between");
    prior.within_prior = parse_iw(require(v, "within", "prior"), "prior.within");
    if (framework == Framework::specific_source) {
      prior.subject_mean_prior = v.contains("subject_mean")
                                     ? parse_normal(v.at("subject_mean"), "prior.subject_mean")
                                     : prior.mean_prior;
      prior.subject_within_prior =
          v.contains("subject_within")
              ? parse_iw(v.at("subject_within"), "prior.subject_within")
              : prior.within_prior;
    }
  } else {
    prior = weak_prior(p, framework);
  }
  if (v.contains("fixed_sigma_b")) {
    prior.fixed_sigma_b = to_matrix(v.at("fixed_sigma_b"), "prior.fixed_sigma_b");
  }
  if (v.contains("fixed_sigma_w")) {
    prior.fixed_sigma_w = to_matrix(v.at("fixed_sigma_w"), "prior.fixed_sigma_w");
  }
  return prior;
}

ChainConfig parse_chain(const Json& v, std::optional<std::uint64_t> seed_override,
                        Json& echo) {
  ChainConfig chain;
  if (!v.is_null() && !v.is_object()) config_error("chain: expected an object");
  const auto get_int = [&](const char* key, int fallback) {
    if (!v.is_object() || !v.contains(key)) return fallback;
    if (!v.at(key).is_number_integer()) config_error(std::string("chain.") + key + ": expected an integer");
    return v.at(key).get<int>();
  };
  chain.iterations = get_int("iterations", chain.iterations);
  chain.burn_in = get_int("burn_in", chain.burn_in);
  chain.thin = get_int("thin", chain.thin);
  chain.chains = get_int("chains", chain.chains);
  const int floor = get_int("min_draws", static_cast<int>(chain.min_draws));
  if (floor < 1) config_error("chain.min_draws must be positive");
  chain.min_draws = static_cast<std::size_t>(floor);
  if (seed_override) {
    chain.seed = *seed_override;
  } else if (v.is_object() && v.contains("seed")) {
    chain.seed = to_seed(v.at("seed"), "chain.seed");
  } else {
    config_error("a seed is required: set chain.seed or pass --seed");
  }
  echo = Json{{"iterations", chain.iterations}, {"burn_in", chain.burn_in},
              {"thin", chain.thin},             {"chains", chain.chains},
              {"min_draws", chain.min_draws},   {"seed", chain.seed}};
  return chain;
}

Framework framework_of(const Json& config, const Overrides& overrides) {
  if (overrides.framework) return *overrides.framework;
  if (!config.contains("framework")) config_error("missing field 'framework'");
  try {
    return parse_framework(config.at("framework").get<std::string>());
  } catch (const Json::exception&) {
    config_error("framework must be a string");
  }
}

Json estimate_to_json(const BfEstimate& e) {
  Json warnings = Json::array();
  for (const auto& w : e.warnings) warnings.push_back(w);
  return Json{{"form", std::string(to_string(e.form))},
              {"value", e.value},
              {"log_value", e.log_value},
              {"mc_standard_error", e.mc_standard_error},
              {"n_draws", e.n_draws},
              {"rejected_draws", e.rejected_draws},
              {"warnings", warnings}};
}

Json interval_to_json(const LrInterval& i) {
  return Json{{"alpha", i.alpha},
              {"z", i.z},
              {"center", i.center},
              {"sigma_n", i.sigma_n},
              {"lower", i.lower},
              {"lower_untruncated", i.lower_untruncated},
              {"upper", i.upper},
              {"truncated", i.truncated()}};
}

Json diagnostics_to_json(const ChainDiagnostics& d) {
  Json ess = Json::object();
  for (const auto& [k, v] : d.ess) ess[k] = v;
  Json lengths = Json::array();
  for (auto l : d.chain_lengths) lengths.push_back(l);
  return Json{{"ess", ess},
              {"pd_rejections", d.pd_rejections},
              {"latent_effects", d.latent_effects},
              {"chain_lengths", lengths}};
}

std::string fmt(double v, const char* spec = "%.6g") {
  if (!std::isfinite(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string seed_text(std::uint64_t seed) { return std::to_string(seed); }

}  // namespace

std::string_view software_version() { return LRBF_VERSION; }

int exit_code_for(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    if (err->code() == ErrorCode::chain_failure) return exit_chain_failure;
    return is_validation_error(err->code()) ? exit_validation : exit_failure;
  }
  if (dynamic_cast<const Json::exception*>(&e) != nullptr) return exit_validation;
  return exit_failure;
}

AnalysisConfig parse_analysis_config(const Json& config, const fs::path& base_dir,
                                     const Overrides& overrides) {
  if (!config.is_object()) config_error("configuration must be a JSON object");
  const Framework framework = framework_of(config, overrides);

  std::vector<InputFile> inputs;
  const auto input = [&](const char* role) {
    const Json& v = require(config, role, "config");
    if (!v.is_string()) config_error(std::string(role) + ": expected a file path");
    const std::string given = v.get<std::string>();
    inputs.push_back({role, given, base_dir / given});
    return inputs.back().resolved;
  };
  BackgroundDatabase background = io::read_database(input("background"));
  ObservationSet x_b = io::read_observation_set(input("x_b"));
  ObservationSet x_c = io::read_observation_set(input("x_c"));
  const Index p = background.dim();
  if (x_b.dim() != p || x_c.dim() != p) {
    throw Error(ErrorCode::dimension_mismatch,
                "unknown-source files and background differ in dimension");
  }

  const Json prior_json = config.contains("prior") ? config.at("prior") : Json();
  PriorSpec prior = parse_prior(prior_json, p, framework, base_dir, &inputs);
  validate(prior, p, framework);

  Json chain_echo;
  std::optional<std::uint64_t> seed = overrides.seed;
  if (!seed && config.contains("seed")) seed = to_seed(config.at("seed"), "seed");
  ChainConfig chain =
      parse_chain(config.contains("chain") ? config.at("chain") : Json(), seed, chain_echo);
  validate(chain);

  double alpha = 0.05;
  if (config.contains("alpha")) alpha = to_number(config.at("alpha"), "alpha");
  if (!(alpha > 0.0 && alpha < 1.0)) config_error("alpha must lie in (0, 1)");

  std::vector<EstimatorForm> forms;
  if (config.contains("forms")) {
    const Json& f = config.at("forms");
    if (!f.is_array() || f.empty()) config_error("forms: expected a non-empty array");
    for (const auto& name : f) {
      if (!name.is_string()) config_error("forms: expected strings");
      forms.push_back(parse_estimator_form(name.get<std::string>()));
    }
  } else {
    forms = {EstimatorForm::posterior_mean_m2, EstimatorForm::inverse_mean_m1,
             EstimatorForm::prior_form};
  }
  EstimatorOptions estimator;
  estimator.min_draws = chain.min_draws;

  Json forms_echo = Json::array();
  for (auto f : forms) forms_echo.push_back(std::string(to_string(f)));
  Json echo{{"framework", std::string(to_string(framework))}};
  for (const auto& in : inputs) {
    if (in.role != "prior") echo[in.role] = in.as_given;
  }
  echo["prior"] = prior_json.is_object() && prior_json.contains("derive_from")
                      ? Json{{"derive_from", prior_json.at("derive_from")},
                             {"derived", prior_to_json(prior)}}
                      : prior_to_json(prior);
  echo["chain"] = chain_echo;
  echo["alpha"] = alpha;
  echo["forms"] = forms_echo;

  return AnalysisConfig{framework,          std::move(inputs), std::move(background),
                        std::move(x_b),     std::move(x_c),    std::move(prior),
                        chain,              alpha,             std::move(forms),
                        estimator,          std::move(echo)};
}

AnalysisConfig load_analysis_config(const fs::path& path, const Overrides& overrides) {
  Json config;
  try {
    config = Json::parse(io::read_text(path));
  } catch (const Json::parse_error& e) {
    config_error(path.string() + ": " + e.what());
  }
  return parse_analysis_config(config, path.parent_path(), overrides);
}

Json run_estimate(const AnalysisConfig& config) {
  const LrFunction lr = lr_function(config.framework, config.x_b, config.x_c);
  const auto draws_for = [&](Conditioning conditioning) {
    ChainConfig chain = config.chain;
    chain.seed = derive_seed(config.chain.seed, static_cast<std::uint64_t>(conditioning) + 1);
    return gibbs(config.framework, config.background, config.x_b, config.x_c, config.prior,
                 conditioning, chain);
  };

  // The M2 posterior gives sigma_n and the interval centre in every run.
  const PosteriorDraws m2 = draws_for(Conditioning::m2);
  const BfEstimate centre = bf_posterior_mean(m2, lr, config.estimator);
  const double sigma_n = posterior_sd_lr(m2, lr);
  const LrInterval interval = credible_interval(centre.value, sigma_n, config.alpha);

  Json estimates = Json::array();
  Json chains{{"m2", diagnostics_to_json(m2.diagnostics)}};
  Json warnings = Json::array();
  std::size_t rejected = 0;
  for (EstimatorForm form : config.forms) {
    BfEstimate est;
    if (form == EstimatorForm::posterior_mean_m2) {
      est = centre;
    } else if (form == EstimatorForm::inverse_mean_m1) {
      const PosteriorDraws m1 = draws_for(Conditioning::m1);
      chains["m1"] = diagnostics_to_json(m1.diagnostics);
      est = bf_inverse_mean(m1, lr, config.estimator);
    } else {
      const PosteriorDraws reference = draws_for(Conditioning::background);
      chains["background"] = diagnostics_to_json(reference.diagnostics);
      est = bf_prior_form(reference, lr, config.estimator);
    }
    rejected += est.rejected_draws;
    for (const auto& w : est.warnings) warnings.push_back(std::string(to_string(form)) + ": " + w);
    estimates.push_back(estimate_to_json(est));
  }

  Json inputs = Json::array();
  for (const auto& in : config.inputs) {
    inputs.push_back(Json{{"role", in.role},
                          {"path", in.as_given},
                          {"sha256", io::sha256_file(in.resolved)}});
  }
  std::size_t pd_rejections = 0;
  for (const auto& [name, diag] : chains.items()) {
    pd_rejections += diag.at("pd_rejections").get<std::size_t>();
  }

  return Json{
      {"framework", std::string(to_string(config.framework))},
      {"estimates", estimates},
      {"sigma_n", sigma_n},
      {"interval", interval_to_json(interval)},
      {"diagnostics",
       Json{{"chains", chains},
            {"failures", Json{{"rejected_draws", rejected}, {"pd_rejections", pd_rejections}}},
            {"warnings", warnings}}},
      {"provenance",
       Json{{"software", "lrbf"},
            {"version", std::string(software_version())},
            {"seed", seed_text(config.chain.seed)},
            {"config", config.echo},
            {"inputs", inputs}}}};
}

std::string format_estimate_table(const Json& report) {
  std::ostringstream out;
  out << "framework: " << report.at("framework").get<std::string>() << "\n";
  out << "form                 BF              log BF          MC s.e.\n";
  for (const auto& e : report.at("estimates")) {
    char line[160];
    std::snprintf(line, sizeof line, "%-20s %-15s %-15s %s\n",
                  e.at("form").get<std::string>().c_str(),
                  fmt(e.at("value").get<double>()).c_str(),
                  fmt(e.at("log_value").get<double>()).c_str(),
                  fmt(e.at("mc_standard_error").get<double>()).c_str());
    out << line;
  }
  out << format_interval_table(report);
  for (const auto& w : report.at("diagnostics").at("warnings")) {
    out << "warning: " << w.get<std::string>() << "\n";
  }
  return out.str();
}

Json interval_report(double bf, double sigma_n, double alpha) {
  const LrInterval interval = credible_interval(bf, sigma_n, alpha);
  return Json{{"sigma_n", sigma_n},
              {"interval", interval_to_json(interval)},
              {"provenance",
               Json{{"software", "lrbf"}, {"version", std::string(software_version())}}}};
}

std::string format_interval_table(const Json& report) {
  const Json& i = report.at("interval");
  std::ostringstream out;
  const double level = 100.0 * (1.0 - i.at("alpha").get<double>());
  out << "BF " << fmt(i.at("center").get<double>()) << "  sigma_n "
      << fmt(i.at("sigma_n").get<double>()) << "  " << fmt(level, "%.4g")
      << "% interval (" << fmt(i.at("lower").get<double>()) << ", "
      << fmt(i.at("upper").get<double>()) << ")";
  if (i.at("truncated").get<bool>()) {
    out << "  [lower truncated from " << fmt(i.at("lower_untruncated").get<double>()) << "]";
  }
  out << "\n";
  return out.str();
}

Json ingest_report(const std::vector<fs::path>& paths) {
  Json files = Json::array();
  for (const auto& path : paths) {
    const io::CsvTable table = io::read_csv(path);
    Json entry{{"path", path.string()}, {"sha256", io::sha256_file(path)}};
    bool single = true;
    for (const auto& row : table.rows) single = single && row.source_id == table.rows.front().source_id;
    if (single) {
      const ObservationSet set = io::to_observation_set(table);
      entry["kind"] = "observation_set";
      entry["source_id"] = set.label();
      entry["sources"] = 1;
      entry["items"] = set.size();
      entry["dim"] = set.dim();
      entry["items_per_source"] = set.size();
    } else {
      const BackgroundDatabase db = io::to_database(table);
      entry["kind"] = "background";
      entry["sources"] = db.source_count();
      entry["items"] = db.total_items();
      entry["dim"] = db.dim();
      entry["items_per_source"] = db.items_per_source();
    }
    files.push_back(std::move(entry));
  }
  return Json{{"files", files}};
}

ExperimentKind parse_experiment_kind(std::string_view text) {
  if (text == "consistency") return ExperimentKind::consistency;
  if (text == "coverage") return ExperimentKind::coverage;
  if (text == "normality") return ExperimentKind::normality;
  config_error("unknown experiment kind '" + std::string(text) + "'");
}

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::consistency: return "consistency";
    case ExperimentKind::coverage: return "coverage";
    case ExperimentKind::normality: return "normality";
  }
  return "unknown";
}

ExperimentSetup parse_experiment_config(ExperimentKind kind, const Json& config,
                                        const Overrides& overrides) {
  if (!config.is_null() && !config.is_object()) config_error("configuration must be an object");
  const Json cfg = config.is_null() ? Json::object() : config;
  ExperimentSetup setup;
  setup.kind = kind;
  TrueModelSpec& truth = setup.truth;
  truth.framework = overrides.framework
                        ? *overrides.framework
                        : (cfg.contains("framework")
                               ? parse_framework(cfg.at("framework").get<std::string>())
                               : Framework::common_source);

  // Built-in 1-D fixture.
  const Json t = cfg.contains("truth") ? cfg.at("truth") : Json::object();
  truth.theta_a0.mu = t.contains("mu") ? to_vector(t.at("mu"), "truth.mu") : Vector::Zero(1);
  truth.theta_a0.sigma_b =
      t.contains("sigma_b") ? to_matrix(t.at("sigma_b"), "truth.sigma_b") : Matrix::Identity(1, 1);
  truth.theta_a0.sigma_w =
      t.contains("sigma_w") ? to_matrix(t.at("sigma_w"), "truth.sigma_w") : Matrix::Identity(1, 1);
  const Index p = truth.theta_a0.mu.size();
  if (truth.framework == Framework::specific_source) {
    truth.theta_b0 = SpecificSourceParams{
        t.contains("mu_b") ? to_vector(t.at("mu_b"), "truth.mu_b") : Vector::Constant(p, 0.5),
        t.contains("sigma_wb") ? to_matrix(t.at("sigma_wb"), "truth.sigma_wb")
                               : Matrix(0.5 * Matrix::Identity(p, p))};
  }
  if (cfg.contains("items_per_source")) {
    truth.items_per_source = cfg.at("items_per_source").get<Index>();
  }
  if (cfg.contains("generator")) {
    const std::string g = cfg.at("generator").get<std::string>();
    if (g != "m1" && g != "m2") config_error("generator must be m1 or m2");
    truth.generator = g == "m1" ? Model::m1 : Model::m2;
  }
  const auto as_set = [&](const char* key, const char* label) {
    Matrix items = to_matrix(cfg.at(key), key);
    if (items.cols() != p && items.rows() == p && p == 1) items.transposeInPlace();
    return ObservationSet(label, items);
  };
  if (cfg.contains("x_b")) truth.x_b = as_set("x_b", "x_b");
  if (cfg.contains("x_c")) truth.x_c = as_set("x_c", "x_c");
  if (!truth.x_c && !truth.x_b && p == 1) {
    truth.x_b = ObservationSet("x_b", Matrix::Zero(1, 1));
    truth.x_c = ObservationSet("x_c", Matrix::Constant(
                                          1, 1, truth.framework == Framework::common_source ? 0.0 : 0.3));
  }

  ExperimentConfig& ec = setup.config;
  std::optional<std::uint64_t> seed = overrides.seed;
  if (!seed && cfg.contains("seed")) seed = to_seed(cfg.at("seed"), "seed");
  if (!seed) config_error("a seed is required: set seed or pass --seed");
  ec.seed = *seed;
  if (!truth.x_c || (truth.framework == Framework::common_source && !truth.x_b)) {
    const Json u = cfg.contains("unknown") ? cfg.at("unknown") : Json::object();
    const Index n_b = u.contains("n_b") ? u.at("n_b").get<Index>() : 1;
    const Index n_c = u.contains("n_c") ? u.at("n_c").get<Index>() : 1;
    freeze_unknown_sources(truth, n_b, n_c, derive_seed(ec.seed, 0xF00D));
  }
  validate(truth);

  if (cfg.contains("schedule")) {
    ec.schedule.clear();
    for (const auto& n : cfg.at("schedule")) ec.schedule.push_back(n.get<Index>());
  }
  if (cfg.contains("replicates")) ec.replicates = cfg.at("replicates").get<int>();
  if (cfg.contains("form")) ec.form = parse_estimator_form(cfg.at("form").get<std::string>());
  Json chain_echo;
  Json chain_json = cfg.contains("chain") ? cfg.at("chain") : Json::object();
  if (!chain_json.contains("iterations")) chain_json["iterations"] = 3000;
  if (!chain_json.contains("burn_in")) chain_json["burn_in"] = 500;
  ec.chain = parse_chain(chain_json, ec.seed, chain_echo);
  ec.estimator.min_draws = ec.chain.min_draws;
  if (cfg.contains("prior")) {
    ec.prior = parse_prior(cfg.at("prior"), p, truth.framework, {}, nullptr);
    validate(*ec.prior, p, truth.framework);
  }
  if (cfg.contains("alphas")) {
    setup.alphas.clear();
    for (const auto& a : cfg.at("alphas")) setup.alphas.push_back(to_number(a, "alphas"));
  }
  if (cfg.contains("delta_method")) setup.delta_method = cfg.at("delta_method").get<bool>();
  if (cfg.contains("threads")) ec.threads = cfg.at("threads").get<int>();

  Json schedule = Json::array();
  for (Index n : ec.schedule) schedule.push_back(n);
  Json truth_echo{{"mu", from_vector(truth.theta_a0.mu)},
                  {"sigma_b", from_matrix(truth.theta_a0.sigma_b)},
                  {"sigma_w", from_matrix(truth.theta_a0.sigma_w)}};
  if (truth.theta_b0) {
    truth_echo["mu_b"] = from_vector(truth.theta_b0->mu_b);
    truth_echo["sigma_wb"] = from_matrix(truth.theta_b0->sigma_wb);
  }
  Json alphas = Json::array();
  for (double a : setup.alphas) alphas.push_back(a);
  setup.echo = Json{{"kind", std::string(to_string(kind))},
                    {"framework", std::string(to_string(truth.framework))},
                    {"truth", truth_echo},
                    {"generator", truth.generator == Model::m1 ? "m1" : "m2"},
                    {"items_per_source", truth.items_per_source},
                    {"x_b", truth.x_b ? from_matrix(truth.x_b->items()) : Json()},
                    {"x_c", from_matrix(truth.x_c->items())},
                    {"schedule", schedule},
                    {"replicates", ec.replicates},
                    {"form", std::string(to_string(ec.form))},
                    {"alphas", alphas},
                    {"delta_method", setup.delta_method},
                    {"chain", chain_echo},
                    {"prior", prior_to_json(ec.prior ? *ec.prior
                                                     : weak_prior(p, truth.framework))},
                    {"seed", seed_text(ec.seed)}};
  return setup;
}

ExperimentOutput run_experiment(const ExperimentSetup& setup, const std::atomic<bool>* stop) {
  ExperimentConfig config = setup.config;
  config.stop = stop;
  ExperimentOutput out;
  std::ostringstream csv;
  std::ostringstream table;
  Json summary = Json::array();
  Json header{{"software", "lrbf"}, {"version", std::string(software_version())}};

  switch (setup.kind) {
    case ExperimentKind::consistency: {
      const ConsistencyResult r = consistency_experiment(setup.truth, config);
      csv << "n,replicate,seed,failed,bf,log_bf,mc_standard_error,true_lr,abs_rel_error,"
             "max_lambda,trace_hash,failure\n";
      for (const auto& rec : r.records) {
        csv << rec.n << ',' << rec.replicate << ',' << rec.seed << ',' << (rec.failed ? 1 : 0)
            << ',' << io::format_double(rec.bf) << ',' << io::format_double(rec.log_bf) << ','
            << io::format_double(rec.mc_standard_error) << ',' << io::format_double(rec.true_lr)
            << ',' << io::format_double(rec.abs_rel_error) << ','
            << io::format_double(rec.max_lambda) << ',' << rec.trace_hash << ",\""
            << rec.failure << "\"\n";
      }
      table << "consistency (" << to_string(r.framework) << ", " << to_string(r.form)
            << "), true LR " << fmt(r.true_lr) << "\n";
      table << "n        done  fail  median      q25         q75         max\n";
      for (const auto& s : r.summary) {
        char line[200];
        std::snprintf(line, sizeof line, "%-8lld %-5zu %-5zu %-11s %-11s %-11s %s\n",
                      static_cast<long long>(s.n), s.completed, s.failures,
                      fmt(s.median, "%.4g").c_str(), fmt(s.q25, "%.4g").c_str(),
                      fmt(s.q75, "%.4g").c_str(), fmt(s.max, "%.4g").c_str());
        table << line;
        summary.push_back(Json{{"n", s.n},
                               {"completed", s.completed},
                               {"failures", s.failures},
                               {"median_abs_rel_error", s.median},
                               {"q25", s.q25},
                               {"q75", s.q75},
                               {"max", s.max}});
      }
      table << "median non-increasing: " << (r.median_non_increasing() ? "yes" : "no") << "\n";
      out.summary = Json{{"kind", "consistency"},
                         {"true_lr", r.true_lr},
                         {"failures", r.failures},
                         {"trace_fixed", r.trace_fixed},
                         {"median_non_increasing", r.median_non_increasing()},
                         {"summary", summary}};
      break;
    }
    case ExperimentKind::coverage: {
      const CoverageResult r =
          coverage_experiment(setup.truth, config, setup.alphas, setup.delta_method);
      csv << "n,replicate,seed,failed,bf,sigma_n";
      for (double a : r.alphas) csv << ",probability_alpha_" << io::format_double(a);
      csv << ",variance_ratio,failure\n";
      for (const auto& rec : r.records) {
        csv << rec.n << ',' << rec.replicate << ',' << rec.seed << ',' << (rec.failed ? 1 : 0)
            << ',' << io::format_double(rec.bf) << ',' << io::format_double(rec.sigma_n);
        for (std::size_t a = 0; a < r.alphas.size(); ++a) {
          csv << ',' << (a < rec.probability.size() ? io::format_double(rec.probability[a])
                                                    : std::string("null"));
        }
        csv << ',' << io::format_double(rec.variance_ratio) << ",\"" << rec.failure << "\"\n";
      }
      table << "coverage (" << to_string(r.framework) << ")\n";
      table << "n        done  fail ";
      for (double a : r.alphas) table << " P[alpha=" << fmt(a, "%.3g") << "]";
      table << "  variance ratio\n";
      for (const auto& s : r.summary) {
        char line[64];
        std::snprintf(line, sizeof line, "%-8lld %-5zu %-5zu", static_cast<long long>(s.n),
                      s.completed, s.failures);
        table << line;
        Json probs = Json::array();
        for (double m : s.mean_probability) {
          table << "  " << fmt(m, "%.4f") << "       ";
          probs.push_back(m);
        }
        table << fmt(s.mean_variance_ratio, "%.4g") << "\n";
        summary.push_back(Json{{"n", s.n},
                               {"completed", s.completed},
                               {"failures", s.failures},
                               {"mean_probability", probs},
                               {"mean_variance_ratio", s.mean_variance_ratio}});
      }
      Json alphas = Json::array();
      for (double a : r.alphas) alphas.push_back(a);
      out.summary = Json{{"kind", "coverage"},
                         {"alphas", alphas},
                         {"failures", r.failures},
                         {"trace_fixed", r.trace_fixed},
                         {"summary", summary}};
      break;
    }
    case ExperimentKind::normality: {
      const NormalityResult r = normality_experiment(setup.truth, config);
      csv << "replicate,failed,ks_small,ks_large,failure\n";
      for (const auto& rec : r.records) {
        csv << rec.replicate << ',' << (rec.failed ? 1 : 0) << ','
            << io::format_double(rec.ks_small) << ',' << io::format_double(rec.ks_large)
            << ",\"" << rec.failure << "\"\n";
      }
      table << "normality (" << to_string(r.framework) << "), n = " << r.small_n << " vs "
            << r.large_n << "\n";
      table << "fraction with smaller KS at large n: " << fmt(r.fraction_improved, "%.3f")
            << " (" << r.failures << " failed)\n";
      table << "t(2) control KS " << fmt(r.heavy_tail_statistic, "%.4f")
            << (r.heavy_tail_flagged ? "  flagged" : "  not flagged") << " (threshold "
            << kNormalityThreshold << ")\n";
      out.summary = Json{{"kind", "normality"},
                         {"small_n", r.small_n},
                         {"large_n", r.large_n},
                         {"failures", r.failures},
                         {"fraction_improved", r.fraction_improved},
                         {"heavy_tail_statistic", r.heavy_tail_statistic},
                         {"heavy_tail_flagged", r.heavy_tail_flagged},
                         {"threshold", kNormalityThreshold}};
      break;
    }
  }
  out.summary["interrupted"] = stop != nullptr && stop->load();
  out.summary["config"] = setup.echo;
  out.summary["provenance"] = header;
  out.csv = csv.str();
  out.table = table.str();
  return out;
}

}  // namespace lrbf::app

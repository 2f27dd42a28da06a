#pragma once

// Configuration, estimation runs and experiment runs behind the command line
// tool. Everything here is deterministic given the inputs and the seed.

#include "lrbf/bf.hpp"
#include "lrbf/lab.hpp"
#include "lrbf/sampler.hpp"

#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace lrbf::app {

using Json = nlohmann::ordered_json;

std::string_view software_version();

/// Exit codes of the command line tool.
enum ExitCode : int {
  exit_ok = 0,
  exit_failure = 1,
  exit_validation = 2,
  exit_chain_failure = 3,
};

int exit_code_for(const std::exception& e);

struct Overrides {
  std::optional<Framework> framework;
  std::optional<std::uint64_t> seed;
};

struct InputFile {
  std::string role;      // background, x_b, x_c or prior
  std::string as_given;  // path text from the config
  std::filesystem::path resolved;
};

struct AnalysisConfig {
  Framework framework = Framework::common_source;
  std::vector<InputFile> inputs;
  BackgroundDatabase background;
  ObservationSet x_b;
  ObservationSet x_c;
  PriorSpec prior;
  ChainConfig chain;
  double alpha = 0.05;
  std::vector<EstimatorForm> forms;
  EstimatorOptions estimator;
  Json echo;  // the configuration as used, overrides applied
};

/// Parses and validates a configuration. Relative paths resolve against
/// `base_dir`.
AnalysisConfig parse_analysis_config(const Json& config,
                                     const std::filesystem::path& base_dir,
                                     const Overrides& overrides = {});
AnalysisConfig load_analysis_config(const std::filesystem::path& path,
                                    const Overrides& overrides = {});

Json run_estimate(const AnalysisConfig& config);
std::string format_estimate_table(const Json& report);

Json interval_report(double bf, double sigma_n, double alpha);
std::string format_interval_table(const Json& report);

/// Summary of every CSV file named on the command line or in a config.
Json ingest_report(const std::vector<std::filesystem::path>& paths);

enum class ExperimentKind { consistency, coverage, normality };
ExperimentKind parse_experiment_kind(std::string_view text);
std::string_view to_string(ExperimentKind kind);

struct ExperimentSetup {
  ExperimentKind kind = ExperimentKind::consistency;
  TrueModelSpec truth;
  ExperimentConfig config;
  std::vector<double> alphas{0.05, 0.5};
  bool delta_method = true;
  Json echo;
};

/// Missing fields fall back to the built-in 1-D fixture.
ExperimentSetup parse_experiment_config(ExperimentKind kind, const Json& config,
                                        const Overrides& overrides = {});

struct ExperimentOutput {
  std::string csv;
  Json summary;
  std::string table;
};

ExperimentOutput run_experiment(const ExperimentSetup& setup,
                                const std::atomic<bool>* stop = nullptr);

}  // namespace lrbf::app

// lrbf: likelihood ratios and Bayes factors for common-source and
// specific-source evidence evaluation.
//
//   lrbf ingest-check FILE... | --config CONFIG
//   lrbf estimate --config CONFIG [--seed S] [--framework F] [--out REPORT.json]
//   lrbf interval --bf B --sd S [--alpha A] [--out REPORT.json]
//   lrbf experiment --kind consistency|coverage|normality [--config CONFIG]
//                   [--seed S] [--framework F] [--out DIR]
//
// Exit codes: 0 success, 1 other failure, 2 invalid input or configuration,
// 3 sampler failure.

#include "lrbf/app.hpp"
#include "lrbf/error.hpp"
#include "lrbf/io.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <iostream>

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_interrupt(int) { g_stop.store(true); }

namespace fs = std::filesystem;
using lrbf::app::Json;

void emit(const Json& report, const std::string& out, const std::string& table) {
  const std::string text = lrbf::io::dump_json(report);
  if (out.empty()) {
    std::cout << text;
    return;
  }
  lrbf::io::write_text(out, text);
  std::cout << table;
}

lrbf::app::Overrides overrides(const std::string& framework,
                               const std::optional<std::uint64_t>& seed) {
  lrbf::app::Overrides o;
  if (!framework.empty()) o.framework = lrbf::parse_framework(framework);
  o.seed = seed;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"Likelihood ratios and Bayes factors for forensic source problems"};
  cli.require_subcommand(1);
  cli.set_version_flag("--version", std::string(lrbf::app::software_version()));

  std::string config_path;
  std::string framework;
  std::string out;
  std::optional<std::uint64_t> seed;

  auto* ingest = cli.add_subcommand("ingest-check", "Parse CSV files and summarize them");
  std::vector<std::string> files;
  ingest->add_option("files", files, "CSV files (source_id,item_id,f1,...,fp)");
  ingest->add_option("--config", config_path, "Check every file named in an analysis config");
  ingest->add_option("--out", out, "Write the JSON summary here");

  auto* estimate = cli.add_subcommand("estimate", "Bayes factors and the credible interval");
  estimate->add_option("--config", config_path, "Analysis config (JSON)")->required();
  estimate->add_option("--framework", framework, "common-source or specific-source");
  estimate->add_option("--seed", seed, "Random seed; overrides the config");
  estimate->add_option("--out", out, "Write the JSON report here");

  auto* interval = cli.add_subcommand("interval", "Interval arithmetic from a given BF and sd");
  double bf = 0.0;
  double sd = 0.0;
  double alpha = 0.05;
  interval->add_option("--bf", bf, "Bayes factor")->required();
  interval->add_option("--sd", sd, "Posterior standard deviation of the likelihood ratio")
      ->required();
  interval->add_option("--alpha", alpha, "1 - credibility level")->capture_default_str();
  interval->add_option("--out", out, "Write the JSON report here");

  auto* experiment = cli.add_subcommand("experiment", "Large-sample simulation experiments");
  std::string kind;
  experiment->add_option("--kind", kind, "consistency, coverage or normality")->required();
  experiment->add_option("--config", config_path, "Experiment config (JSON); optional");
  experiment->add_option("--framework", framework, "common-source or specific-source");
  experiment->add_option("--seed", seed, "Random seed; overrides the config");
  experiment->add_option("--out", out, "Output directory")->default_str(".");

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = cli.exit(e);
    return code == 0 ? lrbf::app::exit_ok : lrbf::app::exit_validation;
  }

  try {
    if (ingest->parsed()) {
      std::vector<fs::path> paths(files.begin(), files.end());
      if (!config_path.empty()) {
        const Json cfg = Json::parse(lrbf::io::read_text(config_path));
        const fs::path base = fs::path(config_path).parent_path();
        for (const char* role : {"background", "x_b", "x_c"}) {
          if (cfg.contains(role)) paths.push_back(base / cfg.at(role).get<std::string>());
        }
      }
      if (paths.empty()) {
        throw lrbf::Error(lrbf::ErrorCode::invalid_argument, "no files to check");
      }
      const Json report = lrbf::app::ingest_report(paths);
      emit(report, out, lrbf::io::dump_json(report));
    } else if (estimate->parsed()) {
      const auto config =
          lrbf::app::load_analysis_config(config_path, overrides(framework, seed));
      const Json report = lrbf::app::run_estimate(config);
      emit(report, out, lrbf::app::format_estimate_table(report));
    } else if (interval->parsed()) {
      const Json report = lrbf::app::interval_report(bf, sd, alpha);
      std::cout << lrbf::app::format_interval_table(report);
      if (!out.empty()) lrbf::io::write_text(out, lrbf::io::dump_json(report));
    } else if (experiment->parsed()) {
      const auto parsed_kind = lrbf::app::parse_experiment_kind(kind);
      const Json cfg =
          config_path.empty() ? Json() : Json::parse(lrbf::io::read_text(config_path));
      const auto setup =
          lrbf::app::parse_experiment_config(parsed_kind, cfg, overrides(framework, seed));
      const fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
      fs::create_directories(dir);
      std::signal(SIGINT, on_interrupt);
      const auto result = lrbf::app::run_experiment(setup, &g_stop);
      const std::string stem(lrbf::app::to_string(parsed_kind));
      lrbf::io::write_text(dir / (stem + ".csv"), result.csv);
      lrbf::io::write_text(dir / (stem + ".json"), lrbf::io::dump_json(result.summary));
      std::cout << result.table;
      if (g_stop.load()) {
        std::cerr << "interrupted: partial results written to " << dir.string() << "\n";
        return lrbf::app::exit_failure;
      }
    }
  } catch (const std::exception& e) {
    const auto* err = dynamic_cast<const lrbf::Error*>(&e);
    std::cerr << "error";
    if (err != nullptr) std::cerr << " [" << lrbf::to_string(err->code()) << "]";
    std::cerr << ": " << e.what() << "\n";
    return lrbf::app::exit_code_for(e);
  }
  return lrbf::app::exit_ok;
}

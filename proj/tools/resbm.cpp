// resbm: train toy ResBM models, analyze their spectra, simulate pipelines.
//
// Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "resbm/run.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Residual bottleneck model toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train = app.add_subcommand("train", "Train a model from a run config");
  train->add_option("--config", config_path, "Run config JSON")->required();

  std::string checkpoint_path;
  std::string selector;
  std::string out_path;
  std::string against;
  auto* spectrum = app.add_subcommand("spectrum", "Singular spectra and effective ranks of a checkpoint");
  spectrum->add_option("--checkpoint", checkpoint_path, "Checkpoint file")->required();
  spectrum->add_option("--selector", selector, "bottleneck-output or ffn-output")->required();
  spectrum->add_option("--out", out_path, "Report JSON path (spectra CSV is written alongside)")->required();
  spectrum->add_option("--against", against, "Second checkpoint; prints a per-layer comparison");

  std::string scenario_path;
  std::string sweep;
  std::string trace_path;
  auto* simulate = app.add_subcommand("simulate", "Simulate one pipeline-parallel training step");
  simulate->add_option("--scenario", scenario_path, "Scenario JSON")->required();
  simulate->add_option("--sweep", sweep, "Comma-separated bandwidths, e.g. 80Mbps,800Mbps,10Gbps");
  simulate->add_option("--trace", trace_path, "Trace JSONL path (default <scenario>.trace.jsonl)");

  std::string a_csv;
  std::string b_csv;
  auto* compare = app.add_subcommand("compare", "Align two loss CSVs");
  compare->add_option("a", a_csv, "First loss CSV")->required();
  compare->add_option("b", b_csv, "Second loss CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : resbm::run::kExitInput;
  }

  auto opt = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<std::string>(s); };
  if (*train) return resbm::run::cmd_train(config_path, std::cout, std::cerr);
  if (*spectrum) {
    return resbm::run::cmd_spectrum(checkpoint_path, selector, out_path, opt(against), std::cout, std::cerr);
  }
  if (*simulate) {
    return resbm::run::cmd_simulate(scenario_path, opt(sweep), opt(trace_path), std::cout, std::cerr);
  }
  return resbm::run::cmd_compare(a_csv, b_csv, std::cout, std::cerr);
}

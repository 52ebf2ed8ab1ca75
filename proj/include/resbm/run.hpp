#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "resbm/model.hpp"
#include "resbm/optim.hpp"
#include "resbm/serialize.hpp"

namespace resbm::run {

/// Process exit codes shared by every command.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumeric = 3;

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  optim::LrSchedule schedule{3e-3, 100, 1, 0.01};

  bool operator==(const AdamWConfig&) const = default;
};

struct MuonConfig {
  double momentum = 0.95;
  double weight_decay = 0.0;
  int ns_iterations = 5;
  optim::LrSchedule schedule{0.02, 100, 1, 0.1};

  bool operator==(const MuonConfig&) const = default;
};

struct OptimizerConfig {
  optim::Mode mode = optim::Mode::MuonHybrid;
  AdamWConfig adamw;
  MuonConfig muon;

  bool operator==(const OptimizerConfig&) const = default;
};

struct DataConfig {
  std::string corpus = "data/paradise_lost.txt";
  std::size_t batch_size = 8;
  std::uint64_t seed = 1234;

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  model::ModelConfig model = model::ModelConfig::toy();
  OptimizerConfig optimizer;
  DataConfig data;
  std::size_t steps = 1;
  std::size_t log_every = 10;
  /// Batches from a separate "eval" stream scored after training; 0 skips.
  std::size_t eval_batches = 0;
  std::string loss_csv = "loss.csv";
  std::string checkpoint = "final.ckpt";

  bool operator==(const RunConfig&) const = default;
  /// Cross-field checks (schedule.total_steps == steps, ...). ConfigError.
  void validate() const;
};

/// Toy defaults for `steps` steps with schedules sized to match.
RunConfig default_run_config(std::size_t steps, optim::Mode mode, bool compressed = true);

Json run_config_to_json(const RunConfig& config);
/// Missing optional fields take defaults; schedule.total_steps defaults to
/// steps and warmup_steps to min(100, steps / 10). Validates.
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::filesystem::path& path);

optim::OptimizerStates make_optimizer_states(const OptimizerConfig& config);

struct LossRow {
  std::size_t step = 0;
  std::uint64_t tokens = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_sec = 0.0;
};

struct TrainResult {
  std::vector<LossRow> rows;
  std::optional<double> eval_loss;
  model::Parameters params;
};

/// Training loop: sample batch, forward_lm on one tape (mean over the
/// batch), backward, route_and_step with the step's scheduled lr. Logs every
/// log_every steps and the final step. Throws NumericError on a non-finite
/// loss, naming the step. Writes nothing to disk.
TrainResult train(const RunConfig& config);

/// Mean loss over `batches` batches of the "eval" stream, no gradients.
double evaluate(const model::Parameters& params, const RunConfig& config, std::size_t batches);

/// The `lr` column reports the Muon rate in muon-hybrid mode and the AdamW
/// rate otherwise.
std::string loss_csv_text(const std::vector<LossRow>& rows);
std::vector<LossRow> parse_loss_csv(const std::string& text);
std::vector<LossRow> load_loss_csv(const std::filesystem::path& path);

struct CompareSummary {
  std::size_t first_step = 0;
  std::size_t last_step = 0;
  std::size_t rows = 0;
  double final_loss_a = 0.0;
  double final_loss_b = 0.0;
  double final_loss_delta = 0.0;  // a - b
  /// First step opening a run of 50 consecutive aligned points with a < b.
  std::optional<std::size_t> sustained_a_below_b_step;
};

struct CompareRow {
  std::size_t step = 0;
  double loss_a = 0.0;
  double loss_b = 0.0;
};

/// Aligns on common steps. DataError when the step sets are disjoint.
std::vector<CompareRow> align_losses(const std::vector<LossRow>& a, const std::vector<LossRow>& b);
CompareSummary summarize_comparison(const std::vector<CompareRow>& rows, std::size_t sustain = 50);
Json compare_summary_to_json(const CompareSummary& summary);

// Commands. Each returns an exit code and reports errors on `err`.

int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err);
int cmd_spectrum(const std::string& checkpoint_path, const std::string& selector, const std::string& out_path,
                 const std::optional<std::string>& against, std::ostream& out, std::ostream& err);
int cmd_simulate(const std::string& scenario_path, const std::optional<std::string>& sweep,
                 const std::optional<std::string>& trace_path, std::ostream& out, std::ostream& err);
int cmd_compare(const std::string& a_csv, const std::string& b_csv, std::ostream& out, std::ostream& err);

}  // namespace resbm::run

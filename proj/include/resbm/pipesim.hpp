#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace resbm::pipesim {

struct LinkModel {
  double bandwidth_bits_per_sec = 10e9;
  double latency_sec = 0.0;

  bool operator==(const LinkModel&) const = default;
  void validate() const;
};

struct StageModel {
  std::size_t stage_index = 0;
  double fwd_compute_sec = 0.0;  // per microbatch
  double bwd_compute_sec = 0.0;  // per microbatch
  std::uint64_t egress_payload_bytes_fwd = 0;  // 0 on the last stage
  std::uint64_t egress_payload_bytes_bwd = 0;  // 0 on the first stage
  /// Encoder/decoder cost added to both fwd and bwd compute.
  double codec_overhead_sec = 0.0;

  bool operator==(const StageModel&) const = default;
};

struct PipelineScenario {
  std::vector<StageModel> stages;
  LinkModel link;
  std::size_t microbatches = 1;
  std::size_t seq_len = 1024;
  std::vector<std::size_t> dims;  // one per boundary
  std::size_t wire_dtype_bytes = 2;
  double optimizer_step_sec = 0.0;  // added once after the last backward

  bool operator==(const PipelineScenario&) const = default;
  /// Also checks that stage payloads agree with dims. Throws ConfigError.
  void validate() const;
  std::size_t num_stages() const { return stages.size(); }
};

/// Fills stage payloads from dims, seq_len and wire_dtype_bytes.
void derive_payloads(PipelineScenario& scenario);

/// Uniform-compute scenario with payloads derived from dims.
PipelineScenario make_scenario(std::size_t num_stages, double fwd_sec, double bwd_sec, LinkModel link,
                               std::size_t microbatches, std::size_t seq_len, std::vector<std::size_t> dims,
                               std::size_t wire_dtype_bytes = 2);

enum class EventKind { Fwd, Bwd, Send, Recv, Idle };
std::string_view to_string(EventKind kind);

struct TraceEvent {
  double time_sec = 0.0;  // start
  double end_sec = 0.0;
  std::size_t stage = 0;
  EventKind kind = EventKind::Fwd;
  std::size_t microbatch = 0;  // unused for idle
  std::size_t boundary = 0;    // send/recv only
  bool backward = false;       // send/recv direction
  std::uint64_t bytes = 0;     // send/recv only
};

struct ScheduleTrace {
  std::vector<TraceEvent> events;  // ordered by (time, stage, kind)
  double step_time_sec = 0.0;
  double tokens_per_sec = 0.0;
  std::vector<std::uint64_t> boundary_bytes_sent;
  std::vector<std::uint64_t> boundary_bytes_received;
  std::vector<double> stage_busy_sec;
};

std::uint64_t boundary_payload_bytes(std::size_t seq_len, std::size_t dim, std::size_t dtype_bytes);

struct StepCommunication {
  std::uint64_t fwd_bytes = 0;
  std::uint64_t bwd_bytes = 0;
  std::uint64_t total_bytes = 0;
};
StepCommunication total_step_communication(const PipelineScenario& scenario);

double transfer_time(std::uint64_t bytes, const LinkModel& link);

/// "80Mbps", "800M", "10Gbps", "10G", "2.5e9". Throws ConfigError.
double parse_bandwidth(std::string_view text);

/// Synchronous GPipe step: every stage runs F0..F(m-1) then B(m-1)..B0.
/// Each boundary has independent FIFO channels per direction, and a send
/// overlaps the sender's next task.
ScheduleTrace simulate_step(const PipelineScenario& scenario);

/// (m + S - 1) * (fwd + bwd) for uniform stages and free communication.
double gpipe_closed_form(std::size_t num_stages, std::size_t microbatches, double fwd_sec, double bwd_sec);

struct SweepPoint {
  double bandwidth_bits_per_sec = 0.0;
  double tps_uncompressed = 0.0;
  double tps_compressed = 0.0;
  double gain = 0.0;
};

/// `base` holds the uncompressed dims; the compressed run swaps in
/// compressed_dims with identical compute. Needs at least two bandwidths.
std::vector<SweepPoint> bandwidth_sweep(const PipelineScenario& base, const std::vector<std::size_t>& compressed_dims,
                                        const std::vector<double>& bandwidths);

struct SquareCubeRow {
  std::size_t dim = 0;
  double compute_to_comm = 0.0;  // n^3 / n^2
  double relative = 0.0;         // normalized to the first row
};
std::vector<SquareCubeRow> square_cube_ratio(const std::vector<std::size_t>& dims);

// ---------------------------------------------------------------- preset

/// The 2B / 8-stage setting: L=1024, H=4096, bf16, one block per GPU.
struct Preset2B {
  static constexpr std::size_t kStages = 8;
  static constexpr std::size_t kSeqLen = 1024;
  static constexpr std::size_t kHidden = 4096;
  static constexpr std::size_t kCompressed = 32;
  static constexpr double kTargetTps = 7530.0;
  static constexpr double kCalibrationBandwidth = 10e9;
  static constexpr std::size_t kMicrobatches = 128;
  static constexpr double kBwdToFwd = 1.0;
};

/// Per-microbatch forward seconds such that the uncompressed scenario at
/// 10 Gbps with kMicrobatches runs at kTargetTps. Found by bisection.
double calibrate_preset_forward_sec();

/// dim: boundary width used at every boundary (kHidden or kCompressed).
/// microbatches defaults to kMicrobatches; 1 gives the single-sequence
/// accounting setting.
PipelineScenario preset_2b(std::size_t dim, double bandwidth_bits_per_sec,
                           std::optional<std::size_t> microbatches = std::nullopt);

// ---------------------------------------------------------------- I/O

nlohmann::json scenario_to_json(const PipelineScenario& scenario);
/// Accepts an explicit scenario or {"preset": "2b-8stage", ...} with optional
/// "dim", "link", "microbatches" overrides. Throws ConfigError.
PipelineScenario scenario_from_json(const nlohmann::json& j);
PipelineScenario load_scenario(const std::string& path);

/// Width of the uncompressed baseline for sweeps: "hidden_dim" when the
/// JSON gives it, otherwise the largest boundary dim.
std::size_t scenario_hidden_dim(const nlohmann::json& j, const PipelineScenario& scenario);

std::string trace_jsonl(const ScheduleTrace& trace);
/// Columns: bandwidth_bits_per_sec,tps_uncompressed,tps_compressed,gain
std::string sweep_csv(const std::vector<SweepPoint>& points);

}  // namespace resbm::pipesim

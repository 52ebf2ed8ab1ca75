#include "resbm/pipesim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <queue>
#include <sstream>
#include <tuple>

#include "resbm/error.hpp"
#include "resbm/serialize.hpp"

namespace resbm::pipesim {

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void LinkModel::validate() const {
  if (!(bandwidth_bits_per_sec > 0.0)) throw ConfigError("link.bandwidth_bits_per_sec: must be > 0");
  if (!(latency_sec >= 0.0) || !std::isfinite(latency_sec)) throw ConfigError("link.latency_sec: must be >= 0");
}

void PipelineScenario::validate() const {
  const std::size_t s = stages.size();
  if (s < 2) throw ConfigError("scenario.stages: need at least 2 stages");
  if (microbatches < 1) throw ConfigError("scenario.microbatches: must be >= 1");
  if (seq_len < 1) throw ConfigError("scenario.seq_len: must be >= 1");
  if (wire_dtype_bytes < 1) throw ConfigError("scenario.wire_dtype_bytes: must be >= 1");
  if (dims.size() != s - 1) {
    throw ConfigError("scenario.dims: expected " + std::to_string(s - 1) + " entries, got " +
                      std::to_string(dims.size()));
  }
  if (!(optimizer_step_sec >= 0.0)) throw ConfigError("scenario.optimizer_step_sec: must be >= 0");
  link.validate();
  for (std::size_t i = 0; i < s; ++i) {
    const StageModel& st = stages[i];
    const std::string where = "scenario.stages[" + std::to_string(i) + "]";
    if (st.stage_index != i) throw ConfigError(where + ".stage_index: expected " + std::to_string(i));
    if (!(st.fwd_compute_sec > 0.0) || !(st.bwd_compute_sec > 0.0)) {
      throw ConfigError(where + ": compute times must be > 0");
    }
    if (!(st.codec_overhead_sec >= 0.0)) throw ConfigError(where + ".codec_overhead_sec: must be >= 0");
    const std::uint64_t want_fwd = i + 1 < s ? boundary_payload_bytes(seq_len, dims[i], wire_dtype_bytes) : 0;
    const std::uint64_t want_bwd = i > 0 ? boundary_payload_bytes(seq_len, dims[i - 1], wire_dtype_bytes) : 0;
    if (st.egress_payload_bytes_fwd != want_fwd) {
      throw ConfigError(where + ".egress_payload_bytes_fwd: expected " + std::to_string(want_fwd));
    }
    if (st.egress_payload_bytes_bwd != want_bwd) {
      throw ConfigError(where + ".egress_payload_bytes_bwd: expected " + std::to_string(want_bwd));
    }
  }
}

void derive_payloads(PipelineScenario& scenario) {
  const std::size_t s = scenario.stages.size();
  if (scenario.dims.size() + 1 != s) {
    throw ConfigError("scenario.dims: expected " + std::to_string(s == 0 ? 0 : s - 1) + " entries");
  }
  for (std::size_t i = 0; i < s; ++i) {
    StageModel& st = scenario.stages[i];
    st.stage_index = i;
    st.egress_payload_bytes_fwd =
        i + 1 < s ? boundary_payload_bytes(scenario.seq_len, scenario.dims[i], scenario.wire_dtype_bytes) : 0;
    st.egress_payload_bytes_bwd =
        i > 0 ? boundary_payload_bytes(scenario.seq_len, scenario.dims[i - 1], scenario.wire_dtype_bytes) : 0;
  }
}

PipelineScenario make_scenario(std::size_t num_stages, double fwd_sec, double bwd_sec, LinkModel link,
                               std::size_t microbatches, std::size_t seq_len, std::vector<std::size_t> dims,
                               std::size_t wire_dtype_bytes) {
  PipelineScenario sc;
  sc.stages.resize(num_stages);
  for (auto& st : sc.stages) {
    st.fwd_compute_sec = fwd_sec;
    st.bwd_compute_sec = bwd_sec;
  }
  sc.link = link;
  sc.microbatches = microbatches;
  sc.seq_len = seq_len;
  sc.dims = std::move(dims);
  sc.wire_dtype_bytes = wire_dtype_bytes;
  derive_payloads(sc);
  sc.validate();
  return sc;
}

std::string_view to_string(EventKind kind) {
  switch (kind) {
    case EventKind::Fwd: return "fwd";
    case EventKind::Bwd: return "bwd";
    case EventKind::Send: return "send";
    case EventKind::Recv: return "recv";
    case EventKind::Idle: return "idle";
  }
  return "?";
}

std::uint64_t boundary_payload_bytes(std::size_t seq_len, std::size_t dim, std::size_t dtype_bytes) {
  return static_cast<std::uint64_t>(seq_len) * dim * dtype_bytes;
}

StepCommunication total_step_communication(const PipelineScenario& scenario) {
  StepCommunication c;
  for (const StageModel& st : scenario.stages) {
    c.fwd_bytes += st.egress_payload_bytes_fwd * scenario.microbatches;
    c.bwd_bytes += st.egress_payload_bytes_bwd * scenario.microbatches;
  }
  c.total_bytes = c.fwd_bytes + c.bwd_bytes;
  return c;
}

double transfer_time(std::uint64_t bytes, const LinkModel& link) {
  return link.latency_sec + 8.0 * static_cast<double>(bytes) / link.bandwidth_bits_per_sec;
}

double parse_bandwidth(std::string_view text) {
  std::string_view s = text;
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  for (std::string_view suffix : {"bps", "Bps"}) {
    if (s.size() > suffix.size() && s.ends_with(suffix)) {
      s.remove_suffix(suffix.size());
      break;
    }
  }
  double scale = 1.0;
  if (!s.empty()) {
    switch (s.back()) {
      case 'k': case 'K': scale = 1e3; s.remove_suffix(1); break;
      case 'M': scale = 1e6; s.remove_suffix(1); break;
      case 'G': case 'g': scale = 1e9; s.remove_suffix(1); break;
      default: break;
    }
  }
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !(value > 0.0) || !std::isfinite(value)) {
    throw ConfigError("bandwidth: cannot parse \"" + std::string(text) + "\"");
  }
  return value * scale;
}

// ---------------------------------------------------------------- engine

namespace {

struct Task {
  bool backward;
  std::size_t microbatch;
};

enum class Pending { ComputeDone, TransferDone };

struct QueueItem {
  double time;
  std::size_t stage;
  EventKind kind;
  std::uint64_t seq;
  Pending what;
  std::size_t microbatch;
  std::size_t boundary;  // TransferDone
  bool backward;

  bool operator>(const QueueItem& o) const {
    return std::tie(time, stage, kind, seq) > std::tie(o.time, o.stage, o.kind, o.seq);
  }
};

class Engine {
 public:
  explicit Engine(const PipelineScenario& sc)
      : sc_(sc),
        s_(sc.stages.size()),
        m_(sc.microbatches),
        next_(s_, 0),
        busy_(s_, false),
        free_at_(s_, 0.0),
        fwd_ready_(s_, std::vector<bool>(m_, false)),
        bwd_ready_(s_, std::vector<bool>(m_, false)),
        chan_free_fwd_(s_ - 1, 0.0),
        chan_free_bwd_(s_ - 1, 0.0) {
    tasks_.reserve(2 * m_);
    for (std::size_t j = 0; j < m_; ++j) tasks_.push_back({false, j});
    for (std::size_t j = m_; j-- > 0;) tasks_.push_back({true, j});
    trace_.boundary_bytes_sent.assign(s_ - 1, 0);
    trace_.boundary_bytes_received.assign(s_ - 1, 0);
    trace_.stage_busy_sec.assign(s_, 0.0);
  }

  ScheduleTrace run() {
    for (std::size_t s = 0; s < s_; ++s) try_start(s, 0.0);
    while (!queue_.empty()) {
      const QueueItem it = queue_.top();
      queue_.pop();
      if (it.what == Pending::ComputeDone) {
        on_compute_done(it);
      } else {
        on_transfer_done(it);
      }
    }
    for (std::size_t s = 0; s < s_; ++s) {
      if (next_[s] != tasks_.size()) throw ContractError("simulate_step: stage " + std::to_string(s) + " stalled");
    }
    std::stable_sort(trace_.events.begin(), trace_.events.end(), [](const TraceEvent& a, const TraceEvent& b) {
      return std::tie(a.time_sec, a.stage, a.kind) < std::tie(b.time_sec, b.stage, b.kind);
    });
    trace_.step_time_sec = last_bwd_end_ + sc_.optimizer_step_sec;
    trace_.tokens_per_sec = static_cast<double>(m_ * sc_.seq_len) / trace_.step_time_sec;
    return std::move(trace_);
  }

 private:
  void push(double time, std::size_t stage, EventKind kind, Pending what, std::size_t mb, std::size_t boundary,
            bool backward) {
    queue_.push(QueueItem{time, stage, kind, seq_++, what, mb, boundary, backward});
  }

  void try_start(std::size_t s, double now) {
    if (busy_[s] || next_[s] == tasks_.size()) return;
    const Task task = tasks_[next_[s]];
    const bool ready = task.backward ? (s + 1 == s_ || bwd_ready_[s][task.microbatch])
                                     : (s == 0 || fwd_ready_[s][task.microbatch]);
    if (!ready) return;
    if (now > free_at_[s]) {
      trace_.events.push_back(TraceEvent{free_at_[s], now, s, EventKind::Idle, 0, 0, false, 0});
    }
    const StageModel& st = sc_.stages[s];
    const double dur = (task.backward ? st.bwd_compute_sec : st.fwd_compute_sec) + st.codec_overhead_sec;
    const EventKind kind = task.backward ? EventKind::Bwd : EventKind::Fwd;
    trace_.events.push_back(TraceEvent{now, now + dur, s, kind, task.microbatch, 0, false, 0});
    trace_.stage_busy_sec[s] += dur;
    busy_[s] = true;
    ++next_[s];
    push(now + dur, s, kind, Pending::ComputeDone, task.microbatch, 0, task.backward);
  }

  void on_compute_done(const QueueItem& it) {
    const std::size_t s = it.stage;
    busy_[s] = false;
    free_at_[s] = it.time;
    if (!it.backward && s + 1 < s_) {
      send(s, s, false, it.microbatch, sc_.stages[s].egress_payload_bytes_fwd, it.time);
    } else if (it.backward && s > 0) {
      send(s, s - 1, true, it.microbatch, sc_.stages[s].egress_payload_bytes_bwd, it.time);
    }
    if (it.backward) last_bwd_end_ = std::max(last_bwd_end_, it.time);
    try_start(s, it.time);
  }

  void send(std::size_t stage, std::size_t boundary, bool backward, std::size_t mb, std::uint64_t bytes, double now) {
    double& chan = backward ? chan_free_bwd_[boundary] : chan_free_fwd_[boundary];
    const double start = std::max(now, chan);
    const double end = start + transfer_time(bytes, sc_.link);
    chan = end;
    trace_.events.push_back(TraceEvent{start, end, stage, EventKind::Send, mb, boundary, backward, bytes});
    trace_.boundary_bytes_sent[boundary] += bytes;
    const std::size_t receiver = backward ? boundary : boundary + 1;
    push(end, receiver, EventKind::Recv, Pending::TransferDone, mb, boundary, backward);
  }

  void on_transfer_done(const QueueItem& it) {
    const std::size_t r = it.stage;
    const StageModel& sender = sc_.stages[it.backward ? r + 1 : r - 1];
    const std::uint64_t bytes = it.backward ? sender.egress_payload_bytes_bwd : sender.egress_payload_bytes_fwd;
    trace_.events.push_back(TraceEvent{it.time, it.time, r, EventKind::Recv, it.microbatch, it.boundary, it.backward, bytes});
    trace_.boundary_bytes_received[it.boundary] += bytes;
    (it.backward ? bwd_ready_ : fwd_ready_)[r][it.microbatch] = true;
    try_start(r, it.time);
  }

  const PipelineScenario& sc_;
  std::size_t s_;
  std::size_t m_;
  std::vector<Task> tasks_;
  std::vector<std::size_t> next_;
  std::vector<bool> busy_;
  std::vector<double> free_at_;
  std::vector<std::vector<bool>> fwd_ready_;
  std::vector<std::vector<bool>> bwd_ready_;
  std::vector<double> chan_free_fwd_;
  std::vector<double> chan_free_bwd_;
  std::priority_queue<QueueItem, std::vector<QueueItem>, std::greater<>> queue_;
  std::uint64_t seq_ = 0;
  double last_bwd_end_ = 0.0;
  ScheduleTrace trace_;
};

}  // namespace

ScheduleTrace simulate_step(const PipelineScenario& scenario) {
  scenario.validate();
  return Engine(scenario).run();
}

double gpipe_closed_form(std::size_t num_stages, std::size_t microbatches, double fwd_sec, double bwd_sec) {
  return static_cast<double>(microbatches + num_stages - 1) * (fwd_sec + bwd_sec);
}

std::vector<SweepPoint> bandwidth_sweep(const PipelineScenario& base, const std::vector<std::size_t>& compressed_dims,
                                        const std::vector<double>& bandwidths) {
  if (bandwidths.size() < 2) throw ConfigError("sweep: need at least 2 bandwidth points");
  PipelineScenario compressed = base;
  compressed.dims = compressed_dims;
  derive_payloads(compressed);
  std::vector<SweepPoint> out;
  for (double bw : bandwidths) {
    PipelineScenario a = base;
    PipelineScenario b = compressed;
    a.link.bandwidth_bits_per_sec = bw;
    b.link.bandwidth_bits_per_sec = bw;
    const double ta = simulate_step(a).tokens_per_sec;
    const double tb = simulate_step(b).tokens_per_sec;
    out.push_back(SweepPoint{bw, ta, tb, tb / ta});
  }
  return out;
}

std::vector<SquareCubeRow> square_cube_ratio(const std::vector<std::size_t>& dims) {
  std::vector<SquareCubeRow> rows;
  for (std::size_t n : dims) {
    if (n == 0) throw ContractError("square_cube_ratio: dims must be positive");
    const double d = static_cast<double>(n);
    rows.push_back(SquareCubeRow{n, (d * d * d) / (d * d), 0.0});
  }
  for (auto& r : rows) r.relative = r.compute_to_comm / rows.front().compute_to_comm;
  return rows;
}

// ---------------------------------------------------------------- preset

namespace {

PipelineScenario preset_with(double fwd_sec, std::size_t dim, double bandwidth, std::size_t microbatches) {
  using P = Preset2B;
  return make_scenario(P::kStages, fwd_sec, fwd_sec * P::kBwdToFwd, LinkModel{bandwidth, 0.0}, microbatches,
                       P::kSeqLen, std::vector<std::size_t>(P::kStages - 1, dim), 2);
}

}  // namespace

double calibrate_preset_forward_sec() {
  static const double value = [] {
    using P = Preset2B;
    auto tps = [](double c) {
      return simulate_step(preset_with(c, P::kHidden, P::kCalibrationBandwidth, P::kMicrobatches)).tokens_per_sec;
    };
    double lo = 1e-6;
    double hi = 10.0;
    for (int i = 0; i < 200 && hi - lo > 1e-15 * hi; ++i) {
      const double mid = 0.5 * (lo + hi);
      (tps(mid) > P::kTargetTps ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
  }();
  return value;
}

PipelineScenario preset_2b(std::size_t dim, double bandwidth_bits_per_sec, std::optional<std::size_t> microbatches) {
  return preset_with(calibrate_preset_forward_sec(), dim, bandwidth_bits_per_sec,
                     microbatches.value_or(Preset2B::kMicrobatches));
}

// ---------------------------------------------------------------- I/O

nlohmann::json scenario_to_json(const PipelineScenario& scenario) {
  Json stages = Json::array();
  for (const StageModel& st : scenario.stages) {
    stages.push_back(Json{{"stage_index", st.stage_index},
                          {"fwd_compute_sec", st.fwd_compute_sec},
                          {"bwd_compute_sec", st.bwd_compute_sec},
                          {"egress_payload_bytes_fwd", st.egress_payload_bytes_fwd},
                          {"egress_payload_bytes_bwd", st.egress_payload_bytes_bwd},
                          {"codec_overhead_sec", st.codec_overhead_sec}});
  }
  return Json{{"stages", stages},
              {"link",
               {{"bandwidth_bits_per_sec", scenario.link.bandwidth_bits_per_sec},
                {"latency_sec", scenario.link.latency_sec}}},
              {"microbatches", scenario.microbatches},
              {"seq_len", scenario.seq_len},
              {"dims", scenario.dims},
              {"wire_dtype_bytes", scenario.wire_dtype_bytes},
              {"optimizer_step_sec", scenario.optimizer_step_sec}};
}

namespace {

LinkModel link_from_json(const Json& j, const std::string& path) {
  LinkModel link;
  link.bandwidth_bits_per_sec = json_field::require<double>(j, "bandwidth_bits_per_sec", path);
  link.latency_sec = json_field::optional<double>(j, "latency_sec", path, 0.0);
  return link;
}

std::vector<std::size_t> dims_from_json(const Json& j) {
  if (!j.contains("dims") || !j.at("dims").is_array()) throw ConfigError("scenario.dims: expected array");
  std::vector<std::size_t> dims;
  for (const Json& d : j.at("dims")) {
    if (!d.is_number_integer() || d.get<std::int64_t>() < 0) throw ConfigError("scenario.dims: expected non-negative integers");
    dims.push_back(d.get<std::size_t>());
  }
  return dims;
}

}  // namespace

PipelineScenario scenario_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("scenario: expected object");
  const std::string path = "scenario";
  if (j.contains("preset")) {
    const auto name = json_field::require<std::string>(j, "preset", path);
    if (name != "2b-8stage") throw ConfigError("scenario.preset: unknown preset \"" + name + "\"");
    const auto dim = json_field::optional<std::size_t>(j, "dim", path, Preset2B::kHidden);
    const auto m = json_field::optional<std::size_t>(j, "microbatches", path, Preset2B::kMicrobatches);
    LinkModel link{Preset2B::kCalibrationBandwidth, 0.0};
    if (j.contains("link")) link = link_from_json(json_field::object(j, "link", path), path + ".link");
    PipelineScenario sc = preset_2b(dim, link.bandwidth_bits_per_sec, m);
    sc.link = link;
    sc.optimizer_step_sec = json_field::optional<double>(j, "optimizer_step_sec", path, 0.0);
    sc.validate();
    return sc;
  }

  PipelineScenario sc;
  sc.link = link_from_json(json_field::object(j, "link", path), path + ".link");
  sc.microbatches = json_field::require<std::size_t>(j, "microbatches", path);
  sc.seq_len = json_field::require<std::size_t>(j, "seq_len", path);
  sc.wire_dtype_bytes = json_field::optional<std::size_t>(j, "wire_dtype_bytes", path, 2);
  sc.optimizer_step_sec = json_field::optional<double>(j, "optimizer_step_sec", path, 0.0);
  sc.dims = dims_from_json(j);
  if (!j.contains("stages") || !j.at("stages").is_array()) throw ConfigError("scenario.stages: expected array");
  const Json& stages = j.at("stages");
  sc.stages.resize(stages.size());
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string where = path + ".stages[" + std::to_string(i) + "]";
    StageModel& st = sc.stages[i];
    st.fwd_compute_sec = json_field::require<double>(stages[i], "fwd_compute_sec", where);
    st.bwd_compute_sec = json_field::require<double>(stages[i], "bwd_compute_sec", where);
    st.codec_overhead_sec = json_field::optional<double>(stages[i], "codec_overhead_sec", where, 0.0);
  }
  if (sc.stages.size() < 2) throw ConfigError("scenario.stages: need at least 2 stages");
  derive_payloads(sc);
  // Explicit fields must agree with what the dims imply.
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string where = path + ".stages[" + std::to_string(i) + "]";
    StageModel& st = sc.stages[i];
    if (stages[i].contains("stage_index")) {
      st.stage_index = json_field::require<std::size_t>(stages[i], "stage_index", where);
    }
    if (stages[i].contains("egress_payload_bytes_fwd")) {
      st.egress_payload_bytes_fwd = json_field::require<std::size_t>(stages[i], "egress_payload_bytes_fwd", where);
    }
    if (stages[i].contains("egress_payload_bytes_bwd")) {
      st.egress_payload_bytes_bwd = json_field::require<std::size_t>(stages[i], "egress_payload_bytes_bwd", where);
    }
  }
  sc.validate();
  return sc;
}

PipelineScenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read scenario " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("scenario " + path + ": " + e.what());
  }
  return scenario_from_json(j);
}

std::size_t scenario_hidden_dim(const nlohmann::json& j, const PipelineScenario& scenario) {
  if (j.is_object() && j.contains("hidden_dim")) {
    return json_field::require<std::size_t>(j, "hidden_dim", "scenario");
  }
  if (j.is_object() && j.contains("preset")) return Preset2B::kHidden;
  return *std::max_element(scenario.dims.begin(), scenario.dims.end());
}

std::string trace_jsonl(const ScheduleTrace& trace) {
  std::string out;
  for (const TraceEvent& e : trace.events) {
    Json line{{"time_sec", e.time_sec}, {"end_sec", e.end_sec}, {"stage", e.stage},
              {"kind", std::string(to_string(e.kind))}};
    if (e.kind != EventKind::Idle) line["microbatch"] = e.microbatch;
    if (e.kind == EventKind::Send || e.kind == EventKind::Recv) {
      line["boundary"] = e.boundary;
      line["direction"] = e.backward ? "bwd" : "fwd";
      line["bytes"] = e.bytes;
    }
    out += line.dump();
    out += '\n';
  }
  return out;
}

std::string sweep_csv(const std::vector<SweepPoint>& points) {
  std::string out = "bandwidth_bits_per_sec,tps_uncompressed,tps_compressed,gain\n";
  for (const auto& p : points) {
    out += fmt_double(p.bandwidth_bits_per_sec) + "," + fmt_double(p.tps_uncompressed) + "," +
           fmt_double(p.tps_compressed) + "," + fmt_double(p.gain) + "\n";
  }
  return out;
}

}  // namespace resbm::pipesim

#include "resbm/run.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "resbm/checkpoint.hpp"
#include "resbm/data.hpp"
#include "resbm/error.hpp"
#include "resbm/pipesim.hpp"
#include "resbm/spectral.hpp"

namespace resbm::run {

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

Json schedule_to_json(const optim::LrSchedule& s) {
  return Json{{"peak_lr", s.peak_lr},
              {"warmup_steps", s.warmup_steps},
              {"total_steps", s.total_steps},
              {"final_fraction", s.final_fraction}};
}

optim::LrSchedule schedule_from_json(const Json& parent, const std::string& path, optim::LrSchedule fallback,
                                     std::size_t steps) {
  using json_field::optional;
  fallback.total_steps = steps;
  fallback.warmup_steps = std::min<std::size_t>(fallback.warmup_steps, steps / 10);
  if (!parent.contains("schedule")) return fallback;
  const std::string where = path + ".schedule";
  const Json& j = json_field::object(parent, "schedule", path);
  optim::LrSchedule s;
  s.peak_lr = optional<double>(j, "peak_lr", where, fallback.peak_lr);
  s.warmup_steps = optional<std::size_t>(j, "warmup_steps", where, fallback.warmup_steps);
  s.total_steps = optional<std::size_t>(j, "total_steps", where, steps);
  s.final_fraction = optional<double>(j, "final_fraction", where, fallback.final_fraction);
  return s;
}

void check_schedule(const optim::LrSchedule& s, std::size_t steps, const std::string& path) {
  if (s.total_steps != steps) {
    throw ConfigError(path + ".total_steps: must equal steps (" + std::to_string(steps) + "), got " +
                      std::to_string(s.total_steps));
  }
  if (steps == 0) return;
  try {
    s.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::uint64_t seed_override(std::uint64_t seed) {
  const char* env = std::getenv("RESBM_SEED");
  if (env == nullptr || *env == '\0') return seed;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (errno != 0 || end == env || *end != '\0') throw ConfigError("RESBM_SEED: expected unsigned integer");
  return v;
}

double batch_loss_value(const model::Parameters& params, const model::ModelConfig& config, const data::Batch& batch,
                        Tensor* out) {
  Tensor total;
  for (std::size_t b = 0; b < batch.rows.size(); ++b) {
    const auto& w = batch.rows[b];
    Tensor loss = model::forward_lm(w.inputs, w.targets, params, config).loss;
    total = b == 0 ? loss : add(total, loss);
  }
  Tensor mean_loss = scale(total, 1.0 / static_cast<double>(batch.rows.size()));
  if (out != nullptr) *out = mean_loss;
  return mean_loss.item();
}

void make_parent_dirs(const std::filesystem::path& path) {
  const auto parent = path.parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(parent, ec);
  if (ec) throw DataError("cannot create directory " + parent.string() + ": " + ec.message());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  make_parent_dirs(path);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
  if (!f) throw DataError("short write on " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const Json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitInput;
  }
}

}  // namespace

// ---------------------------------------------------------------- config

void RunConfig::validate() const {
  model.validate();
  if (data.batch_size == 0) throw ConfigError("data.batch_size: must be >= 1");
  if (data.corpus.empty()) throw ConfigError("data.corpus: must not be empty");
  if (log_every == 0) throw ConfigError("log_every: must be >= 1");
  if (loss_csv.empty()) throw ConfigError("output.loss_csv: must not be empty");
  if (checkpoint.empty()) throw ConfigError("output.checkpoint: must not be empty");
  if (optimizer.muon.ns_iterations < 1) throw ConfigError("optimizer.muon.ns_iterations: must be >= 1");
  const auto check_unit = [](double v, const char* where) {
    if (!(v >= 0.0 && v < 1.0)) throw ConfigError(std::string(where) + ": must lie in [0, 1)");
  };
  check_unit(optimizer.adamw.beta1, "optimizer.adamw.beta1");
  check_unit(optimizer.adamw.beta2, "optimizer.adamw.beta2");
  check_unit(optimizer.muon.momentum, "optimizer.muon.momentum");
  if (!(optimizer.adamw.eps > 0.0)) throw ConfigError("optimizer.adamw.eps: must be > 0");
  if (!(optimizer.adamw.weight_decay >= 0.0)) throw ConfigError("optimizer.adamw.weight_decay: must be >= 0");
  if (!(optimizer.muon.weight_decay >= 0.0)) throw ConfigError("optimizer.muon.weight_decay: must be >= 0");
  check_schedule(optimizer.adamw.schedule, steps, "optimizer.adamw.schedule");
  check_schedule(optimizer.muon.schedule, steps, "optimizer.muon.schedule");
}

RunConfig default_run_config(std::size_t steps, optim::Mode mode, bool compressed) {
  RunConfig c;
  c.model = model::ModelConfig::toy(compressed);
  c.optimizer.mode = mode;
  c.steps = steps;
  const std::size_t warmup = std::min<std::size_t>(100, steps / 10);
  c.optimizer.adamw.schedule.total_steps = steps;
  c.optimizer.adamw.schedule.warmup_steps = warmup;
  c.optimizer.muon.schedule.total_steps = steps;
  c.optimizer.muon.schedule.warmup_steps = warmup;
  return c;
}

Json run_config_to_json(const RunConfig& c) {
  const auto& a = c.optimizer.adamw;
  const auto& m = c.optimizer.muon;
  return Json{
      {"model", model_config_to_json(c.model)},
      {"optimizer",
       {{"mode", std::string(optim::to_string(c.optimizer.mode))},
        {"adamw",
         {{"beta1", a.beta1},
          {"beta2", a.beta2},
          {"eps", a.eps},
          {"weight_decay", a.weight_decay},
          {"schedule", schedule_to_json(a.schedule)}}},
        {"muon",
         {{"momentum", m.momentum},
          {"weight_decay", m.weight_decay},
          {"ns_iterations", m.ns_iterations},
          {"schedule", schedule_to_json(m.schedule)}}}}},
      {"data", {{"corpus", c.data.corpus}, {"batch_size", c.data.batch_size}, {"seed", c.data.seed}}},
      {"steps", c.steps},
      {"log_every", c.log_every},
      {"eval_batches", c.eval_batches},
      {"output", {{"loss_csv", c.loss_csv}, {"checkpoint", c.checkpoint}}}};
}

RunConfig run_config_from_json(const Json& j) {
  using json_field::optional;
  using json_field::require;
  if (!j.is_object()) throw ConfigError("config: expected object");
  RunConfig c;
  c.model = model_config_from_json(json_field::object(j, "model", ""), "model");
  c.steps = require<std::size_t>(j, "steps", "");
  c.log_every = optional<std::size_t>(j, "log_every", "", c.log_every);
  c.eval_batches = optional<std::size_t>(j, "eval_batches", "", 0);

  const Json& opt = json_field::object(j, "optimizer", "");
  c.optimizer.mode = optim::mode_from_string(require<std::string>(opt, "mode", "optimizer"));
  const Json empty = Json::object();
  const Json& a = opt.contains("adamw") ? json_field::object(opt, "adamw", "optimizer") : empty;
  const Json& m = opt.contains("muon") ? json_field::object(opt, "muon", "optimizer") : empty;
  AdamWConfig ad;
  ad.beta1 = optional<double>(a, "beta1", "optimizer.adamw", ad.beta1);
  ad.beta2 = optional<double>(a, "beta2", "optimizer.adamw", ad.beta2);
  ad.eps = optional<double>(a, "eps", "optimizer.adamw", ad.eps);
  ad.weight_decay = optional<double>(a, "weight_decay", "optimizer.adamw", ad.weight_decay);
  ad.schedule = schedule_from_json(a, "optimizer.adamw", ad.schedule, c.steps);
  MuonConfig mu;
  mu.momentum = optional<double>(m, "momentum", "optimizer.muon", mu.momentum);
  mu.weight_decay = optional<double>(m, "weight_decay", "optimizer.muon", mu.weight_decay);
  mu.ns_iterations = static_cast<int>(
      optional<std::int64_t>(m, "ns_iterations", "optimizer.muon", static_cast<std::int64_t>(mu.ns_iterations)));
  mu.schedule = schedule_from_json(m, "optimizer.muon", mu.schedule, c.steps);
  c.optimizer.adamw = ad;
  c.optimizer.muon = mu;

  const Json& d = json_field::object(j, "data", "");
  c.data.corpus = optional<std::string>(d, "corpus", "data", c.data.corpus);
  c.data.batch_size = optional<std::size_t>(d, "batch_size", "data", c.data.batch_size);
  c.data.seed = require<std::uint64_t>(d, "seed", "data");

  if (j.contains("output")) {
    const Json& o = json_field::object(j, "output", "");
    c.loss_csv = optional<std::string>(o, "loss_csv", "output", c.loss_csv);
    c.checkpoint = optional<std::string>(o, "checkpoint", "output", c.checkpoint);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

optim::OptimizerStates make_optimizer_states(const OptimizerConfig& config) {
  optim::OptimizerStates st;
  st.adamw.beta1 = config.adamw.beta1;
  st.adamw.beta2 = config.adamw.beta2;
  st.adamw.eps = config.adamw.eps;
  st.adamw.weight_decay = config.adamw.weight_decay;
  st.adamw.schedule = config.adamw.schedule;
  st.muon.momentum = config.muon.momentum;
  st.muon.weight_decay = config.muon.weight_decay;
  st.muon.ns.iterations = config.muon.ns_iterations;
  st.muon.schedule = config.muon.schedule;
  return st;
}

// ---------------------------------------------------------------- training

TrainResult train(const RunConfig& config) {
  config.validate();
  const auto corpus =
      std::make_shared<const data::Corpus>(data::load_corpus(config.data.corpus, config.model.context_len));
  data::BatchStream stream(corpus, config.model.context_len, config.data.batch_size, config.data.seed);

  TrainResult result;
  result.params = model::init_parameters(config.model, config.data.seed);
  optim::OptimizerStates states = make_optimizer_states(config.optimizer);
  // Fail on an unroutable parameter before any compute.
  (void)optim::route(result.params, config.optimizer.mode);

  const auto t0 = std::chrono::steady_clock::now();
  const std::uint64_t tokens_per_step = config.data.batch_size * config.model.context_len;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const data::Batch batch = stream.next_batch();
    result.params.zero_grad();
    Tape tape;
    double loss_value = 0.0;
    {
      Tape::Scope scope(tape);
      Tensor loss;
      loss_value = batch_loss_value(result.params, config.model, batch, &loss);
      if (!std::isfinite(loss_value)) {
        throw NumericError("non-finite loss at step " + std::to_string(step));
      }
      tape.backward(loss);
    }
    try {
      optim::route_and_step(result.params, config.optimizer.mode, states, step);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    if (step % config.log_every == 0 || step == config.steps) {
      const auto& sched = config.optimizer.mode == optim::Mode::MuonHybrid ? config.optimizer.muon.schedule
                                                                          : config.optimizer.adamw.schedule;
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      result.rows.push_back(LossRow{step, step * tokens_per_step, loss_value, optim::lr_at(sched, step), wall});
    }
  }
  if (config.eval_batches > 0) result.eval_loss = evaluate(result.params, config, config.eval_batches);
  return result;
}

double evaluate(const model::Parameters& params, const RunConfig& config, std::size_t batches) {
  const auto corpus =
      std::make_shared<const data::Corpus>(data::load_corpus(config.data.corpus, config.model.context_len));
  data::BatchStream stream(corpus, config.model.context_len, config.data.batch_size, config.data.seed, "eval");
  double total = 0.0;
  for (std::size_t i = 0; i < batches; ++i) {
    total += batch_loss_value(params, config.model, stream.next_batch(), nullptr);
  }
  return total / static_cast<double>(batches);
}

// ---------------------------------------------------------------- loss CSV

std::string loss_csv_text(const std::vector<LossRow>& rows) {
  std::string out = "step,tokens,loss,lr,wall_sec\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.tokens) + "," + fmt_double(r.loss) + "," +
           fmt_double(r.lr) + "," + fmt_double(r.wall_sec) + "\n";
  }
  return out;
}

std::vector<LossRow> parse_loss_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("step,tokens,loss,lr,wall_sec", 0) != 0) {
    throw DataError("loss CSV: expected header step,tokens,loss,lr,wall_sec");
  }
  std::vector<LossRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string f[5];
    for (auto& field : f) {
      if (!std::getline(ls, field, ',')) throw DataError("loss CSV line " + std::to_string(lineno) + ": too few fields");
    }
    try {
      rows.push_back(LossRow{std::stoull(f[0]), std::stoull(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4])});
    } catch (const std::exception&) {
      throw DataError("loss CSV line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::vector<LossRow> load_loss_csv(const std::filesystem::path& path) { return parse_loss_csv(read_text(path)); }

// ---------------------------------------------------------------- compare

std::vector<CompareRow> align_losses(const std::vector<LossRow>& a, const std::vector<LossRow>& b) {
  std::vector<CompareRow> rows;
  std::size_t j = 0;
  for (const auto& ra : a) {
    while (j < b.size() && b[j].step < ra.step) ++j;
    if (j < b.size() && b[j].step == ra.step) rows.push_back(CompareRow{ra.step, ra.loss, b[j].loss});
  }
  if (rows.empty()) throw DataError("compare: the two runs share no logged step");
  return rows;
}

CompareSummary summarize_comparison(const std::vector<CompareRow>& rows, std::size_t sustain) {
  if (rows.empty()) throw ContractError("summarize_comparison: no rows");
  CompareSummary s;
  s.first_step = rows.front().step;
  s.last_step = rows.back().step;
  s.rows = rows.size();
  s.final_loss_a = rows.back().loss_a;
  s.final_loss_b = rows.back().loss_b;
  s.final_loss_delta = s.final_loss_a - s.final_loss_b;
  std::size_t run = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    run = rows[i].loss_a < rows[i].loss_b ? run + 1 : 0;
    if (run == sustain) {
      s.sustained_a_below_b_step = rows[i + 1 - sustain].step;
      break;
    }
  }
  return s;
}

Json compare_summary_to_json(const CompareSummary& s) {
  Json j{{"first_step", s.first_step},
         {"last_step", s.last_step},
         {"rows", s.rows},
         {"final_loss_a", s.final_loss_a},
         {"final_loss_b", s.final_loss_b},
         {"final_loss_delta", s.final_loss_delta}};
  j["sustained_a_below_b_step"] =
      s.sustained_a_below_b_step ? Json(*s.sustained_a_below_b_step) : Json(nullptr);
  return j;
}

// ---------------------------------------------------------------- commands

int cmd_train(const std::string& config_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig config = load_run_config(config_path);
    config.data.seed = seed_override(config.data.seed);
    make_parent_dirs(config.loss_csv);
    make_parent_dirs(config.checkpoint);
    TrainResult result = train(config);
    write_text(config.loss_csv, loss_csv_text(result.rows));
    model::save_checkpoint(config.checkpoint, model::Checkpoint{config.model, result.params, config.steps});
    Json summary{{"steps", config.steps}, {"loss_csv", config.loss_csv}, {"checkpoint", config.checkpoint}};
    if (!result.rows.empty()) summary["final_loss"] = result.rows.back().loss;
    if (result.eval_loss) summary["eval_loss"] = *result.eval_loss;
    out << summary.dump() << "\n";
    return kExitOk;
  });
}

int cmd_spectrum(const std::string& checkpoint_path, const std::string& selector, const std::string& out_path,
                 const std::optional<std::string>& against, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const spectral::Selector sel = spectral::selector_from_string(selector);
    const model::Checkpoint ck = model::load_checkpoint(checkpoint_path);
    const spectral::SpectralReport report = spectral::analyze_checkpoint(ck, sel);

    std::filesystem::path json_path = out_path;
    std::filesystem::path csv_path = out_path;
    if (json_path.extension() == ".csv") {
      json_path.replace_extension(".json");
    } else {
      csv_path.replace_extension(".csv");
    }
    write_text(json_path, spectral::report_to_json(report).dump(2) + "\n");
    write_text(csv_path, spectral::spectra_csv(report));

    if (against) {
      const spectral::SpectralReport other = spectral::analyze_checkpoint(model::load_checkpoint(*against), sel);
      out << spectral::comparison_csv(spectral::compare_reports(report, other));
    } else {
      out << Json{{"records", report.records.size()},
                  {"mean_effective_rank", report.mean_effective_rank},
                  {"json", json_path.string()},
                  {"csv", csv_path.string()}}
                 .dump()
          << "\n";
    }
    return kExitOk;
  });
}

int cmd_simulate(const std::string& scenario_path, const std::optional<std::string>& sweep,
                 const std::optional<std::string>& trace_path, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    Json j;
    try {
      j = Json::parse(read_text(scenario_path));
    } catch (const Json::exception& e) {
      throw ConfigError("scenario " + scenario_path + ": " + e.what());
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    const pipesim::PipelineScenario scenario = pipesim::scenario_from_json(j);

    if (sweep) {
      std::vector<double> bandwidths;
      std::istringstream ss(*sweep);
      std::string item;
      while (std::getline(ss, item, ',')) bandwidths.push_back(pipesim::parse_bandwidth(item));
      const std::size_t hidden = pipesim::scenario_hidden_dim(j, scenario);
      pipesim::PipelineScenario base = scenario;
      base.dims.assign(scenario.dims.size(), hidden);
      pipesim::derive_payloads(base);
      out << pipesim::sweep_csv(pipesim::bandwidth_sweep(base, scenario.dims, bandwidths));
      return kExitOk;
    }

    const pipesim::ScheduleTrace trace = pipesim::simulate_step(scenario);
    const auto comm = pipesim::total_step_communication(scenario);
    std::filesystem::path tpath = trace_path ? std::filesystem::path(*trace_path)
                                             : std::filesystem::path(std::filesystem::path(scenario_path).stem().string() + ".trace.jsonl");
    write_text(tpath, pipesim::trace_jsonl(trace));
    std::vector<std::uint64_t> per_boundary;
    for (std::size_t i = 0; i + 1 < scenario.stages.size(); ++i) {
      per_boundary.push_back(scenario.stages[i].egress_payload_bytes_fwd);
    }
    const double mib = 1024.0 * 1024.0;
    out << Json{{"tokens_per_sec", trace.tokens_per_sec},
                {"step_time_sec", trace.step_time_sec},
                {"microbatches", scenario.microbatches},
                {"boundary_fwd_bytes", per_boundary},
                {"fwd_bytes", comm.fwd_bytes},
                {"bwd_bytes", comm.bwd_bytes},
                {"total_bytes", comm.total_bytes},
                {"total_mib", static_cast<double>(comm.total_bytes) / mib},
                {"trace", tpath.string()}}
               .dump()
        << "\n";
    return kExitOk;
  });
}

int cmd_compare(const std::string& a_csv, const std::string& b_csv, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto rows = align_losses(load_loss_csv(a_csv), load_loss_csv(b_csv));
    out << "step,loss_a,loss_b,delta\n";
    for (const auto& r : rows) {
      out << r.step << "," << fmt_double(r.loss_a) << "," << fmt_double(r.loss_b) << ","
          << fmt_double(r.loss_a - r.loss_b) << "\n";
    }
    out << "\n" << compare_summary_to_json(summarize_comparison(rows)).dump() << "\n";
    return kExitOk;
  });
}

}  // namespace resbm::run

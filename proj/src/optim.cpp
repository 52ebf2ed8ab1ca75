#include "resbm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "resbm/error.hpp"
#include "resbm/linalg.hpp"

namespace resbm::optim {

namespace {

void check_finite(const model::Param& p) {
  for (double g : p.tensor.grad()) {
    if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + p.name);
  }
}

bool starts_with(std::string_view text, std::string_view prefix) {
  return text.substr(0, prefix.size()) == prefix;
}

}  // namespace

void LrSchedule::validate() const {
  if (!(peak_lr >= 0.0) || !std::isfinite(peak_lr)) throw ConfigError("schedule.peak_lr: must be finite and >= 0");
  if (!(final_fraction > 0.0 && final_fraction <= 1.0)) {
    throw ConfigError("schedule.final_fraction: must lie in (0, 1]");
  }
  if (warmup_steps >= total_steps) throw ConfigError("schedule.warmup_steps: must be < total_steps");
}

double lr_at(const LrSchedule& schedule, std::size_t step) {
  if (step > schedule.total_steps) {
    throw ContractError("lr_at: step " + std::to_string(step) + " beyond total_steps " +
                        std::to_string(schedule.total_steps));
  }
  const double peak = schedule.peak_lr;
  if (step < schedule.warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(schedule.warmup_steps);
  }
  const double floor = schedule.final_fraction * peak;
  const std::size_t decay_steps = schedule.total_steps - schedule.warmup_steps;
  if (decay_steps == 0) return peak;
  const double progress =
      static_cast<double>(step - schedule.warmup_steps) / static_cast<double>(decay_steps);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------- AdamW

void adamw_step(const ParamRefs& params, AdamWState& state, double lr) {
  for (const model::Param* p : params) check_finite(*p);
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (model::Param* p : params) {
    auto& mom = state.moments[p->name];
    const std::size_t n = p->tensor.numel();
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    }
    auto w = p->tensor.data();
    auto g = p->tensor.grad();
    for (std::size_t i = 0; i < n; ++i) {
      mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i];
      mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      w[i] -= lr * state.weight_decay * w[i] + lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

// ---------------------------------------------------------------- Muon

Tensor newton_schulz_orthogonalize(const Tensor& g, const NewtonSchulzConfig& config) {
  if (g.dim() != 2) throw DimensionError("newton_schulz: expected a matrix, got " + shape_str(g.shape()));
  for (double v : g.data()) {
    if (!std::isfinite(v)) throw NumericError("newton_schulz: non-finite input");
  }
  const double norm = frobenius_norm(g);
  if (norm == 0.0) return Tensor::zeros(g.shape());

  const bool tall = g.rows() > g.cols();
  Tensor x = tall ? transpose(g) : g.clone();
  x.set_requires_grad(false);
  for (double& v : x.data()) v /= norm + config.eps;

  for (int it = 0; it < config.iterations; ++it) {
    const auto& [a, b, c] = (it + 1 == config.iterations) ? config.final_coeffs : config.coeffs;
    Tensor gram = matmul_nt(x, x);
    Tensor poly = matmul(gram, gram);
    auto pd = poly.data();
    auto gd = gram.data();
    for (std::size_t i = 0; i < pd.size(); ++i) pd[i] = b * gd[i] + c * pd[i];
    Tensor update = matmul(poly, x);
    auto xd = x.data();
    auto ud = update.data();
    for (std::size_t i = 0; i < xd.size(); ++i) xd[i] = a * xd[i] + ud[i];
  }
  return tall ? transpose(x) : x;
}

Tensor newton_schulz_orthogonalize(const Tensor& g, int iterations) {
  NewtonSchulzConfig config;
  config.iterations = iterations;
  return newton_schulz_orthogonalize(g, config);
}

void muon_step(const ParamRefs& params, MuonState& state, double lr) {
  for (const model::Param* p : params) {
    if (p->kind != model::ParamKind::Matrix || p->tensor.dim() != 2) {
      throw RoutingError("muon: parameter " + p->name + " (" + std::string(model::to_string(p->kind)) +
                         ", shape " + shape_str(p->tensor.shape()) + ") is not a 2-D matrix");
    }
    check_finite(*p);
  }
  for (model::Param* p : params) {
    const std::size_t n = p->tensor.numel();
    auto& buf = state.buffers[p->name];
    if (buf.size() != n) buf.assign(n, 0.0);
    auto g = p->tensor.grad();
    for (std::size_t i = 0; i < n; ++i) buf[i] = state.momentum * buf[i] + g[i];

    Tensor momentum = Tensor::from(p->tensor.shape(), buf);
    Tensor ortho = newton_schulz_orthogonalize(momentum, state.ns);
    const double rows = static_cast<double>(p->tensor.rows());
    const double cols = static_cast<double>(p->tensor.cols());
    const double step_scale = lr * std::sqrt(std::max(1.0, rows / cols));
    auto w = p->tensor.data();
    auto o = ortho.data();
    for (std::size_t i = 0; i < n; ++i) {
      w[i] -= lr * state.weight_decay * w[i] + step_scale * o[i];
    }
  }
}

// ---------------------------------------------------------------- routing

std::string_view to_string(Mode mode) {
  return mode == Mode::AllAdamW ? "all-adamw" : "muon-hybrid";
}

Mode mode_from_string(std::string_view text) {
  if (text == "all-adamw") return Mode::AllAdamW;
  if (text == "muon-hybrid") return Mode::MuonHybrid;
  throw ConfigError("optimizer.mode: expected \"all-adamw\" or \"muon-hybrid\", got \"" +
                    std::string(text) + "\"");
}

Routes route(model::Parameters& params, Mode mode) {
  Routes routes;
  std::vector<std::string> unrouted;
  for (model::Param& p : params.entries()) {
    if (mode == Mode::AllAdamW) {
      routes.adamw.push_back(&p);
      continue;
    }
    switch (p.kind) {
      case model::ParamKind::Vector:
      case model::ParamKind::Embedding:
        routes.adamw.push_back(&p);
        break;
      case model::ParamKind::Matrix:
        if (starts_with(p.name, "block.") || starts_with(p.name, "boundary.")) {
          routes.muon.push_back(&p);
        } else {
          unrouted.push_back(p.name);
        }
        break;
    }
  }
  if (!unrouted.empty()) {
    std::string msg = "no optimizer route for:";
    for (const auto& name : unrouted) msg += " " + name;
    throw ConfigError(msg);
  }
  return routes;
}

void route_and_step(model::Parameters& params, Mode mode, OptimizerStates& states, std::size_t step) {
  Routes routes = route(params, mode);
  if (!routes.muon.empty()) muon_step(routes.muon, states.muon, lr_at(states.muon.schedule, step));
  if (!routes.adamw.empty()) adamw_step(routes.adamw, states.adamw, lr_at(states.adamw.schedule, step));
}

}  // namespace resbm::optim

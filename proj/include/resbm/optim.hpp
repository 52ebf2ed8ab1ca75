#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "resbm/model.hpp"

namespace resbm::optim {

/// Linear warmup from 0 to peak_lr, then cosine decay to
/// final_fraction * peak_lr at total_steps.
struct LrSchedule {
  double peak_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double final_fraction = 0.01;

  bool operator==(const LrSchedule&) const = default;
  void validate() const;
};

/// Throws ContractError when step lies outside [0, total_steps].
double lr_at(const LrSchedule& schedule, std::size_t step);

using ParamRefs = std::vector<model::Param*>;

struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  LrSchedule schedule{1e-3, 0, 1, 0.01};

  std::uint64_t t = 0;
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::map<std::string, Moments> moments;
};

/// One AdamW update with bias correction and decoupled weight decay:
///   p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)
/// Throws NumericError (naming the parameter) on a non-finite gradient.
void adamw_step(const ParamRefs& params, AdamWState& state, double lr);

struct NewtonSchulzConfig {
  int iterations = 5;
  /// Quintic X <- aX + b(XX^T)X + c(XX^T)^2 X for all but the last iteration.
  std::array<double, 3> coeffs{3.4445, -4.7750, 2.0315};
  /// Last iteration. The steep coefficients above oscillate in roughly
  /// [0.68, 1.2]; (15/8, -10/8, 3/8) has a flat fixed point at 1 and pulls
  /// the spectrum into [0.94, 1.03].
  std::array<double, 3> final_coeffs{15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0};
  double eps = 1e-7;
};

/// Approximates U V^T for G = U S V^T. Returns zeros for G == 0; throws
/// NumericError on non-finite entries.
Tensor newton_schulz_orthogonalize(const Tensor& g, const NewtonSchulzConfig& config = {});
Tensor newton_schulz_orthogonalize(const Tensor& g, int iterations);

struct MuonState {
  double momentum = 0.95;
  double weight_decay = 0.0;
  NewtonSchulzConfig ns;
  LrSchedule schedule{0.02, 0, 1, 0.1};

  std::map<std::string, std::vector<double>> buffers;
};

/// B <- mu B + g; O <- NS(B); p <- p - lr * sqrt(max(1, rows/cols)) * O.
/// Throws RoutingError if a parameter is not a 2-D matrix.
void muon_step(const ParamRefs& params, MuonState& state, double lr);

enum class Mode { AllAdamW, MuonHybrid };

std::string_view to_string(Mode mode);
/// "all-adamw" or "muon-hybrid"; anything else is a ConfigError.
Mode mode_from_string(std::string_view text);

struct Routes {
  ParamRefs adamw;
  ParamRefs muon;
};

/// muon-hybrid: block.* and boundary.* matrices go to Muon; embeddings,
/// unembedding, norm gains and other 1-D tensors go to AdamW. A matrix
/// outside those scopes has no route and raises ConfigError listing it.
Routes route(model::Parameters& params, Mode mode);

struct OptimizerStates {
  AdamWState adamw;
  MuonState muon;
};

/// Routes every parameter and applies one update, with each optimizer's
/// learning rate taken from its own schedule at `step`.
void route_and_step(model::Parameters& params, Mode mode, OptimizerStates& states, std::size_t step);

}  // namespace resbm::optim

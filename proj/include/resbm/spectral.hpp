#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "resbm/checkpoint.hpp"

namespace resbm::spectral {

/// sum(s_i^2) / max(s_i^2): 1 for a single dominant value, n for a flat
/// spectrum of length n, 0 for an all-zero spectrum. Throws ContractError on
/// empty or negative input.
double effective_rank(std::span<const double> singular_values);

enum class Selector {
  BottleneckOutput,  // boundary.<i>.encoder.w2, the h-dimensional output map
  FfnOutput,         // block.<i>.ffn.w_down, final block excluded
};

std::string_view to_string(Selector selector);
/// "bottleneck-output" or "ffn-output"; otherwise ConfigError.
Selector selector_from_string(std::string_view text);

struct LayerRecord {
  std::size_t layer_index = 0;  // 1-based block index owning the matrix
  std::string matrix_path;
  std::vector<double> singular_values;
  double effective_rank = 0.0;
  std::vector<double> normalized_spectrum;  // s_i / s_1
};

struct SpectralReport {
  Selector selector = Selector::BottleneckOutput;
  std::vector<LayerRecord> records;
  double mean_effective_rank = 0.0;
};

LayerRecord analyze_matrix(const Tensor& matrix, std::size_t layer_index, std::string path);

/// One record per selected matrix, in layer order. The final block is never
/// selected. ConfigError when nothing matches.
SpectralReport analyze_parameters(const model::Parameters& params, const model::ModelConfig& config,
                                  Selector selector);
SpectralReport analyze_checkpoint(const model::Checkpoint& checkpoint, Selector selector);

struct ComparisonRow {
  std::size_t layer_index = 0;
  double a = 0.0;
  double b = 0.0;
  double difference = 0.0;  // a - b
  double ratio = 0.0;       // a / b (infinity when b == 0 and a > 0, 1 when both 0)
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  ComparisonRow means;  // layer_index 0
};

/// Per-layer side-by-side effective ranks. ContractError on record-count
/// mismatch.
Comparison compare_reports(const SpectralReport& a, const SpectralReport& b);

nlohmann::json report_to_json(const SpectralReport& report);
/// Columns: layer,index,sigma_normalized
std::string spectra_csv(const SpectralReport& report);
/// Columns: layer,r_eff_a,r_eff_b,difference,ratio; last row "mean".
std::string comparison_csv(const Comparison& comparison);

}  // namespace resbm::spectral

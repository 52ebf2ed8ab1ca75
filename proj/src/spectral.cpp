#include "resbm/spectral.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "resbm/error.hpp"
#include "resbm/linalg.hpp"

namespace resbm::spectral {

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

double ratio_of(double a, double b) {
  if (b != 0.0) return a / b;
  return a == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
}

}  // namespace

double effective_rank(std::span<const double> singular_values) {
  if (singular_values.empty()) throw ContractError("effective_rank: empty spectrum");
  double top = 0.0;
  double total = 0.0;
  for (double s : singular_values) {
    if (s < 0.0 || std::isnan(s)) throw ContractError("effective_rank: negative singular value");
    top = std::max(top, s * s);
    total += s * s;
  }
  if (top == 0.0) return 0.0;
  return total / top;
}

std::string_view to_string(Selector selector) {
  return selector == Selector::BottleneckOutput ? "bottleneck-output" : "ffn-output";
}

Selector selector_from_string(std::string_view text) {
  if (text == "bottleneck-output") return Selector::BottleneckOutput;
  if (text == "ffn-output") return Selector::FfnOutput;
  throw ConfigError("selector: expected \"bottleneck-output\" or \"ffn-output\", got \"" +
                    std::string(text) + "\"");
}

LayerRecord analyze_matrix(const Tensor& matrix, std::size_t layer_index, std::string path) {
  LayerRecord rec;
  rec.layer_index = layer_index;
  rec.matrix_path = std::move(path);
  rec.singular_values = singular_values(matrix);
  rec.effective_rank = effective_rank(rec.singular_values);
  const double top = rec.singular_values.front();
  rec.normalized_spectrum.reserve(rec.singular_values.size());
  for (double s : rec.singular_values) rec.normalized_spectrum.push_back(top > 0.0 ? s / top : 0.0);
  return rec;
}

SpectralReport analyze_parameters(const model::Parameters& params, const model::ModelConfig& config,
                                  Selector selector) {
  SpectralReport report;
  report.selector = selector;
  for (std::size_t l = 0; l + 1 < config.num_layers; ++l) {
    const std::string path = selector == Selector::BottleneckOutput
                                 ? model::param_name("boundary", l, "encoder.w2")
                                 : model::param_name("block", l, "ffn.w_down");
    if (!params.contains(path)) continue;
    report.records.push_back(analyze_matrix(params.get(path), l + 1, path));
  }
  if (report.records.empty()) {
    throw ConfigError("selector " + std::string(to_string(selector)) + " matches no parameter");
  }
  double total = 0.0;
  for (const auto& r : report.records) total += r.effective_rank;
  report.mean_effective_rank = total / static_cast<double>(report.records.size());
  return report;
}

SpectralReport analyze_checkpoint(const model::Checkpoint& checkpoint, Selector selector) {
  return analyze_parameters(checkpoint.params, checkpoint.config, selector);
}

Comparison compare_reports(const SpectralReport& a, const SpectralReport& b) {
  if (a.records.size() != b.records.size()) {
    throw ContractError("compare_reports: " + std::to_string(a.records.size()) + " vs " +
                        std::to_string(b.records.size()) + " records");
  }
  Comparison out;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const double ra = a.records[i].effective_rank;
    const double rb = b.records[i].effective_rank;
    out.rows.push_back(ComparisonRow{a.records[i].layer_index, ra, rb, ra - rb, ratio_of(ra, rb)});
  }
  out.means = ComparisonRow{0, a.mean_effective_rank, b.mean_effective_rank,
                            a.mean_effective_rank - b.mean_effective_rank,
                            ratio_of(a.mean_effective_rank, b.mean_effective_rank)};
  return out;
}

nlohmann::json report_to_json(const SpectralReport& report) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : report.records) {
    records.push_back({{"layer_index", r.layer_index},
                       {"matrix_path", r.matrix_path},
                       {"singular_values", r.singular_values},
                       {"effective_rank", r.effective_rank},
                       {"normalized_spectrum", r.normalized_spectrum}});
  }
  return {{"selector", std::string(to_string(report.selector))},
          {"records", records},
          {"summary", {{"mean_effective_rank", report.mean_effective_rank}}}};
}

std::string spectra_csv(const SpectralReport& report) {
  std::string out = "layer,index,sigma_normalized\n";
  for (const auto& r : report.records) {
    for (std::size_t i = 0; i < r.normalized_spectrum.size(); ++i) {
      out += std::to_string(r.layer_index) + "," + std::to_string(i) + "," +
             fmt_double(r.normalized_spectrum[i]) + "\n";
    }
  }
  return out;
}

std::string comparison_csv(const Comparison& comparison) {
  std::string out = "layer,r_eff_a,r_eff_b,difference,ratio\n";
  auto row = [](const std::string& label, const ComparisonRow& r) {
    return label + "," + fmt_double(r.a) + "," + fmt_double(r.b) + "," + fmt_double(r.difference) + "," +
           fmt_double(r.ratio) + "\n";
  };
  for (const auto& r : comparison.rows) out += row(std::to_string(r.layer_index), r);
  out += row("mean", comparison.means);
  return out;
}

}  // namespace resbm::spectral

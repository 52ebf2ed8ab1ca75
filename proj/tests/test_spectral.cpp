#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <limits>

#include "oracles.hpp"
#include "resbm/checkpoint.hpp"
#include "resbm/error.hpp"
#include "resbm/linalg.hpp"
#include "resbm/spectral.hpp"

using namespace resbm;
using namespace resbm::spectral;

TEST_CASE("effective_rank examples") {
  CHECK(effective_rank(std::vector<double>{1, 1, 1, 1}) == 4.0);
  CHECK(effective_rank(std::vector<double>{5, 0, 0}) == 1.0);
  CHECK(effective_rank(std::vector<double>{2, 1, 1}) == 1.5);
  CHECK(effective_rank(std::vector<double>{0, 0}) == 0.0);
  CHECK_THROWS_AS(effective_rank(std::vector<double>{}), ContractError);
  CHECK_THROWS_AS(effective_rank(std::vector<double>{1, -0.5}), ContractError);
  CHECK_THROWS_AS(effective_rank(std::vector<double>{1, std::numeric_limits<double>::quiet_NaN()}), ContractError);
}

TEST_CASE("effective_rank properties") {
  Xoshiro256 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> s(1 + rng.below(12));
    for (double& v : s) v = rng.uniform();
    std::sort(s.rbegin(), s.rend());
    const double base = effective_rank(s);
    CHECK(base >= 1.0);
    CHECK(base <= static_cast<double>(s.size()));
    // Powers of two scale without rounding.
    for (double c : {0.25, 2.0, 1024.0}) {
      std::vector<double> t = s;
      for (double& v : t) v *= c;
      CHECK(effective_rank(t) == base);
    }
  }
  std::vector<double> s{1.0, 0.1, 0.1};
  double prev = effective_rank(s);
  for (int i = 0; i < 9; ++i) {
    s[2] += 0.1;
    const double next = effective_rank(s);
    CHECK(next >= prev);
    prev = next;
  }
}

TEST_CASE("analyze_matrix") {
  SUBCASE("identity") {
    LayerRecord r = analyze_matrix(identity_matrix(8), 1, "x");
    CHECK(r.effective_rank == doctest::Approx(8.0).epsilon(1e-14));
    CHECK(r.normalized_spectrum.front() == 1.0);
  }
  SUBCASE("rank one") {
    Tensor u = Tensor::from({5, 1}, {1, 2, 3, 4, 5});
    Tensor v = Tensor::from({1, 3}, {1, -1, 2});
    LayerRecord r = analyze_matrix(matmul(u, v), 2, "y");
    CHECK(r.effective_rank == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(r.singular_values.size() == 3);
  }
}

TEST_CASE("analyze_parameters on the toy config") {
  model::ModelConfig cfg = model::ModelConfig::toy();
  model::Parameters params = model::init_parameters(cfg, 4);
  SUBCASE("bottleneck output") {
    SpectralReport rep = analyze_parameters(params, cfg, Selector::BottleneckOutput);
    REQUIRE(rep.records.size() == 3);
    double mean = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      const LayerRecord& r = rep.records[i];
      CHECK(r.layer_index == i + 1);
      CHECK(r.matrix_path == "boundary." + std::to_string(i) + ".encoder.w2");
      const Tensor& w = params.get(r.matrix_path);
      CHECK(std::abs(r.effective_rank - oracle::effective_rank_via_gram(w)) < 1e-9);
      CHECK(r.effective_rank >= 1.0);
      CHECK(r.effective_rank <= 8.0);
      mean += r.effective_rank / 3.0;
    }
    CHECK(rep.mean_effective_rank == doctest::Approx(mean).epsilon(1e-14));
  }
  SUBCASE("ffn output excludes the final block") {
    SpectralReport rep = analyze_parameters(params, cfg, Selector::FfnOutput);
    REQUIRE(rep.records.size() == 3);
    CHECK(rep.records.back().matrix_path == "block.2.ffn.w_down");
  }
  SUBCASE("nothing to select") {
    model::ModelConfig plain = model::ModelConfig::toy(false);
    model::Parameters p = model::init_parameters(plain, 4);
    CHECK_THROWS_AS(analyze_parameters(p, plain, Selector::BottleneckOutput), ConfigError);
  }
}

TEST_CASE("analyze_checkpoint is deterministic from a file") {
  model::ModelConfig cfg = model::ModelConfig::toy();
  model::Checkpoint ck{cfg, model::init_parameters(cfg, 8), 0};
  const auto path = std::filesystem::temp_directory_path() / "resbm_test_spectral.ckpt";
  model::save_checkpoint(path, ck);
  const nlohmann::json a = report_to_json(analyze_checkpoint(model::load_checkpoint(path), Selector::BottleneckOutput));
  const nlohmann::json b = report_to_json(analyze_checkpoint(model::load_checkpoint(path), Selector::BottleneckOutput));
  CHECK(a.dump() == b.dump());
  CHECK(a["records"].size() == 3);
  CHECK(a["summary"].contains("mean_effective_rank"));
  std::filesystem::remove(path);
}

TEST_CASE("compare_reports") {
  auto synthetic = [](std::vector<double> ranks) {
    SpectralReport r;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      LayerRecord rec;
      rec.layer_index = i + 1;
      rec.effective_rank = ranks[i];
      r.records.push_back(rec);
      r.mean_effective_rank += ranks[i] / static_cast<double>(ranks.size());
    }
    return r;
  };
  SUBCASE("a == b") {
    SpectralReport a = synthetic({3.0, 2.5, 4.0});
    Comparison c = compare_reports(a, a);
    for (const auto& row : c.rows) {
      CHECK(row.difference == 0.0);
      CHECK(row.ratio == 1.0);
    }
  }
  SUBCASE("headline contrast") {
    Comparison c = compare_reports(synthetic({19.95}), synthetic({10.26}));
    CHECK(c.rows[0].ratio == doctest::Approx(1.944).epsilon(1e-3));
    CHECK(c.rows[0].difference == doctest::Approx(9.69).epsilon(1e-12));
    const std::string csv = comparison_csv(c);
    CHECK(csv.rfind("layer,r_eff_a,r_eff_b,difference,ratio\n", 0) == 0);
    CHECK(csv.find("\nmean,") != std::string::npos);
  }
  SUBCASE("zero denominators") {
    Comparison c = compare_reports(synthetic({1.0, 0.0}), synthetic({0.0, 0.0}));
    CHECK(std::isinf(c.rows[0].ratio));
    CHECK(c.rows[1].ratio == 1.0);
  }
  CHECK_THROWS_AS(compare_reports(synthetic({1.0}), synthetic({1.0, 2.0})), ContractError);
}

TEST_CASE("spectra csv and selector names") {
  model::ModelConfig cfg = model::ModelConfig::toy();
  model::Parameters params = model::init_parameters(cfg, 4);
  SpectralReport rep = analyze_parameters(params, cfg, Selector::BottleneckOutput);
  const std::string csv = spectra_csv(rep);
  CHECK(csv.rfind("layer,index,sigma_normalized\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 3 * 8);
  CHECK(selector_from_string("ffn-output") == Selector::FfnOutput);
  CHECK(selector_from_string(to_string(Selector::BottleneckOutput)) == Selector::BottleneckOutput);
  CHECK_THROWS_AS(selector_from_string("attn"), ConfigError);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "oracles.hpp"
#include "resbm/error.hpp"
#include "resbm/model.hpp"

using namespace resbm;
using namespace resbm::model;

namespace {

ModelConfig tiny(std::size_t layers, std::size_t h, std::size_t inner) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.head_dim = 4;
  c.ffn_inner_dim = 12;
  c.vocab_size = 11;
  c.context_len = 6;
  c.bottleneck.assign(layers - 1, BottleneckSpec{h, inner, false});
  return c;
}

void zero(Parameters& p, const std::string& name) {
  for (double& v : p.get(name).data()) v = 0.0;
}

Tensor seq(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Xoshiro256 rng(seed);
  return oracle::random_matrix(rows, cols, rng);
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("identity_project examples") {
  Tensor x = seq(3, 4, 1);
  CHECK(values(identity_project(x, make_projection(4, 4))) == values(x));

  Tensor pad = identity_project(Tensor::matrix({{1, 2}}), make_projection(2, 4));
  CHECK(values(pad) == std::vector<double>{1, 2, 0, 0});

  Tensor cut = identity_project(Tensor::matrix({{1, 2, 3, 4}}), make_projection(4, 2));
  CHECK(values(cut) == std::vector<double>{1, 2});

  CHECK(make_projection(5, 3).rank == 3);
  CHECK_THROWS_AS(identity_project(x, make_projection(3, 4)), DimensionError);
}

TEST_CASE("compose_projections") {
  auto chain = [](Tensor x, const std::vector<std::size_t>& dims) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) x = identity_project(x, make_projection(dims[i], dims[i + 1]));
    return x;
  };
  SUBCASE("[4,2,3]") {
    const std::vector<std::size_t> dims{4, 2, 3};
    IdentityProjection p = compose_projections(dims);
    CHECK(p.in_dim == 4);
    CHECK(p.out_dim == 3);
    CHECK(p.rank == 2);
    Tensor x = seq(2, 4, 2);
    CHECK(values(chain(x, dims)) == values(identity_project(x, p)));
    for (std::size_t r = 0; r < 2; ++r) CHECK(identity_project(x, p).at(r, 2) == 0.0);
  }
  SUBCASE("[H,H,H]") {
    const std::vector<std::size_t> dims{8, 8, 8};
    CHECK(compose_projections(dims).rank == 8);
    Tensor x = seq(3, 8, 3);
    CHECK(values(chain(x, dims)) == values(x));
  }
  SUBCASE("[8,3,5,4] on 20 inputs") {
    const std::vector<std::size_t> dims{8, 3, 5, 4};
    IdentityProjection p = compose_projections(dims);
    CHECK(p.rank == 3);
    for (std::uint64_t s = 0; s < 20; ++s) {
      Tensor x = seq(2, 8, 100 + s);
      Tensor c = chain(x, dims);
      CHECK(values(c) == values(identity_project(x, p)));
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t j = 0; j < 4; ++j) CHECK(c.at(r, j) == (j < p.rank ? x.at(r, j) : 0.0));
    }
  }
  std::vector<std::size_t> one{4};
  CHECK_THROWS_AS(compose_projections(one), ContractError);
  CHECK_THROWS_AS(compose_projections({}), ContractError);
}

TEST_CASE("config validation") {
  ModelConfig c = ModelConfig::toy();
  CHECK_NOTHROW(c.validate());
  c.bottleneck.pop_back();
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::toy();
  c.num_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::toy();
  c.bottleneck[0]->inner_dim = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::toy();
  c.bottleneck[1]->identity_codec = true;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("attention block") {
  ModelConfig c = tiny(2, 2, 4);
  Parameters p = init_parameters(c, 3);
  Tensor x = seq(5, 8, 4);

  SUBCASE("zero output projection gives the identity") {
    zero(p, "block.0.attn.wo");
    CHECK(values(attention_block(x, p, c, 0)) == values(x));
  }
  SUBCASE("zero value projection gives the identity") {
    zero(p, "block.0.attn.wv");
    CHECK(values(attention_block(x, p, c, 0)) == values(x));
  }
  SUBCASE("L=1 attends only to itself") {
    Tensor x1 = seq(1, 8, 5);
    Tensor n = mul(rms_normalize(x1), p.get("block.0.attn_norm.weight"));
    Tensor v = matmul_nt(n, p.get("block.0.attn.wv"));
    Tensor expect = add(x1, matmul_nt(v, p.get("block.0.attn.wo")));
    Tensor got = attention_block(x1, p, c, 0);
    for (std::size_t j = 0; j < 8; ++j) CHECK(got.at(0, j) == doctest::Approx(expect.at(0, j)).epsilon(1e-14));
  }
  SUBCASE("causal: perturbing position t leaves earlier positions alone") {
    for (bool qk : {false, true}) {
      c.qk_norm = qk;
      Parameters pq = init_parameters(c, 3);
      Tensor base = attention_block(x, pq, c, 0);
      for (std::size_t t = 0; t < 5; ++t) {
        Tensor y = x.clone();
        for (std::size_t j = 0; j < 8; ++j) y.data()[t * 8 + j] += 0.37 * static_cast<double>(j + 1);
        Tensor out = attention_block(y, pq, c, 0);
        for (std::size_t r = 0; r < t; ++r)
          for (std::size_t j = 0; j < 8; ++j) CHECK(out.at(r, j) == base.at(r, j));
        if (t + 1 < 5) CHECK(out.at(4, 0) != base.at(4, 0));
      }
    }
  }
}

TEST_CASE("boundary forward and receive") {
  ModelConfig c = tiny(2, 2, 4);
  Parameters p = init_parameters(c, 9);
  const BottleneckSpec spec = *c.bottleneck[0];
  Tensor y = seq(4, 8, 6);

  SUBCASE("zero encoder output layer sends the leading h columns") {
    zero(p, "boundary.0.encoder.w2");
    Tensor b = boundary_forward(y, spec, p, c, 0);
    REQUIRE(b.shape() == Shape{4, 2});
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t j = 0; j < 2; ++j) CHECK(b.at(r, j) == y.at(r, j));
  }
  SUBCASE("zero decoder and attention receive a padded b") {
    zero(p, "boundary.0.decoder.w2");
    zero(p, "block.1.attn.wo");
    Tensor b = seq(4, 2, 7);
    Tensor z = boundary_receive(b, spec, p, c, 0);
    REQUIRE(z.shape() == Shape{4, 8});
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t j = 0; j < 8; ++j) CHECK(z.at(r, j) == (j < 2 ? b.at(r, j) : 0.0));
    CHECK_THROWS_AS(boundary_receive(seq(4, 3, 1), spec, p, c, 0), DimensionError);
  }
  SUBCASE("identity codec with h = H is the standard block") {
    ModelConfig ci = tiny(2, 8, 8);
    ci.bottleneck[0] = BottleneckSpec{8, 0, true};
    Parameters pi = init_parameters(ci, 9);
    CHECK(values(boundary_forward(y, *ci.bottleneck[0], pi, ci, 0)) == values(ffn_block(y, pi, ci, 0)));
    CHECK(values(boundary_receive(y, *ci.bottleneck[0], pi, ci, 0)) == values(attention_block(y, pi, ci, 1)));
  }
  SUBCASE("gradient of sum(b) with respect to y") {
    Tensor leaf = y.clone();
    leaf.set_requires_grad(true);
    Tape tape;
    {
      Tape::Scope s(tape);
      tape.backward(sum(boundary_forward(leaf, spec, p, c, 0)));
    }
    const auto fd = oracle::finite_difference([&] { return sum(boundary_forward(leaf, spec, p, c, 0)).item(); }, leaf);
    CHECK(oracle::relative_error(leaf.grad(), fd) < 1e-7);

    // Removing the encoder branch leaves exactly the identity path: ones
    // in the leading h columns, zero elsewhere.
    Parameters pz = init_parameters(c, 9);
    zero(pz, "boundary.0.encoder.w2");
    Tensor leaf2 = y.clone();
    leaf2.set_requires_grad(true);
    Tape tape2;
    {
      Tape::Scope s(tape2);
      tape2.backward(sum(boundary_forward(leaf2, spec, pz, c, 0)));
    }
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t j = 0; j < 8; ++j) CHECK(leaf2.grad()[r * 8 + j] == (j < 2 ? 1.0 : 0.0));
  }
}

TEST_CASE("forward_blocks shape contract") {
  ModelConfig c = tiny(4, 2, 4);
  c.bottleneck[1] = std::nullopt;
  c.bottleneck[2] = BottleneckSpec{3, 5, false};
  Parameters p = init_parameters(c, 1);
  std::vector<std::size_t> widths;
  Tensor out = forward_blocks(seq(5, 8, 2), p, c, &widths);
  CHECK(out.shape() == Shape{5, 8});
  CHECK(widths == std::vector<std::size_t>{2, 8, 3});
}

TEST_CASE("vanilla reduction is bit-identical") {
  ModelConfig vanilla = tiny(3, 2, 4);
  vanilla.bottleneck.assign(2, std::nullopt);
  ModelConfig ident = vanilla;
  ident.bottleneck.assign(2, BottleneckSpec{8, 0, true});
  Parameters pv = init_parameters(vanilla, 21);
  Parameters pi = init_parameters(ident, 21);
  CHECK(pv.size() == pi.size());
  const std::vector<int> toks{1, 4, 2, 9, 0, 3};
  LmOutput a = forward_lm(toks, pv, vanilla);
  LmOutput b = forward_lm(toks, pi, ident);
  CHECK(values(a.logits) == values(b.logits));
  CHECK(a.loss.item() == b.loss.item());
}

TEST_CASE("identity-path gradient with zeroed branches") {
  ModelConfig c = tiny(4, 4, 4);
  c.bottleneck[1] = BottleneckSpec{2, 3, false};
  c.bottleneck[2] = BottleneckSpec{6, 6, false};
  Parameters p = init_parameters(c, 5);
  for (std::size_t l = 0; l < 4; ++l) {
    zero(p, param_name("block", l, "attn.wo"));
    zero(p, param_name("block", l, "ffn.w_down"));
  }
  for (std::size_t l = 0; l < 3; ++l) {
    zero(p, param_name("boundary", l, "encoder.w2"));
    zero(p, param_name("boundary", l, "decoder.w2"));
  }
  Tensor x0 = seq(5, 8, 8);
  x0.set_requires_grad(true);
  Tensor w = seq(5, 8, 9);
  Tape tape;
  {
    Tape::Scope s(tape);
    Tensor out = forward_blocks(x0, p, c);
    tape.backward(sum(mul(out, w)));
  }
  const std::size_t k = 2;
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < 8; ++j) CHECK(x0.grad()[r * 8 + j] == (j < k ? w.at(r, j) : 0.0));
}

TEST_CASE("full model gradient matches finite differences") {
  ModelConfig c = tiny(2, 2, 2);
  c.context_len = 4;
  for (bool qk : {false, true}) {
    c.qk_norm = qk;
    Parameters p = init_parameters(c, 77);
    const std::vector<int> toks{3, 7, 1, 10, 5};
    Tape tape;
    {
      Tape::Scope s(tape);
      tape.backward(forward_lm(toks, p, c).loss);
    }
    for (const Param& param : p.entries()) {
      const auto fd = oracle::finite_difference([&] { return forward_lm(toks, p, c).loss.item(); }, param.tensor);
      CAPTURE(param.name);
      CHECK(oracle::relative_error(param.tensor.grad(), fd) < 1e-5);
    }
  }
}

TEST_CASE("forward_lm") {
  ModelConfig c = tiny(2, 2, 4);
  Parameters p = init_parameters(c, 2);
  SUBCASE("uniform logits give ln V") {
    for (double& v : p.get("unembed.weight").data()) v = 0.0;
    const std::vector<int> toks{1, 2, 3, 4};
    CHECK(forward_lm(toks, p, c).loss.item() == doctest::Approx(std::log(11.0)).epsilon(1e-14));
  }
  SUBCASE("errors") {
    const std::vector<int> bad{1, 11, 2};
    CHECK_THROWS_AS(forward_lm(bad, p, c), DataError);
    const std::vector<int> too_long(8, 1);
    CHECK_THROWS_AS(forward_lm(too_long, p, c), DimensionError);
  }
  SUBCASE("every parameter receives a gradient") {
    const std::vector<int> toks{1, 2, 3, 4, 5};
    Tape tape;
    {
      Tape::Scope s(tape);
      tape.backward(forward_lm(toks, p, c).loss);
    }
    for (const Param& param : p.entries()) {
      double n = 0.0;
      for (double g : param.tensor.grad()) n += g * g;
      CAPTURE(param.name);
      CHECK(n > 0.0);
    }
  }
}

TEST_CASE("init is deterministic and per-name") {
  ModelConfig c = ModelConfig::toy();
  Parameters a = init_parameters(c, 5);
  Parameters b = init_parameters(c, 5);
  Parameters d = init_parameters(c, 6);
  CHECK(values(a.get("block.2.ffn.w_up")) == values(b.get("block.2.ffn.w_up")));
  CHECK(values(a.get("block.2.ffn.w_up")) != values(d.get("block.2.ffn.w_up")));
  CHECK(a.entry("embed.weight").kind == ParamKind::Embedding);
  CHECK(a.entry("block.0.attn.wq").kind == ParamKind::Matrix);
  CHECK(a.entry("final_norm.weight").kind == ParamKind::Vector);
  CHECK(param_kind_from_string(to_string(ParamKind::Matrix)) == ParamKind::Matrix);
  CHECK_THROWS_AS(param_kind_from_string("tensor"), DataError);
}

TEST_CASE("count_parameters") {
  SUBCASE("no bottlenecks") {
    ModelConfig c = ModelConfig::toy(false);
    ParameterCount n = count_parameters(c);
    CHECK(n.bottleneck_overhead == 0);
    CHECK(n.overhead_fraction == 0.0);
    CHECK(n.total == init_parameters(c, 1).total_elements());
  }
  SUBCASE("one boundary, H=8, h=2, inner=4") {
    ModelConfig c = tiny(2, 2, 4);
    CHECK(count_parameters(c).bottleneck_overhead == 80);
  }
  SUBCASE("toy default") {
    ModelConfig c = ModelConfig::toy();
    CHECK(count_parameters(c).total == init_parameters(c, 1).total_elements());
    CHECK(count_parameters(c).bottleneck_overhead == 3 * 2 * (16 * 64 + 8 * 16));
  }
  SUBCASE("random configs against instantiation") {
    Xoshiro256 rng(31);
    for (int trial = 0; trial < 8; ++trial) {
      ModelConfig c;
      c.num_layers = 1 + rng.below(4);
      c.num_heads = 1 + rng.below(3);
      c.head_dim = 2 * (1 + rng.below(3));
      c.hidden_dim = c.num_heads * c.head_dim;
      c.ffn_inner_dim = 1 + rng.below(20);
      c.vocab_size = 2 + rng.below(30);
      c.qk_norm = rng.below(2) == 1;
      c.bottleneck.assign(c.num_layers - 1, std::nullopt);
      for (auto& b : c.bottleneck) {
        if (rng.below(3) == 0) continue;
        const std::size_t h = 1 + rng.below(c.hidden_dim);
        b = BottleneckSpec{h, h + rng.below(6), false};
      }
      Parameters p = init_parameters(c, trial);
      std::size_t overhead = 0;
      for (const Param& e : p.entries())
        if (e.name.rfind("boundary.", 0) == 0) overhead += e.tensor.numel();
      const ParameterCount n = count_parameters(c);
      CHECK(n.total == p.total_elements());
      CHECK(n.bottleneck_overhead == overhead);
    }
  }
}

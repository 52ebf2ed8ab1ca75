#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <array>

#include "oracles.hpp"
#include "resbm/error.hpp"
#include "resbm/linalg.hpp"
#include "resbm/tensor.hpp"

using namespace resbm;

namespace {

Tensor uniform_tensor(Shape shape, Xoshiro256& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Projects the op's output onto fixed random weights so every output entry
// contributes to the scalar being differentiated.
using OpFn = std::function<Tensor(const std::vector<Tensor>&)>;

double projected(const OpFn& op, const std::vector<Tensor>& inputs, const Tensor& weights) {
  Tensor out = op(inputs);
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += out.data()[i] * weights.data()[i];
  return s;
}

void check_gradients(const OpFn& op, std::vector<Tensor> inputs, std::uint64_t seed = 7) {
  Xoshiro256 rng(seed);
  Tensor probe = op(inputs);
  Tensor weights = uniform_tensor(probe.shape(), rng);
  weights.set_requires_grad(false);

  Tape tape;
  {
    Tape::Scope scope(tape);
    Tensor loss = sum(mul(op(inputs), weights));
    tape.backward(loss);
  }
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].requires_grad()) continue;
    const auto fd = oracle::finite_difference([&] { return projected(op, inputs, weights); }, inputs[k]);
    CAPTURE(k);
    CHECK(oracle::relative_error(inputs[k].grad(), fd) < 1e-5);
  }
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor t = Tensor::zeros({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.data().size() == 6);
  CHECK(t.grad().size() == t.data().size());
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
}

TEST_CASE("matmul examples") {
  Tensor x = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor y = matmul(eye, x);
  CHECK(std::equal(y.data().begin(), y.data().end(), x.data().begin()));

  Tensor a = Tensor::matrix({{1, 2}});
  Tensor b = Tensor::matrix({{3}, {4}});
  CHECK(matmul(a, b).item() == 11.0);

  SUBCASE("shape mismatch names both shapes") {
    try {
      (void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
    }
  }
}

TEST_CASE("matmul agrees with the naive product") {
  Xoshiro256 rng(3);
  for (auto [m, k, n] : {std::array<std::size_t, 3>{3, 4, 2}, {64, 64, 256}, {17, 5, 31}, {1, 9, 1}}) {
    Tensor a = oracle::random_matrix(m, k, rng);
    Tensor b = oracle::random_matrix(k, n, rng);
    const auto ref = oracle::naive_matmul({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, m, k, n);
    Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    std::vector<double> tv(k * n);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < n; ++j) tv[j * k + i] = b.data()[i * n + j];
    Tensor bt = Tensor::from({n, k}, tv);
    Tensor c2 = matmul_nt(a, bt);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c2.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("elementwise examples") {
  CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);

  Tensor p = softmax_rows(Tensor::matrix({{0, 0}}));
  CHECK(p.data()[0] == 0.5);
  CHECK(p.data()[1] == 0.5);

  // x / sqrt(c^2 + eps) for a constant row
  for (double c : {3.0, -2.0, 0.5}) {
    Tensor r = rms_normalize(Tensor::full({1, 4}, c));
    const double expect = c / std::sqrt(c * c + 1e-6);
    for (double v : r.data()) CHECK(v == doctest::Approx(expect).epsilon(1e-15));
    CHECK(std::abs(r.data()[0] - (c > 0 ? 1.0 : -1.0)) < 1e-5);
  }

  Tensor causal = softmax_rows(Tensor::matrix({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}}), true);
  CHECK(causal.at(0, 0) == 1.0);
  CHECK(causal.at(0, 1) == 0.0);
  CHECK(causal.at(1, 2) == 0.0);

  SUBCASE("broadcast") {
    Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    Tensor row = Tensor::from({2}, {10, 20});
    Tensor s = add(a, row);
    CHECK(s.at(1, 1) == 24.0);
    CHECK(mul(a, Tensor::scalar(2.0)).at(1, 0) == 6.0);
    CHECK_THROWS_AS(add(a, Tensor::from({3}, {1, 2, 3})), DimensionError);
    CHECK_THROWS_AS(add(a, Tensor::from({2, 1}, {1, 2})), DimensionError);
  }
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from({2, 3}, {1, -2, 3, 0.5, 4, -1}, true);
  SUBCASE("sum gives ones") {
    Tape tape;
    {
      Tape::Scope s(tape);
      tape.backward(sum(x));
    }
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum of squares gives 2x") {
    Tape tape;
    {
      Tape::Scope s(tape);
      tape.backward(sum(mul(x, x)));
    }
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 2.0 * x.data()[i]);
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tape tape;
    Tape::Scope s(tape);
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
  }
  SUBCASE("gradients accumulate across backward calls") {
    for (int rep = 0; rep < 2; ++rep) {
      Tape tape;
      Tape::Scope s(tape);
      tape.backward(sum(x));
    }
    for (double g : x.grad()) CHECK(g == 2.0);
  }
}

TEST_CASE("tape records in topological order and replays in reverse") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  Tape::Scope s(tape);
  Tensor y = mul(x, x);
  Tensor z = scale(y, 3.0);
  Tensor loss = sum(z);
  REQUIRE(tape.size() == 3);
  const auto& recs = tape.records();
  CHECK(recs[0].op == "mul");
  CHECK(recs[1].op == "scale");
  CHECK(recs[2].op == "sum");
  CHECK(recs[1].inputs[0].same_storage(recs[0].output));
  CHECK(recs[2].inputs[0].same_storage(recs[1].output));
}

TEST_CASE("finite-difference gradients of every op") {
  Xoshiro256 rng(11);
  SUBCASE("matmul") {
    check_gradients([](const auto& in) { return matmul(in[0], in[1]); },
                    {uniform_tensor({3, 4}, rng), uniform_tensor({4, 2}, rng)});
  }
  SUBCASE("matmul_nt") {
    check_gradients([](const auto& in) { return matmul_nt(in[0], in[1]); },
                    {uniform_tensor({3, 4}, rng), uniform_tensor({5, 4}, rng)});
  }
  SUBCASE("add / sub / mul with broadcast") {
    check_gradients([](const auto& in) { return add(in[0], in[1]); },
                    {uniform_tensor({3, 4}, rng), uniform_tensor({4}, rng)});
    check_gradients([](const auto& in) { return sub(in[0], in[1]); },
                    {uniform_tensor({3, 4}, rng), uniform_tensor({3, 4}, rng)});
    check_gradients([](const auto& in) { return mul(in[0], in[1]); },
                    {uniform_tensor({2, 3, 4}, rng), uniform_tensor({3, 4}, rng)});
    check_gradients([](const auto& in) { return mul(in[0], in[1]); },
                    {uniform_tensor({3, 4}, rng), uniform_tensor({1}, rng)});
  }
  SUBCASE("scale, silu, sum, mean") {
    check_gradients([](const auto& in) { return scale(in[0], -1.7); }, {uniform_tensor({3, 4}, rng)});
    check_gradients([](const auto& in) { return silu(in[0]); }, {uniform_tensor({3, 4}, rng)});
    check_gradients([](const auto& in) { return sum(in[0]); }, {uniform_tensor({3, 4}, rng)});
    check_gradients([](const auto& in) { return mean(in[0]); }, {uniform_tensor({3, 4}, rng)});
  }
  SUBCASE("rms_normalize") {
    check_gradients([](const auto& in) { return rms_normalize(in[0]); }, {uniform_tensor({3, 6}, rng)});
    check_gradients([](const auto& in) { return rms_normalize(in[0]); }, {uniform_tensor({2, 3, 4}, rng)});
  }
  SUBCASE("softmax_rows") {
    check_gradients([](const auto& in) { return softmax_rows(in[0]); }, {uniform_tensor({4, 5}, rng)});
    check_gradients([](const auto& in) { return softmax_rows(in[0], true); }, {uniform_tensor({4, 4}, rng)});
  }
  SUBCASE("shape ops") {
    check_gradients([](const auto& in) { return reshape(in[0], {2, 6}); }, {uniform_tensor({3, 4}, rng)});
    check_gradients([](const auto& in) { return slice_cols(in[0], 1, 2); }, {uniform_tensor({3, 4}, rng)});
    check_gradients([](const auto& in) { return concat_cols({in[0], in[1]}); },
                    {uniform_tensor({3, 2}, rng), uniform_tensor({3, 3}, rng)});
    check_gradients([](const auto& in) { return resize_cols(in[0], 6); }, {uniform_tensor({3, 4}, rng)});
    check_gradients([](const auto& in) { return resize_cols(in[0], 2); }, {uniform_tensor({3, 4}, rng)});
  }
  SUBCASE("rope") {
    check_gradients([](const auto& in) { return rope(in[0], 4); }, {uniform_tensor({5, 8}, rng)});
  }
  SUBCASE("embedding and cross_entropy") {
    const std::vector<int> ids{2, 0, 2, 4};
    check_gradients([&](const auto& in) { return embedding(in[0], ids); }, {uniform_tensor({5, 3}, rng)});
    const std::vector<int> targets{1, 0, 3};
    check_gradients([&](const auto& in) { return cross_entropy(in[0], targets); }, {uniform_tensor({3, 4}, rng)});
  }
  SUBCASE("composite chain") {
    check_gradients(
        [](const auto& in) {
          Tensor h = silu(matmul_nt(rms_normalize(in[0]), in[1]));
          return softmax_rows(matmul(h, in[2]), true);
        },
        {uniform_tensor({4, 6}, rng), uniform_tensor({5, 6}, rng), uniform_tensor({5, 4}, rng)});
  }
}

TEST_CASE("op examples and errors") {
  Tensor r = resize_cols(Tensor::matrix({{1, 2}}), 4);
  CHECK(r.shape() == Shape{1, 4});
  CHECK(r.data()[1] == 2.0);
  CHECK(r.data()[3] == 0.0);
  CHECK(resize_cols(Tensor::matrix({{1, 2, 3, 4}}), 2).data()[1] == 2.0);

  // Position 0 is left unrotated.
  Tensor x = Tensor::matrix({{1, 2, 3, 4}, {1, 2, 3, 4}});
  Tensor y = rope(x, 4);
  CHECK(y.at(0, 0) == 1.0);
  CHECK(y.at(0, 3) == 4.0);
  CHECK(y.at(1, 0) != 1.0);
  CHECK_THROWS_AS(rope(Tensor::zeros({2, 6}), 4), DimensionError);

  const std::vector<int> bad{0, 7};
  CHECK_THROWS_AS(embedding(Tensor::zeros({5, 2}), bad), DataError);
  CHECK_THROWS_AS(cross_entropy(Tensor::zeros({2, 5}), bad), DataError);

  const std::vector<int> t{0, 1, 2};
  CHECK(cross_entropy(Tensor::zeros({3, 8}), t).item() == doctest::Approx(std::log(8.0)).epsilon(1e-15));
}

TEST_CASE("replay determinism") {
  auto run = [] {
    Xoshiro256 rng(5);
    Tensor a = uniform_tensor({6, 5}, rng);
    Tensor b = uniform_tensor({4, 5}, rng);
    Tape tape;
    {
      Tape::Scope s(tape);
      tape.backward(mean(silu(matmul_nt(a, b))));
    }
    std::vector<double> g(a.grad().begin(), a.grad().end());
    g.insert(g.end(), b.grad().begin(), b.grad().end());
    return g;
  };
  CHECK(run() == run());
}

TEST_CASE("no recording without an active tape") {
  Tensor a = Tensor::from({2}, {1, 2}, true);
  Tensor y = mul(a, a);
  CHECK_FALSE(y.requires_grad());
  CHECK(Tape::active() == nullptr);
}

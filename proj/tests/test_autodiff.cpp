#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "avex/adam.hpp"
#include "avex/autodiff.hpp"
#include "avex/errors.hpp"
#include "avex/parameters.hpp"
#include "support/gradcheck.hpp"

using namespace avex;
using avex::testing::gradcheck;

namespace {

Matrix uniform(Index r, Index c, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Tensor<double> param(Matrix m) { return Tensor<double>::from_matrix(std::move(m), true); }

}  // namespace

TEST_CASE("tensor storage follows its shape") {
  Tensor<double> t({2, 3, 4}, true);
  CHECK(t.value().rows() == 2);
  CHECK(t.value().cols() == 12);
  CHECK(t.grad().rows() == 2);
  CHECK(t.size() == 24);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), DimensionError);
  Tensor<double> frozen = Tensor<double>::from_matrix(Matrix::Ones(2, 2));
  CHECK_THROWS_AS(frozen.grad(), ContractError);
}

TEST_CASE("closed-form forward values") {
  Graph<double> g;
  CHECK(sigmoid(g.constant(Matrix::Zero(1, 1))).value()(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  Matrix x(1, 2);
  x << std::log(1.0), std::log(3.0);
  CHECK(log_sum_exp(g.constant(x)).value()(0, 0) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  Matrix prod = matmul(g.constant(Matrix::Ones(2, 3)), g.constant(Matrix::Ones(3, 2))).value();
  CHECK(prod == Matrix::Constant(2, 2, 3.0));
  Matrix wide(1, 3);
  wide << 1000, 0, -1000;
  CHECK(softmax(g.constant(wide)).value()(0, 0) == doctest::Approx(1.0));
  CHECK(tanh(g.constant(Matrix::Constant(1, 1, 800.0))).value()(0, 0) == 1.0);
  CHECK(sigmoid(g.constant(Matrix::Constant(1, 1, -800.0))).value()(0, 0) == 0.0);
}

TEST_CASE("elementary gradients") {
  SUBCASE("sum gives ones") {
    auto x = param(Matrix::Random(3, 4));
    Graph<double> g;
    g.backward(sum(g.parameter(x)));
    CHECK(x.grad() == Matrix::Ones(3, 4));
  }
  SUBCASE("tanh at zero has slope one") {
    auto x = param(Matrix::Zero(1, 1));
    Graph<double> g;
    g.backward(tanh(g.parameter(x)));
    CHECK(x.grad()(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  }
}

TEST_CASE("every primitive matches central finite differences") {
  std::mt19937_64 rng(7);
  auto a = param(uniform(3, 4, rng));
  auto b = param(uniform(4, 2, rng));
  auto c = param(uniform(3, 4, rng));
  auto row = param(uniform(1, 4, rng));
  auto col = param(uniform(3, 1, rng));
  const Matrix mask = dropout_mask<double>(3, 4, 0.6, rng);

  const std::vector<std::pair<const char*, std::function<Var<double>(Graph<double>&)>>> cases = {
      {"matmul", [&](Graph<double>& g) { return sum(tanh(matmul(g.parameter(a), g.parameter(b)))); }},
      {"add", [&](Graph<double>& g) { return sum(tanh(add(g.parameter(a), g.parameter(c)))); }},
      {"add-row", [&](Graph<double>& g) { return sum(tanh(add(g.parameter(a), g.parameter(row)))); }},
      {"sub", [&](Graph<double>& g) { return sum(tanh(sub(g.parameter(a), g.parameter(c)))); }},
      {"mul", [&](Graph<double>& g) { return sum(mul(g.parameter(a), g.parameter(c))); }},
      {"mul-col", [&](Graph<double>& g) { return sum(tanh(mul(g.parameter(a), g.parameter(col)))); }},
      {"sigmoid", [&](Graph<double>& g) { return sum(mul(sigmoid(g.parameter(a)), g.parameter(c))); }},
      {"softmax", [&](Graph<double>& g) { return sum(mul(softmax(g.parameter(a)), g.parameter(c))); }},
      {"log-sum-exp", [&](Graph<double>& g) { return sum(mul(log_sum_exp(g.parameter(a)), g.parameter(col))); }},
      {"concat", [&](Graph<double>& g) { return sum(tanh(concat(g.parameter(a), g.parameter(col)))); }},
      {"stack-rows",
       [&](Graph<double>& g) { return sum(tanh(stack_rows<double>({g.parameter(row), g.parameter(a)}))); }},
      {"select-rows", [&](Graph<double>& g) { return sum(tanh(select_rows(g.parameter(a), {2, 0, 2, 1}))); }},
      {"slice-rows", [&](Graph<double>& g) { return sum(tanh(slice_rows(g.parameter(a), 1, 2))); }},
      {"slice-cols", [&](Graph<double>& g) { return sum(tanh(slice_cols(g.parameter(a), 1, 2))); }},
      {"segment-sum", [&](Graph<double>& g) { return sum(tanh(segment_sum(g.parameter(a), {1, 0, 1}, 2))); }},
      {"scale", [&](Graph<double>& g) { return sum(tanh(scale(g.parameter(a), 2.5))); }},
      {"dropout", [&](Graph<double>& g) { return sum(tanh(dropout(g.parameter(a), mask, 0.6, true))); }},
  };
  for (const auto& [name, loss] : cases) {
    CAPTURE(name);
    const auto r = gradcheck({{"a", &a}, {"b", &b}, {"c", &c}, {"row", &row}, {"col", &col}}, loss);
    CAPTURE(r.worst);
    CHECK(r.max_relative_error < 1e-6);
  }
}

TEST_CASE("random compositions up to depth five match finite differences") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> pick(0, 5);
  for (int trial = 0; trial < 40; ++trial) {
    auto x = param(uniform(3, 3, rng));
    auto w = param(uniform(3, 3, rng));
    std::vector<int> ops;
    const int depth = 1 + trial % 5;
    for (int d = 0; d < depth; ++d) ops.push_back(pick(rng));
    auto loss = [&](Graph<double>& g) {
      Var<double> h = g.parameter(x);
      Var<double> wv = g.parameter(w);
      for (int op : ops) {
        switch (op) {
          case 0: h = tanh(matmul(h, wv)); break;
          case 1: h = sigmoid(h); break;
          case 2: h = softmax(h); break;
          case 3: h = mul(h, add(h, wv)); break;
          case 4: h = scale(sub(h, wv), 0.5); break;
          default: h = concat(slice_cols(h, 0, 1), slice_cols(tanh(h), 1, 2)); break;
        }
      }
      return sum(mul(h, h));
    };
    const auto r = gradcheck({{"x", &x}, {"w", &w}}, loss);
    CAPTURE(trial);
    CAPTURE(r.worst);
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("a tensor feeding two consumers receives the sum of both path gradients") {
  std::mt19937_64 rng(3);
  auto x = param(uniform(2, 3, rng));
  auto w = param(uniform(3, 3, rng));
  auto path_a = [&](Graph<double>& g) { return sum(tanh(matmul(g.parameter(x), g.parameter(w)))); };
  auto path_b = [&](Graph<double>& g) { return sum(mul(sigmoid(g.parameter(x)), g.parameter(x))); };
  Matrix ga;
  Matrix gb;
  {
    x.zero_grad();
    Graph<double> g;
    g.backward(path_a(g));
    ga = x.grad();
  }
  {
    x.zero_grad();
    Graph<double> g;
    g.backward(path_b(g));
    gb = x.grad();
  }
  x.zero_grad();
  Graph<double> g;
  Var<double> both = add(path_a(g), path_b(g));
  g.backward(both);
  CHECK((x.grad() - (ga + gb)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("dropout is inverted while training and the identity otherwise") {
  Graph<double> g;
  Matrix x(1, 4);
  x << 1, 2, 3, 4;
  Matrix m(1, 4);
  m << 1, 0, 1, 0;
  Matrix out = dropout(g.constant(x), m, 0.5, true).value();
  Matrix expected(1, 4);
  expected << 2, 0, 6, 0;
  CHECK(out == expected);
  CHECK(dropout(g.constant(x), m, 0.5, false).value() == x);
  CHECK_THROWS_AS(dropout(g.constant(x), Matrix(Matrix::Ones(2, 2)), 0.5, true), DimensionError);
}

TEST_CASE("contract and numeric errors") {
  Graph<double> g;
  SUBCASE("shape mismatch names both shapes") {
    try {
      matmul(g.constant(Matrix::Ones(2, 3)), g.constant(Matrix::Ones(2, 3)));
      FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
      CHECK(std::string(e.what()).find("2x3") != std::string::npos);
    }
    CHECK_THROWS_AS(add(g.constant(Matrix::Ones(2, 3)), g.constant(Matrix::Ones(3, 2))), DimensionError);
  }
  SUBCASE("non-scalar loss") {
    auto x = param(Matrix::Ones(2, 2));
    CHECK_THROWS_AS(g.backward(tanh(g.parameter(x))), ContractError);
  }
  SUBCASE("non-finite output names the op") {
    try {
      scale(g.constant(Matrix::Constant(1, 1, 1e308)), 10.0);
      FAIL("expected a numeric error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("scale") != std::string::npos);
    }
    CHECK_THROWS_AS(g.constant(Matrix::Constant(1, 1, std::nan(""))), NumericError);
  }
}

TEST_CASE("the core is generic over the scalar type") {
  auto x = Tensor<float>::from_matrix(RowMatrix<float>::Constant(2, 2, 0.5f), true);
  Graph<float> g;
  g.backward(sum(tanh(g.parameter(x))));
  const float expected = 1.0f - std::tanh(0.5f) * std::tanh(0.5f);
  CHECK(x.grad()(1, 1) == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters and moments unchanged") {
    auto x = param(Matrix::Constant(2, 2, 1.5));
    std::vector<Tensor<double>*> ps{&x};
    auto state = AdamState<double>::zeros_like(ps);
    adam_step(ps, state, {});
    CHECK(x.value() == Matrix::Constant(2, 2, 1.5));
    CHECK(state.first_moment[0].isZero(0));
    CHECK(state.second_moment[0].isZero(0));
    CHECK(state.step == 1);
  }
  SUBCASE("constant gradient moves against its sign") {
    auto x = param(Matrix::Zero(1, 2));
    std::vector<Tensor<double>*> ps{&x};
    auto state = AdamState<double>::zeros_like(ps);
    for (int i = 0; i < 50; ++i) {
      x.grad() << 2.0, -3.0;
      adam_step(ps, state, {});
    }
    CHECK(x.value()(0, 0) < 0);
    CHECK(x.value()(0, 1) > 0);
  }
  SUBCASE("quadratic converges") {
    auto x = param(Matrix::Zero(1, 1));
    std::vector<Tensor<double>*> ps{&x};
    auto state = AdamState<double>::zeros_like(ps);
    AdamOptions opt;
    opt.learning_rate = 0.1;
    for (int i = 0; i < 500; ++i) {
      x.grad()(0, 0) = 2 * (x.value()(0, 0) - 3.0);
      adam_step(ps, state, opt);
    }
    CHECK(std::abs(x.value()(0, 0) - 3.0) < 1e-2);
  }
  SUBCASE("matches the reference recurrence") {
    auto x = param(Matrix::Constant(1, 1, 0.7));
    std::vector<Tensor<double>*> ps{&x};
    auto state = AdamState<double>::zeros_like(ps);
    AdamOptions opt;
    double v = 0.7, m = 0, s = 0;
    for (int t = 1; t <= 20; ++t) {
      const double grad = std::sin(v) + 0.1 * t;
      x.grad()(0, 0) = grad;
      adam_step(ps, state, opt);
      m = 0.9 * m + 0.1 * grad;
      s = 0.999 * s + 0.001 * grad * grad;
      v -= 0.001 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(s / (1 - std::pow(0.999, t))) + 1e-8);
      CHECK(x.value()(0, 0) == doctest::Approx(v).epsilon(1e-12));
    }
  }
  SUBCASE("state shape mismatch is a contract error") {
    auto x = param(Matrix::Zero(2, 2));
    auto y = param(Matrix::Zero(3, 1));
    std::vector<Tensor<double>*> px{&x};
    std::vector<Tensor<double>*> py{&y};
    auto state = AdamState<double>::zeros_like(px);
    CHECK_THROWS_AS(adam_step(py, state, {}), ContractError);
  }
}

TEST_CASE("parameter checkpoints") {
  const auto dir = std::filesystem::temp_directory_path() / "avex_test_ckpt";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(5);
  ParameterSet ps;
  ps.add("b.weight", uniform(3, 2, rng));
  ps.add("a.bias", uniform(1, 2, rng));
  const nlohmann::json meta = {{"note", "x"}};
  save_checkpoint(dir / "one.ckpt", meta, ps);
  save_checkpoint(dir / "two.ckpt", meta, ps);

  SUBCASE("round trip is bit-exact and byte-stable") {
    Checkpoint ck = load_checkpoint(dir / "one.ckpt");
    CHECK(ck.params == ps);
    CHECK(ck.meta == meta);
    std::ifstream a(dir / "one.ckpt", std::ios::binary);
    std::ifstream b(dir / "two.ckpt", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }
  SUBCASE("corruption is reported") {
    {
      std::ofstream f(dir / "bad.ckpt", std::ios::binary);
      f << "NOTACKPT";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), IngestionError);
    std::ifstream in(dir / "one.ckpt", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    {
      std::ofstream f(dir / "short.ckpt", std::ios::binary);
      f << bytes.substr(0, bytes.size() - 5);
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), IngestionError);
  }
  std::filesystem::remove_all(dir);
}

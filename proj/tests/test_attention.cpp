#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "avex/attention.hpp"
#include "avex/errors.hpp"
#include "avex/parameters.hpp"
#include "support/gradcheck.hpp"

using namespace avex;

namespace {

Matrix uniform(Index r, Index c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

ParameterSet random_params(Index dh, Index da, std::mt19937_64& rng) {
  ParameterSet ps;
  ps.add("att.query", uniform(dh, da, rng));
  ps.add("att.key", uniform(dh, da, rng));
  ps.add("att.pair_bias", uniform(1, da, rng));
  ps.add("att.score", uniform(da, 1, rng));
  ps.add("att.score_bias", uniform(1, 1, rng));
  return ps;
}

struct Naive {
  Matrix alpha;
  Matrix focused;
};

// Direct double loop over token pairs.
Naive naive_attend(const ParameterSet& ps, const Matrix& h, Index valid) {
  const Matrix& wq = ps.at("att.query").value();
  const Matrix& wk = ps.at("att.key").value();
  const Matrix& bg = ps.at("att.pair_bias").value();
  const Matrix& wa = ps.at("att.score").value();
  const double ba = ps.at("att.score_bias").value()(0, 0);
  const Index n = h.rows();
  const Index dh = h.cols();
  const Index da = wq.cols();
  Naive out{Matrix::Zero(n, n), Matrix::Zero(n, dh)};
  for (Index t = 0; t < valid; ++t) {
    for (Index tp = 0; tp < valid; ++tp) {
      double score = ba;
      for (Index j = 0; j < da; ++j) {
        double pre = bg(0, j);
        for (Index k = 0; k < dh; ++k) pre += h(t, k) * wq(k, j) + h(tp, k) * wk(k, j);
        score += std::tanh(pre) * wa(j, 0);
      }
      const double a = 1.0 / (1.0 + std::exp(-score));
      out.alpha(t, tp) = a;
      out.focused.row(t) += a * h.row(tp);
    }
  }
  return out;
}

AttentionOutput run(Graph<double>& g, ParameterSet& ps, const Matrix& h, const Matrix& mask, SequenceLayout layout) {
  return attend(attention_weights(g, ps, "att"), g.constant(h), mask, layout);
}

}  // namespace

TEST_CASE("init shapes") {
  ParameterSet ps;
  std::mt19937_64 rng(1);
  init_attention(ps, "att", 6, 4, rng);
  CHECK(ps.at("att.query").value().rows() == 6);
  CHECK(ps.at("att.query").value().cols() == 4);
  CHECK(ps.at("att.score").value().cols() == 1);
  CHECK(ps.at("att.score_bias").value().size() == 1);
}

TEST_CASE("zero scorer gives one half everywhere") {
  std::mt19937_64 rng(2);
  ParameterSet ps = random_params(4, 3, rng);
  ps.at("att.score").value().setZero();
  ps.at("att.score_bias").value().setZero();
  Matrix h = uniform(5, 4, rng);
  Graph<double> g;
  AttentionOutput out = run(g, ps, h, Matrix::Ones(5, 1), {5, 1});
  CHECK(attention_matrix(out, 0).isConstant(0.5));
  const Matrix expected = 0.5 * h.colwise().sum();
  for (Index t = 0; t < 5; ++t) CHECK((out.focused.value().row(t) - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("single token closed form") {
  std::mt19937_64 rng(3);
  ParameterSet ps = random_params(4, 3, rng);
  Matrix h = uniform(1, 4, rng);
  const Matrix pre = h * (ps.at("att.query").value() + ps.at("att.key").value()) + ps.at("att.pair_bias").value();
  const double s = (pre.array().tanh().matrix() * ps.at("att.score").value())(0, 0) +
                   ps.at("att.score_bias").value()(0, 0);
  const double alpha = 1 / (1 + std::exp(-s));
  Graph<double> g;
  AttentionOutput out = run(g, ps, h, Matrix::Ones(1, 1), {1, 1});
  CHECK(attention_matrix(out, 0)(0, 0) == doctest::Approx(alpha).epsilon(1e-14));
  CHECK((out.focused.value() - alpha * h).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("matches the naive double loop, with padding and batching") {
  std::mt19937_64 rng(4);
  ParameterSet ps = random_params(5, 3, rng);
  Matrix h1 = uniform(4, 5, rng);
  Matrix h2 = uniform(4, 5, rng);
  SequenceLayout layout{4, 2};
  Matrix h(8, 5);
  Matrix mask = Matrix::Ones(8, 1);
  for (Index t = 0; t < 4; ++t) {
    h.row(layout.row(t, 0)) = h1.row(t);
    h.row(layout.row(t, 1)) = h2.row(t);
  }
  mask(layout.row(3, 1), 0) = 0;
  Graph<double> g;
  AttentionOutput out = run(g, ps, h, mask, layout);
  Naive n1 = naive_attend(ps, h1, 4);
  Naive n2 = naive_attend(ps, h2, 3);
  CHECK((attention_matrix(out, 0) - n1.alpha).cwiseAbs().maxCoeff() < 1e-13);
  CHECK((attention_matrix(out, 1) - n2.alpha).cwiseAbs().maxCoeff() < 1e-13);
  for (Index t = 0; t < 4; ++t) {
    CHECK((out.focused.value().row(layout.row(t, 0)) - n1.focused.row(t)).cwiseAbs().maxCoeff() < 1e-13);
    CHECK((out.focused.value().row(layout.row(t, 1)) - n2.focused.row(t)).cwiseAbs().maxCoeff() < 1e-13);
  }
  const Matrix a2 = attention_matrix(out, 1);
  CHECK(a2.row(3).isZero(0));
  CHECK(a2.col(3).isZero(0));
  for (Index t = 0; t < 3; ++t) {
    for (Index tp = 0; tp < 3; ++tp) {
      CHECK(a2(t, tp) > 0);
      CHECK(a2(t, tp) < 1);
    }
  }
}

TEST_CASE("permutation equivariance") {
  std::mt19937_64 rng(5);
  ParameterSet ps = random_params(4, 4, rng);
  Matrix h = uniform(5, 4, rng);
  std::vector<Index> perm(5);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix hp(5, 4);
  for (Index i = 0; i < 5; ++i) hp.row(i) = h.row(perm[i]);
  Graph<double> g;
  AttentionOutput a = run(g, ps, h, Matrix::Ones(5, 1), {5, 1});
  AttentionOutput b = run(g, ps, hp, Matrix::Ones(5, 1), {5, 1});
  const Matrix A = attention_matrix(a, 0);
  const Matrix Bm = attention_matrix(b, 0);
  for (Index i = 0; i < 5; ++i) {
    CHECK((b.focused.value().row(i) - a.focused.value().row(perm[i])).cwiseAbs().maxCoeff() < 1e-13);
    for (Index j = 0; j < 5; ++j) CHECK(std::abs(Bm(i, j) - A(perm[i], perm[j])) < 1e-14);
  }
}

TEST_CASE("gradients through attend match finite differences") {
  std::mt19937_64 rng(6);
  ParameterSet ps = random_params(3, 2, rng);
  Parameter h = Parameter::from_matrix(uniform(4, 3, rng), true);
  const Matrix readout = uniform(4, 3, rng);
  std::vector<std::pair<std::string, Tensor<double>*>> tensors{{"h", &h}};
  for (const auto& name : ps.names()) tensors.push_back({name, &ps.at(name)});
  Matrix mask = Matrix::Ones(4, 1);
  mask(3, 0) = 0;
  auto loss = [&](Graph<double>& g) {
    AttentionOutput out = attend(attention_weights(g, ps, "att"), g.parameter(h), mask, {4, 1});
    return add(sum(mul(out.focused, g.constant(readout))), sum(out.pair_scores));
  };
  const auto r = avex::testing::gradcheck(tensors, loss);
  CAPTURE(r.worst);
  CHECK(r.max_relative_error < 1e-3);
}

TEST_CASE("shape errors") {
  std::mt19937_64 rng(7);
  ParameterSet ps = random_params(4, 3, rng);
  Graph<double> g;
  CHECK_THROWS_AS(run(g, ps, uniform(3, 5, rng), Matrix::Ones(3, 1), {3, 1}), ContractError);
  CHECK_THROWS_AS(run(g, ps, uniform(3, 4, rng), Matrix::Ones(2, 1), {3, 1}), DimensionError);
}

TEST_CASE("heatmap export") {
  const auto dir = std::filesystem::temp_directory_path() / "avex_heatmap";
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(8);

  SUBCASE("two tokens give a three by three CSV") {
    AttentionMatrix a{uniform(2, 2, rng).cwiseAbs(), {"duck", "flavor"}};
    export_heatmap(a, dir / "two");
    std::ifstream in(dir / "two.csv");
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      CHECK(std::count(line.begin(), line.end(), ',') == 2);
    }
    CHECK(rows == 3);
  }

  SUBCASE("round trip through CSV and JSON twin") {
    AttentionMatrix a{uniform(5, 5, rng).cwiseAbs(), {"pack", "of", "5", ",", "a \"b\""}};
    a.weights(0, 0) = 0.123456789012345678;
    export_heatmap(a, dir / "five");
    AttentionMatrix back = read_heatmap_csv(dir / "five.csv");
    CHECK(back.tokens == a.tokens);
    CHECK(back.weights == a.weights);
    std::ifstream js(dir / "five.json");
    const auto j = nlohmann::json::parse(js);
    CHECK(j.at("tokens").get<std::vector<std::string>>() == a.tokens);
    for (Index r = 0; r < 5; ++r) {
      for (Index c = 0; c < 5; ++c) CHECK(j.at("matrix").at(r).at(c).get<double>() == back.weights(r, c));
    }
  }

  SUBCASE("bad inputs") {
    AttentionMatrix bad{Matrix::Zero(2, 3), {"a", "b"}};
    CHECK_THROWS_AS(export_heatmap(bad, dir / "bad"), ContractError);
    AttentionMatrix ok{Matrix::Zero(1, 1), {"a"}};
    CHECK_THROWS_AS(export_heatmap(ok, dir / "missing" / "sub" / "x"), IoError);
  }
  std::filesystem::remove_all(dir);
}

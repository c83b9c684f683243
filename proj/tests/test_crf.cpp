#include <doctest.h>

#include <cmath>
#include <random>

#include "avex/crf.hpp"
#include "avex/errors.hpp"
#include "support/brute_crf.hpp"
#include "support/gradcheck.hpp"

using namespace avex;
using namespace avex::crf;
using avex::testing::brute_force;
using avex::testing::brute_score;

namespace {

Matrix uniform(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace

TEST_CASE("sequence score") {
  std::mt19937_64 rng(1);
  const Matrix T0 = Matrix::Zero(6, 6);
  const Matrix E0 = Matrix::Zero(3, 4);
  CHECK(score_sequence(T0, E0, std::vector<int>{0, 3, 2}) == 0.0);

  const Matrix T = uniform(6, 6, rng);
  const Matrix E1 = uniform(1, 4, rng);
  CHECK(score_sequence(T, E1, std::vector<int>{2}) == doctest::Approx(T(4, 2) + E1(0, 2) + T(2, 5)).epsilon(1e-15));

  const Matrix E = uniform(3, 4, rng);
  const std::vector<int> y{1, 3, 0};
  const double hand = T(4, 1) + E(0, 1) + T(1, 3) + E(1, 3) + T(3, 0) + E(2, 0) + T(0, 5);
  CHECK(score_sequence(T, E, y) == doctest::Approx(hand).epsilon(1e-14));
  CHECK_THROWS_AS(score_sequence(T, E, std::vector<int>{1, 4, 0}), ContractError);
  CHECK_THROWS_AS(score_sequence(T, E, std::vector<int>{1, -1, 0}), ContractError);
  CHECK_THROWS_AS(score_sequence(Matrix(Matrix::Zero(5, 5)), E, y), DimensionError);
}

TEST_CASE("closed-form partition values") {
  CHECK(log_partition(Matrix(Matrix::Zero(6, 6)), Matrix(Matrix::Zero(1, 4))) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(nll(Matrix(Matrix::Zero(6, 6)), Matrix(Matrix::Zero(2, 4)), std::vector<int>{3, 1}) ==
        doctest::Approx(2 * std::log(4.0)).epsilon(1e-14));
  CHECK(sequence_probability(Matrix(Matrix::Zero(6, 6)), Matrix(Matrix::Zero(1, 4)), std::vector<int>{2}) ==
        doctest::Approx(0.25).epsilon(1e-14));

  std::mt19937_64 rng(2);
  const Matrix T = uniform(6, 6, rng);
  const Matrix E = uniform(4, 4, rng);
  const double shifted = log_partition(T, Matrix(E.array() + 1.75));
  CHECK(shifted == doctest::Approx(log_partition(T, E) + 4 * 1.75).epsilon(1e-13));
}

TEST_CASE("exact agreement with path enumeration") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 60; ++trial) {
    const Index K = 2 + trial % 4;
    const Index n = 1 + (trial / 4) % 5;
    const Matrix T = uniform(K + 2, K + 2, rng, 2.0);
    const Matrix E = uniform(n, K, rng, 2.0);
    const auto brute = brute_force(T, E);
    CAPTURE(K);
    CAPTURE(n);
    CHECK(std::abs(log_partition(T, E) - brute.log_z) <= 1e-8);
    const auto v = viterbi(T, E);
    CHECK(v.tags == brute.argmax);
    CHECK(std::abs(v.score - brute.best) <= 1e-10);

    double total = 0;
    for (std::size_t i = 0; i < brute.paths.size(); ++i) {
      const double p = sequence_probability(T, E, brute.paths[i]);
      CHECK(std::abs(p - std::exp(brute.scores[i] - brute.log_z)) <= 1e-10);
      CHECK(std::abs(score_sequence(T, E, brute.paths[i]) - brute.scores[i]) <= 1e-12);
      CHECK(nll(T, E, brute.paths[i]) >= 0);
      total += p;
    }
    CHECK(std::abs(total - 1.0) <= 1e-10);

    const auto m = marginals(T, E, n);
    Matrix unary = Matrix::Zero(n, K);
    for (std::size_t i = 0; i < brute.paths.size(); ++i) {
      const double p = std::exp(brute.scores[i] - brute.log_z);
      for (Index t = 0; t < n; ++t) unary(t, brute.paths[i][static_cast<std::size_t>(t)]) += p;
    }
    CHECK((m.unary - unary).cwiseAbs().maxCoeff() <= 1e-10);
  }
}

TEST_CASE("viterbi ties and dominant emissions") {
  const Matrix T0 = Matrix::Zero(6, 6);
  CHECK(viterbi(T0, Matrix(Matrix::Zero(4, 4))).tags == std::vector<int>{0, 0, 0, 0});
  Matrix E = Matrix::Zero(3, 4);
  E(0, 2) = 10;
  E(1, 0) = 10;
  E(2, 3) = 10;
  CHECK(viterbi(T0, E).tags == std::vector<int>{2, 0, 3});

  std::mt19937_64 rng(4);
  const Matrix T = uniform(7, 7, rng);
  const Matrix Er = uniform(6, 5, rng);
  const auto best = viterbi(T, Er);
  const double pbest = sequence_probability(T, Er, best.tags);
  std::uniform_int_distribution<int> tag(0, 4);
  for (int i = 0; i < 100; ++i) {
    std::vector<int> y(6);
    for (auto& v : y) v = tag(rng);
    CHECK(sequence_probability(T, Er, y) <= pbest + 1e-15);
  }
}

TEST_CASE("forbidden transitions and the nll floor") {
  Matrix T = Matrix::Zero(5, 5);
  T(0, 1) = -std::numeric_limits<double>::infinity();
  T(3, 1) = -std::numeric_limits<double>::infinity();
  const Matrix E = Matrix::Zero(2, 3);
  const auto brute = brute_force(T, E);
  CHECK(std::abs(log_partition(T, E) - brute.log_z) <= 1e-12);
  CHECK(std::abs(log_partition(T, E) - std::log(5.0)) <= 1e-12);
  CHECK(sequence_probability(T, E, std::vector<int>{0, 1}) == 0.0);

  Matrix peaked = Matrix::Zero(2, 3);
  peaked(0, 2) = peaked(1, 0) = 400;
  CHECK(nll(Matrix(Matrix::Zero(5, 5)), peaked, std::vector<int>{2, 0}) == doctest::Approx(0.0));
}

TEST_CASE("masked suffix positions never matter") {
  std::mt19937_64 rng(5);
  const Matrix T = uniform(6, 6, rng);
  Matrix E = uniform(5, 4, rng);
  const std::vector<int> y{1, 2, 0, 3, 3};
  const double z = log_partition(T, E, 3);
  const auto v = viterbi(T, E, 3);
  const double p = sequence_probability(T, E, y, 3);
  E.bottomRows(2) = uniform(2, 4, rng, 100);
  CHECK(log_partition(T, E, 3) == z);
  CHECK(viterbi(T, E, 3).tags == v.tags);
  CHECK(sequence_probability(T, E, y, 3) == p);
  CHECK(std::abs(z - log_partition(T, Matrix(E.topRows(3)))) < 1e-14);
}

TEST_CASE("nll gradients") {
  std::mt19937_64 rng(6);
  const Index K = 3;
  Tensor<double> emissions = Tensor<double>::from_matrix(uniform(8, K, rng), true);
  Tensor<double> transitions = Tensor<double>::from_matrix(uniform(K + 2, K + 2, rng), true);
  const std::vector<TagSequence> gold{{0, 2, 1, 1}, {2, 0, 0, 0}};
  const std::vector<Index> lengths{4, 2};

  SUBCASE("match finite differences") {
    auto loss = [&](Graph<double>& g) {
      return nll_loss(g.parameter(emissions), g.parameter(transitions), gold, lengths, 2);
    };
    const auto r = avex::testing::gradcheck({{"emissions", &emissions}, {"transitions", &transitions}}, loss);
    CAPTURE(r.worst);
    CHECK(r.max_relative_error < 1e-3);
  }

  SUBCASE("emission gradient is marginals minus gold one-hots") {
    emissions.zero_grad();
    Graph<double> g;
    g.backward(nll_loss(g.parameter(emissions), g.parameter(transitions), gold, lengths, 2));
    for (Index b = 0; b < 2; ++b) {
      const Index len = lengths[static_cast<std::size_t>(b)];
      Matrix e(len, K);
      for (Index t = 0; t < len; ++t) e.row(t) = emissions.value().row(t * 2 + b);
      const auto m = marginals(transitions.value(), e, len);
      for (Index t = 0; t < 4; ++t) {
        Matrix expected = Matrix::Zero(1, K);
        if (t < len) {
          expected = m.unary.row(t);
          expected(0, gold[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) -= 1;
        }
        CHECK((emissions.grad().row(t * 2 + b) - expected).cwiseAbs().maxCoeff() < 1e-12);
      }
    }
  }

  SUBCASE("summed value equals per-sequence nll") {
    Graph<double> g;
    const double total =
        nll_loss(g.constant(emissions.value()), g.constant(transitions.value()), gold, lengths, 2).value()(0, 0);
    double expected = 0;
    for (Index b = 0; b < 2; ++b) {
      const Index len = lengths[static_cast<std::size_t>(b)];
      Matrix e(len, K);
      for (Index t = 0; t < len; ++t) e.row(t) = emissions.value().row(t * 2 + b);
      expected += nll(transitions.value(), e, gold[static_cast<std::size_t>(b)], len);
    }
    CHECK(total == doctest::Approx(expected).epsilon(1e-13));
  }
}

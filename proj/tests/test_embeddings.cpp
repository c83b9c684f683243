#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "avex/adam.hpp"
#include "avex/embeddings.hpp"
#include "avex/errors.hpp"
#include "avex/parameters.hpp"

using namespace avex;

namespace {

std::filesystem::path write_vectors(const std::string& name, const std::string& body) {
  auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path) << body;
  return path;
}

}  // namespace

TEST_CASE("vocabulary construction") {
  const std::vector<std::vector<std::string>> corpus{{"a", "b", "a"}};
  Vocabulary v = build_vocabulary(corpus, 1);
  CHECK(v.size() == 4);
  CHECK(v.token(Vocabulary::kPad) == "<pad>");
  CHECK(v.token(Vocabulary::kUnk) == "<unk>");
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));

  Vocabulary strict = build_vocabulary(corpus, 2);
  CHECK(strict.size() == 3);
  CHECK(strict.index("b") == Vocabulary::kUnk);
  CHECK(strict.index("never seen") == Vocabulary::kUnk);

  std::vector<std::string> many;
  for (int i = 0; i < 1000; ++i) many.push_back("tok" + std::to_string(i));
  CHECK(build_vocabulary({many}, 1).size() == 1002);

  CHECK_THROWS_AS(build_vocabulary({}, 1), ContractError);
}

TEST_CASE("vocabulary indices are dense and bijective") {
  Vocabulary v = build_vocabulary({{"x", "y", "Z", "x", "w"}}, 1, true);
  for (Index i = 0; i < v.size(); ++i) CHECK(v.index(v.token(i)) == i);
  CHECK(v.index("z") == v.index("Z"));
  Vocabulary cased = build_vocabulary({{"Z", "z"}}, 1, false);
  CHECK(cased.index("Z") != cased.index("z"));
  const std::vector<std::string> any{"q", "x", "", "<pad>"};
  for (Index i : v.indices(any)) {
    CHECK(i >= 0);
    CHECK(i < v.size());
  }
}

TEST_CASE("lookup gathers rows and scatters gradient") {
  Vocabulary v = build_vocabulary({{"a", "b"}}, 1);
  std::mt19937_64 rng(1);
  Parameter table = Parameter::from_matrix(random_embedding_table(v, 5, rng), true);
  CHECK(table.value().row(Vocabulary::kPad).isZero(0));

  Graph<double> g;
  Var<double> pad = lookup(g.parameter(table), {Vocabulary::kPad});
  CHECK(pad.value().isZero(0));

  const Index a = v.index("a");
  table.zero_grad();
  Graph<double> g2;
  Var<double> rows = lookup(g2.parameter(table), {a, a, Vocabulary::kPad});
  CHECK(rows.rows() == 3);
  CHECK(rows.value().row(0) == rows.value().row(1));
  g2.backward(sum(rows));
  CHECK(table.grad().row(a) == Matrix::Constant(1, 5, 2.0));
  CHECK(table.grad().row(Vocabulary::kPad).isZero(0));

  Graph<double> g3;
  CHECK_THROWS_AS(lookup(g3.parameter(table), {v.size()}), ContractError);
  CHECK_THROWS_AS(lookup(g3.parameter(table), {-1}), ContractError);
}

TEST_CASE("the PAD row stays zero through training") {
  Vocabulary v = build_vocabulary({{"a", "b", "c"}}, 1);
  std::mt19937_64 rng(2);
  Parameter table = Parameter::from_matrix(random_embedding_table(v, 4, rng), true);
  std::vector<Tensor<double>*> ps{&table};
  auto state = AdamState<double>::zeros_like(ps);
  for (int step = 0; step < 25; ++step) {
    table.zero_grad();
    Graph<double> g;
    Var<double> e = lookup(g.parameter(table), {2, 0, 3, 0, 4});
    g.backward(sum(mul(tanh(e), e)));
    adam_step(ps, state, {});
  }
  CHECK(table.value().row(Vocabulary::kPad).isZero(0));
  CHECK(table.value().allFinite());
}

TEST_CASE("random initialisation is seeded and bounded") {
  Vocabulary v = build_vocabulary({{"a", "b", "c"}}, 1);
  std::mt19937_64 r1(9);
  std::mt19937_64 r2(9);
  Matrix t1 = random_embedding_table(v, 8, r1);
  Matrix t2 = random_embedding_table(v, 8, r2);
  CHECK(t1 == t2);
  CHECK(t1.cwiseAbs().maxCoeff() <= kOovInitRange);
}

TEST_CASE("pretrained vectors") {
  Vocabulary v = build_vocabulary({{"dog", "cat", "emu"}}, 1);
  auto repeat = [](const std::string& v) {
    std::string s;
    for (int i = 0; i < 100; ++i) s += " " + v;
    return s;
  };
  std::string dog_line = "dog";
  for (int i = 0; i < 100; ++i) dog_line += " " + std::to_string(0.001 * i);
  const auto path =
      write_vectors("avex_vectors.txt", dog_line + "\ncat" + repeat("0.5") + "\nunused" + repeat("1") + "\n");
  std::mt19937_64 r1(4);
  Matrix table = load_pretrained(path, v, 100, r1);
  for (int i = 0; i < 100; ++i) CHECK(table(v.index("dog"), i) == std::stod(std::to_string(0.001 * i)));
  CHECK(table.row(v.index("cat")).isConstant(0.5));
  CHECK(table.row(Vocabulary::kPad).isZero(0));
  CHECK(table.row(v.index("emu")).cwiseAbs().maxCoeff() <= kOovInitRange);

  std::mt19937_64 r2(4);
  CHECK(load_pretrained(path, v, 100, r2) == table);

  std::mt19937_64 r3(4);
  CHECK_THROWS_AS(load_pretrained(path, v, 50, r3), ConfigError);

  SUBCASE("malformed lines carry the line number") {
    const auto bad = write_vectors("avex_vectors_bad.txt", "dog 0.1 0.2\ncat 0.3 zz\n");
    std::mt19937_64 r(4);
    try {
      load_pretrained(bad, v, 2, r);
      FAIL("expected ingestion error");
    } catch (const IngestionError& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    const auto ragged = write_vectors("avex_vectors_ragged.txt", "dog 0.1 0.2\ncat 0.3\n");
    CHECK_THROWS_AS(load_pretrained(ragged, v, 2, r), IngestionError);
  }
}

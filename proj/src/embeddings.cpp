#include "avex/embeddings.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "avex/errors.hpp"

namespace avex {

namespace {

std::string ascii_lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) {
    return c < 128 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
  });
  return s;
}

}  // namespace

Vocabulary::Vocabulary(bool lowercase) : lowercase_(lowercase) {
  tokens_ = {kPadToken, kUnkToken};
  index_ = {{kPadToken, kPad}, {kUnkToken, kUnk}};
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens, bool lowercase) {
  if (tokens.size() < 2 || tokens[0] != kPadToken || tokens[1] != kUnkToken) {
    throw IngestionError("vocabulary must start with the PAD and UNK entries");
  }
  Vocabulary v(lowercase);
  for (std::size_t i = 2; i < tokens.size(); ++i) {
    if (v.index_.count(tokens[i])) throw IngestionError("duplicate vocabulary token '" + tokens[i] + "'");
    v.add(tokens[i]);
  }
  return v;
}

std::string Vocabulary::normalize(const std::string& token) const {
  return lowercase_ ? ascii_lower(token) : token;
}

bool Vocabulary::contains(const std::string& token) const { return index_.count(normalize(token)) != 0; }

Index Vocabulary::index(const std::string& token) const {
  auto it = index_.find(normalize(token));
  return it == index_.end() ? kUnk : it->second;
}

std::vector<Index> Vocabulary::indices(std::span<const std::string> tokens) const {
  std::vector<Index> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(index(t));
  return out;
}

Index Vocabulary::add(const std::string& token) {
  std::string key = normalize(token);
  auto [it, inserted] = index_.emplace(key, static_cast<Index>(tokens_.size()));
  if (inserted) tokens_.push_back(key);
  return it->second;
}

Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus, int min_count,
                            bool lowercase) {
  if (corpus.empty()) throw ContractError("build_vocabulary: empty corpus");
  std::unordered_map<std::string, int> counts;
  std::vector<std::string> order;
  for (const auto& sentence : corpus) {
    for (const auto& raw : sentence) {
      std::string tok = lowercase ? ascii_lower(raw) : raw;
      if (counts[tok]++ == 0) order.push_back(tok);
    }
  }
  Vocabulary vocab(lowercase);
  for (const auto& tok : order) {
    if (counts[tok] >= min_count && tok != Vocabulary::kPadToken && tok != Vocabulary::kUnkToken) {
      vocab.add(tok);
    }
  }
  return vocab;
}

Matrix random_embedding_table(const Vocabulary& vocab, Index dim, std::mt19937_64& rng) {
  if (dim <= 0) throw ConfigError("embedding dimension must be positive");
  std::uniform_real_distribution<double> init(-kOovInitRange, kOovInitRange);
  Matrix table(vocab.size(), dim);
  for (Index r = 0; r < table.rows(); ++r) {
    for (Index c = 0; c < dim; ++c) table(r, c) = init(rng);
  }
  table.row(Vocabulary::kPad).setZero();
  return table;
}

Matrix load_pretrained(const std::filesystem::path& path, const Vocabulary& vocab, Index dim,
                       std::mt19937_64& rng) {
  Matrix table = random_embedding_table(vocab, dim, rng);
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pretrained vectors '" + path.string() + "'");

  std::string line;
  std::size_t line_no = 0;
  std::vector<double> values;
  bool first_vector = true;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string token;
    if (!(fields >> token)) continue;
    values.clear();
    std::string field;
    while (fields >> field) {
      double v = 0;
      auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
      if (ec != std::errc() || ptr != field.data() + field.size()) {
        throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": unparseable value '" +
                             field + "'");
      }
      values.push_back(v);
    }
    if (values.empty()) {
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": token without vector");
    }
    if (static_cast<Index>(values.size()) != dim) {
      if (first_vector) {
        throw ConfigError("pretrained vectors have dimension " + std::to_string(values.size()) +
                          " but the model expects " + std::to_string(dim));
      }
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                           std::to_string(dim) + " values, found " + std::to_string(values.size()));
    }
    first_vector = false;
    if (!vocab.contains(token)) continue;
    Index row = vocab.index(token);
    if (row == Vocabulary::kPad || row == Vocabulary::kUnk) continue;
    for (Index c = 0; c < dim; ++c) table(row, c) = values[static_cast<std::size_t>(c)];
  }
  if (!table.allFinite()) throw IngestionError(path.string() + ": non-finite vector value");
  return table;
}

Var<double> lookup(Var<double> table, const std::vector<Index>& indices) {
  const Matrix& tv = table.value();
  Matrix out(static_cast<Index>(indices.size()), tv.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= tv.rows()) {
      throw ContractError("lookup: index " + std::to_string(indices[i]) + " outside vocabulary of size " +
                          std::to_string(tv.rows()));
    }
    out.row(static_cast<Index>(i)) = tv.row(indices[i]);
  }
  return table.graph->record(
      Op::kRowSelect, {table.id}, std::move(out),
      [table, indices](Graph<double>& g, int self) {
        const Matrix& dy = g.grad(self);
        Matrix& dt = g.grad(table.id);
        for (std::size_t i = 0; i < indices.size(); ++i) {
          if (indices[i] != Vocabulary::kPad) dt.row(indices[i]) += dy.row(static_cast<Index>(i));
        }
      },
      "embedding-lookup");
}

}  // namespace avex

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "avex/autodiff.hpp"

namespace avex {

/// Token to index map. Index 0 is PAD and index 1 is UNK; every other token
/// has a dense index in first-seen order.
class Vocabulary {
 public:
  static constexpr Index kPad = 0;
  static constexpr Index kUnk = 1;
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  explicit Vocabulary(bool lowercase = true);

  /// Rebuilds from a persisted token list (reserved entries included).
  static Vocabulary from_tokens(const std::vector<std::string>& tokens, bool lowercase);

  Index size() const { return static_cast<Index>(tokens_.size()); }
  bool lowercase() const { return lowercase_; }
  bool contains(const std::string& token) const;

  /// Unknown tokens map to kUnk.
  Index index(const std::string& token) const;
  std::vector<Index> indices(std::span<const std::string> tokens) const;
  const std::string& token(Index i) const { return tokens_.at(static_cast<std::size_t>(i)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  Index add(const std::string& token);

 private:
  std::string normalize(const std::string& token) const;

  bool lowercase_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, Index> index_;
};

/// Tokens occurring at least `min_count` times receive an index.
Vocabulary build_vocabulary(const std::vector<std::vector<std::string>>& corpus, int min_count = 1,
                            bool lowercase = true);

inline constexpr double kOovInitRange = 0.25;

/// |V| x d table with the PAD row zero and every other row uniform in
/// [-0.25, 0.25].
Matrix random_embedding_table(const Vocabulary& vocab, Index dim, std::mt19937_64& rng);

/// Reads whitespace-separated "token v1 ... vd" lines. Vocabulary tokens found
/// in the file take the file vector; the rest keep their random row.
Matrix load_pretrained(const std::filesystem::path& path, const Vocabulary& vocab, Index dim,
                       std::mt19937_64& rng);

/// Row gather from the embedding table. The PAD row never receives gradient.
Var<double> lookup(Var<double> table, const std::vector<Index>& indices);

}  // namespace avex

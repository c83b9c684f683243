#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "avex/tagging.hpp"

namespace avex {

struct Token {
  std::string text;  // lowercased
  int begin = 0;     // byte offsets into the source text
  int end = 0;
};

/// Lowercases, splits on whitespace and splits the characters , . ( ) & /
/// into tokens of their own. A '.' between two digits stays inside its
/// number, so "3.5" is one token.
std::vector<Token> tokenize_with_offsets(const std::string& text);
std::vector<std::string> tokenize(const std::string& text);

struct Annotation {
  std::string value;
  int start = 0;  // byte offsets, half-open
  int end = 0;
};

struct ProductProfile {
  std::string id;
  std::string field_kind = "title";  // title | description | bullet
  std::string text;
  std::map<std::string, std::vector<Annotation>> annotations;
  /// Optional split hint written by the synthetic generator ("train"/"test").
  std::string side;
};

inline constexpr int kCorpusVersion = 1;

nlohmann::json to_json(const ProductProfile& p);
ProductProfile profile_from_json(const nlohmann::json& j);

/// Line-delimited JSON records. Blank lines are skipped; unknown fields are
/// ignored. Offsets are validated against the text.
std::vector<ProductProfile> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const std::vector<ProductProfile>& corpus);

/// Tokens plus gold spans per attribute.
struct LabeledSample {
  std::string id;
  std::vector<std::string> tokens;
  SpanMap spans;
};

/// Projects character annotations onto token spans. Offsets that fall inside
/// a token are snapped outward to token boundaries with a warning.
LabeledSample to_labeled(const ProductProfile& profile);
std::vector<LabeledSample> to_labeled(const std::vector<ProductProfile>& corpus);

/// Gold value set of a sample restricted to `attributes` (all when empty).
ExtractionResult gold_values(const LabeledSample& sample, const std::vector<std::string>& attributes = {});

enum class SplitKind { kRandom, kDisjoint };

struct DatasetSplit {
  SplitKind kind = SplitKind::kRandom;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

/// `ratio` is the train fraction. Disjoint splits group samples that share
/// any (attribute, value) pair among `attributes` (all when empty) and
/// assign whole groups, largest first, to whichever side it moves closer to
/// the target. They fail when the achieved ratio is off by more than 0.10.
DatasetSplit split(const std::vector<LabeledSample>& corpus, SplitKind kind, double ratio, std::uint64_t seed,
                   const std::vector<std::string>& attributes = {});

/// Split taken from the generator's side hints.
DatasetSplit split_from_hints(const std::vector<ProductProfile>& corpus);

/// Number of (attribute, value) pairs occurring on both sides.
std::size_t shared_values(const std::vector<LabeledSample>& corpus, const DatasetSplit& split,
                          const std::vector<std::string>& attributes = {});

SplitKind parse_split_kind(const std::string& name);

/// Declarative synthetic-corpus description; see data/synth_dogfood.json.
struct SynthSpec {
  int samples = 1000;
  int test_samples = 500;
  double owa_fraction = 0.0;
  double stack_probability = 0.0;
  std::string field_kind = "title";
  std::map<std::string, std::vector<std::string>> attributes;
  std::vector<std::string> stackable;
  std::vector<std::string> conjunctions = {"and", "&"};
  std::map<std::string, std::vector<std::string>> fillers;
  std::vector<std::string> templates;
};

SynthSpec synth_spec_from_json(const nlohmann::json& j);
SynthSpec load_synth_spec(const std::filesystem::path& path);

/// Fills templates with attribute values and fillers. A fraction
/// `owa_fraction` of each attribute's values is reserved for test-side
/// samples. Gold offsets are exact because text is assembled token by token.
std::vector<ProductProfile> generate_synthetic(const SynthSpec& spec, std::uint64_t seed);

}  // namespace avex

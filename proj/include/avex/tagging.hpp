#pragma once

#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace avex {

enum class SchemeKind { kBIOE, kUBIOE, kIOB };

std::string to_string(SchemeKind kind);
SchemeKind parse_scheme_kind(const std::string& name);

/// Half-open token range [start, end).
struct Span {
  int start = 0;
  int end = 0;
  friend bool operator==(const Span&, const Span&) = default;
  friend auto operator<=>(const Span&, const Span&) = default;
};

/// Gold spans per attribute name.
using SpanMap = std::map<std::string, std::vector<Span>>;

/// Extracted value strings per attribute (set semantics).
using ExtractionResult = std::map<std::string, std::set<std::string>>;

/// Tag set for one scheme over one or more attributes. Index 0 is the shared
/// O tag; attribute a owns the positional tags starting at 1 + a * (s - 1),
/// in the order U, B, I, E (UBIOE), B, I, E (BIOE) or B, I (IOB).
class TagScheme {
 public:
  enum class Position { kOutside, kUnit, kBegin, kInside, kEnd };

  TagScheme(SchemeKind kind, std::vector<std::string> attributes, bool bare_b_is_value = true);

  SchemeKind kind() const { return kind_; }
  const std::vector<std::string>& attributes() const { return attributes_; }
  bool bare_b_is_value() const { return bare_b_is_value_; }

  /// Tags per scheme for a single attribute, O included (4, 5 or 3).
  int scheme_size() const;
  int num_tags() const { return static_cast<int>(names_.size()); }

  int outside() const { return 0; }
  int tag(Position pos, int attribute) const;
  Position position(int tag) const;
  /// Attribute index of a tag; -1 for O.
  int attribute_of(int tag) const;
  int attribute_index(const std::string& name) const;

  /// "B", "I", ... for one attribute; "B-brand", ... otherwise.
  const std::string& name(int tag) const { return names_.at(static_cast<std::size_t>(tag)); }
  /// Accepts the canonical names, plus bare symbols for single-attribute schemes.
  std::optional<int> parse(const std::string& symbol) const;

  /// Whether `to` may follow `from` in a well-formed sequence; -1 stands for
  /// the sequence boundary (start when `from`, end when `to`).
  bool allowed(int from, int to) const;

  nlohmann::json to_json() const;
  static TagScheme from_json(const nlohmann::json& j);

  friend bool operator==(const TagScheme& a, const TagScheme& b) {
    return a.kind_ == b.kind_ && a.attributes_ == b.attributes_ && a.bare_b_is_value_ == b.bare_b_is_value_;
  }

 private:
  std::vector<Position> positions() const;

  SchemeKind kind_;
  std::vector<std::string> attributes_;
  bool bare_b_is_value_;
  std::vector<std::string> names_;
};

/// Tags for gold spans. Spans must be in bounds, non-empty and mutually
/// non-overlapping (across attributes too).
std::vector<int> encode_spans(int length, const SpanMap& spans, const TagScheme& scheme);

/// Maximal well-formed segments of a (possibly ill-formed) tag sequence.
/// Segments that break the scheme's pattern are dropped; in BIOE a bare B
/// followed by anything other than I or E is a single-token value when the
/// scheme's bare_b_is_value flag is set.
SpanMap decode_spans(std::span<const int> tags, const TagScheme& scheme);

/// Lowercased, single-space-joined token text for each decoded span.
ExtractionResult decode_tags(std::span<const std::string> tokens, std::span<const int> tags, const TagScheme& scheme);

/// Value set from gold spans.
ExtractionResult spans_to_values(std::span<const std::string> tokens, const SpanMap& spans);

/// Lowercase ASCII and collapse whitespace runs to single spaces.
std::string normalize_value(const std::string& value);

struct PRF {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  long true_positives = 0;
  long predicted = 0;
  long gold = 0;
};

struct EvaluationReport {
  std::map<std::string, PRF> per_attribute;
  PRF micro;
};

struct SampleExtraction {
  std::string sample_id;
  ExtractionResult values;
};

/// Full-credit scoring: a predicted value counts only on an exact string
/// match with a gold value of the same attribute in the same sample.
EvaluationReport evaluate(std::span<const SampleExtraction> predicted, std::span<const SampleExtraction> gold);

}  // namespace avex

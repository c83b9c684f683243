#include "avex/tagging.hpp"

#include <algorithm>
#include <cctype>

#include "avex/errors.hpp"

namespace avex {

std::string to_string(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::kBIOE: return "BIOE";
    case SchemeKind::kUBIOE: return "UBIOE";
    case SchemeKind::kIOB: return "IOB";
  }
  return "?";
}

SchemeKind parse_scheme_kind(const std::string& name) {
  std::string upper = name;
  std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
  if (upper == "BIOE") return SchemeKind::kBIOE;
  if (upper == "UBIOE") return SchemeKind::kUBIOE;
  if (upper == "IOB" || upper == "BIO") return SchemeKind::kIOB;
  throw ConfigError("unknown tagging scheme '" + name + "'");
}

std::vector<TagScheme::Position> TagScheme::positions() const {
  switch (kind_) {
    case SchemeKind::kBIOE: return {Position::kBegin, Position::kInside, Position::kEnd};
    case SchemeKind::kUBIOE: return {Position::kUnit, Position::kBegin, Position::kInside, Position::kEnd};
    case SchemeKind::kIOB: return {Position::kBegin, Position::kInside};
  }
  return {};
}

TagScheme::TagScheme(SchemeKind kind, std::vector<std::string> attributes, bool bare_b_is_value)
    : kind_(kind), attributes_(std::move(attributes)), bare_b_is_value_(bare_b_is_value) {
  if (attributes_.empty()) throw ConfigError("a tag scheme needs at least one attribute");
  std::set<std::string> seen;
  for (const auto& a : attributes_) {
    if (a.empty() || !seen.insert(a).second) throw ConfigError("attribute names must be unique and non-empty");
  }
  names_.push_back("O");
  for (const auto& attr : attributes_) {
    for (Position p : positions()) {
      std::string sym;
      switch (p) {
        case Position::kUnit: sym = "U"; break;
        case Position::kBegin: sym = "B"; break;
        case Position::kInside: sym = "I"; break;
        case Position::kEnd: sym = "E"; break;
        case Position::kOutside: sym = "O"; break;
      }
      names_.push_back(attributes_.size() == 1 ? sym : sym + "-" + attr);
    }
  }
}

int TagScheme::scheme_size() const { return static_cast<int>(positions().size()) + 1; }

int TagScheme::tag(Position pos, int attribute) const {
  if (pos == Position::kOutside) return 0;
  if (attribute < 0 || attribute >= static_cast<int>(attributes_.size())) {
    throw ContractError("tag: attribute index out of range");
  }
  const auto ps = positions();
  auto it = std::find(ps.begin(), ps.end(), pos);
  if (it == ps.end()) throw ContractError("tag: position not part of the " + to_string(kind_) + " scheme");
  return 1 + attribute * (scheme_size() - 1) + static_cast<int>(it - ps.begin());
}

TagScheme::Position TagScheme::position(int tag) const {
  if (tag < 0 || tag >= num_tags()) throw ContractError("tag index " + std::to_string(tag) + " out of range");
  if (tag == 0) return Position::kOutside;
  return positions()[static_cast<std::size_t>((tag - 1) % (scheme_size() - 1))];
}

int TagScheme::attribute_of(int tag) const {
  if (tag < 0 || tag >= num_tags()) throw ContractError("tag index " + std::to_string(tag) + " out of range");
  return tag == 0 ? -1 : (tag - 1) / (scheme_size() - 1);
}

int TagScheme::attribute_index(const std::string& name) const {
  auto it = std::find(attributes_.begin(), attributes_.end(), name);
  return it == attributes_.end() ? -1 : static_cast<int>(it - attributes_.begin());
}

std::optional<int> TagScheme::parse(const std::string& symbol) const {
  for (int t = 0; t < num_tags(); ++t) {
    if (names_[static_cast<std::size_t>(t)] == symbol) return t;
  }
  if (attributes_.size() == 1 && symbol.size() > 2 && symbol[1] == '-' &&
      symbol.substr(2) == attributes_.front()) {
    return parse(symbol.substr(0, 1));
  }
  return std::nullopt;
}

bool TagScheme::allowed(int from, int to) const {
  auto pos_of = [&](int t) { return t < 0 ? Position::kOutside : position(t); };
  const Position p = pos_of(from);
  const Position q = pos_of(to);
  const bool same_attr = from >= 0 && to >= 0 && attribute_of(from) == attribute_of(to);
  const bool from_open = p == Position::kBegin || p == Position::kInside;

  // Continuations that require an open segment of the same attribute.
  if (q == Position::kInside || q == Position::kEnd) return from_open && same_attr;

  // `to` is O, B, U or the end boundary: the open segment must be complete.
  if (!from_open) return true;
  switch (kind_) {
    case SchemeKind::kIOB: return true;
    case SchemeKind::kBIOE: return p == Position::kBegin && bare_b_is_value_;
    case SchemeKind::kUBIOE: return false;
  }
  return false;
}

nlohmann::json TagScheme::to_json() const {
  return {{"kind", to_string(kind_)}, {"attributes", attributes_}, {"bare_b_is_value", bare_b_is_value_}};
}

TagScheme TagScheme::from_json(const nlohmann::json& j) {
  return TagScheme(parse_scheme_kind(j.at("kind").get<std::string>()),
                   j.at("attributes").get<std::vector<std::string>>(), j.value("bare_b_is_value", true));
}

std::vector<int> encode_spans(int length, const SpanMap& spans, const TagScheme& scheme) {
  using P = TagScheme::Position;
  std::vector<int> tags(static_cast<std::size_t>(std::max(length, 0)), scheme.outside());
  std::vector<bool> used(tags.size(), false);
  for (const auto& [attr, list] : spans) {
    const int a = scheme.attribute_index(attr);
    if (a < 0) throw ContractError("encode_spans: attribute '" + attr + "' is not in the scheme");
    for (const Span& s : list) {
      if (s.start < 0 || s.end > length || s.start >= s.end) {
        throw ContractError("encode_spans: span [" + std::to_string(s.start) + ", " + std::to_string(s.end) +
                            ") outside sequence of length " + std::to_string(length));
      }
      for (int t = s.start; t < s.end; ++t) {
        if (used[static_cast<std::size_t>(t)]) throw ContractError("encode_spans: overlapping spans");
        used[static_cast<std::size_t>(t)] = true;
      }
      const int n = s.end - s.start;
      auto at = [&](int t) -> int& { return tags[static_cast<std::size_t>(t)]; };
      switch (scheme.kind()) {
        case SchemeKind::kBIOE:
          at(s.start) = scheme.tag(P::kBegin, a);
          for (int t = s.start + 1; t < s.end - 1; ++t) at(t) = scheme.tag(P::kInside, a);
          if (n > 1) at(s.end - 1) = scheme.tag(P::kEnd, a);
          break;
        case SchemeKind::kUBIOE:
          if (n == 1) {
            at(s.start) = scheme.tag(P::kUnit, a);
          } else {
            at(s.start) = scheme.tag(P::kBegin, a);
            for (int t = s.start + 1; t < s.end - 1; ++t) at(t) = scheme.tag(P::kInside, a);
            at(s.end - 1) = scheme.tag(P::kEnd, a);
          }
          break;
        case SchemeKind::kIOB:
          at(s.start) = scheme.tag(P::kBegin, a);
          for (int t = s.start + 1; t < s.end; ++t) at(t) = scheme.tag(P::kInside, a);
          break;
      }
    }
  }
  return tags;
}

SpanMap decode_spans(std::span<const int> tags, const TagScheme& scheme) {
  using P = TagScheme::Position;
  SpanMap out;
  int open_start = -1;
  int open_attr = -1;
  int open_last = -1;

  auto emit = [&](int attr, int start, int end) {
    out[scheme.attributes()[static_cast<std::size_t>(attr)]].push_back({start, end});
  };
  // Close an open segment that did not reach an explicit end.
  auto close_open = [&] {
    if (open_start < 0) return;
    const bool single = open_last == open_start;
    if (scheme.kind() == SchemeKind::kIOB || (scheme.kind() == SchemeKind::kBIOE && single && scheme.bare_b_is_value())) {
      emit(open_attr, open_start, open_last + 1);
    }
    open_start = -1;
  };

  const int n = static_cast<int>(tags.size());
  for (int t = 0; t < n; ++t) {
    const int tag = tags[static_cast<std::size_t>(t)];
    if (tag < 0 || tag >= scheme.num_tags()) {
      close_open();
      continue;
    }
    const P p = scheme.position(tag);
    const int a = scheme.attribute_of(tag);
    switch (p) {
      case P::kOutside:
        close_open();
        break;
      case P::kUnit:
        close_open();
        emit(a, t, t + 1);
        break;
      case P::kBegin:
        close_open();
        open_start = t;
        open_attr = a;
        open_last = t;
        break;
      case P::kInside:
        if (open_start >= 0 && a == open_attr) {
          open_last = t;
        } else {
          close_open();
        }
        break;
      case P::kEnd:
        if (open_start >= 0 && a == open_attr) {
          emit(a, open_start, t + 1);
          open_start = -1;
        } else {
          close_open();
        }
        break;
    }
  }
  close_open();
  return out;
}

std::string normalize_value(const std::string& value) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : value) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += c < 128 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
  }
  return out;
}

ExtractionResult spans_to_values(std::span<const std::string> tokens, const SpanMap& spans) {
  ExtractionResult out;
  for (const auto& [attr, list] : spans) {
    auto& values = out[attr];
    for (const Span& s : list) {
      if (s.start < 0 || s.end > static_cast<int>(tokens.size()) || s.start >= s.end) {
        throw ContractError("span outside token sequence");
      }
      std::string v;
      for (int t = s.start; t < s.end; ++t) {
        if (t > s.start) v += ' ';
        v += tokens[static_cast<std::size_t>(t)];
      }
      values.insert(normalize_value(v));
    }
  }
  return out;
}

ExtractionResult decode_tags(std::span<const std::string> tokens, std::span<const int> tags, const TagScheme& scheme) {
  if (tokens.size() != tags.size()) throw ContractError("decode_tags: token and tag counts differ");
  return spans_to_values(tokens, decode_spans(tags, scheme));
}

namespace {

void finish(PRF& s) {
  s.precision = s.predicted ? static_cast<double>(s.true_positives) / static_cast<double>(s.predicted) : 0.0;
  s.recall = s.gold ? static_cast<double>(s.true_positives) / static_cast<double>(s.gold) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
}

}  // namespace

EvaluationReport evaluate(std::span<const SampleExtraction> predicted, std::span<const SampleExtraction> gold) {
  if (predicted.size() != gold.size()) throw ContractError("evaluate: prediction and gold counts differ");
  EvaluationReport report;
  static const std::set<std::string> kEmpty;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i].sample_id != gold[i].sample_id) {
      throw ContractError("evaluate: sample id mismatch ('" + predicted[i].sample_id + "' vs '" +
                          gold[i].sample_id + "')");
    }
    std::set<std::string> attrs;
    for (const auto& [a, v] : predicted[i].values) attrs.insert(a);
    for (const auto& [a, v] : gold[i].values) attrs.insert(a);
    for (const auto& attr : attrs) {
      auto pit = predicted[i].values.find(attr);
      auto git = gold[i].values.find(attr);
      const auto& p = pit == predicted[i].values.end() ? kEmpty : pit->second;
      const auto& g = git == gold[i].values.end() ? kEmpty : git->second;
      long tp = 0;
      for (const auto& v : p) tp += static_cast<long>(g.count(v));
      PRF& s = report.per_attribute[attr];
      s.true_positives += tp;
      s.predicted += static_cast<long>(p.size());
      s.gold += static_cast<long>(g.size());
      report.micro.true_positives += tp;
      report.micro.predicted += static_cast<long>(p.size());
      report.micro.gold += static_cast<long>(g.size());
    }
  }
  for (auto& [attr, s] : report.per_attribute) finish(s);
  finish(report.micro);
  return report;
}

}  // namespace avex

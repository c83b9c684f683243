#include "avex/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "avex/errors.hpp"
#include "avex/logging.hpp"

namespace avex {

namespace {

bool is_split_char(char c) {
  switch (c) {
    case ',': case '.': case '(': case ')': case '&': case '/': return true;
    default: return false;
  }
}

bool is_digit(char c) { return c >= '0' && c <= '9'; }

char lower(char c) {
  auto u = static_cast<unsigned char>(c);
  return u < 128 ? static_cast<char>(std::tolower(u)) : c;
}

}  // namespace

std::vector<Token> tokenize_with_offsets(const std::string& text) {
  std::vector<Token> out;
  Token cur;
  bool open = false;
  auto flush = [&] {
    if (open) out.push_back(cur);
    open = false;
  };
  const int n = static_cast<int>(text.size());
  for (int i = 0; i < n; ++i) {
    const char c = text[static_cast<std::size_t>(i)];
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
      continue;
    }
    const bool decimal_point = c == '.' && open && i > 0 && is_digit(text[static_cast<std::size_t>(i - 1)]) &&
                               i + 1 < n && is_digit(text[static_cast<std::size_t>(i + 1)]);
    if (is_split_char(c) && !decimal_point) {
      flush();
      out.push_back({std::string(1, c), i, i + 1});
      continue;
    }
    if (!open) {
      cur = {std::string(), i, i};
      open = true;
    }
    cur.text += lower(c);
    cur.end = i + 1;
  }
  flush();
  return out;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  for (auto& t : tokenize_with_offsets(text)) out.push_back(std::move(t.text));
  return out;
}

nlohmann::json to_json(const ProductProfile& p) {
  nlohmann::json ann = nlohmann::json::object();
  for (const auto& [attr, list] : p.annotations) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& a : list) arr.push_back({{"value", a.value}, {"start", a.start}, {"end", a.end}});
    ann[attr] = std::move(arr);
  }
  nlohmann::json j = {{"version", kCorpusVersion}, {"id", p.id}, {"field_kind", p.field_kind}, {"text", p.text},
                      {"annotations", std::move(ann)}};
  if (!p.side.empty()) j["side"] = p.side;
  return j;
}

ProductProfile profile_from_json(const nlohmann::json& j) {
  ProductProfile p;
  p.id = j.at("id").get<std::string>();
  p.field_kind = j.value("field_kind", std::string("title"));
  p.text = j.at("text").get<std::string>();
  p.side = j.value("side", std::string());
  if (j.contains("annotations")) {
    for (const auto& [attr, list] : j.at("annotations").items()) {
      auto& dst = p.annotations[attr];
      for (const auto& a : list) {
        dst.push_back({a.at("value").get<std::string>(), a.at("start").get<int>(), a.at("end").get<int>()});
      }
    }
  }
  return p;
}

namespace {

void validate(const ProductProfile& p) {
  if (p.field_kind != "title" && p.field_kind != "description" && p.field_kind != "bullet") {
    throw ValidationError("record '" + p.id + "': unknown field_kind '" + p.field_kind + "'");
  }
  for (const auto& [attr, list] : p.annotations) {
    for (const auto& a : list) {
      if (a.start < 0 || a.end > static_cast<int>(p.text.size()) || a.start >= a.end) {
        throw ValidationError("record '" + p.id + "': offsets [" + std::to_string(a.start) + ", " +
                              std::to_string(a.end) + ") out of bounds for attribute '" + attr + "'");
      }
      const std::string sub = p.text.substr(static_cast<std::size_t>(a.start), static_cast<std::size_t>(a.end - a.start));
      if (sub != a.value) {
        throw ValidationError("record '" + p.id + "': text at [" + std::to_string(a.start) + ", " +
                              std::to_string(a.end) + ") is '" + sub + "', annotation says '" + a.value + "'");
      }
    }
  }
}

}  // namespace

std::vector<ProductProfile> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus '" + path.string() + "'");
  std::vector<ProductProfile> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    ProductProfile p;
    try {
      p = profile_from_json(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": malformed record: " + e.what());
    }
    try {
      validate(p);
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    out.push_back(std::move(p));
  }
  return out;
}

void save_corpus(const std::filesystem::path& path, const std::vector<ProductProfile>& corpus) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write corpus '" + path.string() + "'");
  for (const auto& p : corpus) out << to_json(p).dump() << '\n';
  if (!out) throw IoError("failed writing corpus '" + path.string() + "'");
}

LabeledSample to_labeled(const ProductProfile& profile) {
  validate(profile);
  LabeledSample s;
  s.id = profile.id;
  const std::vector<Token> toks = tokenize_with_offsets(profile.text);
  for (const auto& t : toks) s.tokens.push_back(t.text);
  std::vector<bool> used(toks.size(), false);
  for (const auto& [attr, list] : profile.annotations) {
    auto& spans = s.spans[attr];
    for (const auto& a : list) {
      int first = -1;
      int last = -1;
      for (int i = 0; i < static_cast<int>(toks.size()); ++i) {
        if (toks[static_cast<std::size_t>(i)].begin < a.end && toks[static_cast<std::size_t>(i)].end > a.start) {
          if (first < 0) first = i;
          last = i;
        }
      }
      if (first < 0) {
        throw ValidationError("record '" + profile.id + "': annotation '" + a.value + "' covers no token");
      }
      if (toks[static_cast<std::size_t>(first)].begin != a.start || toks[static_cast<std::size_t>(last)].end != a.end) {
        warn("record '" + profile.id + "': annotation '" + a.value + "' snapped to token boundaries");
      }
      for (int i = first; i <= last; ++i) {
        if (used[static_cast<std::size_t>(i)]) {
          throw ValidationError("record '" + profile.id + "': overlapping annotations at token " + std::to_string(i));
        }
        used[static_cast<std::size_t>(i)] = true;
      }
      spans.push_back({first, last + 1});
    }
    std::sort(spans.begin(), spans.end());
  }
  return s;
}

std::vector<LabeledSample> to_labeled(const std::vector<ProductProfile>& corpus) {
  std::vector<LabeledSample> out;
  out.reserve(corpus.size());
  for (const auto& p : corpus) out.push_back(to_labeled(p));
  return out;
}

ExtractionResult gold_values(const LabeledSample& sample, const std::vector<std::string>& attributes) {
  SpanMap kept;
  for (const auto& [attr, spans] : sample.spans) {
    if (attributes.empty() || std::find(attributes.begin(), attributes.end(), attr) != attributes.end()) {
      kept[attr] = spans;
    }
  }
  return spans_to_values(sample.tokens, kept);
}

SplitKind parse_split_kind(const std::string& name) {
  if (name == "random") return SplitKind::kRandom;
  if (name == "disjoint") return SplitKind::kDisjoint;
  throw ConfigError("unknown split kind '" + name + "'");
}

namespace {

struct DisjointSets {
  std::vector<std::size_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

using ValueKey = std::pair<std::string, std::string>;

std::vector<ValueKey> value_keys(const LabeledSample& s, const std::vector<std::string>& attributes) {
  std::vector<ValueKey> keys;
  for (const auto& [attr, values] : gold_values(s, attributes)) {
    for (const auto& v : values) keys.emplace_back(attr, v);
  }
  return keys;
}

}  // namespace

std::size_t shared_values(const std::vector<LabeledSample>& corpus, const DatasetSplit& sp,
                          const std::vector<std::string>& attributes) {
  std::map<std::string, const LabeledSample*> by_id;
  for (const auto& s : corpus) by_id[s.id] = &s;
  std::set<ValueKey> train;
  std::set<ValueKey> test;
  for (const auto& id : sp.train_ids) {
    for (auto& k : value_keys(*by_id.at(id), attributes)) train.insert(std::move(k));
  }
  for (const auto& id : sp.test_ids) {
    for (auto& k : value_keys(*by_id.at(id), attributes)) test.insert(std::move(k));
  }
  std::size_t shared = 0;
  for (const auto& k : test) shared += train.count(k);
  return shared;
}

DatasetSplit split(const std::vector<LabeledSample>& corpus, SplitKind kind, double ratio, std::uint64_t seed,
                   const std::vector<std::string>& attributes) {
  if (corpus.empty()) throw ContractError("split: empty corpus");
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split: train ratio must lie in (0, 1)");
  const std::size_t n = corpus.size();
  std::mt19937_64 rng(seed);
  std::vector<bool> to_train(n, false);
  DatasetSplit out;
  out.kind = kind;

  if (kind == SplitKind::kRandom) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const auto cut = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
    for (std::size_t i = 0; i < cut; ++i) to_train[order[i]] = true;
  } else {
    DisjointSets sets(n);
    std::map<ValueKey, std::size_t> owner;
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& k : value_keys(corpus[i], attributes)) {
        auto [it, inserted] = owner.emplace(std::move(k), i);
        if (!inserted) sets.unite(i, it->second);
      }
    }
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) groups[sets.find(i)].push_back(i);
    std::vector<std::vector<std::size_t>> components;
    for (auto& [root, members] : groups) components.push_back(std::move(members));
    std::shuffle(components.begin(), components.end(), rng);
    std::stable_sort(components.begin(), components.end(),
                     [](const auto& a, const auto& b) { return a.size() > b.size(); });

    const double target = ratio * static_cast<double>(n);
    double in_train = 0;
    for (const auto& comp : components) {
      const double size = static_cast<double>(comp.size());
      if (std::abs(in_train + size - target) < std::abs(in_train - target)) {
        for (std::size_t i : comp) to_train[i] = true;
        in_train += size;
      }
    }
    const double achieved = in_train / static_cast<double>(n);
    if (std::abs(achieved - ratio) > 0.10 || in_train == 0 || in_train == static_cast<double>(n)) {
      throw ContractError("disjoint split impossible at train ratio " + std::to_string(ratio) +
                          "; achievable ratio " + std::to_string(achieved) + " over " +
                          std::to_string(components.size()) + " value-connected groups");
    }
  }

  for (std::size_t i = 0; i < n; ++i) (to_train[i] ? out.train_ids : out.test_ids).push_back(corpus[i].id);
  if (kind == SplitKind::kDisjoint && shared_values(corpus, out, attributes) != 0) {
    throw std::logic_error("disjoint split shares attribute values between train and test");
  }
  return out;
}

DatasetSplit split_from_hints(const std::vector<ProductProfile>& corpus) {
  DatasetSplit out;
  for (const auto& p : corpus) {
    if (p.side == "train") {
      out.train_ids.push_back(p.id);
    } else if (p.side == "test") {
      out.test_ids.push_back(p.id);
    } else {
      throw ConfigError("record '" + p.id + "' carries no train/test side hint");
    }
  }
  return out;
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec s;
  s.samples = j.value("samples", s.samples);
  s.test_samples = j.value("test_samples", s.test_samples);
  s.owa_fraction = j.value("owa_fraction", s.owa_fraction);
  s.stack_probability = j.value("stack_probability", s.stack_probability);
  s.field_kind = j.value("field_kind", s.field_kind);
  s.attributes = j.at("attributes").get<std::map<std::string, std::vector<std::string>>>();
  s.stackable = j.value("stackable", s.stackable);
  s.conjunctions = j.value("conjunctions", s.conjunctions);
  s.fillers = j.value("fillers", s.fillers);
  s.templates = j.at("templates").get<std::vector<std::string>>();
  return s;
}

SynthSpec load_synth_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open synth spec '" + path.string() + "'");
  try {
    return synth_spec_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid synth spec '" + path.string() + "': " + e.what());
  }
}

namespace {

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string capitalize(std::string w) {
  if (!w.empty()) w[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(w[0])));
  return w;
}

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

}  // namespace

std::vector<ProductProfile> generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  if (spec.attributes.empty()) throw ContractError("synth spec lists no attributes");
  for (const auto& [attr, values] : spec.attributes) {
    if (values.empty()) throw ContractError("synth spec: attribute '" + attr + "' has an empty vocabulary");
  }
  for (const auto& [name, values] : spec.fillers) {
    if (values.empty()) throw ContractError("synth spec: filler '" + name + "' is empty");
  }
  if (spec.templates.empty()) throw ContractError("synth spec lists no templates");
  if (spec.samples < 0 || spec.test_samples < 0 || spec.test_samples > spec.samples) {
    throw ConfigError("synth spec: invalid sample counts");
  }
  if (spec.owa_fraction < 0 || spec.owa_fraction >= 1) throw ConfigError("synth spec: owa_fraction must lie in [0, 1)");

  std::mt19937_64 rng(seed);

  // Values reserved for the test side, per attribute.
  std::map<std::string, std::vector<std::string>> train_values;
  std::map<std::string, std::vector<std::string>> all_values;
  for (const auto& [attr, values] : spec.attributes) {
    std::vector<std::string> shuffled = values;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const auto reserved = static_cast<std::size_t>(std::llround(spec.owa_fraction * static_cast<double>(values.size())));
    if (reserved >= values.size()) throw ConfigError("synth spec: owa_fraction reserves every value of '" + attr + "'");
    train_values[attr].assign(shuffled.begin() + static_cast<std::ptrdiff_t>(reserved), shuffled.end());
    all_values[attr] = values;
  }

  std::vector<std::vector<std::string>> templates;
  for (const auto& t : spec.templates) templates.push_back(split_words(t));

  std::bernoulli_distribution stack(spec.stack_probability);
  std::bernoulli_distribution title_case(0.5);
  const int train_count = spec.samples - spec.test_samples;
  std::vector<ProductProfile> out;
  out.reserve(static_cast<std::size_t>(spec.samples));

  for (int i = 0; i < spec.samples; ++i) {
    const bool is_test = i >= train_count;
    const auto& pool = is_test ? all_values : train_values;
    const bool caps = title_case(rng);
    ProductProfile p;
    char id[32];
    std::snprintf(id, sizeof id, "syn-%05d", i + 1);
    p.id = id;
    p.field_kind = spec.field_kind;
    p.side = is_test ? "test" : "train";

    auto append_words = [&](const std::string& phrase) {
      const int start = p.text.empty() ? 0 : static_cast<int>(p.text.size()) + 1;
      for (const auto& w : split_words(phrase)) {
        if (!p.text.empty()) p.text += ' ';
        p.text += caps ? capitalize(w) : w;
      }
      return std::pair<int, int>{start, static_cast<int>(p.text.size())};
    };
    auto annotate = [&](const std::string& attr, const std::string& value) {
      auto [start, end] = append_words(value);
      p.annotations[attr].push_back({p.text.substr(static_cast<std::size_t>(start)), start, end});
    };

    for (const auto& piece : pick(templates, rng)) {
      const bool slot = piece.size() > 2 && piece.front() == '<' && piece.back() == '>';
      const std::string name = slot ? piece.substr(1, piece.size() - 2) : std::string();
      if (slot && pool.count(name)) {
        const auto& values = pool.at(name);
        const bool stackable = std::find(spec.stackable.begin(), spec.stackable.end(), name) != spec.stackable.end();
        const std::string& first = pick(values, rng);
        annotate(name, first);
        if (stackable && values.size() > 1 && stack(rng)) {
          std::string second = first;
          while (second == first) second = pick(values, rng);
          append_words(pick(spec.conjunctions, rng));
          annotate(name, second);
        }
      } else if (slot && spec.fillers.count(name)) {
        append_words(pick(spec.fillers.at(name), rng));
      } else if (slot) {
        throw ContractError("synth spec: template slot <" + name + "> has no vocabulary");
      } else {
        append_words(piece);
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace avex

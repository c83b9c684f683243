#pragma once

#include <string>
#include <vector>

#include "avex/corpus.hpp"
#include "avex/model.hpp"
#include "avex/tagging.hpp"

namespace avex::testing {

/// Ten short dog-food titles with flavor spans; small enough to memorise.
inline std::vector<LabeledSample> toy_corpus() {
  const std::vector<std::pair<std::string, std::vector<Span>>> rows = {
      {"acme smoked duck dog food", {{1, 3}}},
      {"bolt lamb and rice recipe", {{1, 2}, {3, 4}}},
      {"salmon dog treats by orbit", {{0, 1}}},
      {"zenith ranch raised lamb , 12 count", {{1, 4}}},
      {"grain free turkey formula", {{2, 3}}},
      {"beef & barley stew for dogs", {{0, 1}, {2, 3}}},
      {"orbit chicken jerky", {{1, 2}}},
      {"wild venison dinner pack of 6", {{0, 2}}},
      {"puppy food , roasted duck", {{3, 5}}},
      {"pork and sweet potato bites", {{0, 1}, {2, 4}}},
  };
  std::vector<LabeledSample> out;
  int i = 0;
  for (const auto& [text, spans] : rows) {
    LabeledSample s;
    s.id = "toy-" + std::to_string(++i);
    s.tokens = tokenize(text);
    s.spans["flavor"] = spans;
    out.push_back(std::move(s));
  }
  return out;
}

inline ModelConfig tiny_config(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.embed_dim = 12;
  c.hidden_dim = 12;
  c.attention_dim = 12;
  c.dropout = 0.0;
  c.batch_size = 2;
  c.epochs = 40;
  c.last_k_average = 5;
  c.learning_rate = 0.01;
  c.attributes = {"flavor"};
  c.seed = 5;
  return c;
}

}  // namespace avex::testing

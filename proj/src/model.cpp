#include "avex/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "avex/corpus.hpp"
#include "avex/errors.hpp"

namespace avex {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kBiLstm: return "bilstm";
    case Variant::kBiLstmCrf: return "bilstm-crf";
    case Variant::kOpenTag: return "opentag";
  }
  return "?";
}

Variant parse_variant(const std::string& name) {
  if (name == "bilstm") return Variant::kBiLstm;
  if (name == "bilstm-crf") return Variant::kBiLstmCrf;
  if (name == "opentag") return Variant::kOpenTag;
  throw ConfigError("unknown model variant '" + name + "'");
}

void ModelConfig::validate() const {
  if (embed_dim <= 0 || hidden_dim <= 0 || attention_dim <= 0) throw ConfigError("model dimensions must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (last_k_average <= 0) throw ConfigError("last_k_average must be positive");
  if (epochs > 0 && last_k_average > epochs) throw ConfigError("last_k_average exceeds epochs");
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (clip_norm < 0) throw ConfigError("clip_norm must be non-negative");
  if (eval_every <= 0) throw ConfigError("eval_every must be positive");
  if (min_count <= 0) throw ConfigError("min_count must be positive");
  if (attributes.empty()) throw ConfigError("at least one attribute is required");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"version", 1},
          {"variant", to_string(c.variant)},
          {"embed_dim", c.embed_dim},
          {"hidden_dim", c.hidden_dim},
          {"attention_dim", c.attention_dim},
          {"dropout", c.dropout},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"last_k_average", c.last_k_average},
          {"seed", c.seed},
          {"learning_rate", c.learning_rate},
          {"clip_norm", c.clip_norm},
          {"scheme", to_string(c.scheme)},
          {"attributes", c.attributes},
          {"bilstm_sigmoid_concat", c.bilstm_sigmoid_concat},
          {"attention_concat_variant", c.attention_concat_variant},
          {"crf_hard_constraints", c.crf_hard_constraints},
          {"eval_every", c.eval_every},
          {"min_count", c.min_count},
          {"lowercase", c.lowercase},
          {"pretrained_embeddings", c.pretrained_embeddings}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig c) {
  try {
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.attention_dim = j.value("attention_dim", c.attention_dim);
    c.dropout = j.value("dropout", c.dropout);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.last_k_average = j.value("last_k_average", c.last_k_average);
    c.seed = j.value("seed", c.seed);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    if (j.contains("scheme")) c.scheme = parse_scheme_kind(j.at("scheme").get<std::string>());
    c.attributes = j.value("attributes", c.attributes);
    c.bilstm_sigmoid_concat = j.value("bilstm_sigmoid_concat", c.bilstm_sigmoid_concat);
    c.attention_concat_variant = j.value("attention_concat_variant", c.attention_concat_variant);
    c.crf_hard_constraints = j.value("crf_hard_constraints", c.crf_hard_constraints);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.min_count = j.value("min_count", c.min_count);
    c.lowercase = j.value("lowercase", c.lowercase);
    c.pretrained_embeddings = j.value("pretrained_embeddings", c.pretrained_embeddings);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid model config: ") + e.what());
  }
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::filesystem::path& path, ModelConfig base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid config '" + path.string() + "': " + e.what());
  }
  return model_config_from_json(j, std::move(base));
}

Batch make_batch(std::span<const std::vector<Index>* const> sequences) {
  if (sequences.empty()) throw ContractError("make_batch: no sequences");
  Batch b;
  b.layout.batch = static_cast<Index>(sequences.size());
  for (const auto* s : sequences) {
    if (s->empty()) throw ContractError("make_batch: empty sequence");
    b.lengths.push_back(static_cast<Index>(s->size()));
    b.layout.steps = std::max(b.layout.steps, static_cast<Index>(s->size()));
  }
  b.mask = Matrix::Zero(b.layout.rows(), 1);
  b.flat_ids.assign(static_cast<std::size_t>(b.layout.rows()), Vocabulary::kPad);
  for (Index j = 0; j < b.layout.batch; ++j) {
    const auto& s = *sequences[static_cast<std::size_t>(j)];
    for (Index t = 0; t < static_cast<Index>(s.size()); ++t) {
      b.mask(b.layout.row(t, j), 0) = 1.0;
      b.flat_ids[static_cast<std::size_t>(b.layout.row(t, j))] = s[static_cast<std::size_t>(t)];
    }
  }
  return b;
}

namespace {

using Shapes = std::vector<std::pair<std::string, std::pair<Index, Index>>>;

Index feature_dim(const ModelConfig& c) {
  const Index d = 2 * c.hidden_dim;
  return c.variant == Variant::kOpenTag && c.attention_concat_variant ? 2 * d : d;
}

Shapes expected_shapes(const ModelConfig& c, Index vocab_size, Index K) {
  const Index E = c.embed_dim, H = c.hidden_dim, D = 2 * H, A = c.attention_dim;
  Shapes s = {{"embedding.table", {vocab_size, E}}};
  for (const char* dir : {"lstm.forward", "lstm.backward"}) {
    const std::string p = dir;
    s.push_back({p + ".input", {E, 4 * H}});
    s.push_back({p + ".recurrent", {H, 4 * H}});
    s.push_back({p + ".bias", {1, 4 * H}});
  }
  if (c.variant == Variant::kBiLstmCrf) {
    s.push_back({"dense.weight", {D, D}});
    s.push_back({"dense.bias", {1, D}});
  }
  if (c.variant == Variant::kOpenTag) {
    s.push_back({"attention.query", {D, A}});
    s.push_back({"attention.key", {D, A}});
    s.push_back({"attention.pair_bias", {1, A}});
    s.push_back({"attention.score", {A, 1}});
    s.push_back({"attention.score_bias", {1, 1}});
  }
  s.push_back({"output.weight", {feature_dim(c), K}});
  s.push_back({"output.bias", {1, K}});
  if (c.uses_crf()) s.push_back({"crf.transitions", {K + 2, K + 2}});
  return s;
}

ParameterSet init_params(const ModelConfig& c, const Vocabulary& vocab, Index K) {
  std::mt19937_64 rng(c.seed);
  ParameterSet p;
  const Index E = c.embed_dim, H = c.hidden_dim, D = 2 * H;
  p.add("embedding.table", c.pretrained_embeddings.empty()
                               ? random_embedding_table(vocab, E, rng)
                               : load_pretrained(c.pretrained_embeddings, vocab, E, rng));
  init_lstm(p, "lstm.forward", E, H, rng);
  init_lstm(p, "lstm.backward", E, H, rng);
  if (c.variant == Variant::kBiLstmCrf) {
    p.add("dense.weight", xavier_uniform(D, D, rng));
    p.add("dense.bias", Matrix::Zero(1, D));
  }
  if (c.variant == Variant::kOpenTag) init_attention(p, "attention", D, c.attention_dim, rng);
  p.add("output.weight", xavier_uniform(feature_dim(c), K, rng));
  p.add("output.bias", Matrix::Zero(1, K));
  if (c.uses_crf()) p.add("crf.transitions", Matrix::Zero(K + 2, K + 2));
  return p;
}

Matrix scheme_penalty(const TagScheme& scheme) {
  const Index K = scheme.num_tags();
  const double ninf = -std::numeric_limits<double>::infinity();
  Matrix pen = Matrix::Zero(K + 2, K + 2);
  for (int j = 0; j < K; ++j) {
    if (!scheme.allowed(-1, j)) pen(crf::start_state(K), j) = ninf;
    if (!scheme.allowed(j, -1)) pen(j, crf::stop_state(K)) = ninf;
    for (int k = 0; k < K; ++k) {
      if (!scheme.allowed(j, k)) pen(j, k) = ninf;
    }
  }
  return pen;
}

Var<double> affine(Graph<double>& g, ParameterSet& p, Var<double> x, const std::string& weight,
                   const std::string& bias) {
  return add(matmul(x, g.parameter(p.at(weight))), g.parameter(p.at(bias)));
}

}  // namespace

Model::Model(ModelConfig config, Vocabulary vocab)
    : config_(std::move(config)), vocab_(std::move(vocab)), scheme_(config_.make_scheme()) {
  config_.validate();
  params_ = init_params(config_, vocab_, scheme_.num_tags());
  if (config_.uses_crf() && config_.crf_hard_constraints) penalty_ = scheme_penalty(scheme_);
}

Model::Model(ModelConfig config, Vocabulary vocab, ParameterSet params)
    : config_(std::move(config)), vocab_(std::move(vocab)), scheme_(config_.make_scheme()), params_(std::move(params)) {
  config_.validate();
  check_params();
  if (config_.uses_crf() && config_.crf_hard_constraints) penalty_ = scheme_penalty(scheme_);
}

void Model::check_params() const {
  const Shapes shapes = expected_shapes(config_, vocab_.size(), scheme_.num_tags());
  if (shapes.size() != params_.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(params_.size()) + " parameters, " +
                      to_string(config_.variant) + " needs " + std::to_string(shapes.size()));
  }
  for (const auto& [name, shape] : shapes) {
    if (!params_.contains(name)) throw ConfigError("checkpoint lacks parameter '" + name + "'");
    const auto& v = params_.at(name).value();
    if (v.rows() != shape.first || v.cols() != shape.second) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_string(v) + ", expected " +
                        shape_string(shape.first, shape.second));
    }
  }
}

Matrix Model::effective_transitions() const {
  Matrix t = params_.at("crf.transitions").value();
  if (penalty_.size() != 0) t += penalty_;
  return t;
}

ForwardResult Model::forward(Graph<double>& g, const Batch& batch, std::mt19937_64* rng) {
  const double keep = 1.0 - config_.dropout;
  const bool drop = rng != nullptr && config_.dropout > 0;
  Var<double> x = lookup(g.parameter(params_.at("embedding.table")), batch.flat_ids);
  if (drop) x = dropout(x, dropout_mask<double>(x.rows(), x.cols(), keep, *rng), keep, true);

  const LstmWeights fwd = lstm_weights(g, params_, "lstm.forward");
  const LstmWeights bwd = lstm_weights(g, params_, "lstm.backward");
  Var<double> h = bilstm_encode(fwd, bwd, x, batch.mask, batch.layout, config_.bilstm_sigmoid_concat);
  if (drop) h = dropout(h, dropout_mask<double>(h.rows(), h.cols(), keep, *rng), keep, true);

  ForwardResult out;
  switch (config_.variant) {
    case Variant::kBiLstm:
      out.scores = affine(g, params_, h, "output.weight", "output.bias");
      break;
    case Variant::kBiLstmCrf: {
      Var<double> z = tanh(affine(g, params_, h, "dense.weight", "dense.bias"));
      out.scores = affine(g, params_, z, "output.weight", "output.bias");
      break;
    }
    case Variant::kOpenTag: {
      AttentionOutput att = attend(attention_weights(g, params_, "attention"), h, batch.mask, batch.layout);
      Var<double> features = config_.attention_concat_variant ? concat(h, att.focused) : att.focused;
      out.scores = affine(g, params_, features, "output.weight", "output.bias");
      out.attention = std::move(att);
      break;
    }
  }
  return out;
}

Var<double> Model::loss(const ForwardResult& out, const Batch& batch, const std::vector<std::vector<int>>& gold) {
  Graph<double>& g = *out.scores.graph;
  const Index B = batch.layout.batch;
  if (static_cast<Index>(gold.size()) != B) throw ContractError("loss: gold count differs from batch size");
  for (Index b = 0; b < B; ++b) {
    if (static_cast<Index>(gold[static_cast<std::size_t>(b)].size()) != batch.lengths[static_cast<std::size_t>(b)]) {
      throw ContractError("loss: gold length differs from sequence length");
    }
  }
  if (config_.uses_crf()) {
    Var<double> nll = crf::nll_loss(out.scores, g.parameter(params_.at("crf.transitions")), gold, batch.lengths, B,
                                    penalty_);
    return scale(nll, 1.0 / static_cast<double>(B));
  }
  Matrix onehot = Matrix::Zero(out.scores.rows(), out.scores.cols());
  double tokens = 0;
  for (Index b = 0; b < B; ++b) {
    for (Index t = 0; t < batch.lengths[static_cast<std::size_t>(b)]; ++t) {
      onehot(batch.layout.row(t, b), gold[static_cast<std::size_t>(b)][static_cast<std::size_t>(t)]) = 1.0;
      tokens += 1;
    }
  }
  Var<double> partition = sum(mul(log_sum_exp(out.scores), g.constant(batch.mask)));
  Var<double> gold_score = sum(mul(out.scores, g.constant(std::move(onehot))));
  return scale(sub(partition, gold_score), 1.0 / tokens);
}

std::vector<Inference> Model::infer(const std::vector<std::vector<std::string>>& tokens, bool with_attention) const {
  constexpr std::size_t kInferBatch = 64;
  std::vector<Inference> results(tokens.size());
  std::vector<std::vector<Index>> ids(tokens.size());
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    ids[i] = vocab_.indices(tokens[i]);
    if (!ids[i].empty()) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a].size() < ids[b].size(); });

  // A graph without gradient tracking never writes to the parameters.
  auto& self = const_cast<Model&>(*this);
  const Matrix transitions = config_.uses_crf() ? effective_transitions() : Matrix();
  for (std::size_t start = 0; start < order.size(); start += kInferBatch) {
    const std::size_t stop = std::min(order.size(), start + kInferBatch);
    std::vector<const std::vector<Index>*> seqs;
    for (std::size_t i = start; i < stop; ++i) seqs.push_back(&ids[order[i]]);
    const Batch batch = make_batch(seqs);
    Graph<double> g(false);
    ForwardResult out = self.forward(g, batch, nullptr);
    const Matrix& scores = out.scores.value();
    for (Index b = 0; b < batch.layout.batch; ++b) {
      Inference& r = results[order[start + static_cast<std::size_t>(b)]];
      const Index len = batch.lengths[static_cast<std::size_t>(b)];
      const Matrix e = crf::sequence_rows(scores, batch.layout.batch, b, len);
      if (config_.uses_crf()) {
        r.tags = crf::viterbi(transitions, e, len).tags;
        r.uncertainty = 1.0 - crf::sequence_probability<double>(transitions, e, r.tags);
      } else {
        const Matrix p = detail::softmax_rows<double>(e);
        double confidence = 1.0;
        r.tags.resize(static_cast<std::size_t>(len));
        for (Index t = 0; t < len; ++t) {
          Index arg = 0;
          confidence *= p.row(t).maxCoeff(&arg);
          r.tags[static_cast<std::size_t>(t)] = static_cast<int>(arg);
        }
        r.uncertainty = std::clamp(1.0 - confidence, 0.0, 1.0);
      }
      if (with_attention && out.attention) {
        r.attention = attention_matrix(*out.attention, b).topLeftCorner(len, len);
      }
    }
  }
  return results;
}

Matrix Model::token_distributions(const std::vector<std::string>& tokens) const {
  if (config_.variant != Variant::kBiLstm) throw ContractError("token distributions exist for the bilstm variant only");
  if (tokens.empty()) return Matrix(0, num_tags());
  const std::vector<Index> ids = vocab_.indices(tokens);
  const std::vector<const std::vector<Index>*> seqs = {&ids};
  const Batch batch = make_batch(seqs);
  Graph<double> g(false);
  ForwardResult out = const_cast<Model&>(*this).forward(g, batch, nullptr);
  return detail::softmax_rows<double>(out.scores.value());
}

Prediction predict(const Model& model, const std::string& text) {
  return predict_tokens(model, tokenize(text));
}

Prediction predict_tokens(const Model& model, const std::vector<std::string>& tokens) {
  Prediction p;
  p.tokens = tokens;
  if (tokens.empty()) return p;
  const bool attention = model.config().variant == Variant::kOpenTag;
  std::vector<Inference> results = model.infer({tokens}, attention);
  Inference& r = results.front();
  p.tags = std::move(r.tags);
  p.values = decode_tags(p.tokens, p.tags, model.scheme());
  if (r.attention) p.attention = AttentionMatrix{std::move(*r.attention), tokens};
  return p;
}

nlohmann::json model_meta(const Model& model) {
  return {{"kind", "avex-model"},
          {"config", to_json(model.config())},
          {"scheme", model.scheme().to_json()},
          {"vocabulary", model.vocabulary().tokens()},
          {"lowercase", model.vocabulary().lowercase()}};
}

Model model_from_meta(const nlohmann::json& meta, ParameterSet params) {
  if (meta.value("kind", std::string()) != "avex-model") throw ConfigError("checkpoint does not describe a model");
  try {
    ModelConfig config = model_config_from_json(meta.at("config"));
    if (!(TagScheme::from_json(meta.at("scheme")) == config.make_scheme())) {
      throw ConfigError("checkpoint scheme disagrees with its configuration");
    }
    Vocabulary vocab = Vocabulary::from_tokens(meta.at("vocabulary").get<std::vector<std::string>>(),
                                               meta.at("lowercase").get<bool>());
    return Model(std::move(config), std::move(vocab), std::move(params));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed model metadata: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const Model& model) {
  save_checkpoint(path, model_meta(model), model.params());
}

Model load_model(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  return model_from_meta(ck.meta, std::move(ck.params));
}

Model load_model(const std::filesystem::path& path, Variant expected_variant, const TagScheme& expected_scheme) {
  Model m = load_model(path);
  if (m.config().variant != expected_variant) {
    throw ConfigError("checkpoint holds a " + to_string(m.config().variant) + " model, expected " +
                      to_string(expected_variant));
  }
  if (!(m.scheme() == expected_scheme)) {
    throw ConfigError("checkpoint scheme " + m.scheme().to_json().dump() + " differs from requested " +
                      expected_scheme.to_json().dump());
  }
  return m;
}

}  // namespace avex

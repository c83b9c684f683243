#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "avex/attention.hpp"
#include "avex/autodiff.hpp"
#include "avex/crf.hpp"
#include "avex/embeddings.hpp"
#include "avex/parameters.hpp"
#include "avex/recurrent.hpp"
#include "avex/tagging.hpp"

namespace avex {

enum class Variant { kBiLstm, kBiLstmCrf, kOpenTag };

std::string to_string(Variant v);
Variant parse_variant(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::kOpenTag;
  Index embed_dim = 100;
  Index hidden_dim = 100;  // per LSTM direction
  Index attention_dim = 200;
  double dropout = 0.4;
  int batch_size = 32;
  int epochs = 500;
  int last_k_average = 20;
  std::uint64_t seed = 0;
  double learning_rate = 0.001;
  double clip_norm = 0.0;
  SchemeKind scheme = SchemeKind::kBIOE;
  std::vector<std::string> attributes = {"value"};
  bool bilstm_sigmoid_concat = false;
  /// opentag emits from [h_t, l_t] instead of l_t alone.
  bool attention_concat_variant = false;
  /// Forbids ill-formed tag transitions inside the CRF.
  bool crf_hard_constraints = false;
  /// Evaluate every n-th epoch; the last `last_k_average` epochs are always evaluated.
  int eval_every = 1;
  int min_count = 1;
  bool lowercase = true;
  std::string pretrained_embeddings;

  /// Throws ConfigError on an invalid combination.
  void validate() const;
  TagScheme make_scheme() const { return TagScheme(scheme, attributes); }
  bool uses_crf() const { return variant != Variant::kBiLstm; }
};

nlohmann::json to_json(const ModelConfig& c);
/// Missing keys keep their defaults; unknown keys are ignored.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
ModelConfig load_model_config(const std::filesystem::path& path, ModelConfig base = {});

/// Time-major padded batch of token-index sequences.
struct Batch {
  SequenceLayout layout;
  Matrix mask;  // rows x 1
  std::vector<Index> lengths;
  std::vector<Index> flat_ids;  // rows entries, PAD in padding
};

/// All sequences must be non-empty.
Batch make_batch(std::span<const std::vector<Index>* const> sequences);

struct ForwardResult {
  /// bilstm: logits; CRF variants: emissions. (steps * batch) x K.
  Var<double> scores;
  std::optional<AttentionOutput> attention;
};

/// Per-sample inference output.
struct Inference {
  std::vector<int> tags;
  /// Least-confidence score 1 - Pr(tags | x).
  double uncertainty = 0;
  std::optional<Matrix> attention;
};

/// A tagger of one of the three variants together with its vocabulary and
/// tag scheme.
class Model {
 public:
  /// Fresh parameters drawn from `config.seed`.
  Model(ModelConfig config, Vocabulary vocab);
  Model(ModelConfig config, Vocabulary vocab, ParameterSet params);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocab_; }
  const TagScheme& scheme() const { return scheme_; }
  Index num_tags() const { return scheme_.num_tags(); }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Transition penalty added inside the CRF (empty without hard constraints).
  const Matrix& transition_penalty() const { return penalty_; }
  /// Learned transitions plus the penalty.
  Matrix effective_transitions() const;

  /// Builds the forward graph. Dropout is applied when `dropout_rng` is set.
  ForwardResult forward(Graph<double>& graph, const Batch& batch, std::mt19937_64* dropout_rng);

  /// Mean sequence NLL (CRF variants) or mean token cross-entropy (bilstm).
  Var<double> loss(const ForwardResult& out, const Batch& batch, const std::vector<std::vector<int>>& gold);

  /// Frozen-model inference over token sequences; empty sequences yield empty tags.
  std::vector<Inference> infer(const std::vector<std::vector<std::string>>& tokens, bool with_attention = false) const;

  /// Per-token tag distributions of the bilstm variant (rows sum to 1).
  Matrix token_distributions(const std::vector<std::string>& tokens) const;

 private:
  void check_params() const;

  ModelConfig config_;
  Vocabulary vocab_;
  TagScheme scheme_;
  ParameterSet params_;
  Matrix penalty_;
};

struct Prediction {
  std::vector<std::string> tokens;
  std::vector<int> tags;
  ExtractionResult values;
  std::optional<AttentionMatrix> attention;
};

/// Tokenizes, tags and decodes. Attention is attached for opentag only.
Prediction predict(const Model& model, const std::string& text);
Prediction predict_tokens(const Model& model, const std::vector<std::string>& tokens);

/// Checkpoint metadata describing a model: configuration, scheme and vocabulary.
nlohmann::json model_meta(const Model& model);
/// Rebuilds a model from checkpoint metadata and parameters.
Model model_from_meta(const nlohmann::json& meta, ParameterSet params);

/// Checkpoint holding parameters, vocabulary, scheme and configuration.
void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);
/// Throws ConfigError if the checkpoint's variant or scheme differs.
Model load_model(const std::filesystem::path& path, Variant expected_variant, const TagScheme& expected_scheme);

}  // namespace avex

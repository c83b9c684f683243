#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "avex/adam.hpp"
#include "avex/corpus.hpp"
#include "avex/model.hpp"

namespace avex {

/// A labeled sample mapped onto a scheme: gold tags plus gold values for the
/// scheme's attributes only.
struct EncodedSample {
  std::string id;
  std::vector<std::string> tokens;
  std::vector<int> tags;
  ExtractionResult gold;
};

EncodedSample encode_sample(const LabeledSample& sample, const TagScheme& scheme);
std::vector<EncodedSample> encode_samples(const std::vector<LabeledSample>& samples, const TagScheme& scheme);

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double loss = 0;
  bool evaluated = false;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

struct MetricHistory {
  std::vector<EpochMetrics> epochs;
  int last_k = 20;

  struct Average {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    int epochs = 0;
  };
  /// Mean over the evaluated epochs among the last `last_k`.
  Average last_k_average() const;
};

nlohmann::json to_json(const EpochMetrics& m);
/// One {epoch, loss, P, R, F} record per line; P/R/F are null for epochs
/// that were not evaluated.
void write_history(const std::filesystem::path& path, const MetricHistory& history);
MetricHistory read_history(const std::filesystem::path& path);

struct EvalResult {
  EvaluationReport report;
  double loss = 0;  // mean training loss on the evaluated set, when requested
};

/// Frozen-model evaluation under full-credit scoring.
EvalResult evaluate_model(const Model& model, const std::vector<EncodedSample>& samples, bool with_loss = false);

/// A model together with its optimizer state and training RNG, so training
/// can continue across calls. Copying a learner snapshots all of it.
class Learner {
 public:
  explicit Learner(Model model);

  const Model& model() const { return model_; }
  Model& model() { return model_; }

  /// One shuffled, length-bucketed pass with dropout; returns the mean batch loss.
  double train_epoch(const std::vector<const EncodedSample*>& samples);
  double train_epoch(const std::vector<EncodedSample>& samples);

  friend void save_learner(const std::filesystem::path& path, const Learner& learner);
  friend Learner load_learner(const std::filesystem::path& path);

 private:
  Model model_;
  AdamOptions adam_;
  AdamState<double> state_;
  std::mt19937_64 rng_;
};

/// Model, optimizer moments and RNG state in one checkpoint, so a restored
/// learner continues exactly where the saved one stopped.
void save_learner(const std::filesystem::path& path, const Learner& learner);
Learner load_learner(const std::filesystem::path& path);

struct TrainResult {
  Model model;
  MetricHistory history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Builds the vocabulary from `train_set`, trains for config.epochs epochs and
/// evaluates on `eval_set` after every `eval_every`-th epoch and every one of
/// the last `last_k_average` epochs. Throws NumericError naming the epoch if
/// training diverges.
TrainResult train(const std::vector<EncodedSample>& train_set, const std::vector<EncodedSample>& eval_set,
                  const ModelConfig& config, const EpochCallback& on_epoch = {});

/// Vocabulary over sample tokens, honouring config.min_count and config.lowercase.
Vocabulary vocabulary_for(const std::vector<EncodedSample>& samples, const ModelConfig& config);

}  // namespace avex

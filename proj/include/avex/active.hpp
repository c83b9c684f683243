#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "avex/trainer.hpp"

namespace avex {

enum class Strategy { kTagFlip, kLeastConfidence, kRandom };

std::string to_string(Strategy s);
/// Accepts "TF", "LC", "random" (case-insensitive).
Strategy parse_strategy(const std::string& name);

struct ALConfig {
  Strategy strategy = Strategy::kTagFlip;
  int initial_labeled = 50;
  int batch_size = 10;
  int rounds = 20;
  /// Committee size: training epochs per round.
  int committee_epochs = 5;
  /// Stop once the held-out loss changes by less than this between rounds; 0 disables.
  double stop_threshold = 0.0;
  /// Divide flip counts by sequence length.
  bool normalize_flips = false;
  /// Fresh parameters at the start of every round instead of continued training.
  bool reinitialize = false;
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const ALConfig& c);
ALConfig al_config_from_json(const nlohmann::json& j, ALConfig base = {});

/// Predicted tags of one pool sample after each committee epoch. Snapshot 0
/// is taken before the round's first epoch, so E epochs give E + 1 snapshots.
struct FlipRecord {
  std::vector<std::vector<int>> snapshots;
};

/// Number of positions whose tag differs between successive snapshots,
/// summed over all successive pairs. Needs at least two snapshots.
long q_tf(const FlipRecord& record);

/// 1 - Pr(y* | x) of the model's best path for `tokens`.
double q_lc(const Model& model, const std::vector<std::string>& tokens);

/// Answers label queries.
class Oracle {
 public:
  virtual ~Oracle() = default;
  /// Gold tags for every id, in order; throws when any label is unavailable.
  virtual std::vector<std::vector<int>> label(const std::vector<std::string>& ids) = 0;
};

class SimulatedOracle : public Oracle {
 public:
  explicit SimulatedOracle(std::map<std::string, std::vector<int>> gold) : gold_(std::move(gold)) {}
  explicit SimulatedOracle(const std::vector<EncodedSample>& samples);
  std::vector<std::vector<int>> label(const std::vector<std::string>& ids) override;

 private:
  std::map<std::string, std::vector<int>> gold_;
};

struct RoundMetrics {
  int labeled = 0;  // |L| the evaluated model was trained on
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double loss = 0;
};

struct RoundRecord {
  int round = 0;
  std::vector<std::string> queried_ids;
  std::vector<double> strategy_scores;
  std::optional<RoundMetrics> metrics;
};

nlohmann::json to_json(const RoundRecord& r);
RoundRecord round_record_from_json(const nlohmann::json& j);

/// Pool-based state. Samples are referenced by id into `pool`, which holds
/// token sequences of every sample; `labels` holds the oracle's answers for
/// the labeled set.
struct ActiveLearningState {
  std::map<std::string, std::vector<std::string>> pool;
  std::vector<std::string> labeled;    // query order
  std::vector<std::string> unlabeled;  // ascending id
  std::map<std::string, std::vector<int>> labels;
  std::vector<RoundRecord> history;
};

/// Seeded random choice of `config.initial_labeled` samples, labeled by `oracle`.
ActiveLearningState initial_state(const std::vector<EncodedSample>& pool, const ALConfig& config, Oracle& oracle);

/// First half of a round: committee training and ranking. Trains `learner`
/// for E epochs on L, records predictions on U before and after every epoch,
/// evaluates on `eval_set` when it is non-empty and picks the top-B samples.
struct RoundPlan {
  int round = 0;
  std::vector<std::string> queried_ids;
  std::vector<double> scores;
  std::map<std::string, std::vector<int>> prior_predictions;
  std::optional<RoundMetrics> metrics;
};

RoundPlan plan_round(Learner& learner, const ActiveLearningState& state, const ALConfig& config,
                     const std::vector<EncodedSample>& eval_set);

/// Second half: moves the queried samples from U to L with their labels.
ActiveLearningState commit_round(const ActiveLearningState& state, const RoundPlan& plan,
                                 const std::vector<std::vector<int>>& labels, int num_tags);

/// plan_round, oracle query and commit_round. If the oracle fails, `learner`
/// is restored and the exception propagates; `state` is never modified.
ActiveLearningState run_round(const ActiveLearningState& state, Learner& learner, const ALConfig& config,
                              Oracle& oracle, const std::vector<EncodedSample>& eval_set);

/// A learner ready for active learning over `pool`, its vocabulary covering
/// the whole pool.
Learner make_learner(const std::vector<EncodedSample>& pool, const ModelConfig& model_config);

struct CurvePoint {
  std::string strategy;
  std::uint64_t seed = 0;
  int round = 0;
  RoundMetrics metrics;
};

nlohmann::json to_json(const CurvePoint& p);

struct SimulationResult {
  std::vector<CurvePoint> curve;
  std::vector<ActiveLearningState> finals;  // one per seed
};

/// Runs config.rounds rounds per seed with the simulated oracle, then trains
/// one further committee pass on the final L to evaluate it. The seed drives
/// model initialization, the initial labeled set and random ranking.
SimulationResult simulate(const std::vector<EncodedSample>& pool, const std::vector<EncodedSample>& eval_set,
                          const ModelConfig& model_config, const ALConfig& al_config,
                          const std::vector<std::uint64_t>& seeds);

/// Mean F1 per labeled-set size across seeds.
std::map<int, double> mean_curve(const std::vector<CurvePoint>& curve);

void write_curve(const std::filesystem::path& path, const std::vector<CurvePoint>& curve);

}  // namespace avex

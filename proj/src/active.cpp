#include "avex/active.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "avex/errors.hpp"

namespace avex {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kTagFlip: return "TF";
    case Strategy::kLeastConfidence: return "LC";
    case Strategy::kRandom: return "random";
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  std::string n;
  for (char c : name) n += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (n == "tf") return Strategy::kTagFlip;
  if (n == "lc") return Strategy::kLeastConfidence;
  if (n == "random") return Strategy::kRandom;
  throw ConfigError("unknown query strategy '" + name + "'");
}

void ALConfig::validate() const {
  if (batch_size < 1) throw ConfigError("active learning batch size must be at least 1");
  if (committee_epochs < 2) throw ConfigError("committee_epochs must be at least 2");
  if (initial_labeled < 1) throw ConfigError("initial_labeled must be at least 1");
  if (rounds < 0) throw ConfigError("rounds must be non-negative");
  if (stop_threshold < 0) throw ConfigError("stop_threshold must be non-negative");
}

nlohmann::json to_json(const ALConfig& c) {
  return {{"version", 1},
          {"strategy", to_string(c.strategy)},
          {"initial_labeled", c.initial_labeled},
          {"batch_size", c.batch_size},
          {"rounds", c.rounds},
          {"committee_epochs", c.committee_epochs},
          {"stop_threshold", c.stop_threshold},
          {"normalize_flips", c.normalize_flips},
          {"reinitialize", c.reinitialize},
          {"seed", c.seed}};
}

ALConfig al_config_from_json(const nlohmann::json& j, ALConfig c) {
  try {
    if (j.contains("strategy")) c.strategy = parse_strategy(j.at("strategy").get<std::string>());
    c.initial_labeled = j.value("initial_labeled", c.initial_labeled);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.rounds = j.value("rounds", c.rounds);
    c.committee_epochs = j.value("committee_epochs", c.committee_epochs);
    c.stop_threshold = j.value("stop_threshold", c.stop_threshold);
    c.normalize_flips = j.value("normalize_flips", c.normalize_flips);
    c.reinitialize = j.value("reinitialize", c.reinitialize);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid active learning config: ") + e.what());
  }
  c.validate();
  return c;
}

long q_tf(const FlipRecord& record) {
  if (record.snapshots.size() < 2) throw ContractError("q_tf: a flip record needs at least two snapshots");
  const std::size_t n = record.snapshots.front().size();
  long flips = 0;
  for (std::size_t e = 1; e < record.snapshots.size(); ++e) {
    const auto& prev = record.snapshots[e - 1];
    const auto& cur = record.snapshots[e];
    if (cur.size() != n || prev.size() != n) throw ContractError("q_tf: snapshots differ in length");
    for (std::size_t t = 0; t < n; ++t) flips += prev[t] != cur[t] ? 1 : 0;
  }
  return flips;
}

double q_lc(const Model& model, const std::vector<std::string>& tokens) {
  if (tokens.empty()) return 0.0;
  return model.infer({tokens}).front().uncertainty;
}

SimulatedOracle::SimulatedOracle(const std::vector<EncodedSample>& samples) {
  for (const auto& s : samples) gold_[s.id] = s.tags;
}

std::vector<std::vector<int>> SimulatedOracle::label(const std::vector<std::string>& ids) {
  std::vector<std::vector<int>> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    auto it = gold_.find(id);
    if (it == gold_.end()) throw ContractError("oracle has no gold labels for sample '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

namespace {

nlohmann::json metrics_json(const RoundMetrics& m) {
  return {{"labeled", m.labeled}, {"P", m.precision}, {"R", m.recall}, {"F", m.f1}, {"loss", m.loss}};
}

RoundMetrics metrics_from_json(const nlohmann::json& j) {
  RoundMetrics m;
  m.labeled = j.at("labeled").get<int>();
  m.precision = j.at("P").get<double>();
  m.recall = j.at("R").get<double>();
  m.f1 = j.at("F").get<double>();
  m.loss = j.value("loss", 0.0);
  return m;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt), static_cast<std::uint32_t>(salt >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::vector<EncodedSample> labeled_samples(const ActiveLearningState& state) {
  std::vector<EncodedSample> out;
  out.reserve(state.labeled.size());
  for (const auto& id : state.labeled) {
    EncodedSample s;
    s.id = id;
    s.tokens = state.pool.at(id);
    s.tags = state.labels.at(id);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::vector<int>> predict_pool(const Model& model, const std::vector<std::vector<std::string>>& tokens) {
  std::vector<std::vector<int>> out;
  out.reserve(tokens.size());
  for (auto& r : model.infer(tokens)) out.push_back(std::move(r.tags));
  return out;
}

}  // namespace

nlohmann::json to_json(const RoundRecord& r) {
  nlohmann::json j = {{"version", 1}, {"round", r.round}, {"queried_ids", r.queried_ids},
                      {"strategy_scores", r.strategy_scores}};
  j["post_round_metrics"] = r.metrics ? metrics_json(*r.metrics) : nlohmann::json(nullptr);
  return j;
}

RoundRecord round_record_from_json(const nlohmann::json& j) {
  RoundRecord r;
  r.round = j.at("round").get<int>();
  r.queried_ids = j.at("queried_ids").get<std::vector<std::string>>();
  r.strategy_scores = j.at("strategy_scores").get<std::vector<double>>();
  if (j.contains("post_round_metrics") && !j.at("post_round_metrics").is_null()) {
    r.metrics = metrics_from_json(j.at("post_round_metrics"));
  }
  return r;
}

ActiveLearningState initial_state(const std::vector<EncodedSample>& pool, const ALConfig& config, Oracle& oracle) {
  config.validate();
  if (pool.empty()) throw ContractError("active learning needs a non-empty pool");
  ActiveLearningState state;
  for (const auto& s : pool) {
    if (!state.pool.emplace(s.id, s.tokens).second) throw ContractError("duplicate sample id '" + s.id + "'");
  }
  std::vector<std::string> ids;
  for (const auto& [id, tokens] : state.pool) ids.push_back(id);
  std::mt19937_64 rng(mix_seed(config.seed, 0));
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t take = std::min(ids.size(), static_cast<std::size_t>(config.initial_labeled));
  std::vector<std::string> chosen(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take));
  std::sort(chosen.begin(), chosen.end());
  const auto labels = oracle.label(chosen);
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    state.labeled.push_back(chosen[i]);
    state.labels[chosen[i]] = labels[i];
  }
  std::set<std::string> taken(chosen.begin(), chosen.end());
  for (const auto& [id, tokens] : state.pool) {
    if (!taken.count(id)) state.unlabeled.push_back(id);
  }
  return state;
}

RoundPlan plan_round(Learner& learner, const ActiveLearningState& state, const ALConfig& config,
                     const std::vector<EncodedSample>& eval_set) {
  config.validate();
  if (state.unlabeled.empty()) throw ContractError("run_round: the unlabeled pool is empty");
  RoundPlan plan;
  plan.round = static_cast<int>(state.history.size()) + 1;

  if (config.reinitialize) {
    ModelConfig mc = learner.model().config();
    mc.seed = mix_seed(mc.seed, static_cast<std::uint64_t>(plan.round));
    learner = Learner(Model(mc, learner.model().vocabulary()));
  }

  const std::vector<EncodedSample> train_set = labeled_samples(state);
  std::vector<std::vector<std::string>> pool_tokens;
  pool_tokens.reserve(state.unlabeled.size());
  for (const auto& id : state.unlabeled) pool_tokens.push_back(state.pool.at(id));

  const bool tag_flip = config.strategy == Strategy::kTagFlip;
  std::vector<FlipRecord> records(tag_flip ? pool_tokens.size() : 0);
  auto snapshot = [&] {
    auto preds = predict_pool(learner.model(), pool_tokens);
    for (std::size_t i = 0; i < records.size(); ++i) records[i].snapshots.push_back(std::move(preds[i]));
  };
  if (tag_flip) snapshot();
  for (int e = 0; e < config.committee_epochs; ++e) {
    learner.train_epoch(train_set);
    if (tag_flip) snapshot();
  }

  std::vector<double> scores(pool_tokens.size(), 0.0);
  std::vector<std::vector<int>> final_tags;
  if (tag_flip) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      scores[i] = static_cast<double>(q_tf(records[i]));
      if (config.normalize_flips && !pool_tokens[i].empty()) scores[i] /= static_cast<double>(pool_tokens[i].size());
      final_tags.push_back(records[i].snapshots.back());
    }
  } else {
    auto inferred = learner.model().infer(pool_tokens);
    for (std::size_t i = 0; i < inferred.size(); ++i) {
      if (config.strategy == Strategy::kLeastConfidence) scores[i] = inferred[i].uncertainty;
      final_tags.push_back(std::move(inferred[i].tags));
    }
    if (config.strategy == Strategy::kRandom) {
      std::mt19937_64 rng(mix_seed(config.seed, static_cast<std::uint64_t>(plan.round)));
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& s : scores) s = u(rng);
    }
  }

  // Unlabeled ids are ascending, so a stable sort on score breaks ties by id.
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const std::size_t take = std::min(order.size(), static_cast<std::size_t>(config.batch_size));
  for (std::size_t k = 0; k < take; ++k) {
    const std::size_t i = order[k];
    plan.queried_ids.push_back(state.unlabeled[i]);
    plan.scores.push_back(scores[i]);
    plan.prior_predictions[state.unlabeled[i]] = final_tags[i];
  }

  if (!eval_set.empty()) {
    const EvalResult r = evaluate_model(learner.model(), eval_set, config.stop_threshold > 0);
    plan.metrics = RoundMetrics{static_cast<int>(state.labeled.size()), r.report.micro.precision,
                                r.report.micro.recall, r.report.micro.f1, r.loss};
  }
  return plan;
}

ActiveLearningState commit_round(const ActiveLearningState& state, const RoundPlan& plan,
                                 const std::vector<std::vector<int>>& labels, int num_tags) {
  if (labels.size() != plan.queried_ids.size()) throw ContractError("commit_round: label count mismatch");
  std::set<std::string> queried;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::string& id = plan.queried_ids[i];
    if (!queried.insert(id).second) throw ContractError("commit_round: sample '" + id + "' queried twice");
    if (!std::binary_search(state.unlabeled.begin(), state.unlabeled.end(), id)) {
      throw ContractError("commit_round: sample '" + id + "' is not in the unlabeled pool");
    }
    if (labels[i].size() != state.pool.at(id).size()) {
      throw ContractError("commit_round: label for '" + id + "' has the wrong length");
    }
    for (int tag : labels[i]) {
      if (tag < 0 || tag >= num_tags) throw ContractError("commit_round: tag index out of range for '" + id + "'");
    }
  }
  ActiveLearningState next = state;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    next.labeled.push_back(plan.queried_ids[i]);
    next.labels[plan.queried_ids[i]] = labels[i];
  }
  next.unlabeled.clear();
  for (const auto& id : state.unlabeled) {
    if (!queried.count(id)) next.unlabeled.push_back(id);
  }
  next.history.push_back({plan.round, plan.queried_ids, plan.scores, plan.metrics});
  return next;
}

ActiveLearningState run_round(const ActiveLearningState& state, Learner& learner, const ALConfig& config,
                              Oracle& oracle, const std::vector<EncodedSample>& eval_set) {
  const Learner backup = learner;
  try {
    const RoundPlan plan = plan_round(learner, state, config, eval_set);
    const auto labels = oracle.label(plan.queried_ids);
    return commit_round(state, plan, labels, static_cast<int>(learner.model().num_tags()));
  } catch (...) {
    learner = backup;
    throw;
  }
}

Learner make_learner(const std::vector<EncodedSample>& pool, const ModelConfig& model_config) {
  return Learner(Model(model_config, vocabulary_for(pool, model_config)));
}

nlohmann::json to_json(const CurvePoint& p) {
  return {{"version", 1},
          {"strategy", p.strategy},
          {"seed", p.seed},
          {"round", p.round},
          {"labeled", p.metrics.labeled},
          {"P", p.metrics.precision},
          {"R", p.metrics.recall},
          {"F", p.metrics.f1}};
}

SimulationResult simulate(const std::vector<EncodedSample>& pool, const std::vector<EncodedSample>& eval_set,
                          const ModelConfig& model_config, const ALConfig& al_config,
                          const std::vector<std::uint64_t>& seeds) {
  al_config.validate();
  SimulationResult result;
  for (std::uint64_t seed : seeds) {
    ALConfig ac = al_config;
    ac.seed = seed;
    ModelConfig mc = model_config;
    mc.seed = seed;
    Learner learner = make_learner(pool, mc);
    SimulatedOracle oracle(pool);
    ActiveLearningState state = initial_state(pool, ac, oracle);
    auto record = [&](int round, const std::optional<RoundMetrics>& m) {
      if (m) result.curve.push_back({to_string(ac.strategy), seed, round, *m});
    };
    for (int r = 0; r < ac.rounds && !state.unlabeled.empty(); ++r) {
      state = run_round(state, learner, ac, oracle, eval_set);
      record(state.history.back().round, state.history.back().metrics);
      const auto& h = state.history;
      if (ac.stop_threshold > 0 && h.size() >= 2 && h.back().metrics && h[h.size() - 2].metrics &&
          std::abs(h.back().metrics->loss - h[h.size() - 2].metrics->loss) < ac.stop_threshold) {
        break;
      }
    }
    if (!eval_set.empty()) {
      const std::vector<EncodedSample> train_set = labeled_samples(state);
      for (int e = 0; e < ac.committee_epochs; ++e) learner.train_epoch(train_set);
      const EvalResult r = evaluate_model(learner.model(), eval_set);
      record(static_cast<int>(state.history.size()) + 1,
             RoundMetrics{static_cast<int>(state.labeled.size()), r.report.micro.precision, r.report.micro.recall,
                          r.report.micro.f1, r.loss});
    }
    result.finals.push_back(std::move(state));
  }
  return result;
}

std::map<int, double> mean_curve(const std::vector<CurvePoint>& curve) {
  std::map<int, std::pair<double, int>> acc;
  for (const auto& p : curve) {
    auto& a = acc[p.metrics.labeled];
    a.first += p.metrics.f1;
    a.second += 1;
  }
  std::map<int, double> out;
  for (const auto& [labeled, a] : acc) out[labeled] = a.first / a.second;
  return out;
}

void write_curve(const std::filesystem::path& path, const std::vector<CurvePoint>& curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write curve '" + path.string() + "'");
  for (const auto& p : curve) out << to_json(p).dump() << '\n';
  if (!out) throw IoError("failed writing curve '" + path.string() + "'");
}

}  // namespace avex

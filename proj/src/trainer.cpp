#include "avex/trainer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "avex/errors.hpp"

namespace avex {

EncodedSample encode_sample(const LabeledSample& sample, const TagScheme& scheme) {
  SpanMap kept;
  for (const auto& [attr, spans] : sample.spans) {
    if (scheme.attribute_index(attr) >= 0 && !spans.empty()) kept[attr] = spans;
  }
  EncodedSample e;
  e.id = sample.id;
  e.tokens = sample.tokens;
  e.tags = encode_spans(static_cast<int>(sample.tokens.size()), kept, scheme);
  e.gold = spans_to_values(sample.tokens, kept);
  return e;
}

std::vector<EncodedSample> encode_samples(const std::vector<LabeledSample>& samples, const TagScheme& scheme) {
  std::vector<EncodedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(encode_sample(s, scheme));
  return out;
}

MetricHistory::Average MetricHistory::last_k_average() const {
  Average a;
  const std::size_t first = epochs.size() > static_cast<std::size_t>(last_k) ? epochs.size() - static_cast<std::size_t>(last_k) : 0;
  for (std::size_t i = first; i < epochs.size(); ++i) {
    if (!epochs[i].evaluated) continue;
    a.precision += epochs[i].precision;
    a.recall += epochs[i].recall;
    a.f1 += epochs[i].f1;
    ++a.epochs;
  }
  if (a.epochs > 0) {
    a.precision /= a.epochs;
    a.recall /= a.epochs;
    a.f1 /= a.epochs;
  }
  return a;
}

nlohmann::json to_json(const EpochMetrics& m) {
  nlohmann::json j = {{"version", 1}, {"epoch", m.epoch}, {"loss", m.loss}};
  if (m.evaluated) {
    j["P"] = m.precision;
    j["R"] = m.recall;
    j["F"] = m.f1;
  } else {
    j["P"] = nullptr;
    j["R"] = nullptr;
    j["F"] = nullptr;
  }
  return j;
}

void write_history(const std::filesystem::path& path, const MetricHistory& history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write metrics '" + path.string() + "'");
  for (const auto& m : history.epochs) out << to_json(m).dump() << '\n';
  if (!out) throw IoError("failed writing metrics '" + path.string() + "'");
}

MetricHistory read_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics '" + path.string() + "'");
  MetricHistory h;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EpochMetrics m;
      m.epoch = j.at("epoch").get<int>();
      m.loss = j.at("loss").get<double>();
      m.evaluated = j.contains("F") && !j.at("F").is_null();
      if (m.evaluated) {
        m.precision = j.at("P").get<double>();
        m.recall = j.at("R").get<double>();
        m.f1 = j.at("F").get<double>();
      }
      h.epochs.push_back(m);
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return h;
}

EvalResult evaluate_model(const Model& model, const std::vector<EncodedSample>& samples, bool with_loss) {
  std::vector<std::vector<std::string>> tokens;
  tokens.reserve(samples.size());
  for (const auto& s : samples) tokens.push_back(s.tokens);
  const std::vector<Inference> inferred = model.infer(tokens);

  std::vector<SampleExtraction> predicted;
  std::vector<SampleExtraction> gold;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    predicted.push_back({samples[i].id, decode_tags(samples[i].tokens, inferred[i].tags, model.scheme())});
    gold.push_back({samples[i].id, samples[i].gold});
  }
  EvalResult r;
  r.report = evaluate(predicted, gold);
  if (!with_loss) return r;

  std::vector<const std::vector<Index>*> seqs;
  std::vector<std::vector<Index>> ids;
  std::vector<std::vector<int>> tags;
  ids.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.tokens.empty()) continue;
    ids.push_back(model.vocabulary().indices(s.tokens));
    tags.push_back(s.tags);
  }
  if (!ids.empty()) {
    constexpr std::size_t kChunk = 64;
    auto& self = const_cast<Model&>(model);
    double total = 0;
    for (std::size_t start = 0; start < ids.size(); start += kChunk) {
      const std::size_t stop = std::min(ids.size(), start + kChunk);
      seqs.clear();
      for (std::size_t i = start; i < stop; ++i) seqs.push_back(&ids[i]);
      const std::vector<std::vector<int>> gold_tags(tags.begin() + static_cast<std::ptrdiff_t>(start),
                                                    tags.begin() + static_cast<std::ptrdiff_t>(stop));
      const Batch batch = make_batch(seqs);
      Graph<double> g(false);
      const ForwardResult out = self.forward(g, batch, nullptr);
      total += self.loss(out, batch, gold_tags).value()(0, 0) * static_cast<double>(stop - start);
    }
    r.loss = total / static_cast<double>(ids.size());
  }
  return r;
}

Learner::Learner(Model model) : model_(std::move(model)), rng_(model_.config().seed ^ 0x9e3779b97f4a7c15ULL) {
  adam_.learning_rate = model_.config().learning_rate;
  adam_.clip_norm = model_.config().clip_norm;
  state_ = AdamState<double>::zeros_like(model_.params().pointers());
}

double Learner::train_epoch(const std::vector<EncodedSample>& samples) {
  std::vector<const EncodedSample*> ptrs;
  ptrs.reserve(samples.size());
  for (const auto& s : samples) ptrs.push_back(&s);
  return train_epoch(ptrs);
}

double Learner::train_epoch(const std::vector<const EncodedSample*>& samples) {
  std::vector<const EncodedSample*> order;
  for (const auto* s : samples) {
    if (!s->tokens.empty()) order.push_back(s);
  }
  if (order.empty()) return 0.0;
  std::shuffle(order.begin(), order.end(), rng_);
  std::stable_sort(order.begin(), order.end(),
                   [](const EncodedSample* a, const EncodedSample* b) { return a->tokens.size() < b->tokens.size(); });

  const std::size_t bs = static_cast<std::size_t>(model_.config().batch_size);
  std::vector<std::pair<std::size_t, std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += bs) batches.emplace_back(start, std::min(order.size(), start + bs));
  std::shuffle(batches.begin(), batches.end(), rng_);

  const std::vector<Parameter*> params = model_.params().pointers();
  double weighted = 0;
  for (const auto& [start, stop] : batches) {
    std::vector<std::vector<Index>> ids;
    std::vector<std::vector<int>> gold;
    for (std::size_t i = start; i < stop; ++i) {
      ids.push_back(model_.vocabulary().indices(order[i]->tokens));
      gold.push_back(order[i]->tags);
    }
    std::vector<const std::vector<Index>*> seqs;
    for (const auto& v : ids) seqs.push_back(&v);
    const Batch batch = make_batch(seqs);

    model_.params().zero_grad();
    Graph<double> g;
    const ForwardResult out = model_.forward(g, batch, &rng_);
    const Var<double> loss = model_.loss(out, batch, gold);
    g.backward(loss);
    adam_step(params, state_, adam_);
    weighted += loss.value()(0, 0) * static_cast<double>(stop - start);
  }
  return weighted / static_cast<double>(order.size());
}

namespace {
constexpr const char* kFirstMoment = "adam.first.";
constexpr const char* kSecondMoment = "adam.second.";
}  // namespace

void save_learner(const std::filesystem::path& path, const Learner& learner) {
  ParameterSet all;
  const std::vector<std::string> names = learner.model_.params().names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    all.add(names[i], learner.model_.params().at(names[i]).value());
    all.add(kFirstMoment + names[i], learner.state_.first_moment[i]);
    all.add(kSecondMoment + names[i], learner.state_.second_moment[i]);
  }
  std::ostringstream rng;
  rng << learner.rng_;
  nlohmann::json meta = model_meta(learner.model_);
  meta["adam_step"] = learner.state_.step;
  meta["rng"] = rng.str();
  save_checkpoint(path, meta, all);
}

Learner load_learner(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  ParameterSet model_params;
  std::map<std::string, Matrix> first;
  std::map<std::string, Matrix> second;
  const std::string f = kFirstMoment;
  const std::string s = kSecondMoment;
  for (const auto& [name, p] : ck.params) {
    if (name.rfind(f, 0) == 0) {
      first[name.substr(f.size())] = p.value();
    } else if (name.rfind(s, 0) == 0) {
      second[name.substr(s.size())] = p.value();
    } else {
      model_params.add(name, p.value());
    }
  }
  Learner learner(model_from_meta(ck.meta, std::move(model_params)));
  const std::vector<std::string> names = learner.model_.params().names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto fi = first.find(names[i]);
    auto si = second.find(names[i]);
    if (fi == first.end() || si == second.end()) {
      throw IngestionError("learner checkpoint '" + path.string() + "' lacks optimizer state for '" + names[i] + "'");
    }
    learner.state_.first_moment[i] = fi->second;
    learner.state_.second_moment[i] = si->second;
  }
  try {
    learner.state_.step = ck.meta.at("adam_step").get<std::int64_t>();
    std::istringstream rng(ck.meta.at("rng").get<std::string>());
    rng >> learner.rng_;
    if (!rng) throw IngestionError("learner checkpoint '" + path.string() + "' has a corrupt RNG state");
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("learner checkpoint '" + path.string() + "': " + e.what());
  }
  return learner;
}

Vocabulary vocabulary_for(const std::vector<EncodedSample>& samples, const ModelConfig& config) {
  std::vector<std::vector<std::string>> tokens;
  tokens.reserve(samples.size());
  for (const auto& s : samples) tokens.push_back(s.tokens);
  return build_vocabulary(tokens, config.min_count, config.lowercase);
}

TrainResult train(const std::vector<EncodedSample>& train_set, const std::vector<EncodedSample>& eval_set,
                  const ModelConfig& config, const EpochCallback& on_epoch) {
  if (train_set.empty()) throw ContractError("train: empty training set");
  config.validate();
  Learner learner(Model(config, vocabulary_for(train_set, config)));
  MetricHistory history;
  history.last_k = config.last_k_average;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    try {
      m.loss = learner.train_epoch(train_set);
    } catch (const NumericError& e) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    const bool in_window = epoch > config.epochs - config.last_k_average;
    if (!eval_set.empty() && (in_window || epoch % config.eval_every == 0)) {
      const EvalResult r = evaluate_model(learner.model(), eval_set);
      m.evaluated = true;
      m.precision = r.report.micro.precision;
      m.recall = r.report.micro.recall;
      m.f1 = r.report.micro.f1;
    }
    history.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return {std::move(learner.model()), std::move(history)};
}

}  // namespace avex

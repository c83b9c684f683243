#include "avex/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "avex/errors.hpp"
#include "avex/logging.hpp"

namespace avex {

std::string to_string(ProjectStatus s) {
  switch (s) {
    case ProjectStatus::kIdle: return "IDLE";
    case ProjectStatus::kTraining: return "TRAINING";
    case ProjectStatus::kAwaitingLabels: return "AWAITING_LABELS";
    case ProjectStatus::kDone: return "DONE";
  }
  return "?";
}

struct AnnotationService::Project {
  std::string id;
  std::filesystem::path dir;
  ModelConfig model_config;
  ALConfig al_config;
  std::vector<EncodedSample> pool;
  std::vector<EncodedSample> eval;
  TagScheme scheme{SchemeKind::kBIOE, {"value"}};
  ActiveLearningState state;
  ProjectStatus status = ProjectStatus::kIdle;
  std::optional<RoundPlan> pending;
  std::map<std::string, std::vector<int>> received;
  std::optional<Learner> learner;
  std::string last_error;

  std::mutex mutex;
  std::condition_variable settled;
  bool training = false;
  std::thread worker;

  void append(nlohmann::json event) {
    event["version"] = kApiVersion;
    std::ofstream out(dir / "events.jsonl", std::ios::app);
    out << event.dump() << '\n';
    out.flush();
    if (!out) throw IoError("cannot append to event log of project " + id);
  }
};

struct AnnotationService::Http {
  httplib::Server server;
  std::thread thread;
};

namespace {

ApiResponse reply(int status, nlohmann::json body) {
  body["version"] = kApiVersion;
  return {status, std::move(body)};
}

ApiResponse error(int status, const std::string& message, nlohmann::json extra = nlohmann::json::object()) {
  extra["error"] = message;
  return reply(status, std::move(extra));
}

std::vector<std::string> path_parts(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(cur);
      cur.clear();
    } else if (c == '?') {
      break;
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(cur);
  return parts;
}

std::vector<ProductProfile> profiles_from(const nlohmann::json& j) {
  if (j.is_string()) return load_corpus(j.get<std::string>());
  if (!j.is_array()) throw ValidationError("corpus must be a path or an array of records");
  std::vector<ProductProfile> out;
  for (const auto& r : j) out.push_back(profile_from_json(r));
  return out;
}

nlohmann::json profiles_json(const std::vector<ProductProfile>& profiles) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : profiles) arr.push_back(to_json(p));
  return arr;
}

std::vector<std::string> tag_names(const TagScheme& scheme, const std::vector<int>& tags) {
  std::vector<std::string> out;
  for (int t : tags) out.push_back(scheme.name(t));
  return out;
}

nlohmann::json plan_json(const RoundPlan& plan) {
  nlohmann::json prior = nlohmann::json::object();
  for (const auto& [id, tags] : plan.prior_predictions) prior[id] = tags;
  RoundRecord r{plan.round, plan.queried_ids, plan.scores, plan.metrics};
  nlohmann::json j = to_json(r);
  j["prior_predictions"] = prior;
  return j;
}

RoundPlan plan_from_json(const nlohmann::json& j) {
  RoundRecord r = round_record_from_json(j);
  RoundPlan plan{r.round, r.queried_ids, r.strategy_scores, {}, r.metrics};
  for (const auto& [id, tags] : j.at("prior_predictions").items()) {
    plan.prior_predictions[id] = tags.get<std::vector<int>>();
  }
  return plan;
}

bool finished(const ActiveLearningState& state, const ALConfig& config) {
  return state.unlabeled.empty() || static_cast<int>(state.history.size()) >= config.rounds;
}

}  // namespace

AnnotationService::AnnotationService(std::filesystem::path store, ServiceOptions options)
    : store_(std::move(store)), options_(std::move(options)) {
  std::filesystem::create_directories(store_);
  std::vector<std::filesystem::path> dirs;
  for (const auto& entry : std::filesystem::directory_iterator(store_)) {
    if (entry.is_directory() && std::filesystem::exists(entry.path() / "events.jsonl")) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) replay(d);
}

AnnotationService::~AnnotationService() {
  stop();
  for (auto& [id, p] : projects_) {
    if (p->worker.joinable()) p->worker.join();
  }
}

AnnotationService::Project* AnnotationService::find(const std::string& id) {
  std::lock_guard<std::mutex> lock(projects_mutex_);
  auto it = projects_.find(id);
  return it == projects_.end() ? nullptr : it->second.get();
}

ApiResponse AnnotationService::handle(const std::string& method, const std::string& path, const std::string& body) {
  try {
    nlohmann::json json = nlohmann::json::object();
    if (method == "POST" && !body.empty()) {
      try {
        json = nlohmann::json::parse(body);
      } catch (const nlohmann::json::exception& e) {
        return error(400, std::string("malformed JSON body: ") + e.what());
      }
      if (!json.is_object()) return error(400, "request body must be a JSON object");
    }
    const std::vector<std::string> parts = path_parts(path);
    if (parts.empty() || parts[0] != "projects") return error(404, "no such resource");
    if (parts.size() == 1) {
      if (method == "POST") return create_project(json);
      return error(405, "method not allowed");
    }
    Project* p = find(parts[1]);
    if (p == nullptr) return error(404, "unknown project '" + parts[1] + "'");
    if (parts.size() == 2 && method == "GET") return summary(*p);
    if (parts.size() == 3) {
      const std::string& what = parts[2];
      if (what == "rounds" && method == "POST") return start_round(*p);
      if (what == "queries" && method == "GET") return queries(*p);
      if (what == "annotations" && method == "POST") return annotate(*p, json);
      if (what == "metrics" && method == "GET") return metrics(*p);
      if (what == "labels" && method == "GET") return labels(*p);
    }
    if (parts.size() == 4 && parts[2] == "attention" && method == "GET") return attention(*p, parts[3]);
    return error(404, "no such resource");
  } catch (const ConfigError& e) {
    return error(400, e.what());
  } catch (const ValidationError& e) {
    return error(400, e.what());
  } catch (const IngestionError& e) {
    return error(400, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

ApiResponse AnnotationService::create_project(const nlohmann::json& body) {
  if (!body.contains("corpus")) return error(400, "missing field 'corpus'");
  auto project = std::make_unique<Project>();
  const std::vector<ProductProfile> corpus = profiles_from(body.at("corpus"));
  const std::vector<ProductProfile> eval_corpus =
      body.contains("eval_corpus") ? profiles_from(body.at("eval_corpus")) : std::vector<ProductProfile>{};
  if (corpus.empty()) return error(400, "corpus is empty");
  project->model_config = model_config_from_json(body.value("model_config", nlohmann::json::object()));
  project->al_config = al_config_from_json(body.value("al_config", nlohmann::json::object()));

  std::string id;
  {
    std::lock_guard<std::mutex> lock(projects_mutex_);
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%04d", next_id_++);
    id = buf;
  }
  nlohmann::json event = {{"type", "created"},
                          {"project_id", id},
                          {"corpus", profiles_json(corpus)},
                          {"eval_corpus", profiles_json(eval_corpus)},
                          {"model_config", to_json(project->model_config)},
                          {"al_config", to_json(project->al_config)}};
  project->id = id;
  project->dir = store_ / id;
  std::filesystem::create_directories(project->dir);
  project->scheme = project->model_config.make_scheme();
  project->pool = encode_samples(to_labeled(corpus), project->scheme);
  project->eval = encode_samples(to_labeled(eval_corpus), project->scheme);
  SimulatedOracle gold(project->pool);
  project->state = initial_state(project->pool, project->al_config, gold);
  project->learner.emplace(make_learner(project->pool, project->model_config));
  project->append(event);
  {
    std::lock_guard<std::mutex> lock(projects_mutex_);
    projects_[id] = std::move(project);
  }
  return reply(201, {{"project_id", id}, {"status", to_string(ProjectStatus::kIdle)}});
}

void AnnotationService::replay(const std::filesystem::path& dir) {
  std::ifstream in(dir / "events.jsonl");
  std::string line;
  std::size_t line_no = 0;
  auto project = std::make_unique<Project>();
  project->dir = dir;
  bool start_logged = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json ev;
    try {
      ev = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
      // A torn final write is the only way a line can be incomplete.
      warn((dir / "events.jsonl").string() + ":" + std::to_string(line_no) + ": ignoring truncated event");
      break;
    }
    Project& p = *project;
    const std::string type = ev.at("type").get<std::string>();
    if (type == "created") {
      p.id = ev.at("project_id").get<std::string>();
      p.model_config = model_config_from_json(ev.at("model_config"));
      p.al_config = al_config_from_json(ev.at("al_config"));
      p.scheme = p.model_config.make_scheme();
      p.pool = encode_samples(to_labeled(profiles_from(ev.at("corpus"))), p.scheme);
      p.eval = encode_samples(to_labeled(profiles_from(ev.at("eval_corpus"))), p.scheme);
      SimulatedOracle gold(p.pool);
      p.state = initial_state(p.pool, p.al_config, gold);
      p.learner.emplace(make_learner(p.pool, p.model_config));
      p.status = ProjectStatus::kIdle;
    } else if (type == "round_started") {
      p.status = ProjectStatus::kTraining;
      start_logged = true;
    } else if (type == "round_planned") {
      p.pending = plan_from_json(ev);
      p.learner.emplace(load_learner(dir / ev.at("checkpoint").get<std::string>()));
      p.received.clear();
      p.status = ProjectStatus::kAwaitingLabels;
      start_logged = false;
    } else if (type == "annotation") {
      p.received[ev.at("sample_id").get<std::string>()] = ev.at("tags").get<std::vector<int>>();
    } else if (type == "round_committed") {
      std::vector<std::vector<int>> labels;
      for (const auto& id : p.pending->queried_ids) labels.push_back(p.received.at(id));
      p.state = commit_round(p.state, *p.pending, labels, p.scheme.num_tags());
      p.pending.reset();
      p.received.clear();
      p.status = finished(p.state, p.al_config) ? ProjectStatus::kDone : ProjectStatus::kTraining;
      start_logged = false;
    } else if (type == "round_failed") {
      p.status = ProjectStatus::kIdle;
      p.last_error = ev.value("error", std::string());
      start_logged = false;
    }
  }
  if (project->id.empty()) return;
  Project* p = project.get();
  {
    std::lock_guard<std::mutex> lock(projects_mutex_);
    int n = 0;
    if (std::sscanf(p->id.c_str(), "p%d", &n) == 1) next_id_ = std::max(next_id_, n + 1);
    projects_[p->id] = std::move(project);
  }
  if (p->status == ProjectStatus::kTraining) {
    std::unique_lock<std::mutex> lock(p->mutex);
    const int round = static_cast<int>(p->state.history.size()) + 1;
    if (!start_logged) p->append({{"type", "round_started"}, {"round", round}});
    p->training = true;
    p->worker = std::thread(&AnnotationService::run_training, this, p, round);
  }
}

void AnnotationService::begin_training(Project& p, std::unique_lock<std::mutex>&) {
  if (p.worker.joinable()) p.worker.join();
  const int round = static_cast<int>(p.state.history.size()) + 1;
  p.append({{"type", "round_started"}, {"round", round}});
  p.status = ProjectStatus::kTraining;
  p.training = true;
  p.worker = std::thread(&AnnotationService::run_training, this, &p, round);
}

void AnnotationService::run_training(Project* p, int round) {
  ActiveLearningState state;
  std::optional<Learner> learner;
  {
    std::lock_guard<std::mutex> lock(p->mutex);
    state = p->state;
    learner = p->learner;
  }
  if (options_.on_training_start) options_.on_training_start(p->id, round);
  try {
    RoundPlan plan = plan_round(*learner, state, p->al_config, p->eval);
    char name[32];
    std::snprintf(name, sizeof name, "learner-%04d.ckpt", round);
    save_learner(p->dir / name, *learner);
    std::lock_guard<std::mutex> lock(p->mutex);
    nlohmann::json ev = plan_json(plan);
    ev["type"] = "round_planned";
    ev["checkpoint"] = name;
    p->append(ev);
    p->learner = std::move(learner);
    p->pending = std::move(plan);
    p->received.clear();
    p->status = ProjectStatus::kAwaitingLabels;
    p->training = false;
  } catch (const std::exception& e) {
    std::lock_guard<std::mutex> lock(p->mutex);
    p->last_error = e.what();
    try {
      p->append({{"type", "round_failed"}, {"round", round}, {"error", e.what()}});
    } catch (const std::exception& io) {
      warn(std::string("project ") + p->id + ": " + io.what());
    }
    p->status = ProjectStatus::kIdle;
    p->training = false;
  }
  p->settled.notify_all();
}

ApiResponse AnnotationService::start_round(Project& p) {
  std::unique_lock<std::mutex> lock(p.mutex);
  if (p.status != ProjectStatus::kIdle) {
    return error(409, "project is not idle", {{"status", to_string(p.status)}});
  }
  if (finished(p.state, p.al_config)) {
    p.status = ProjectStatus::kDone;
    return error(409, "no rounds remain", {{"status", to_string(p.status)}});
  }
  begin_training(p, lock);
  return reply(202, {{"status", to_string(p.status)}, {"round", static_cast<int>(p.state.history.size()) + 1}});
}

ApiResponse AnnotationService::queries(Project& p) {
  std::lock_guard<std::mutex> lock(p.mutex);
  if (p.status != ProjectStatus::kAwaitingLabels) {
    return error(409, "no queries outstanding", {{"status", to_string(p.status)}});
  }
  const RoundPlan& plan = *p.pending;
  const bool with_attention = p.model_config.variant == Variant::kOpenTag;
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < plan.queried_ids.size(); ++i) {
    const std::string& id = plan.queried_ids[i];
    const auto& tokens = p.state.pool.at(id);
    nlohmann::json q = {{"sample_id", id},
                        {"tokens", tokens},
                        {"strategy_score", plan.scores[i]},
                        {"prior_prediction_tags", tag_names(p.scheme, plan.prior_predictions.at(id))},
                        {"annotated", p.received.count(id) != 0}};
    if (with_attention) {
      Prediction pred = predict_tokens(p.learner->model(), tokens);
      if (pred.attention) {
        nlohmann::json rows = nlohmann::json::array();
        for (Index r = 0; r < pred.attention->weights.rows(); ++r) {
          std::vector<double> row(pred.attention->weights.row(r).data(),
                                  pred.attention->weights.row(r).data() + pred.attention->weights.cols());
          rows.push_back(row);
        }
        q["attention_matrix"] = rows;
      }
    }
    list.push_back(std::move(q));
  }
  return reply(200, {{"status", to_string(p.status)}, {"round", plan.round}, {"queries", list},
                     {"scheme", p.scheme.to_json()}});
}

ApiResponse AnnotationService::annotate(Project& p, const nlohmann::json& body) {
  if (!body.contains("sample_id") || !body.at("sample_id").is_string()) return error(400, "missing string 'sample_id'");
  if (!body.contains("tags") || !body.at("tags").is_array()) return error(400, "missing array 'tags'");
  const std::string id = body.at("sample_id").get<std::string>();
  std::unique_lock<std::mutex> lock(p.mutex);
  if (p.state.labels.count(id) || p.received.count(id)) {
    return error(409, "sample '" + id + "' is already labeled", {{"status", to_string(p.status)}});
  }
  if (p.status != ProjectStatus::kAwaitingLabels) {
    return error(409, "project is not awaiting labels", {{"status", to_string(p.status)}});
  }
  const RoundPlan& plan = *p.pending;
  if (std::find(plan.queried_ids.begin(), plan.queried_ids.end(), id) == plan.queried_ids.end()) {
    return error(409, "sample '" + id + "' is not part of the current query batch", {{"status", to_string(p.status)}});
  }
  const auto& tokens = p.state.pool.at(id);
  const auto& raw = body.at("tags");
  std::vector<int> tags;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    std::optional<int> tag;
    if (raw[i].is_string()) tag = p.scheme.parse(raw[i].get<std::string>());
    if (!tag) {
      return error(422, "invalid tag symbol", {{"position", i}, {"tag", raw[i]}});
    }
    tags.push_back(*tag);
  }
  if (tags.size() != tokens.size()) {
    return error(422, "expected " + std::to_string(tokens.size()) + " tags, got " + std::to_string(tags.size()),
                 {{"position", std::min(tags.size(), tokens.size())}});
  }
  p.append({{"type", "annotation"}, {"round", plan.round}, {"sample_id", id}, {"tags", tags}});
  p.received[id] = tags;
  const std::size_t remaining = plan.queried_ids.size() - p.received.size();
  if (remaining == 0) {
    std::vector<std::vector<int>> labels;
    for (const auto& q : plan.queried_ids) labels.push_back(p.received.at(q));
    ActiveLearningState next = commit_round(p.state, plan, labels, p.scheme.num_tags());
    p.append({{"type", "round_committed"}, {"round", plan.round}});
    p.state = std::move(next);
    p.pending.reset();
    p.received.clear();
    if (finished(p.state, p.al_config)) {
      p.status = ProjectStatus::kDone;
    } else {
      begin_training(p, lock);
    }
  }
  return reply(200, {{"status", to_string(p.status)}, {"remaining", remaining}});
}

ApiResponse AnnotationService::metrics(Project& p) {
  std::lock_guard<std::mutex> lock(p.mutex);
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& r : p.state.history) rounds.push_back(to_json(r));
  nlohmann::json body = {{"project_id", p.id},
                         {"status", to_string(p.status)},
                         {"labeled", p.state.labeled.size()},
                         {"unlabeled", p.state.unlabeled.size()},
                         {"rounds", rounds}};
  if (!p.last_error.empty()) body["last_error"] = p.last_error;
  return reply(200, body);
}

ApiResponse AnnotationService::labels(Project& p) {
  std::lock_guard<std::mutex> lock(p.mutex);
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [id, tags] : p.state.labels) out[id] = tag_names(p.scheme, tags);
  return reply(200, {{"project_id", p.id}, {"labels", out}});
}

ApiResponse AnnotationService::attention(Project& p, const std::string& sample_id) {
  std::lock_guard<std::mutex> lock(p.mutex);
  auto it = p.state.pool.find(sample_id);
  if (it == p.state.pool.end()) return error(404, "unknown sample '" + sample_id + "'");
  if (p.model_config.variant != Variant::kOpenTag) return error(400, "the project's model has no attention layer");
  Prediction pred = predict_tokens(p.learner->model(), it->second);
  nlohmann::json rows = nlohmann::json::array();
  if (pred.attention) {
    for (Index r = 0; r < pred.attention->weights.rows(); ++r) {
      std::vector<double> row(pred.attention->weights.row(r).data(),
                              pred.attention->weights.row(r).data() + pred.attention->weights.cols());
      rows.push_back(row);
    }
  }
  return reply(200, {{"sample_id", sample_id}, {"tokens", it->second}, {"matrix", rows}});
}

ApiResponse AnnotationService::summary(Project& p) {
  std::lock_guard<std::mutex> lock(p.mutex);
  nlohmann::json body = {{"project_id", p.id},
                         {"status", to_string(p.status)},
                         {"round", static_cast<int>(p.state.history.size()) + (p.pending ? 1 : 0)},
                         {"model_config", to_json(p.model_config)},
                         {"al_config", to_json(p.al_config)}};
  if (!p.last_error.empty()) body["last_error"] = p.last_error;
  return reply(200, body);
}

bool AnnotationService::wait_until_settled(const std::string& project_id, std::chrono::milliseconds timeout) {
  Project* p = find(project_id);
  if (p == nullptr) return false;
  std::unique_lock<std::mutex> lock(p->mutex);
  return p->settled.wait_for(lock, timeout, [p] { return !p->training; });
}

namespace {

void install_routes(httplib::Server& server, AnnotationService& service) {
  auto dispatch = [&service](const httplib::Request& req, httplib::Response& res) {
    ApiResponse r = service.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  server.Get(".*", dispatch);
  server.Post(".*", dispatch);
}

}  // namespace

bool AnnotationService::listen(const std::string& host, int port) {
  if (!http_) http_ = std::make_unique<Http>();
  install_routes(http_->server, *this);
  return http_->server.listen(host, port);
}

int AnnotationService::listen_in_background(const std::string& host) {
  if (!http_) http_ = std::make_unique<Http>();
  install_routes(http_->server, *this);
  const int port = http_->server.bind_to_any_port(host);
  if (port <= 0) throw IoError("cannot bind an HTTP port on " + host);
  http_->thread = std::thread([this] { http_->server.listen_after_bind(); });
  http_->server.wait_until_ready();
  return port;
}

void AnnotationService::stop() {
  if (!http_) return;
  http_->server.stop();
  if (http_->thread.joinable()) http_->thread.join();
}

}  // namespace avex

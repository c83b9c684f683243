#include <doctest.h>

#include <chrono>
#include <filesystem>

#include "avex/corpus.hpp"
#include "avex/service.hpp"
#include "support/toy.hpp"

// After Eigen: <resolv.h> defines a _res macro that collides with Eigen internals.
#include <httplib.h>

using namespace avex;
using namespace std::chrono_literals;
namespace fs = std::filesystem;

namespace {

nlohmann::json corpus_json(int n, std::uint64_t seed) {
  SynthSpec spec = load_synth_spec(fs::path(AVEX_DATA_DIR) / "synth_dogfood_flat.json");
  spec.samples = n;
  spec.test_samples = 0;
  nlohmann::json out = nlohmann::json::array();
  for (const auto& p : generate_synthetic(spec, seed)) out.push_back(to_json(p));
  return out;
}

nlohmann::json project_body(const std::string& variant = "opentag") {
  ModelConfig mc = avex::testing::tiny_config(parse_variant(variant));
  mc.dropout = 0.4;
  mc.batch_size = 8;
  ALConfig al;
  al.initial_labeled = 6;
  al.batch_size = 3;
  al.rounds = 2;
  al.committee_epochs = 2;
  al.seed = 1;
  return {{"corpus", corpus_json(24, 1)}, {"eval_corpus", corpus_json(6, 2)},
          {"model_config", to_json(mc)},  {"al_config", to_json(al)}};
}

fs::path fresh_store(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

struct Api {
  AnnotationService& svc;
  ApiResponse get(const std::string& path) { return svc.handle("GET", path, ""); }
  ApiResponse post(const std::string& path, const nlohmann::json& body) { return svc.handle("POST", path, body.dump()); }
};

std::string status_of(Api& api, const std::string& id) { return api.get("/projects/" + id).body.at("status"); }

// Gold symbols for a queried sample, taken from its own annotations.
std::vector<std::string> gold_symbols(const nlohmann::json& corpus, const std::string& id) {
  TagScheme scheme(SchemeKind::kBIOE, {"flavor"});
  for (const auto& j : corpus) {
    if (j.at("id") != id) continue;
    const EncodedSample s = encode_sample(to_labeled(profile_from_json(j)), scheme);
    std::vector<std::string> out;
    for (int t : s.tags) out.push_back(scheme.name(t));
    return out;
  }
  throw std::runtime_error("unknown id " + id);
}

}  // namespace

TEST_CASE("project lifecycle, validation and crash recovery") {
  const fs::path store = fresh_store("avex_service_store");
  const nlohmann::json body = project_body();
  std::string pid;
  std::vector<std::string> queried;
  {
    AnnotationService svc(store);
    Api api{svc};
    ApiResponse created = api.post("/projects", body);
    REQUIRE(created.status == 201);
    CHECK(created.body.at("version") == kApiVersion);
    pid = created.body.at("project_id");
    CHECK(status_of(api, pid) == "IDLE");

    ApiResponse early = api.get("/projects/" + pid + "/queries");
    CHECK(early.status == 409);
    CHECK(early.body.at("status") == "IDLE");

    CHECK(api.post("/projects/" + pid + "/rounds", nlohmann::json::object()).status == 202);
    REQUIRE(svc.wait_until_settled(pid, 60s));
    CHECK(status_of(api, pid) == "AWAITING_LABELS");
    CHECK(api.post("/projects/" + pid + "/rounds", nlohmann::json::object()).status == 409);

    ApiResponse q = api.get("/projects/" + pid + "/queries");
    REQUIRE(q.status == 200);
    REQUIRE(q.body.at("queries").size() == 3);
    for (const auto& item : q.body.at("queries")) {
      queried.push_back(item.at("sample_id"));
      const auto n = item.at("tokens").size();
      CHECK(item.at("prior_prediction_tags").size() == n);
      CHECK(item.at("attention_matrix").size() == n);
      CHECK(item.at("attention_matrix").at(0).size() == n);
      CHECK(item.contains("strategy_score"));
      CHECK(item.at("annotated") == false);
    }

    const std::string first = queried[0];
    auto symbols = gold_symbols(body.at("corpus"), first);
    auto bad = symbols;
    bad[1] = "Q";
    ApiResponse r422 = api.post("/projects/" + pid + "/annotations", {{"sample_id", first}, {"tags", bad}});
    CHECK(r422.status == 422);
    CHECK(r422.body.at("position") == 1);
    CHECK(r422.body.at("tag") == "Q");
    auto short_tags = symbols;
    short_tags.pop_back();
    CHECK(api.post("/projects/" + pid + "/annotations", {{"sample_id", first}, {"tags", short_tags}}).status == 422);
    CHECK(api.post("/projects/" + pid + "/annotations", {{"sample_id", "nope"}, {"tags", symbols}}).status == 409);

    for (int i = 0; i < 2; ++i) {
      ApiResponse ok = api.post("/projects/" + pid + "/annotations",
                                {{"sample_id", queried[i]}, {"tags", gold_symbols(body.at("corpus"), queried[i])}});
      CHECK(ok.status == 200);
      CHECK(ok.body.at("status") == "AWAITING_LABELS");
    }
    CHECK(api.post("/projects/" + pid + "/annotations", {{"sample_id", first}, {"tags", symbols}}).status == 409);
  }

  SUBCASE("restart resumes with the partial batch intact") {
    AnnotationService svc(store);
    Api api{svc};
    CHECK(status_of(api, pid) == "AWAITING_LABELS");
    ApiResponse q = api.get("/projects/" + pid + "/queries");
    REQUIRE(q.status == 200);
    std::vector<std::string> again;
    int annotated = 0;
    for (const auto& item : q.body.at("queries")) {
      again.push_back(item.at("sample_id"));
      annotated += item.at("annotated").get<bool>();
    }
    CHECK(again == queried);
    CHECK(annotated == 2);

    ApiResponse last = api.post("/projects/" + pid + "/annotations",
                                {{"sample_id", queried[2]}, {"tags", gold_symbols(body.at("corpus"), queried[2])}});
    CHECK(last.status == 200);
    CHECK(last.body.at("status") == "TRAINING");
    REQUIRE(svc.wait_until_settled(pid, 60s));
    CHECK(status_of(api, pid) == "AWAITING_LABELS");

    ApiResponse labels = api.get("/projects/" + pid + "/labels");
    REQUIRE(labels.status == 200);
    CHECK(labels.body.at("labels").size() == 9);
    CHECK(labels.body.at("labels").at(queried[0]).get<std::vector<std::string>>() ==
          gold_symbols(body.at("corpus"), queried[0]));

    ApiResponse q2 = api.get("/projects/" + pid + "/queries");
    for (const auto& item : q2.body.at("queries")) {
      const std::string id = item.at("sample_id");
      CHECK(api.post("/projects/" + pid + "/annotations", {{"sample_id", id}, {"tags", gold_symbols(body.at("corpus"), id)}})
                .status == 200);
    }
    CHECK(status_of(api, pid) == "DONE");
    ApiResponse m = api.get("/projects/" + pid + "/metrics");
    REQUIRE(m.status == 200);
    CHECK(m.body.at("version") == kApiVersion);
    CHECK(m.body.at("rounds").size() == 2);
    CHECK(m.body.at("labeled") == 12);
    CHECK(m.body.at("rounds").at(0).at("queried_ids").get<std::vector<std::string>>() == queried);
    CHECK(m.body.at("rounds").at(0).at("post_round_metrics").at("labeled") == 6);

    ApiResponse att = api.get("/projects/" + pid + "/attention/" + queried[0]);
    REQUIRE(att.status == 200);
    CHECK(att.body.at("matrix").size() == att.body.at("tokens").size());
    CHECK(api.get("/projects/" + pid + "/attention/missing").status == 404);
  }
  fs::remove_all(store);
}

TEST_CASE("restart during training finishes the interrupted round") {
  const fs::path store = fresh_store("avex_service_crash");
  const fs::path snapshot = fresh_store("avex_service_crash_copy");
  ServiceOptions opts;
  opts.on_training_start = [&](const std::string&, int round) {
    if (round == 1) fs::copy(store, snapshot, fs::copy_options::recursive);
  };
  std::string pid;
  {
    AnnotationService svc(store, opts);
    Api api{svc};
    pid = api.post("/projects", project_body()).body.at("project_id");
    CHECK(api.post("/projects/" + pid + "/rounds", nlohmann::json::object()).status == 202);
    REQUIRE(svc.wait_until_settled(pid, 60s));
  }
  AnnotationService revived(snapshot);
  Api api{revived};
  REQUIRE(revived.wait_until_settled(pid, 60s));
  CHECK(status_of(api, pid) == "AWAITING_LABELS");
  CHECK(api.get("/projects/" + pid + "/queries").body.at("queries").size() == 3);

  AnnotationService original(store);
  Api orig{original};
  CHECK(orig.get("/projects/" + pid + "/queries").body.at("queries") ==
        api.get("/projects/" + pid + "/queries").body.at("queries"));
  fs::remove_all(store);
  fs::remove_all(snapshot);
}

TEST_CASE("request errors") {
  const fs::path store = fresh_store("avex_service_errors");
  AnnotationService svc(store);
  Api api{svc};
  CHECK(api.get("/projects/p9999").status == 404);
  CHECK(api.get("/projects/p9999/metrics").status == 404);
  CHECK(api.get("/nowhere").status == 404);
  CHECK(svc.handle("POST", "/projects", "{not json").status == 400);
  CHECK(api.post("/projects", {{"model_config", {}}}).status == 400);
  nlohmann::json bad_cfg = project_body();
  bad_cfg["model_config"]["dropout"] = 2.0;
  CHECK(api.post("/projects", bad_cfg).status == 400);
  nlohmann::json extra = project_body("bilstm-crf");
  extra["ignored_field"] = 1;
  ApiResponse created = api.post("/projects", extra);
  REQUIRE(created.status == 201);
  const std::string pid = created.body.at("project_id");
  CHECK(api.get("/projects/" + pid + "/attention/syn-00001").status == 400);
  fs::remove_all(store);
}

TEST_CASE("HTTP transport") {
  const fs::path store = fresh_store("avex_service_http");
  AnnotationService svc(store);
  const int port = svc.listen_in_background("127.0.0.1");
  REQUIRE(port > 0);
  httplib::Client client("127.0.0.1", port);
  auto created = client.Post("/projects", project_body().dump(), "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const auto pid = nlohmann::json::parse(created->body).at("project_id").get<std::string>();
  auto got = client.Get("/projects/" + pid);
  REQUIRE(got);
  CHECK(got->status == 200);
  const auto j = nlohmann::json::parse(got->body);
  CHECK(j.at("version") == kApiVersion);
  CHECK(j.at("status") == "IDLE");
  auto missing = client.Get("/projects/p0404/queries");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(nlohmann::json::parse(missing->body).contains("error"));
  svc.stop();
  fs::remove_all(store);
}

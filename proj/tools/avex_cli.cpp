#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "avex/active.hpp"
#include "avex/corpus.hpp"
#include "avex/errors.hpp"
#include "avex/model.hpp"
#include "avex/runtime.hpp"
#include "avex/service.hpp"
#include "avex/trainer.hpp"

namespace fs = std::filesystem;
using namespace avex;

namespace {

struct DataOptions {
  std::string corpus;
  std::string eval_corpus;
  std::string split = "auto";
  double ratio = 0.5;
  std::uint64_t split_seed = 0;
};

void add_data_options(CLI::App* cmd, DataOptions& d, bool corpus_required) {
  auto* c = cmd->add_option("--corpus", d.corpus, "Line-delimited corpus file");
  if (corpus_required) c->required();
  c->check(CLI::ExistingFile);
  cmd->add_option("--eval-corpus", d.eval_corpus, "Separate evaluation corpus")->check(CLI::ExistingFile);
  cmd->add_option("--split", d.split, "auto | given | random | disjoint | all")
      ->check(CLI::IsMember({"auto", "given", "random", "disjoint", "all"}));
  cmd->add_option("--ratio", d.ratio, "Train fraction for random and disjoint splits");
  cmd->add_option("--split-seed", d.split_seed, "Seed of the random or disjoint split");
}

struct Partition {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
  std::string kind;
};

/// Splits the corpus per the data options. "auto" uses generator side hints
/// when every record has one and a seeded random split otherwise.
Partition partition(const DataOptions& d, const std::vector<std::string>& attributes) {
  const std::vector<ProductProfile> corpus = load_corpus(d.corpus);
  const std::vector<LabeledSample> samples = to_labeled(corpus);
  Partition out;
  if (!d.eval_corpus.empty() || d.split == "all") {
    out.train = samples;
    out.test = d.eval_corpus.empty() ? samples : to_labeled(load_corpus(d.eval_corpus));
    out.kind = d.eval_corpus.empty() ? "all" : "eval-corpus";
    return out;
  }
  std::string kind = d.split;
  if (kind == "auto") {
    const bool hinted = !corpus.empty() && std::all_of(corpus.begin(), corpus.end(), [](const ProductProfile& p) {
      return p.side == "train" || p.side == "test";
    });
    kind = hinted ? "given" : "random";
  }
  const DatasetSplit sp = kind == "given" ? split_from_hints(corpus)
                                          : split(samples, parse_split_kind(kind), d.ratio, d.split_seed, attributes);
  const std::set<std::string> train_ids(sp.train_ids.begin(), sp.train_ids.end());
  for (const auto& s : samples) (train_ids.count(s.id) ? out.train : out.test).push_back(s);
  out.kind = kind;
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct ModelOptions {
  std::string config;
  std::string variant;
  std::string scheme;
  std::string attributes;
  int epochs = -1;
  long long seed = -1;
};

void add_model_options(CLI::App* cmd, ModelOptions& m) {
  cmd->add_option("--config", m.config, "Model configuration JSON")->check(CLI::ExistingFile);
  cmd->add_option("--variant", m.variant, "bilstm | bilstm-crf | opentag")
      ->check(CLI::IsMember({"bilstm", "bilstm-crf", "opentag"}));
  cmd->add_option("--scheme", m.scheme, "BIOE | UBIOE | IOB");
  cmd->add_option("--attributes", m.attributes, "Comma-separated attribute names");
  cmd->add_option("--epochs", m.epochs, "Override the configured epoch count");
  cmd->add_option("--seed", m.seed, "Override the configured seed");
}

ModelConfig model_config(const ModelOptions& m) {
  ModelConfig c = m.config.empty() ? ModelConfig{} : load_model_config(m.config);
  if (!m.variant.empty()) c.variant = parse_variant(m.variant);
  if (!m.scheme.empty()) c.scheme = parse_scheme_kind(m.scheme);
  if (!m.attributes.empty()) c.attributes = split_list(m.attributes);
  if (m.epochs >= 0) {
    c.epochs = m.epochs;
    c.last_k_average = std::max(1, std::min(c.last_k_average, m.epochs));
  }
  if (m.seed >= 0) c.seed = static_cast<std::uint64_t>(m.seed);
  c.validate();
  return c;
}

void print_report(const EvaluationReport& r) {
  std::printf("%-16s %9s %9s %9s %6s %6s %6s\n", "attribute", "precision", "recall", "f1", "tp", "pred", "gold");
  auto row = [](const std::string& name, const PRF& m) {
    std::printf("%-16s %9.4f %9.4f %9.4f %6ld %6ld %6ld\n", name.c_str(), m.precision, m.recall, m.f1,
                m.true_positives, m.predicted, m.gold);
  };
  for (const auto& [attr, m] : r.per_attribute) row(attr, m);
  row("micro", r.micro);
}

nlohmann::json prf_json(const PRF& m) {
  return {{"P", m.precision}, {"R", m.recall}, {"F", m.f1}, {"tp", m.true_positives}, {"predicted", m.predicted},
          {"gold", m.gold}};
}

int cmd_train(const DataOptions& d, const ModelOptions& m, const std::string& out, std::string metrics_path) {
  const ModelConfig config = model_config(m);
  const Partition part = partition(d, config.attributes);
  const TagScheme scheme = config.make_scheme();
  const auto train_set = encode_samples(part.train, scheme);
  const auto eval_set = encode_samples(part.test, scheme);
  TrainResult r = train(train_set, eval_set, config);
  save_model(out, r.model);
  if (metrics_path.empty()) metrics_path = out + ".metrics.jsonl";
  write_history(metrics_path, r.history);
  const auto avg = r.history.last_k_average();
  std::printf("split %s: %zu train / %zu eval samples\n", part.kind.c_str(), train_set.size(), eval_set.size());
  std::printf("last-%d average over %d evaluated epochs: P %.4f R %.4f F %.4f\n", r.history.last_k, avg.epochs,
              avg.precision, avg.recall, avg.f1);
  return 0;
}

int cmd_evaluate(const DataOptions& d, const std::string& ckpt, const std::string& history_path,
                 const std::string& out) {
  const Model model = load_model(ckpt);
  const Partition part = partition(d, model.config().attributes);
  const auto eval_set = encode_samples(part.test, model.scheme());
  const EvalResult r = evaluate_model(model, eval_set);
  std::printf("split %s: %zu evaluated samples\n", part.kind.c_str(), eval_set.size());
  print_report(r.report);
  nlohmann::json report = {{"version", 1}, {"split", part.kind}, {"samples", eval_set.size()},
                           {"micro", prf_json(r.report.micro)}};
  for (const auto& [attr, prf] : r.report.per_attribute) report["per_attribute"][attr] = prf_json(prf);
  if (!history_path.empty()) {
    MetricHistory h = read_history(history_path);
    h.last_k = model.config().last_k_average;
    const auto avg = h.last_k_average();
    std::printf("history last-%d average over %d evaluated epochs: P %.4f R %.4f F %.4f\n", h.last_k, avg.epochs,
                avg.precision, avg.recall, avg.f1);
    report["history_last_k"] = {{"k", h.last_k}, {"epochs", avg.epochs}, {"P", avg.precision}, {"R", avg.recall},
                                {"F", avg.f1}};
  }
  if (!out.empty()) {
    std::ofstream f(out, std::ios::trunc);
    f << report.dump(2) << '\n';
    if (!f) throw IoError("cannot write report '" + out + "'");
  }
  return 0;
}

int cmd_active_sim(const DataOptions& d, const ModelOptions& m, const std::string& al_path,
                   const std::string& strategy, int seeds, long long first_seed, const std::string& out_dir) {
  const ModelConfig config = model_config(m);
  ALConfig al;
  if (!al_path.empty()) {
    std::ifstream in(al_path);
    if (!in) throw IoError("cannot open '" + al_path + "'");
    al = al_config_from_json(nlohmann::json::parse(in));
  }
  if (!strategy.empty()) al.strategy = parse_strategy(strategy);
  al.validate();
  const Partition part = partition(d, config.attributes);
  const TagScheme scheme = config.make_scheme();
  const auto pool = encode_samples(part.train, scheme);
  const auto eval_set = encode_samples(part.test, scheme);
  std::vector<std::uint64_t> seed_list;
  const std::uint64_t base = first_seed >= 0 ? static_cast<std::uint64_t>(first_seed) : config.seed;
  for (int i = 0; i < seeds; ++i) seed_list.push_back(base + static_cast<std::uint64_t>(i));
  const SimulationResult r = simulate(pool, eval_set, config, al, seed_list);

  fs::create_directories(out_dir);
  write_curve(fs::path(out_dir) / "curve.jsonl", r.curve);
  nlohmann::json summary = {{"version", 1}, {"strategy", to_string(al.strategy)}, {"seeds", seed_list},
                            {"model_config", to_json(config)}, {"al_config", to_json(al)}};
  nlohmann::json mean = nlohmann::json::array();
  for (const auto& [labeled, f1] : mean_curve(r.curve)) {
    mean.push_back({{"labeled", labeled}, {"mean_F", f1}});
    std::printf("labeled %4d  mean F %.4f\n", labeled, f1);
  }
  summary["mean_curve"] = mean;
  std::ofstream f(fs::path(out_dir) / "summary.json", std::ios::trunc);
  f << summary.dump(2) << '\n';
  if (!f) throw IoError("cannot write summary in '" + out_dir + "'");
  return 0;
}

int cmd_attention(const std::string& ckpt, const std::string& text, const std::string& out_dir,
                  const std::string& name) {
  const Model model = load_model(ckpt);
  if (model.config().variant != Variant::kOpenTag) throw ConfigError("attention export needs an opentag checkpoint");
  const Prediction p = predict(model, text);
  if (!p.attention) throw ContractError("no attention for empty input");
  fs::create_directories(out_dir);
  export_heatmap(*p.attention, fs::path(out_dir) / name);
  for (const auto& [attr, values] : p.values) {
    for (const auto& v : values) std::printf("%s: %s\n", attr.c_str(), v.c_str());
  }
  return 0;
}

int cmd_synth(const std::string& spec_path, std::uint64_t seed, const std::string& out) {
  const SynthSpec spec = load_synth_spec(spec_path);
  const auto corpus = generate_synthetic(spec, seed);
  save_corpus(out, corpus);
  std::printf("wrote %zu records to %s\n", corpus.size(), out.c_str());
  return 0;
}

int cmd_serve(int port, const std::string& host, const std::string& store) {
  AnnotationService service(store);
  std::printf("serving on http://%s:%d (store %s)\n", host.c_str(), port, store.c_str());
  std::fflush(stdout);
  if (!service.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  avex::tune_allocator();
  CLI::App app{"Attribute value extraction toolkit"};
  app.require_subcommand(1);

  DataOptions data;
  ModelOptions model;
  std::string out, metrics, ckpt, history, text, name = "attention", spec, store = "avex-store", host = "127.0.0.1";
  std::string al_config, strategy;
  int seeds = 1, port = 8080;
  long long first_seed = -1;
  std::uint64_t synth_seed = 0;

  auto* train_cmd = app.add_subcommand("train", "Train a tagger and write a checkpoint plus metric history");
  add_data_options(train_cmd, data, true);
  add_model_options(train_cmd, model);
  train_cmd->add_option("--out", out, "Checkpoint path")->required();
  train_cmd->add_option("--metrics", metrics, "Metric history path (default <out>.metrics.jsonl)");

  auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  add_data_options(eval_cmd, data, true);
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--history", history, "Metric history to average")->check(CLI::ExistingFile);
  eval_cmd->add_option("--out", out, "JSON report path");

  auto* sim_cmd = app.add_subcommand("active-sim", "Simulated active learning");
  add_data_options(sim_cmd, data, true);
  add_model_options(sim_cmd, model);
  sim_cmd->add_option("--al-config", al_config, "Active learning configuration JSON")->check(CLI::ExistingFile);
  sim_cmd->add_option("--strategy", strategy, "TF | LC | random");
  sim_cmd->add_option("--seeds", seeds, "Number of seeds")->check(CLI::PositiveNumber);
  sim_cmd->add_option("--first-seed", first_seed, "First seed (default: the model seed)");
  sim_cmd->add_option("--out", out, "Output directory")->required();

  auto* att_cmd = app.add_subcommand("attention-export", "Export the attention heatmap of one text");
  att_cmd->add_option("--ckpt", ckpt, "opentag checkpoint")->required()->check(CLI::ExistingFile);
  att_cmd->add_option("--text", text, "Input text")->required();
  att_cmd->add_option("--out", out, "Output directory")->required();
  att_cmd->add_option("--name", name, "File stem");

  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic corpus");
  synth_cmd->add_option("--spec", spec, "Generator spec JSON")->required()->check(CLI::ExistingFile);
  synth_cmd->add_option("--seed", synth_seed, "Seed");
  synth_cmd->add_option("--out", out, "Corpus path")->required();

  auto* serve_cmd = app.add_subcommand("serve", "Run the annotation service");
  serve_cmd->add_option("--port", port, "Port");
  serve_cmd->add_option("--host", host, "Bind address");
  serve_cmd->add_option("--store", store, "Project store directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(data, model, out, metrics);
    if (*eval_cmd) return cmd_evaluate(data, ckpt, history, out);
    if (*sim_cmd) return cmd_active_sim(data, model, al_config, strategy, seeds, first_seed, out);
    if (*att_cmd) return cmd_attention(ckpt, text, out, name);
    if (*synth_cmd) return cmd_synth(spec, synth_seed, out);
    if (*serve_cmd) return cmd_serve(port, host, store);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}

#include "avex/attention.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "avex/errors.hpp"

namespace avex {

void init_attention(ParameterSet& params, const std::string& prefix, Index hidden_dim, Index attention_dim,
                    std::mt19937_64& rng) {
  if (hidden_dim <= 0 || attention_dim <= 0) throw ConfigError("attention dimensions must be positive");
  params.add(prefix + ".query", xavier_uniform(hidden_dim, attention_dim, rng));
  params.add(prefix + ".key", xavier_uniform(hidden_dim, attention_dim, rng));
  params.add(prefix + ".pair_bias", Matrix::Zero(1, attention_dim));
  params.add(prefix + ".score", xavier_uniform(attention_dim, 1, rng));
  params.add(prefix + ".score_bias", Matrix::Zero(1, 1));
}

AttentionWeights attention_weights(Graph<double>& graph, ParameterSet& params, const std::string& prefix) {
  return {graph.parameter(params.at(prefix + ".query")), graph.parameter(params.at(prefix + ".key")),
          graph.parameter(params.at(prefix + ".pair_bias")), graph.parameter(params.at(prefix + ".score")),
          graph.parameter(params.at(prefix + ".score_bias"))};
}

AttentionOutput attend(const AttentionWeights& w, Var<double> hidden, const Matrix& mask, SequenceLayout layout) {
  const Index dh = hidden.cols();
  const Index da = w.query.cols();
  if (layout.steps < 1) throw ContractError("attend: empty sequence");
  if (w.query.rows() != dh || w.key.rows() != dh || w.key.cols() != da || w.pair_bias.cols() != da ||
      w.pair_bias.rows() != 1 || w.score.rows() != da || w.score.cols() != 1 || w.score_bias.rows() != 1 ||
      w.score_bias.cols() != 1) {
    throw ContractError("attend: attention parameters do not conform to hidden width " + std::to_string(dh));
  }
  if (hidden.rows() != layout.rows() || mask.rows() != layout.rows()) {
    throw DimensionError("attend: hidden " + shape_string(hidden.value()) + " does not match layout");
  }

  AttentionOutput out;
  out.layout = layout;
  std::vector<Index> from_rows;
  std::vector<Index> to_rows;
  for (Index t = 0; t < layout.steps; ++t) {
    for (Index tp = 0; tp < layout.steps; ++tp) {
      for (Index b = 0; b < layout.batch; ++b) {
        const Index rt = layout.row(t, b);
        const Index rtp = layout.row(tp, b);
        if (mask(rt, 0) == 0.0 || mask(rtp, 0) == 0.0) continue;
        out.pairs.push_back({t, tp, b});
        from_rows.push_back(rt);
        to_rows.push_back(rtp);
      }
    }
  }
  if (out.pairs.empty()) throw ContractError("attend: no valid positions");

  Var<double> query = add(matmul(hidden, w.query), w.pair_bias);
  Var<double> key = matmul(hidden, w.key);
  Var<double> g = tanh(add(select_rows(query, from_rows), select_rows(key, to_rows)));
  out.pair_scores = sigmoid(add(matmul(g, w.score), w.score_bias));
  Var<double> weighted = mul(select_rows(hidden, to_rows), out.pair_scores);
  out.focused = segment_sum(weighted, std::move(from_rows), layout.rows());
  return out;
}

Matrix attention_matrix(const AttentionOutput& out, Index b) {
  Matrix a = Matrix::Zero(out.layout.steps, out.layout.steps);
  const Matrix& scores = out.pair_scores.value();
  for (std::size_t i = 0; i < out.pairs.size(); ++i) {
    const auto& p = out.pairs[i];
    if (p.b == b) a(p.t, p.t_prime) = scores(static_cast<Index>(i), 0);
  }
  return a;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::vector<std::string> parse_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(cur);
  return fields;
}

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void export_heatmap(const AttentionMatrix& attention, const std::filesystem::path& stem) {
  const Matrix& a = attention.weights;
  const Index n = static_cast<Index>(attention.tokens.size());
  if (a.rows() != a.cols() || a.rows() != n) {
    throw ContractError("export_heatmap: " + shape_string(a) + " matrix for " + std::to_string(n) + " tokens");
  }
  std::filesystem::path csv_path = stem;
  csv_path += ".csv";
  std::filesystem::path json_path = stem;
  json_path += ".json";

  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw IoError("cannot write heatmap '" + csv_path.string() + "'");
  for (const auto& tok : attention.tokens) csv << ',' << csv_field(tok);
  csv << '\n';
  for (Index r = 0; r < n; ++r) {
    csv << csv_field(attention.tokens[static_cast<std::size_t>(r)]);
    for (Index c = 0; c < n; ++c) csv << ',' << format_value(a(r, c));
    csv << '\n';
  }
  if (!csv) throw IoError("failed writing heatmap '" + csv_path.string() + "'");

  nlohmann::json j;
  j["version"] = 1;
  j["tokens"] = attention.tokens;
  nlohmann::json rows = nlohmann::json::array();
  for (Index r = 0; r < n; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Index c = 0; c < n; ++c) row.push_back(a(r, c));
    rows.push_back(std::move(row));
  }
  j["matrix"] = std::move(rows);
  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw IoError("cannot write heatmap '" + json_path.string() + "'");
  js << j.dump() << '\n';
  if (!js) throw IoError("failed writing heatmap '" + json_path.string() + "'");
}

AttentionMatrix read_heatmap_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open heatmap '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw IngestionError(path.string() + ": empty heatmap");
  std::vector<std::string> header = parse_csv_line(line);
  AttentionMatrix out;
  out.tokens.assign(header.begin() + 1, header.end());
  const Index n = static_cast<Index>(out.tokens.size());
  out.weights = Matrix::Zero(n, n);
  for (Index r = 0; r < n; ++r) {
    if (!std::getline(in, line)) throw IngestionError(path.string() + ": missing row " + std::to_string(r + 1));
    std::vector<std::string> fields = parse_csv_line(line);
    if (static_cast<Index>(fields.size()) != n + 1) {
      throw IngestionError(path.string() + ":" + std::to_string(r + 2) + ": wrong field count");
    }
    for (Index c = 0; c < n; ++c) out.weights(r, c) = std::stod(fields[static_cast<std::size_t>(c + 1)]);
  }
  return out;
}

}  // namespace avex

#include "avex/recurrent.hpp"

#include <cmath>

#include "avex/errors.hpp"

namespace avex {

Matrix xavier_uniform(Index rows, Index cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

void init_lstm(ParameterSet& params, const std::string& prefix, Index input_dim, Index hidden,
               std::mt19937_64& rng) {
  if (input_dim <= 0 || hidden <= 0) throw ConfigError("LSTM dimensions must be positive");
  Matrix input(input_dim, 4 * hidden);
  Matrix recurrent(hidden, 4 * hidden);
  for (Index gate = 0; gate < 4; ++gate) {
    input.middleCols(gate * hidden, hidden) = xavier_uniform(input_dim, hidden, rng);
    recurrent.middleCols(gate * hidden, hidden) = xavier_uniform(hidden, hidden, rng);
  }
  Matrix bias = Matrix::Zero(1, 4 * hidden);
  bias.middleCols(hidden, hidden).setOnes();
  params.add(prefix + ".input", std::move(input));
  params.add(prefix + ".recurrent", std::move(recurrent));
  params.add(prefix + ".bias", std::move(bias));
}

LstmWeights lstm_weights(Graph<double>& graph, ParameterSet& params, const std::string& prefix) {
  return {graph.parameter(params.at(prefix + ".input")), graph.parameter(params.at(prefix + ".recurrent")),
          graph.parameter(params.at(prefix + ".bias"))};
}

Var<double> lstm_forward(const LstmWeights& w, Var<double> inputs, const Matrix& mask,
                         SequenceLayout layout) {
  const Index H = w.hidden();
  if (layout.steps < 1 || layout.batch < 1) throw ContractError("lstm_forward: empty sequence");
  if (inputs.cols() != w.input_dim()) {
    throw ContractError("lstm_forward: input width " + std::to_string(inputs.cols()) +
                        " does not match parameter input dim " + std::to_string(w.input_dim()));
  }
  if (inputs.rows() != layout.rows() || mask.rows() != layout.rows() || mask.cols() != 1) {
    throw DimensionError("lstm_forward: inputs " + shape_string(inputs.value()) + " / mask " +
                         shape_string(mask) + " do not match layout");
  }
  if (w.recurrent.cols() != 4 * H || w.input.cols() != 4 * H || w.bias.cols() != 4 * H) {
    throw ContractError("lstm_forward: gate blocks must be 4 * hidden wide");
  }

  Graph<double>& g = *inputs.graph;
  const Index B = layout.batch;
  Var<double> projected = add(matmul(inputs, w.input), w.bias);
  Var<double> h = g.constant(Matrix::Zero(B, H));
  Var<double> c = g.constant(Matrix::Zero(B, H));
  std::vector<Var<double>> outputs;
  outputs.reserve(static_cast<std::size_t>(layout.steps));

  for (Index t = 0; t < layout.steps; ++t) {
    Var<double> z = add(slice_rows(projected, t * B, B), matmul(h, w.recurrent));
    Var<double> in_gate = sigmoid(slice_cols(z, 0, H));
    Var<double> forget_gate = sigmoid(slice_cols(z, H, H));
    Var<double> cell_gate = tanh(slice_cols(z, 2 * H, H));
    Var<double> out_gate = sigmoid(slice_cols(z, 3 * H, H));
    Var<double> c_next = add(mul(forget_gate, c), mul(in_gate, cell_gate));
    Var<double> h_next = mul(out_gate, tanh(c_next));

    Matrix m = mask.middleRows(t * B, B);
    const double valid = m.sum();
    if (valid == static_cast<double>(B)) {
      c = c_next;
      h = h_next;
    } else if (valid > 0) {
      Var<double> keep = g.constant(m);
      c = add(c, mul(sub(c_next, c), keep));
      h = add(h, mul(sub(h_next, h), keep));
    }
    outputs.push_back(h);
  }
  return stack_rows(outputs);
}

std::vector<Index> prefix_lengths(const Matrix& mask, SequenceLayout layout) {
  if (mask.rows() != layout.rows() || mask.cols() != 1) throw DimensionError("mask does not match layout");
  std::vector<Index> lengths(static_cast<std::size_t>(layout.batch), 0);
  for (Index b = 0; b < layout.batch; ++b) {
    bool ended = false;
    for (Index t = 0; t < layout.steps; ++t) {
      const bool valid = mask(layout.row(t, b), 0) != 0.0;
      if (valid && ended) throw ContractError("mask must mark a valid prefix of each sequence");
      if (valid) {
        ++lengths[static_cast<std::size_t>(b)];
      } else {
        ended = true;
      }
    }
  }
  return lengths;
}

std::vector<Index> reverse_valid_rows(const std::vector<Index>& lengths, SequenceLayout layout) {
  std::vector<Index> perm(static_cast<std::size_t>(layout.rows()));
  for (Index b = 0; b < layout.batch; ++b) {
    const Index len = lengths[static_cast<std::size_t>(b)];
    for (Index t = 0; t < layout.steps; ++t) {
      const Index src = t < len ? len - 1 - t : t;
      perm[static_cast<std::size_t>(layout.row(t, b))] = layout.row(src, b);
    }
  }
  return perm;
}

Var<double> bilstm_encode(const LstmWeights& forward, const LstmWeights& backward, Var<double> inputs,
                          const Matrix& mask, SequenceLayout layout, bool apply_sigmoid) {
  if (forward.hidden() != backward.hidden()) {
    throw ContractError("bilstm_encode: forward and backward hidden sizes differ");
  }
  const std::vector<Index> lengths = prefix_lengths(mask, layout);
  const std::vector<Index> reversal = reverse_valid_rows(lengths, layout);

  Var<double> fwd = lstm_forward(forward, inputs, mask, layout);
  Var<double> bwd_rev = lstm_forward(backward, select_rows(inputs, reversal), mask, layout);
  Var<double> bwd = select_rows(bwd_rev, reversal);
  Var<double> out = concat(fwd, bwd);
  if (apply_sigmoid) out = sigmoid(out);
  if (mask.minCoeff() == 0.0) out = mul(out, inputs.graph->constant(mask));
  return out;
}

}  // namespace avex

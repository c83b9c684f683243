#pragma once

#include <random>
#include <string>
#include <vector>

#include "avex/autodiff.hpp"
#include "avex/parameters.hpp"

namespace avex {

/// Batched sequences are laid out time-major: row t * batch + b holds step t
/// of sequence b. The mask is a (steps * batch) x 1 column of 0/1 flags.
struct SequenceLayout {
  Index steps = 0;
  Index batch = 1;

  Index rows() const { return steps * batch; }
  Index row(Index t, Index b) const { return t * batch + b; }
};

/// LSTM weights for one direction. Gate columns are ordered
/// [input | forget | cell | output], each `hidden` wide.
struct LstmWeights {
  Var<double> input;      // d x 4H
  Var<double> recurrent;  // H x 4H
  Var<double> bias;       // 1 x 4H

  Index hidden() const { return recurrent.rows(); }
  Index input_dim() const { return input.rows(); }
};

/// Registers `<prefix>.input`, `<prefix>.recurrent` and `<prefix>.bias` with
/// Xavier-uniform weights, zero biases and a forget-gate bias of 1.
void init_lstm(ParameterSet& params, const std::string& prefix, Index input_dim, Index hidden,
               std::mt19937_64& rng);

LstmWeights lstm_weights(Graph<double>& graph, ParameterSet& params, const std::string& prefix);

/// Xavier-uniform rows x cols matrix.
Matrix xavier_uniform(Index rows, Index cols, std::mt19937_64& rng);

/// Standard LSTM recurrence from zero initial state:
///   i, f, o = sigmoid(.), g = tanh(.), c' = f*c + i*g, h' = o*tanh(c').
/// A masked step carries the previous hidden and cell state forward.
/// Returns the (steps * batch) x H hidden states.
Var<double> lstm_forward(const LstmWeights& w, Var<double> inputs, const Matrix& mask,
                         SequenceLayout layout);

/// Per-sequence valid lengths from a prefix mask; throws if the mask is not a
/// valid-prefix mask.
std::vector<Index> prefix_lengths(const Matrix& mask, SequenceLayout layout);

/// Row permutation that reverses each sequence's valid prefix and leaves
/// padding in place. It is its own inverse.
std::vector<Index> reverse_valid_rows(const std::vector<Index>& lengths, SequenceLayout layout);

/// [forward h_t, backward h_t] per position, with the backward direction run
/// over each reversed valid prefix. With `apply_sigmoid` the concatenation is
/// squashed elementwise. Padded positions are zero.
Var<double> bilstm_encode(const LstmWeights& forward, const LstmWeights& backward, Var<double> inputs,
                          const Matrix& mask, SequenceLayout layout, bool apply_sigmoid);

}  // namespace avex

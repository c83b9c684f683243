#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "avex/autodiff.hpp"
#include "avex/parameters.hpp"
#include "avex/recurrent.hpp"

namespace avex {

struct AttentionWeights {
  Var<double> query;       // W_g:  d_h x d_a, applied to h_t
  Var<double> key;         // W_g': d_h x d_a, applied to h_t'
  Var<double> pair_bias;   // b_g:  1 x d_a
  Var<double> score;       // W_a:  d_a x 1
  Var<double> score_bias;  // b_a:  1 x 1
};

void init_attention(ParameterSet& params, const std::string& prefix, Index hidden_dim, Index attention_dim,
                    std::mt19937_64& rng);

AttentionWeights attention_weights(Graph<double>& graph, ParameterSet& params, const std::string& prefix);

/// Pairwise self-attention over a batch of hidden states.
///
///   g(t,t')     = tanh(W_g h_t + W_g' h_t' + b_g)
///   alpha(t,t') = sigmoid(W_a g(t,t') + b_a)
///   l_t         = sum over valid t' of alpha(t,t') h_t'
///
/// Scores are computed only for pairs where both positions are valid; every
/// other entry of the attention matrix is zero. Weights are not normalized.
struct AttentionOutput {
  Var<double> focused;      // (steps * batch) x d_h, the l_t rows
  Var<double> pair_scores;  // one alpha per entry of `pairs`
  struct Pair {
    Index t;
    Index t_prime;
    Index b;
  };
  std::vector<Pair> pairs;
  SequenceLayout layout;
};

AttentionOutput attend(const AttentionWeights& w, Var<double> hidden, const Matrix& mask, SequenceLayout layout);

/// steps x steps matrix of alpha for sequence `b`, zero at padded entries.
Matrix attention_matrix(const AttentionOutput& out, Index b);

struct AttentionMatrix {
  Matrix weights;
  std::vector<std::string> tokens;
};

/// Writes `<stem>.csv` (header row and column of tokens, one alpha per cell,
/// 17 significant digits) and the JSON twin `<stem>.json`
/// {"version", "tokens", "matrix"}.
void export_heatmap(const AttentionMatrix& attention, const std::filesystem::path& stem);

/// Reads the CSV written by export_heatmap.
AttentionMatrix read_heatmap_csv(const std::filesystem::path& path);

}  // namespace avex

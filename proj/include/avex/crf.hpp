#pragma once

// Linear-chain CRF over K tags with virtual START (index K) and STOP (index
// K + 1) states. The transition matrix is (K + 2) x (K + 2) with
// T(i, j) = score of moving from tag i to tag j. Entries into START and out
// of STOP are never read, so they are treated as -inf regardless of their
// stored value. Other entries may be -inf to forbid a transition.
//
// A sequence of length n scores
//   T(START, y_1) + sum_t e_t(y_t) + sum_{t>1} T(y_{t-1}, y_t) + T(y_n, STOP)
// and the model distribution is exp(score - logZ).

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "avex/autodiff.hpp"

namespace avex::crf {

using TagSequence = std::vector<int>;

inline Index start_state(Index num_tags) { return num_tags; }
inline Index stop_state(Index num_tags) { return num_tags + 1; }

/// Number of leading valid positions of a 0/1 mask; throws unless the mask
/// is a valid prefix.
inline Index masked_length(std::span<const int> mask) {
  Index n = 0;
  bool ended = false;
  for (int m : mask) {
    if (m && ended) throw ContractError("crf: mask must mark a valid prefix");
    if (m) {
      ++n;
    } else {
      ended = true;
    }
  }
  return n;
}

namespace detail {

template <typename Scalar>
Scalar log_sum_exp(const Eigen::Ref<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>& v) {
  const Scalar mx = v.maxCoeff();
  if (mx == -std::numeric_limits<Scalar>::infinity()) return mx;
  return mx + std::log((v - mx).exp().sum());
}

template <typename Scalar>
void check_shapes(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions, Index length) {
  const Index K = emissions.cols();
  if (K < 1) throw DimensionError("crf: at least one tag is required");
  if (transitions.rows() != K + 2 || transitions.cols() != K + 2) {
    throw DimensionError("crf: transitions " + shape_string(transitions) + " for " + std::to_string(K) + " tags");
  }
  if (length < 1 || length > emissions.rows()) {
    throw ContractError("crf: valid length " + std::to_string(length) + " for emissions " + shape_string(emissions));
  }
}

template <typename Scalar>
void check_tags(std::span<const int> tags, Index K, Index length) {
  if (static_cast<Index>(tags.size()) < length) throw ContractError("crf: fewer tags than valid positions");
  for (Index t = 0; t < length; ++t) {
    if (tags[static_cast<std::size_t>(t)] < 0 || tags[static_cast<std::size_t>(t)] >= K) {
      throw ContractError("crf: tag index " + std::to_string(tags[static_cast<std::size_t>(t)]) +
                          " out of range at position " + std::to_string(t));
    }
  }
}

}  // namespace detail

/// Unnormalized log-potential of one tag path over the first `length` rows.
template <typename Scalar>
Scalar score_sequence(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions,
                      std::span<const int> tags, Index length) {
  detail::check_shapes(transitions, emissions, length);
  const Index K = emissions.cols();
  detail::check_tags<Scalar>(tags, K, length);
  Scalar s = transitions(start_state(K), tags[0]);
  for (Index t = 0; t < length; ++t) {
    const int y = tags[static_cast<std::size_t>(t)];
    s += emissions(t, y);
    if (t > 0) s += transitions(tags[static_cast<std::size_t>(t - 1)], y);
  }
  s += transitions(tags[static_cast<std::size_t>(length - 1)], stop_state(K));
  return s;
}

template <typename Scalar>
Scalar score_sequence(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions,
                      std::span<const int> tags) {
  return score_sequence(transitions, emissions, tags, emissions.rows());
}

/// Forward log-messages: alpha(t, k) = log of the summed potential of all
/// prefixes ending in tag k at position t (START transition included).
template <typename Scalar>
RowMatrix<Scalar> forward_messages(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions,
                                   Index length) {
  detail::check_shapes(transitions, emissions, length);
  const Index K = emissions.cols();
  RowMatrix<Scalar> alpha(length, K);
  for (Index k = 0; k < K; ++k) alpha(0, k) = transitions(start_state(K), k) + emissions(0, k);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> buf(K);
  for (Index t = 1; t < length; ++t) {
    for (Index k = 0; k < K; ++k) {
      for (Index j = 0; j < K; ++j) buf(j) = alpha(t - 1, j) + transitions(j, k);
      alpha(t, k) = detail::log_sum_exp<Scalar>(buf) + emissions(t, k);
    }
  }
  return alpha;
}

/// Backward log-messages: beta(t, k) = log of the summed potential of all
/// suffixes after position t given tag k at t (STOP transition included).
template <typename Scalar>
RowMatrix<Scalar> backward_messages(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions,
                                    Index length) {
  detail::check_shapes(transitions, emissions, length);
  const Index K = emissions.cols();
  RowMatrix<Scalar> beta(length, K);
  for (Index k = 0; k < K; ++k) beta(length - 1, k) = transitions(k, stop_state(K));
  Eigen::Array<Scalar, Eigen::Dynamic, 1> buf(K);
  for (Index t = length - 2; t >= 0; --t) {
    for (Index k = 0; k < K; ++k) {
      for (Index j = 0; j < K; ++j) buf(j) = transitions(k, j) + emissions(t + 1, j) + beta(t + 1, j);
      beta(t, k) = detail::log_sum_exp<Scalar>(buf);
    }
  }
  return beta;
}

/// log Z over all K^length paths, by the forward recurrence in O(length K^2).
template <typename Scalar>
Scalar log_partition(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions, Index length) {
  RowMatrix<Scalar> alpha = forward_messages(transitions, emissions, length);
  const Index K = emissions.cols();
  Eigen::Array<Scalar, Eigen::Dynamic, 1> last(K);
  for (Index k = 0; k < K; ++k) last(k) = alpha(length - 1, k) + transitions(k, stop_state(K));
  return detail::log_sum_exp<Scalar>(last);
}

template <typename Scalar>
Scalar log_partition(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions) {
  return log_partition(transitions, emissions, emissions.rows());
}

/// Negative log-likelihood log Z - score(tags).
template <typename Scalar>
Scalar nll(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions, std::span<const int> tags,
           Index length) {
  return log_partition(transitions, emissions, length) - score_sequence(transitions, emissions, tags, length);
}

template <typename Scalar>
Scalar nll(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions, std::span<const int> tags) {
  return nll(transitions, emissions, tags, emissions.rows());
}

/// exp(score - log Z), clamped to [0, 1] against rounding.
template <typename Scalar>
Scalar sequence_probability(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions,
                            std::span<const int> tags, Index length) {
  Scalar p = std::exp(-nll(transitions, emissions, tags, length));
  if (p > Scalar(1)) p = Scalar(1);
  if (p < Scalar(0)) p = Scalar(0);
  return p;
}

template <typename Scalar>
Scalar sequence_probability(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions,
                            std::span<const int> tags) {
  return sequence_probability(transitions, emissions, tags, emissions.rows());
}

/// Posterior marginals from forward-backward.
template <typename Scalar>
struct Marginals {
  Scalar log_z;
  RowMatrix<Scalar> unary;        // length x K, P(y_t = k)
  RowMatrix<Scalar> transitions;  // (K+2) x (K+2), expected transition counts incl. START/STOP
};

template <typename Scalar>
Marginals<Scalar> marginals(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions, Index length) {
  const Index K = emissions.cols();
  RowMatrix<Scalar> alpha = forward_messages(transitions, emissions, length);
  RowMatrix<Scalar> beta = backward_messages(transitions, emissions, length);
  Eigen::Array<Scalar, Eigen::Dynamic, 1> last(K);
  for (Index k = 0; k < K; ++k) last(k) = alpha(length - 1, k) + transitions(k, stop_state(K));
  Marginals<Scalar> m;
  m.log_z = detail::log_sum_exp<Scalar>(last);
  if (!std::isfinite(m.log_z)) throw NumericError("crf: log partition is not finite");
  m.unary = ((alpha + beta).array() - m.log_z).exp().matrix();
  m.transitions = RowMatrix<Scalar>::Zero(K + 2, K + 2);
  for (Index k = 0; k < K; ++k) {
    m.transitions(start_state(K), k) = m.unary(0, k);
    m.transitions(k, stop_state(K)) = m.unary(length - 1, k);
  }
  for (Index t = 1; t < length; ++t) {
    for (Index i = 0; i < K; ++i) {
      if (alpha(t - 1, i) == -std::numeric_limits<Scalar>::infinity()) continue;
      for (Index j = 0; j < K; ++j) {
        const Scalar lp = alpha(t - 1, i) + transitions(i, j) + emissions(t, j) + beta(t, j) - m.log_z;
        m.transitions(i, j) += std::exp(lp);
      }
    }
  }
  return m;
}

template <typename Scalar>
struct ViterbiResult {
  TagSequence tags;
  Scalar score;
};

/// Exact highest-scoring path. Among equally scored paths the
/// lexicographically smallest tag sequence wins: a max-product table is
/// filled from the end and the path is read front to back, taking the lowest
/// tag index that attains the maximum at each step.
template <typename Scalar>
ViterbiResult<Scalar> viterbi(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions, Index length) {
  detail::check_shapes(transitions, emissions, length);
  const Index K = emissions.cols();
  // best(t, k): max score of positions t+1.. plus STOP given tag k at t.
  RowMatrix<Scalar> best(length, K);
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> successor(length, K);
  for (Index k = 0; k < K; ++k) {
    best(length - 1, k) = transitions(k, stop_state(K));
    successor(length - 1, k) = -1;
  }
  for (Index t = length - 2; t >= 0; --t) {
    for (Index k = 0; k < K; ++k) {
      Scalar top = -std::numeric_limits<Scalar>::infinity();
      int arg = 0;
      for (Index j = 0; j < K; ++j) {
        const Scalar s = transitions(k, j) + emissions(t + 1, j) + best(t + 1, j);
        if (s > top) {
          top = s;
          arg = static_cast<int>(j);
        }
      }
      best(t, k) = top;
      successor(t, k) = arg;
    }
  }
  ViterbiResult<Scalar> r;
  r.score = -std::numeric_limits<Scalar>::infinity();
  int first = 0;
  for (Index k = 0; k < K; ++k) {
    const Scalar s = transitions(start_state(K), k) + emissions(0, k) + best(0, k);
    if (s > r.score) {
      r.score = s;
      first = static_cast<int>(k);
    }
  }
  r.tags.resize(static_cast<std::size_t>(length));
  r.tags[0] = first;
  for (Index t = 1; t < length; ++t) {
    r.tags[static_cast<std::size_t>(t)] = successor(t - 1, r.tags[static_cast<std::size_t>(t - 1)]);
  }
  return r;
}

template <typename Scalar>
ViterbiResult<Scalar> viterbi(const RowMatrix<Scalar>& transitions, const RowMatrix<Scalar>& emissions) {
  return viterbi(transitions, emissions, emissions.rows());
}

/// Rows of sequence `b` from a time-major batch, trimmed to `length`.
template <typename Scalar>
RowMatrix<Scalar> sequence_rows(const RowMatrix<Scalar>& batched, Index batch, Index b, Index length) {
  RowMatrix<Scalar> out(length, batched.cols());
  for (Index t = 0; t < length; ++t) out.row(t) = batched.row(t * batch + b);
  return out;
}

/// Summed negative log-likelihood over a time-major batch of emission rows,
/// differentiable in both the emissions and the transition parameter.
/// `penalty`, when non-empty, is added to the transitions (0 or -inf entries).
template <typename Scalar>
Var<Scalar> nll_loss(Var<Scalar> emissions, Var<Scalar> transitions, const std::vector<TagSequence>& gold,
                     const std::vector<Index>& lengths, Index batch, const RowMatrix<Scalar>& penalty = {}) {
  const Index K = emissions.cols();
  if (static_cast<Index>(gold.size()) != batch || static_cast<Index>(lengths.size()) != batch) {
    throw ContractError("crf nll: batch bookkeeping mismatch");
  }
  if (emissions.rows() % batch != 0) throw DimensionError("crf nll: emissions rows not a multiple of batch");
  if (transitions.rows() != K + 2 || transitions.cols() != K + 2) {
    throw DimensionError("crf nll: transitions " + shape_string(transitions.value()) + " for " +
                         std::to_string(K) + " tags");
  }
  RowMatrix<Scalar> effective = transitions.value();
  if (penalty.size() != 0) effective += penalty;

  Graph<Scalar>& g = *emissions.graph;
  const bool want_grad = g.needs_grad(emissions.id) || g.needs_grad(transitions.id);
  auto d_emissions = std::make_shared<RowMatrix<Scalar>>();
  auto d_transitions = std::make_shared<RowMatrix<Scalar>>();
  if (want_grad) {
    *d_emissions = RowMatrix<Scalar>::Zero(emissions.rows(), K);
    *d_transitions = RowMatrix<Scalar>::Zero(K + 2, K + 2);
  }

  Scalar total = 0;
  for (Index b = 0; b < batch; ++b) {
    const Index len = lengths[static_cast<std::size_t>(b)];
    const TagSequence& tags = gold[static_cast<std::size_t>(b)];
    RowMatrix<Scalar> e = sequence_rows(emissions.value(), batch, b, len);
    const Scalar gold_score = score_sequence<Scalar>(effective, e, tags, len);
    if (!want_grad) {
      total += log_partition<Scalar>(effective, e, len) - gold_score;
      continue;
    }
    Marginals<Scalar> m = marginals<Scalar>(effective, e, len);
    total += m.log_z - gold_score;
    for (Index t = 0; t < len; ++t) {
      auto row = d_emissions->row(t * batch + b);
      row += m.unary.row(t);
      row(tags[static_cast<std::size_t>(t)]) -= Scalar(1);
    }
    *d_transitions += m.transitions;
    (*d_transitions)(start_state(K), tags[0]) -= Scalar(1);
    for (Index t = 1; t < len; ++t) {
      (*d_transitions)(tags[static_cast<std::size_t>(t - 1)], tags[static_cast<std::size_t>(t)]) -= Scalar(1);
    }
    (*d_transitions)(tags[static_cast<std::size_t>(len - 1)], stop_state(K)) -= Scalar(1);
  }
  RowMatrix<Scalar> out(1, 1);
  out(0, 0) = total;
  return g.record(
      Op::kCustom, {emissions.id, transitions.id}, std::move(out),
      [emissions, transitions, d_emissions, d_transitions](Graph<Scalar>& gr, int self) {
        const Scalar dy = gr.grad(self)(0, 0);
        if (gr.needs_grad(emissions.id)) gr.grad(emissions.id) += dy * *d_emissions;
        if (gr.needs_grad(transitions.id)) gr.grad(transitions.id) += dy * *d_transitions;
      },
      "crf-nll");
}

}  // namespace avex::crf

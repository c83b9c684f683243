#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "avex/autodiff.hpp"

namespace avex {

struct AdamOptions {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
};

template <typename Scalar>
struct AdamState {
  std::vector<RowMatrix<Scalar>> first_moment;
  std::vector<RowMatrix<Scalar>> second_moment;
  std::int64_t step = 0;

  /// Zero moments shaped like `params`.
  static AdamState zeros_like(const std::vector<Tensor<Scalar>*>& params) {
    AdamState s;
    for (const auto* p : params) {
      s.first_moment.push_back(RowMatrix<Scalar>::Zero(p->value().rows(), p->value().cols()));
      s.second_moment.push_back(RowMatrix<Scalar>::Zero(p->value().rows(), p->value().cols()));
    }
    return s;
  }
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
template <typename Scalar>
void adam_step(const std::vector<Tensor<Scalar>*>& params, AdamState<Scalar>& state,
               const AdamOptions& opt) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ContractError("adam_step: optimizer state does not match parameter list");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params[i]->value();
    const auto& g = params[i]->grad();
    if (g.rows() != v.rows() || g.cols() != v.cols() || state.first_moment[i].rows() != v.rows() ||
        state.first_moment[i].cols() != v.cols() || state.second_moment[i].rows() != v.rows() ||
        state.second_moment[i].cols() != v.cols()) {
      throw ContractError("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
  }

  Scalar clip = Scalar(1);
  if (opt.clip_norm > 0) {
    double sq = 0;
    for (const auto* p : params) sq += static_cast<double>(p->grad().squaredNorm());
    double norm = std::sqrt(sq);
    if (norm > opt.clip_norm) clip = static_cast<Scalar>(opt.clip_norm / norm);
  }

  ++state.step;
  const Scalar b1 = static_cast<Scalar>(opt.beta1);
  const Scalar b2 = static_cast<Scalar>(opt.beta2);
  const Scalar lr = static_cast<Scalar>(opt.learning_rate);
  const Scalar eps = static_cast<Scalar>(opt.epsilon);
  const Scalar c1 = Scalar(1) - std::pow(b1, static_cast<Scalar>(state.step));
  const Scalar c2 = Scalar(1) - std::pow(b2, static_cast<Scalar>(state.step));

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto g = (params[i]->grad() * clip).array();
    auto& m = state.first_moment[i];
    auto& s = state.second_moment[i];
    m.array() = b1 * m.array() + (Scalar(1) - b1) * g;
    s.array() = b2 * s.array() + (Scalar(1) - b2) * g.square();
    params[i]->value().array() -= lr * (m.array() / c1) / ((s.array() / c2).sqrt() + eps);
  }
}

}  // namespace avex

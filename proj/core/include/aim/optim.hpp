#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "aim/tensor.hpp"

namespace aim {

/// SGD with classical momentum: v = mu*v + g; p -= lr*v.
/// Gradients are zeroed after every step.
struct SgdState {
  double learning_rate;
  double momentum;
  std::unordered_map<const void*, std::vector<double>> velocity;

  SgdState(double lr, double mu);
};

void sgd_step(SgdState& state, std::vector<Tensor>& params);

/// Central-difference gradient check.
/// f builds the loss from the current parameter values; it is evaluated
/// under a private graph for the analytic pass and graph-free for the
/// numeric probes. Returns max over parameters of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
/// A re-evaluation mismatch at the base point flags f as non-deterministic.
double grad_check(const std::function<Tensor()>& f, std::vector<Tensor>& params,
                  double step = 1e-5);

}  // namespace aim

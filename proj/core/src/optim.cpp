#include "aim/optim.hpp"

#include <cmath>
#include <cstring>

namespace aim {

SgdState::SgdState(double lr, double mu) : learning_rate(lr), momentum(mu) {
  if (lr <= 0.0) throw ValueError("sgd: learning rate must be positive");
  if (mu < 0.0 || mu >= 1.0) throw ValueError("sgd: momentum must be in [0,1)");
}

void sgd_step(SgdState& state, std::vector<Tensor>& params) {
  for (Tensor& p : params) {
    p.ensure_grad();
    auto& vel = state.velocity[p.storage_key()];
    if (vel.empty()) {
      vel.assign(static_cast<std::size_t>(p.size()), 0.0);
    } else if (vel.size() != static_cast<std::size_t>(p.size())) {
      throw ShapeError("sgd: parameter size changed between steps");
    }
    auto vals = p.values_mut();
    auto g = p.grad_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      vel[i] = state.momentum * vel[i] + g[i];
      vals[i] -= state.learning_rate * vel[i];
      g[i] = 0.0;
    }
  }
}

double grad_check(const std::function<Tensor()>& f, std::vector<Tensor>& params, double step) {
  Graph::Pause pause;  // numeric probes must not record on a caller's tape
  const double base = f().item();
  if (f().item() != base) {
    throw ValueError("grad_check: f is not deterministic (re-evaluation mismatch)");
  }

  std::vector<std::vector<double>> analytic;
  {
    for (Tensor& p : params) {
      p.ensure_grad();
      p.zero_grad();
    }
    Graph g;
    Graph::Activate scope(g);
    Tensor loss = f();
    // a loss that never touched the tape is constant in the parameters
    if (loss.on_graph()) g.backward(loss);
    for (Tensor& p : params) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
      p.zero_grad();
    }
  }

  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + step;
      const double up = f().item();
      vals[i] = saved - step;
      const double down = f().item();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) /
                         std::max({1.0, std::abs(a), std::abs(numeric)});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace aim

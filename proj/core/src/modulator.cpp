#include "aim/modulator.hpp"

#include <cmath>

namespace aim {

ImbalanceMetric metric_from_string(const std::string& s) {
  if (s == "cv") return ImbalanceMetric::cv;
  if (s == "mad") return ImbalanceMetric::mad;
  if (s == "variance") return ImbalanceMetric::variance;
  if (s == "std") return ImbalanceMetric::std_dev;
  throw ValueError("unknown imbalance metric: '" + s + "'");
}

std::string to_string(ImbalanceMetric metric) {
  switch (metric) {
    case ImbalanceMetric::cv: return "cv";
    case ImbalanceMetric::mad: return "mad";
    case ImbalanceMetric::variance: return "variance";
    case ImbalanceMetric::std_dev: return "std";
  }
  return "?";
}

ModulationRecord make_record(int depth_count, int modality_count, ImbalanceMetric metric,
                             double ema_momentum) {
  if (ema_momentum < 0.0 || ema_momentum >= 1.0) {
    throw ValueError("modulator: ema_momentum must be in [0,1)");
  }
  ModulationRecord rec;
  rec.depth_count = depth_count;
  rec.modality_count = modality_count;
  rec.metric = metric;
  rec.ema_momentum = ema_momentum;
  auto grid = std::vector<std::vector<double>>(
      static_cast<std::size_t>(depth_count),
      std::vector<double>(static_cast<std::size_t>(modality_count), 0.0));
  rec.s = grid;
  rec.s_aux = grid;
  rec.s_hat = grid;
  rec.loss_block = grid;
  rec.loss_aux = grid;
  rec.alpha.assign(static_cast<std::size_t>(depth_count), 0.0);
  rec.loss_depth.assign(static_cast<std::size_t>(depth_count), 0.0);
  return rec;
}

namespace {

void ema_update(std::vector<std::vector<double>>& grid, bool& seeded, double mu, int d, int m,
                double value) {
  double& slot = grid[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)];
  slot = seeded ? mu * slot + (1.0 - mu) * value : value;
}

}  // namespace

void estimate_performance(ModulationRecord& rec, int d, int m, double batch_value) {
  ema_update(rec.s, rec.s_seeded, rec.ema_momentum, d, m, batch_value);
}

void estimate_aux_performance(ModulationRecord& rec, int d, int m, double batch_value) {
  ema_update(rec.s_aux, rec.s_aux_seeded, rec.ema_momentum, d, m, batch_value);
}

std::vector<double> modality_weights(ModulationRecord& rec, int d) {
  const auto& row = rec.s[static_cast<std::size_t>(d)];
  double mx = row[0];
  for (double v : row) mx = std::max(mx, v);
  std::vector<double> w(row.size());
  double sum = 0.0;
  for (std::size_t m = 0; m < row.size(); ++m) {
    w[m] = std::exp(row[m] - mx);
    sum += w[m];
  }
  for (double& v : w) v /= sum;
  rec.s_hat[static_cast<std::size_t>(d)] = w;
  return w;
}

double imbalance_level(std::span<const double> s, ImbalanceMetric metric) {
  const double n = static_cast<double>(s.size());
  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= n;
  bool all_equal = true;
  for (double v : s) {
    if (v != s[0]) {
      all_equal = false;
      break;
    }
  }
  if (all_equal) return 0.0;
  double var = 0.0, mad = 0.0;
  for (double v : s) {
    var += (v - mean) * (v - mean);
    mad += std::abs(v - mean);
  }
  var /= n;
  mad /= n;
  switch (metric) {
    case ImbalanceMetric::cv:
      if (mean <= 0.0) throw ValueError("imbalance_level: cv undefined for mean <= 0");
      return std::sqrt(var) / mean;
    case ImbalanceMetric::mad: return mad;
    case ImbalanceMetric::variance: return var;
    case ImbalanceMetric::std_dev: return std::sqrt(var);
  }
  throw ValueError("imbalance_level: unknown metric");
}

double imbalance_level(ModulationRecord& rec, int d) {
  const double a = imbalance_level(rec.s[static_cast<std::size_t>(d)], rec.metric);
  rec.alpha[static_cast<std::size_t>(d)] = a;
  return a;
}

double aggregate_depth_loss(std::span<const double> s_hat, std::span<const double> loss_block,
                            std::span<const double> loss_aux) {
  double acc = 0.0;
  for (std::size_t m = 0; m < s_hat.size(); ++m) {
    acc += (1.0 - s_hat[m]) * loss_block[m] + s_hat[m] * loss_aux[m];
  }
  return acc;
}

Tensor depth_interaction_loss(ModulationRecord& rec, int d,
                              const std::vector<Tensor>& loss_block_m,
                              const std::vector<Tensor>& loss_aux_m, DepthLossOptions opts) {
  const int M = rec.modality_count;
  if (static_cast<int>(loss_block_m.size()) != M) {
    throw ShapeError("depth_interaction_loss: expected one block loss per modality");
  }
  if (!opts.wo_pa && static_cast<int>(loss_aux_m.size()) != M) {
    throw ShapeError("depth_interaction_loss: expected one auxiliary loss per modality");
  }
  const std::vector<double> s_hat = modality_weights(rec, d);
  Tensor acc;
  for (int m = 0; m < M; ++m) {
    const std::size_t mi = static_cast<std::size_t>(m);
    double block_w = 1.0 - s_hat[mi];
    if (m == opts.zero_block_weight_modality) block_w = 0.0;
    Tensor term = scalar_mul(loss_block_m[mi], block_w);
    rec.loss_block[static_cast<std::size_t>(d)][mi] = loss_block_m[mi].item();
    if (!opts.wo_pa) {
      term = add(term, scalar_mul(loss_aux_m[mi], s_hat[mi]));
      rec.loss_aux[static_cast<std::size_t>(d)][mi] = loss_aux_m[mi].item();
    } else {
      rec.loss_aux[static_cast<std::size_t>(d)][mi] = 0.0;
    }
    acc = m == 0 ? term : add(acc, term);
  }
  rec.loss_depth[static_cast<std::size_t>(d)] = acc.item();
  return acc;
}

Tensor depth_loss(ModulationRecord& rec, int d, const std::vector<Tensor>& block_out,
                  const std::vector<Tensor>& aux_out, const std::vector<Tensor>& protos,
                  const std::vector<int>& labels, DepthLossOptions opts) {
  std::vector<Tensor> loss_block_m, loss_aux_m;
  for (std::size_t m = 0; m < block_out.size(); ++m) {
    loss_block_m.push_back(prototype_ce(block_out[m], protos[m], labels));
    if (!opts.wo_pa) loss_aux_m.push_back(prototype_ce(aux_out[m], protos[m], labels));
  }
  return depth_interaction_loss(rec, d, loss_block_m, loss_aux_m, opts);
}

Tensor total_modulation_loss(ModulationRecord& rec, const std::vector<Tensor>& depth_losses,
                             bool wo_da) {
  if (static_cast<int>(depth_losses.size()) != rec.depth_count) {
    throw ShapeError("total_modulation_loss: expected one loss per depth");
  }
  Tensor acc;
  for (int d = 0; d < rec.depth_count; ++d) {
    const double a = imbalance_level(rec, d);
    const double weight = wo_da ? 1.0 : a;
    Tensor term = scalar_mul(depth_losses[static_cast<std::size_t>(d)], weight);
    acc = d == 0 ? term : add(acc, term);
  }
  rec.loss_mod = acc.item();
  return acc;
}

}  // namespace aim

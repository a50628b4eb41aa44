#pragma once

#include <span>
#include <string>
#include <vector>

#include "aim/pdm.hpp"
#include "aim/tensor.hpp"

namespace aim {

enum class ImbalanceMetric { cv, mad, variance, std_dev };

ImbalanceMetric metric_from_string(const std::string& s);
std::string to_string(ImbalanceMetric metric);

/// Per-depth, per-modality training statistics. Depth index is 0-based
/// here (array slot d holds depth d+1). s and s_aux are exponential moving
/// averages over batches; everything else is recomputed from them and from
/// the current batch. None of these quantities carries gradient: they enter
/// losses as fixed coefficients.
struct ModulationRecord {
  int depth_count = 0;
  int modality_count = 0;
  ImbalanceMetric metric = ImbalanceMetric::cv;
  double ema_momentum = 0.9;

  bool s_seeded = false;
  bool s_aux_seeded = false;
  std::vector<std::vector<double>> s;      // [d][m] full-block performance
  std::vector<std::vector<double>> s_aux;  // [d][m] auxiliary-block performance
  std::vector<std::vector<double>> s_hat;  // [d][m] softmax weights (last computed)
  std::vector<double> alpha;               // [d] imbalance levels (last computed)
  std::vector<std::vector<double>> loss_block;  // [d][m] last batch values
  std::vector<std::vector<double>> loss_aux;
  std::vector<double> loss_depth;  // [d]
  double loss_mod = 0.0;
};

ModulationRecord make_record(int depth_count, int modality_count, ImbalanceMetric metric,
                             double ema_momentum);

/// EMA blend: s <- mu*s_prev + (1-mu)*batch; the first call seeds s = batch.
void estimate_performance(ModulationRecord& rec, int d, int m, double batch_value);
void estimate_aux_performance(ModulationRecord& rec, int d, int m, double batch_value);

/// Softmax over modalities of s[d][.]; also stored into rec.s_hat[d].
std::vector<double> modality_weights(ModulationRecord& rec, int d);

/// Imbalance of a performance vector under the chosen metric
/// (population-normalized). Zero exactly when all entries are equal.
double imbalance_level(std::span<const double> s, ImbalanceMetric metric);
/// Same, from rec.s[d]; also stored into rec.alpha[d].
double imbalance_level(ModulationRecord& rec, int d);

/// sum_m [(1-s_hat_m)*l_block_m + s_hat_m*l_aux_m] as plain numbers.
double aggregate_depth_loss(std::span<const double> s_hat, std::span<const double> loss_block,
                            std::span<const double> loss_aux);

struct DepthLossOptions {
  bool wo_pa = false;                    // drop the auxiliary term entirely
  int zero_block_weight_modality = -1;   // force one modality's full-block weight to 0
};

/// Eq-level interaction at one depth from prebuilt per-modality loss
/// tensors; the weights come from rec.s (detached). loss_aux_m may be empty
/// when opts.wo_pa is set.
Tensor depth_interaction_loss(ModulationRecord& rec, int d,
                              const std::vector<Tensor>& loss_block_m,
                              const std::vector<Tensor>& loss_aux_m, DepthLossOptions opts = {});

/// Prototype route: per-modality distance cross entropies of the full and
/// auxiliary block outputs, then the interaction weighting.
Tensor depth_loss(ModulationRecord& rec, int d, const std::vector<Tensor>& block_out,
                  const std::vector<Tensor>& aux_out, const std::vector<Tensor>& protos,
                  const std::vector<int>& labels, DepthLossOptions opts = {});

/// alpha-weighted sum over depths. wo_da replaces every weight with 1, but
/// rec.alpha keeps the measured value for logging.
Tensor total_modulation_loss(ModulationRecord& rec, const std::vector<Tensor>& depth_losses,
                             bool wo_da = false);

}  // namespace aim

#pragma once

#include <cstdint>
#include <string>

#include "aim/modulator.hpp"
#include "aim/net.hpp"

namespace aim {

enum class TrainMode { joint_baseline, aim, aim_label, aim_wo_pa, aim_wo_da };

TrainMode mode_from_string(const std::string& s);
std::string to_string(TrainMode mode);

/// One training run. Parsed from a flat key=value file; keys match the
/// field comments below. Unknown keys and invalid values are rejected
/// before any work happens.
struct ExperimentConfig {
  TrainMode mode = TrainMode::aim;                  // mode
  FusionKind fusion = FusionKind::concatenation;    // fusion
  ImbalanceMetric metric = ImbalanceMetric::cv;     // metric
  int modulation_start = 20;                        // E
  int total_epochs = 180;                            // E_T
  int batch_size = 64;                              // batch_size
  double lr = 1e-3;                                 // lr
  double lr_roots = 0.02;                           // lr_roots
  double momentum = 0.9;                            // momentum
  double ema_momentum = 0.9;                        // ema_momentum
  int latent_dim = 64;                              // latent_dim
  int hidden_dim = 32;                              // hidden_dim
  int depth = 4;                                    // depth
  // dataset: "fixture", a dataset-spec file, or a directory holding
  // train.mmds and test.mmds
  std::string dataset = "fixture";
  std::uint64_t seed = 0;                           // seed
  double lambda_task = 2.0;                         // lambda_task
  std::string out_dir = "out";                      // out_dir
  std::string name;                                 // name (defaults to <mode>_seed<seed>)

  // deviation toggles, defaults match the documented training scheme
  bool pdm_in_phase2 = false;         // decoupler training stops at the phase boundary
  bool pdm_train_backbone = false;    // let the decoupler loss update source blocks
  bool detach_block_inputs = false;  // per-depth losses reshape the whole chain below
  bool detach_protos = true;         // prototypes enter per-depth losses as constants
  // the auxiliary-block losses update the source parameters through the
  // decoupling map but do not train the decoupler itself; with false the
  // decoupler would learn to optimize its selected branch directly, which
  // can invert the intended full-vs-auxiliary performance ordering
  bool aux_detach_decoupler = true;
  int zero_block_weight_modality = -1;  // force one modality's full-block loss weight to 0
  int gram_every = 0;                 // export gram CSVs every k epochs (0: final only)

  void validate() const;
  std::string run_name() const;
};

ExperimentConfig parse_config_file(const std::string& path);
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin);

}  // namespace aim

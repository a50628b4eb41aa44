#pragma once

#include <string>
#include <vector>

#include "aim/config.hpp"
#include "aim/dap.hpp"
#include "aim/data.hpp"
#include "aim/modulator.hpp"
#include "aim/net.hpp"
#include "aim/pdm.hpp"

namespace aim {

struct MaskStat {
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// One metrics.csv row. Depth-indexed vectors use slot d for depth d+1.
/// Wall-clock time lives in summary.json, not here, so two identically
/// seeded runs emit byte-identical metrics files.
struct EpochMetrics {
  int epoch = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::vector<double> probe_acc;                     // per modality, test set
  std::vector<std::vector<double>> s;                // [d][m], end of epoch
  std::vector<std::vector<double>> s_aux;            // [d][m]
  std::vector<std::vector<double>> s_hat;            // [d][m], from this row's s
  std::vector<double> alpha;                         // [d], from this row's s
  std::vector<std::vector<double>> loss_block;       // [d][m], epoch mean
  std::vector<std::vector<double>> loss_aux;         // [d][m], epoch mean
  std::vector<double> loss_depth;                    // [d], epoch mean
  double loss_mod = 0.0;                             // epoch mean
  double loss_task = 0.0;                            // epoch mean
  double loss_pdm = 0.0;                             // epoch mean
  std::vector<std::vector<std::vector<MaskStat>>> masks;  // [m][d][layer], end of epoch
};

/// Model state for one training context. Decouplers exist for every mode
/// except joint_baseline and aim_wo_pa; label heads only for aim_label.
struct ModelBundle {
  MultimodalNet net;
  PrototypeBank bank;
  std::vector<std::vector<Decoupler>> decouplers;    // [m][d]
  std::vector<std::vector<DenseLayer>> label_heads;  // [m][d]

  /// Network + decoupler + head parameters (everything the main optimizer
  /// step touches; prototype roots are stepped separately).
  std::vector<Tensor> main_parameters() const;
};

ModelBundle make_bundle(const ExperimentConfig& cfg, const Dataset& train);

/// The complete modulated training objective for one batch:
/// lambda_task * task + modulation + (decoupler loss when enabled).
/// rec supplies the fixed performance weights; call update_record_for_batch
/// first so they reflect the current state. Exposed for direct gradient
/// verification of exactly the loss the optimizer steps on.
Tensor phase2_objective(const ModelBundle& bundle, ModulationRecord& rec,
                        const std::vector<Tensor>& inputs, const std::vector<int>& labels,
                        const ExperimentConfig& cfg);

/// EMA-update rec.s (and rec.s_aux when auxiliary blocks exist) from one
/// batch, values only. Returns the per-modality block activations as
/// detached snapshots for reuse.
std::vector<std::vector<Tensor>> update_record_for_batch(const ModelBundle& bundle,
                                                         ModulationRecord& rec,
                                                         const std::vector<Tensor>& inputs,
                                                         const std::vector<int>& labels,
                                                         const ExperimentConfig& cfg);

/// Estimator-side prototype fitting, identical in every mode: the combined
/// root objective plus a tracking term anchoring each depth's prototypes to
/// the batch's (detached) block outputs through the frozen encoders.
/// Gradients reach only the roots.
Tensor root_objective(const ModelBundle& bundle, const std::vector<std::vector<Tensor>>& acts,
                      const std::vector<int>& labels);

struct TrainResult {
  ExperimentConfig config;
  std::vector<EpochMetrics> history;
  double final_train_acc = 0.0;
  double final_test_acc = 0.0;
  std::vector<double> final_probe_acc;
  std::vector<double> final_alpha;
  std::string out_dir;
  std::string checkpoint_path;
  std::string metrics_path;
  std::string summary_path;
  double total_seconds = 0.0;
  std::vector<double> epoch_seconds;
  int modulated_steps = 0;
};

/// Run the full two-phase schedule for one config. Writes metrics.csv,
/// summary.json, gram CSVs and checkpoint.aimc under the resolved output
/// directory (AIMLAB_OUT, when set, prefixes relative out_dir paths).
TrainResult train(const ExperimentConfig& cfg);

struct EvalResult {
  double multimodal_accuracy = 0.0;
  std::vector<double> probe_accuracy;
};

EvalResult evaluate(const MultimodalNet& net, PrototypeBank& bank, const Dataset& test);

/// Rewrite metrics.csv and summary.json for a finished run.
void export_metrics(const TrainResult& result, const std::string& dir);

std::string resolve_out_dir(const std::string& out_dir);

struct SuiteRow {
  std::string mode;
  int runs = 0;
  int failures = 0;
  double test_acc_mean = 0.0;
  double test_acc_std = 0.0;
  double train_acc_mean = 0.0;
  double train_acc_std = 0.0;
  std::vector<double> probe_mean;  // per modality
  std::vector<double> probe_std;
  double alpha_mean = 0.0;  // mean over depths of final-epoch alpha
  double alpha_std = 0.0;
};

struct SuiteResult {
  std::vector<SuiteRow> rows;                 // one per mode, config order
  std::vector<TrainResult> runs;              // successful runs, config order
  std::vector<std::string> errors;            // per config, empty when ok
  std::string csv_path;
};

/// Run every config (jobs > 1 runs them concurrently; contexts share
/// nothing) and aggregate mean/std per mode into suite.csv under out_root.
/// A failed run is recorded in its row and the suite continues.
SuiteResult run_suite(const std::vector<ExperimentConfig>& configs, const std::string& out_root,
                      int jobs = 1);

/// Resolve the config's dataset reference into train/test sets.
std::pair<Dataset, Dataset> load_config_dataset(const ExperimentConfig& cfg);

}  // namespace aim

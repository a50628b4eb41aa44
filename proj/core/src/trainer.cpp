#include "aim/trainer.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace aim {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

bool mode_uses_modulation(TrainMode mode) { return mode != TrainMode::joint_baseline; }

bool mode_uses_pdm(TrainMode mode) {
  return mode == TrainMode::aim || mode == TrainMode::aim_label || mode == TrainMode::aim_wo_da;
}

std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

struct ProtoStats {
  double performance = 0.0;  // mean true-class probability of the distance softmax
  double ce = 0.0;           // mean distance cross entropy
};

constexpr double kDistanceClip = 50.0;

ProtoStats prototype_stats(const Tensor& outputs, const std::vector<int>& labels,
                           const Tensor& protos) {
  Graph::Pause pause;
  const Tensor dist = clip(row_distance(outputs, protos), 0.0, kDistanceClip);
  const int n = dist.shape()[0], k = dist.shape()[1];
  const double* dv = dist.values().data();
  ProtoStats st;
  for (int i = 0; i < n; ++i) {
    const double* row = dv + static_cast<std::size_t>(i) * k;
    double mn = row[0];
    for (int j = 1; j < k; ++j) mn = std::min(mn, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(mn - row[j]);
    const int y = labels[static_cast<std::size_t>(i)];
    st.performance += std::exp(mn - row[y]) / s;
    st.ce += row[y] - mn + std::log(s);
  }
  st.performance /= static_cast<double>(n);
  st.ce /= static_cast<double>(n);
  return st;
}

ProtoStats label_stats(const Tensor& logits, const std::vector<int>& labels) {
  Graph::Pause pause;
  const int n = logits.shape()[0], k = logits.shape()[1];
  const double* lv = logits.values().data();
  ProtoStats st;
  for (int i = 0; i < n; ++i) {
    const double* row = lv + static_cast<std::size_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    const int y = labels[static_cast<std::size_t>(i)];
    st.performance += std::exp(row[y] - mx) / s;
    st.ce += -(row[y] - mx - std::log(s));
  }
  st.performance /= static_cast<double>(n);
  st.ce /= static_cast<double>(n);
  return st;
}

}  // namespace

std::string resolve_out_dir(const std::string& out_dir) {
  const char* root = std::getenv("AIMLAB_OUT");
  if (root != nullptr && *root != '\0' && fs::path(out_dir).is_relative()) {
    return (fs::path(root) / out_dir).string();
  }
  return out_dir;
}

std::pair<Dataset, Dataset> load_config_dataset(const ExperimentConfig& cfg) {
  if (cfg.dataset == "fixture") return generate(standard_fixture(cfg.seed));
  const fs::path p(cfg.dataset);
  if (fs::is_directory(p)) {
    return {load((p / "train.mmds").string()), load((p / "test.mmds").string())};
  }
  return generate(parse_dataset_spec(cfg.dataset));
}

std::vector<Tensor> ModelBundle::main_parameters() const {
  std::vector<Tensor> params = net.parameters();
  for (const auto& per_m : decouplers) {
    for (const Decoupler& dec : per_m) {
      for (Tensor& t : dec.parameters()) params.push_back(t);
    }
  }
  for (const auto& per_m : label_heads) {
    for (const DenseLayer& head : per_m) {
      params.push_back(head.weight);
      params.push_back(head.bias);
    }
  }
  return params;
}

ModelBundle make_bundle(const ExperimentConfig& cfg, const Dataset& train) {
  ModelBundle bundle;
  Rng base(cfg.seed);
  bundle.net = make_mlp_net(train.num_modalities, train.dims, cfg.depth, cfg.hidden_dim,
                            train.num_classes, cfg.fusion, base.derive("net"));
  bundle.bank = make_prototype_bank(bundle.net, base.derive("bank"));
  if (mode_uses_pdm(cfg.mode)) {
    Rng dec_rng = base.derive("decoupler");
    bundle.decouplers.resize(static_cast<std::size_t>(train.num_modalities));
    for (int m = 0; m < train.num_modalities; ++m) {
      for (const Block& block : bundle.net.encoders[static_cast<std::size_t>(m)].blocks) {
        bundle.decouplers[static_cast<std::size_t>(m)].push_back(
            Decoupler::init(block, cfg.latent_dim, dec_rng));
      }
    }
  }
  if (cfg.mode == TrainMode::aim_label) {
    Rng head_rng = base.derive("heads");
    bundle.label_heads.resize(static_cast<std::size_t>(train.num_modalities));
    for (int m = 0; m < train.num_modalities; ++m) {
      const EncoderStack& enc = bundle.net.encoders[static_cast<std::size_t>(m)];
      for (const Block& block : enc.blocks) {
        bundle.label_heads[static_cast<std::size_t>(m)].push_back(
            DenseLayer::init({block.out_dim(), train.num_classes, Activation::none}, head_rng));
      }
    }
  }
  propagate(bundle.bank, bundle.net);
  return bundle;
}

std::vector<std::vector<Tensor>> update_record_for_batch(const ModelBundle& bundle,
                                                         ModulationRecord& rec,
                                                         const std::vector<Tensor>& inputs,
                                                         const std::vector<int>& labels,
                                                         const ExperimentConfig& cfg) {
  Graph::Pause pause;
  const int M = bundle.net.num_modalities;
  const int D = bundle.net.depth;
  const bool label_route = cfg.mode == TrainMode::aim_label;
  std::vector<std::vector<Tensor>> all_acts(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) {
    const EncoderStack& enc = bundle.net.encoders[static_cast<std::size_t>(m)];
    const std::vector<Tensor> acts = enc.forward_all(inputs[static_cast<std::size_t>(m)]);
    all_acts[static_cast<std::size_t>(m)] = acts;
    for (int d = 0; d < D; ++d) {
      const Tensor& out = acts[static_cast<std::size_t>(d)];
      ProtoStats st;
      if (label_route) {
        const DenseLayer& head = bundle.label_heads[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)];
        st = label_stats(head.forward(out), labels);
      } else {
        st = prototype_stats(out, labels,
                             bundle.bank.depth[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]);
      }
      estimate_performance(rec, d, m, st.performance);
      rec.loss_block[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)] = st.ce;

      if (!bundle.decouplers.empty()) {
        const Decoupler& dec =
            bundle.decouplers[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)];
        const Block& block = enc.blocks[static_cast<std::size_t>(d)];
        const DecoupleResult r = decouple(dec, block);
        const Tensor& in = d == 0 ? inputs[static_cast<std::size_t>(m)]
                                  : acts[static_cast<std::size_t>(d - 1)];
        const Tensor aux_out = r.aux.forward(in);
        ProtoStats ast;
        if (label_route) {
          const DenseLayer& head =
              bundle.label_heads[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)];
          ast = label_stats(head.forward(aux_out), labels);
        } else {
          ast = prototype_stats(aux_out, labels,
                                bundle.bank.depth[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]);
        }
        estimate_aux_performance(rec, d, m, ast.performance);
        rec.loss_aux[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)] = ast.ce;
      } else {
        rec.loss_aux[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)] = 0.0;
      }
    }
  }
  rec.s_aux_seeded = rec.s_aux_seeded || !bundle.decouplers.empty();
  rec.s_seeded = true;
  // observer view of the derived quantities
  for (int d = 0; d < D; ++d) {
    modality_weights(rec, d);
    imbalance_level(rec, d);
    rec.loss_depth[static_cast<std::size_t>(d)] =
        bundle.decouplers.empty()
            ? 0.0
            : aggregate_depth_loss(rec.s_hat[static_cast<std::size_t>(d)],
                                   rec.loss_block[static_cast<std::size_t>(d)],
                                   rec.loss_aux[static_cast<std::size_t>(d)]);
  }
  rec.loss_mod = 0.0;
  for (int d = 0; d < D; ++d) {
    rec.loss_mod += rec.alpha[static_cast<std::size_t>(d)] * rec.loss_depth[static_cast<std::size_t>(d)];
  }
  return all_acts;
}

namespace {

bool has_zero_row(const Tensor& t) {
  const int rows = t.shape()[0], cols = t.shape()[1];
  const double* v = t.values().data();
  for (int i = 0; i < rows; ++i) {
    bool all_zero = true;
    for (int j = 0; j < cols; ++j) {
      if (v[static_cast<std::size_t>(i) * cols + j] != 0.0) {
        all_zero = false;
        break;
      }
    }
    if (all_zero) return true;
  }
  return false;
}

}  // namespace

Tensor root_objective(const ModelBundle& bundle, const std::vector<std::vector<Tensor>>& acts,
                      const std::vector<int>& labels) {
  const int M = bundle.net.num_modalities;
  const int K = bundle.bank.num_classes;
  std::vector<double> eye(static_cast<std::size_t>(K) * K, 0.0);
  for (int i = 0; i < K; ++i) eye[static_cast<std::size_t>(i) * K + i] = 1.0;
  const Tensor identity = Tensor::from({K, K}, std::move(eye));

  Tensor loss = dap_task_loss(bundle.bank, bundle.net);
  for (int m = 0; m < M; ++m) {
    Tensor proto = bundle.bank.roots[static_cast<std::size_t>(m)];
    const EncoderStack& enc = bundle.net.encoders[static_cast<std::size_t>(m)];
    for (int d = 0; d < bundle.net.depth; ++d) {
      proto = enc.blocks[static_cast<std::size_t>(d)].forward(proto, /*frozen=*/true);
      const Tensor out =
          stop_gradient(acts[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]);
      loss = add(loss, prototype_ce(out, proto, labels));
    }
    // orthogonality of the deepest prototypes; a transiently dead relu row
    // has no defined cosine, so that modality sits this batch out and the
    // anchoring terms above pull it back
    if (!has_zero_row(proto)) {
      loss = add(loss, scalar_mul(frobenius_sq(sub(cosine_gram(proto), identity)),
                                  1.0 / static_cast<double>(M)));
    }
  }
  return loss;
}

namespace {

/// Prototype tensors for the per-depth losses: detached snapshots by
/// default, or an on-graph propagation of the live roots through the
/// frozen encoders when detach_protos is off.
std::vector<std::vector<Tensor>> loss_prototypes(const ModelBundle& bundle,
                                                 const ExperimentConfig& cfg) {
  const int M = bundle.net.num_modalities;
  std::vector<std::vector<Tensor>> protos(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) {
    if (cfg.detach_protos) {
      protos[static_cast<std::size_t>(m)] = bundle.bank.depth[static_cast<std::size_t>(m)];
    } else {
      Tensor cur = bundle.bank.roots[static_cast<std::size_t>(m)];
      for (const Block& b : bundle.net.encoders[static_cast<std::size_t>(m)].blocks) {
        cur = b.forward(cur, /*frozen=*/true);
        protos[static_cast<std::size_t>(m)].push_back(cur);
      }
    }
  }
  return protos;
}

Tensor decoupler_loss(const ModelBundle& bundle, const std::vector<Tensor>& inputs,
                      const std::vector<int>& labels,
                      const std::vector<std::vector<Tensor>>& protos,
                      const std::vector<std::vector<Tensor>>& acts,
                      const ExperimentConfig& cfg) {
  Tensor total;
  bool first = true;
  for (int m = 0; m < bundle.net.num_modalities; ++m) {
    const EncoderStack& enc = bundle.net.encoders[static_cast<std::size_t>(m)];
    for (int d = 0; d < bundle.net.depth; ++d) {
      const Tensor raw = d == 0 ? inputs[static_cast<std::size_t>(m)]
                                : acts[static_cast<std::size_t>(m)][static_cast<std::size_t>(d - 1)];
      const Tensor in = cfg.pdm_train_backbone ? raw : stop_gradient(raw);
      Tensor loss = pdm_loss(bundle.decouplers[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)],
                             enc.blocks[static_cast<std::size_t>(d)], in, labels,
                             protos[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)],
                             /*detach_source=*/!cfg.pdm_train_backbone);
      total = first ? loss : add(total, loss);
      first = false;
    }
  }
  return total;
}

}  // namespace

namespace {

struct Phase2Parts {
  Tensor total;
  double task_value = 0.0;
  double pdm_value = 0.0;
  std::vector<std::vector<Tensor>> acts;  // live per-modality block outputs
};

ProtoStats depth_stats(const ModelBundle& bundle, const Tensor& out,
                       const std::vector<int>& labels, int m, int d) {
  if (!bundle.label_heads.empty()) {
    Graph::Pause pause;
    const DenseLayer& head =
        bundle.label_heads[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)];
    return label_stats(head.forward(out), labels);
  }
  return prototype_stats(out, labels,
                         bundle.bank.depth[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]);
}

Phase2Parts phase2_parts(const ModelBundle& bundle, ModulationRecord& rec,
                         const std::vector<Tensor>& inputs, const std::vector<int>& labels,
                         const ExperimentConfig& cfg, bool update_rec) {
  const int M = bundle.net.num_modalities;
  const int D = bundle.net.depth;
  const bool label_route = cfg.mode == TrainMode::aim_label;
  const bool wo_pa = cfg.mode == TrainMode::aim_wo_pa;

  // live task path
  std::vector<std::vector<Tensor>> acts(static_cast<std::size_t>(M));
  std::vector<Tensor> feats;
  for (int m = 0; m < M; ++m) {
    acts[static_cast<std::size_t>(m)] =
        bundle.net.encoders[static_cast<std::size_t>(m)].forward_all(inputs[static_cast<std::size_t>(m)]);
    feats.push_back(acts[static_cast<std::size_t>(m)].back());
  }
  const Tensor logits = bundle.net.head.logits(feats);
  const Tensor task = task_loss(logits, labels);

  const std::vector<std::vector<Tensor>> protos = loss_prototypes(bundle, cfg);

  // per-depth block and auxiliary outputs first; the performance estimates
  // must see the whole batch before any weight is derived from them
  std::vector<std::vector<Tensor>> block_outs(static_cast<std::size_t>(D)),
      aux_outs(static_cast<std::size_t>(D));
  for (int d = 0; d < D; ++d) {
    for (int m = 0; m < M; ++m) {
      const EncoderStack& enc = bundle.net.encoders[static_cast<std::size_t>(m)];
      const Block& block = enc.blocks[static_cast<std::size_t>(d)];
      const Tensor raw_in = d == 0 ? inputs[static_cast<std::size_t>(m)]
                                   : acts[static_cast<std::size_t>(m)][static_cast<std::size_t>(d - 1)];
      const Tensor block_in = cfg.detach_block_inputs ? stop_gradient(raw_in) : raw_in;
      block_outs[static_cast<std::size_t>(d)].push_back(
          cfg.detach_block_inputs
              ? block.forward(block_in)
              : acts[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]);
      if (!wo_pa) {
        const DecoupleResult r =
            decouple(bundle.decouplers[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)], block,
                     {.freeze_decoupler = cfg.aux_detach_decoupler});
        aux_outs[static_cast<std::size_t>(d)].push_back(r.aux.forward(block_in));
      }
    }
  }
  if (update_rec) {
    for (int d = 0; d < D; ++d) {
      for (int m = 0; m < M; ++m) {
        const auto [perf, ce] = depth_stats(bundle, block_outs[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)],
                                            labels, m, d);
        estimate_performance(rec, d, m, perf);
        rec.loss_block[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)] = ce;
        if (!wo_pa) {
          const auto [aperf, ace] = depth_stats(
              bundle, aux_outs[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)], labels, m, d);
          estimate_aux_performance(rec, d, m, aperf);
          rec.loss_aux[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)] = ace;
        }
      }
    }
    rec.s_seeded = true;
    rec.s_aux_seeded = rec.s_aux_seeded || !wo_pa;
  }

  std::vector<Tensor> depth_losses;
  for (int d = 0; d < D; ++d) {
    std::vector<Tensor> loss_block_m, loss_aux_m;
    for (int m = 0; m < M; ++m) {
      const Tensor& block_out = block_outs[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)];
      if (label_route) {
        const DenseLayer& head =
            bundle.label_heads[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)];
        loss_block_m.push_back(task_loss(head.forward(block_out), labels));
        if (!wo_pa) {
          loss_aux_m.push_back(task_loss(
              head.forward(aux_outs[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)]), labels));
        }
      } else {
        const Tensor& proto = protos[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)];
        loss_block_m.push_back(prototype_ce(block_out, proto, labels));
        if (!wo_pa) {
          loss_aux_m.push_back(prototype_ce(
              aux_outs[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)], proto, labels));
        }
      }
    }
    depth_losses.push_back(depth_interaction_loss(
        rec, d, loss_block_m, loss_aux_m,
        {.wo_pa = wo_pa, .zero_block_weight_modality = cfg.zero_block_weight_modality}));
  }
  Phase2Parts parts;
  parts.task_value = task.item();
  Tensor total = total_modulation_loss(rec, depth_losses, cfg.mode == TrainMode::aim_wo_da);
  if (cfg.lambda_task != 0.0) total = add(scalar_mul(task, cfg.lambda_task), total);
  if (!bundle.decouplers.empty() && cfg.pdm_in_phase2) {
    const Tensor pdm = decoupler_loss(bundle, inputs, labels, protos, acts, cfg);
    parts.pdm_value = pdm.item();
    total = add(total, pdm);
  }
  parts.total = total;
  parts.acts = std::move(acts);
  return parts;
}

}  // namespace

Tensor phase2_objective(const ModelBundle& bundle, ModulationRecord& rec,
                        const std::vector<Tensor>& inputs, const std::vector<int>& labels,
                        const ExperimentConfig& cfg) {
  return phase2_parts(bundle, rec, inputs, labels, cfg, /*update_rec=*/false).total;
}

// ---- training loop ----------------------------------------------------------

namespace {

struct EpochAccum {
  double task = 0.0, pdm = 0.0, mod = 0.0;
  std::vector<std::vector<double>> block, aux;
  std::vector<double> depth;
  int batches = 0;

  EpochAccum(int D, int M)
      : block(static_cast<std::size_t>(D), std::vector<double>(static_cast<std::size_t>(M), 0.0)),
        aux(static_cast<std::size_t>(D), std::vector<double>(static_cast<std::size_t>(M), 0.0)),
        depth(static_cast<std::size_t>(D), 0.0) {}

  void absorb(const ModulationRecord& rec, double task_v, double pdm_v) {
    task += task_v;
    pdm += pdm_v;
    mod += rec.loss_mod;
    for (std::size_t d = 0; d < rec.loss_depth.size(); ++d) {
      depth[d] += rec.loss_depth[d];
      for (std::size_t m = 0; m < rec.loss_block[d].size(); ++m) {
        block[d][m] += rec.loss_block[d][m];
        aux[d][m] += rec.loss_aux[d][m];
      }
    }
    ++batches;
  }
};

std::vector<std::vector<std::vector<MaskStat>>> collect_mask_stats(const ModelBundle& bundle) {
  Graph::Pause pause;
  std::vector<std::vector<std::vector<MaskStat>>> stats;
  if (bundle.decouplers.empty()) {
    // schema stays fixed across modes: zero stats when no decoupler exists
    const int M = bundle.net.num_modalities;
    stats.resize(static_cast<std::size_t>(M));
    for (int m = 0; m < M; ++m) {
      const EncoderStack& enc = bundle.net.encoders[static_cast<std::size_t>(m)];
      for (const Block& b : enc.blocks) {
        stats[static_cast<std::size_t>(m)].push_back(
            std::vector<MaskStat>(b.layers.size(), MaskStat{}));
      }
    }
    return stats;
  }
  stats.resize(bundle.decouplers.size());
  for (std::size_t m = 0; m < bundle.decouplers.size(); ++m) {
    for (std::size_t d = 0; d < bundle.decouplers[m].size(); ++d) {
      const Block& block = bundle.net.encoders[m].blocks[d];
      const DecoupleResult r = decouple(bundle.decouplers[m][d], block);
      std::vector<MaskStat> per_layer;
      for (const Tensor& w : r.masks) {
        MaskStat st;
        st.min = w.values()[0];
        st.max = w.values()[0];
        for (double v : w.values()) {
          st.mean += v;
          st.min = std::min(st.min, v);
          st.max = std::max(st.max, v);
        }
        st.mean /= static_cast<double>(w.size());
        per_layer.push_back(st);
      }
      stats[m].push_back(std::move(per_layer));
    }
  }
  return stats;
}

}  // namespace

EvalResult evaluate(const MultimodalNet& net, PrototypeBank& bank, const Dataset& test) {
  if (test.size() == 0) throw ValueError("evaluate: empty test set");
  propagate(bank, net);
  std::vector<Tensor> inputs;
  for (int m = 0; m < net.num_modalities; ++m) inputs.push_back(test.modality_matrix(m));
  EvalResult result;
  result.multimodal_accuracy = multimodal_accuracy(net, inputs, test.labels);
  for (int m = 0; m < net.num_modalities; ++m) {
    result.probe_accuracy.push_back(unimodal_probe_accuracy(
        net.encoders[static_cast<std::size_t>(m)], bank, m, inputs[static_cast<std::size_t>(m)],
        test.labels));
  }
  return result;
}

TrainResult train(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  TrainResult result;
  result.config = cfg;
  result.out_dir = resolve_out_dir(cfg.out_dir);
  fs::create_directories(result.out_dir);
  result.checkpoint_path = result.out_dir + "/checkpoint.aimc";
  result.metrics_path = result.out_dir + "/metrics.csv";
  result.summary_path = result.out_dir + "/summary.json";

  auto [train_set, test_set] = load_config_dataset(cfg);
  const int M = train_set.num_modalities;
  const int D = cfg.depth;
  const int n = train_set.size();

  ModelBundle bundle = make_bundle(cfg, train_set);
  std::vector<Tensor> main_params = bundle.main_parameters();
  SgdState opt_main(cfg.lr, cfg.momentum);
  SgdState opt_roots(cfg.lr_roots > 0.0 ? cfg.lr_roots : cfg.lr, cfg.momentum);
  ModulationRecord rec = make_record(D, M, cfg.metric, cfg.ema_momentum);

  Rng base(cfg.seed);
  bool have_checkpoint = false;
  int epoch = 0, batch_index = 0;

  try {
    for (epoch = 0; epoch < cfg.total_epochs; ++epoch) {
      const auto e_start = std::chrono::steady_clock::now();
      const bool modulated = mode_uses_modulation(cfg.mode) && epoch >= cfg.modulation_start;
      Rng shuffle_rng = base.derive("shuffle:" + std::to_string(epoch));
      const std::vector<int> order = shuffled_indices(n, shuffle_rng);
      EpochAccum accum(D, M);

      for (int start = 0; start < n; start += cfg.batch_size) {
        batch_index = start / cfg.batch_size;
        const int stop = std::min(n, start + cfg.batch_size);
        const std::span<const int> idx(order.data() + start, static_cast<std::size_t>(stop - start));
        std::vector<Tensor> inputs;
        for (int m = 0; m < M; ++m) inputs.push_back(train_set.modality_batch(m, idx));
        const std::vector<int> labels = train_set.label_batch(idx);

        propagate(bundle.bank, bundle.net);

        double task_value = 0.0, pdm_value = 0.0;
        std::vector<std::vector<Tensor>> observed_acts;
        if (modulated) {
          Graph g;
          Graph::Activate scope(g);
          const Phase2Parts parts = phase2_parts(bundle, rec, inputs, labels, cfg,
                                                 /*update_rec=*/true);
          g.backward(parts.total);
          task_value = parts.task_value;
          pdm_value = parts.pdm_value;
          observed_acts = parts.acts;
          ++result.modulated_steps;
          sgd_step(opt_main, main_params);
        } else {
          observed_acts = update_record_for_batch(bundle, rec, inputs, labels, cfg);
          Graph g;
          Graph::Activate scope(g);
          std::vector<std::vector<Tensor>> acts(static_cast<std::size_t>(M));
          std::vector<Tensor> feats;
          for (int m = 0; m < M; ++m) {
            acts[static_cast<std::size_t>(m)] =
                bundle.net.encoders[static_cast<std::size_t>(m)].forward_all(
                    inputs[static_cast<std::size_t>(m)]);
            feats.push_back(acts[static_cast<std::size_t>(m)].back());
          }
          Tensor total = task_loss(bundle.net.head.logits(feats), labels);
          task_value = total.item();
          if (!bundle.decouplers.empty()) {
            const auto protos = loss_prototypes(bundle, cfg);
            const Tensor pdm = decoupler_loss(bundle, inputs, labels, protos, acts, cfg);
            pdm_value = pdm.item();
            total = add(total, pdm);
          }
          if (cfg.mode == TrainMode::aim_label) {
            // warm the per-depth heads on detached features from the start
            Tensor head_loss;
            bool first = true;
            for (int m = 0; m < M; ++m) {
              for (int d = 0; d < D; ++d) {
                const Tensor feat =
                    stop_gradient(acts[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]);
                const Tensor l = task_loss(
                    bundle.label_heads[static_cast<std::size_t>(m)][static_cast<std::size_t>(d)]
                        .forward(feat),
                    labels);
                head_loss = first ? l : add(head_loss, l);
                first = false;
              }
            }
            total = add(total, head_loss);
          }
          g.backward(total);
          sgd_step(opt_main, main_params);
        }

        {  // root co-update: combined objective + estimator prototype tracking
          Graph g;
          Graph::Activate scope(g);
          g.backward(root_objective(bundle, observed_acts, labels));
          sgd_step(opt_roots, bundle.bank.roots);
        }

        accum.absorb(rec, task_value, pdm_value);
      }

      // ---- end of epoch: evaluation + logging --------------------------------
      propagate(bundle.bank, bundle.net);
      EpochMetrics em;
      em.epoch = epoch;
      {
        std::vector<Tensor> train_inputs, test_inputs;
        for (int m = 0; m < M; ++m) {
          train_inputs.push_back(train_set.modality_matrix(m));
          test_inputs.push_back(test_set.modality_matrix(m));
        }
        em.train_acc = multimodal_accuracy(bundle.net, train_inputs, train_set.labels);
        em.test_acc = multimodal_accuracy(bundle.net, test_inputs, test_set.labels);
        for (int m = 0; m < M; ++m) {
          em.probe_acc.push_back(unimodal_probe_accuracy(
              bundle.net.encoders[static_cast<std::size_t>(m)], bundle.bank, m,
              test_inputs[static_cast<std::size_t>(m)], test_set.labels));
        }
      }
      em.s = rec.s;
      em.s_aux = rec.s_aux;
      em.s_hat.resize(static_cast<std::size_t>(D));
      em.alpha.resize(static_cast<std::size_t>(D));
      for (int d = 0; d < D; ++d) {
        em.s_hat[static_cast<std::size_t>(d)] = modality_weights(rec, d);
        em.alpha[static_cast<std::size_t>(d)] = imbalance_level(rec, d);
      }
      const double bn = std::max(1, accum.batches);
      em.loss_task = accum.task / bn;
      em.loss_pdm = accum.pdm / bn;
      em.loss_mod = accum.mod / bn;
      em.loss_block = accum.block;
      em.loss_aux = accum.aux;
      em.loss_depth = accum.depth;
      for (auto& row : em.loss_block) {
        for (double& v : row) v /= bn;
      }
      for (auto& row : em.loss_aux) {
        for (double& v : row) v /= bn;
      }
      for (double& v : em.loss_depth) v /= bn;
      em.masks = collect_mask_stats(bundle);
      result.history.push_back(std::move(em));

      save_checkpoint({bundle.net, bundle.bank.roots}, result.checkpoint_path);
      have_checkpoint = true;
      if ((cfg.gram_every > 0 && epoch % cfg.gram_every == 0) || epoch == cfg.total_epochs - 1) {
        export_grams(bundle.bank, result.out_dir, epoch);
      }
      result.epoch_seconds.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - e_start).count());
    }
  } catch (const NumericError& e) {
    throw Error("train: aborted at epoch " + std::to_string(epoch) + ", batch " +
                std::to_string(batch_index) + ": " + e.what() +
                (have_checkpoint ? "; last good checkpoint: " + result.checkpoint_path
                                 : "; no checkpoint written yet"));
  }

  const EpochMetrics& last = result.history.back();
  result.final_train_acc = last.train_acc;
  result.final_test_acc = last.test_acc;
  result.final_probe_acc = last.probe_acc;
  result.final_alpha = last.alpha;
  result.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  export_metrics(result, result.out_dir);
  return result;
}

// ---- export -----------------------------------------------------------------

void export_metrics(const TrainResult& result, const std::string& dir) {
  fs::create_directories(dir);
  const int D = result.config.depth;
  const int M = static_cast<int>(result.history.front().probe_acc.size());

  const std::string csv_path = dir + "/metrics.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("export_metrics: cannot write " + csv_path);

  csv << "epoch,train_acc,test_acc";
  for (int m = 0; m < M; ++m) csv << ",probe_acc_m" << m;
  auto dm_header = [&](const std::string& stem) {
    for (int d = 1; d <= D; ++d) {
      for (int m = 0; m < M; ++m) csv << "," << stem << "_d" << d << "_m" << m;
    }
  };
  dm_header("s");
  dm_header("s_aux");
  dm_header("s_hat");
  for (int d = 1; d <= D; ++d) csv << ",alpha_d" << d;
  dm_header("L_block");
  dm_header("L_aux");
  for (int d = 1; d <= D; ++d) csv << ",L_depth_d" << d;
  csv << ",L_mod,L_task,L_pdm";
  const auto& mask_shape = result.history.front().masks;
  for (std::size_t m = 0; m < mask_shape.size(); ++m) {
    for (std::size_t d = 0; d < mask_shape[m].size(); ++d) {
      for (std::size_t l = 0; l < mask_shape[m][d].size(); ++l) {
        csv << ",mask_mean_m" << m << "_d" << d + 1 << "_l" << l << ",mask_min_m" << m << "_d"
            << d + 1 << "_l" << l << ",mask_max_m" << m << "_d" << d + 1 << "_l" << l;
      }
    }
  }
  csv << "\n";

  for (const EpochMetrics& em : result.history) {
    csv << em.epoch << "," << format_double(em.train_acc) << "," << format_double(em.test_acc);
    for (double v : em.probe_acc) csv << "," << format_double(v);
    auto dm_row = [&](const std::vector<std::vector<double>>& grid) {
      for (int d = 0; d < D; ++d) {
        for (int m = 0; m < M; ++m) {
          csv << "," << format_double(grid[static_cast<std::size_t>(d)][static_cast<std::size_t>(m)]);
        }
      }
    };
    dm_row(em.s);
    dm_row(em.s_aux);
    dm_row(em.s_hat);
    for (double v : em.alpha) csv << "," << format_double(v);
    dm_row(em.loss_block);
    dm_row(em.loss_aux);
    for (double v : em.loss_depth) csv << "," << format_double(v);
    csv << "," << format_double(em.loss_mod) << "," << format_double(em.loss_task) << ","
        << format_double(em.loss_pdm);
    for (const auto& per_d : em.masks) {
      for (const auto& per_l : per_d) {
        for (const MaskStat& st : per_l) {
          csv << "," << format_double(st.mean) << "," << format_double(st.min) << ","
              << format_double(st.max);
        }
      }
    }
    csv << "\n";
  }
  if (!csv) throw IoError("export_metrics: write failed for " + csv_path);

  const ExperimentConfig& cfg = result.config;
  json j;
  j["config"] = {
      {"mode", to_string(cfg.mode)},
      {"fusion", to_string(cfg.fusion)},
      {"metric", to_string(cfg.metric)},
      {"E", cfg.modulation_start},
      {"E_T", cfg.total_epochs},
      {"batch_size", cfg.batch_size},
      {"lr", cfg.lr},
      {"lr_roots", cfg.lr_roots},
      {"momentum", cfg.momentum},
      {"ema_momentum", cfg.ema_momentum},
      {"latent_dim", cfg.latent_dim},
      {"hidden_dim", cfg.hidden_dim},
      {"depth", cfg.depth},
      {"dataset", cfg.dataset},
      {"seed", cfg.seed},
      {"lambda_task", cfg.lambda_task},
      {"out_dir", cfg.out_dir},
      {"name", cfg.run_name()},
      {"pdm_in_phase2", cfg.pdm_in_phase2},
      {"pdm_train_backbone", cfg.pdm_train_backbone},
      {"detach_block_inputs", cfg.detach_block_inputs},
      {"detach_protos", cfg.detach_protos},
      {"aux_detach_decoupler", cfg.aux_detach_decoupler},
      {"zero_block_weight_modality", cfg.zero_block_weight_modality},
      {"gram_every", cfg.gram_every},
  };
  j["final"] = {
      {"train_acc", result.final_train_acc},
      {"test_acc", result.final_test_acc},
      {"probe_acc", result.final_probe_acc},
      {"alpha", result.final_alpha},
  };
  j["timing"] = {
      {"total_seconds", result.total_seconds},
      {"epoch_seconds", result.epoch_seconds},
  };
  j["modulated_steps"] = result.modulated_steps;
  const std::string json_path = dir + "/summary.json";
  std::ofstream js(json_path);
  if (!js) throw IoError("export_metrics: cannot write " + json_path);
  js << j.dump(2) << "\n";
}

// ---- suite ------------------------------------------------------------------

namespace {

void mean_std(const std::vector<double>& xs, double& mean, double& stdev) {
  mean = 0.0;
  stdev = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  for (double x : xs) stdev += (x - mean) * (x - mean);
  stdev = std::sqrt(stdev / static_cast<double>(xs.size()));
}

}  // namespace

SuiteResult run_suite(const std::vector<ExperimentConfig>& configs, const std::string& out_root,
                      int jobs) {
  if (configs.empty()) throw ValueError("run_suite: no configs given");
  const std::string root = resolve_out_dir(out_root);
  fs::create_directories(root);

  std::vector<ExperimentConfig> prepared = configs;
  for (std::size_t i = 0; i < prepared.size(); ++i) {
    prepared[i].out_dir = root + "/r" + std::to_string(i) + "_" + prepared[i].run_name();
  }

  SuiteResult suite;
  suite.runs.resize(prepared.size());
  suite.errors.assign(prepared.size(), "");
  std::vector<char> ok(prepared.size(), 0);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= prepared.size()) return;
      try {
        suite.runs[i] = train(prepared[i]);
        ok[i] = 1;
      } catch (const std::exception& e) {
        suite.errors[i] = e.what();
      }
    }
  };
  const int thread_count =
      std::max(1, std::min<int>(jobs, static_cast<int>(prepared.size())));
  if (thread_count == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(thread_count));
    for (int t = 0; t < thread_count; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }

  // aggregate per mode, first-seen config order
  std::vector<std::string> mode_order;
  for (const ExperimentConfig& c : prepared) {
    const std::string mode = to_string(c.mode);
    bool seen = false;
    for (const std::string& s : mode_order) seen = seen || s == mode;
    if (!seen) mode_order.push_back(mode);
  }
  for (const std::string& mode : mode_order) {
    SuiteRow row;
    row.mode = mode;
    std::vector<double> test_accs, train_accs, alphas;
    std::vector<std::vector<double>> probes;
    for (std::size_t i = 0; i < prepared.size(); ++i) {
      if (to_string(prepared[i].mode) != mode) continue;
      ++row.runs;
      if (!ok[i]) {
        ++row.failures;
        continue;
      }
      const TrainResult& r = suite.runs[i];
      test_accs.push_back(r.final_test_acc);
      train_accs.push_back(r.final_train_acc);
      double am = 0.0;
      for (double a : r.final_alpha) am += a;
      alphas.push_back(am / static_cast<double>(r.final_alpha.size()));
      if (probes.size() < r.final_probe_acc.size()) probes.resize(r.final_probe_acc.size());
      for (std::size_t m = 0; m < r.final_probe_acc.size(); ++m) {
        probes[m].push_back(r.final_probe_acc[m]);
      }
    }
    mean_std(test_accs, row.test_acc_mean, row.test_acc_std);
    mean_std(train_accs, row.train_acc_mean, row.train_acc_std);
    mean_std(alphas, row.alpha_mean, row.alpha_std);
    row.probe_mean.resize(probes.size());
    row.probe_std.resize(probes.size());
    for (std::size_t m = 0; m < probes.size(); ++m) {
      mean_std(probes[m], row.probe_mean[m], row.probe_std[m]);
    }
    suite.rows.push_back(std::move(row));
  }

  suite.csv_path = root + "/suite.csv";
  std::ofstream csv(suite.csv_path);
  if (!csv) throw IoError("run_suite: cannot write " + suite.csv_path);
  std::size_t max_m = 0;
  for (const SuiteRow& row : suite.rows) max_m = std::max(max_m, row.probe_mean.size());
  csv << "mode,runs,failures,test_acc_mean,test_acc_std,train_acc_mean,train_acc_std";
  for (std::size_t m = 0; m < max_m; ++m) csv << ",probe_m" << m << "_mean,probe_m" << m << "_std";
  csv << ",final_alpha_mean,final_alpha_std\n";
  for (const SuiteRow& row : suite.rows) {
    csv << row.mode << "," << row.runs << "," << row.failures << ","
        << format_double(row.test_acc_mean) << "," << format_double(row.test_acc_std) << ","
        << format_double(row.train_acc_mean) << "," << format_double(row.train_acc_std);
    for (std::size_t m = 0; m < max_m; ++m) {
      const double pm = m < row.probe_mean.size() ? row.probe_mean[m] : 0.0;
      const double ps = m < row.probe_std.size() ? row.probe_std[m] : 0.0;
      csv << "," << format_double(pm) << "," << format_double(ps);
    }
    csv << "," << format_double(row.alpha_mean) << "," << format_double(row.alpha_std) << "\n";
  }
  return suite;
}

}  // namespace aim

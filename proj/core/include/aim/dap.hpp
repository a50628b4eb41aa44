#pragma once

#include <string>
#include <vector>

#include "aim/net.hpp"
#include "aim/optim.hpp"
#include "aim/tensor.hpp"

namespace aim {

/// Learnable root prototypes per modality plus their depth-propagated
/// images. depth[m][d-1] holds P_d for modality m: the image of the roots
/// under encoder blocks 1..d at the current parameters. Roots are the only
/// learnable part; propagated tensors are detached snapshots.
struct PrototypeBank {
  int num_classes = 0;
  std::vector<Tensor> roots;                // per m: [K, in_dim_m], learnable
  std::vector<std::vector<Tensor>> depth;   // [m][d-1]: [K, dim_d]
};

/// Roots drawn from a unit Gaussian scaled by 1/sqrt(in_dim).
PrototypeBank make_prototype_bank(const MultimodalNet& net, Rng rng);

/// Refresh every P_d from the current roots and encoder parameters.
/// Call again whenever either changes.
void propagate(PrototypeBank& bank, const MultimodalNet& net);

/// Cross entropy of the whole (frozen) framework applied to the roots
/// against the class set 0..K-1; gradients reach only the roots.
Tensor dap_task_loss(const PrototypeBank& bank, const MultimodalNet& net);

/// (1/M) sum_m || cosine_gram(P_D^m) - I ||_F^2, built through the frozen
/// encoders so gradients reach only the roots.
Tensor dap_orth_loss(const PrototypeBank& bank, const MultimodalNet& net);

Tensor dap_objective(const PrototypeBank& bank, const MultimodalNet& net);

struct RootOptimResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Minimize the combined objective over the roots for a fixed framework.
/// Propagates the bank when done. Throws NumericError on divergence.
RootOptimResult optimize_roots(PrototypeBank& bank, const MultimodalNet& net, int steps,
                               SgdState& opt);

/// Cosine gram of the stored P_d^m (d in 1..D).
Tensor orthogonality_gram(const PrototypeBank& bank, int m, int d);

double mean_abs_offdiag(const Tensor& gram);

/// One K x K CSV per (modality, depth): gram_m{m}_d{d}_epoch{e}.csv
void export_grams(const PrototypeBank& bank, const std::string& dir, int epoch);

/// Nearest-prototype classification of modality m's depth-D features;
/// ties resolve toward the lowest class index.
double unimodal_probe_accuracy(const EncoderStack& encoder, const PrototypeBank& bank, int m,
                               const Tensor& x, const std::vector<int>& labels);

}  // namespace aim

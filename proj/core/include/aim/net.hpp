#pragma once

#include <string>
#include <vector>

#include "aim/common.hpp"
#include "aim/tensor.hpp"

namespace aim {

enum class Activation { relu, none };

struct LayerSpec {
  int in_dim;
  int out_dim;
  Activation activation;
};

struct DenseLayer {
  LayerSpec spec;
  Tensor weight;  // [in_dim, out_dim]
  Tensor bias;    // [out_dim]

  static DenseLayer init(LayerSpec spec, Rng& rng);
  /// y = act(x W + b). frozen detaches the parameters so no gradient
  /// reaches them through this call.
  Tensor forward(const Tensor& x, bool frozen = false) const;
  std::int64_t param_count() const;
};

/// One of the D sequential segments of a unimodal encoder. Auxiliary
/// blocks reuse this type with decoder-produced, graph-linked parameters.
struct Block {
  std::vector<DenseLayer> layers;

  Tensor forward(const Tensor& x, bool frozen = false) const;
  int in_dim() const { return layers.front().spec.in_dim; }
  int out_dim() const { return layers.back().spec.out_dim; }
};

struct EncoderStack {
  int modality = 0;
  std::vector<Block> blocks;  // depth 1..D in order

  /// All block outputs [h_1 .. h_D]; h_{d-1} is the input of block d and
  /// h_0 = x.
  std::vector<Tensor> forward_all(const Tensor& x, bool frozen = false) const;
  Tensor forward_to(const Tensor& x, int depth, bool frozen = false) const;
  int depth() const { return static_cast<int>(blocks.size()); }
};

enum class FusionKind { concatenation, summation, film, gated };

FusionKind fusion_from_string(const std::string& s);
std::string to_string(FusionKind kind);

/// Fusion + classifier. film and gated fold modalities pairwise from the
/// left; with two modalities this reduces to the usual formulations.
struct FusionHead {
  FusionKind kind = FusionKind::concatenation;
  std::vector<DenseLayer> film_gamma;  // M-1 maps, feature -> feature
  std::vector<DenseLayer> film_beta;
  std::vector<DenseLayer> gate;  // M-1 maps, 2*feature -> feature
  DenseLayer classifier;         // fused dim -> K

  Tensor fuse(const std::vector<Tensor>& feats, bool frozen = false) const;
  Tensor logits(const std::vector<Tensor>& feats, bool frozen = false) const;
};

struct MultimodalNet {
  int num_modalities = 0;
  int depth = 0;
  int num_classes = 0;
  std::vector<int> input_dims;
  int hidden_dim = 0;
  std::vector<EncoderStack> encoders;
  FusionHead head;

  Tensor forward(const std::vector<Tensor>& inputs, bool frozen = false) const;
  std::vector<Tensor> parameters() const;
};

/// MLP backbone: D blocks of one dense+relu layer each per modality.
MultimodalNet make_mlp_net(int num_modalities, const std::vector<int>& input_dims, int depth,
                           int hidden_dim, int num_classes, FusionKind fusion, Rng rng);

/// Mean cross entropy of softmax(logits) against integer labels.
Tensor task_loss(const Tensor& logits, const std::vector<int>& labels);

/// Argmax with ties resolved toward the lowest class index.
int argmax_row(std::span<const double> row);
double multimodal_accuracy(const MultimodalNet& net, const std::vector<Tensor>& inputs,
                           const std::vector<int>& labels);

// ---- checkpoint io ----------------------------------------------------------
// Text container, one tensor per line, values as shortest round-trip
// decimals so save -> load reproduces every bit. Grammar documented in the
// README.

struct Checkpoint {
  MultimodalNet net;
  std::vector<Tensor> prototype_roots;  // one [K, in_dim_m] tensor per modality
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace aim

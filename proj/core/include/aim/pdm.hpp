#pragma once

#include <vector>

#include "aim/net.hpp"
#include "aim/tensor.hpp"

namespace aim {

/// Per-layer latent encoder, mask net and decoder. The decoder instance is
/// shared by the selected branch, the complementary branch and the
/// reconstruction term.
struct LayerDecoupler {
  DenseLayer enc;   // param_count -> latent
  DenseLayer mask;  // latent -> latent
  DenseLayer dec;   // latent -> param_count
};

struct Decoupler {
  int latent_dim = 0;
  std::vector<LayerDecoupler> layers;  // one per layer of the source block

  /// Weights Gaussian 1/sqrt(fan_in); mask-net bias zero so the split
  /// starts centered.
  static Decoupler init(const Block& block, int latent_dim, Rng& rng);
  std::vector<Tensor> parameters() const;
};

/// Layer parameters as one row vector: weights row-major, then bias.
/// Differentiable; the inverse (slice + reshape) is exact.
Tensor flatten_layer_params(const DenseLayer& layer);

struct DecoupleOptions {
  bool detach_source = false;     // cut the gradient path into the source block
  bool with_recon = false;        // also decode the unmasked latent
  bool freeze_decoupler = false;  // cut the gradient path into enc/mask/dec
};

struct DecoupleResult {
  Block aux;   // selected-branch parameters, block-shaped
  Block comp;  // complementary-branch parameters
  std::vector<Tensor> masks;      // per layer [1, latent]
  std::vector<Tensor> theta;      // per layer [1, p] flattened source
  std::vector<Tensor> theta_lat;  // per layer [1, latent]
  std::vector<Tensor> recon;      // per layer [1, p] when requested
};

/// Split a block's parameters in latent space:
///   theta_lat = enc(theta); w = sigmoid(mask(theta_lat));
///   aux  <- dec(theta_lat * w); comp <- dec(theta_lat * (1-w)).
/// Everything stays on the tape, so backward reaches the source block (unless
/// detached) and all decoupler parameters. Deterministic and pure.
DecoupleResult decouple(const Decoupler& dec, const Block& block, DecoupleOptions opts = {});

/// Mean distance-softmax cross entropy of outputs against per-class
/// prototypes. Distances are clipped into [0, 50] before exponentiation.
Tensor prototype_ce(const Tensor& outputs, const Tensor& protos, const std::vector<int>& labels);

/// Complementary-branch loss plus reconstruction:
///   L = prototype_ce(comp(inputs)) + sum_l ||theta_l - dec(theta_lat_l)||_F^2.
/// With detach_source (default) the source block parameters receive no
/// gradient from this loss; it trains the decoupler only.
Tensor pdm_loss(const Decoupler& dec, const Block& block, const Tensor& inputs,
                const std::vector<int>& labels, const Tensor& protos, bool detach_source = true);

/// Batch mean of the true-class probability of the distance softmax,
/// strictly inside (0,1). Values-only (never recorded on a tape).
double block_performance(const Block& block, const Tensor& inputs, const std::vector<int>& labels,
                         const Tensor& protos);

/// Same statistic from already-computed block outputs.
double performance_value(const Tensor& outputs, const std::vector<int>& labels,
                         const Tensor& protos);

}  // namespace aim

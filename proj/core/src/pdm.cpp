#include "aim/pdm.hpp"

#include <cmath>

namespace aim {

namespace {
constexpr double kDistanceClip = 50.0;
}

Decoupler Decoupler::init(const Block& block, int latent_dim, Rng& rng) {
  if (latent_dim <= 0) throw ValueError("decoupler: latent_dim must be positive");
  Decoupler dec;
  dec.latent_dim = latent_dim;
  for (const DenseLayer& layer : block.layers) {
    const int p = static_cast<int>(layer.param_count());
    LayerDecoupler ld;
    ld.enc = DenseLayer::init({p, latent_dim, Activation::none}, rng);
    ld.mask = DenseLayer::init({latent_dim, latent_dim, Activation::none}, rng);
    // unbiased split at the start of training
    for (double& v : ld.mask.bias.values_mut()) v = 0.0;
    ld.dec = DenseLayer::init({latent_dim, p, Activation::none}, rng);
    dec.layers.push_back(std::move(ld));
  }
  return dec;
}

std::vector<Tensor> Decoupler::parameters() const {
  std::vector<Tensor> params;
  for (const LayerDecoupler& ld : layers) {
    params.push_back(ld.enc.weight);
    params.push_back(ld.enc.bias);
    params.push_back(ld.mask.weight);
    params.push_back(ld.mask.bias);
    params.push_back(ld.dec.weight);
    params.push_back(ld.dec.bias);
  }
  return params;
}

Tensor flatten_layer_params(const DenseLayer& layer) {
  const int wn = layer.spec.in_dim * layer.spec.out_dim;
  return concat_cols({reshape(layer.weight, {1, wn}), reshape(layer.bias, {1, layer.spec.out_dim})});
}

namespace {

DenseLayer load_layer(const LayerSpec& spec, const Tensor& flat) {
  const int wn = spec.in_dim * spec.out_dim;
  DenseLayer layer;
  layer.spec = spec;
  layer.weight = reshape(slice(flat, 0, wn), {spec.in_dim, spec.out_dim});
  layer.bias = slice(flat, wn, wn + spec.out_dim);
  return layer;
}

}  // namespace

DecoupleResult decouple(const Decoupler& dec, const Block& block, DecoupleOptions opts) {
  if (dec.layers.size() != block.layers.size()) {
    throw ShapeError("decouple: decoupler has " + std::to_string(dec.layers.size()) +
                     " layer units for a block with " + std::to_string(block.layers.size()) +
                     " layers");
  }
  DecoupleResult result;
  const Tensor one = Tensor::scalar(1.0);
  for (std::size_t l = 0; l < block.layers.size(); ++l) {
    const DenseLayer& src = block.layers[l];
    const LayerDecoupler& ld = dec.layers[l];
    if (ld.enc.spec.in_dim != src.param_count()) {
      throw ShapeError("decouple: layer " + std::to_string(l) + " expects " +
                       std::to_string(ld.enc.spec.in_dim) + " parameters, block layer has " +
                       std::to_string(src.param_count()));
    }
    Tensor theta = flatten_layer_params(src);
    if (opts.detach_source) theta = stop_gradient(theta);
    const bool fz = opts.freeze_decoupler;
    const Tensor theta_lat = ld.enc.forward(theta, fz);
    const Tensor w = sigmoid(ld.mask.forward(theta_lat, fz));
    const Tensor theta_b = ld.dec.forward(elementwise_mul(theta_lat, w), fz);
    const Tensor theta_g = ld.dec.forward(elementwise_mul(theta_lat, sub(one, w)), fz);
    result.aux.layers.push_back(load_layer(src.spec, theta_b));
    result.comp.layers.push_back(load_layer(src.spec, theta_g));
    result.masks.push_back(w);
    result.theta.push_back(theta);
    result.theta_lat.push_back(theta_lat);
    if (opts.with_recon) result.recon.push_back(ld.dec.forward(theta_lat, fz));
  }
  return result;
}

Tensor prototype_ce(const Tensor& outputs, const Tensor& protos, const std::vector<int>& labels) {
  return mean(distance_ce(clip(row_distance(outputs, protos), 0.0, kDistanceClip), labels));
}

Tensor pdm_loss(const Decoupler& dec, const Block& block, const Tensor& inputs,
                const std::vector<int>& labels, const Tensor& protos, bool detach_source) {
  DecoupleResult r = decouple(dec, block, {.detach_source = detach_source, .with_recon = true});
  Tensor loss = prototype_ce(r.comp.forward(inputs), protos, labels);
  for (std::size_t l = 0; l < r.theta.size(); ++l) {
    loss = add(loss, frobenius_sq(sub(r.theta[l], r.recon[l])));
  }
  return loss;
}

double block_performance(const Block& block, const Tensor& inputs, const std::vector<int>& labels,
                         const Tensor& protos) {
  Graph::Pause pause;
  return performance_value(block.forward(inputs), labels, protos);
}

double performance_value(const Tensor& outputs, const std::vector<int>& labels,
                         const Tensor& protos) {
  Graph::Pause pause;
  const Tensor dist = clip(row_distance(outputs, protos), 0.0, kDistanceClip);
  const int n = dist.shape()[0], k = dist.shape()[1];
  const double* dv = dist.values().data();
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = dv + static_cast<std::size_t>(i) * k;
    double mn = row[0];
    for (int j = 1; j < k; ++j) mn = std::min(mn, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(mn - row[j]);
    acc += std::exp(mn - row[labels[static_cast<std::size_t>(i)]]) / s;
  }
  return acc / static_cast<double>(n);
}

}  // namespace aim

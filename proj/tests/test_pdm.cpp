#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "aim/pdm.hpp"
#include "aim/optim.hpp"
#include "test_util.hpp"

using namespace aim;
using aim::testutil::fd_max_rel_error;
using aim::testutil::random_param;

namespace {

Block random_block(int in, int out, Rng& rng, Activation act = Activation::relu) {
  Block b;
  b.layers.push_back(DenseLayer::init({in, out, act}, rng));
  return b;
}

void zero_fill(Tensor t) {
  for (double& v : t.values_mut()) v = 0.0;
}

}  // namespace

TEST_CASE("flatten_layer_params: declared order, counting, exact inverse") {
  DenseLayer l;
  l.spec = {2, 2, Activation::none};
  l.weight = Tensor::param({2, 2}, {1.5, -2.25, 3.0, 4.125});
  l.bias = Tensor::param({2}, {5.5, -6.75});
  const Tensor flat = flatten_layer_params(l);
  REQUIRE(flat.shape() == Shape{1, 6});
  const double expect[6] = {1.5, -2.25, 3.0, 4.125, 5.5, -6.75};
  for (int i = 0; i < 6; ++i) CHECK(flat.at(i) == expect[i]);

  // round trip through slice + reshape is bitwise exact
  const Tensor w_back = reshape(slice(flat, 0, 4), {2, 2});
  const Tensor b_back = slice(flat, 4, 6);
  for (int i = 0; i < 4; ++i) CHECK(w_back.at(i) == l.weight.at(i));
  for (int i = 0; i < 2; ++i) CHECK(b_back.at(i) == l.bias.at(i));

  DenseLayer wide;
  wide.spec = {2, 3, Activation::none};
  Rng rng(1);
  wide.weight = random_param({2, 3}, rng);
  wide.bias = random_param({3}, rng);
  CHECK(flatten_layer_params(wide).size() == 9);
}

TEST_CASE("decouple: zero mask net splits both branches identically") {
  Rng rng(2);
  Block block = random_block(3, 3, rng);
  Decoupler dec = Decoupler::init(block, 4, rng);
  zero_fill(dec.layers[0].mask.weight);
  zero_fill(dec.layers[0].mask.bias);
  const DecoupleResult r = decouple(dec, block);
  for (double w : r.masks[0].values()) CHECK(w == 0.5);
  const Tensor& aux_w = r.aux.layers[0].weight;
  const Tensor& comp_w = r.comp.layers[0].weight;
  for (std::int64_t i = 0; i < aux_w.size(); ++i) CHECK(aux_w.at(i) == comp_w.at(i));
  for (std::int64_t i = 0; i < 3; ++i) CHECK(r.aux.layers[0].bias.at(i) == r.comp.layers[0].bias.at(i));
}

TEST_CASE("decouple: saturated mask routes everything to the selected branch") {
  Rng rng(3);
  Block block = random_block(3, 3, rng);
  Decoupler dec = Decoupler::init(block, 4, rng);
  zero_fill(dec.layers[0].mask.weight);
  for (double& v : dec.layers[0].mask.bias.values_mut()) v = 20.0;
  const DecoupleResult r = decouple(dec, block, {.with_recon = true});
  // selected branch ~= decoded latent; complementary ~= decoded zero (dec bias)
  const Tensor full = flatten_layer_params(r.aux.layers[0]);
  const Tensor recon = r.recon[0];
  for (std::int64_t i = 0; i < full.size(); ++i) {
    CHECK(std::abs(full.at(i) - recon.at(i)) <= 1e-6);
  }
  const Tensor comp_flat = flatten_layer_params(r.comp.layers[0]);
  const Tensor& dec_bias = dec.layers[0].dec.bias;
  for (std::int64_t i = 0; i < comp_flat.size(); ++i) {
    CHECK(std::abs(comp_flat.at(i) - dec_bias.at(i)) <= 1e-6);
  }
}

TEST_CASE("decouple: scalar-by-scalar re-implementation oracle on a 9-parameter layer") {
  Rng rng(4);
  Block block = random_block(2, 3, rng);  // 6 weights + 3 biases
  Decoupler dec = Decoupler::init(block, 5, rng);
  const DecoupleResult r = decouple(dec, block);

  // flatten by hand
  std::vector<double> theta;
  for (double v : block.layers[0].weight.values()) theta.push_back(v);
  for (double v : block.layers[0].bias.values()) theta.push_back(v);
  REQUIRE(theta.size() == 9);

  const LayerDecoupler& ld = dec.layers[0];
  auto dense = [](const std::vector<double>& x, const Tensor& w, const Tensor& b) {
    const int in = w.shape()[0], out = w.shape()[1];
    std::vector<double> y(static_cast<std::size_t>(out), 0.0);
    for (int j = 0; j < out; ++j) {
      double s = b.at(j);
      for (int i = 0; i < in; ++i) s += x[static_cast<std::size_t>(i)] * w.at(i, j);
      y[static_cast<std::size_t>(j)] = s;
    }
    return y;
  };
  const std::vector<double> lat = dense(theta, ld.enc.weight, ld.enc.bias);
  std::vector<double> mask = dense(lat, ld.mask.weight, ld.mask.bias);
  for (double& v : mask) v = 1.0 / (1.0 + std::exp(-v));
  std::vector<double> lat_b(lat.size()), lat_g(lat.size());
  for (std::size_t i = 0; i < lat.size(); ++i) {
    lat_b[i] = lat[i] * mask[i];
    lat_g[i] = lat[i] * (1.0 - mask[i]);
  }
  const std::vector<double> theta_b = dense(lat_b, ld.dec.weight, ld.dec.bias);
  const std::vector<double> theta_g = dense(lat_g, ld.dec.weight, ld.dec.bias);

  const Tensor got_b = flatten_layer_params(r.aux.layers[0]);
  const Tensor got_g = flatten_layer_params(r.comp.layers[0]);
  for (int i = 0; i < 9; ++i) {
    CHECK(got_b.at(i) + got_g.at(i) ==
          doctest::Approx(theta_b[static_cast<std::size_t>(i)] +
                          theta_g[static_cast<std::size_t>(i)])
              .epsilon(1e-12));
    CHECK(got_b.at(i) == doctest::Approx(theta_b[static_cast<std::size_t>(i)]).epsilon(1e-12));
    CHECK(got_g.at(i) == doctest::Approx(theta_g[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("decouple is pure: two calls produce bit-identical branches") {
  Rng rng(5);
  Block block = random_block(4, 4, rng);
  Decoupler dec = Decoupler::init(block, 6, rng);
  const DecoupleResult a = decouple(dec, block);
  const DecoupleResult b = decouple(dec, block);
  const Tensor fa = flatten_layer_params(a.aux.layers[0]);
  const Tensor fb = flatten_layer_params(b.aux.layers[0]);
  CHECK(std::memcmp(fa.values().data(), fb.values().data(),
                    static_cast<std::size_t>(fa.size()) * sizeof(double)) == 0);
  const Tensor ga = flatten_layer_params(a.comp.layers[0]);
  const Tensor gb = flatten_layer_params(b.comp.layers[0]);
  CHECK(std::memcmp(ga.values().data(), gb.values().data(),
                    static_cast<std::size_t>(ga.size()) * sizeof(double)) == 0);
}

TEST_CASE("pdm_loss: rigged inverse encoder/decoder zeroes the reconstruction term") {
  // latent dim == parameter count, identity maps
  Block block;
  DenseLayer l;
  l.spec = {1, 2, Activation::none};
  l.weight = Tensor::param({1, 2}, {0.3, -0.7});
  l.bias = Tensor::param({2}, {0.1, 0.4});
  block.layers.push_back(l);
  const int p = 4;

  Decoupler dec;
  dec.latent_dim = p;
  LayerDecoupler ld;
  std::vector<double> eye(p * p, 0.0);
  for (int i = 0; i < p; ++i) eye[static_cast<std::size_t>(i) * p + i] = 1.0;
  ld.enc.spec = {p, p, Activation::none};
  ld.enc.weight = Tensor::param({p, p}, eye);
  ld.enc.bias = Tensor::param({p}, std::vector<double>(p, 0.0));
  Rng rng(6);
  ld.mask.spec = {p, p, Activation::none};
  ld.mask.weight = random_param({p, p}, rng);
  ld.mask.bias = random_param({p}, rng);
  ld.dec.spec = {p, p, Activation::none};
  ld.dec.weight = Tensor::param({p, p}, eye);
  ld.dec.bias = Tensor::param({p}, std::vector<double>(p, 0.0));
  dec.layers.push_back(ld);

  // recon = dec(enc(theta)) = theta exactly, for any mask
  const DecoupleResult r = decouple(dec, block, {.with_recon = true});
  const Tensor diff = sub(r.theta[0], r.recon[0]);
  CHECK(frobenius_sq(diff).item() == 0.0);

  const Tensor inputs = Tensor::matrix({{1.0}, {2.0}});
  const Tensor protos = Tensor::matrix({{0.5, 0.5}, {-0.5, 0.2}, {1.0, -1.0}});
  const std::vector<int> labels{0, 2};
  const double loss = pdm_loss(dec, block, inputs, labels, protos).item();
  // with L_re == 0 the whole loss is the complementary branch's distance CE
  const Tensor comp_out = r.comp.forward(inputs);
  const double lg = mean(distance_ce(clip(row_distance(comp_out, protos), 0.0, 50.0), labels)).item();
  CHECK(loss == doctest::Approx(lg).epsilon(1e-12));
}

TEST_CASE("pdm_loss: matches an independent two-term evaluation") {
  Rng rng(7);
  Block block = random_block(3, 4, rng);
  Decoupler dec = Decoupler::init(block, 5, rng);
  const Tensor inputs = random_param({6, 3}, rng).set_requires_grad(false);
  const Tensor protos = random_param({3, 4}, rng).set_requires_grad(false);
  std::vector<int> labels{0, 1, 2, 0, 1, 2};

  const double loss = pdm_loss(dec, block, inputs, labels, protos).item();

  const DecoupleResult r = decouple(dec, block, {.detach_source = true, .with_recon = true});
  const double lg =
      mean(distance_ce(clip(row_distance(r.comp.forward(inputs), protos), 0.0, 50.0), labels))
          .item();
  const double lre = frobenius_sq(sub(r.theta[0], r.recon[0])).item();
  CHECK(loss == doctest::Approx(lg + lre).epsilon(1e-10));
}

TEST_CASE("pdm_loss gradients: finite differences and the source-detach contract") {
  Rng rng(8);
  Block block = random_block(3, 3, rng);
  Decoupler dec = Decoupler::init(block, 4, rng);
  const Tensor inputs = random_param({4, 3}, rng).set_requires_grad(false);
  const Tensor protos = random_param({3, 3}, rng).set_requires_grad(false);
  const std::vector<int> labels{0, 1, 2, 1};

  auto build = [&]() { return pdm_loss(dec, block, inputs, labels, protos); };
  CHECK(fd_max_rel_error(build, dec.parameters()) <= 1e-4);

  // default: source block parameters receive nothing from this loss
  Tensor bw = block.layers[0].weight;
  bw.ensure_grad();
  bw.zero_grad();
  {
    Graph g;
    Graph::Activate scope(g);
    g.backward(build());
  }
  for (double v : bw.grad()) CHECK(v == 0.0);

  // toggle: gradients reach the source parameters
  bw.zero_grad();
  {
    Graph g;
    Graph::Activate scope(g);
    g.backward(pdm_loss(dec, block, inputs, labels, protos, /*detach_source=*/false));
  }
  double norm = 0.0;
  for (double v : bw.grad()) norm += v * v;
  CHECK(norm > 0.0);
  auto build_live = [&]() { return pdm_loss(dec, block, inputs, labels, protos, false); };
  std::vector<Tensor> with_theta = dec.parameters();
  with_theta.push_back(block.layers[0].weight);
  with_theta.push_back(block.layers[0].bias);
  CHECK(fd_max_rel_error(build_live, with_theta) <= 1e-4);
}

TEST_CASE("block_performance: pinned values and range") {
  SUBCASE("equal distances over six classes") {
    // outputs equidistant from all prototypes: zero output, prototypes on a sphere
    Block ident;
    DenseLayer l;
    l.spec = {2, 2, Activation::none};
    l.weight = Tensor::param({2, 2}, {1, 0, 0, 1});
    l.bias = Tensor::param({2}, {0, 0});
    ident.layers.push_back(l);
    std::vector<double> pv;
    for (int k = 0; k < 6; ++k) {
      const double a = 2.0 * 3.14159265358979 * k / 6.0;
      pv.push_back(std::cos(a));
      pv.push_back(std::sin(a));
    }
    const Tensor protos = Tensor::from({6, 2}, std::move(pv));
    const Tensor inputs = Tensor::matrix({{0.0, 0.0}});
    CHECK(block_performance(ident, inputs, {3}, protos) == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  }
  SUBCASE("on-prototype output with the rest at distance 10") {
    const Tensor out = Tensor::matrix({{0.0}});
    std::vector<double> pv{0.0, 10.0, 10.0, 10.0, 10.0, 10.0};
    const Tensor protos = Tensor::from({6, 1}, std::move(pv));
    const double s = performance_value(out, {0}, protos);
    CHECK(s == doctest::Approx(1.0 / (1.0 + 5.0 * std::exp(-10.0))).epsilon(1e-9));
  }
  SUBCASE("always strictly inside (0,1)") {
    Rng rng(9);
    Block block = random_block(3, 4, rng);
    for (int rep = 0; rep < 10; ++rep) {
      const Tensor inputs = random_param({5, 3}, rng).set_requires_grad(false);
      const Tensor protos = random_param({4, 4}, rng).set_requires_grad(false);
      const double s = block_performance(block, inputs, {0, 1, 2, 3, 0}, protos);
      CHECK(s > 0.0);
      CHECK(s < 1.0);
    }
  }
}

TEST_CASE("gradient routing: the selected-branch loss alone reaches the source parameters") {
  Rng rng(10);
  Block block = random_block(3, 4, rng);
  Decoupler dec = Decoupler::init(block, 5, rng);
  const Tensor inputs = random_param({5, 3}, rng).set_requires_grad(false);
  const Tensor protos = random_param({3, 4}, rng).set_requires_grad(false);
  const std::vector<int> labels{0, 1, 2, 0, 1};

  Tensor bw = block.layers[0].weight;
  Tensor bb = block.layers[0].bias;
  bw.ensure_grad();
  bw.zero_grad();
  bb.ensure_grad();
  bb.zero_grad();
  {
    Graph g;
    Graph::Activate scope(g);
    const DecoupleResult r = decouple(dec, block);
    const Tensor aux_loss = prototype_ce(r.aux.forward(stop_gradient(inputs)), protos, labels);
    g.backward(aux_loss);
  }
  double norm = 0.0;
  for (double v : bw.grad()) norm += v * v;
  for (double v : bb.grad()) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("decoupler/block layer-count mismatch is a shape error") {
  Rng rng(11);
  Block block = random_block(3, 3, rng);
  Block two = block;
  two.layers.push_back(DenseLayer::init({3, 3, Activation::relu}, rng));
  Decoupler dec = Decoupler::init(block, 4, rng);
  CHECK_THROWS_AS(decouple(dec, two), ShapeError);
}

#include "aim/net.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace aim {

DenseLayer DenseLayer::init(LayerSpec spec, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(spec.in_dim) * spec.out_dim);
  // He gain keeps the activation scale stable through relu stacks
  const double gain = spec.activation == Activation::relu ? std::sqrt(2.0) : 1.0;
  const double scale = gain / std::sqrt(static_cast<double>(spec.in_dim));
  for (double& v : w) v = rng.gaussian() * scale;
  // biases drawn from the same scheme; exact-zero biases would park relu
  // units on their kink, where gradient checks are ill-posed
  std::vector<double> b(static_cast<std::size_t>(spec.out_dim));
  for (double& v : b) v = rng.gaussian() * scale;
  DenseLayer layer;
  layer.spec = spec;
  layer.weight = Tensor::param({spec.in_dim, spec.out_dim}, std::move(w));
  layer.bias = Tensor::param({spec.out_dim}, std::move(b));
  return layer;
}

Tensor DenseLayer::forward(const Tensor& x, bool frozen) const {
  const Tensor w = frozen ? stop_gradient(weight) : weight;
  const Tensor b = frozen ? stop_gradient(bias) : bias;
  Tensor y = add_rowwise(matmul(x, w), b);
  if (spec.activation == Activation::relu) y = relu(y);
  return y;
}

std::int64_t DenseLayer::param_count() const {
  return static_cast<std::int64_t>(spec.in_dim) * spec.out_dim + spec.out_dim;
}

Tensor Block::forward(const Tensor& x, bool frozen) const {
  Tensor h = x;
  for (const DenseLayer& layer : layers) h = layer.forward(h, frozen);
  return h;
}

std::vector<Tensor> EncoderStack::forward_all(const Tensor& x, bool frozen) const {
  std::vector<Tensor> acts;
  acts.reserve(blocks.size());
  Tensor h = x;
  for (const Block& b : blocks) {
    h = b.forward(h, frozen);
    acts.push_back(h);
  }
  return acts;
}

Tensor EncoderStack::forward_to(const Tensor& x, int depth_limit, bool frozen) const {
  Tensor h = x;
  for (int d = 0; d < depth_limit; ++d) h = blocks[static_cast<std::size_t>(d)].forward(h, frozen);
  return h;
}

FusionKind fusion_from_string(const std::string& s) {
  if (s == "concatenation") return FusionKind::concatenation;
  if (s == "summation") return FusionKind::summation;
  if (s == "film") return FusionKind::film;
  if (s == "gated") return FusionKind::gated;
  throw ValueError("unknown fusion kind: '" + s + "'");
}

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::concatenation: return "concatenation";
    case FusionKind::summation: return "summation";
    case FusionKind::film: return "film";
    case FusionKind::gated: return "gated";
  }
  return "?";
}

Tensor FusionHead::fuse(const std::vector<Tensor>& feats, bool frozen) const {
  if (feats.size() < 2) throw ShapeError("fuse: need at least 2 modalities");
  switch (kind) {
    case FusionKind::concatenation:
      return concat_cols(feats);
    case FusionKind::summation: {
      Tensor acc = feats[0];
      for (std::size_t m = 1; m < feats.size(); ++m) acc = add(acc, feats[m]);
      return acc;
    }
    case FusionKind::film: {
      Tensor acc = feats[0];
      for (std::size_t m = 1; m < feats.size(); ++m) {
        const Tensor gamma = film_gamma[m - 1].forward(acc, frozen);
        const Tensor beta = film_beta[m - 1].forward(acc, frozen);
        acc = add(elementwise_mul(gamma, feats[m]), beta);
      }
      return acc;
    }
    case FusionKind::gated: {
      Tensor acc = feats[0];
      for (std::size_t m = 1; m < feats.size(); ++m) {
        const Tensor g = sigmoid(gate[m - 1].forward(concat_cols({acc, feats[m]}), frozen));
        const Tensor ones = Tensor::scalar(1.0);
        acc = add(elementwise_mul(g, acc), elementwise_mul(sub(ones, g), feats[m]));
      }
      return acc;
    }
  }
  throw ValueError("fuse: unsupported fusion kind");
}

Tensor FusionHead::logits(const std::vector<Tensor>& feats, bool frozen) const {
  return classifier.forward(fuse(feats, frozen), frozen);
}

Tensor MultimodalNet::forward(const std::vector<Tensor>& inputs, bool frozen) const {
  if (static_cast<int>(inputs.size()) != num_modalities) {
    throw ShapeError("forward: expected " + std::to_string(num_modalities) + " modality inputs");
  }
  std::vector<Tensor> feats;
  feats.reserve(inputs.size());
  for (int m = 0; m < num_modalities; ++m) {
    feats.push_back(encoders[static_cast<std::size_t>(m)].forward_to(
        inputs[static_cast<std::size_t>(m)], depth, frozen));
  }
  return head.logits(feats, frozen);
}

std::vector<Tensor> MultimodalNet::parameters() const {
  std::vector<Tensor> params;
  for (const EncoderStack& enc : encoders) {
    for (const Block& b : enc.blocks) {
      for (const DenseLayer& l : b.layers) {
        params.push_back(l.weight);
        params.push_back(l.bias);
      }
    }
  }
  auto push_layer = [&](const DenseLayer& l) {
    params.push_back(l.weight);
    params.push_back(l.bias);
  };
  for (const DenseLayer& l : head.film_gamma) push_layer(l);
  for (const DenseLayer& l : head.film_beta) push_layer(l);
  for (const DenseLayer& l : head.gate) push_layer(l);
  push_layer(head.classifier);
  return params;
}

MultimodalNet make_mlp_net(int num_modalities, const std::vector<int>& input_dims, int depth,
                           int hidden_dim, int num_classes, FusionKind fusion, Rng rng) {
  if (num_modalities < 2) throw ValueError("net: need at least 2 modalities");
  if (static_cast<int>(input_dims.size()) != num_modalities) {
    throw ShapeError("net: input_dims size does not match modality count");
  }
  MultimodalNet net;
  net.num_modalities = num_modalities;
  net.depth = depth;
  net.num_classes = num_classes;
  net.input_dims = input_dims;
  net.hidden_dim = hidden_dim;
  for (int m = 0; m < num_modalities; ++m) {
    EncoderStack enc;
    enc.modality = m;
    int in = input_dims[static_cast<std::size_t>(m)];
    for (int d = 0; d < depth; ++d) {
      Block b;
      b.layers.push_back(DenseLayer::init({in, hidden_dim, Activation::relu}, rng));
      in = hidden_dim;
      enc.blocks.push_back(std::move(b));
    }
    net.encoders.push_back(std::move(enc));
  }
  net.head.kind = fusion;
  const int feat = hidden_dim;
  if (fusion == FusionKind::film) {
    for (int m = 1; m < num_modalities; ++m) {
      net.head.film_gamma.push_back(DenseLayer::init({feat, feat, Activation::none}, rng));
      net.head.film_beta.push_back(DenseLayer::init({feat, feat, Activation::none}, rng));
    }
  } else if (fusion == FusionKind::gated) {
    for (int m = 1; m < num_modalities; ++m) {
      net.head.gate.push_back(DenseLayer::init({2 * feat, feat, Activation::none}, rng));
    }
  }
  const int fused_dim = fusion == FusionKind::concatenation ? num_modalities * feat : feat;
  net.head.classifier = DenseLayer::init({fused_dim, num_classes, Activation::none}, rng);
  return net;
}

Tensor task_loss(const Tensor& logits, const std::vector<int>& labels) {
  // cross entropy of softmax(logits) equals the negated-distance form
  // evaluated on -logits
  return mean(distance_ce(scalar_mul(logits, -1.0), labels));
}

int argmax_row(std::span<const double> row) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(row.size()); ++j) {
    if (row[static_cast<std::size_t>(j)] > row[static_cast<std::size_t>(best)]) best = j;
  }
  return best;
}

double multimodal_accuracy(const MultimodalNet& net, const std::vector<Tensor>& inputs,
                           const std::vector<int>& labels) {
  if (labels.empty()) throw ValueError("accuracy: empty dataset");
  Graph::Pause pause;
  const Tensor logits = net.forward(inputs);
  const int k = logits.cols();
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto row = logits.values().subspan(i * static_cast<std::size_t>(k), static_cast<std::size_t>(k));
    if (argmax_row(row) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// ---- checkpoint io ----------------------------------------------------------

namespace {

void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  os << "tensor " << name;
  for (int d : t.shape()) os << " " << d;
  os << " :";
  for (double v : t.values()) os << " " << format_double(v);
  os << "\n";
}

Tensor read_tensor(std::istream& is, const std::string& expect_name, bool as_param) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("checkpoint: unexpected end of file");
  std::istringstream ls(line);
  std::string kw, name;
  ls >> kw >> name;
  if (kw != "tensor" || name != expect_name) {
    throw ParseError("checkpoint: expected tensor '" + expect_name + "', got '" + name + "'");
  }
  Shape shape;
  std::string tok;
  while (ls >> tok && tok != ":") shape.push_back(std::stoi(tok));
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(numel(shape)));
  while (ls >> tok) vals.push_back(parse_double(tok));
  if (static_cast<std::int64_t>(vals.size()) != numel(shape)) {
    throw ParseError("checkpoint: tensor '" + expect_name + "' has " +
                     std::to_string(vals.size()) + " values for shape " + shape_str(shape));
  }
  return as_param ? Tensor::param(std::move(shape), std::move(vals))
                  : Tensor::from(std::move(shape), std::move(vals));
}

std::vector<std::pair<std::string, const Tensor*>> named_net_tensors(const MultimodalNet& net) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (int m = 0; m < net.num_modalities; ++m) {
    const EncoderStack& enc = net.encoders[static_cast<std::size_t>(m)];
    for (std::size_t d = 0; d < enc.blocks.size(); ++d) {
      const Block& b = enc.blocks[d];
      for (std::size_t l = 0; l < b.layers.size(); ++l) {
        const std::string base =
            "enc" + std::to_string(m) + ".b" + std::to_string(d + 1) + ".l" + std::to_string(l);
        out.emplace_back(base + ".weight", &b.layers[l].weight);
        out.emplace_back(base + ".bias", &b.layers[l].bias);
      }
    }
  }
  auto add_layers = [&](const std::string& base, const std::vector<DenseLayer>& layers) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      out.emplace_back(base + std::to_string(i) + ".weight", &layers[i].weight);
      out.emplace_back(base + std::to_string(i) + ".bias", &layers[i].bias);
    }
  };
  add_layers("fusion.gamma", net.head.film_gamma);
  add_layers("fusion.beta", net.head.film_beta);
  add_layers("fusion.gate", net.head.gate);
  out.emplace_back("classifier.weight", &net.head.classifier.weight);
  out.emplace_back("classifier.bias", &net.head.classifier.bias);
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("checkpoint: cannot write " + path);
  const MultimodalNet& net = ckpt.net;
  os << "aimckpt v1 M=" << net.num_modalities << " D=" << net.depth << " K=" << net.num_classes
     << " hidden=" << net.hidden_dim << " fusion=" << to_string(net.head.kind) << "\n";
  os << "dims";
  for (int d : net.input_dims) os << " " << d;
  os << "\n";
  for (const auto& [name, t] : named_net_tensors(net)) write_tensor(os, name, *t);
  for (std::size_t m = 0; m < ckpt.prototype_roots.size(); ++m) {
    write_tensor(os, "roots" + std::to_string(m), ckpt.prototype_roots[m]);
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("checkpoint: cannot read " + path);
  std::string line;
  if (!std::getline(is, line)) throw ParseError("checkpoint: empty file");
  std::istringstream hs(line);
  std::string magic, ver;
  hs >> magic >> ver;
  if (magic != "aimckpt" || ver != "v1") {
    throw ParseError("checkpoint: bad header '" + line + "'");
  }
  int M = 0, D = 0, K = 0, hidden = 0;
  std::string fusion_s;
  std::string tok;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw ParseError("checkpoint: bad header field '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    if (key == "M") M = std::stoi(val);
    else if (key == "D") D = std::stoi(val);
    else if (key == "K") K = std::stoi(val);
    else if (key == "hidden") hidden = std::stoi(val);
    else if (key == "fusion") fusion_s = val;
    else throw ParseError("checkpoint: unknown header field '" + key + "'");
  }
  if (!std::getline(is, line)) throw ParseError("checkpoint: missing dims line");
  std::istringstream ds(line);
  ds >> tok;
  if (tok != "dims") throw ParseError("checkpoint: expected dims line, got '" + line + "'");
  std::vector<int> dims;
  int v = 0;
  while (ds >> v) dims.push_back(v);
  if (static_cast<int>(dims.size()) != M) throw ParseError("checkpoint: dims count != M");

  Checkpoint ckpt;
  // structure first, then overwrite every tensor from the file
  ckpt.net = make_mlp_net(M, dims, D, hidden, K, fusion_from_string(fusion_s), Rng(0));
  for (auto& [name, t] : named_net_tensors(ckpt.net)) {
    Tensor loaded = read_tensor(is, name, /*as_param=*/true);
    if (loaded.shape() != t->shape()) {
      throw ParseError("checkpoint: tensor '" + name + "' shape " + shape_str(loaded.shape()) +
                       " does not match model " + shape_str(t->shape()));
    }
    auto dst = const_cast<Tensor*>(t)->values_mut();
    std::copy(loaded.values().begin(), loaded.values().end(), dst.begin());
  }
  for (int m = 0; m < M; ++m) {
    Tensor roots = read_tensor(is, "roots" + std::to_string(m), /*as_param=*/true);
    const Shape want = {K, dims[static_cast<std::size_t>(m)]};
    if (roots.shape() != want) {
      throw ParseError("checkpoint: roots" + std::to_string(m) + " shape " +
                       shape_str(roots.shape()) + " does not match " + shape_str(want));
    }
    ckpt.prototype_roots.push_back(std::move(roots));
  }
  return ckpt;
}

}  // namespace aim

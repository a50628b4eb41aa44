#include "aim/dap.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace aim {

PrototypeBank make_prototype_bank(const MultimodalNet& net, Rng rng) {
  PrototypeBank bank;
  bank.num_classes = net.num_classes;
  for (int m = 0; m < net.num_modalities; ++m) {
    const int in_dim = net.input_dims[static_cast<std::size_t>(m)];
    std::vector<double> vals(static_cast<std::size_t>(net.num_classes) * in_dim);
    // unit-variance components keep root norms at the scale of typical
    // inputs; smaller roots compress every distance gap the performance
    // estimates depend on
    for (double& v : vals) v = rng.gaussian();
    bank.roots.push_back(Tensor::param({net.num_classes, in_dim}, std::move(vals)));
  }
  bank.depth.assign(static_cast<std::size_t>(net.num_modalities), {});
  return bank;
}

void propagate(PrototypeBank& bank, const MultimodalNet& net) {
  Graph::Pause pause;
  for (int m = 0; m < net.num_modalities; ++m) {
    const EncoderStack& enc = net.encoders[static_cast<std::size_t>(m)];
    auto& levels = bank.depth[static_cast<std::size_t>(m)];
    levels.clear();
    Tensor cur = bank.roots[static_cast<std::size_t>(m)];
    for (const Block& b : enc.blocks) {
      cur = b.forward(cur);
      levels.push_back(cur.clone_detached());
    }
  }
}

Tensor dap_task_loss(const PrototypeBank& bank, const MultimodalNet& net) {
  std::vector<int> class_set(static_cast<std::size_t>(bank.num_classes));
  std::iota(class_set.begin(), class_set.end(), 0);
  const Tensor logits = net.forward(bank.roots, /*frozen=*/true);
  return task_loss(logits, class_set);
}

Tensor dap_orth_loss(const PrototypeBank& bank, const MultimodalNet& net) {
  const int M = net.num_modalities;
  const int K = bank.num_classes;
  std::vector<double> eye(static_cast<std::size_t>(K) * K, 0.0);
  for (int i = 0; i < K; ++i) eye[static_cast<std::size_t>(i) * K + i] = 1.0;
  const Tensor identity = Tensor::from({K, K}, std::move(eye));

  Tensor acc;
  for (int m = 0; m < M; ++m) {
    const EncoderStack& enc = net.encoders[static_cast<std::size_t>(m)];
    Tensor deep = enc.forward_to(bank.roots[static_cast<std::size_t>(m)], enc.depth(),
                                 /*frozen=*/true);
    Tensor term = frobenius_sq(sub(cosine_gram(deep), identity));
    acc = m == 0 ? term : add(acc, term);
  }
  return scalar_mul(acc, 1.0 / static_cast<double>(M));
}

Tensor dap_objective(const PrototypeBank& bank, const MultimodalNet& net) {
  return add(dap_task_loss(bank, net), dap_orth_loss(bank, net));
}

RootOptimResult optimize_roots(PrototypeBank& bank, const MultimodalNet& net, int steps,
                               SgdState& opt) {
  RootOptimResult result;
  {
    Graph::Pause pause;
    result.initial_loss = dap_objective(bank, net).item();
  }
  result.final_loss = result.initial_loss;
  for (int s = 0; s < steps; ++s) {
    try {
      Graph g;
      Graph::Activate scope(g);
      Tensor loss = dap_objective(bank, net);
      g.backward(loss);
    } catch (const NumericError& e) {
      throw NumericError(std::string("optimize_roots: diverged at step ") + std::to_string(s) +
                         ": " + e.what());
    }
    sgd_step(opt, bank.roots);
  }
  if (steps > 0) {
    Graph::Pause pause;
    result.final_loss = dap_objective(bank, net).item();
  }
  propagate(bank, net);
  return result;
}

Tensor orthogonality_gram(const PrototypeBank& bank, int m, int d) {
  Graph::Pause pause;
  return cosine_gram(bank.depth.at(static_cast<std::size_t>(m)).at(static_cast<std::size_t>(d - 1)));
}

double mean_abs_offdiag(const Tensor& gram) {
  const int k = gram.shape()[0];
  if (k < 2) return 0.0;
  double s = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      if (i != j) s += std::abs(gram.at(i, j));
    }
  }
  return s / static_cast<double>(k * (k - 1));
}

void export_grams(const PrototypeBank& bank, const std::string& dir, int epoch) {
  std::filesystem::create_directories(dir);
  for (std::size_t m = 0; m < bank.depth.size(); ++m) {
    for (std::size_t d = 0; d < bank.depth[m].size(); ++d) {
      Tensor gram;
      try {
        gram = orthogonality_gram(bank, static_cast<int>(m), static_cast<int>(d + 1));
      } catch (const ValueError&) {
        continue;  // transiently dead prototype row: no cosine to report
      }
      const std::string path = dir + "/gram_m" + std::to_string(m) + "_d" + std::to_string(d + 1) +
                               "_epoch" + std::to_string(epoch) + ".csv";
      std::ofstream os(path);
      if (!os) throw IoError("export_grams: cannot write " + path);
      const int k = gram.shape()[0];
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
          if (j) os << ",";
          os << format_double(gram.at(i, j));
        }
        os << "\n";
      }
    }
  }
}

double unimodal_probe_accuracy(const EncoderStack& encoder, const PrototypeBank& bank, int m,
                               const Tensor& x, const std::vector<int>& labels) {
  if (labels.empty()) throw ValueError("probe: empty dataset");
  Graph::Pause pause;
  const Tensor feats = encoder.forward_to(x, encoder.depth());
  const Tensor& protos = bank.depth.at(static_cast<std::size_t>(m)).back();
  const int n = feats.shape()[0], d = feats.shape()[1];
  const int k = protos.shape()[0];
  const double* fv = feats.values().data();
  const double* pv = protos.values().data();
  int correct = 0;
  for (int i = 0; i < n; ++i) {
    const double* frow = fv + static_cast<std::size_t>(i) * d;
    int best = 0;
    double best_d = 0.0;
    for (int c = 0; c < k; ++c) {
      const double* prow = pv + static_cast<std::size_t>(c) * d;
      double s = 0.0;
      for (int t = 0; t < d; ++t) {
        const double diff = frow[t] - prow[t];
        s += diff * diff;
      }
      if (c == 0 || s < best_d) {
        best = c;
        best_d = s;
      }
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace aim

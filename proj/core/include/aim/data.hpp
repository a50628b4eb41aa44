#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aim/common.hpp"
#include "aim/tensor.hpp"

namespace aim {

/// Gaussian class-mean mixture with per-modality signal-to-noise, so which
/// modality dominates is a construction-time knob.
struct DatasetSpec {
  int num_modalities = 2;
  int num_classes = 2;
  std::vector<int> dims;
  int n_train = 0;
  int n_test = 0;
  std::vector<double> snr;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Dataset {
  int num_modalities = 0;
  int num_classes = 0;
  std::vector<int> dims;
  std::vector<std::vector<double>> features;  // per modality, n * dims[m] row-major
  std::vector<int> labels;

  int size() const { return static_cast<int>(labels.size()); }
  Tensor modality_matrix(int m) const;  // [n, dims[m]]
  Tensor modality_batch(int m, std::span<const int> indices) const;
  std::vector<int> label_batch(std::span<const int> indices) const;
};

/// x^m = snr[m] * mu_{y}^m + eps with unit-norm class means and standard
/// Gaussian noise, labels round-robin. Fully determined by spec.seed:
/// means are drawn first (class-major, modality-minor), then train samples,
/// then test samples.
std::pair<Dataset, Dataset> generate(const DatasetSpec& spec);

void save(const Dataset& set, const std::string& path);
Dataset load(const std::string& path);

/// Train-mean nearest-centroid accuracy of a single modality; the
/// dominance diagnostic used by the generator's contract.
double nearest_class_mean_accuracy(const Dataset& train, const Dataset& test, int m);

/// The pinned benchmark: M=2, K=6, dims {16,16}, snr {1.5, 0.6},
/// 1200 train / 300 test samples.
DatasetSpec standard_fixture(std::uint64_t seed);

/// Flat key=value file: M, K, dims, n_train, n_test, snr, seed.
DatasetSpec parse_dataset_spec(const std::string& path);

}  // namespace aim

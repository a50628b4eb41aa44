#include "aim/data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace aim {

void DatasetSpec::validate() const {
  if (num_modalities < 2) throw ValueError("dataset spec: M must be >= 2");
  if (num_classes < 2) throw ValueError("dataset spec: K must be >= 2");
  if (static_cast<int>(dims.size()) != num_modalities) {
    throw ValueError("dataset spec: dims must list one dimension per modality");
  }
  for (int d : dims) {
    if (d <= 0) throw ValueError("dataset spec: dims must be positive");
  }
  if (n_train <= 0 || n_test <= 0) throw ValueError("dataset spec: sample counts must be positive");
  if (static_cast<int>(snr.size()) != num_modalities) {
    throw ValueError("dataset spec: snr must list one value per modality");
  }
  for (double s : snr) {
    if (s < 0.0) throw ValueError("dataset spec: snr must be nonnegative");
  }
}

Tensor Dataset::modality_matrix(int m) const {
  return Tensor::from({size(), dims[static_cast<std::size_t>(m)]},
                      features[static_cast<std::size_t>(m)]);
}

Tensor Dataset::modality_batch(int m, std::span<const int> indices) const {
  const int d = dims[static_cast<std::size_t>(m)];
  const auto& feats = features[static_cast<std::size_t>(m)];
  std::vector<double> vals(indices.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const double* src = feats.data() + static_cast<std::size_t>(indices[i]) * d;
    std::copy(src, src + d, vals.data() + i * static_cast<std::size_t>(d));
  }
  return Tensor::from({static_cast<int>(indices.size()), d}, std::move(vals));
}

std::vector<int> Dataset::label_batch(std::span<const int> indices) const {
  std::vector<int> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[static_cast<std::size_t>(indices[i])];
  return out;
}

namespace {

Dataset empty_like(const DatasetSpec& spec, int n) {
  Dataset set;
  set.num_modalities = spec.num_modalities;
  set.num_classes = spec.num_classes;
  set.dims = spec.dims;
  set.features.resize(static_cast<std::size_t>(spec.num_modalities));
  for (int m = 0; m < spec.num_modalities; ++m) {
    set.features[static_cast<std::size_t>(m)].resize(static_cast<std::size_t>(n) *
                                                     spec.dims[static_cast<std::size_t>(m)]);
  }
  set.labels.resize(static_cast<std::size_t>(n));
  return set;
}

void fill_samples(Dataset& set, const DatasetSpec& spec,
                  const std::vector<std::vector<double>>& means, Rng& rng) {
  const int n = set.size();
  for (int i = 0; i < n; ++i) {
    const int y = i % spec.num_classes;
    set.labels[static_cast<std::size_t>(i)] = y;
    for (int m = 0; m < spec.num_modalities; ++m) {
      const int d = spec.dims[static_cast<std::size_t>(m)];
      const double* mu =
          means[static_cast<std::size_t>(m)].data() + static_cast<std::size_t>(y) * d;
      double* dst =
          set.features[static_cast<std::size_t>(m)].data() + static_cast<std::size_t>(i) * d;
      const double s = spec.snr[static_cast<std::size_t>(m)];
      for (int t = 0; t < d; ++t) dst[t] = s * mu[t] + rng.gaussian();
    }
  }
}

}  // namespace

std::pair<Dataset, Dataset> generate(const DatasetSpec& spec) {
  spec.validate();
  Rng rng = Rng(spec.seed).derive("data");

  // unit-norm class means, drawn class-major then modality-minor
  std::vector<std::vector<double>> means(static_cast<std::size_t>(spec.num_modalities));
  for (int m = 0; m < spec.num_modalities; ++m) {
    means[static_cast<std::size_t>(m)].resize(static_cast<std::size_t>(spec.num_classes) *
                                              spec.dims[static_cast<std::size_t>(m)]);
  }
  for (int k = 0; k < spec.num_classes; ++k) {
    for (int m = 0; m < spec.num_modalities; ++m) {
      const int d = spec.dims[static_cast<std::size_t>(m)];
      double* mu = means[static_cast<std::size_t>(m)].data() + static_cast<std::size_t>(k) * d;
      double norm_sq = 0.0;
      for (int t = 0; t < d; ++t) {
        mu[t] = rng.gaussian();
        norm_sq += mu[t] * mu[t];
      }
      const double inv = 1.0 / std::sqrt(norm_sq);
      for (int t = 0; t < d; ++t) mu[t] *= inv;
    }
  }

  Dataset train = empty_like(spec, spec.n_train);
  Dataset test = empty_like(spec, spec.n_test);
  fill_samples(train, spec, means, rng);
  fill_samples(test, spec, means, rng);
  return {std::move(train), std::move(test)};
}

void save(const Dataset& set, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("dataset: cannot write " + path);
  os << "mmds v1 M=" << set.num_modalities << " K=" << set.num_classes << " dims=";
  for (std::size_t m = 0; m < set.dims.size(); ++m) {
    if (m) os << ",";
    os << set.dims[m];
  }
  os << " n=" << set.size() << "\n";
  for (int i = 0; i < set.size(); ++i) {
    os << set.labels[static_cast<std::size_t>(i)];
    for (int m = 0; m < set.num_modalities; ++m) {
      os << ";";
      const int d = set.dims[static_cast<std::size_t>(m)];
      const double* row =
          set.features[static_cast<std::size_t>(m)].data() + static_cast<std::size_t>(i) * d;
      for (int t = 0; t < d; ++t) {
        if (t) os << ",";
        os << format_double(row[t]);
      }
    }
    os << "\n";
  }
  if (!os) throw IoError("dataset: write failed for " + path);
}

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string::npos) {
      parts.push_back(s.substr(start));
      break;
    }
    parts.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return parts;
}

[[noreturn]] void parse_fail(int line, const std::string& what) {
  throw ParseError("dataset: line " + std::to_string(line) + ": " + what);
}

}  // namespace

Dataset load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("dataset: cannot read " + path);
  std::string line;
  if (!std::getline(is, line)) parse_fail(1, "missing header");
  std::istringstream hs(line);
  std::string magic, ver;
  hs >> magic >> ver;
  if (magic != "mmds" || ver != "v1") parse_fail(1, "bad header '" + line + "'");
  int M = -1, K = -1, n = -1;
  std::vector<int> dims;
  std::string tok;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) parse_fail(1, "bad header field '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    try {
      if (key == "M") M = std::stoi(val);
      else if (key == "K") K = std::stoi(val);
      else if (key == "n") n = std::stoi(val);
      else if (key == "dims") {
        for (const std::string& part : split(val, ',')) dims.push_back(std::stoi(part));
      } else {
        parse_fail(1, "unknown header field '" + key + "'");
      }
    } catch (const std::invalid_argument&) {
      parse_fail(1, "bad value for '" + key + "'");
    }
  }
  if (M < 2 || K < 2 || n < 0) parse_fail(1, "incomplete header");
  if (static_cast<int>(dims.size()) != M) parse_fail(1, "dims count does not match M");

  Dataset set;
  set.num_modalities = M;
  set.num_classes = K;
  set.dims = dims;
  set.features.resize(static_cast<std::size_t>(M));
  for (int m = 0; m < M; ++m) {
    set.features[static_cast<std::size_t>(m)].reserve(static_cast<std::size_t>(n) *
                                                      dims[static_cast<std::size_t>(m)]);
  }
  set.labels.reserve(static_cast<std::size_t>(n));

  for (int i = 0; i < n; ++i) {
    const int lineno = i + 2;
    if (!std::getline(is, line)) parse_fail(lineno, "unexpected end of file");
    const std::vector<std::string> fields = split(line, ';');
    if (static_cast<int>(fields.size()) != M + 1) {
      parse_fail(lineno, "expected " + std::to_string(M + 1) + " ';'-separated fields, got " +
                             std::to_string(fields.size()));
    }
    int y = -1;
    try {
      y = std::stoi(fields[0]);
    } catch (const std::invalid_argument&) {
      parse_fail(lineno, "bad label '" + fields[0] + "'");
    }
    if (y < 0 || y >= K) parse_fail(lineno, "label " + std::to_string(y) + " out of range");
    set.labels.push_back(y);
    for (int m = 0; m < M; ++m) {
      const std::vector<std::string> nums = split(fields[static_cast<std::size_t>(m) + 1], ',');
      if (static_cast<int>(nums.size()) != dims[static_cast<std::size_t>(m)]) {
        parse_fail(lineno, "modality " + std::to_string(m) + " has " +
                               std::to_string(nums.size()) + " features, expected " +
                               std::to_string(dims[static_cast<std::size_t>(m)]));
      }
      for (const std::string& num : nums) {
        double v = 0.0;
        try {
          v = parse_double(num);
        } catch (const ParseError&) {
          parse_fail(lineno, "bad feature value '" + num + "'");
        }
        set.features[static_cast<std::size_t>(m)].push_back(v);
      }
    }
  }
  return set;
}

double nearest_class_mean_accuracy(const Dataset& train, const Dataset& test, int m) {
  const int d = train.dims[static_cast<std::size_t>(m)];
  const int K = train.num_classes;
  std::vector<double> means(static_cast<std::size_t>(K) * d, 0.0);
  std::vector<int> counts(static_cast<std::size_t>(K), 0);
  for (int i = 0; i < train.size(); ++i) {
    const int y = train.labels[static_cast<std::size_t>(i)];
    const double* row =
        train.features[static_cast<std::size_t>(m)].data() + static_cast<std::size_t>(i) * d;
    double* mu = means.data() + static_cast<std::size_t>(y) * d;
    for (int t = 0; t < d; ++t) mu[t] += row[t];
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int k = 0; k < K; ++k) {
    if (counts[static_cast<std::size_t>(k)] == 0) continue;
    double* mu = means.data() + static_cast<std::size_t>(k) * d;
    for (int t = 0; t < d; ++t) mu[t] /= counts[static_cast<std::size_t>(k)];
  }
  int correct = 0;
  for (int i = 0; i < test.size(); ++i) {
    const double* row =
        test.features[static_cast<std::size_t>(m)].data() + static_cast<std::size_t>(i) * d;
    int best = 0;
    double best_d = 0.0;
    for (int k = 0; k < K; ++k) {
      const double* mu = means.data() + static_cast<std::size_t>(k) * d;
      double s = 0.0;
      for (int t = 0; t < d; ++t) {
        const double diff = row[t] - mu[t];
        s += diff * diff;
      }
      if (k == 0 || s < best_d) {
        best = k;
        best_d = s;
      }
    }
    if (best == test.labels[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

DatasetSpec standard_fixture(std::uint64_t seed) {
  DatasetSpec spec;
  spec.num_modalities = 2;
  spec.num_classes = 6;
  spec.dims = {16, 32};
  spec.n_train = 600;
  spec.n_test = 300;
  spec.snr = {3.0, 1.7};
  spec.seed = seed;
  return spec;
}

DatasetSpec parse_dataset_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("dataset spec: cannot read " + path);
  DatasetSpec spec;
  spec.dims.clear();
  spec.snr.clear();
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ParseError("dataset spec: line " + std::to_string(lineno) + ": expected key=value");
    }
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "M") spec.num_modalities = std::stoi(val);
      else if (key == "K") spec.num_classes = std::stoi(val);
      else if (key == "n_train") spec.n_train = std::stoi(val);
      else if (key == "n_test") spec.n_test = std::stoi(val);
      else if (key == "seed") spec.seed = std::stoull(val);
      else if (key == "dims") {
        for (const std::string& part : split(val, ',')) spec.dims.push_back(std::stoi(part));
      } else if (key == "snr") {
        for (const std::string& part : split(val, ',')) spec.snr.push_back(parse_double(part));
      } else {
        throw ParseError("dataset spec: line " + std::to_string(lineno) + ": unknown key '" + key +
                         "'");
      }
    } catch (const std::invalid_argument&) {
      throw ParseError("dataset spec: line " + std::to_string(lineno) + ": bad value '" + val +
                       "'");
    }
  }
  spec.validate();
  return spec;
}

}  // namespace aim

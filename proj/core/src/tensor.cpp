#include "aim/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace aim {

namespace {

thread_local Graph* g_active = nullptr;

void check_finite(const char* op, std::span<const double> vals) {
  for (double v : vals) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite result");
    }
  }
}

std::span<double> grad_span(Tensor& t) {
  t.ensure_grad();
  return t.grad_mut();
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------

Tensor make_result(Shape shape, std::vector<double>&& values, bool requires_grad) {
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::zeros(Shape shape) {
  auto n = numel(shape);
  return make_result(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), false);
}

Tensor Tensor::full(Shape shape, double value) {
  auto n = numel(shape);
  return make_result(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), false);
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
  }
  return make_result(std::move(shape), std::move(values), false);
}

Tensor Tensor::row(std::vector<double> values) {
  int n = static_cast<int>(values.size());
  return from({1, n}, std::move(values));
}

Tensor Tensor::vec(std::vector<double> values) {
  int n = static_cast<int>(values.size());
  return from({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  int r = static_cast<int>(rows.size());
  int c = r > 0 ? static_cast<int>(rows.begin()->size()) : 0;
  std::vector<double> vals;
  vals.reserve(static_cast<std::size_t>(r) * c);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) throw ShapeError("tensor: ragged matrix literal");
    vals.insert(vals.end(), row.begin(), row.end());
  }
  return from({r, c}, std::move(vals));
}

Tensor Tensor::param(Shape shape, std::vector<double> values) {
  Tensor t = from(std::move(shape), std::move(values));
  t.impl_->requires_grad = true;
  t.impl_->grad.assign(t.impl_->values.size(), 0.0);
  return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
std::int64_t Tensor::size() const { return static_cast<std::int64_t>(impl_->values.size()); }
int Tensor::rows() const { return rank() == 2 ? impl_->shape[0] : 1; }
int Tensor::cols() const { return rank() == 2 ? impl_->shape[1] : impl_->shape[0]; }

std::span<const double> Tensor::values() const { return impl_->values; }

std::span<double> Tensor::values_mut() {
  if (impl_->node >= 0 && impl_->graph != nullptr) {
    throw ValueError("tensor: cannot mutate an op result recorded on a live graph");
  }
  return impl_->values;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
std::span<double> Tensor::grad_mut() { return impl_->grad; }

void Tensor::ensure_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  if (value) ensure_grad();
  return *this;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
  return impl_->values[0];
}

double Tensor::at(std::int64_t i) const { return impl_->values[static_cast<std::size_t>(i)]; }
double Tensor::at(int r, int c) const {
  return impl_->values[static_cast<std::size_t>(r) * cols() + c];
}

bool Tensor::on_graph() const { return impl_ && impl_->graph != nullptr && impl_->node >= 0; }

Tensor Tensor::clone_detached() const {
  auto vals = impl_->values;
  return make_result(impl_->shape, std::move(vals), false);
}

// ---- Graph ----------------------------------------------------------------

Graph::Activate::Activate(Graph& g) : prev_(g_active) { g_active = &g; }
Graph::Activate::~Activate() { g_active = prev_; }

Graph::Pause::Pause() : prev_(g_active) { g_active = nullptr; }
Graph::Pause::~Pause() { g_active = prev_; }

Graph* Graph::active() { return g_active; }

Graph::~Graph() {
  for (auto& n : nodes_) {
    if (n.out.impl_ && n.out.impl_->graph == this) {
      n.out.impl_->graph = nullptr;
      n.out.impl_->node = -1;
    }
  }
}

void Graph::record(Node node) {
  node.out.impl_->graph = this;
  node.out.impl_->node = static_cast<int>(nodes_.size());
  node.out.impl_->requires_grad = true;
  nodes_.push_back(std::move(node));
}

namespace {

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool should_record(const std::vector<Tensor>& inputs) {
  if (g_active == nullptr) return false;
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

Tensor finish(Op op, Shape shape, std::vector<double>&& vals,
              std::vector<Tensor> inputs, double c0 = 0.0, double c1 = 0.0,
              std::vector<int> idx = {}) {
  check_finite(op_name(op), vals);
  Tensor out = make_result(std::move(shape), std::move(vals), false);
  if (should_record(inputs)) {
    g_active->record(Graph::Node{op, std::move(inputs), out, c0, c1, std::move(idx)});
  }
  return out;
}

void require_rank2(const char* op, const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

}  // namespace

// ---- forward implementations ----------------------------------------------

const char* op_name(Op op) {
  switch (op) {
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::elementwise_mul: return "elementwise_mul";
    case Op::scalar_mul: return "scalar_mul";
    case Op::relu: return "relu";
    case Op::sigmoid: return "sigmoid";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::concat_rows: return "concat_rows";
    case Op::concat_cols: return "concat_cols";
    case Op::reshape: return "reshape";
    case Op::slice: return "slice";
    case Op::add_rowwise: return "add_rowwise";
    case Op::softmax_rows: return "softmax_rows";
    case Op::row_distance: return "row_distance";
    case Op::distance_ce: return "distance_ce";
    case Op::cosine_gram: return "cosine_gram";
    case Op::frobenius_sq: return "frobenius_sq";
    case Op::clip: return "clip";
  }
  return "?";
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const int n = a.shape()[0], k = a.shape()[1];
  const int k2 = b.shape()[0], m = b.shape()[1];
  if (k != k2) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(n) * m, 0.0);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (int i = 0; i < n; ++i) {
    const double* arow = av + static_cast<std::size_t>(i) * k;
    double* orow = out.data() + static_cast<std::size_t>(i) * m;
    for (int t = 0; t < k; ++t) {
      const double x = arow[t];
      if (x == 0.0) continue;
      const double* brow = bv + static_cast<std::size_t>(t) * m;
      for (int j = 0; j < m; ++j) orow[j] += x * brow[j];
    }
  }
  return finish(Op::matmul, {n, m}, std::move(out), {a, b});
}

namespace {

enum class EwKind { add, sub, mul };

Tensor elementwise(Op op, EwKind kind, const Tensor& a, const Tensor& b) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
    throw ShapeError(std::string(op_name(op)) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not match (only scalar broadcast is supported)");
  }
  const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
  const std::size_t n = static_cast<std::size_t>(numel(out_shape));
  std::vector<double> out(n);
  const double* av = a.values().data();
  const double* bv = b.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = a_scalar ? av[0] : av[i];
    const double y = b_scalar ? bv[0] : bv[i];
    out[i] = kind == EwKind::add ? x + y : kind == EwKind::sub ? x - y : x * y;
  }
  return finish(op, out_shape, std::move(out), {a, b});
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Op::add, EwKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Op::sub, EwKind::sub, a, b); }
Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
  return elementwise(Op::elementwise_mul, EwKind::mul, a, b);
}

Tensor scalar_mul(const Tensor& a, double c) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= c;
  return finish(Op::scalar_mul, a.shape(), std::move(out), {a}, c);
}

namespace {

template <typename F>
Tensor unary(Op op, const Tensor& a, F&& f) {
  std::vector<double> out(a.size());
  const double* av = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return finish(op, a.shape(), std::move(out), {a});
}

}  // namespace

Tensor relu(const Tensor& a) {
  return unary(Op::relu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(Op::sigmoid, a, [](double x) {
    // evaluate through exp(-|x|) so neither branch overflows
    if (x >= 0.0) {
      const double e = std::exp(-x);
      return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
}

Tensor exp(const Tensor& a) {
  return unary(Op::exp, a, [](double x) { return std::exp(x); });
}

Tensor log(const Tensor& a) {
  return unary(Op::log, a, [](double x) { return std::log(x); });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return finish(Op::sum, {1}, {s}, {a});
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return finish(Op::mean, {1}, {s / static_cast<double>(a.size())}, {a});
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  int cols = -1, rows = 0;
  for (const Tensor& p : parts) {
    require_rank2("concat_rows", p);
    if (cols < 0) cols = p.shape()[1];
    if (p.shape()[1] != cols) {
      throw ShapeError("concat_rows: column mismatch: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    rows += p.shape()[0];
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows) * cols);
  for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return finish(Op::concat_rows, {rows, cols}, std::move(out), parts);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  int rows = -1, cols = 0;
  for (const Tensor& p : parts) {
    require_rank2("concat_cols", p);
    if (rows < 0) rows = p.shape()[0];
    if (p.shape()[0] != rows) {
      throw ShapeError("concat_cols: row mismatch: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    }
    cols += p.shape()[1];
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * cols);
  int col_off = 0;
  for (const Tensor& p : parts) {
    const int pc = p.shape()[1];
    const double* pv = p.values().data();
    for (int i = 0; i < rows; ++i) {
      std::memcpy(out.data() + static_cast<std::size_t>(i) * cols + col_off,
                  pv + static_cast<std::size_t>(i) * pc, sizeof(double) * pc);
    }
    col_off += pc;
  }
  return finish(Op::concat_cols, {rows, cols}, std::move(out), parts);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return finish(Op::reshape, std::move(shape), std::move(out), {a});
}

Tensor slice(const Tensor& a, std::int64_t begin, std::int64_t end) {
  if (begin < 0 || end > a.size() || begin >= end) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + std::to_string(a.size()) + " elements");
  }
  std::vector<double> out(a.values().begin() + begin, a.values().begin() + end);
  return finish(Op::slice, {static_cast<int>(end - begin)}, std::move(out), {a},
                static_cast<double>(begin), static_cast<double>(end));
}

Tensor add_rowwise(const Tensor& a, const Tensor& bias) {
  require_rank2("add_rowwise", a);
  if (bias.rank() != 1 || bias.shape()[0] != a.shape()[1]) {
    throw ShapeError("add_rowwise: bias " + shape_str(bias.shape()) + " does not match " +
                     shape_str(a.shape()));
  }
  const int n = a.shape()[0], d = a.shape()[1];
  std::vector<double> out(a.values().begin(), a.values().end());
  const double* bv = bias.values().data();
  for (int i = 0; i < n; ++i) {
    double* row = out.data() + static_cast<std::size_t>(i) * d;
    for (int j = 0; j < d; ++j) row[j] += bv[j];
  }
  return finish(Op::add_rowwise, a.shape(), std::move(out), {a, bias});
}

Tensor softmax_rows(const Tensor& logits) {
  require_rank2("softmax_rows", logits);
  const int n = logits.shape()[0], k = logits.shape()[1];
  std::vector<double> out(static_cast<std::size_t>(n) * k);
  const double* lv = logits.values().data();
  for (int i = 0; i < n; ++i) {
    const double* row = lv + static_cast<std::size_t>(i) * k;
    double* orow = out.data() + static_cast<std::size_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    for (int j = 0; j < k; ++j) orow[j] /= s;
  }
  return finish(Op::softmax_rows, logits.shape(), std::move(out), {logits});
}

Tensor row_distance(const Tensor& a, const Tensor& p) {
  require_rank2("row_distance", a);
  require_rank2("row_distance", p);
  const int n = a.shape()[0], d = a.shape()[1];
  const int k = p.shape()[0];
  if (p.shape()[1] != d) {
    throw ShapeError("row_distance: feature dims differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(p.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(n) * k);
  const double* av = a.values().data();
  const double* pv = p.values().data();
  for (int i = 0; i < n; ++i) {
    const double* arow = av + static_cast<std::size_t>(i) * d;
    for (int c = 0; c < k; ++c) {
      const double* prow = pv + static_cast<std::size_t>(c) * d;
      double s = 0.0;
      for (int t = 0; t < d; ++t) {
        const double diff = arow[t] - prow[t];
        s += diff * diff;
      }
      out[static_cast<std::size_t>(i) * k + c] = std::sqrt(s);
    }
  }
  return finish(Op::row_distance, {n, k}, std::move(out), {a, p});
}

namespace {

Tensor distance_ce_impl(const Tensor& dist, std::vector<int> labels) {
  int n, k;
  if (dist.rank() == 2) {
    n = dist.shape()[0];
    k = dist.shape()[1];
  } else {
    n = 1;
    k = dist.shape()[0];
  }
  if (k < 2) throw ShapeError("distance_ce: need at least 2 classes, got " + shape_str(dist.shape()));
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("distance_ce: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || y >= k) {
      throw ValueError("distance_ce: label " + std::to_string(y) + " out of range [0," +
                       std::to_string(k) + ")");
    }
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  const double* dv = dist.values().data();
  for (int i = 0; i < n; ++i) {
    const double* row = dv + static_cast<std::size_t>(i) * k;
    double mn = row[0];
    for (int j = 1; j < k; ++j) mn = std::min(mn, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) s += std::exp(mn - row[j]);
    out[static_cast<std::size_t>(i)] = row[labels[static_cast<std::size_t>(i)]] - mn + std::log(s);
  }
  return finish(Op::distance_ce, {n}, std::move(out), {dist}, 0.0, 0.0, std::move(labels));
}

}  // namespace

Tensor distance_ce(const Tensor& dist, const std::vector<int>& labels) {
  return distance_ce_impl(dist, labels);
}

Tensor distance_ce(const Tensor& dist_row, int label) {
  return distance_ce_impl(dist_row, {label});
}

Tensor cosine_gram(const Tensor& p) {
  require_rank2("cosine_gram", p);
  const int k = p.shape()[0], d = p.shape()[1];
  const double* pv = p.values().data();
  std::vector<double> norms(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    double s = 0.0;
    const double* row = pv + static_cast<std::size_t>(i) * d;
    for (int t = 0; t < d; ++t) s += row[t] * row[t];
    norms[static_cast<std::size_t>(i)] = std::sqrt(s);
    if (norms[static_cast<std::size_t>(i)] == 0.0) {
      throw ValueError("cosine_gram: degenerate prototype, zero-norm row " + std::to_string(i));
    }
  }
  std::vector<double> out(static_cast<std::size_t>(k) * k);
  for (int i = 0; i < k; ++i) {
    out[static_cast<std::size_t>(i) * k + i] = 1.0;
    for (int j = i + 1; j < k; ++j) {
      const double* ri = pv + static_cast<std::size_t>(i) * d;
      const double* rj = pv + static_cast<std::size_t>(j) * d;
      double dot = 0.0;
      for (int t = 0; t < d; ++t) dot += ri[t] * rj[t];
      const double c = dot / (norms[static_cast<std::size_t>(i)] * norms[static_cast<std::size_t>(j)]);
      out[static_cast<std::size_t>(i) * k + j] = c;
      out[static_cast<std::size_t>(j) * k + i] = c;
    }
  }
  return finish(Op::cosine_gram, {k, k}, std::move(out), {p});
}

Tensor frobenius_sq(const Tensor& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return finish(Op::frobenius_sq, {1}, {s}, {m});
}

Tensor stop_gradient(const Tensor& a) { return a.clone_detached(); }

Tensor clip(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ValueError("clip: lo > hi");
  std::vector<double> out(a.size());
  const double* av = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(av[i], lo, hi);
  return finish(Op::clip, a.shape(), std::move(out), {a}, lo, hi);
}

Tensor apply_primitive(Primitive kind, const std::vector<Tensor>& inputs) {
  auto want = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError("apply_primitive: expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case Primitive::matmul: want(2); return matmul(inputs[0], inputs[1]);
    case Primitive::add: want(2); return add(inputs[0], inputs[1]);
    case Primitive::sub: want(2); return sub(inputs[0], inputs[1]);
    case Primitive::elementwise_mul: want(2); return elementwise_mul(inputs[0], inputs[1]);
    case Primitive::scalar_mul: want(2); return scalar_mul(inputs[0], inputs[1].item());
    case Primitive::relu: want(1); return relu(inputs[0]);
    case Primitive::sigmoid: want(1); return sigmoid(inputs[0]);
    case Primitive::exp: want(1); return exp(inputs[0]);
    case Primitive::log: want(1); return log(inputs[0]);
    case Primitive::sum: want(1); return sum(inputs[0]);
    case Primitive::mean: want(1); return mean(inputs[0]);
    case Primitive::concat_rows: return concat_rows(inputs);
  }
  throw ValueError("apply_primitive: unknown primitive kind");
}

// ---- backward ---------------------------------------------------------------

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.on_graph() || loss.impl_->graph != this) {
    throw ValueError("backward: loss is not a node of this graph");
  }
  Tensor seed = loss;
  seed.ensure_grad();
  seed.grad_mut()[0] += 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    if (!n.out.has_grad()) continue;
    const std::span<const double> og = n.out.grad();
    switch (n.op) {
      case Op::matmul: {
        Tensor& A = n.in[0];
        Tensor& B = n.in[1];
        const int rows = A.shape()[0], inner = A.shape()[1], colsn = B.shape()[1];
        const double* av = A.values().data();
        const double* bv = B.values().data();
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          for (int i = 0; i < rows; ++i) {
            const double* grow = og.data() + static_cast<std::size_t>(i) * colsn;
            double* garow = ga + static_cast<std::size_t>(i) * inner;
            for (int t = 0; t < inner; ++t) {
              const double* brow = bv + static_cast<std::size_t>(t) * colsn;
              double s = 0.0;
              for (int j = 0; j < colsn; ++j) s += grow[j] * brow[j];
              garow[t] += s;
            }
          }
        }
        if (B.requires_grad()) {
          double* gb = grad_span(B).data();
          for (int i = 0; i < rows; ++i) {
            const double* arow = av + static_cast<std::size_t>(i) * inner;
            const double* grow = og.data() + static_cast<std::size_t>(i) * colsn;
            for (int t = 0; t < inner; ++t) {
              const double x = arow[t];
              if (x == 0.0) continue;
              double* gbrow = gb + static_cast<std::size_t>(t) * colsn;
              for (int j = 0; j < colsn; ++j) gbrow[j] += x * grow[j];
            }
          }
        }
        break;
      }
      case Op::add:
      case Op::sub:
      case Op::elementwise_mul: {
        Tensor& A = n.in[0];
        Tensor& B = n.in[1];
        const bool a_scalar = A.size() == 1;
        const bool b_scalar = B.size() == 1;
        const std::size_t cnt = og.size();
        const double* av = A.values().data();
        const double* bv = B.values().data();
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          for (std::size_t i = 0; i < cnt; ++i) {
            double g = og[i];
            if (n.op == Op::elementwise_mul) g *= b_scalar ? bv[0] : bv[i];
            ga[a_scalar ? 0 : i] += g;
          }
        }
        if (B.requires_grad()) {
          double* gb = grad_span(B).data();
          for (std::size_t i = 0; i < cnt; ++i) {
            double g = og[i];
            if (n.op == Op::sub) g = -g;
            if (n.op == Op::elementwise_mul) g = og[i] * (a_scalar ? av[0] : av[i]);
            gb[b_scalar ? 0 : i] += g;
          }
        }
        break;
      }
      case Op::scalar_mul: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          for (std::size_t i = 0; i < og.size(); ++i) ga[i] += n.c0 * og[i];
        }
        break;
      }
      case Op::relu: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const double* av = A.values().data();
          for (std::size_t i = 0; i < og.size(); ++i) {
            if (av[i] > 0.0) ga[i] += og[i];
          }
        }
        break;
      }
      case Op::sigmoid: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const double* y = n.out.values().data();
          for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * y[i] * (1.0 - y[i]);
        }
        break;
      }
      case Op::exp: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const double* y = n.out.values().data();
          for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] * y[i];
        }
        break;
      }
      case Op::log: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const double* av = A.values().data();
          for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i] / av[i];
        }
        break;
      }
      case Op::sum: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const double g = og[0];
          for (std::int64_t i = 0; i < A.size(); ++i) ga[i] += g;
        }
        break;
      }
      case Op::mean: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const double g = og[0] / static_cast<double>(A.size());
          for (std::int64_t i = 0; i < A.size(); ++i) ga[i] += g;
        }
        break;
      }
      case Op::concat_rows: {
        std::size_t off = 0;
        for (Tensor& part : n.in) {
          const std::size_t cnt = static_cast<std::size_t>(part.size());
          if (part.requires_grad()) {
            double* gp = grad_span(part).data();
            for (std::size_t i = 0; i < cnt; ++i) gp[i] += og[off + i];
          }
          off += cnt;
        }
        break;
      }
      case Op::concat_cols: {
        const int rows = n.out.shape()[0];
        const int out_cols = n.out.shape()[1];
        int col_off = 0;
        for (Tensor& part : n.in) {
          const int pc = part.shape()[1];
          if (part.requires_grad()) {
            double* gp = grad_span(part).data();
            for (int i = 0; i < rows; ++i) {
              const double* grow = og.data() + static_cast<std::size_t>(i) * out_cols + col_off;
              double* prow = gp + static_cast<std::size_t>(i) * pc;
              for (int j = 0; j < pc; ++j) prow[j] += grow[j];
            }
          }
          col_off += pc;
        }
        break;
      }
      case Op::reshape: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i];
        }
        break;
      }
      case Op::slice: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const std::size_t begin = static_cast<std::size_t>(n.c0);
          for (std::size_t i = 0; i < og.size(); ++i) ga[begin + i] += og[i];
        }
        break;
      }
      case Op::add_rowwise: {
        Tensor& A = n.in[0];
        Tensor& bias = n.in[1];
        const int rows = A.shape()[0], d = A.shape()[1];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          for (std::size_t i = 0; i < og.size(); ++i) ga[i] += og[i];
        }
        if (bias.requires_grad()) {
          double* gb = grad_span(bias).data();
          for (int i = 0; i < rows; ++i) {
            const double* grow = og.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) gb[j] += grow[j];
          }
        }
        break;
      }
      case Op::softmax_rows: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          const int rows = A.shape()[0], k = A.shape()[1];
          double* ga = grad_span(A).data();
          const double* y = n.out.values().data();
          for (int i = 0; i < rows; ++i) {
            const double* yr = y + static_cast<std::size_t>(i) * k;
            const double* gr = og.data() + static_cast<std::size_t>(i) * k;
            double dot = 0.0;
            for (int j = 0; j < k; ++j) dot += gr[j] * yr[j];
            double* gar = ga + static_cast<std::size_t>(i) * k;
            for (int j = 0; j < k; ++j) gar[j] += yr[j] * (gr[j] - dot);
          }
        }
        break;
      }
      case Op::row_distance: {
        Tensor& A = n.in[0];
        Tensor& P = n.in[1];
        const int rows = A.shape()[0], d = A.shape()[1], k = P.shape()[0];
        const double* av = A.values().data();
        const double* pv = P.values().data();
        const double* dist = n.out.values().data();
        const bool ga_on = A.requires_grad();
        const bool gp_on = P.requires_grad();
        double* ga = ga_on ? grad_span(A).data() : nullptr;
        double* gp = gp_on ? grad_span(P).data() : nullptr;
        for (int i = 0; i < rows; ++i) {
          for (int c = 0; c < k; ++c) {
            const double g = og[static_cast<std::size_t>(i) * k + c];
            if (g == 0.0) continue;
            const double dd = dist[static_cast<std::size_t>(i) * k + c];
            if (dd == 0.0) continue;  // subgradient 0 at coincident points
            const double coef = g / dd;
            const double* arow = av + static_cast<std::size_t>(i) * d;
            const double* prow = pv + static_cast<std::size_t>(c) * d;
            for (int t = 0; t < d; ++t) {
              const double diff = coef * (arow[t] - prow[t]);
              if (ga_on) ga[static_cast<std::size_t>(i) * d + t] += diff;
              if (gp_on) gp[static_cast<std::size_t>(c) * d + t] -= diff;
            }
          }
        }
        break;
      }
      case Op::distance_ce: {
        Tensor& D = n.in[0];
        if (D.requires_grad()) {
          const int rows = static_cast<int>(n.out.size());
          const int k = D.rank() == 2 ? D.shape()[1] : D.shape()[0];
          double* gd = grad_span(D).data();
          const double* dv = D.values().data();
          for (int i = 0; i < rows; ++i) {
            const double g = og[static_cast<std::size_t>(i)];
            if (g == 0.0) continue;
            const double* row = dv + static_cast<std::size_t>(i) * k;
            double mn = row[0];
            for (int j = 1; j < k; ++j) mn = std::min(mn, row[j]);
            double s = 0.0;
            for (int j = 0; j < k; ++j) s += std::exp(mn - row[j]);
            double* grow = gd + static_cast<std::size_t>(i) * k;
            const int y = n.idx[static_cast<std::size_t>(i)];
            for (int j = 0; j < k; ++j) {
              const double prob = std::exp(mn - row[j]) / s;
              grow[j] += g * ((j == y ? 1.0 : 0.0) - prob);
            }
          }
        }
        break;
      }
      case Op::cosine_gram: {
        Tensor& P = n.in[0];
        if (P.requires_grad()) {
          const int k = P.shape()[0], d = P.shape()[1];
          const double* pv = P.values().data();
          const double* gvals = n.out.values().data();
          double* gp = grad_span(P).data();
          std::vector<double> norms(static_cast<std::size_t>(k));
          for (int i = 0; i < k; ++i) {
            double s = 0.0;
            const double* row = pv + static_cast<std::size_t>(i) * d;
            for (int t = 0; t < d; ++t) s += row[t] * row[t];
            norms[static_cast<std::size_t>(i)] = std::sqrt(s);
          }
          for (int i = 0; i < k; ++i) {
            for (int j = 0; j < k; ++j) {
              if (i == j) continue;  // diagonal is the constant 1
              const double g = og[static_cast<std::size_t>(i) * k + j];
              if (g == 0.0) continue;
              const double ri = norms[static_cast<std::size_t>(i)];
              const double rj = norms[static_cast<std::size_t>(j)];
              const double gij = gvals[static_cast<std::size_t>(i) * k + j];
              const double* prowi = pv + static_cast<std::size_t>(i) * d;
              const double* prowj = pv + static_cast<std::size_t>(j) * d;
              double* gi = gp + static_cast<std::size_t>(i) * d;
              double* gj = gp + static_cast<std::size_t>(j) * d;
              for (int t = 0; t < d; ++t) {
                const double ui = prowi[t] / ri;
                const double uj = prowj[t] / rj;
                gi[t] += g * (uj - gij * ui) / ri;
                gj[t] += g * (ui - gij * uj) / rj;
              }
            }
          }
        }
        break;
      }
      case Op::frobenius_sq: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const double* av = A.values().data();
          const double g2 = 2.0 * og[0];
          for (std::int64_t i = 0; i < A.size(); ++i) ga[i] += g2 * av[i];
        }
        break;
      }
      case Op::clip: {
        Tensor& A = n.in[0];
        if (A.requires_grad()) {
          double* ga = grad_span(A).data();
          const double* av = A.values().data();
          for (std::size_t i = 0; i < og.size(); ++i) {
            if (av[i] >= n.c0 && av[i] <= n.c1) ga[i] += og[i];
          }
        }
        break;
      }
    }
  }

  for (const Node& n : nodes_) {
    for (const Tensor& t : n.in) {
      if (t.has_grad()) check_finite("backward", t.grad());
    }
  }
}

}  // namespace aim

#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "aim/common.hpp"

namespace aim {

class Graph;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  Graph* graph = nullptr;  // set while the tensor is an op result on a live tape
  int node = -1;
};
}  // namespace detail

/// Dense 64-bit real tensor (rank 1 or 2, row-major). Copies are shallow:
/// two Tensor handles may share one buffer, which is how parameters stay
/// live across the per-step tapes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);
  static Tensor row(std::vector<double> values);  // shape {1, n}
  static Tensor vec(std::vector<double> values);  // shape {n}
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  /// Leaf with requires_grad set and a zeroed gradient buffer.
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  std::int64_t size() const;
  int rows() const;  // 1 for rank-1
  int cols() const;  // length for rank-1

  std::span<const double> values() const;
  /// Mutable access; only valid on leaves (not op results).
  std::span<double> values_mut();

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void ensure_grad();
  void zero_grad();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  double item() const;  // scalar tensors only
  double at(std::int64_t i) const;
  double at(int r, int c) const;

  bool on_graph() const;
  int node_id() const { return impl_ ? impl_->node : -1; }

  /// Deep copy of values into a fresh leaf (no grad history).
  Tensor clone_detached() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const void* storage_key() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Graph;
  friend Tensor make_result(Shape, std::vector<double>&&, bool);
};

enum class Op : std::uint8_t {
  matmul,
  add,
  sub,
  elementwise_mul,
  scalar_mul,
  relu,
  sigmoid,
  exp,
  log,
  sum,
  mean,
  concat_rows,
  concat_cols,
  reshape,
  slice,
  add_rowwise,
  softmax_rows,
  row_distance,
  distance_ce,
  cosine_gram,
  frobenius_sq,
  clip,
};

const char* op_name(Op op);

/// Append-only tape. Ops record themselves on the active graph of the
/// current thread; backward replays the nodes in reverse append order,
/// accumulating (+=) into gradient buffers, so a tensor reachable along
/// several paths receives the sum over paths.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph();

  /// RAII: make this graph the active tape on the current thread.
  class Activate {
   public:
    explicit Activate(Graph& g);
    ~Activate();
    Activate(const Activate&) = delete;
    Activate& operator=(const Activate&) = delete;

   private:
    Graph* prev_;
  };

  /// RAII: suspend recording (values-only evaluation inside a live step).
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Graph* prev_;
  };

  static Graph* active();

  void backward(const Tensor& loss);
  std::size_t size() const { return nodes_.size(); }

  struct Node {
    Op op;
    std::vector<Tensor> in;
    Tensor out;
    double c0 = 0.0;        // scalar coefficient / clip lo / slice begin
    double c1 = 0.0;        // clip hi / slice end
    std::vector<int> idx;   // class labels for distance_ce
  };

  void record(Node node);

 private:
  std::vector<Node> nodes_;
};

// ---- differentiable operations ------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// add/sub/elementwise_mul accept equal shapes or scalar-with-tensor.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor elementwise_mul(const Tensor& a, const Tensor& b);
Tensor scalar_mul(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, Shape shape);
/// Row-major flat range [begin, end) as a rank-1 tensor.
Tensor slice(const Tensor& a, std::int64_t begin, std::int64_t end);
/// [n,d] + [d], bias added to every row.
Tensor add_rowwise(const Tensor& a, const Tensor& bias);
/// Max-subtraction stabilized softmax over each row.
Tensor softmax_rows(const Tensor& logits);
/// Euclidean distance between every row of a [n,d] and every row of p [K,d].
Tensor row_distance(const Tensor& a, const Tensor& p);
/// Per-row -log( exp(-dist[y]) / sum_k exp(-dist[k]) ), output shape {n}.
Tensor distance_ce(const Tensor& dist, const std::vector<int>& labels);
Tensor distance_ce(const Tensor& dist_row, int label);  // single row, scalar out
/// Pairwise cosine similarity of rows; diagonal exactly 1.
Tensor cosine_gram(const Tensor& p);
Tensor frobenius_sq(const Tensor& m);
/// Identity forward, zero backward: result is a plain leaf.
Tensor stop_gradient(const Tensor& a);
Tensor clip(const Tensor& a, double lo, double hi);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise_mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scalar_mul(a, c); }

/// Closed primitive set exposed under one dispatching entry point.
/// scalar_mul expects inputs[1] to be a one-element tensor.
enum class Primitive {
  matmul,
  add,
  sub,
  elementwise_mul,
  scalar_mul,
  relu,
  sigmoid,
  exp,
  log,
  sum,
  mean,
  concat_rows,
};
Tensor apply_primitive(Primitive kind, const std::vector<Tensor>& inputs);

}  // namespace aim

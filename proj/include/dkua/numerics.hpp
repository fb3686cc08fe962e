#pragma once

// Dense arithmetic with a reverse-mode tape. Values are row-major Eigen
// matrices; a rank-3 array B x N x D is stored as a (B*N) x D matrix and a
// vector of length B as a B x 1 column.

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dkua/errors.hpp"

namespace dkua {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Tensor = MatrixX<double>;

/// Trainable array. Frozen parameters are bound to a graph as constants, so
/// they never receive gradient and the optimizer never sees them.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Graph;

/// Handle to a node on a Graph tape. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, int id) : graph_(graph), id_(id) {}

  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  const Tensor& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  /// Receives the upstream gradient of the node and one accumulator per input
  /// (nullptr when that input does not require gradient).
  using BackwardFn = std::function<void(const Tensor& upstream, std::span<Tensor* const> input_grads)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Differentiable leaf that is not tied to a Parameter (used by oracles).
  Var variable(Tensor value);
  Var parameter(Parameter& p);

  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op);

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  /// Gradient of the last backward root w.r.t. v (zeros if unreachable).
  Tensor grad(Var v) const;

  /// Reverse sweep from a 1x1 node. Gradients are accumulated into the
  /// `grad` of every updatable bound Parameter.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }

  /// Detached values in creation order. Feeding a previous graph's record
  /// back through replay_detached makes `detach` return those values instead,
  /// so finite differences see stop-gradient targets as true constants.
  const std::vector<Tensor>& detached() const { return detached_; }
  void replay_detached(std::vector<Tensor> values) {
    replay_ = std::move(values);
    replaying_ = true;
  }
  Var detach_value(const Tensor& value);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    const char* op = "";
  };

  std::size_t check(Var v) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> detached_;
  std::vector<Tensor> replay_;
  bool replaying_ = false;
};

// ---------------------------------------------------------------------------
// Value-level kernels, usable on any Eigen expression.

template <typename Derived>
Tensor covariance(const Eigen::MatrixBase<Derived>& x) {
  if (x.rows() < 2) {
    throw InsufficientSamplesError("covariance needs at least 2 rows, got " + std::to_string(x.rows()));
  }
  const Tensor centered = x.rowwise() - x.colwise().mean();
  Tensor cov = (centered.transpose() * centered) / static_cast<double>(x.rows() - 1);
  // Exact symmetry: copy the lower triangle over the upper one.
  cov.template triangularView<Eigen::StrictlyUpper>() = cov.transpose();
  return cov;
}

template <typename Derived>
Tensor softmax(const Eigen::MatrixBase<Derived>& v, int axis) {
  Tensor out(v.rows(), v.cols());
  if (axis == 1) {
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
      const double m = v.row(r).maxCoeff();
      out.row(r) = (v.row(r).array() - m).exp().matrix();
      out.row(r) /= out.row(r).sum();
    }
  } else if (axis == 0) {
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      const double m = v.col(c).maxCoeff();
      out.col(c) = (v.col(c).array() - m).exp().matrix();
      out.col(c) /= out.col(c).sum();
    }
  } else {
    throw DimensionError("softmax axis must be 0 or 1");
  }
  return out;
}

inline constexpr double kKlRegularizer = 1e-6;
inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kNormEpsilon = 1e-12;

/// KL(N(0, s1) || N(0, s2)) on the symmetric parts of s1, s2 after adding
/// kKlRegularizer * I.
double gaussian_kl(const Tensor& s1, const Tensor& s2);

/// sum p ln(p / max(q, floor)) with 0 ln 0 = 0. Both arguments are read as
/// flat vectors and must lie on the simplex within 1e-6.
double kl_discrete(const Tensor& p, const Tensor& q);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element.
Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// ---------------------------------------------------------------------------
// Differentiable operations.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// x (M x N) + row (1 x N), broadcast over rows.
Var add_row(Var x, Var row);
/// x (M x N) .* row (1 x N), broadcast over rows.
Var mul_row(Var x, Var row);
/// x ((B*N) x D) + block (N x D) repeated B times.
Var add_tiled(Var x, Var block);
/// x (M x N) with row m multiplied by w(m, 0).
Var scale_rows(Var x, Var w);
Var column(Var x, Eigen::Index j);
Var gelu(Var x);
/// Per-row standardization (biased variance), no affine terms.
Var layer_norm(Var x, double eps = 1e-5);
Var softmax(Var v, int axis);
/// axis 0 averages over rows (1 x N result), axis 1 over columns (M x 1).
Var mean(Var t, int axis);
Var mean_all(Var t);
Var sum(Var t);
/// Averages each contiguous group of `group` rows: (B*group) x D -> B x D.
Var segment_mean(Var x, Eigen::Index group);
/// Multi-head scaled dot-product attention over sequences of `tokens` rows.
Var attention(Var q, Var k, Var v, Eigen::Index tokens, Eigen::Index heads);
/// Cosine between matching rows: B x D, B x D -> B x 1.
Var rowwise_cosine(Var a, Var b);
Var covariance(Var x);
Var gaussian_kl(Var s1, Var s2);
Var kl_discrete(Var p, Var q);
/// Copies the value into a constant node; gradient does not flow back.
Var detach(Var x);

}  // namespace dkua

#include "dkua/numerics.hpp"

#include <algorithm>
#include <numbers>

namespace dkua {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

Graph& graph_of(Var a) {
  if (a.graph() == nullptr) throw UsageError("operation on an unbound Var");
  return *a.graph();
}

Graph& graph_of(Var a, Var b) {
  if (a.graph() != b.graph()) throw UsageError("operands belong to different graphs");
  return graph_of(a);
}

void accumulate(Tensor* slot, const Tensor& g) {
  if (slot != nullptr) *slot += g;
}

Tensor symmetric_part(const Tensor& s) { return 0.5 * (s + s.transpose()); }

struct SpdFactor {
  Eigen::LLT<Tensor> llt;
  double log_det = 0.0;
};

SpdFactor factor_regularized(const Tensor& s, const char* which) {
  Tensor reg = symmetric_part(s);
  reg.diagonal().array() += kKlRegularizer;
  SpdFactor f;
  f.llt.compute(reg);
  if (f.llt.info() != Eigen::Success) {
    throw NumericalError(std::string("gaussian_kl: factorization of ") + which + " failed after regularization");
  }
  f.log_det = 2.0 * f.llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  return f;
}

void check_simplex(const Tensor& v, const char* which) {
  if ((v.array() < -1e-6).any() || std::abs(v.sum() - 1.0) > 1e-6) {
    throw ValidationError(std::string("kl_discrete: ") + which + " is not on the probability simplex");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const {
  if (graph_ == nullptr) throw UsageError("unbound Var");
  return graph_->value(*this);
}

double Var::scalar() const {
  const Tensor& v = value();
  if (v.size() != 1) throw DimensionError("scalar() on a non-scalar node");
  return v(0, 0);
}

std::size_t Graph::check(Var v) const {
  if (v.graph() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
    throw UsageError("Var does not belong to this graph");
  }
  return static_cast<std::size_t>(v.id());
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::variable(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  n.op = "variable";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = !p.frozen;
  n.param = p.frozen ? nullptr : &p;
  n.op = "parameter";
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  if (!value.allFinite()) throw NumericalError(std::string(op) + ": non-finite result", op);
  Node n;
  n.value = std::move(value);
  n.op = op;
  for (const Var& in : inputs) {
    const std::size_t id = check(in);
    n.inputs.push_back(static_cast<int>(id));
    n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[check(v)];
  if (n.grad.size() == 0) return Tensor::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Graph::backward(Var loss) {
  const std::size_t root = check(loss);
  if (nodes_[root].value.size() != 1) throw UsageError("backward requires a scalar root");
  if (!std::isfinite(nodes_[root].value(0, 0))) throw NumericalError("backward from a non-finite loss");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  if (!nodes_[root].requires_grad) return;

  nodes_[root].grad = Tensor::Ones(1, 1);
  std::vector<Tensor*> slots;
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) {
      slots.clear();
      for (int in : n.inputs) {
        Node& src = nodes_[static_cast<std::size_t>(in)];
        if (!src.requires_grad) {
          slots.push_back(nullptr);
          continue;
        }
        if (src.grad.size() == 0) src.grad = Tensor::Zero(src.value.rows(), src.value.cols());
        slots.push_back(&src.grad);
      }
      n.backward(n.grad, slots);
    }
    if (n.param != nullptr) {
      if (n.param->grad.rows() != n.value.rows() || n.param->grad.cols() != n.value.cols()) {
        n.param->zero_grad();
      }
      n.param->grad += n.grad;
    }
  }
}

// ---------------------------------------------------------------------------
// Value-level kernels

double gaussian_kl(const Tensor& s1, const Tensor& s2) {
  require_same_shape(s1, s2, "gaussian_kl");
  if (s1.rows() != s1.cols()) throw DimensionError("gaussian_kl: covariances must be square");
  const SpdFactor f1 = factor_regularized(s1, "first argument");
  const SpdFactor f2 = factor_regularized(s2, "second argument");
  Tensor a1 = symmetric_part(s1);
  a1.diagonal().array() += kKlRegularizer;
  const double trace = f2.llt.solve(a1).trace();
  const double d = static_cast<double>(s1.rows());
  return 0.5 * (trace - d + f2.log_det - f1.log_det);
}

double kl_discrete(const Tensor& p, const Tensor& q) {
  require_same_shape(p, q, "kl_discrete");
  check_simplex(p, "p");
  check_simplex(q, "q");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pi = p.data()[i];
    if (pi <= 0.0) continue;
    acc += pi * std::log(pi / std::max(q.data()[i], kProbabilityFloor));
  }
  return acc;
}

Tensor finite_diff_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor g(x.rows(), x.cols());
  Tensor probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + h;
    const double up = f(probe);
    probe.data()[i] = orig - h;
    const double down = f(probe);
    probe.data()[i] = orig;
    g.data()[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Differentiable operations

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner extents differ (" + std::to_string(av.cols()) + " vs " +
                         std::to_string(bv.rows()) + ")");
  }
  Tensor out = av * bv;
  return g.record(std::move(out), {a, b},
                  [av, bv](const Tensor& up, std::span<Tensor* const> grads) {
                    if (grads[0]) grads[0]->noalias() += up * bv.transpose();
                    if (grads[1]) grads[1]->noalias() += av.transpose() * up;
                  },
                  "matmul");
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  return g.record(a.value() + b.value(), {a, b},
                  [](const Tensor& up, std::span<Tensor* const> grads) {
                    accumulate(grads[0], up);
                    accumulate(grads[1], up);
                  },
                  "add");
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  return g.record(a.value() - b.value(), {a, b},
                  [](const Tensor& up, std::span<Tensor* const> grads) {
                    accumulate(grads[0], up);
                    if (grads[1]) *grads[1] -= up;
                  },
                  "sub");
}

Var hadamard(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "hadamard");
  return g.record(av.cwiseProduct(bv), {a, b},
                  [av, bv](const Tensor& up, std::span<Tensor* const> grads) {
                    if (grads[0]) *grads[0] += up.cwiseProduct(bv);
                    if (grads[1]) *grads[1] += up.cwiseProduct(av);
                  },
                  "hadamard");
}

Var scale(Var a, double s) {
  return graph_of(a).record(a.value() * s, {a},
                            [s](const Tensor& up, std::span<Tensor* const> grads) {
                              if (grads[0]) *grads[0] += up * s;
                            },
                            "scale");
}

Var add_scalar(Var a, double s) {
  Tensor out = a.value().array() + s;
  return graph_of(a).record(std::move(out), {a},
                            [](const Tensor& up, std::span<Tensor* const> grads) { accumulate(grads[0], up); },
                            "add_scalar");
}

Var add_row(Var x, Var row) {
  Graph& g = graph_of(x, row);
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) throw DimensionError("add_row: row must be 1 x cols(x)");
  Tensor out = xv.rowwise() + rv.row(0);
  return g.record(std::move(out), {x, row},
                  [](const Tensor& up, std::span<Tensor* const> grads) {
                    accumulate(grads[0], up);
                    if (grads[1]) *grads[1] += up.colwise().sum();
                  },
                  "add_row");
}

Var mul_row(Var x, Var row) {
  Graph& g = graph_of(x, row);
  const Tensor& xv = x.value();
  const Tensor& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols()) throw DimensionError("mul_row: row must be 1 x cols(x)");
  Tensor out = xv.array().rowwise() * rv.row(0).array();
  return g.record(std::move(out), {x, row},
                  [xv, rv](const Tensor& up, std::span<Tensor* const> grads) {
                    if (grads[0]) grads[0]->array() += up.array().rowwise() * rv.row(0).array();
                    if (grads[1]) *grads[1] += up.cwiseProduct(xv).colwise().sum();
                  },
                  "mul_row");
}

Var add_tiled(Var x, Var block) {
  Graph& g = graph_of(x, block);
  const Tensor& xv = x.value();
  const Tensor& bv = block.value();
  const Eigen::Index n = bv.rows();
  if (bv.cols() != xv.cols() || n == 0 || xv.rows() % n != 0) {
    throw DimensionError("add_tiled: block does not tile x");
  }
  const Eigen::Index reps = xv.rows() / n;
  Tensor out = xv;
  for (Eigen::Index r = 0; r < reps; ++r) out.middleRows(r * n, n) += bv;
  return g.record(std::move(out), {x, block},
                  [n, reps](const Tensor& up, std::span<Tensor* const> grads) {
                    accumulate(grads[0], up);
                    if (grads[1]) {
                      for (Eigen::Index r = 0; r < reps; ++r) *grads[1] += up.middleRows(r * n, n);
                    }
                  },
                  "add_tiled");
}

Var scale_rows(Var x, Var w) {
  Graph& g = graph_of(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.cols() != 1 || wv.rows() != xv.rows()) throw DimensionError("scale_rows: weights must be rows(x) x 1");
  Tensor out = xv.array().colwise() * wv.col(0).array();
  return g.record(std::move(out), {x, w},
                  [xv, wv](const Tensor& up, std::span<Tensor* const> grads) {
                    if (grads[0]) grads[0]->array() += up.array().colwise() * wv.col(0).array();
                    if (grads[1]) *grads[1] += up.cwiseProduct(xv).rowwise().sum();
                  },
                  "scale_rows");
}

Var column(Var x, Eigen::Index j) {
  const Tensor& xv = x.value();
  if (j < 0 || j >= xv.cols()) throw DimensionError("column: index out of range");
  return graph_of(x).record(xv.col(j), {x},
                            [j](const Tensor& up, std::span<Tensor* const> grads) {
                              if (grads[0]) grads[0]->col(j) += up.col(0);
                            },
                            "column");
}

Var gelu(Var x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2 / pi)
  constexpr double c = 0.044715;
  const Tensor& xv = x.value();
  const Eigen::ArrayXXd xa = xv.array();
  const Eigen::ArrayXXd inner = k * (xa + c * xa.cube());
  const Eigen::ArrayXXd th = inner.tanh();
  Tensor out = (0.5 * xa * (1.0 + th)).matrix();
  Tensor deriv = (0.5 * (1.0 + th) + 0.5 * xa * (1.0 - th.square()) * k * (1.0 + 3.0 * c * xa.square())).matrix();
  return graph_of(x).record(std::move(out), {x},
                            [deriv](const Tensor& up, std::span<Tensor* const> grads) {
                              if (grads[0]) *grads[0] += up.cwiseProduct(deriv);
                            },
                            "gelu");
}

Var layer_norm(Var x, double eps) {
  const Tensor& xv = x.value();
  const Eigen::Index d = xv.cols();
  Tensor normalized(xv.rows(), d);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    normalized.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Tensor y = normalized;
  return graph_of(x).record(std::move(normalized), {x},
                            [y, inv_std](const Tensor& up, std::span<Tensor* const> grads) {
                              if (!grads[0]) return;
                              for (Eigen::Index r = 0; r < y.rows(); ++r) {
                                const double mean_up = up.row(r).mean();
                                const double mean_up_y = up.row(r).dot(y.row(r)) / static_cast<double>(y.cols());
                                grads[0]->row(r).array() +=
                                    inv_std(r) * (up.row(r).array() - mean_up - y.row(r).array() * mean_up_y);
                              }
                            },
                            "layer_norm");
}

Var softmax(Var v, int axis) {
  Tensor out = softmax(v.value(), axis);
  Tensor y = out;
  return graph_of(v).record(std::move(out), {v},
                            [y, axis](const Tensor& up, std::span<Tensor* const> grads) {
                              if (!grads[0]) return;
                              const Tensor prod = up.cwiseProduct(y);
                              if (axis == 1) {
                                const Eigen::VectorXd dot = prod.rowwise().sum();
                                *grads[0] += y.cwiseProduct((up.colwise() - dot).eval());
                              } else {
                                const Eigen::RowVectorXd dot = prod.colwise().sum();
                                *grads[0] += y.cwiseProduct((up.rowwise() - dot).eval());
                              }
                            },
                            "softmax");
}

Var mean(Var t, int axis) {
  const Tensor& tv = t.value();
  if (axis == 0) {
    const double n = static_cast<double>(tv.rows());
    return graph_of(t).record(tv.colwise().mean(), {t},
                              [n](const Tensor& up, std::span<Tensor* const> grads) {
                                if (grads[0]) grads[0]->rowwise() += up.row(0) / n;
                              },
                              "mean");
  }
  if (axis == 1) {
    const double n = static_cast<double>(tv.cols());
    return graph_of(t).record(tv.rowwise().mean(), {t},
                              [n](const Tensor& up, std::span<Tensor* const> grads) {
                                if (grads[0]) grads[0]->colwise() += up.col(0) / n;
                              },
                              "mean");
  }
  throw DimensionError("mean axis must be 0 or 1");
}

Var mean_all(Var t) {
  const Tensor& tv = t.value();
  const double n = static_cast<double>(tv.size());
  Tensor out(1, 1);
  out(0, 0) = tv.mean();
  return graph_of(t).record(std::move(out), {t},
                            [n](const Tensor& up, std::span<Tensor* const> grads) {
                              if (grads[0]) grads[0]->array() += up(0, 0) / n;
                            },
                            "mean_all");
}

Var sum(Var t) {
  Tensor out(1, 1);
  out(0, 0) = t.value().sum();
  return graph_of(t).record(std::move(out), {t},
                            [](const Tensor& up, std::span<Tensor* const> grads) {
                              if (grads[0]) grads[0]->array() += up(0, 0);
                            },
                            "sum");
}

Var segment_mean(Var x, Eigen::Index group) {
  const Tensor& xv = x.value();
  if (group <= 0 || xv.rows() % group != 0) throw DimensionError("segment_mean: group does not divide rows");
  const Eigen::Index segments = xv.rows() / group;
  Tensor out(segments, xv.cols());
  for (Eigen::Index s = 0; s < segments; ++s) out.row(s) = xv.middleRows(s * group, group).colwise().mean();
  return graph_of(x).record(std::move(out), {x},
                            [group, segments](const Tensor& up, std::span<Tensor* const> grads) {
                              if (!grads[0]) return;
                              const double inv = 1.0 / static_cast<double>(group);
                              for (Eigen::Index s = 0; s < segments; ++s) {
                                grads[0]->middleRows(s * group, group).rowwise() += up.row(s) * inv;
                              }
                            },
                            "segment_mean");
}

Var attention(Var q, Var k, Var v, Eigen::Index tokens, Eigen::Index heads) {
  Graph& g = graph_of(q, k);
  graph_of(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_same_shape(qv, kv, "attention");
  require_same_shape(qv, vv, "attention");
  const Eigen::Index d = qv.cols();
  if (tokens <= 0 || qv.rows() % tokens != 0) throw DimensionError("attention: tokens does not divide rows");
  if (heads <= 0 || d % heads != 0) throw DimensionError("attention: heads does not divide width");
  const Eigen::Index batch = qv.rows() / tokens;
  const Eigen::Index dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Tensor> probs(static_cast<std::size_t>(batch * heads));
  Tensor out(qv.rows(), d);
  for (Eigen::Index b = 0; b < batch; ++b) {
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto qb = qv.block(b * tokens, h * dh, tokens, dh);
      const auto kb = kv.block(b * tokens, h * dh, tokens, dh);
      const auto vb = vv.block(b * tokens, h * dh, tokens, dh);
      Tensor p = softmax((qb * kb.transpose() * inv_sqrt).eval(), 1);
      out.block(b * tokens, h * dh, tokens, dh) = p * vb;
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(p);
    }
  }
  return g.record(
      std::move(out), {q, k, v},
      [qv, kv, vv, probs = std::move(probs), tokens, heads, batch, dh, inv_sqrt](
          const Tensor& up, std::span<Tensor* const> grads) {
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Tensor& p = probs[static_cast<std::size_t>(b * heads + h)];
            const Tensor dout = up.block(b * tokens, h * dh, tokens, dh);
            const auto qb = qv.block(b * tokens, h * dh, tokens, dh);
            const auto kb = kv.block(b * tokens, h * dh, tokens, dh);
            const auto vb = vv.block(b * tokens, h * dh, tokens, dh);
            if (grads[2]) grads[2]->block(b * tokens, h * dh, tokens, dh) += p.transpose() * dout;
            if (!grads[0] && !grads[1]) continue;
            const Tensor dp = dout * vb.transpose();
            const Eigen::VectorXd dot = dp.cwiseProduct(p).rowwise().sum();
            const Tensor ds = p.cwiseProduct((dp.colwise() - dot).eval()) * inv_sqrt;
            if (grads[0]) grads[0]->block(b * tokens, h * dh, tokens, dh) += ds * kb;
            if (grads[1]) grads[1]->block(b * tokens, h * dh, tokens, dh) += ds.transpose() * qb;
          }
        }
      },
      "attention");
}

Var rowwise_cosine(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "rowwise_cosine");
  const Eigen::VectorXd na = av.rowwise().norm();
  const Eigen::VectorXd nb = bv.rowwise().norm();
  if ((na.array() <= kNormEpsilon).any() || (nb.array() <= kNormEpsilon).any()) {
    throw DegenerateInputError("rowwise_cosine: row norm below 1e-12");
  }
  Tensor out(av.rows(), 1);
  for (Eigen::Index r = 0; r < av.rows(); ++r) {
    out(r, 0) = std::clamp(av.row(r).dot(bv.row(r)) / (na(r) * nb(r)), -1.0, 1.0);
  }
  Tensor c = out;
  return g.record(std::move(out), {a, b},
                  [av, bv, na, nb, c](const Tensor& up, std::span<Tensor* const> grads) {
                    for (Eigen::Index r = 0; r < av.rows(); ++r) {
                      const double gr = up(r, 0);
                      if (grads[0]) {
                        grads[0]->row(r) += gr * (bv.row(r) / (na(r) * nb(r)) - c(r, 0) * av.row(r) / (na(r) * na(r)));
                      }
                      if (grads[1]) {
                        grads[1]->row(r) += gr * (av.row(r) / (na(r) * nb(r)) - c(r, 0) * bv.row(r) / (nb(r) * nb(r)));
                      }
                    }
                  },
                  "rowwise_cosine");
}

Var covariance(Var x) {
  const Tensor& xv = x.value();
  Tensor out = covariance(xv);
  const Tensor centered = xv.rowwise() - xv.colwise().mean();
  const double denom = static_cast<double>(xv.rows() - 1);
  return graph_of(x).record(std::move(out), {x},
                            [centered, denom](const Tensor& up, std::span<Tensor* const> grads) {
                              if (grads[0]) grads[0]->noalias() += centered * (up + up.transpose()) / denom;
                            },
                            "covariance");
}

Var gaussian_kl(Var s1, Var s2) {
  Graph& g = graph_of(s1, s2);
  const Tensor& v1 = s1.value();
  const Tensor& v2 = s2.value();
  Tensor out(1, 1);
  out(0, 0) = gaussian_kl(v1, v2);
  const Eigen::Index d = v1.rows();
  const SpdFactor f1 = factor_regularized(v1, "first argument");
  const SpdFactor f2 = factor_regularized(v2, "second argument");
  const Tensor inv1 = f1.llt.solve(Tensor::Identity(d, d));
  const Tensor inv2 = f2.llt.solve(Tensor::Identity(d, d));
  Tensor a1 = symmetric_part(v1);
  a1.diagonal().array() += kKlRegularizer;
  // d/dA1 = (A2^-1 - A1^-1)/2 ; d/dA2 = (A2^-1 - A2^-1 A1 A2^-1)/2. Both are
  // symmetric, so they pass unchanged through the symmetrization.
  Tensor g1 = symmetric_part(0.5 * (inv2 - inv1));
  Tensor g2 = symmetric_part(0.5 * (inv2 - inv2 * a1 * inv2));
  return g.record(std::move(out), {s1, s2},
                  [g1, g2](const Tensor& up, std::span<Tensor* const> grads) {
                    if (grads[0]) *grads[0] += up(0, 0) * g1;
                    if (grads[1]) *grads[1] += up(0, 0) * g2;
                  },
                  "gaussian_kl");
}

Var kl_discrete(Var p, Var q) {
  Graph& g = graph_of(p, q);
  const Tensor& pv = p.value();
  const Tensor& qv = q.value();
  Tensor out(1, 1);
  out(0, 0) = kl_discrete(pv, qv);
  return g.record(std::move(out), {p, q},
                  [pv, qv](const Tensor& up, std::span<Tensor* const> grads) {
                    const double s = up(0, 0);
                    for (Eigen::Index i = 0; i < pv.size(); ++i) {
                      const double pi = pv.data()[i];
                      const double qi = std::max(qv.data()[i], kProbabilityFloor);
                      if (grads[0] && pi > 0.0) grads[0]->data()[i] += s * (std::log(pi / qi) + 1.0);
                      if (grads[1] && qv.data()[i] > kProbabilityFloor) grads[1]->data()[i] -= s * pi / qi;
                    }
                  },
                  "kl_discrete");
}

Var Graph::detach_value(const Tensor& value) {
  if (replaying_) {
    const std::size_t i = detached_.size();
    if (i >= replay_.size() || replay_[i].rows() != value.rows() || replay_[i].cols() != value.cols()) {
      throw StateError("detach replay does not match the recorded graph");
    }
    detached_.push_back(replay_[i]);
  } else {
    detached_.push_back(value);
  }
  return constant(detached_.back());
}

Var detach(Var x) { return graph_of(x).detach_value(x.value()); }

}  // namespace dkua

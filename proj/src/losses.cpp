#include "dkua/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dkua {

void LossConfig::validate() const {
  if (!(margin >= 0.0)) throw ConfigError("triplet margin must be non-negative");
  if (!(temperature > 0.0)) throw ConfigError("association temperature must be positive");
  if (ka_weight < 0.0 || uka_weight < 0.0 || dkt_weight < 0.0) throw ConfigError("loss weights must be non-negative");
}

Var cross_entropy(Var probs, std::span<const int> labels) {
  const Tensor& p = probs.value();
  if (static_cast<Eigen::Index>(labels.size()) != p.rows()) throw DimensionError("cross_entropy: label count");
  const double batch = static_cast<double>(p.rows());
  Tensor out(1, 1);
  out(0, 0) = 0.0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= p.cols()) {
      throw ValidationError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(p.cols()) + ")");
    }
    out(0, 0) -= std::log(std::max(p(r, y), kProbabilityFloor));
  }
  out(0, 0) /= batch;
  std::vector<int> ys(labels.begin(), labels.end());
  return probs.graph()->record(std::move(out), {probs},
                               [p, ys, batch](const Tensor& up, std::span<Tensor* const> grads) {
                                 if (!grads[0]) return;
                                 for (Eigen::Index r = 0; r < p.rows(); ++r) {
                                   const double pr = p(r, ys[static_cast<std::size_t>(r)]);
                                   if (pr > kProbabilityFloor) {
                                     (*grads[0])(r, ys[static_cast<std::size_t>(r)]) -= up(0, 0) / (batch * pr);
                                   }
                                 }
                               },
                               "cross_entropy");
}

Var triplet(Var embeddings, std::span<const int> labels, double margin) {
  const Tensor& x = embeddings.value();
  const Eigen::Index b = x.rows();
  if (static_cast<Eigen::Index>(labels.size()) != b) throw DimensionError("triplet: label count");

  const Eigen::VectorXd sq = x.rowwise().squaredNorm();
  Tensor dist = (-2.0 * x * x.transpose()).colwise() + sq;
  dist.rowwise() += sq.transpose();

  struct Active {
    Eigen::Index anchor, positive, negative;
  };
  std::vector<Active> active;
  Eigen::Index valid = 0;
  double acc = 0.0;
  for (Eigen::Index a = 0; a < b; ++a) {
    Eigen::Index pos = -1;
    Eigen::Index neg = -1;
    for (Eigen::Index j = 0; j < b; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (pos < 0 || dist(a, j) > dist(a, pos)) pos = j;
      } else if (neg < 0 || dist(a, j) < dist(a, neg)) {
        neg = j;
      }
    }
    if (pos < 0 || neg < 0) continue;
    ++valid;
    // Recompute from the rows so identical vectors give exactly zero.
    const double dp = (x.row(a) - x.row(pos)).squaredNorm();
    const double dn = (x.row(a) - x.row(neg)).squaredNorm();
    const double hinge = dp - dn + margin;
    if (hinge > 0.0) {
      acc += hinge;
      active.push_back({a, pos, neg});
    }
  }
  if (valid == 0) throw DegenerateInputError("triplet: no anchor has both a positive and a negative");

  Tensor out(1, 1);
  out(0, 0) = acc / static_cast<double>(valid);
  const double inv = 1.0 / static_cast<double>(valid);
  return embeddings.graph()->record(std::move(out), {embeddings},
                                    [x, active, inv](const Tensor& up, std::span<Tensor* const> grads) {
                                      if (!grads[0]) return;
                                      const double s = 2.0 * up(0, 0) * inv;
                                      for (const Active& t : active) {
                                        const Eigen::RowVectorXd to_pos = x.row(t.anchor) - x.row(t.positive);
                                        const Eigen::RowVectorXd to_neg = x.row(t.anchor) - x.row(t.negative);
                                        grads[0]->row(t.anchor) += s * (to_pos - to_neg);
                                        grads[0]->row(t.positive) -= s * to_pos;
                                        grads[0]->row(t.negative) += s * to_neg;
                                      }
                                    },
                                    "triplet");
}

Var reid_loss(Var probs, std::span<const int> labels, Var embeddings, double margin) {
  return add(cross_entropy(probs, labels), triplet(embeddings, labels, margin));
}

AlignmentResult ka_loss(Graph& g, std::span<const Var> domain_reprs) {
  if (domain_reprs.empty()) throw StateError("ka_loss needs at least one domain representation");
  AlignmentResult result;
  const std::size_t t = domain_reprs.size();
  if (t == 1) {
    result.loss = g.constant(Tensor::Zero(1, 1));
    return result;
  }
  const Var current = domain_reprs[t - 1];
  Var acc;
  for (std::size_t j = 0; j + 1 < t; ++j) {
    Var s = rowwise_cosine(current, domain_reprs[j]);
    result.similarities.push_back(s);
    Var distance = mean_all(add_scalar(scale(s, -1.0), 1.0));
    acc = (j == 0) ? distance : add(acc, distance);
  }
  result.loss = scale(acc, 1.0 / static_cast<double>(t - 1));
  return result;
}

Var association(Var domain_repr, Var unified, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("association temperature must be positive");
  return softmax(scale(rowwise_cosine(domain_repr, unified), 1.0 / temperature), 0);
}

Var uka_loss(Graph& g, std::span<const Var> associations) {
  if (associations.empty()) throw StateError("uka_loss needs at least one association vector");
  const std::size_t t = associations.size();
  if (t == 1) return g.constant(Tensor::Zero(1, 1));
  const Var current = associations[t - 1];
  Var acc = kl_discrete(current, associations[0]);
  for (std::size_t i = 1; i + 1 < t; ++i) acc = add(acc, kl_discrete(current, associations[i]));
  return acc;
}

double total_loss(const LossBreakdown& parts) {
  const std::pair<const char*, double> terms[] = {
      {"L_ReID", parts.reid}, {"L_KA", parts.ka}, {"L_UKA", parts.uka}, {"L_DKT", parts.dkt}};
  for (const auto& [name, value] : terms) {
    if (!std::isfinite(value)) throw NumericalError(std::string("non-finite loss term ") + name, name);
  }
  return parts.reid + parts.ka + parts.uka + parts.dkt;
}

}  // namespace dkua

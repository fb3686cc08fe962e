#pragma once

#include <span>
#include <vector>

#include "dkua/numerics.hpp"

namespace dkua {

struct LossConfig {
  double margin = 0.3;
  double temperature = 0.1;
  // A zero weight removes the term from the objective; it is then logged as 0.
  double ka_weight = 1.0;
  double uka_weight = 1.0;
  double dkt_weight = 1.0;

  void validate() const;
};

struct LossBreakdown {
  double ce = 0.0;
  double tri = 0.0;
  double reid = 0.0;
  double ka = 0.0;
  double uka = 0.0;
  double dkt = 0.0;
  double total = 0.0;
};

/// Batch mean of -ln p[label], probabilities floored at 1e-12.
Var cross_entropy(Var probs, std::span<const int> labels);

/// Batch-hard triplet loss on squared Euclidean distances. Anchors without a
/// positive or a negative are skipped; a batch with no valid anchor throws
/// DegenerateInputError.
Var triplet(Var embeddings, std::span<const int> labels, double margin);

Var reid_loss(Var probs, std::span<const int> labels, Var embeddings, double margin);

struct AlignmentResult {
  Var loss;
  /// similarities[j] = per-instance cosine between theta^t and theta^(j+1).
  std::vector<Var> similarities;
};

/// Knowledge alignment between the current representation (last element) and
/// every previous one. Zero for a single domain.
AlignmentResult ka_loss(Graph& g, std::span<const Var> domain_reprs);

/// Softmax over the batch of cos(theta^i_b, theta_b) / temperature.
Var association(Var domain_repr, Var unified, double temperature);

/// Sum over previous domains of KL(A_current || A_i); the current domain's
/// association is the last element. Zero for a single domain.
Var uka_loss(Graph& g, std::span<const Var> associations);

/// ReID + KA + UKA + DKT. Throws NumericalError naming the first non-finite part.
double total_loss(const LossBreakdown& parts);

}  // namespace dkua

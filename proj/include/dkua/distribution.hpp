#pragma once

#include <vector>

#include "dkua/numerics.hpp"

namespace dkua {

/// Per-domain covariance history and its class-count-weighted running union.
///
/// Lifecycle per domain: open_domain -> accumulate* -> finalize_domain ->
/// unified_update. Finalized matrices are immutable.
class DomainStats {
 public:
  DomainStats() = default;
  explicit DomainStats(int dim) : dim_(dim) {}

  int dim() const { return dim_; }

  void open_domain();
  bool accumulating() const { return open_; }

  /// Single-pass pairwise (Chan) merge of a batch into the running count,
  /// mean and centered outer-product sum.
  void accumulate(const Tensor& batch);
  long long accumulated() const { return count_; }

  /// Stores the unbiased covariance of everything accumulated since
  /// open_domain, together with the domain's class count.
  const Tensor& finalize_domain(int class_count);

  /// Folds the latest finalized domain into the cumulative covariance.
  const Tensor& unified_update();

  int finalized_domains() const { return static_cast<int>(domain_cov_.size()); }
  int merged_domains() const { return merged_; }
  const std::vector<Tensor>& domain_covariances() const { return domain_cov_; }
  const std::vector<int>& class_counts() const { return class_counts_; }
  const Tensor& cumulative() const { return cumulative_; }
  long long cumulative_classes() const { return cumulative_classes_; }

  /// Rebuilds finalized state (used by checkpoint loading).
  static DomainStats restore(int dim, std::vector<Tensor> domain_cov, std::vector<int> class_counts, int merged,
                             Tensor cumulative);

 private:
  int dim_ = 0;
  bool open_ = false;
  long long count_ = 0;
  Eigen::RowVectorXd mean_;
  Tensor scatter_;

  std::vector<Tensor> domain_cov_;
  std::vector<int> class_counts_;
  int merged_ = 0;
  Tensor cumulative_;
  long long cumulative_classes_ = 0;
};

/// One step of the class-count-weighted covariance recurrence.
Tensor merge_covariance(const Tensor& history, long long history_classes, const Tensor& current,
                        long long current_classes);

/// KL(unified || batch) where `unified` folds a gradient-detached copy of
/// `batch_cov` (weighted by `current_classes`) into the stored history of
/// domains 1..t-1. Returns a zero constant for t <= 1.
Var dkt_loss(Graph& g, const DomainStats& stats, Var batch_cov, int t, int current_classes);

}  // namespace dkua

#include "dkua/distribution.hpp"

namespace dkua {

namespace {

void symmetrize(Tensor& m) { m.triangularView<Eigen::StrictlyUpper>() = m.transpose(); }

}  // namespace

void DomainStats::open_domain() {
  if (open_) throw ProtocolError("domain statistics already open");
  if (merged_ != finalized_domains()) throw ProtocolError("previous domain finalized but not merged");
  open_ = true;
  count_ = 0;
  mean_ = Eigen::RowVectorXd::Zero(dim_);
  scatter_ = Tensor::Zero(dim_, dim_);
}

void DomainStats::accumulate(const Tensor& batch) {
  if (!open_) throw ProtocolError("accumulate on a closed domain");
  if (batch.cols() != dim_) throw DimensionError("accumulate: batch width differs from statistics dim");
  if (batch.rows() == 0) return;
  const auto nb = static_cast<double>(batch.rows());
  const Eigen::RowVectorXd batch_mean = batch.colwise().mean();
  const Tensor centered = batch.rowwise() - batch_mean;
  const auto na = static_cast<double>(count_);
  const Eigen::RowVectorXd delta = batch_mean - mean_;
  const double total = na + nb;
  scatter_.noalias() += centered.transpose() * centered;
  scatter_.noalias() += (delta.transpose() * delta) * (na * nb / total);
  mean_ += delta * (nb / total);
  count_ += batch.rows();
}

const Tensor& DomainStats::finalize_domain(int class_count) {
  if (!open_) throw ProtocolError("finalize_domain without an open domain");
  if (count_ < 2) {
    throw InsufficientSamplesError("finalize_domain needs at least 2 instances, have " + std::to_string(count_));
  }
  if (class_count < 0) throw ValidationError("class count must be non-negative");
  Tensor cov = scatter_ / static_cast<double>(count_ - 1);
  symmetrize(cov);
  domain_cov_.push_back(std::move(cov));
  class_counts_.push_back(class_count);
  open_ = false;
  return domain_cov_.back();
}

Tensor merge_covariance(const Tensor& history, long long history_classes, const Tensor& current,
                        long long current_classes) {
  const long long total = history_classes + current_classes;
  if (total <= 0) throw ValidationError("cumulative class count is zero");
  Tensor out = (history * static_cast<double>(history_classes) + current * static_cast<double>(current_classes)) /
               static_cast<double>(total);
  symmetrize(out);
  return out;
}

const Tensor& DomainStats::unified_update() {
  if (merged_ >= finalized_domains()) throw ProtocolError("unified_update: no newly finalized domain");
  const Tensor& current = domain_cov_[static_cast<std::size_t>(merged_)];
  const int classes = class_counts_[static_cast<std::size_t>(merged_)];
  if (merged_ == 0) {
    if (classes <= 0) throw ValidationError("cumulative class count is zero");
    cumulative_ = current;
  } else {
    cumulative_ = merge_covariance(cumulative_, cumulative_classes_, current, classes);
  }
  cumulative_classes_ += classes;
  ++merged_;
  return cumulative_;
}

DomainStats DomainStats::restore(int dim, std::vector<Tensor> domain_cov, std::vector<int> class_counts, int merged,
                                 Tensor cumulative) {
  if (domain_cov.size() != class_counts.size() || merged < 0 || merged > static_cast<int>(domain_cov.size())) {
    throw IntegrityError("inconsistent domain statistics");
  }
  DomainStats s(dim);
  for (const Tensor& c : domain_cov) {
    if (c.rows() != dim || c.cols() != dim) throw IntegrityError("stored covariance has wrong shape");
  }
  s.domain_cov_ = std::move(domain_cov);
  s.class_counts_ = std::move(class_counts);
  s.merged_ = merged;
  s.cumulative_ = std::move(cumulative);
  for (int i = 0; i < merged; ++i) s.cumulative_classes_ += s.class_counts_[static_cast<std::size_t>(i)];
  return s;
}

Var dkt_loss(Graph& g, const DomainStats& stats, Var batch_cov, int t, int current_classes) {
  if (t <= 1) return g.constant(Tensor::Zero(1, 1));
  if (stats.merged_domains() != t - 1) {
    throw StateError("dkt_loss at domain " + std::to_string(t) + " needs history of " + std::to_string(t - 1) +
                     " domains, have " + std::to_string(stats.merged_domains()));
  }
  const Var held = detach(batch_cov);
  const Tensor target = merge_covariance(stats.cumulative(), stats.cumulative_classes(), held.value(), current_classes);
  return gaussian_kl(g.constant(target), batch_cov);
}

}  // namespace dkua

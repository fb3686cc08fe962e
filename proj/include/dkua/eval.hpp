#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "dkua/data.hpp"
#include "dkua/model.hpp"

namespace dkua {

enum class Representation {
  Unified,  // theta
  Current,  // theta^t of the newest transfer module
  Pooled,   // backbone output
};

struct EmbeddingSet {
  Tensor vectors;  // N x D
  std::vector<int> identities;
  std::vector<int> cameras;
  std::vector<int> domains;
  std::vector<Split> splits;

  std::size_t size() const { return identities.size(); }
  EmbeddingSet select(Split split) const;
};

/// Forward pass over every record with no parameter updates.
EmbeddingSet extract_embeddings(const DkuaModel& model, const Dataset& data,
                                Representation rep = Representation::Unified);

/// Gallery indices by descending cosine similarity to the query, ties broken
/// by ascending index. Entries sharing both identity and camera with the
/// query are dropped; nullopt when nothing is left.
std::optional<std::vector<std::size_t>> rank_gallery(const Eigen::RowVectorXd& query, int identity, int camera,
                                                     const EmbeddingSet& gallery);

/// Mean over relevant positions k of precision@k; nullopt without relevant entries.
std::optional<double> average_precision(std::span<const bool> relevant);

struct RetrievalMetrics {
  double map = 0.0;
  double rank1 = 0.0;
  std::size_t queries = 0;
};

/// Throws EvaluationError when every query is skipped.
RetrievalMetrics map_rank1(const EmbeddingSet& queries, const EmbeddingSet& gallery);

struct DomainMetrics {
  int domain = 0;
  bool seen = true;
  RetrievalMetrics metrics;
};

struct GroupAverage {
  double map = 0.0;
  double rank1 = 0.0;
};

struct MetricReport {
  std::vector<DomainMetrics> domains;
  std::optional<GroupAverage> seen;
  std::optional<GroupAverage> unseen;
};

/// Fills `seen` / `unseen` with unweighted means; an empty group stays empty.
void averages(MetricReport& report);

/// Evaluates every domain in `seen_domains` plus every domain without a train
/// split. Domains still ahead in the training sequence are skipped.
MetricReport evaluate(const DkuaModel& model, const Dataset& data, const std::set<int>& seen_domains,
                      Representation rep = Representation::Unified);

void export_embeddings(const std::filesystem::path& path, const EmbeddingSet& set);
EmbeddingSet load_embeddings(const std::filesystem::path& path);

}  // namespace dkua

#include "dkua/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>

namespace dkua {

namespace {

constexpr Eigen::Index kEvalBatch = 64;
constexpr char kEmbeddingHeader[] = "#dkua-embeddings v1";

}  // namespace

EmbeddingSet EmbeddingSet::select(Split split) const {
  EmbeddingSet out;
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < size(); ++i) {
    if (splits[i] != split) continue;
    rows.push_back(static_cast<Eigen::Index>(i));
    out.identities.push_back(identities[i]);
    out.cameras.push_back(cameras[i]);
    out.domains.push_back(domains[i]);
    out.splits.push_back(splits[i]);
  }
  out.vectors.resize(static_cast<Eigen::Index>(rows.size()), vectors.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.vectors.row(static_cast<Eigen::Index>(r)) = vectors.row(rows[r]);
  return out;
}

EmbeddingSet extract_embeddings(const DkuaModel& model, const Dataset& data, Representation rep) {
  if (model.domains < 1 || model.modules.empty()) throw StateError("extract_embeddings: model has no trained domain");
  // Graph binding takes mutable parameters; work on a private copy so the
  // caller's model is never touched.
  DkuaModel snapshot = model;
  const Eigen::Index n = static_cast<Eigen::Index>(data.images.size());
  const Eigen::Index dim = snapshot.config.backbone.dim;
  EmbeddingSet out;
  out.vectors.resize(n, dim);
  for (Eigen::Index start = 0; start < n; start += kEvalBatch) {
    const Eigen::Index count = std::min(kEvalBatch, n - start);
    Tensor images(count, snapshot.config.backbone.pixels());
    for (Eigen::Index i = 0; i < count; ++i) {
      const Image& img = data.images[static_cast<std::size_t>(start + i)];
      if (static_cast<Eigen::Index>(img.pixels.size()) != images.cols()) {
        throw ConfigError("image size does not match the model's backbone config");
      }
      images.row(i) = img.to_row();
    }
    Graph g;
    const ForwardOutputs f = model_forward(g, snapshot, images);
    const Var chosen = rep == Representation::Unified   ? f.unified
                       : rep == Representation::Current ? f.domain_reprs.back()
                                                        : f.pooled;
    out.vectors.middleRows(start, count) = chosen.value();
  }
  for (const IndexRecord& r : data.index.records) {
    out.identities.push_back(r.identity);
    out.cameras.push_back(r.camera);
    out.domains.push_back(r.domain);
    out.splits.push_back(r.split);
  }
  return out;
}

std::optional<std::vector<std::size_t>> rank_gallery(const Eigen::RowVectorXd& query, int identity, int camera,
                                                     const EmbeddingSet& gallery) {
  const double qn = query.norm();
  std::vector<std::size_t> kept;
  std::vector<double> score(gallery.size(), 0.0);
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    if (gallery.identities[i] == identity && gallery.cameras[i] == camera) continue;
    const auto row = gallery.vectors.row(static_cast<Eigen::Index>(i));
    const double denom = std::max(qn * row.norm(), kNormEpsilon);
    score[i] = query.dot(row) / denom;
    kept.push_back(i);
  }
  if (kept.empty()) return std::nullopt;
  std::stable_sort(kept.begin(), kept.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  return kept;
}

std::optional<double> average_precision(std::span<const bool> relevant) {
  double hits = 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < relevant.size(); ++k) {
    if (!relevant[k]) continue;
    hits += 1.0;
    acc += hits / static_cast<double>(k + 1);
  }
  if (hits == 0.0) return std::nullopt;
  return acc / hits;
}

RetrievalMetrics map_rank1(const EmbeddingSet& queries, const EmbeddingSet& gallery) {
  RetrievalMetrics m;
  double ap_sum = 0.0;
  double top1 = 0.0;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    const auto ranked = rank_gallery(queries.vectors.row(static_cast<Eigen::Index>(q)), queries.identities[q],
                                     queries.cameras[q], gallery);
    if (!ranked) continue;
    const std::size_t n = ranked->size();
    std::unique_ptr<bool[]> relevant(new bool[n]);
    for (std::size_t k = 0; k < n; ++k) relevant[k] = gallery.identities[(*ranked)[k]] == queries.identities[q];
    const auto ap = average_precision(std::span<const bool>(relevant.get(), n));
    if (!ap) continue;
    ap_sum += *ap;
    top1 += relevant[0] ? 1.0 : 0.0;
    ++m.queries;
  }
  if (m.queries == 0) throw EvaluationError("every query was skipped");
  m.map = ap_sum / static_cast<double>(m.queries);
  m.rank1 = top1 / static_cast<double>(m.queries);
  return m;
}

void averages(MetricReport& report) {
  GroupAverage seen;
  GroupAverage unseen;
  int ns = 0;
  int nu = 0;
  for (const DomainMetrics& d : report.domains) {
    GroupAverage& g = d.seen ? seen : unseen;
    g.map += d.metrics.map;
    g.rank1 += d.metrics.rank1;
    ++(d.seen ? ns : nu);
  }
  report.seen.reset();
  report.unseen.reset();
  if (ns > 0) report.seen = GroupAverage{seen.map / ns, seen.rank1 / ns};
  if (nu > 0) report.unseen = GroupAverage{unseen.map / nu, unseen.rank1 / nu};
}

MetricReport evaluate(const DkuaModel& model, const Dataset& data, const std::set<int>& seen_domains,
                      Representation rep) {
  MetricReport report;
  for (int domain : data.index.domains()) {
    const bool seen = seen_domains.count(domain) > 0;
    if (!seen && data.index.has_train(domain)) continue;
    Dataset subset;
    for (std::size_t i = 0; i < data.index.records.size(); ++i) {
      const IndexRecord& r = data.index.records[i];
      if (r.domain != domain || r.split == Split::Train) continue;
      subset.index.records.push_back(r);
      subset.images.push_back(data.images[i]);
    }
    if (subset.images.empty()) continue;
    const EmbeddingSet all = extract_embeddings(model, subset, rep);
    DomainMetrics dm;
    dm.domain = domain;
    dm.seen = seen;
    dm.metrics = map_rank1(all.select(Split::Query), all.select(Split::Gallery));
    report.domains.push_back(dm);
  }
  averages(report);
  return report;
}

void export_embeddings(const std::filesystem::path& path, const EmbeddingSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write embeddings " + path.string());
  out << kEmbeddingHeader << "\tdim=" << set.vectors.cols() << '\n';
  char buf[32];
  for (std::size_t i = 0; i < set.size(); ++i) {
    out << set.identities[i] << '\t' << set.cameras[i] << '\t' << set.domains[i];
    for (Eigen::Index c = 0; c < set.vectors.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", set.vectors(static_cast<Eigen::Index>(i), c));
      out << '\t' << buf;
    }
    out << '\n';
  }
}

EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read embeddings " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing embedding header", 1);
  const std::string prefix = std::string(kEmbeddingHeader) + "\tdim=";
  if (line.rfind(prefix, 0) != 0) throw ParseError("bad embedding header", 1);
  const Eigen::Index dim = std::stol(line.substr(prefix.size()));
  std::vector<std::vector<double>> rows;
  EmbeddingSet set;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (static_cast<Eigen::Index>(fields.size()) != 3 + dim) throw ParseError("wrong field count", lineno);
    set.identities.push_back(std::stoi(fields[0]));
    set.cameras.push_back(std::stoi(fields[1]));
    set.domains.push_back(std::stoi(fields[2]));
    set.splits.push_back(Split::Gallery);
    std::vector<double> v;
    for (Eigen::Index c = 0; c < dim; ++c) v.push_back(std::strtod(fields[static_cast<std::size_t>(3 + c)].c_str(), nullptr));
    rows.push_back(std::move(v));
  }
  set.vectors.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (Eigen::Index c = 0; c < dim; ++c) set.vectors(static_cast<Eigen::Index>(r), c) = rows[r][static_cast<std::size_t>(c)];
  }
  return set;
}

}  // namespace dkua

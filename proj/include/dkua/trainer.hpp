#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dkua/data.hpp"
#include "dkua/distribution.hpp"
#include "dkua/eval.hpp"
#include "dkua/losses.hpp"
#include "dkua/model.hpp"

namespace dkua {

struct TrainConfig {
  ModelConfig model;
  LossConfig loss;
  int epochs = 15;
  double lr = 1e-3;
  double lr_decay = 0.1;
  int lr_decay_period = 10;
  int p = 4;
  int k = 4;
  std::uint64_t seed = 0;
  /// Training order by domain id; empty means every domain that has a train
  /// split, ascending.
  std::vector<int> domain_order;
  Representation retrieval = Representation::Unified;

  void validate() const;
};

/// Parses the JSON config. `seed` is mandatory; unknown keys are rejected.
TrainConfig parse_config(const std::string& json_text);
TrainConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const TrainConfig& config);

struct AdamMoments {
  Tensor first;
  Tensor second;
  long long step = 0;
};

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long long steps = 0;
  std::map<std::string, AdamMoments> moments;
};

/// Bias-corrected Adam on every non-frozen parameter using its `grad`.
/// Frozen parameters are skipped and lose any moments they had.
void adam_step(std::span<Parameter* const> params, OptimizerState& opt, double lr);

/// lr0 * decay^floor(epoch / period)
double lr_at(const TrainConfig& config, int epoch);

struct LossRecord {
  long long step = 0;
  int domain = 0;
  int epoch = 0;
  LossBreakdown parts;
};

std::string to_jsonl(const LossRecord& record);

struct Objective {
  ForwardOutputs outputs;
  Var total;
  LossBreakdown parts;
};

/// Builds the full objective for one batch at the model's current domain:
/// ReID on theta with the newest classifier, then KA, UKA and DKT when more
/// than one transfer module exists and the term's weight is non-zero.
Objective build_objective(Graph& g, DkuaModel& model, const DomainStats& stats, const Batch& batch,
                          const LossConfig& loss, int classes);

struct StepContext {
  OptimizerState optimizer;
  long long step = 0;
};

/// Trains the newest domain of `model` on `domain_train` (that domain's train
/// split only). Accumulates theta^t of the final epoch into `stats`, then
/// finalizes and merges the domain statistics and closes the domain.
std::vector<LossRecord> train_domain(DkuaModel& model, DomainStats& stats, const Dataset& domain_train,
                                     const TrainConfig& config, StepContext& ctx,
                                     const std::function<void(const LossRecord&)>& on_step = {});

struct CurveRow {
  int trained_through = 0;
  int eval_domain = 0;
  double map = 0.0;
  double rank1 = 0.0;
};

struct LifelongResult {
  DkuaModel model;
  DomainStats stats;
  std::vector<LossRecord> losses;
  std::vector<CurveRow> curve;
  std::vector<MetricReport> reports;  // one per trained domain
  std::vector<int> order;
};

/// Full sequential protocol. With a run directory, writes config.json,
/// checkpoints/domain_<t>/, logs/losses.jsonl and metrics/curve.csv.
LifelongResult lifelong_train(const TrainConfig& config, const Dataset& data,
                              const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                              const std::function<void(const std::string&)>& progress = {});

std::vector<int> training_order(const TrainConfig& config, const DatasetIndex& index);

struct CheckpointState {
  DkuaModel model;
  DomainStats stats;
  std::vector<int> trained_domains;
  long long steps = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const DkuaModel& model, const DomainStats& stats,
                     const std::vector<int>& trained_domains, long long steps);
/// Throws IntegrityError on any manifest/payload inconsistency; nothing is
/// returned unless the whole checkpoint validates.
CheckpointState load_checkpoint(const std::filesystem::path& dir);

void write_curve(const std::filesystem::path& path, const std::vector<CurveRow>& rows);

struct AblationRow {
  std::string arm;
  GroupAverage seen;
  GroupAverage unseen;
  LossBreakdown max_terms;  // largest logged value of each term over the run
};

/// Baseline (ReID only), +KA, +KA+UKA, full; identical seeds across arms.
std::vector<AblationRow> run_ablation(const TrainConfig& config, const Dataset& data,
                                      const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                                      const std::function<void(const std::string&)>& progress = {});

}  // namespace dkua

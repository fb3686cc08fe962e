// Acceptance suite: one PASS/FAIL line per criterion.
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include "dkua/cli.hpp"
#include "dkua/distribution.hpp"
#include "dkua/eval.hpp"
#include "dkua/gradcheck.hpp"
#include "dkua/losses.hpp"
#include "dkua/model.hpp"
#include "dkua/trainer.hpp"

using namespace dkua;
using nlohmann::json;

namespace {

constexpr std::uint64_t kDataSeed = 11;
constexpr std::uint64_t kGradSeed = 1;
// First passing run: final margin 0.2035, drop margin 0.2127; pinned rounded down.
constexpr double kPinnedFinalMargin = 0.20;
constexpr double kPinnedDropMargin = 0.20;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Tensor uniform(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

struct Verdict {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

struct Workspace {
  std::filesystem::path root;
  std::filesystem::path data;
  std::filesystem::path config;
  Dataset dataset;
};

Verdict gradient_certification() {
  Verdict v;
  const auto t0 = Clock::now();
  const std::vector<GradCheckResult> rows = run_gradchecks(kGradSeed);
  const double elapsed = seconds_since(t0);
  for (const GradCheckResult& r : rows) {
    // Diagnostic rows are reported by the CLI but are not part of the criterion.
    if (r.name.find("_b16") != std::string::npos) continue;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s rel_err %.3g > %.0e", r.name.c_str(), r.max_rel_error, r.tolerance);
    v.require(r.passed, buf);
  }
  v.require(elapsed < 60.0, "runtime " + std::to_string(elapsed) + " s");
  if (v.pass) v.detail = std::to_string(rows.size()) + " rows in " + std::to_string(elapsed) + " s";
  return v;
}

Verdict simplex_invariants() {
  Verdict v;
  std::mt19937_64 rng(2);
  ModelConfig mc;
  mc.backbone.height = 8;
  mc.backbone.width = 8;
  mc.backbone.patch = 4;
  mc.backbone.dim = 8;
  mc.backbone.depth = 1;
  mc.backbone.heads = 2;
  mc.backbone.mlp_hidden = 16;
  double worst_sum = 0.0;
  bool interior = true;
  auto check = [&](const Tensor& rows_on_simplex, int axis) {
    const Tensor sums = axis == 1 ? Tensor(rows_on_simplex.rowwise().sum()) : Tensor(rows_on_simplex.colwise().sum());
    worst_sum = std::max(worst_sum, (sums.array() - 1.0).abs().maxCoeff());
    interior = interior && rows_on_simplex.minCoeff() > 0.0 && rows_on_simplex.maxCoeff() < 1.0;
  };
  for (int trial = 0; trial < 1000; ++trial) {
    DkuaModel m = DkuaModel::create(mc, static_cast<std::uint64_t>(trial));
    for (int d = 0; d < 3; ++d) {
      grow_domain(m, 2);
      if (d < 2) m.close_domain();
    }
    for (TransferModule& tm : m.modules) tm.proj_w.value = uniform(rng, 8, 8, -2.0, 2.0);
    // Gating logits stay below ~36 apart; beyond that float64 rounds the top weight to exactly 1.
    m.unification.weight.value = uniform(rng, 8, 3, -1.0, 1.0);
    m.unification.bias.value = uniform(rng, 1, 3, -1.0, 1.0);
    Graph g;
    const ForwardOutputs f = model_forward(g, m, uniform(rng, 4, m.config.backbone.pixels(), 0.0, 1.0));
    check(f.weights.value(), 1);
    for (const Var& repr : f.domain_reprs) {
      const Tensor a = association(repr, f.unified, LossConfig{}.temperature).value();
      check(a, a.cols() == 1 ? 0 : 1);
    }
  }
  v.require(worst_sum <= 1e-9, "sum deviation " + std::to_string(worst_sum));
  v.require(interior, "entry outside (0,1)");
  if (v.pass) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "max |sum-1| = %.2e over 1000 parameterizations", worst_sum);
    v.detail = buf;
  }
  return v;
}

Verdict covariance_recurrence() {
  Verdict v;
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> classes(1, 200);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int dim = 4;
    DomainStats stats(dim);
    Tensor weighted = Tensor::Zero(dim, dim);
    long long total = 0;
    for (int d = 0; d < 3; ++d) {
      stats.open_domain();
      stats.accumulate(uniform(rng, 20, dim, -2.0, 2.0));
      const int n = classes(rng);
      const Tensor& sigma = stats.finalize_domain(n);
      weighted += static_cast<double>(n) * sigma;
      total += n;
      stats.unified_update();
    }
    const Tensor closed = weighted / static_cast<double>(total);
    worst = std::max(worst, (stats.cumulative() - closed).cwiseAbs().maxCoeff());
  }
  v.require(worst <= 1e-12, "recurrence deviation " + std::to_string(worst));

  const Tensor hand = merge_covariance(Tensor::Identity(3, 3), 100, 3.0 * Tensor::Identity(3, 3), 50);
  Tensor expect = Tensor::Zero(3, 3);
  expect.diagonal().setConstant(5.0 / 3.0);
  v.require(hand == expect, "hand case not exactly (5/3)I");
  if (v.pass) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "max deviation %.2e over 100 instances; hand case exact", worst);
    v.detail = buf;
  }
  return v;
}

Verdict kl_oracles() {
  Verdict v;
  const double closed = gaussian_kl(Tensor(2.0 * Tensor::Identity(2, 2)), Tensor(Tensor::Identity(2, 2)));
  v.require(std::abs(closed - 0.30685) <= 1e-5, "gaussian_kl(2I, I) = " + std::to_string(closed));

  std::mt19937_64 rng(4);
  auto spd = [&](double floor) {
    const Tensor a = uniform(rng, 2, 2, -1.0, 1.0);
    return Tensor(a * a.transpose() + floor * Tensor::Identity(2, 2));
  };
  const Tensor s1 = spd(0.5);
  const Tensor s2 = spd(0.5);
  const Eigen::Matrix2d l = Eigen::Matrix2d(s1).llt().matrixL();
  const Eigen::Matrix2d i1 = Eigen::Matrix2d(s1).inverse();
  const Eigen::Matrix2d i2 = Eigen::Matrix2d(s2).inverse();
  const double half_log = 0.5 * std::log(Eigen::Matrix2d(s2).determinant() / Eigen::Matrix2d(s1).determinant());
  std::normal_distribution<double> z(0.0, 1.0);
  double acc = 0.0;
  for (int s = 0; s < 1000000; ++s) {
    const Eigen::Vector2d x = l * Eigen::Vector2d(z(rng), z(rng));
    acc += half_log - 0.5 * x.dot(i1 * x) + 0.5 * x.dot(i2 * x);
  }
  const double mc = acc / 1e6;
  const double exact = gaussian_kl(s1, s2);
  v.require(std::abs(mc - exact) <= 0.02 * exact, "Monte-Carlo " + std::to_string(mc) + " vs " + std::to_string(exact));

  Tensor p(2, 1), q(2, 1);
  p << 1.0, 0.0;
  q << 0.5, 0.5;
  v.require(std::abs(kl_discrete(p, q) - std::log(2.0)) <= 1e-12, "kl_discrete([1,0],[.5,.5]) != ln 2");

  double min_kl = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    min_kl = std::min(min_kl, gaussian_kl(spd(0.01), spd(0.01)));
    const Tensor a = softmax(uniform(rng, 5, 1, -6.0, 6.0), 0);
    const Tensor b = softmax(uniform(rng, 5, 1, -6.0, 6.0), 0);
    min_kl = std::min(min_kl, kl_discrete(a, b));
  }
  v.require(min_kl >= -1e-9, "negative KL " + std::to_string(min_kl));
  if (v.pass) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "closed form %.6f; MC %.4f vs %.4f; min KL %.1e", closed, mc, exact, min_kl);
    v.detail = buf;
  }
  return v;
}

// Raw payload bytes of every parameter whose name starts with `prefix`.
std::map<std::string, std::string> parameter_bytes(const std::filesystem::path& ckpt, const std::string& prefix) {
  const json manifest = json::parse(slurp(ckpt / "manifest.json"));
  const std::string payload = slurp(ckpt / "params.bin");
  std::map<std::string, std::string> out;
  for (const json& e : manifest.at("parameters")) {
    const std::string name = e.at("name").get<std::string>();
    if (name.rfind(prefix, 0) != 0) continue;
    const auto bytes = e.at("rows").get<std::size_t>() * e.at("cols").get<std::size_t>() * 8;
    out[name] = payload.substr(e.at("offset").get<std::size_t>(), bytes);
  }
  return out;
}

Verdict freeze_contract(const std::filesystem::path& run) {
  Verdict v;
  const auto first = parameter_bytes(run / "checkpoints/domain_1", "tm1.");
  const auto third = parameter_bytes(run / "checkpoints/domain_3", "tm1.");
  v.require(!first.empty(), "no tm1 parameters in checkpoint");
  v.require(first == third, "tm1 bytes differ between domain 1 and domain 3");

  const CheckpointState st = load_checkpoint(run / "checkpoints/domain_2");
  DkuaModel m = st.model;
  std::mt19937_64 rng(5);
  const Tensor probe = uniform(rng, 6, m.config.backbone.pixels(), 0.0, 1.0);
  std::vector<Tensor> before;
  {
    Graph g;
    for (const Var& r : model_forward(g, m, probe).domain_reprs) before.push_back(r.value());
  }
  grow_domain(m, 5);
  Graph g;
  const ForwardOutputs after = model_forward(g, m, probe);
  for (std::size_t i = 0; i < before.size(); ++i) {
    v.require(after.domain_reprs[i].value() == before[i], "domain " + std::to_string(i + 1) + " output changed");
  }
  if (v.pass) v.detail = std::to_string(first.size()) + " tm1 tensors identical; grow probe bitwise stable";
  return v;
}

Verdict ap_oracles() {
  Verdict v;
  const std::array<bool, 3> r13{true, false, true};
  v.require(std::abs(*average_precision(r13) - 0.83333333333333337) <= 1e-9, "AP{1,3} wrong");
  std::array<bool, 5> r{false, false, false, true, true};
  int perms = 0;
  do {
    double hits = 0.0, acc = 0.0;
    for (int k = 0; k < 5; ++k) {
      if (r[static_cast<std::size_t>(k)]) acc += ++hits / (k + 1);
    }
    v.require(*average_precision(r) == acc / hits, "permutation mismatch");
    ++perms;
  } while (std::next_permutation(r.begin(), r.end()));
  if (v.pass) v.detail = "AP{1,3} = 0.83333; " + std::to_string(perms) + " permutations exact";
  return v;
}

std::vector<json> read_jsonl(const std::filesystem::path& p) {
  std::vector<json> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(json::parse(line));
  }
  return rows;
}

Verdict first_domain_reduction(const std::filesystem::path& run) {
  Verdict v;
  int steps = 0;
  for (const json& r : read_jsonl(run / "logs/losses.jsonl")) {
    if (r.at("domain").get<int>() != 1) continue;
    ++steps;
    v.require(r.at("L_KA").get<double>() == 0.0 && r.at("L_UKA").get<double>() == 0.0 &&
                  r.at("L_DKT").get<double>() == 0.0,
              "non-zero auxiliary term at step " + std::to_string(r.at("step").get<long long>()));
    v.require(r.at("L").get<double>() == r.at("L_ReID").get<double>(), "L != L_ReID");
    if (!v.pass) break;
  }
  v.require(steps > 0, "no domain-1 steps logged");
  if (v.pass) v.detail = std::to_string(steps) + " domain-1 steps";
  return v;
}

Verdict determinism(const std::filesystem::path& a, const std::filesystem::path& b) {
  Verdict v;
  v.require(slurp(a / "logs/losses.jsonl") == slurp(b / "logs/losses.jsonl"), "losses.jsonl differs");
  int checkpoints = 0;
  for (int d = 1; d <= 3; ++d) {
    const std::string sub = "checkpoints/domain_" + std::to_string(d) + "/params.bin";
    v.require(slurp(a / sub) == slurp(b / sub), sub + " differs");
    ++checkpoints;
  }
  if (v.pass) v.detail = "losses.jsonl and " + std::to_string(checkpoints) + " checkpoint payloads identical";
  return v;
}

// mAP on domain 1 after each trained domain.
std::vector<double> domain1_curve(const LifelongResult& r) {
  std::vector<double> out;
  for (const MetricReport& rep : r.reports) {
    for (const DomainMetrics& d : rep.domains) {
      if (d.domain == 1) out.push_back(d.metrics.map);
    }
  }
  return out;
}

Verdict anti_forgetting(const Workspace& ws) {
  Verdict v;
  const auto t0 = Clock::now();
  const TrainConfig full = load_config(ws.config);
  TrainConfig naive = full;
  naive.model.dynamic_modules = false;
  naive.loss.ka_weight = 0.0;
  naive.loss.uka_weight = 0.0;
  naive.loss.dkt_weight = 0.0;
  const std::vector<double> f = domain1_curve(lifelong_train(full, ws.dataset));
  const std::vector<double> n = domain1_curve(lifelong_train(naive, ws.dataset));
  const double elapsed = seconds_since(t0);
  if (f.size() != 3 || n.size() != 3) {
    v.require(false, "expected three domain-1 evaluations");
    return v;
  }
  const double f_peak = *std::max_element(f.begin(), f.end());
  const double n_peak = *std::max_element(n.begin(), n.end());
  const double f_drop = f_peak - f.back();
  const double n_drop = n_peak - n.back();
  v.require(f.back() > n.back(), "final domain-1 mAP not above naive");
  v.require(f_drop < n_drop, "drop not smaller than naive");
  v.require(f.back() - n.back() >= kPinnedFinalMargin, "final margin below pinned value");
  v.require(n_drop - f_drop >= kPinnedDropMargin, "drop margin below pinned value");
  v.require(elapsed < 900.0, "runtime " + std::to_string(elapsed) + " s");
  char buf[256];
  std::snprintf(buf, sizeof(buf),
                "final d1 mAP full %.4f vs naive %.4f (margin %.4f); drop full %.4f vs naive %.4f (margin %.4f); %.0f s",
                f.back(), n.back(), f.back() - n.back(), f_drop, n_drop, n_drop - f_drop, elapsed);
  v.detail = v.detail.empty() ? buf : v.detail + " | " + buf;
  return v;
}

Verdict ablation_structure(const Workspace& ws) {
  Verdict v;
  const TrainConfig config = load_config(ws.config);
  const std::vector<AblationRow> rows = run_ablation(config, ws.dataset, ws.root / "ablate");
  v.require(rows.size() == 4, "expected four arms");
  std::istringstream table(slurp(ws.root / "ablate/ablation.csv"));
  std::string line;
  int lines = 0;
  while (std::getline(table, line)) ++lines;
  v.require(lines == 5, "ablation.csv has " + std::to_string(lines) + " lines");
  if (rows.size() != 4) return v;
  for (const json& r : read_jsonl(ws.root / "ablate/arm_baseline/logs/losses.jsonl")) {
    if (r.at("L_KA").get<double>() != 0.0 || r.at("L_UKA").get<double>() != 0.0 || r.at("L_DKT").get<double>() != 0.0) {
      v.require(false, "baseline arm logged a non-zero auxiliary term");
      break;
    }
  }
  v.require(rows[3].seen.map >= rows[0].seen.map, "full seen mAP below baseline");
  char buf[256];
  std::snprintf(buf, sizeof(buf), "seen mAP baseline %.4f, +KA %.4f, +KA+UKA %.4f, full %.4f", rows[0].seen.map,
                rows[1].seen.map, rows[2].seen.map, rows[3].seen.map);
  v.detail = v.detail.empty() ? buf : v.detail + " | " + buf;
  return v;
}

}  // namespace

int main() {
  Workspace ws;
  ws.root = std::filesystem::current_path() / "acceptance_work";
  std::filesystem::remove_all(ws.root);
  std::filesystem::create_directories(ws.root);
  ws.data = ws.root / "data";
  ws.config = std::filesystem::path(DKUA_SOURCE_DIR) / "configs" / "desk.json";

  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Verdict()>& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    if (!v.pass) ++failures;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " " << name << ": " << v.detail << std::endl;
  };

  auto cli = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "dkua");
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    if (code != 0) throw std::runtime_error("dkua " + args[1] + " exited " + std::to_string(code) + ": " + err.str());
  };

  bool have_runs = true;
  try {
    cli({"synth", "--out", ws.data.string(), "--seed", std::to_string(kDataSeed)});
    ws.dataset = load_dataset(ws.data);
    cli({"train", "--config", ws.config.string(), "--data", ws.data.string(), "--out", (ws.root / "run_a").string()});
    cli({"train", "--config", ws.config.string(), "--data", ws.data.string(), "--out", (ws.root / "run_b").string()});
  } catch (const std::exception& e) {
    std::cout << "setup failed: " << e.what() << std::endl;
    have_runs = false;
  }
  auto needs_runs = [&](std::function<Verdict()> fn) {
    return [=]() {
      if (!have_runs) throw std::runtime_error("training runs unavailable");
      return fn();
    };
  };
  report(1, "gradient certification", gradient_certification);
  report(2, "simplex invariants", simplex_invariants);
  report(3, "covariance recurrence", covariance_recurrence);
  report(4, "KL oracles", kl_oracles);
  report(5, "freeze contract", needs_runs([&] { return freeze_contract(ws.root / "run_a"); }));
  report(6, "retrieval metric oracle", ap_oracles);
  report(7, "first-domain reduction", needs_runs([&] { return first_domain_reduction(ws.root / "run_a"); }));
  report(8, "determinism", needs_runs([&] { return determinism(ws.root / "run_a", ws.root / "run_b"); }));
  report(9, "desk-scale anti-forgetting", needs_runs([&] { return anti_forgetting(ws); }));
  report(10, "ablation structure", needs_runs([&] { return ablation_structure(ws); }));

  std::cout << (failures == 0 ? "ALL PASS" : std::to_string(failures) + " criteria failing") << std::endl;
  return failures == 0 ? 0 : 1;
}

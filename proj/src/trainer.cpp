#include "dkua/trainer.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace dkua {

using nlohmann::json;

namespace {

constexpr char kCheckpointFormat[] = "dkua-checkpoint v1";

const char* representation_name(Representation r) {
  switch (r) {
    case Representation::Unified: return "unified";
    case Representation::Current: return "current";
    case Representation::Pooled: return "pooled";
  }
  return "unified";
}

Representation parse_representation(const std::string& s) {
  if (s == "unified") return Representation::Unified;
  if (s == "current") return Representation::Current;
  if (s == "pooled") return Representation::Pooled;
  throw ConfigError("retrieval must be one of unified, current, pooled (got '" + s + "')");
}

template <typename T>
void read_key(const json& obj, const char* key, T& out, const std::string& scope) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + scope + key + "' has the wrong type");
  }
}

void reject_unknown(const json& obj, const std::set<std::string>& known, const std::string& scope) {
  for (const auto& item : obj.items()) {
    if (known.count(item.key()) == 0) throw ConfigError("unknown config key '" + scope + item.key() + "'");
  }
}

json model_to_json(const ModelConfig& m) {
  const BackboneConfig& b = m.backbone;
  return json{{"height", b.height}, {"width", b.width}, {"channels", b.channels}, {"patch", b.patch},
              {"dim", b.dim},       {"depth", b.depth}, {"heads", b.heads},       {"mlp_hidden", b.mlp_hidden},
              {"dynamic_modules", m.dynamic_modules}};
}

ModelConfig model_from_json(const json& obj) {
  if (!obj.is_object()) throw ConfigError("config key 'model' must be an object");
  reject_unknown(obj, {"height", "width", "channels", "patch", "dim", "depth", "heads", "mlp_hidden", "dynamic_modules"},
                 "model.");
  ModelConfig m;
  BackboneConfig& b = m.backbone;
  read_key(obj, "height", b.height, "model.");
  read_key(obj, "width", b.width, "model.");
  read_key(obj, "channels", b.channels, "model.");
  read_key(obj, "patch", b.patch, "model.");
  read_key(obj, "dim", b.dim, "model.");
  read_key(obj, "depth", b.depth, "model.");
  read_key(obj, "heads", b.heads, "model.");
  read_key(obj, "mlp_hidden", b.mlp_hidden, "model.");
  read_key(obj, "dynamic_modules", m.dynamic_modules, "model.");
  return m;
}

void put_le64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_tensor(std::string& buf, const Tensor& t) {
  for (Eigen::Index i = 0; i < t.size(); ++i) put_le64(buf, std::bit_cast<std::uint64_t>(t.data()[i]));
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void TrainConfig::validate() const {
  model.backbone.validate();
  loss.validate();
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay must lie in (0, 1]");
  if (lr_decay_period < 1) throw ConfigError("lr_decay_period must be at least 1");
  if (p < 2 || k < 2) throw ConfigError("p and k must be at least 2");
}

TrainConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config root must be an object");
  reject_unknown(root,
                 {"seed", "epochs", "lr", "lr_decay", "lr_decay_period", "p", "k", "margin", "temperature",
                  "ka_weight", "uka_weight", "dkt_weight", "domain_order", "retrieval", "model"},
                 "");
  if (!root.contains("seed")) throw ConfigError("missing required config key 'seed'");
  TrainConfig c;
  read_key(root, "seed", c.seed, "");
  read_key(root, "epochs", c.epochs, "");
  read_key(root, "lr", c.lr, "");
  read_key(root, "lr_decay", c.lr_decay, "");
  read_key(root, "lr_decay_period", c.lr_decay_period, "");
  read_key(root, "p", c.p, "");
  read_key(root, "k", c.k, "");
  read_key(root, "margin", c.loss.margin, "");
  read_key(root, "temperature", c.loss.temperature, "");
  read_key(root, "ka_weight", c.loss.ka_weight, "");
  read_key(root, "uka_weight", c.loss.uka_weight, "");
  read_key(root, "dkt_weight", c.loss.dkt_weight, "");
  read_key(root, "domain_order", c.domain_order, "");
  if (root.contains("retrieval")) {
    std::string r;
    read_key(root, "retrieval", r, "");
    c.retrieval = parse_representation(r);
  }
  if (root.contains("model")) c.model = model_from_json(root.at("model"));
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const TrainConfig& c) {
  json root{{"seed", c.seed},
            {"epochs", c.epochs},
            {"lr", c.lr},
            {"lr_decay", c.lr_decay},
            {"lr_decay_period", c.lr_decay_period},
            {"p", c.p},
            {"k", c.k},
            {"margin", c.loss.margin},
            {"temperature", c.loss.temperature},
            {"ka_weight", c.loss.ka_weight},
            {"uka_weight", c.loss.uka_weight},
            {"dkt_weight", c.loss.dkt_weight},
            {"domain_order", c.domain_order},
            {"retrieval", representation_name(c.retrieval)},
            {"model", model_to_json(c.model)}};
  return root.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Optimizer

void adam_step(std::span<Parameter* const> params, OptimizerState& opt, double lr) {
  ++opt.steps;
  for (Parameter* p : params) {
    if (p->frozen) {
      opt.moments.erase(p->name);
      continue;
    }
    if (p->grad.size() == 0) p->zero_grad();
    if (p->grad.rows() != p->value.rows() || p->grad.cols() != p->value.cols()) {
      throw StateError("adam_step: gradient shape mismatch for " + p->name);
    }
    AdamMoments& m = opt.moments[p->name];
    if (m.first.rows() != p->value.rows() || m.first.cols() != p->value.cols()) {
      m.first = Tensor::Zero(p->value.rows(), p->value.cols());
      m.second = Tensor::Zero(p->value.rows(), p->value.cols());
      m.step = 0;
    }
    ++m.step;
    m.first = opt.beta1 * m.first + (1.0 - opt.beta1) * p->grad;
    m.second = opt.beta2 * m.second + (1.0 - opt.beta2) * p->grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(m.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(m.step));
    p->value.array() -= lr * (m.first.array() / c1) / ((m.second.array() / c2).sqrt() + opt.epsilon);
  }
}

double lr_at(const TrainConfig& config, int epoch) {
  if (epoch < 0) throw ValidationError("lr_at: negative epoch");
  return config.lr * std::pow(config.lr_decay, static_cast<double>(epoch / config.lr_decay_period));
}

std::string to_jsonl(const LossRecord& r) {
  std::ostringstream out;
  out << "{\"step\":" << r.step << ",\"domain\":" << r.domain << ",\"epoch\":" << r.epoch
      << ",\"L_CE\":" << format_double(r.parts.ce) << ",\"L_Tri\":" << format_double(r.parts.tri)
      << ",\"L_ReID\":" << format_double(r.parts.reid) << ",\"L_KA\":" << format_double(r.parts.ka)
      << ",\"L_UKA\":" << format_double(r.parts.uka) << ",\"L_DKT\":" << format_double(r.parts.dkt)
      << ",\"L\":" << format_double(r.parts.total) << "}";
  return out.str();
}

// ---------------------------------------------------------------------------
// Training

Objective build_objective(Graph& g, DkuaModel& model, const DomainStats& stats, const Batch& batch,
                          const LossConfig& lc, int classes) {
  Objective obj;
  obj.outputs = model_forward(g, model, batch.images);
  const ForwardOutputs& f = obj.outputs;
  const int t = static_cast<int>(model.modules.size());
  LossBreakdown& parts = obj.parts;

  Var ce = cross_entropy(classify(g, model.classifiers.back(), f.unified), batch.labels);
  Var tri = triplet(f.unified, batch.labels, lc.margin);
  Var reid = add(ce, tri);
  parts.ce = ce.scalar();
  parts.tri = tri.scalar();
  parts.reid = reid.scalar();
  Var total = reid;
  if (t >= 2 && lc.ka_weight > 0.0) {
    Var ka = scale(ka_loss(g, f.domain_reprs).loss, lc.ka_weight);
    parts.ka = ka.scalar();
    total = add(total, ka);
  }
  if (t >= 2 && lc.uka_weight > 0.0) {
    std::vector<Var> assoc;
    for (const Var& repr : f.domain_reprs) assoc.push_back(association(repr, f.unified, lc.temperature));
    Var uka = scale(uka_loss(g, assoc), lc.uka_weight);
    parts.uka = uka.scalar();
    total = add(total, uka);
  }
  if (t >= 2 && lc.dkt_weight > 0.0) {
    Var dkt = scale(dkt_loss(g, stats, covariance(f.domain_reprs.back()), t, classes), lc.dkt_weight);
    parts.dkt = dkt.scalar();
    total = add(total, dkt);
  }
  const double sum = total_loss(parts);
  parts.total = total.scalar();
  if (parts.total != sum) throw NumericalError("loss decomposition mismatch", "L");
  obj.total = total;
  return obj;
}

std::vector<LossRecord> train_domain(DkuaModel& model, DomainStats& stats, const Dataset& domain_train,
                                     const TrainConfig& config, StepContext& ctx,
                                     const std::function<void(const LossRecord&)>& on_step) {
  if (!model.domain_open) throw ProtocolError("train_domain requires grow_domain first");
  if (domain_train.images.empty()) throw ConfigError("train_domain: empty training split");
  const int domain = domain_train.index.records.front().domain;
  for (const IndexRecord& r : domain_train.index.records) {
    if (r.domain != domain || r.split != Split::Train) {
      throw ProtocolError("train_domain received records outside the current domain's train split");
    }
  }
  const LossConfig& lc = config.loss;
  const PkSampler sampler(domain_train, config.p, config.k,
                          config.seed ^ (0x5bd1e995ULL * static_cast<std::uint64_t>(model.domains)));
  ClassifierHead& head = model.classifiers.back();
  if (head.classes() != sampler.classes()) throw StateError("classifier head does not match the domain's identities");

  stats.open_domain();
  std::vector<LossRecord> log;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config, epoch);
    const bool last_epoch = epoch + 1 == config.epochs;
    for (const auto& records : sampler.epoch(epoch)) {
      const Batch batch = sampler.make_batch(records);
      LossRecord rec;
      rec.step = ctx.step;
      rec.domain = domain;
      rec.epoch = epoch;
      LossBreakdown& parts = rec.parts;
      try {
        Graph g;
        const Objective obj = build_objective(g, model, stats, batch, lc, sampler.classes());
        parts = obj.parts;
        const ForwardOutputs& f = obj.outputs;
        Var total = obj.total;
        if (last_epoch) stats.accumulate(f.domain_reprs.back().value());

        for (Parameter* p : model.parameters()) p->zero_grad();
        g.backward(total);
        adam_step(model.parameters(), ctx.optimizer, lr);
      } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(ctx.step) + " (domain " + std::to_string(domain) + ", epoch " +
                                 std::to_string(epoch) + "): " + e.what(),
                             e.term());
      }
      for (Parameter* p : model.parameters()) {
        if (!p->value.allFinite()) {
          throw NumericalError("step " + std::to_string(ctx.step) + ": parameter " + p->name + " became non-finite",
                               p->name);
        }
      }
      ++ctx.step;
      if (on_step) on_step(rec);
      log.push_back(rec);
    }
  }
  stats.finalize_domain(sampler.classes());
  stats.unified_update();
  model.close_domain();
  return log;
}

std::vector<int> training_order(const TrainConfig& config, const DatasetIndex& index) {
  std::vector<int> order = config.domain_order;
  if (order.empty()) {
    for (int d : index.domains()) {
      if (index.has_train(d)) order.push_back(d);
    }
  }
  std::set<int> seen;
  for (int d : order) {
    if (!index.has_train(d)) throw ConfigError("domain " + std::to_string(d) + " has no train split");
    if (!seen.insert(d).second) throw ConfigError("domain " + std::to_string(d) + " repeated in domain_order");
  }
  if (order.empty()) throw ConfigError("no trainable domain in the dataset");
  return order;
}

void write_curve(const std::filesystem::path& path, const std::vector<CurveRow>& rows) {
  std::ostringstream out;
  out << "trained_through_domain,eval_domain,mAP,rank1\n";
  for (const CurveRow& r : rows) {
    out << r.trained_through << ',' << r.eval_domain << ',' << format_double(r.map) << ',' << format_double(r.rank1)
        << '\n';
  }
  write_file(path, out.str());
}

LifelongResult lifelong_train(const TrainConfig& config, const Dataset& data,
                              const std::optional<std::filesystem::path>& run_dir,
                              const std::function<void(const std::string&)>& progress) {
  config.validate();
  data.index.check_disjoint_identities();
  LifelongResult result;
  result.order = training_order(config, data.index);
  result.model = DkuaModel::create(config.model, config.seed);
  result.stats = DomainStats(config.model.backbone.dim);

  std::ofstream loss_log;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir / "checkpoints");
    std::filesystem::create_directories(*run_dir / "logs");
    std::filesystem::create_directories(*run_dir / "metrics");
    write_file(*run_dir / "config.json", config_to_json(config));
    loss_log.open(*run_dir / "logs" / "losses.jsonl", std::ios::binary | std::ios::trunc);
  }

  StepContext ctx;
  std::set<int> trained;
  for (std::size_t t = 0; t < result.order.size(); ++t) {
    const int domain = result.order[t];
    const Dataset train = data.select(domain, Split::Train);
    const PkSampler probe(train, config.p, config.k, 0);
    grow_domain(result.model, probe.classes());
    auto sink = [&](const LossRecord& r) {
      if (loss_log.is_open()) loss_log << to_jsonl(r) << '\n';
    };
    std::vector<LossRecord> log = train_domain(result.model, result.stats, train, config, ctx, sink);
    result.losses.insert(result.losses.end(), log.begin(), log.end());
    trained.insert(domain);

    std::vector<int> trained_list(result.order.begin(), result.order.begin() + static_cast<std::ptrdiff_t>(t + 1));
    if (run_dir) {
      save_checkpoint(*run_dir / "checkpoints" / ("domain_" + std::to_string(t + 1)), result.model, result.stats,
                      trained_list, ctx.step);
    }
    MetricReport report = evaluate(result.model, data, trained, config.retrieval);
    for (const DomainMetrics& dm : report.domains) {
      result.curve.push_back({domain, dm.domain, dm.metrics.map, dm.metrics.rank1});
    }
    if (progress) {
      std::ostringstream msg;
      msg << "domain " << domain << " trained (" << log.size() << " steps)";
      for (const DomainMetrics& dm : report.domains) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "; d%d%s mAP %.3f R1 %.3f", dm.domain, dm.seen ? "" : "*", dm.metrics.map,
                      dm.metrics.rank1);
        msg << buf;
      }
      progress(msg.str());
    }
    result.reports.push_back(std::move(report));
    if (run_dir) write_curve(*run_dir / "metrics" / "curve.csv", result.curve);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& dir, const DkuaModel& model, const DomainStats& stats,
                     const std::vector<int>& trained_domains, long long steps) {
  std::filesystem::create_directories(dir);
  std::string payload;
  json params = json::array();
  for (const Parameter* p : model.parameters()) {
    params.push_back({{"name", p->name},
                      {"rows", p->value.rows()},
                      {"cols", p->value.cols()},
                      {"frozen", p->frozen},
                      {"offset", payload.size()}});
    append_tensor(payload, p->value);
  }
  json statistics = json::array();
  auto add_stat = [&](const std::string& name, const Tensor& t) {
    statistics.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", payload.size()}});
    append_tensor(payload, t);
  };
  for (std::size_t i = 0; i < stats.domain_covariances().size(); ++i) {
    add_stat("sigma" + std::to_string(i + 1), stats.domain_covariances()[i]);
  }
  if (stats.merged_domains() > 0) add_stat("sigma_unified", stats.cumulative());

  std::ostringstream rng_state;
  rng_state << model.rng;
  json manifest{{"format", kCheckpointFormat},
                {"model", model_to_json(model.config)},
                {"domains", model.domains},
                {"transfer_modules", model.modules.size()},
                {"trained_domains", trained_domains},
                {"parameters", params},
                {"statistics",
                 {{"dim", stats.dim()},
                  {"class_counts", stats.class_counts()},
                  {"merged", stats.merged_domains()},
                  {"matrices", statistics}}},
                {"rng_state", rng_state.str()},
                {"steps", steps},
                {"payload_bytes", payload.size()},
                {"payload_fnv1a64", hex64(fnv1a(payload))}};
  write_file(dir / "params.bin", payload);
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

CheckpointState load_checkpoint(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("unreadable manifest: ") + e.what());
  }
  const std::string payload = read_file(dir / "params.bin");
  try {
    if (manifest.at("format").get<std::string>() != kCheckpointFormat) throw IntegrityError("unknown checkpoint format");
    if (manifest.at("payload_bytes").get<std::size_t>() != payload.size()) {
      throw IntegrityError("payload size " + std::to_string(payload.size()) + " does not match manifest (" +
                           std::to_string(manifest.at("payload_bytes").get<std::size_t>()) + ")");
    }
    if (manifest.at("payload_fnv1a64").get<std::string>() != hex64(fnv1a(payload))) {
      throw IntegrityError("payload checksum mismatch");
    }
    const auto* bytes = reinterpret_cast<const unsigned char*>(payload.data());
    auto read_tensor = [&](const json& entry) {
      const auto rows = entry.at("rows").get<Eigen::Index>();
      const auto cols = entry.at("cols").get<Eigen::Index>();
      const auto offset = entry.at("offset").get<std::size_t>();
      if (rows < 0 || cols < 0 || offset + static_cast<std::size_t>(rows * cols) * 8 > payload.size()) {
        throw IntegrityError("tensor '" + entry.at("name").get<std::string>() + "' exceeds the payload");
      }
      Tensor t(rows, cols);
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        t.data()[i] = std::bit_cast<double>(get_le64(bytes + offset + static_cast<std::size_t>(i) * 8));
      }
      return t;
    };

    const int domains = manifest.at("domains").get<int>();
    const int tms = manifest.at("transfer_modules").get<int>();
    const ModelConfig mc = model_from_json(manifest.at("model"));
    if (domains < 1 || tms < 1) throw IntegrityError("checkpoint holds no trained domain");
    if (mc.dynamic_modules ? tms != domains : tms != 1) {
      throw IntegrityError("manifest domain count " + std::to_string(domains) + " disagrees with " +
                           std::to_string(tms) + " transfer modules");
    }

    // Rebuild the architecture by replaying growth, then overwrite every tensor.
    CheckpointState state;
    state.model = DkuaModel::create(mc, 0);
    const json& entries = manifest.at("parameters");
    for (int d = 0; d < domains; ++d) {
      // Classifier widths come from the manifest (cls<d>.weight).
      int classes = -1;
      const std::string want = "cls" + std::to_string(d + 1) + ".weight";
      for (const json& e : entries) {
        if (e.at("name").get<std::string>() == want) classes = e.at("cols").get<int>();
      }
      if (classes < 1) throw IntegrityError("missing classifier head " + want);
      grow_domain(state.model, classes);
      state.model.close_domain();
    }
    std::vector<Parameter*> params = state.model.parameters();
    if (params.size() != entries.size()) {
      throw IntegrityError("manifest lists " + std::to_string(entries.size()) + " parameters, architecture has " +
                           std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const json& e = entries[i];
      if (e.at("name").get<std::string>() != params[i]->name) {
        throw IntegrityError("parameter order mismatch at " + params[i]->name);
      }
      Tensor v = read_tensor(e);
      if (v.rows() != params[i]->value.rows() || v.cols() != params[i]->value.cols()) {
        throw IntegrityError("shape mismatch for " + params[i]->name);
      }
      params[i]->value = std::move(v);
      params[i]->frozen = e.at("frozen").get<bool>();
    }
    std::istringstream rng_state(manifest.at("rng_state").get<std::string>());
    rng_state >> state.model.rng;
    if (!rng_state) throw IntegrityError("bad RNG state");

    const json& st = manifest.at("statistics");
    const int dim = st.at("dim").get<int>();
    const std::vector<int> counts = st.at("class_counts").get<std::vector<int>>();
    const int merged = st.at("merged").get<int>();
    std::vector<Tensor> sigmas;
    Tensor cumulative;
    for (const json& e : st.at("matrices")) {
      const std::string name = e.at("name").get<std::string>();
      if (name == "sigma_unified") {
        cumulative = read_tensor(e);
      } else {
        sigmas.push_back(read_tensor(e));
      }
    }
    state.stats = DomainStats::restore(dim, std::move(sigmas), counts, merged, std::move(cumulative));
    state.trained_domains = manifest.at("trained_domains").get<std::vector<int>>();
    state.steps = manifest.at("steps").get<long long>();
    return state;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("invalid model config in manifest: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Ablation

std::vector<AblationRow> run_ablation(const TrainConfig& config, const Dataset& data,
                                      const std::optional<std::filesystem::path>& out_dir,
                                      const std::function<void(const std::string&)>& progress) {
  struct Arm {
    const char* name;
    const char* dir;
    bool ka, uka, dkt;
  };
  const Arm arms[] = {{"Baseline", "arm_baseline", false, false, false},
                      {"+KA", "arm_ka", true, false, false},
                      {"+KA+UKA", "arm_ka_uka", true, true, false},
                      {"Full", "arm_full", true, true, true}};
  std::vector<AblationRow> rows;
  for (const Arm& arm : arms) {
    TrainConfig c = config;
    c.loss.ka_weight = arm.ka ? config.loss.ka_weight : 0.0;
    c.loss.uka_weight = arm.uka ? config.loss.uka_weight : 0.0;
    c.loss.dkt_weight = arm.dkt ? config.loss.dkt_weight : 0.0;
    std::optional<std::filesystem::path> run;
    if (out_dir) run = *out_dir / arm.dir;
    if (progress) progress(std::string("ablation arm ") + arm.name);
    const LifelongResult r = lifelong_train(c, data, run, progress);
    AblationRow row;
    row.arm = arm.name;
    const MetricReport& last = r.reports.back();
    if (last.seen) row.seen = *last.seen;
    if (last.unseen) row.unseen = *last.unseen;
    for (const LossRecord& rec : r.losses) {
      row.max_terms.ka = std::max(row.max_terms.ka, std::abs(rec.parts.ka));
      row.max_terms.uka = std::max(row.max_terms.uka, std::abs(rec.parts.uka));
      row.max_terms.dkt = std::max(row.max_terms.dkt, std::abs(rec.parts.dkt));
    }
    rows.push_back(row);
  }
  if (out_dir) {
    std::ostringstream out;
    out << "arm,seen_mAP,seen_rank1,unseen_mAP,unseen_rank1\n";
    for (const AblationRow& r : rows) {
      out << r.arm << ',' << format_double(r.seen.map) << ',' << format_double(r.seen.rank1) << ','
          << format_double(r.unseen.map) << ',' << format_double(r.unseen.rank1) << '\n';
    }
    write_file(*out_dir / "ablation.csv", out.str());
  }
  return rows;
}

}  // namespace dkua

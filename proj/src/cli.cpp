#include "dkua/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "dkua/errors.hpp"
#include "dkua/eval.hpp"
#include "dkua/gradcheck.hpp"
#include "dkua/trainer.hpp"

namespace dkua::cli {

namespace {

using nlohmann::json;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename T>
void take(const json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("spec key '") + key + "' has the wrong type");
  }
}

void only_keys(const json& obj, const std::set<std::string>& known, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& item : obj.items()) {
    if (known.count(item.key()) == 0) throw ConfigError("unknown spec key '" + item.key() + "' in " + where);
  }
}

Representation parse_representation(const std::string& s) {
  if (s == "unified") return Representation::Unified;
  if (s == "current") return Representation::Current;
  if (s == "pooled") return Representation::Pooled;
  throw UsageError("--retrieval must be unified, current or pooled");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string metrics_table(const MetricReport& report) {
  std::ostringstream os;
  os << "domain\tgroup\tmAP\trank1\tqueries\n";
  for (const DomainMetrics& d : report.domains) {
    os << d.domain << '\t' << (d.seen ? "seen" : "unseen") << '\t' << fmt(d.metrics.map) << '\t'
       << fmt(d.metrics.rank1) << '\t' << d.metrics.queries << '\n';
  }
  if (report.seen) os << "seen_avg\tseen\t" << fmt(report.seen->map) << '\t' << fmt(report.seen->rank1) << "\t-\n";
  if (report.unseen) {
    os << "unseen_avg\tunseen\t" << fmt(report.unseen->map) << '\t' << fmt(report.unseen->rank1) << "\t-\n";
  }
  return os.str();
}

int synth(const std::string& spec_path, const std::string& out_dir, std::uint64_t seed, std::ostream& out) {
  const std::vector<DomainSpec> specs =
      spec_path.empty() ? default_domain_specs() : parse_synth_spec(read_text(spec_path));
  const Dataset data = generate_sequence(specs, seed);
  write_dataset(out_dir, data);
  out << "wrote " << data.images.size() << " images over " << specs.size() << " domains to " << out_dir << '\n';
  return kOk;
}

int train(const std::string& config_path, const std::string& data_dir, const std::string& out_dir, std::ostream& out,
          std::ostream& err) {
  const TrainConfig config = load_config(config_path);
  const Dataset data = load_dataset(data_dir);
  const LifelongResult result =
      lifelong_train(config, data, std::filesystem::path(out_dir), [&](const std::string& msg) { err << msg << '\n'; });
  if (!result.reports.empty()) out << metrics_table(result.reports.back());
  return kOk;
}

int evaluate_cmd(const std::string& checkpoint, const std::string& data_dir, const std::string& out_path,
                 const std::string& retrieval, std::ostream& out) {
  const Representation rep = parse_representation(retrieval);
  const CheckpointState state = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(data_dir);
  const std::set<int> seen(state.trained_domains.begin(), state.trained_domains.end());
  const std::string table = metrics_table(evaluate(state.model, data, seen, rep));
  out << table;
  const std::filesystem::path target =
      out_path.empty() ? std::filesystem::path(checkpoint) / "eval.tsv" : std::filesystem::path(out_path);
  std::ofstream file(target, std::ios::binary);
  if (!file) throw Error("cannot write " + target.string());
  file << table;
  return kOk;
}

int ablate(const std::string& config_path, const std::string& data_dir, const std::string& out_dir, std::ostream& out,
           std::ostream& err) {
  const TrainConfig config = load_config(config_path);
  const Dataset data = load_dataset(data_dir);
  const std::vector<AblationRow> rows =
      run_ablation(config, data, std::filesystem::path(out_dir), [&](const std::string& msg) { err << msg << '\n'; });
  out << "arm\tseen_mAP\tseen_rank1\tunseen_mAP\tunseen_rank1\n";
  for (const AblationRow& r : rows) {
    out << r.arm << '\t' << fmt(r.seen.map) << '\t' << fmt(r.seen.rank1) << '\t' << fmt(r.unseen.map) << '\t'
        << fmt(r.unseen.rank1) << '\n';
  }
  return kOk;
}

int gradcheck(std::uint64_t seed, bool corrupt, std::ostream& out, std::ostream& err) {
  bool ok = true;
  for (const GradCheckResult& r : run_gradchecks(seed, corrupt)) {
    char line[160];
    std::snprintf(line, sizeof(line), "%s %-24s max_rel_err=%.3e tol=%.0e", r.passed ? "PASS" : "FAIL", r.name.c_str(),
                  r.max_rel_error, r.tolerance);
    out << line << '\n';
    if (!r.passed) {
      err << "gradient mismatch in " << r.name << ": max relative error " << r.max_rel_error << '\n';
      ok = false;
    }
  }
  return ok ? kOk : kVerification;
}

int export_cmd(const std::string& checkpoint, const std::string& data_dir, const std::string& out_path,
               const std::string& retrieval, std::ostream& out) {
  const Representation rep = parse_representation(retrieval);
  const CheckpointState state = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(data_dir);
  const EmbeddingSet set = extract_embeddings(state.model, data, rep);
  export_embeddings(out_path, set);
  out << "wrote " << set.size() << " embeddings to " << out_path << '\n';
  return kOk;
}

}  // namespace

std::vector<DomainSpec> parse_synth_spec(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("spec is not valid JSON: ") + e.what());
  }
  only_keys(root, {"domains"}, "spec");
  if (!root.contains("domains") || !root["domains"].is_array() || root["domains"].empty()) {
    throw ConfigError("spec needs a non-empty 'domains' array");
  }
  std::vector<DomainSpec> specs;
  for (const json& d : root["domains"]) {
    only_keys(d, {"name", "style", "identities", "eval_identities", "instances", "cameras", "jitter", "channels",
                  "height", "width"},
              "domain");
    DomainSpec s;
    take(d, "name", s.name);
    take(d, "identities", s.identities);
    take(d, "eval_identities", s.eval_identities);
    take(d, "instances", s.instances);
    take(d, "cameras", s.cameras);
    take(d, "jitter", s.jitter);
    take(d, "channels", s.channels);
    take(d, "height", s.height);
    take(d, "width", s.width);
    if (d.contains("style")) {
      const json& st = d["style"];
      only_keys(st, {"gain", "bias", "brightness", "noise", "background", "camera_cast"}, "style");
      take(st, "gain", s.style.gain);
      take(st, "bias", s.style.bias);
      take(st, "brightness", s.style.brightness);
      take(st, "noise", s.style.noise);
      take(st, "background", s.style.background);
      take(st, "camera_cast", s.style.camera_cast);
    }
    s.validate();
    specs.push_back(s);
  }
  return specs;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lifelong person re-identification with domain-specific knowledge unification", "dkua"};
  app.require_subcommand(1, 1);

  std::string spec, data, out_path, config, checkpoint, retrieval = "unified";
  std::uint64_t seed = 0;
  bool corrupt = false;

  CLI::App* synth_cmd = app.add_subcommand("synth", "Generate the synthetic domain sequence");
  synth_cmd->add_option("--spec", spec, "JSON domain spec (default: built-in 4-domain sequence)");
  synth_cmd->add_option("--out", out_path, "Output directory")->required();
  synth_cmd->add_option("--seed", seed, "Generator seed")->required();

  CLI::App* train_cmd = app.add_subcommand("train", "Lifelong training over the domain sequence");
  train_cmd->add_option("--config", config, "JSON training config")->required();
  train_cmd->add_option("--data", data, "Dataset directory")->required();
  train_cmd->add_option("--out", out_path, "Run directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--data", data, "Dataset directory")->required();
  eval_cmd->add_option("--out", out_path, "Metrics file (default: <checkpoint>/eval.tsv)");
  eval_cmd->add_option("--retrieval", retrieval, "unified, current or pooled");

  CLI::App* ablate_cmd = app.add_subcommand("ablate", "Four-arm loss ablation");
  ablate_cmd->add_option("--config", config, "JSON training config")->required();
  ablate_cmd->add_option("--data", data, "Dataset directory")->required();
  ablate_cmd->add_option("--out", out_path, "Output directory")->required();

  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient certification");
  grad_cmd->add_option("--seed", seed, "Seed for random inputs")->required();
  grad_cmd->add_flag("--corrupt", corrupt, "Scale one analytic gradient (harness self-test)")->group("");

  CLI::App* export_cmd_app = app.add_subcommand("export", "Export embeddings for external plotting");
  export_cmd_app->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  export_cmd_app->add_option("--data", data, "Dataset directory")->required();
  export_cmd_app->add_option("--out", out_path, "Output TSV file")->required();
  export_cmd_app->add_option("--retrieval", retrieval, "unified, current or pooled");

  std::vector<std::string> rest(args.rbegin(), args.rend());
  if (!rest.empty()) rest.pop_back();  // program name
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (synth_cmd->parsed()) return synth(spec, out_path, seed, out);
    if (train_cmd->parsed()) return train(config, data, out_path, out, err);
    if (eval_cmd->parsed()) return evaluate_cmd(checkpoint, data, out_path, retrieval, out);
    if (ablate_cmd->parsed()) return ablate(config, data, out_path, out, err);
    if (grad_cmd->parsed()) return gradcheck(seed, corrupt, out, err);
    if (export_cmd_app->parsed()) return export_cmd(checkpoint, data, out_path, retrieval, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kUsage;
  } catch (const ValidationError& e) {
    err << "invalid input: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical divergence in " << e.term() << ": " << e.what() << '\n';
    return kNumerical;
  } catch (const IntegrityError& e) {
    err << "integrity failure: " << e.what() << '\n';
    return kIntegrity;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kUsage;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace dkua::cli

#include <doctest.h>

#include <fstream>
#include <sstream>

#include "dkua/cli.hpp"
#include "dkua/errors.hpp"
#include "fixtures.hpp"
#include "helpers.hpp"

using namespace dkua;
using testing::ScratchDir;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "dkua");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::string tiny_spec_json() {
  return R"({"domains": [
    {"name": "a", "identities": 4, "eval_identities": 4, "instances": 4, "height": 16, "width": 8},
    {"name": "b", "identities": 4, "eval_identities": 4, "instances": 4, "height": 16, "width": 8,
     "style": {"gain": [0.6, 0.7, 0.9], "camera_cast": 0.1}},
    {"name": "c", "identities": 0, "eval_identities": 4, "instances": 4, "height": 16, "width": 8}
  ]})";
}

std::string tiny_config_json() {
  return R"({"seed": 3, "epochs": 1, "p": 2, "k": 2,
    "model": {"height": 16, "width": 8, "patch": 4, "dim": 8, "depth": 1, "heads": 2, "mlp_hidden": 16}})";
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage errors exit with 2") {
    CHECK(run({}).code == cli::kUsage);
    CHECK(run({"frobnicate"}).code == cli::kUsage);
    CHECK(run({"synth", "--out", "x"}).code == cli::kUsage);
    CHECK(run({"gradcheck", "--seed", "1", "--bogus"}).code == cli::kUsage);
    CHECK(run({"eval", "--checkpoint", "x", "--data", "y", "--retrieval", "sideways"}).code == cli::kUsage);
    CHECK(run({"--help"}).code == cli::kOk);
  }

  TEST_CASE("synth spec parsing") {
    const auto specs = cli::parse_synth_spec(tiny_spec_json());
    REQUIRE(specs.size() == 3);
    CHECK(specs[1].style.gain[0] == 0.6);
    CHECK(specs[1].style.camera_cast == 0.1);
    CHECK(specs[2].identities == 0);
    CHECK_THROWS_AS(cli::parse_synth_spec(R"({"domains": []})"), ConfigError);
    CHECK_THROWS_AS(cli::parse_synth_spec(R"({"domains": [{"colour": 1}]})"), ConfigError);
    CHECK_THROWS_AS(cli::parse_synth_spec(R"({"domains": [{"identities": "x"}]})"), ConfigError);
  }

  TEST_CASE("synth, train, eval and export end to end") {
    ScratchDir dir("cli_e2e");
    write(dir / "spec.json", tiny_spec_json());
    write(dir / "config.json", tiny_config_json());
    const std::string data = (dir / "data").string();
    const std::string runp = (dir / "run").string();

    const Outcome s = run({"synth", "--spec", (dir / "spec.json").string(), "--out", data, "--seed", "4"});
    REQUIRE(s.code == cli::kOk);
    CHECK(std::filesystem::exists(dir / "data/index.tsv"));

    const Outcome t = run({"train", "--config", (dir / "config.json").string(), "--data", data, "--out", runp});
    REQUIRE(t.code == cli::kOk);
    CHECK(t.out.find("seen_avg") != std::string::npos);
    CHECK(t.out.find("unseen_avg") != std::string::npos);

    const std::string ckpt = (dir / "run/checkpoints/domain_2").string();
    const Outcome e = run({"eval", "--checkpoint", ckpt, "--data", data});
    REQUIRE(e.code == cli::kOk);
    CHECK(std::filesystem::exists(dir / "run/checkpoints/domain_2/eval.tsv"));
    CHECK(e.out.rfind("domain\tgroup\tmAP\trank1\tqueries\n", 0) == 0);

    const Outcome x = run({"export", "--checkpoint", ckpt, "--data", data, "--out", (dir / "emb.tsv").string(),
                           "--retrieval", "current"});
    CHECK(x.code == cli::kOk);
    CHECK(std::filesystem::exists(dir / "emb.tsv"));

    // Corrupt one payload byte: integrity failure.
    std::string payload;
    {
      std::ifstream in(dir / "run/checkpoints/domain_2/params.bin", std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      payload = ss.str();
    }
    payload[8] ^= 0x10;
    write(dir / "run/checkpoints/domain_2/params.bin", payload);
    const Outcome bad = run({"eval", "--checkpoint", ckpt, "--data", data});
    CHECK(bad.code == cli::kIntegrity);
    CHECK(bad.err.find("integrity") != std::string::npos);
  }

  TEST_CASE("config problems exit with 2") {
    ScratchDir dir("cli_config");
    write(dir / "noseed.json", R"({"epochs": 1})");
    write(dir / "spec.json", tiny_spec_json());
    const std::string data = (dir / "data").string();
    REQUIRE(run({"synth", "--spec", (dir / "spec.json").string(), "--out", data, "--seed", "1"}).code == cli::kOk);
    const Outcome o = run({"train", "--config", (dir / "noseed.json").string(), "--data", data, "--out",
                           (dir / "run").string()});
    CHECK(o.code == cli::kUsage);
    CHECK(o.err.find("seed") != std::string::npos);
    CHECK(run({"train", "--config", (dir / "missing.json").string(), "--data", data, "--out", (dir / "r").string()})
              .code == cli::kUsage);
    write(dir / "badspec.json", R"({"domains": [{"cameras": 1}]})");
    CHECK(run({"synth", "--spec", (dir / "badspec.json").string(), "--out", data, "--seed", "1"}).code == cli::kUsage);
  }

  TEST_CASE("malformed index exits with 2") {
    ScratchDir dir("cli_index");
    std::filesystem::create_directories(dir / "data");
    write(dir / "data/index.tsv", "#dkua-index v1\nimages/a.img\t1\t0\tone\ttrain\n");
    write(dir / "config.json", tiny_config_json());
    const Outcome o = run({"train", "--config", (dir / "config.json").string(), "--data", (dir / "data").string(),
                           "--out", (dir / "run").string()});
    CHECK(o.code == cli::kUsage);
    CHECK(o.err.find("line 2") != std::string::npos);
  }

  TEST_CASE("gradcheck self-test trips on a corrupted gradient") {
    const Outcome o = run({"gradcheck", "--seed", "1", "--corrupt"});
    CHECK(o.code == cli::kVerification);
    CHECK(o.out.find("FAIL matmul") != std::string::npos);
  }
}

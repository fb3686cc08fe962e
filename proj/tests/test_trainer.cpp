#include <doctest.h>

#include <fstream>
#include <sstream>

#include "dkua/errors.hpp"
#include "dkua/trainer.hpp"
#include "fixtures.hpp"
#include "helpers.hpp"

using namespace dkua;
using testing::ScratchDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("config parsing") {
    const TrainConfig c = parse_config(R"({"seed": 5, "epochs": 3, "model": {"dim": 32}})");
    CHECK(c.seed == 5);
    CHECK(c.epochs == 3);
    CHECK(c.model.backbone.dim == 32);
    CHECK(c.lr == 1e-3);

    try {
      parse_config(R"({"epochs": 3})");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("seed") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config(R"({"seed": 1, "learning_rate": 0.1})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"seed": 1, "epochs": "many"})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"seed": 1, "p": 1})"), ConfigError);
    CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
  }

  TEST_CASE("config survives a JSON round trip") {
    TrainConfig c = testing::tiny_config();
    c.domain_order = {2, 1};
    c.loss.dkt_weight = 0.5;
    const TrainConfig back = parse_config(config_to_json(c));
    CHECK(back.seed == c.seed);
    CHECK(back.domain_order == c.domain_order);
    CHECK(back.loss.dkt_weight == 0.5);
    CHECK(back.model.backbone.height == 16);
  }

  TEST_CASE("desk config file parses") {
    const TrainConfig c = load_config(std::filesystem::path(DKUA_SOURCE_DIR) / "configs" / "desk.json");
    CHECK(c.epochs == 15);
    CHECK(c.p * c.k == 16);
  }

  TEST_CASE("step decay schedule") {
    TrainConfig c;
    c.lr = 5e-6;
    c.lr_decay = 0.1;
    c.lr_decay_period = 20;
    CHECK(lr_at(c, 0) == 5e-6);
    CHECK(lr_at(c, 19) == 5e-6);
    CHECK(lr_at(c, 20) == doctest::Approx(5e-7).epsilon(1e-12));
    CHECK(lr_at(c, 59) == doctest::Approx(5e-8).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(c, -1), ValidationError);
  }

  TEST_CASE("first Adam step moves each live parameter by lr against the gradient sign") {
    Parameter live("w", Tensor::Zero(1, 3));
    Parameter frozen("f", Tensor::Zero(1, 3));
    frozen.frozen = true;
    live.grad = Tensor(1, 3);
    live.grad << 2.0, -0.5, 1e-3;
    frozen.grad = Tensor::Ones(1, 3);
    OptimizerState opt;
    std::vector<Parameter*> ps{&live, &frozen};
    adam_step(ps, opt, 0.01);
    CHECK(live.value(0, 0) == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(live.value(0, 1) == doctest::Approx(0.01).epsilon(1e-6));
    CHECK(live.value(0, 2) == doctest::Approx(-0.01).epsilon(1e-4));
    CHECK(frozen.value.isZero());
    CHECK(opt.moments.count("f") == 0);
  }

  TEST_CASE("loss records serialize every term") {
    LossRecord r;
    r.step = 4;
    r.parts.reid = 1.5;
    r.parts.total = 1.5;
    const std::string line = to_jsonl(r);
    for (const char* key : {"\"L_CE\"", "\"L_Tri\"", "\"L_ReID\"", "\"L_KA\"", "\"L_UKA\"", "\"L_DKT\"", "\"L\""}) {
      CHECK(line.find(key) != std::string::npos);
    }
  }

  TEST_CASE("small lifelong run: logs, curve, checkpoints and determinism") {
    ScratchDir a("run_a");
    ScratchDir b("run_b");
    const Dataset data = generate_sequence(testing::tiny_specs(), 2);
    const TrainConfig config = testing::tiny_config();
    const LifelongResult ra = lifelong_train(config, data, a.path());
    lifelong_train(config, data, b.path());

    CHECK(ra.order == std::vector<int>{1, 2, 3});
    // 4 identities x 4 instances at P=K=2: four batches per epoch.
    CHECK(ra.losses.size() == 3 * 2 * 4);
    for (const LossRecord& r : ra.losses) {
      if (r.domain == 1) {
        CHECK(r.parts.ka == 0.0);
        CHECK(r.parts.uka == 0.0);
        CHECK(r.parts.dkt == 0.0);
        CHECK(r.parts.total == r.parts.reid);
      } else {
        CHECK(r.parts.dkt > 0.0);
      }
      CHECK(r.parts.reid == r.parts.ce + r.parts.tri);
    }

    // Curve: after domain t, the t seen domains plus the unseen one.
    CHECK(count_lines(slurp(a / "metrics/curve.csv")) == 1 + 2 + 3 + 4);
    CHECK(count_lines(slurp(a / "logs/losses.jsonl")) == ra.losses.size());
    CHECK(slurp(a / "logs/losses.jsonl") == slurp(b / "logs/losses.jsonl"));
    CHECK(slurp(a / "checkpoints/domain_3/params.bin") == slurp(b / "checkpoints/domain_3/params.bin"));

    const CheckpointState st = load_checkpoint(a / "checkpoints/domain_3");
    CHECK(st.trained_domains == std::vector<int>{1, 2, 3});
    CHECK(st.steps == static_cast<long long>(ra.losses.size()));
    CHECK(st.stats.merged_domains() == 3);
    const auto pa = st.model.parameters();
    const auto pb = ra.model.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->value == pb[i]->value);
      CHECK(pa[i]->frozen == pb[i]->frozen);
    }

    // Earlier transfer modules stay bitwise frozen across later domains.
    const CheckpointState first = load_checkpoint(a / "checkpoints/domain_1");
    for (const Parameter* p : first.model.parameters()) {
      if (p->name.rfind("tm1.", 0) != 0) continue;
      bool found = false;
      for (const Parameter* q : st.model.parameters()) {
        if (q->name == p->name) {
          CHECK(q->value == p->value);
          found = true;
        }
      }
      CHECK(found);
    }
  }

  TEST_CASE("checkpoint integrity failures") {
    ScratchDir dir("ckpt");
    const Dataset data = generate_sequence(testing::tiny_specs(), 2);
    TrainConfig config = testing::tiny_config();
    config.epochs = 1;
    config.domain_order = {1};
    lifelong_train(config, data, dir.path());
    const auto ckpt = dir / "checkpoints/domain_1";
    CHECK_NOTHROW(load_checkpoint(ckpt));

    std::string payload = slurp(ckpt / "params.bin");
    payload[payload.size() / 2] ^= 0x01;
    { std::ofstream(ckpt / "params.bin", std::ios::binary) << payload; }
    CHECK_THROWS_AS(load_checkpoint(ckpt), IntegrityError);

    payload.pop_back();
    { std::ofstream(ckpt / "params.bin", std::ios::binary) << payload; }
    CHECK_THROWS_AS(load_checkpoint(ckpt), IntegrityError);

    { std::ofstream(ckpt / "manifest.json") << "{"; }
    CHECK_THROWS_AS(load_checkpoint(ckpt), IntegrityError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IntegrityError);
  }

  TEST_CASE("ablation arms share seeds and silence disabled terms") {
    ScratchDir dir("ablate");
    const Dataset data = generate_sequence(testing::tiny_specs(), 2);
    TrainConfig config = testing::tiny_config();
    config.epochs = 1;
    const std::vector<AblationRow> rows = run_ablation(config, data, dir.path());
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].arm == "Baseline");
    CHECK(rows[0].max_terms.ka == 0.0);
    CHECK(rows[0].max_terms.uka == 0.0);
    CHECK(rows[0].max_terms.dkt == 0.0);
    CHECK(rows[1].max_terms.ka > 0.0);
    CHECK(rows[1].max_terms.uka == 0.0);
    CHECK(rows[2].max_terms.uka > 0.0);
    CHECK(rows[2].max_terms.dkt == 0.0);
    CHECK(rows[3].max_terms.dkt > 0.0);
    for (const char* arm : {"arm_baseline", "arm_ka", "arm_ka_uka", "arm_full"}) {
      CHECK(std::filesystem::exists(dir / arm / "logs/losses.jsonl"));
    }
    CHECK(count_lines(slurp(dir / "ablation.csv")) == 5);
  }

  TEST_CASE("training order validation") {
    const Dataset data = generate_sequence(testing::tiny_specs(), 2);
    TrainConfig c = testing::tiny_config();
    c.domain_order = {1, 1};
    CHECK_THROWS_AS(training_order(c, data.index), ConfigError);
    c.domain_order = {4};
    CHECK_THROWS_AS(training_order(c, data.index), ConfigError);
  }
}

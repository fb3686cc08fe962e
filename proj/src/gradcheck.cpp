#include "dkua/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dkua/distribution.hpp"
#include "dkua/losses.hpp"
#include "dkua/model.hpp"
#include "dkua/trainer.hpp"

namespace dkua {

namespace {

constexpr double kStep = 1e-5;
constexpr double kOpTolerance = 1e-4;
constexpr double kLossTolerance = 1e-3;
constexpr double kCompositeTolerance = 1e-3;
constexpr double kDenominatorFloor = 1e-8;
constexpr Eigen::Index kWideBatch = 16;

Tensor uniform(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

Tensor spd(std::mt19937_64& rng, Eigen::Index dim) {
  const Tensor a = uniform(rng, dim, dim);
  return a * a.transpose() / static_cast<double>(dim) + 0.5 * Tensor::Identity(dim, dim);
}

// Contracts any output with fixed random weights so every element of the
// gradient is exercised.
Var project(Graph& g, Var out, const Tensor& weights) { return sum(hadamard(out, g.constant(weights))); }

struct ParamCheck {
  std::string name;
  std::vector<Parameter*> params;
  std::function<Var(Graph&)> build;
  double tolerance;
};

GradCheckResult check_parameters(const ParamCheck& c, double perturb) {
  for (Parameter* p : c.params) p->zero_grad();
  std::vector<Tensor> held;
  {
    Graph g;
    g.backward(c.build(g));
    held = g.detached();
  }
  double worst = 0.0;
  bool first = true;
  for (Parameter* p : c.params) {
    if (p->frozen) continue;
    Tensor analytic = p->grad;
    if (first && perturb != 1.0) {
      analytic *= perturb;
      first = false;
    }
    const Tensor saved = p->value;
    const Tensor numeric = finite_diff_gradient(
        [&](const Tensor& x) {
          p->value = x;
          Graph g;
          g.replay_detached(held);
          return c.build(g).scalar();
        },
        saved, kStep);
    p->value = saved;
    worst = std::max(worst, max_relative_error(analytic, numeric));
  }
  return {c.name, worst, c.tolerance, worst <= c.tolerance};
}

// Moves every parameter away from its initialization so that copied transfer
// modules differ and nothing sits at an exact stationary point.
void jitter(DkuaModel& model, std::mt19937_64& rng, double amplitude) {
  for (Parameter* p : model.parameters()) {
    p->value += uniform(rng, p->value.rows(), p->value.cols(), -amplitude, amplitude);
  }
}

BackboneConfig tiny_backbone(int dim, int depth) {
  BackboneConfig b;
  b.height = 8;
  b.width = 8;
  b.channels = 2;
  b.patch = 4;
  b.dim = dim;
  b.depth = depth;
  b.heads = 2;
  b.mlp_hidden = 2 * dim;
  return b;
}

}  // namespace

double max_relative_error(const Tensor& analytic, const Tensor& numeric) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i];
    const double n = numeric.data()[i];
    worst = std::max(worst, std::abs(a - n) / std::max(std::abs(a), kDenominatorFloor));
  }
  return worst;
}

GradCheckResult check_gradient(const std::string& name, const ScalarBuilder& build, const std::vector<Tensor>& inputs,
                               double tolerance, double perturb_analytic) {
  std::vector<Tensor> analytic;
  std::vector<Tensor> held;
  {
    Graph g;
    std::vector<Var> leaves;
    for (const Tensor& x : inputs) leaves.push_back(g.variable(x));
    g.backward(build(g, leaves));
    for (const Var& v : leaves) analytic.push_back(g.grad(v));
    held = g.detached();
  }
  if (!analytic.empty()) analytic.front() *= perturb_analytic;
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor numeric = finite_diff_gradient(
        [&](const Tensor& x) {
          Graph g;
          g.replay_detached(held);
          std::vector<Var> leaves;
          for (std::size_t j = 0; j < inputs.size(); ++j) leaves.push_back(g.variable(j == i ? x : inputs[j]));
          return build(g, leaves).scalar();
        },
        inputs[i], kStep);
    worst = std::max(worst, max_relative_error(analytic[i], numeric));
  }
  return {name, worst, tolerance, worst <= tolerance};
}

std::vector<GradCheckResult> run_gradchecks(std::uint64_t seed, bool corrupt) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;
  const double bad = corrupt ? 1.5 : 1.0;
  double tolerance = kOpTolerance;
  auto op = [&](const std::string& name, const ScalarBuilder& build, const std::vector<Tensor>& inputs) {
    out.push_back(check_gradient(name, build, inputs, tolerance, out.empty() ? bad : 1.0));
  };

  const Eigen::Index b = 4;
  const Eigen::Index d = 6;
  const Eigen::Index n = 3;

  {
    const Tensor w = uniform(rng, b, 5);
    op("matmul", [w](Graph& g, const std::vector<Var>& x) { return project(g, matmul(x[0], x[1]), w); },
       {uniform(rng, b, d), uniform(rng, d, 5)});
  }
  {
    const Tensor w = uniform(rng, b, d);
    op("add_sub", [w](Graph& g, const std::vector<Var>& x) { return project(g, sub(add(x[0], x[1]), scale(x[1], 0.3)), w); },
       {uniform(rng, b, d), uniform(rng, b, d)});
    op("hadamard", [w](Graph& g, const std::vector<Var>& x) { return project(g, hadamard(x[0], x[1]), w); },
       {uniform(rng, b, d), uniform(rng, b, d)});
    op("add_row", [w](Graph& g, const std::vector<Var>& x) { return project(g, add_row(x[0], x[1]), w); },
       {uniform(rng, b, d), uniform(rng, 1, d)});
    op("mul_row", [w](Graph& g, const std::vector<Var>& x) { return project(g, mul_row(x[0], x[1]), w); },
       {uniform(rng, b, d), uniform(rng, 1, d)});
    op("scale_rows", [w](Graph& g, const std::vector<Var>& x) { return project(g, scale_rows(x[0], x[1]), w); },
       {uniform(rng, b, d), uniform(rng, b, 1)});
    op("gelu", [w](Graph& g, const std::vector<Var>& x) { return project(g, gelu(x[0]), w); },
       {uniform(rng, b, d, -3.0, 3.0)});
    op("layer_norm", [w](Graph& g, const std::vector<Var>& x) { return project(g, layer_norm(x[0]), w); },
       {uniform(rng, b, d)});
    op("softmax_rows", [w](Graph& g, const std::vector<Var>& x) { return project(g, softmax(x[0], 1), w); },
       {uniform(rng, b, d)});
    op("softmax_cols", [w](Graph& g, const std::vector<Var>& x) { return project(g, softmax(x[0], 0), w); },
       {uniform(rng, b, d)});
    op("column", [w](Graph& g, const std::vector<Var>& x) { return project(g, column(x[0], 2), w.col(2)); },
       {uniform(rng, b, d)});
  }
  {
    const Tensor w0 = uniform(rng, 1, d);
    const Tensor w1 = uniform(rng, b, 1);
    op("mean", [w0, w1](Graph& g, const std::vector<Var>& x) {
         return add(add(project(g, mean(x[0], 0), w0), project(g, mean(x[0], 1), w1)), mean_all(x[0]));
       },
       {uniform(rng, b, d)});
  }
  {
    const Tensor w = uniform(rng, b, d);
    op("segment_mean", [w](Graph& g, const std::vector<Var>& x) { return project(g, segment_mean(x[0], n), w); },
       {uniform(rng, b * n, d)});
    op("add_tiled", [](Graph& g, const std::vector<Var>& x) {
         return sum(hadamard(add_tiled(x[0], x[1]), add_tiled(x[0], x[1])));
       },
       {uniform(rng, b * n, d), uniform(rng, n, d)});
  }
  {
    const Tensor w = uniform(rng, b * n, d);
    op("attention", [w, n](Graph& g, const std::vector<Var>& x) { return project(g, attention(x[0], x[1], x[2], n, 2), w); },
       {uniform(rng, b * n, d), uniform(rng, b * n, d), uniform(rng, b * n, d)});
  }
  {
    const Tensor w = uniform(rng, b, 1);
    op("rowwise_cosine", [w](Graph& g, const std::vector<Var>& x) { return project(g, rowwise_cosine(x[0], x[1]), w); },
       {uniform(rng, b, d), uniform(rng, b, d)});
  }
  {
    const Tensor w = uniform(rng, d, d);
    op("covariance", [w](Graph& g, const std::vector<Var>& x) { return project(g, covariance(x[0]), w); },
       {uniform(rng, 10, d)});
  }
  op("gaussian_kl", [](Graph&, const std::vector<Var>& x) { return gaussian_kl(x[0], x[1]); },
     {spd(rng, d), spd(rng, d)});
  op("kl_discrete", [](Graph&, const std::vector<Var>& x) { return kl_discrete(softmax(x[0], 0), softmax(x[1], 0)); },
     {uniform(rng, b, 1), uniform(rng, b, 1)});

  // Loss terms.
  tolerance = kLossTolerance;
  const std::vector<int> labels = {0, 0, 1, 1};
  op("cross_entropy", [&labels](Graph&, const std::vector<Var>& x) { return cross_entropy(softmax(x[0], 1), labels); },
     {uniform(rng, b, 3)});
  op("triplet", [&labels](Graph&, const std::vector<Var>& x) { return triplet(x[0], labels, 2.0); },
     {uniform(rng, b, d)});
  op("reid", [&labels](Graph&, const std::vector<Var>& x) { return reid_loss(softmax(x[0], 1), labels, x[1], 0.3); },
     {uniform(rng, b, 3), uniform(rng, b, d)});
  op("ka", [](Graph& g, const std::vector<Var>& x) { return ka_loss(g, x).loss; },
     {uniform(rng, b, d), uniform(rng, b, d), uniform(rng, b, d)});
  {
    const Tensor w = uniform(rng, b, 1);
    op("association", [w](Graph& g, const std::vector<Var>& x) { return project(g, association(x[0], x[1], 0.1), w); },
       {uniform(rng, b, d), uniform(rng, b, d)});
  }
  op("uka", [](Graph& g, const std::vector<Var>& x) {
       std::vector<Var> assoc;
       for (std::size_t i = 0; i + 1 < x.size(); ++i) assoc.push_back(association(x[i], x.back(), 0.1));
       return uka_loss(g, assoc);
     },
     {uniform(rng, b, d), uniform(rng, b, d), uniform(rng, b, d), uniform(rng, b, d)});
  {
    DomainStats stats(static_cast<int>(d));
    for (int k = 0; k < 2; ++k) {
      stats.open_domain();
      stats.accumulate(uniform(rng, 20, d));
      stats.finalize_domain(3 + k);
      stats.unified_update();
    }
    op("dkt", [stats](Graph& g, const std::vector<Var>& x) { return dkt_loss(g, stats, covariance(x[0]), 3, 2); },
       {uniform(rng, b, d)});
  }

  // Model components on a small configuration.
  {
    ModelConfig mc;
    mc.backbone = tiny_backbone(8, 1);
    DkuaModel model = DkuaModel::create(mc, seed + 1);
    grow_domain(model, 2);
    jitter(model, rng, 0.1);
    const Tensor images = uniform(rng, b, mc.backbone.pixels(), 0.0, 1.0);
    const Tensor w = uniform(rng, b, mc.backbone.dim);
    std::vector<Parameter*> params;
    model.backbone.visit([&](Parameter& p) { params.push_back(&p); });
    out.push_back(check_parameters(
        {"backbone", params, [&](Graph& g) { return project(g, backbone_forward(g, model, images).pooled, w); },
         kOpTolerance},
        1.0));

    params.clear();
    model.modules.front().visit([&](Parameter& p) { params.push_back(&p); });
    const Tensor tokens = uniform(rng, b * mc.backbone.tokens(), mc.backbone.dim);
    out.push_back(check_parameters({"transfer_module", params,
                                    [&](Graph& g) {
                                      return project(g, tm_forward(g, model.modules.front(), g.constant(tokens), mc.backbone),
                                                     w);
                                    },
                                    kOpTolerance},
                                   1.0));
    out.push_back(check_gradient(
        "transfer_module_input",
        [&](Graph& g, const std::vector<Var>& x) {
          return project(g, tm_forward(g, model.modules.front(), x[0], mc.backbone), w);
        },
        {tokens}, kOpTolerance));

    ClassifierHead& head = model.classifiers.front();
    out.push_back(check_parameters(
        {"classifier", {&head.weight, &head.bias},
         [&](Graph& g) { return cross_entropy(classify(g, head, g.constant(tokens.topRows(b))), labels); }, kOpTolerance},
        1.0));
  }

  // Composite objective at t = 3 over every updatable parameter. The stored
  // history comes from the model's own earlier transfer modules.
  auto composite = [&](const std::string& name, Eigen::Index batch_size) {
    ModelConfig mc;
    mc.backbone = tiny_backbone(static_cast<int>(d), 1);
    DkuaModel model = DkuaModel::create(mc, seed + 2);
    DomainStats stats(static_cast<int>(d));
    const int classes = static_cast<int>(batch_size / 2);
    for (int k = 0; k < 3; ++k) {
      grow_domain(model, classes);
      jitter(model, rng, 0.2);
      if (k == 2) break;
      Graph g;
      const ForwardOutputs f = model_forward(g, model, uniform(rng, 12, mc.backbone.pixels()));
      stats.open_domain();
      stats.accumulate(f.domain_reprs.back().value());
      stats.finalize_domain(classes);
      stats.unified_update();
      model.close_domain();
    }
    Batch batch;
    batch.images = uniform(rng, batch_size, mc.backbone.pixels());
    for (Eigen::Index i = 0; i < batch_size; ++i) batch.labels.push_back(static_cast<int>(i / 2));
    const LossConfig lc;
    std::vector<Parameter*> params;
    for (Parameter* p : model.parameters()) {
      if (!p->frozen) params.push_back(p);
    }
    out.push_back(check_parameters(
        {name, params, [&](Graph& g) { return build_objective(g, model, stats, batch, lc, classes).total; },
         kCompositeTolerance},
        1.0));
  };
  composite("composite_t3", b);
  // With B <= D the batch covariance is singular and the KL is dominated by
  // the 1/eps null-space term; central differences then lose the small
  // entries to rounding. A well-conditioned batch isolates correctness.
  composite("composite_t3_b" + std::to_string(kWideBatch), kWideBatch);
  return out;
}

}  // namespace dkua

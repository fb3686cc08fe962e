#include "dkua/model.hpp"

#include <cmath>

namespace dkua {

namespace {

Tensor random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

Parameter linear_weight(const std::string& name, int in, int out, std::mt19937_64& rng) {
  return Parameter(name, random_normal(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

Parameter zeros(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  return Parameter(name, Tensor::Zero(rows, cols));
}

Parameter ones(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  return Parameter(name, Tensor::Ones(rows, cols));
}

Var affine_norm(Graph& g, Var x, Parameter& gain, Parameter& bias) {
  return add_row(mul_row(layer_norm(x), g.parameter(gain)), g.parameter(bias));
}

Var linear(Graph& g, Var x, Parameter& w, Parameter& b) { return add_row(matmul(x, g.parameter(w)), g.parameter(b)); }

void rename(TransferModule& tm, int index) {
  const std::string prefix = "tm" + std::to_string(index) + ".";
  tm.visit([&](Parameter& p) { p.name = prefix + p.name.substr(p.name.find('.') + 1); });
}

}  // namespace

void BackboneConfig::validate() const {
  if (height <= 0 || width <= 0 || channels <= 0 || patch <= 0) throw ConfigError("image extents must be positive");
  if (height % patch != 0 || width % patch != 0) throw ConfigError("patch size must divide image height and width");
  if (dim <= 0 || heads <= 0 || dim % heads != 0) throw ConfigError("embedding dim must be divisible by heads");
  if (depth < 1) throw ConfigError("encoder depth must be at least 1");
  if (mlp_hidden < 1) throw ConfigError("mlp_hidden must be positive");
}

EncoderBlock EncoderBlock::init(const std::string& prefix, int dim, int hidden, std::mt19937_64& rng) {
  EncoderBlock b;
  b.ln1_gain = ones(prefix + "ln1_gain", 1, dim);
  b.ln1_bias = zeros(prefix + "ln1_bias", 1, dim);
  b.wq = linear_weight(prefix + "wq", dim, dim, rng);
  b.wk = linear_weight(prefix + "wk", dim, dim, rng);
  b.wv = linear_weight(prefix + "wv", dim, dim, rng);
  b.wo = linear_weight(prefix + "wo", dim, dim, rng);
  b.bo = zeros(prefix + "bo", 1, dim);
  b.ln2_gain = ones(prefix + "ln2_gain", 1, dim);
  b.ln2_bias = zeros(prefix + "ln2_bias", 1, dim);
  b.fc1_w = linear_weight(prefix + "fc1_w", dim, hidden, rng);
  b.fc1_b = zeros(prefix + "fc1_b", 1, hidden);
  b.fc2_w = linear_weight(prefix + "fc2_w", hidden, dim, rng);
  b.fc2_b = zeros(prefix + "fc2_b", 1, dim);
  return b;
}

Var EncoderBlock::forward(Graph& g, Var x, int tokens, int heads) {
  Var h = affine_norm(g, x, ln1_gain, ln1_bias);
  Var q = matmul(h, g.parameter(wq));
  Var k = matmul(h, g.parameter(wk));
  Var v = matmul(h, g.parameter(wv));
  Var attn = linear(g, attention(q, k, v, tokens, heads), wo, bo);
  x = add(x, attn);
  h = affine_norm(g, x, ln2_gain, ln2_bias);
  Var ffn = linear(g, gelu(linear(g, h, fc1_w, fc1_b)), fc2_w, fc2_b);
  return add(x, ffn);
}

void EncoderBlock::visit(const std::function<void(Parameter&)>& fn) {
  for (Parameter* p : {&ln1_gain, &ln1_bias, &wq, &wk, &wv, &wo, &bo, &ln2_gain, &ln2_bias, &fc1_w, &fc1_b,
                       &fc2_w, &fc2_b}) {
    fn(*p);
  }
}

void Backbone::visit(const std::function<void(Parameter&)>& fn) {
  fn(patch_w);
  fn(patch_b);
  fn(pos);
  for (EncoderBlock& b : blocks) b.visit(fn);
  fn(norm_gain);
  fn(norm_bias);
}

void TransferModule::set_frozen(bool frozen) {
  visit([frozen](Parameter& p) { p.frozen = frozen; });
}

void TransferModule::visit(const std::function<void(Parameter&)>& fn) {
  block.visit(fn);
  fn(proj_w);
  fn(proj_b);
}

DkuaModel DkuaModel::create(const ModelConfig& config, std::uint64_t seed) {
  config.backbone.validate();
  const BackboneConfig& c = config.backbone;
  DkuaModel m;
  m.config = config;
  m.rng.seed(seed);
  m.backbone.patch_w = linear_weight("backbone.patch_w", c.patch_dim(), c.dim, m.rng);
  m.backbone.patch_b = zeros("backbone.patch_b", 1, c.dim);
  m.backbone.pos = Parameter("backbone.pos", random_normal(c.tokens(), c.dim, 0.02, m.rng));
  for (int i = 0; i < c.depth; ++i) {
    m.backbone.blocks.push_back(
        EncoderBlock::init("backbone.block" + std::to_string(i) + ".", c.dim, c.mlp_hidden, m.rng));
  }
  m.backbone.norm_gain = ones("backbone.norm_gain", 1, c.dim);
  m.backbone.norm_bias = zeros("backbone.norm_bias", 1, c.dim);
  m.unification.weight = zeros("unify.weight", c.dim, 0);
  m.unification.bias = zeros("unify.bias", 1, 0);
  return m;
}

std::vector<Parameter*> DkuaModel::parameters() {
  std::vector<Parameter*> out;
  auto push = [&out](Parameter& p) { out.push_back(&p); };
  backbone.visit(push);
  for (TransferModule& tm : modules) tm.visit(push);
  if (domains > 0) {
    out.push_back(&unification.weight);
    out.push_back(&unification.bias);
  }
  for (ClassifierHead& h : classifiers) {
    out.push_back(&h.weight);
    out.push_back(&h.bias);
  }
  return out;
}

std::vector<const Parameter*> DkuaModel::parameters() const {
  auto* self = const_cast<DkuaModel*>(this);
  std::vector<const Parameter*> out;
  for (Parameter* p : self->parameters()) out.push_back(p);
  return out;
}

void DkuaModel::close_domain() {
  if (!domain_open) throw ProtocolError("close_domain without an open domain");
  domain_open = false;
}

Tensor patchify(const Tensor& images, const BackboneConfig& c) {
  if (images.cols() != c.pixels()) {
    throw ConfigError("image row has " + std::to_string(images.cols()) + " values, config expects " +
                      std::to_string(c.pixels()));
  }
  const int rows_p = c.height / c.patch;
  const int cols_p = c.width / c.patch;
  const int n = c.tokens();
  Tensor out(images.rows() * n, c.patch_dim());
  for (Eigen::Index b = 0; b < images.rows(); ++b) {
    for (int pr = 0; pr < rows_p; ++pr) {
      for (int pc = 0; pc < cols_p; ++pc) {
        const Eigen::Index row = b * n + pr * cols_p + pc;
        Eigen::Index col = 0;
        for (int ch = 0; ch < c.channels; ++ch) {
          for (int dy = 0; dy < c.patch; ++dy) {
            for (int dx = 0; dx < c.patch; ++dx) {
              const int y = pr * c.patch + dy;
              const int x = pc * c.patch + dx;
              out(row, col++) = images(b, (ch * c.height + y) * c.width + x);
            }
          }
        }
      }
    }
  }
  return out;
}

BackboneOutputs backbone_forward(Graph& g, DkuaModel& model, const Tensor& images) {
  const BackboneConfig& c = model.config.backbone;
  Backbone& bb = model.backbone;
  Var patches = g.constant(patchify(images, c));
  Var x = add_tiled(linear(g, patches, bb.patch_w, bb.patch_b), g.parameter(bb.pos));
  for (EncoderBlock& block : bb.blocks) x = block.forward(g, x, c.tokens(), c.heads);
  Var tokens = affine_norm(g, x, bb.norm_gain, bb.norm_bias);
  return {tokens, segment_mean(tokens, c.tokens())};
}

Var tm_forward(Graph& g, TransferModule& tm, Var tokens, const BackboneConfig& c) {
  Var styled = tm.block.forward(g, tokens, c.tokens(), c.heads);
  return linear(g, segment_mean(styled, c.tokens()), tm.proj_w, tm.proj_b);
}

std::vector<Var> dse_forward(Graph& g, DkuaModel& model, Var tokens) {
  if (model.modules.empty()) throw StateError("domain-style encoder has no transfer modules");
  std::vector<Var> out;
  out.reserve(model.modules.size());
  for (TransferModule& tm : model.modules) out.push_back(tm_forward(g, tm, tokens, model.config.backbone));
  return out;
}

Var compute_unification_weights(Graph& g, DkuaModel& model, Var pooled) {
  UnificationHead& head = model.unification;
  if (head.width() != static_cast<int>(model.modules.size())) {
    throw StateError("unification head width " + std::to_string(head.width()) + " does not match " +
                     std::to_string(model.modules.size()) + " transfer modules");
  }
  return softmax(linear(g, pooled, head.weight, head.bias), 1);
}

Var unify(std::span<const Var> domain_reprs, Var weights) {
  if (domain_reprs.empty() || static_cast<Eigen::Index>(domain_reprs.size()) != weights.cols()) {
    throw StateError("unify: " + std::to_string(domain_reprs.size()) + " representations for " +
                     std::to_string(weights.cols()) + " weight columns");
  }
  Var acc = scale_rows(domain_reprs[0], column(weights, 0));
  for (std::size_t i = 1; i < domain_reprs.size(); ++i) {
    acc = add(acc, scale_rows(domain_reprs[i], column(weights, static_cast<Eigen::Index>(i))));
  }
  return acc;
}

Var classify(Graph& g, ClassifierHead& head, Var unified) {
  return softmax(linear(g, unified, head.weight, head.bias), 1);
}

ForwardOutputs model_forward(Graph& g, DkuaModel& model, const Tensor& images) {
  ForwardOutputs out;
  BackboneOutputs bb = backbone_forward(g, model, images);
  out.tokens = bb.tokens;
  out.pooled = bb.pooled;
  out.domain_reprs = dse_forward(g, model, bb.tokens);
  out.weights = compute_unification_weights(g, model, bb.pooled);
  out.unified = unify(out.domain_reprs, out.weights);
  return out;
}

void grow_domain(DkuaModel& model, int classes) {
  if (model.domain_open) throw ProtocolError("grow_domain called while a domain is still in training");
  if (classes < 1) throw ValidationError("classifier head needs at least one class");
  const BackboneConfig& c = model.config.backbone;

  const bool first = model.modules.empty();
  if (first) {
    TransferModule tm;
    tm.block = EncoderBlock::init("tm1.", c.dim, c.mlp_hidden, model.rng);
    tm.proj_w = linear_weight("tm1.proj_w", c.dim, c.dim, model.rng);
    tm.proj_b = zeros("tm1.proj_b", 1, c.dim);
    model.modules.push_back(std::move(tm));
  } else if (model.config.dynamic_modules) {
    for (TransferModule& tm : model.modules) tm.set_frozen(true);
    TransferModule next = model.modules.back();
    next.set_frozen(false);
    rename(next, static_cast<int>(model.modules.size()) + 1);
    model.modules.push_back(std::move(next));
  }

  const Eigen::Index width = static_cast<Eigen::Index>(model.modules.size());
  UnificationHead& head = model.unification;
  if (head.weight.value.cols() != width) {
    Tensor w = Tensor::Zero(c.dim, width);
    Tensor b = Tensor::Zero(1, width);
    const Eigen::Index keep = head.weight.value.cols();
    w.leftCols(keep) = head.weight.value;
    b.leftCols(keep) = head.bias.value;
    head.weight.value = std::move(w);
    head.bias.value = std::move(b);
    head.weight.grad.resize(0, 0);
    head.bias.grad.resize(0, 0);
  }

  for (ClassifierHead& old : model.classifiers) {
    old.weight.frozen = true;
    old.bias.frozen = true;
  }
  ClassifierHead cls;
  const std::string prefix = "cls" + std::to_string(model.domains + 1) + ".";
  cls.weight = linear_weight(prefix + "weight", c.dim, classes, model.rng);
  cls.bias = zeros(prefix + "bias", 1, classes);
  model.classifiers.push_back(std::move(cls));

  ++model.domains;
  model.domain_open = true;
}

}  // namespace dkua

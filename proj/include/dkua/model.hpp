#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dkua/numerics.hpp"

namespace dkua {

struct BackboneConfig {
  int height = 32;
  int width = 16;
  int channels = 3;
  int patch = 8;
  int dim = 64;
  int depth = 2;
  int heads = 4;
  int mlp_hidden = 128;

  int tokens() const { return (height / patch) * (width / patch); }
  int patch_dim() const { return channels * patch * patch; }
  int pixels() const { return channels * height * width; }
  /// Throws ConfigError on an inconsistent configuration.
  void validate() const;
};

struct ModelConfig {
  BackboneConfig backbone;
  /// When false the model keeps a single, always-trainable transfer module
  /// (naive sequential fine-tuning); the unification head stays at width 1.
  bool dynamic_modules = true;
};

/// Pre-norm transformer block: x + MHSA(LN(x)), then + FFN(LN(x)).
struct EncoderBlock {
  Parameter ln1_gain, ln1_bias;
  Parameter wq, wk, wv, wo, bo;
  Parameter ln2_gain, ln2_bias;
  Parameter fc1_w, fc1_b, fc2_w, fc2_b;

  static EncoderBlock init(const std::string& prefix, int dim, int hidden, std::mt19937_64& rng);
  Var forward(Graph& g, Var x, int tokens, int heads);
  void visit(const std::function<void(Parameter&)>& fn);
};

struct Backbone {
  Parameter patch_w, patch_b, pos;
  std::vector<EncoderBlock> blocks;
  Parameter norm_gain, norm_bias;

  void visit(const std::function<void(Parameter&)>& fn);
};

struct TransferModule {
  EncoderBlock block;
  Parameter proj_w, proj_b;

  bool frozen() const { return proj_w.frozen; }
  void set_frozen(bool frozen);
  void visit(const std::function<void(Parameter&)>& fn);
};

struct UnificationHead {
  Parameter weight;  // D x t
  Parameter bias;    // 1 x t

  int width() const { return static_cast<int>(weight.value.cols()); }
};

struct ClassifierHead {
  Parameter weight;  // D x C
  Parameter bias;    // 1 x C

  int classes() const { return static_cast<int>(weight.value.cols()); }
};

struct DkuaModel {
  ModelConfig config;
  Backbone backbone;
  std::vector<TransferModule> modules;
  UnificationHead unification;
  std::vector<ClassifierHead> classifiers;
  /// Number of domains the model has been grown for.
  int domains = 0;
  /// True between grow_domain and close_domain.
  bool domain_open = false;
  std::mt19937_64 rng;

  /// Builds the backbone with seeded random weights; no domains yet.
  static DkuaModel create(const ModelConfig& config, std::uint64_t seed);

  /// Every parameter in a fixed order (backbone, modules, unification,
  /// classifiers). The order defines checkpoint layout.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;

  void close_domain();
};

struct BackboneOutputs {
  Var tokens;  // (B*N) x D
  Var pooled;  // B x D
};

struct ForwardOutputs {
  Var tokens;
  Var pooled;
  std::vector<Var> domain_reprs;  // theta^1..theta^t, each B x D
  Var weights;                    // omega, B x t
  Var unified;                    // theta, B x D
};

/// images: B x (C*H*W), each row in channel-major C,H,W order.
Tensor patchify(const Tensor& images, const BackboneConfig& config);

BackboneOutputs backbone_forward(Graph& g, DkuaModel& model, const Tensor& images);
Var tm_forward(Graph& g, TransferModule& tm, Var tokens, const BackboneConfig& config);
std::vector<Var> dse_forward(Graph& g, DkuaModel& model, Var tokens);
Var compute_unification_weights(Graph& g, DkuaModel& model, Var pooled);
Var unify(std::span<const Var> domain_reprs, Var weights);
Var classify(Graph& g, ClassifierHead& head, Var unified);

ForwardOutputs model_forward(Graph& g, DkuaModel& model, const Tensor& images);

/// Opens domain t+1: appends a transfer module (copy of module t, or seeded
/// random for the first), freezes modules 1..t, appends a classifier head of
/// `classes` outputs and widens the unification head by a zero column.
void grow_domain(DkuaModel& model, int classes);

}  // namespace dkua

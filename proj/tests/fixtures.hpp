#pragma once

#include "dkua/data.hpp"
#include "dkua/trainer.hpp"

namespace testing {

// Four small domains (three seen, one unseen) at 16x8 pixels.
inline std::vector<dkua::DomainSpec> tiny_specs() {
  std::vector<dkua::DomainSpec> specs = dkua::default_domain_specs();
  for (dkua::DomainSpec& s : specs) {
    if (s.identities > 0) s.identities = 4;
    s.eval_identities = 4;
    s.instances = 4;
    s.height = 16;
    s.width = 8;
    s.jitter = 1;
  }
  return specs;
}

inline dkua::TrainConfig tiny_config() {
  dkua::TrainConfig c;
  c.seed = 3;
  c.epochs = 2;
  c.lr = 1e-3;
  c.lr_decay_period = 1;
  c.p = 2;
  c.k = 2;
  dkua::BackboneConfig& b = c.model.backbone;
  b.height = 16;
  b.width = 8;
  b.patch = 4;
  b.dim = 8;
  b.depth = 1;
  b.heads = 2;
  b.mlp_hidden = 16;
  return c;
}

}  // namespace testing

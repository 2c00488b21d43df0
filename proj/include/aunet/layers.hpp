#pragma once

// Thin parameter-holding wrappers over the autograd ops.

#include <string>

#include "aunet/autograd.hpp"
#include "aunet/parameter.hpp"
#include "aunet/rng.hpp"

namespace aunet {

// Largest divisor of `channels` not above `requested`.
int pick_groups(int channels, int requested);

struct Conv2d {
  const Parameter* weight = nullptr;
  const Parameter* bias = nullptr;
  int stride = 1;
  int pad = 0;

  static Conv2d create(ParameterStore& store, const std::string& name, int in, int out,
                       int kernel, int stride, bool with_bias, Rng& rng);
  ag::Var operator()(ag::Var x) const;
};

struct GroupNorm {
  const Parameter* gamma = nullptr;
  const Parameter* beta = nullptr;
  int groups = 1;

  static GroupNorm create(ParameterStore& store, const std::string& name, int channels,
                          int groups);
  ag::Var operator()(ag::Var x) const;
};

// conv -> group norm -> optional ReLU
struct ConvNormAct {
  Conv2d conv;
  GroupNorm norm;
  bool relu = true;

  static ConvNormAct create(ParameterStore& store, const std::string& name, int in, int out,
                            int kernel, int stride, int groups, Rng& rng, bool relu = true);
  ag::Var operator()(ag::Var x) const;
};

struct Linear {
  const Parameter* weight = nullptr;
  const Parameter* bias = nullptr;

  static Linear create(ParameterStore& store, const std::string& name, int in, int out,
                       Rng& rng, bool with_bias = true);
  ag::Var operator()(ag::Var x) const;
};

struct LayerNorm {
  const Parameter* gamma = nullptr;
  const Parameter* beta = nullptr;

  static LayerNorm create(ParameterStore& store, const std::string& name, int dim);
  ag::Var operator()(ag::Var x) const;
};

}  // namespace aunet

#include "aunet/layers.hpp"

#include <cmath>

namespace aunet {

int pick_groups(int channels, int requested) {
  for (int g = std::min(channels, requested); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

Conv2d Conv2d::create(ParameterStore& store, const std::string& name, int in, int out,
                      int kernel, int stride, bool with_bias, Rng& rng) {
  Conv2d c;
  Parameter& w = store.create(name + ".weight", {out, in, kernel, kernel});
  init_he(w, in * kernel * kernel, rng);
  c.weight = &w;
  if (with_bias) c.bias = &store.create(name + ".bias", {out});
  c.stride = stride;
  c.pad = kernel / 2;
  return c;
}

ag::Var Conv2d::operator()(ag::Var x) const {
  ag::Tape& t = x.tape();
  return ag::conv2d(x, t.param(*weight), bias ? t.param(*bias) : ag::Var{}, stride, pad);
}

GroupNorm GroupNorm::create(ParameterStore& store, const std::string& name, int channels,
                            int groups) {
  GroupNorm n;
  Parameter& g = store.create(name + ".gamma", {channels});
  init_constant(g, 1.0);
  n.gamma = &g;
  n.beta = &store.create(name + ".beta", {channels});
  n.groups = pick_groups(channels, groups);
  return n;
}

ag::Var GroupNorm::operator()(ag::Var x) const {
  ag::Tape& t = x.tape();
  return ag::group_norm(x, t.param(*gamma), t.param(*beta), groups);
}

ConvNormAct ConvNormAct::create(ParameterStore& store, const std::string& name, int in,
                                int out, int kernel, int stride, int groups, Rng& rng,
                                bool relu) {
  ConvNormAct b;
  b.conv = Conv2d::create(store, name + ".conv", in, out, kernel, stride, false, rng);
  b.norm = GroupNorm::create(store, name + ".norm", out, groups);
  b.relu = relu;
  return b;
}

ag::Var ConvNormAct::operator()(ag::Var x) const {
  ag::Var y = norm(conv(x));
  return relu ? ag::relu(y) : y;
}

Linear Linear::create(ParameterStore& store, const std::string& name, int in, int out,
                      Rng& rng, bool with_bias) {
  Linear l;
  Parameter& w = store.create(name + ".weight", {out, in});
  init_normal(w, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  l.weight = &w;
  if (with_bias) l.bias = &store.create(name + ".bias", {out});
  return l;
}

ag::Var Linear::operator()(ag::Var x) const {
  ag::Tape& t = x.tape();
  return ag::linear(x, t.param(*weight), bias ? t.param(*bias) : ag::Var{});
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& name, int dim) {
  LayerNorm n;
  Parameter& g = store.create(name + ".gamma", {dim});
  init_constant(g, 1.0);
  n.gamma = &g;
  n.beta = &store.create(name + ".beta", {dim});
  return n;
}

ag::Var LayerNorm::operator()(ag::Var x) const {
  ag::Tape& t = x.tape();
  return ag::layer_norm(x, t.param(*gamma), t.param(*beta));
}

}  // namespace aunet

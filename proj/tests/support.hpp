#pragma once

// Helpers shared by unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "aunet/autograd.hpp"
#include "aunet/parameter.hpp"
#include "aunet/rng.hpp"

namespace aunet::testing {

// |a - n| / max(|a|, |n|, 1e-6)
inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

inline std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

using LossBuilder = std::function<ag::Var(ag::Tape&, const std::vector<ag::Var>&)>;

// Worst relative error between backprop and central differences for a scalar
// loss of several inputs. Every input entry is checked.
inline double max_input_grad_error(std::vector<Parameter>& inputs, const LossBuilder& build, double h = 1e-6) {
  std::vector<std::vector<double>> analytic;
  {
    ag::Tape tape;
    std::vector<ag::Var> leaves;
    for (Parameter& p : inputs) leaves.push_back(tape.param(p));
    const ag::Var loss = build(tape, leaves);
    tape.backward(loss);
    for (const ag::Var& l : leaves) {
      const auto g = tape.grad_of(l);
      analytic.emplace_back(g.begin(), g.end());
      if (analytic.back().empty()) analytic.back().assign(l.size(), 0.0);
    }
  }
  auto eval = [&]() {
    ag::Tape tape;
    std::vector<ag::Var> leaves;
    for (Parameter& p : inputs) leaves.push_back(tape.param(p));
    return build(tape, leaves).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].value.size(); ++i) {
      const double x = inputs[k].value[i];
      inputs[k].value[i] = x + h;
      const double up = eval();
      inputs[k].value[i] = x - h;
      const double down = eval();
      inputs[k].value[i] = x;
      worst = std::max(worst, rel_error(analytic[k][i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

struct ParamEntry {
  Parameter* param = nullptr;
  std::size_t index = 0;
};

// `count` entries spread round-robin over the store's tensors (each tensor is
// visited before any is revisited), random element within each tensor.
inline std::vector<ParamEntry> stratified_entries(ParameterStore& store, std::size_t count, Rng& rng) {
  std::vector<Parameter*> tensors;
  for (const auto& p : store.all()) tensors.push_back(p.get());
  for (std::size_t i = tensors.size(); i > 1; --i)
    std::swap(tensors[i - 1], tensors[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  std::vector<ParamEntry> out;
  for (std::size_t k = 0; k < count && !tensors.empty(); ++k) {
    Parameter* p = tensors[k % tensors.size()];
    out.push_back({p, static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(p->value.size()) - 1))});
  }
  return out;
}

// Relative error per entry between backprop and central differences of a
// scalar loss built from parameters bound inside `build`.
inline std::vector<double> param_grad_errors(const std::vector<ParamEntry>& entries,
                                             const std::function<ag::Var(ag::Tape&)>& build, double h = 1e-6) {
  GradientBuffer grads;
  {
    ag::Tape tape;
    tape.backward(build(tape));
    tape.accumulate_param_grads(grads);
  }
  std::vector<double> errors;
  for (const ParamEntry& e : entries) {
    const auto* g = grads.find(*e.param);
    const double analytic = g ? (*g)[e.index] : 0.0;
    const double x = e.param->value[e.index];
    e.param->value[e.index] = x + h;
    double up, down;
    {
      ag::Tape tape;
      up = build(tape).item();
    }
    e.param->value[e.index] = x - h;
    {
      ag::Tape tape;
      down = build(tape).item();
    }
    e.param->value[e.index] = x;
    errors.push_back(rel_error(analytic, (up - down) / (2.0 * h)));
  }
  return errors;
}

inline Parameter make_input(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Parameter p;
  p.name = "input";
  p.shape = shape;
  p.value = random_values(numel(shape), rng, lo, hi);
  return p;
}

}  // namespace aunet::testing

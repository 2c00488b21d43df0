#pragma once

#include <memory>
#include <string>
#include <vector>

#include "aunet/config.hpp"
#include "aunet/parameter.hpp"

namespace aunet {

// Named, shaped array used for checkpointed tensors.
struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> data;

  friend bool operator==(const NamedArray&, const NamedArray&) = default;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;

  // Applies one update; every parameter's step is scaled by its lr_scale.
  // Parameters without a gradient entry are treated as having zero gradient.
  virtual void step(ParameterStore& params, const GradientBuffer& grads) = 0;

  virtual std::vector<NamedArray> state() const = 0;
  virtual void load_state(const std::vector<NamedArray>& state) = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& config);

// Global L2 norm of all gradients.
double gradient_norm(const ParameterStore& params, const GradientBuffer& grads);

// Rescales `grads` in place so the global norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_gradients(const ParameterStore& params, GradientBuffer& grads, double max_norm);

}  // namespace aunet

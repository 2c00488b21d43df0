#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "aunet/rng.hpp"

namespace aunet {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  // Multiplier on the optimizer step size for this parameter.
  double lr_scale = 1.0;
};

// Owns every trainable tensor of a model. Addresses are stable for the life of
// the store, so modules keep plain references.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;

  Parameter& create(const std::string& name, Shape shape, double lr_scale = 1.0);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& at(const std::string& name);

  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  // Copies values from `other` for every parameter name present in both;
  // shapes must agree.
  void copy_values_from(const ParameterStore& other);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

void init_normal(Parameter& p, double stddev, Rng& rng);
void init_he(Parameter& p, int fan_in, Rng& rng);
void init_constant(Parameter& p, double v);

// Per-parameter gradient accumulator, keyed by parameter address.
class GradientBuffer {
 public:
  void add(const Parameter& p, const double* grad, double scale = 1.0);
  std::vector<double>& at(const Parameter& p);
  const std::vector<double>* find(const Parameter& p) const;
  void clear() { grads_.clear(); }
  void scale(double s);
  bool all_finite() const;

 private:
  std::unordered_map<const Parameter*, std::vector<double>> grads_;
};

}  // namespace aunet

#include "aunet/parameter.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "aunet/error.hpp"

namespace aunet {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Parameter& ParameterStore::create(const std::string& name, Shape shape, double lr_scale) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value.assign(numel(shape), 0.0);
  p->shape = std::move(shape);
  p->lr_scale = lr_scale;
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : params_[it->second].get();
}

Parameter& ParameterStore::at(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw ConfigError("unknown parameter: " + name);
  return *p;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::copy_values_from(const ParameterStore& other) {
  for (const auto& p : params_) {
    const Parameter* src = other.find(p->name);
    if (!src) continue;
    if (src->shape != p->shape)
      throw ShapeError("parameter " + p->name + " has shape " + shape_str(p->shape) +
                       ", source has " + shape_str(src->shape));
    p->value = src->value;
  }
}

void init_normal(Parameter& p, double stddev, Rng& rng) {
  for (double& v : p.value) v = stddev * rng.normal();
}

void init_he(Parameter& p, int fan_in, Rng& rng) {
  init_normal(p, std::sqrt(2.0 / static_cast<double>(fan_in)), rng);
}

void init_constant(Parameter& p, double v) { std::fill(p.value.begin(), p.value.end(), v); }

void GradientBuffer::add(const Parameter& p, const double* grad, double scale) {
  auto& g = grads_[&p];
  if (g.empty()) g.assign(p.value.size(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * grad[i];
}

std::vector<double>& GradientBuffer::at(const Parameter& p) {
  auto& g = grads_[&p];
  if (g.empty()) g.assign(p.value.size(), 0.0);
  return g;
}

const std::vector<double>* GradientBuffer::find(const Parameter& p) const {
  auto it = grads_.find(&p);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradientBuffer::scale(double s) {
  for (auto& [p, g] : grads_)
    for (double& v : g) v *= s;
}

bool GradientBuffer::all_finite() const {
  for (const auto& [p, g] : grads_)
    for (double v : g)
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace aunet

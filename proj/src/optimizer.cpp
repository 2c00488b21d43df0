#include "aunet/optimizer.hpp"

#include <cmath>
#include <map>

#include "aunet/error.hpp"

namespace aunet {

namespace {

const double* grad_or_null(const GradientBuffer& grads, const Parameter& p) {
  const std::vector<double>* g = grads.find(p);
  return g ? g->data() : nullptr;
}

class MomentumSgd final : public Optimizer {
 public:
  explicit MomentumSgd(const OptimizerConfig& c) : config_(c) {}

  void step(ParameterStore& params, const GradientBuffer& grads) override {
    for (const auto& p : params.all()) {
      std::vector<double>& vel = velocity_[p->name];
      if (vel.empty()) vel.assign(p->value.size(), 0.0);
      const double* g = grad_or_null(grads, *p);
      const double lr = config_.lr * p->lr_scale;
      for (std::size_t i = 0; i < vel.size(); ++i) {
        vel[i] = config_.momentum * vel[i] + (g ? g[i] : 0.0);
        p->value[i] -= lr * vel[i];
      }
    }
  }

  std::vector<NamedArray> state() const override {
    std::vector<NamedArray> out;
    for (const auto& [name, v] : velocity_)
      out.push_back({"sgd.velocity." + name, {static_cast<int>(v.size())}, v});
    return out;
  }

  void load_state(const std::vector<NamedArray>& state) override {
    velocity_.clear();
    const std::string prefix = "sgd.velocity.";
    for (const NamedArray& a : state) {
      if (a.name.rfind(prefix, 0) != 0)
        throw IntegrityError("optimizer state entry '" + a.name + "' does not belong to sgd");
      velocity_[a.name.substr(prefix.size())] = a.data;
    }
  }

 private:
  OptimizerConfig config_;
  std::map<std::string, std::vector<double>> velocity_;
};

class Adam final : public Optimizer {
 public:
  explicit Adam(const OptimizerConfig& c) : config_(c) {}

  void step(ParameterStore& params, const GradientBuffer& grads) override {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (const auto& p : params.all()) {
      std::vector<double>& m = m_[p->name];
      std::vector<double>& v = v_[p->name];
      if (m.empty()) {
        m.assign(p->value.size(), 0.0);
        v.assign(p->value.size(), 0.0);
      }
      const double* g = grad_or_null(grads, *p);
      const double lr = config_.lr * p->lr_scale;
      for (std::size_t i = 0; i < m.size(); ++i) {
        const double gi = g ? g[i] : 0.0;
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
        p->value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
      }
    }
  }

  std::vector<NamedArray> state() const override {
    std::vector<NamedArray> out;
    out.push_back({"adam.t", {1}, {static_cast<double>(t_)}});
    for (const auto& [name, v] : m_) out.push_back({"adam.m." + name, {static_cast<int>(v.size())}, v});
    for (const auto& [name, v] : v_) out.push_back({"adam.v." + name, {static_cast<int>(v.size())}, v});
    return out;
  }

  void load_state(const std::vector<NamedArray>& state) override {
    m_.clear();
    v_.clear();
    t_ = 0;
    for (const NamedArray& a : state) {
      if (a.name == "adam.t")
        t_ = static_cast<long>(a.data.at(0));
      else if (a.name.rfind("adam.m.", 0) == 0)
        m_[a.name.substr(7)] = a.data;
      else if (a.name.rfind("adam.v.", 0) == 0)
        v_[a.name.substr(7)] = a.data;
      else
        throw IntegrityError("optimizer state entry '" + a.name + "' does not belong to adam");
    }
  }

 private:
  OptimizerConfig config_;
  long t_ = 0;
  std::map<std::string, std::vector<double>> m_;
  std::map<std::string, std::vector<double>> v_;
};

}  // namespace

std::unique_ptr<Optimizer> make_optimizer(const OptimizerConfig& config) {
  config.validate();
  if (config.kind == OptimizerKind::kAdam) return std::make_unique<Adam>(config);
  return std::make_unique<MomentumSgd>(config);
}

double gradient_norm(const ParameterStore& params, const GradientBuffer& grads) {
  double s = 0.0;
  for (const auto& p : params.all())
    if (const std::vector<double>* g = grads.find(*p))
      for (double x : *g) s += x * x;
  return std::sqrt(s);
}

double clip_gradients(const ParameterStore& params, GradientBuffer& grads, double max_norm) {
  const double norm = gradient_norm(params, grads);
  if (max_norm > 0.0 && norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

}  // namespace aunet

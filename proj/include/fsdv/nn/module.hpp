#pragma once

// Named parameter storage, layer wrappers and optimizers.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fsdv/nn/autograd.hpp"

namespace fsdv::nn {

using ParamArchive = std::map<std::string, Tensor<double>>;

template <typename T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, parameter(std::move(init)));
    return items_.back().second;
  }

  const Var<T>& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return items_[it->second].second;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::pair<std::string, Var<T>>>& items() const { return items_; }

  std::size_t num_values() const {
    std::size_t n = 0;
    for (const auto& [_, p] : items_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : items_) {
      if (p->grad.size() == p->value.size()) p->grad.fill(T(0));
    }
  }

  ParamArchive export_archive() const {
    ParamArchive out;
    for (const auto& [name, p] : items_) out[name] = p->value.template cast<double>();
    return out;
  }

  /// Every stored parameter must be present with a matching shape; extra
  /// archive entries are ignored unless `strict`.
  void import_archive(const ParamArchive& archive, bool strict = true) {
    for (auto& [name, p] : items_) {
      auto it = archive.find(name);
      if (it == archive.end()) throw ConfigError("checkpoint lacks parameter " + name);
      if (it->second.shape() != p->value.shape()) {
        throw ConfigError("checkpoint parameter " + name + " has shape " +
                          shape_string(it->second.shape()) + ", expected " +
                          shape_string(p->value.shape()));
      }
      p->value = it->second.template cast<T>();
    }
    if (strict) {
      for (const auto& [name, _] : archive) {
        if (!index_.count(name)) throw ConfigError("checkpoint has unexpected parameter " + name);
      }
    }
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> items_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
Tensor<T> he_normal(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> scaled_normal(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
struct Conv {
  Var<T> w, b;
  Var<T> operator()(const Var<T>& x) const { return conv2d(x, w, b); }
};

template <typename T>
Conv<T> make_conv(ParamStore<T>& ps, const std::string& name, int in, int out, int k,
                  std::mt19937_64& rng) {
  return {ps.add(name + ".w", he_normal<T>({out, in, k, k}, in * k * k, rng)),
          ps.add(name + ".b", Tensor<T>({out}))};
}

template <typename T>
struct Dense {
  Var<T> w, b;
  Var<T> operator()(const Var<T>& x) const { return linear(x, w, b); }
  int in() const { return w->value.dim(1); }
  int out() const { return w->value.dim(0); }
};

template <typename T>
Dense<T> make_dense(ParamStore<T>& ps, const std::string& name, int in, int out,
                    std::mt19937_64& rng, double stddev = 0.0) {
  auto w = stddev > 0.0 ? scaled_normal<T>({out, in}, stddev, rng)
                        : he_normal<T>({out, in}, in, rng);
  return {ps.add(name + ".w", std::move(w)), ps.add(name + ".b", Tensor<T>({out}))};
}

template <typename T>
struct GroupNorm {
  Var<T> gamma, beta;
  int groups = 1;
  Var<T> operator()(const Var<T>& x) const { return group_norm(x, gamma, beta, groups); }
};

template <typename T>
GroupNorm<T> make_group_norm(ParamStore<T>& ps, const std::string& name, int channels,
                             int groups) {
  return {ps.add(name + ".gamma", Tensor<T>({channels}, T(1))),
          ps.add(name + ".beta", Tensor<T>({channels})), groups};
}

enum class OptimizerKind { kSgd, kAdam };

/// SGD with momentum, or Adam. Weight decay is L2 added to the gradient.
template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, ParamStore<T>& params, double momentum = 0.9,
            double weight_decay = 0.0)
      : kind_(kind), params_(params), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& [_, p] : params_.items()) {
      m_.emplace_back(p->value.size(), 0.0);
      if (kind_ == OptimizerKind::kAdam) v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, t_), c2 = 1.0 - std::pow(b2, t_);
    std::size_t k = 0;
    for (auto& [_, p] : params_.items()) {
      auto& m = m_[k];
      if (p->grad.size() != p->value.size()) {
        ++k;
        continue;
      }
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = static_cast<double>(p->grad[i]) + weight_decay_ * p->value[i];
        if (kind_ == OptimizerKind::kSgd) {
          m[i] = momentum_ * m[i] + g;
          p->value[i] -= static_cast<T>(lr * m[i]);
        } else {
          auto& v = v_[k];
          m[i] = b1 * m[i] + (1.0 - b1) * g;
          v[i] = b2 * v[i] + (1.0 - b2) * g * g;
          p->value[i] -= static_cast<T>(lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps));
        }
      }
      ++k;
    }
  }

 private:
  OptimizerKind kind_;
  ParamStore<T>& params_;
  double momentum_;
  double weight_decay_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace fsdv::nn

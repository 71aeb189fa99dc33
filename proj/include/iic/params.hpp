#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "iic/tensor.hpp"

namespace iic {

// Named, ordered collection of trainable tensors plus per-tensor Adam state.
class ParameterStore {
 public:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  Tensor create(const std::string& name, Shape shape) {
    if (params_.count(name))
      throw std::invalid_argument("parameter name already used: " + name);
    Tensor t(std::move(shape), /*requires_grad=*/true);
    names_.push_back(name);
    params_.emplace(name, t);
    return t;
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter: " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no parameter: " + name);
    return it->second;
  }

  const std::vector<std::string>& names() const { return names_; }
  size_t count() const { return names_.size(); }

  Moments& moments(const std::string& name) {
    auto& mo = opt_[name];
    const size_t n = static_cast<size_t>(at(name).size());
    if (mo.m.size() != n) {
      mo.m.assign(n, 0.0);
      mo.v.assign(n, 0.0);
    }
    return mo;
  }

  std::int64_t step = 0;

  void zero_grads() {
    for (const auto& n : names_) at(n).zero_grad();
  }

  // overwrite every tensor with N(0, stddev) values; used by the
  // invertibility property suites, which want fully random weights
  void randomize_all(std::mt19937_64& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (const auto& n : names_) {
      Tensor& t = at(n);
      for (std::int64_t i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
    }
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, Tensor> params_;
  std::unordered_map<std::string, Moments> opt_;
};

} // namespace iic

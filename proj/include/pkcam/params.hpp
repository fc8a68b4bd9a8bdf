#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pkcam/tensor.hpp"

namespace pkcam {

// Ordered name -> tensor registry. Registration order is the serialization
// order, so checkpoints are byte-reproducible.
class ParamRegistry {
 public:
  void add(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    entries_.emplace_back(name, std::move(t));
  }

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }

  Tensor* find(const std::string& name) {
    for (auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace pkcam

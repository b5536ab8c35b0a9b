#pragma once

#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "esa/tensor.hpp"

namespace esa {

/// Named parameter tensors in registration order. Names are layer paths such
/// as "encoder.0.weight"; gradients use a ParameterSet with the same layout.
template <typename T>
class ParameterSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.count(name)) {
      throw std::invalid_argument("ParameterSet: duplicate parameter " + name);
    }
    index_.emplace(name, tensors_.size());
    names_.push_back(name);
    tensors_.push_back(std::move(value));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& operator[](const std::string& name) { return tensors_[lookup(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return tensors_[lookup(name)]; }

  std::size_t count() const noexcept { return tensors_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  Tensor<T>& at(std::size_t i) { return tensors_.at(i); }
  const Tensor<T>& at(std::size_t i) const { return tensors_.at(i); }

  /// Total scalar count over parameters whose name satisfies the predicate.
  template <typename Pred>
  std::size_t scalar_count(Pred&& keep) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (keep(names_[i])) n += tensors_[i].size();
    }
    return n;
  }
  std::size_t scalar_count() const {
    return scalar_count([](const std::string&) { return true; });
  }

  /// Same names and shapes, all zeros.
  ParameterSet zeros_like() const {
    ParameterSet z;
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      z.add(names_[i], Tensor<T>(tensors_[i].shape()));
    }
    return z;
  }

  /// Flat view for coordinate-wise access: the i-th scalar over all tensors.
  T& scalar(std::size_t flat) {
    auto [t, off] = locate(flat);
    return tensors_[t][off];
  }
  T scalar(std::size_t flat) const {
    auto [t, off] = locate(flat);
    return tensors_[t][off];
  }
  /// Name of the tensor holding flat scalar index `flat`.
  const std::string& owner(std::size_t flat) const { return names_[locate(flat).first]; }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tensors_) h = content_hash(t, h);
    return h;
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("ParameterSet: no parameter " + name);
    return it->second;
  }
  std::pair<std::size_t, std::size_t> locate(std::size_t flat) const {
    for (std::size_t i = 0; i < tensors_.size(); ++i) {
      if (flat < tensors_[i].size()) return {i, flat};
      flat -= tensors_[i].size();
    }
    throw std::out_of_range("ParameterSet: flat index out of range");
  }

  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// He-normal weights, zero bias, for a conv ([out, in, k, k]) or linear ([out, in]) layer.
template <typename T>
void add_layer(ParameterSet<T>& params, const std::string& prefix, Shape weight_shape,
               Rng& rng) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < weight_shape.size(); ++i) fan_in *= weight_shape[i];
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  const std::size_t out = weight_shape[0];
  Tensor<T> w(std::move(weight_shape));
  for (auto& v : w) v = static_cast<T>(stddev * normal(rng));
  params.add(prefix + ".weight", std::move(w));
  params.add(prefix + ".bias", Tensor<T>({out}));
}

}  // namespace esa

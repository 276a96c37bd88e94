// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "finsent/errors.hpp"

namespace finsent {

template <class T>
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> values;

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::span<T> span() { return values; }
  std::span<const T> span() const { return values; }

  bool operator==(const Tensor&) const = default;
};

/// Row-major matrix used for activations and logits.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, T{0}) {}

  T& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  std::span<T> row(std::size_t r) { return std::span<T>(values).subspan(r * cols, cols); }
  std::span<const T> row(std::size_t r) const { return std::span<const T>(values).subspan(r * cols, cols); }
};

/// Ordered collection of named tensors. Insertion order is the
/// serialization order.
template <class T>
class ParameterSet {
 public:
  Tensor<T>& add(std::string name, std::vector<std::size_t> shape) {
    if (index_.contains(name)) throw ShapeError("duplicate parameter " + name);
    const std::size_t count =
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    index_.emplace(name, tensors_.size());
    tensors_.push_back({std::move(name), std::move(shape), std::vector<T>(count, T{0})});
    return tensors_.back();
  }

  std::size_t size() const { return tensors_.size(); }
  Tensor<T>& operator[](std::size_t i) { return tensors_[i]; }
  const Tensor<T>& operator[](std::size_t i) const { return tensors_[i]; }

  const Tensor<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &tensors_[it->second];
  }
  Tensor<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("no parameter named " + name);
    return tensors_[it->second];
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("no parameter named " + name);
    return tensors_[it->second];
  }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ShapeError("no parameter named " + name);
    return it->second;
  }

  ParameterSet zeros_like() const {
    ParameterSet out;
    for (const auto& t : tensors_) out.add(t.name, t.shape);
    return out;
  }
  void fill(T value) {
    for (auto& t : tensors_) std::fill(t.values.begin(), t.values.end(), value);
  }
  bool same_layout(const ParameterSet& other) const {
    if (other.size() != size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
      if (tensors_[i].name != other[i].name || tensors_[i].shape != other[i].shape) return false;
    }
    return true;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  bool operator==(const ParameterSet& other) const { return tensors_ == other.tensors_; }

 private:
  std::vector<Tensor<T>> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace finsent

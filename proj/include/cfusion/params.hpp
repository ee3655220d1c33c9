#pragma once

#include "cfusion/autodiff.hpp"
#include "cfusion/rng.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace cfusion {

template <typename T>
using Matrix = ad::Matrix<T>;

/// Named tensors of a model. Ordered by name so iteration (and therefore
/// serialization) is deterministic.
template <typename T>
class ParameterSet {
 public:
  using Map = std::map<std::string, Matrix<T>>;

  void add(const std::string& name, Matrix<T> value) {
    auto [it, inserted] = tensors_.emplace(name, std::move(value));
    if (!inserted) throw std::invalid_argument("duplicate parameter name: " + name);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  const Matrix<T>& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  Matrix<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  const Map& tensors() const noexcept { return tensors_; }
  Map& tensors() noexcept { return tensors_; }
  std::size_t size() const noexcept { return tensors_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : tensors_) n += static_cast<std::size_t>(m.size());
    return n;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [name, m] : tensors_) out.add(name, m.template cast<U>());
    return out;
  }

  bool operator==(const ParameterSet& other) const {
    if (tensors_.size() != other.tensors_.size()) return false;
    auto a = tensors_.begin();
    auto b = other.tensors_.begin();
    for (; a != tensors_.end(); ++a, ++b) {
      if (a->first != b->first || a->second.rows() != b->second.rows() ||
          a->second.cols() != b->second.cols() || a->second != b->second) {
        return false;
      }
    }
    return true;
  }

 private:
  Map tensors_;
};

template <typename T>
using Gradients = std::map<std::string, Matrix<T>>;

// Truncated normal (resampled beyond two standard deviations).
template <typename T>
Matrix<T> truncated_normal(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  Matrix<T> m(rows, cols);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) {
      double z = dist(rng);
      while (std::abs(z) > 2.0) z = dist(rng);
      m(i, j) = static_cast<T>(z * stddev);
    }
  }
  return m;
}

/// Binds parameters of a set onto a tape, once per name, and collects the
/// resulting gradients after backward().
template <typename T>
class ParamBinding {
 public:
  ParamBinding(ad::Tape<T>& tape, const ParameterSet<T>& params, bool trainable)
      : tape_(&tape), params_(&params), trainable_(trainable) {}

  ad::Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const auto& value = params_->at(name);
    auto var = trainable_ ? tape_->variable(value) : tape_->constant(value);
    bound_.emplace(name, var);
    return var;
  }

  ad::Tape<T>& tape() const noexcept { return *tape_; }
  bool trainable() const noexcept { return trainable_; }

  // Every parameter of the set gets an entry; unreached ones are zero.
  Gradients<T> gradients() const {
    Gradients<T> out;
    for (const auto& [name, value] : params_->tensors()) {
      auto it = bound_.find(name);
      out.emplace(name, it == bound_.end() ? Matrix<T>::Zero(value.rows(), value.cols())
                                           : tape_->grad(it->second));
    }
    return out;
  }

 private:
  ad::Tape<T>* tape_;
  const ParameterSet<T>* params_;
  bool trainable_;
  std::map<std::string, ad::Var<T>> bound_;
};

}  // namespace cfusion

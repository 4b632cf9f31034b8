#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sdt/error.hpp"

namespace sdt {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> value;
  // Empty until a backward pass (or an explicit zero_grad) touches it.
  std::vector<T> grad;
  bool requires_grad = false;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

// Reference-semantics handle onto shared storage. Copying a BasicTensor
// aliases the same buffer; use clone() for an independent copy.
template <typename T>
class BasicTensor {
 public:
  using Scalar = T;

  BasicTensor() = default;

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor filled(Shape shape, T value, bool requires_grad = false);
  static BasicTensor from_values(Shape shape, std::vector<T> values, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(storage_); }

  const Shape& shape() const { return storage_->shape; }
  std::size_t rank() const { return storage_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return storage_->shape.at(axis); }
  std::size_t numel() const { return storage_->value.size(); }

  std::span<T> values() { return storage_->value; }
  std::span<const T> values() const { return storage_->value; }
  T* data() { return storage_->value.data(); }
  const T* data() const { return storage_->value.data(); }
  T& operator[](std::size_t i) { return storage_->value[i]; }
  const T& operator[](std::size_t i) const { return storage_->value[i]; }
  T at(std::size_t row, std::size_t col) const { return storage_->value[row * dim(1) + col]; }
  T item() const;

  bool requires_grad() const { return storage_ && storage_->requires_grad; }
  void set_requires_grad(bool flag) { storage_->requires_grad = flag; }

  bool has_grad() const { return storage_ && storage_->grad.size() == storage_->value.size(); }
  std::span<T> grad() { return storage_->ensure_grad(); }
  std::span<const T> grad() const { return storage_->grad; }
  void zero_grad() { storage_->grad.assign(storage_->value.size(), T(0)); }
  void clear_grad() { storage_->grad.clear(); }

  // Deep copy of the values; the copy keeps requires_grad but no grad buffer.
  BasicTensor clone() const;

  bool same_storage(const BasicTensor& other) const noexcept { return storage_ == other.storage_; }
  const std::shared_ptr<TensorStorage<T>>& storage() const noexcept { return storage_; }

 private:
  explicit BasicTensor(std::shared_ptr<TensorStorage<T>> storage) : storage_(std::move(storage)) {}

  std::shared_ptr<TensorStorage<T>> storage_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

// Ordered record of differentiable operations. Operations register a
// backward closure while a tape is active on the current thread; backward()
// replays the closures in exact reverse order and then marks the tape
// consumed.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn);
  void backward(const BasicTensor<T>& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  bool consumed() const noexcept { return consumed_; }

  // Thread-local tape that ops record into, or nullptr in inference mode.
  static Tape* active() noexcept;

 private:
  template <typename>
  friend class TapeScope;
  template <typename>
  friend class NoGradScope;
  static Tape*& active_slot() noexcept;

  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_slot()) { Tape<T>::active_slot() = &tape; }
  ~TapeScope() { Tape<T>::active_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Suspends recording for the lifetime of the guard.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active_slot()) { Tape<T>::active_slot() = nullptr; }
  ~NoGradScope() { Tape<T>::active_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace sdt

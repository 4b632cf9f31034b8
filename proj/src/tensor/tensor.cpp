#include "sdt/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace sdt {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kContract: return "contract";
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kIndex: return "index";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kIncompatibleCheckpoint: return "incompatible_checkpoint";
    case ErrorCode::kPlan: return "plan";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kData: return "data";
  }
  return "unknown";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::filled(Shape shape, T value, bool requires_grad) {
  auto storage = std::make_shared<TensorStorage<T>>();
  storage->value.assign(shape_numel(shape), value);
  storage->shape = std::move(shape);
  storage->requires_grad = requires_grad;
  return BasicTensor(std::move(storage));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_values(Shape shape, std::vector<T> values, bool requires_grad) {
  require(shape_numel(shape) == values.size(), ErrorCode::kDimension,
          "from_values: shape " + shape_to_string(shape) + " holds " + std::to_string(shape_numel(shape)) +
              " elements but " + std::to_string(values.size()) + " were given");
  auto storage = std::make_shared<TensorStorage<T>>();
  storage->shape = std::move(shape);
  storage->value = std::move(values);
  storage->requires_grad = requires_grad;
  return BasicTensor(std::move(storage));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return from_values(Shape{}, {value}, requires_grad);
}

template <typename T>
T BasicTensor<T>::item() const {
  require(numel() == 1, ErrorCode::kContract, "item() on tensor of shape " + shape_to_string(shape()));
  return storage_->value[0];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return from_values(shape(), storage_->value, storage_->requires_grad);
}

template <typename T>
Tape<T>*& Tape<T>::active_slot() noexcept {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* Tape<T>::active() noexcept {
  return active_slot();
}

template <typename T>
void Tape<T>::record(std::function<void()> backward_fn) {
  require(!consumed_, ErrorCode::kContract, "recording onto a consumed tape");
  entries_.push_back(std::move(backward_fn));
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
  require(!consumed_, ErrorCode::kContract, "backward called twice on the same tape; re-run the forward pass");
  require(loss.defined() && loss.numel() == 1, ErrorCode::kContract,
          "backward requires a scalar loss, got shape " + (loss.defined() ? shape_to_string(loss.shape()) : "<null>"));
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss.storage()->ensure_grad()[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace sdt

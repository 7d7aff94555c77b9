#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "embedkit/errors.hpp"
#include "embedkit/rng.hpp"

namespace embedkit {

namespace detail {

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  bool leaf = false;  // created by the user, not by an op

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline void check_finite(const TensorData& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op) + ": non-finite value in result");
    }
  }
}

}  // namespace detail

// Dense 64-bit float tensor of rank 1 or 2 with shared storage. Ops build a
// gradient tape when one is active (see GradTape); without a tape they are
// plain value computations safe to share across threads.
class Tensor {
 public:
  Tensor() = default;

  // Internal: wraps existing storage. Prefer the named factories.
  explicit Tensor(std::shared_ptr<detail::TensorData> d) : d_(std::move(d)) {}

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
    auto d = std::make_shared<detail::TensorData>();
    d->shape = std::move(shape);
    d->data.assign(detail::shape_numel(d->shape), value);
    d->requires_grad = requires_grad;
    d->leaf = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (detail::shape_numel(shape) != values.size()) {
      throw DimensionError("tensor: " + std::to_string(values.size()) +
                           " values do not fill shape " + detail::shape_str(shape));
    }
    auto d = std::make_shared<detail::TensorData>();
    d->shape = std::move(shape);
    d->data = std::move(values);
    d->requires_grad = requires_grad;
    d->leaf = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& x : t.values()) x = rng.normal(0.0, stddev);
    return t;
  }

  bool defined() const { return static_cast<bool>(d_); }
  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t numel() const { return d_->data.size(); }
  std::size_t rows() const { return d_->shape.at(0); }
  std::size_t cols() const { return d_->shape.at(1); }

  const std::vector<double>& values() const { return d_->data; }
  std::vector<double>& values() { return d_->data; }

  double at(std::size_t i) const { return d_->data.at(i); }
  double at(std::size_t i, std::size_t j) const { return d_->data.at(i * cols() + j); }

  // Value of a single-element tensor.
  double item() const {
    if (numel() != 1) {
      throw DimensionError("item: tensor has " + std::to_string(numel()) + " elements");
    }
    return d_->data[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  bool is_leaf() const { return d_->leaf; }

  const std::vector<double>& grad() const {
    d_->ensure_grad();
    return d_->grad;
  }

  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
  }

  // Independent copy of the values; never carries graph history.
  Tensor clone() const { return from(d_->shape, d_->data, d_->requires_grad); }

  std::shared_ptr<detail::TensorData> data() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

// Append-only record of executed ops. The backward pass replays the entries
// in exact reverse append order, which is a valid topological order by
// construction. One tape is active per thread at a time.
class GradTape {
 public:
  GradTape() {
    if (active_ != nullptr) throw Error("grad tape: a tape is already active on this thread");
    active_ = this;
  }
  ~GradTape() { active_ = nullptr; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  std::size_t size() const { return entries_.size(); }

  void record(std::shared_ptr<detail::TensorData> out, std::function<void()> backward) {
    entries_.push_back(Entry{std::move(out), std::move(backward)});
  }

  // Populates grad buffers of every requires_grad leaf reachable from loss.
  // Repeated calls accumulate into leaf grads; intermediate grads are reset
  // on every call.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
      throw DimensionError("backward: loss must be a scalar, got shape " +
                           detail::shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
      throw Error("backward: loss does not require grad");
    }
    for (auto& e : entries_) {
      e.out->ensure_grad();
      std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
    }
    auto ld = loss.data();
    ld->ensure_grad();
    ld->grad[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->backward();
    }
  }

 private:
  struct Entry {
    std::shared_ptr<detail::TensorData> out;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  inline static thread_local GradTape* active_ = nullptr;
};

inline void backward(const Tensor& loss) {
  GradTape* tape = GradTape::active();
  if (tape == nullptr) throw Error("backward: no active grad tape");
  tape->backward(loss);
}

namespace detail {

// Finishes an op: checks finiteness and registers the backward closure when
// a tape is active and some input requires grad. The closure receives the
// output node so it can read the output's grad (and cached forward values).
template <typename Backward>
inline Tensor finish_op(std::vector<std::size_t> shape, std::vector<double> values,
                        bool inputs_need_grad, const char* op, Backward backward) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->data = std::move(values);
  check_finite(*d, op);
  GradTape* tape = GradTape::active();
  if (tape != nullptr && inputs_need_grad) {
    d->requires_grad = true;
    d->leaf = false;
    tape->record(d, [d, bw = std::move(backward)]() mutable { bw(d); });
  }
  return Tensor(std::move(d));
}

}  // namespace detail

}  // namespace embedkit

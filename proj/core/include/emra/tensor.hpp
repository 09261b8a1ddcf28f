#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "emra/errors.hpp"
#include "emra/rng.hpp"

namespace emra {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e < 0) {
      throw DimensionError("negative extent in shape");
    }
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Graph recording is on by default; inference and finite-difference probes
// disable it per thread with NoGradGuard.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor that doubles as a node of the reverse-mode graph.
// Ops record their inputs in `parents` and a closure that pushes this node's
// adjoint into the parents. Backward walks the graph once in reverse
// topological order, so fan-out contributions accumulate by addition.
//
// Scalar is float for training runs and double for verification runs.
template <typename Scalar>
class Tensor : public std::enable_shared_from_this<Tensor<Scalar>> {
 public:
  using Ptr = std::shared_ptr<Tensor<Scalar>>;

  Shape shape;
  std::vector<Scalar> data;
  bool requires_grad = false;
  std::vector<Scalar> grad;  // allocated on first accumulation

  std::vector<Ptr> parents;
  std::function<void(Tensor<Scalar>&)> backward_fn;

  static Ptr create(Shape s, std::vector<Scalar> d, bool req = false) {
    const std::size_t n = shape_numel(s);
    if (d.size() != n) {
      throw DimensionError("data size " + std::to_string(d.size()) + " does not match shape " +
                           shape_str(s));
    }
    auto t = std::make_shared<Tensor<Scalar>>();
    t->shape = std::move(s);
    t->data = std::move(d);
    t->requires_grad = req;
    return t;
  }

  static Ptr full(Shape s, Scalar v, bool req = false) {
    const std::size_t n = shape_numel(s);
    return create(std::move(s), std::vector<Scalar>(n, v), req);
  }

  static Ptr zeros(Shape s, bool req = false) { return full(std::move(s), Scalar(0), req); }
  static Ptr ones(Shape s, bool req = false) { return full(std::move(s), Scalar(1), req); }

  static Ptr scalar(Scalar v, bool req = false) { return create({}, {v}, req); }

  // Truncated normal initialization used for all learnable weights.
  static Ptr randn_trunc(Shape s, Scalar stddev, Rng& rng, bool req = true) {
    const std::size_t n = shape_numel(s);
    std::vector<Scalar> d(n);
    for (auto& v : d) {
      v = static_cast<Scalar>(rng.trunc_normal(static_cast<double>(stddev)));
    }
    return create(std::move(s), std::move(d), req);
  }

  std::size_t numel() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }

  Scalar value() const {
    if (data.size() != 1) {
      throw DimensionError("value() expects a scalar tensor, got shape " + shape_str(shape));
    }
    return data[0];
  }

  void ensure_grad() {
    if (grad.size() != data.size()) {
      grad.assign(data.size(), Scalar(0));
    }
  }

  void zero_grad() {
    if (!grad.empty()) {
      std::fill(grad.begin(), grad.end(), Scalar(0));
    }
  }

  void accumulate_grad(const std::vector<Scalar>& g) {
    ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      grad[i] += g[i];
    }
  }

  // Reverse-mode sweep from a scalar node, seeding d(self)/d(self) = 1.
  void backward() {
    if (data.size() != 1) {
      throw DimensionError("backward() expects a scalar loss, got shape " + shape_str(shape));
    }
    if (!requires_grad) {
      throw NumericError("backward() on a tensor that does not require gradients");
    }
    ensure_grad();
    grad[0] += Scalar(1);

    // Iterative post-order topological sort over parent links.
    std::vector<Tensor<Scalar>*> order;
    std::unordered_set<Tensor<Scalar>*> visited;
    struct Frame {
      Tensor<Scalar>* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({this, 0});
    visited.insert(this);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        Tensor<Scalar>* p = f.node->parents[f.next_parent].get();
        ++f.next_parent;
        if (p->requires_grad && visited.insert(p).second) {
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.node);
        stack.pop_back();
      }
    }
    // order is post-order: parents before consumers. Run adjoints in reverse.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Tensor<Scalar>* node = *it;
      if (node->backward_fn) {
        node->ensure_grad();
        node->backward_fn(*node);
      }
    }
  }
};

template <typename Scalar>
using TensorPtr = std::shared_ptr<Tensor<Scalar>>;

// Mark `out` as produced from `ins` with adjoint `fn`. No-ops when grad
// recording is off or no input needs gradients, so inference builds no graph.
template <typename Scalar, typename Fn>
inline void record(const TensorPtr<Scalar>& out, std::vector<TensorPtr<Scalar>> ins, Fn&& fn) {
  if (!grad_enabled()) {
    return;
  }
  bool any = false;
  for (const auto& in : ins) {
    any = any || in->requires_grad;
  }
  if (!any) {
    return;
  }
  out->requires_grad = true;
  out->parents = std::move(ins);
  out->backward_fn = std::forward<Fn>(fn);
}

}  // namespace emra

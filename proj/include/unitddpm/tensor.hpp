#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "unitddpm/errors.hpp"
#include "unitddpm/rng.hpp"

namespace unitddpm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline constexpr std::align_val_t kBufferAlignment{64};

// Per-thread free lists keyed by byte size. Training allocates the same
// shapes every step; handing blocks straight back avoids the allocator
// returning pages to the OS and faulting them in again.
struct BlockCache {
  static constexpr std::size_t kMaxBytes = std::size_t{256} << 20;
  std::unordered_map<std::size_t, std::vector<void*>> free;
  std::size_t bytes = 0;

  ~BlockCache();
};

inline thread_local bool block_cache_gone = false;

inline BlockCache::~BlockCache() {
  for (auto& [size, blocks] : free)
    for (void* p : blocks) ::operator delete(p, kBufferAlignment);
  block_cache_gone = true;
}

inline BlockCache& block_cache() {
  static thread_local BlockCache cache;
  return cache;
}

inline void* take_block(std::size_t bytes) {
  if (!block_cache_gone) {
    auto& c = block_cache();
    auto it = c.free.find(bytes);
    if (it != c.free.end() && !it->second.empty()) {
      void* p = it->second.back();
      it->second.pop_back();
      c.bytes -= bytes;
      return p;
    }
  }
  return ::operator new(bytes, kBufferAlignment);
}

inline void give_block(void* p, std::size_t bytes) noexcept {
  if (!block_cache_gone) {
    auto& c = block_cache();
    if (c.bytes + bytes <= BlockCache::kMaxBytes) {
      try {
        c.free[bytes].push_back(p);
        c.bytes += bytes;
        return;
      } catch (...) {
      }
    }
  }
  ::operator delete(p, kBufferAlignment);
}

// Every buffer starts on a 64-byte boundary, so vectorised kernels split
// their loops the same way on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(take_block(n * sizeof(T))); }
  void deallocate(T* p, std::size_t n) noexcept { give_block(p, n * sizeof(T)); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace detail

using Buffer = std::vector<double, detail::AlignedAllocator<double>>;

namespace detail {

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  Buffer& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Shared handle to an n-dimensional array of doubles that can take part in
// reverse-mode differentiation. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto e : shape) require(e > 0, "tensor extents must be positive: " + shape_str(shape));
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, Buffer values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto e : shape) require(e > 0, "tensor extents must be positive: " + shape_str(shape));
    require(values.size() == shape_numel(shape),
            "value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values.begin(), values.end()), requires_grad) {}
  Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(values), requires_grad) {}

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, v, requires_grad); }

  static Tensor randn(Shape shape, Rng& rng, bool requires_grad = false) {
    Tensor t(std::move(shape), 0.0, requires_grad);
    rng.fill_normal(t.node_->value);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    require(numel() == 1, "item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool is_leaf() const { return !node_->backward; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  // Zero-filled when no gradient has reached this tensor.
  std::span<const double> grad() const { return node_->ensure_grad(); }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  // New leaf holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  Tensor reshape(Shape shape) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

// Builds an op result. The graph edge is recorded only when grad mode is on
// and at least one input requires a gradient.
inline Tensor make_result(Shape shape, Buffer values, std::initializer_list<Tensor> inputs,
                          std::function<void(detail::Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(values));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = std::move(backward_fn);
  return out;
}

inline Tensor Tensor::reshape(Shape new_shape) const {
  require(shape_numel(new_shape) == numel(),
          "reshape " + shape_str(shape()) + " -> " + shape_str(new_shape) + " changes element count");
  auto src = node_;
  return make_result(std::move(new_shape), node_->value, {*this}, [src](detail::Node& out) {
    if (!src->requires_grad) return;
    auto& g = src->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
  });
}

// Reverse sweep from a scalar loss. Leaf gradients in the graph are reset
// first unless `accumulate` is set; the graph is released afterwards.
inline void backward(const Tensor& loss, bool accumulate = false) {
  require(loss.numel() == 1, "backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Shared ownership keeps every node alive while parents are released below.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      std::shared_ptr<detail::Node> p = top.first->parents[top.second++];
      if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  for (auto& n : order) {
    if (!n->backward) {
      if (!accumulate) n->grad.assign(n->value.size(), 0.0);
      else n->ensure_grad();
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  loss.node()->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = it->get();
    if (!n->backward) continue;
    n->backward(*n);
    n->backward = nullptr;
    n->parents.clear();
    if (n != loss.node().get()) Buffer().swap(n->grad);
  }
}

}  // namespace unitddpm

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dehaze/rng.hpp"

namespace dehaze {

// Dense shapes up to rank 4; images use the canonical [batch, channel,
// height, width] layout. A scalar is shape {1}.
using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until touched; same length as values once allocated

  // Set only on op outputs recorded on a graph.
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
  bool is_leaf() const { return !backprop; }
};

std::vector<double>& ensure_grad(Node& node);

}  // namespace detail

// Value-semantics handle to a shared tensor node. All arithmetic lives in
// free functions (ops.hpp); data is always 64-bit floats.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_data(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t dim(int i) const { return shape()[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const;

  std::span<const double> values() const;
  // Mutating values of a non-leaf would desynchronize the recorded graph.
  std::span<double> mutable_values();

  double operator[](std::int64_t flat) const { return values()[static_cast<std::size_t>(flat)]; }
  double value() const;  // scalar tensors only
  double at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);

  bool grad_defined() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  Tensor grad_tensor() const;  // copy of grad as a plain tensor (zeros if untouched)
  void zero_grad();

  Tensor detach() const;  // copies values into a fresh non-recording leaf
  Tensor clone() const { return detach(); }

  bool all_finite() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// Tape of executed operations. Exactly one graph may record per thread at a
// time; ops attach adjoint closures only while a graph is active and some
// input requires gradients. backward() replays the tape in exact reverse
// execution order.
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  void backward(const Tensor& loss);
  void reset();

  std::size_t size() const { return tape_.size(); }
  static Graph* active();

  void record(std::shared_ptr<detail::Node> node) { tape_.push_back(std::move(node)); }

 private:
  std::vector<std::shared_ptr<detail::Node>> tape_;
  bool backward_done_ = false;
};

// Convenience: backward on the currently active graph.
void backward(const Tensor& loss);

// Disables recording for its lifetime (inference, finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_recording_enabled();

// Operator-internal parallelism. Thread count 1 (the default) is the
// bitwise-deterministic reference; parallel loops only ever split
// disjoint output ranges.
void set_num_threads(int n);
int num_threads();
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

namespace detail {

// Op-construction hook shared by all operators (and test negative controls):
// wraps computed values into a node, wiring parents + adjoint closure iff
// recording is on and some input requires grad.
Tensor finish_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                 std::function<void(Node&)> backprop);

}  // namespace detail

}  // namespace dehaze

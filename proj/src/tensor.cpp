#include "dehaze/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <thread>

namespace dehaze {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 4) {
    throw std::invalid_argument("tensor rank must be 1..4, got " + shape_str(shape));
  }
  for (std::int64_t d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
  }
}

thread_local Graph* g_active_graph = nullptr;
thread_local int g_no_grad_depth = 0;
int g_num_threads = 1;

}  // namespace

namespace detail {

std::vector<double>& ensure_grad(Node& node) {
  if (node.grad.empty()) node.grad.assign(node.values.size(), 0.0);
  return node.grad;
}

Tensor finish_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs,
                 std::function<void(Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  if (shape_numel(node->shape) != node->numel()) {
    throw std::logic_error("op produced " + std::to_string(node->numel()) + " values for shape " +
                           shape_str(node->shape));
  }
  Graph* graph = Graph::active();
  bool any_grad = false;
  for (const Tensor& t : inputs) any_grad = any_grad || t.requires_grad();
  if (graph != nullptr && g_no_grad_depth == 0 && any_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backprop = std::move(backprop);
    graph->record(node);
  }
  return Tensor::wrap(std::move(node));
}

}  // namespace detail

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw std::invalid_argument("data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  return wrap(std::move(node));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  check_shape(shape);
  std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)), value);
  return from_data(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  check_shape(shape);
  std::vector<double> values(static_cast<std::size_t>(shape_numel(shape)));
  for (double& v : values) v = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(values));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::numel() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->numel();
}

std::span<const double> Tensor::values() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->values;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw std::logic_error("use of undefined tensor");
  if (!node_->is_leaf()) throw std::logic_error("mutating a non-leaf tensor would corrupt the graph");
  return node_->values;
}

double Tensor::value() const {
  if (numel() != 1) throw std::logic_error("value() requires a scalar tensor, shape is " + shape_str(shape()));
  return node_->values[0];
}

double Tensor::at(std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) const {
  const Shape& s = shape();
  if (s.size() != 4) throw std::logic_error("at(n,c,h,w) requires rank 4, shape is " + shape_str(s));
  return node_->values[static_cast<std::size_t>(((n * s[1] + c) * s[2] + h) * s[3] + w)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw std::logic_error("use of undefined tensor");
  if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be toggled on leaf tensors");
  node_->requires_grad = flag;
  if (flag) detail::ensure_grad(*node_);
  return *this;
}

bool Tensor::grad_defined() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  detail::ensure_grad(*node_);
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw std::logic_error("use of undefined tensor");
  detail::ensure_grad(*node_);
  return node_->grad;
}

Tensor Tensor::grad_tensor() const {
  auto g = grad();
  return from_data(shape(), std::vector<double>(g.begin(), g.end()));
}

void Tensor::zero_grad() {
  if (!node_) throw std::logic_error("use of undefined tensor");
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto vals = values();
  return from_data(shape(), std::vector<double>(vals.begin(), vals.end()));
}

bool Tensor::all_finite() const {
  for (double v : values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Graph::Graph() {
  if (g_active_graph != nullptr) throw std::logic_error("a graph is already recording on this thread");
  g_active_graph = this;
}

Graph::~Graph() {
  if (g_active_graph == this) g_active_graph = nullptr;
}

Graph* Graph::active() { return g_active_graph; }

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss");
  }
  if (backward_done_) {
    throw std::logic_error("backward already ran on this graph; call reset() first");
  }
  detail::ensure_grad(*loss.node())[0] = 1.0;
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    detail::Node& node = **it;
    if (node.grad.empty()) continue;  // not on any path to the loss
    node.backprop(node);
  }
  backward_done_ = true;
}

void Graph::reset() {
  tape_.clear();
  backward_done_ = false;
}

void backward(const Tensor& loss) {
  Graph* g = Graph::active();
  if (g == nullptr) throw std::logic_error("backward called with no recording graph on this thread");
  g->backward(loss);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_recording_enabled() { return g_active_graph != nullptr && g_no_grad_depth == 0; }

void set_num_threads(int n) { g_num_threads = std::max(1, n); }
int num_threads() { return g_num_threads; }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
  const int threads = g_num_threads;
  if (threads <= 1 || n < 2 * threads) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(threads));
  const std::int64_t chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    const std::int64_t begin = t * chunk;
    const std::int64_t end = std::min<std::int64_t>(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace dehaze

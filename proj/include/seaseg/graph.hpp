#pragma once

#include "seaseg/tensor.hpp"

#include <functional>
#include <map>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace seaseg {

// Named parameter matrices. Convolution weights are (out, in*k*k), biases
// are (out, 1), affine weights are (out, in).
template <typename Scalar>
class ParamStore {
 public:
  using Matrix = Mat<Scalar>;

  Matrix& add(const std::string& name, Matrix value) {
    auto [it, inserted] = values_.insert_or_assign(name, std::move(value));
    return it->second;
  }
  [[nodiscard]] bool contains(const std::string& name) const { return values_.count(name) != 0; }
  Matrix& at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  [[nodiscard]] const Matrix& at(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }
  [[nodiscard]] const std::map<std::string, Matrix>& all() const { return values_; }
  std::map<std::string, Matrix>& all() { return values_; }
  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] Eigen::Index num_scalars() const {
    Eigen::Index n = 0;
    for (const auto& [k, v] : values_) n += v.size();
    return n;
  }

  template <typename Other>
  [[nodiscard]] ParamStore<Other> cast() const {
    ParamStore<Other> out;
    for (const auto& [k, v] : values_) out.add(k, v.template cast<Other>());
    return out;
  }

 private:
  std::map<std::string, Matrix> values_;
};

template <typename Scalar>
class Graph;

// Handle to a node of a Graph. Cheap to copy.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  int id = -1;

  [[nodiscard]] bool valid() const { return graph != nullptr && id >= 0; }
  [[nodiscard]] const Tensor<Scalar>& value() const { return graph->value(*this); }
  [[nodiscard]] const Tensor<Scalar>& grad() const { return graph->grad(*this); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so a reverse
// sweep visits every node after all of its consumers.
template <typename Scalar>
class Graph {
 public:
  using Backward = std::function<void(Graph&, int)>;

  explicit Graph(const ParamStore<Scalar>* params = nullptr, bool record = true) : params_(params), record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  [[nodiscard]] bool recording() const { return record_; }

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, {}); }

  Var<Scalar> param(const std::string& name) {
    if (params_ == nullptr) throw std::logic_error("graph has no parameter store");
    auto it = param_ids_.find(name);
    if (it != param_ids_.end()) return {this, it->second};
    Var<Scalar> v = push(Tensor<Scalar>::from_matrix(params_->at(name)), record_, {});
    param_ids_.emplace(name, v.id);
    return v;
  }

  [[nodiscard]] bool has_param(const std::string& name) const { return params_ != nullptr && params_->contains(name); }

  // Adds an op output. `backward` runs only when recording and some input
  // requires a gradient.
  Var<Scalar> push(Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs, Backward backward) {
    bool needs = false;
    if (record_)
      for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }
  Var<Scalar> push(Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs, Backward backward) {
    bool needs = false;
    if (record_)
      for (const auto& in : inputs) needs = needs || nodes_[in.id].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  [[nodiscard]] const Tensor<Scalar>& value(Var<Scalar> v) const { return nodes_.at(v.id).value; }
  [[nodiscard]] const Tensor<Scalar>& value(int id) const { return nodes_.at(id).value; }
  [[nodiscard]] const Tensor<Scalar>& grad(Var<Scalar> v) const { return nodes_.at(v.id).grad; }
  [[nodiscard]] const Tensor<Scalar>& grad(int id) const { return nodes_.at(id).grad; }
  [[nodiscard]] bool requires_grad(Var<Scalar> v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient accumulator for node `id`, allocated on first use.
  Mat<Scalar>& grad_acc(Var<Scalar> v) { return grad_acc(v.id); }
  Mat<Scalar>& grad_acc(int id) {
    auto& node = nodes_[id];
    if (node.grad.empty() && node.value.size() > 0) {
      const auto& t = node.value;
      node.grad = Tensor<Scalar>(t.n, t.c, t.h, t.w);
    }
    return node.grad.data;
  }

  // Seeds d(root)/d(root) = 1 for a scalar root and sweeps the tape.
  void backward(Var<Scalar> root) {
    if (!record_) throw std::logic_error("backward on a non-recording graph");
    if (value(root).size() != 1) throw ShapeError("backward root must be a scalar");
    grad_acc(root).setOnes();
    for (int id = root.id; id >= 0; --id) {
      auto& node = nodes_[id];
      if (node.backward && !node.grad.empty()) node.backward(*this, id);
    }
  }

  // Gradients of every parameter touched by the graph (zeros for params that
  // were read but received no gradient).
  [[nodiscard]] std::map<std::string, Mat<Scalar>> param_grads() const {
    std::map<std::string, Mat<Scalar>> out;
    for (const auto& [name, id] : param_ids_) {
      const auto& node = nodes_[id];
      if (node.grad.empty())
        out.emplace(name, Mat<Scalar>::Zero(node.value.data.rows(), node.value.data.cols()));
      else
        out.emplace(name, node.grad.data);
    }
    return out;
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    Backward backward;
    bool requires_grad = false;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), {}, std::move(backward), requires_grad});
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const ParamStore<Scalar>* params_;
  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, int> param_ids_;
};

using Rng = std::mt19937_64;

}  // namespace seaseg

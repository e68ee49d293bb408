#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bnas/common.hpp"

namespace bnas {

// Dense NCHW shape. Vectors (logits, architecture weights) live in the
// channel slot with n=h=w=1; matrices use (rows, cols, 1, 1).
struct Shape {
  int64_t n = 1;
  int64_t c = 1;
  int64_t h = 1;
  int64_t w = 1;

  int64_t numel() const { return n * c * h * w; }
  bool operator==(const Shape&) const = default;
};

inline std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
         std::to_string(s.w) + ")";
}

class Tape;

// Float32 buffer plus an optional handle into the tape that produced it.
// Copies share storage; detached() drops only the tape handle.
class Tensor {
 public:
  Tensor() : data_(std::make_shared<std::vector<float>>()) {}

  explicit Tensor(Shape s, float fill = 0.f) : shape_(s) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
      throw shape_error("tensor shape must be positive, got " + to_string(s));
    data_ = std::make_shared<std::vector<float>>(static_cast<size_t>(s.numel()), fill);
  }

  Tensor(Shape s, std::vector<float> values) : shape_(s) {
    if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0)
      throw shape_error("tensor shape must be positive, got " + to_string(s));
    if (static_cast<int64_t>(values.size()) != s.numel())
      throw shape_error("value count " + std::to_string(values.size()) + " does not match shape " + to_string(s));
    data_ = std::make_shared<std::vector<float>>(std::move(values));
  }

  const Shape& shape() const { return shape_; }
  int64_t numel() const { return shape_.numel(); }

  std::vector<float>& values() { return *data_; }
  const std::vector<float>& values() const { return *data_; }
  const std::shared_ptr<std::vector<float>>& storage() const { return data_; }

  int64_t offset(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  float at(int64_t n, int64_t c, int64_t h, int64_t w) const { return (*data_)[offset(n, c, h, w)]; }
  float& at(int64_t n, int64_t c, int64_t h, int64_t w) { return (*data_)[offset(n, c, h, w)]; }

  int node() const { return node_; }
  bool on_tape() const { return node_ >= 0; }
  Tensor detached() const {
    Tensor t = *this;
    t.node_ = -1;
    return t;
  }

  bool all_finite() const {
    for (float v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  friend class Tape;
  Shape shape_{};
  std::shared_ptr<std::vector<float>> data_;
  int node_ = -1;
};

// Trainable value plus its gradient accumulator. Optimizers consume grad;
// callers zero it between steps.
struct Parameter {
  explicit Parameter(Shape s, float fill = 0.f)
      : value(s, fill), grad(static_cast<size_t>(s.numel()), 0.f) {}
  Parameter(Shape s, std::vector<float> v) : value(s, std::move(v)), grad(static_cast<size_t>(s.numel()), 0.f) {}

  Tensor value;
  std::vector<float> grad;

  int64_t numel() const { return value.numel(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.f); }
};

inline void zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

// Define-by-run reverse-mode tape. Each op appends one node holding the
// parent handles and a closure that routes the incoming gradient to them.
// backward() walks the nodes once in reverse creation order, so a tape is
// built, differentiated and thrown away within a single step.
class Tape {
 public:
  using Grad = std::vector<float>;
  using BackwardFn = std::function<void(Tape&, const Grad&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Records `t` as a leaf; gradient reaching it accumulates into *sink.
  Tensor watch(const Tensor& t, std::vector<float>* sink) {
    Tensor out = t;
    out.node_ = add_node({}, t.numel(), nullptr, sink);
    return out;
  }

  // Leaf for a parameter. Repeated calls on one tape return the same node so
  // shared parameters (architecture weights used by every cell) accumulate
  // all their gradient paths in one place.
  Tensor param(Parameter& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) {
      Tensor out = p.value;
      out.node_ = it->second;
      return out;
    }
    Tensor out = watch(p.value, &p.grad);
    param_nodes_.emplace(&p, out.node_);
    return out;
  }

  // Attaches an op result. `parents` lists the tape handles the backward
  // closure writes to; constants (node < 0) must be filtered out by the op.
  Tensor emit(Tensor value, std::vector<int> parents, BackwardFn back) {
    value.node_ = add_node(std::move(parents), value.numel(), std::move(back), nullptr);
    return value;
  }

  Grad& grad_of(int node) {
    Grad& g = grads_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), 0.f);
    return g;
  }

  void backward(const Tensor& loss) {
    if (!loss.on_tape()) throw value_error("backward: tensor is not attached to this tape");
    if (loss.numel() != 1) throw value_error("backward: loss must be a scalar, got " + to_string(loss.shape()));
    grads_.assign(nodes_.size(), Grad{});
    grad_of(loss.node())[0] = 1.f;
    for (int i = loss.node(); i >= 0; --i) {
      Grad& g = grads_[static_cast<size_t>(i)];
      if (g.empty()) continue;
      Node& nd = nodes_[static_cast<size_t>(i)];
      if (nd.sink) {
        auto& s = *nd.sink;
        for (size_t j = 0; j < g.size(); ++j) s[j] += g[j];
      }
      if (nd.back) nd.back(*this, g);
      Grad{}.swap(g);  // free as we go; big activations dominate memory
    }
  }

  size_t size() const { return nodes_.size(); }
  const std::vector<int>& parents_of(int node) const { return nodes_[static_cast<size_t>(node)].parents; }

  // Multiply-accumulate counter fed by conv/linear forwards; read by the
  // cost reporter after a counting pass.
  void add_macs(uint64_t m) { macs_ += m; }
  uint64_t macs() const { return macs_; }

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn back;
    std::vector<float>* sink = nullptr;
    int64_t numel = 0;
  };

  int add_node(std::vector<int> parents, int64_t numel, BackwardFn back, std::vector<float>* sink) {
    nodes_.push_back(Node{std::move(parents), std::move(back), sink, numel});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::vector<Grad> grads_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  uint64_t macs_ = 0;
};

}  // namespace bnas

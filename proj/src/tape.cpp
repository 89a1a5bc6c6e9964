#include "tempo/tape.hpp"

namespace tempo {

namespace {
thread_local Tape* tl_current = nullptr;
}

Tape::Scope::Scope(Tape& tape) : prev_(tl_current) { tl_current = &tape; }
Tape::Scope::~Scope() { tl_current = prev_; }

Tape::Pause::Pause() : prev_(tl_current) { tl_current = nullptr; }
Tape::Pause::~Pause() { tl_current = prev_; }

Tape* Tape::current() { return tl_current; }

void Tape::watch(const Tensor& param) {
  TEMPO_CHECK(param.requires_grad(), "tape: watch() on tensor without requires_grad");
  watched_.push_back(param);
}

void Tape::record(int64_t output_id, std::function<void(Tape&)> fn) {
  nodes_.push_back(Node{output_id, std::move(fn)});
}

const Tensor& Tape::grad(int64_t id) const {
  auto it = grads_.find(id);
  TEMPO_CHECK(it != grads_.end(), "tape: no gradient recorded for tensor ", id);
  return it->second;
}

void Tape::accumulate(const Tensor& target, const Tensor& g) {
  TEMPO_CHECK(g.shape() == target.shape(), "tape: gradient shape ", shape_str(g.shape()),
              " does not match tensor shape ", shape_str(target.shape()));
  TEMPO_CHECK(g.dtype() == target.dtype(), "tape: gradient dtype mismatch");
  auto it = grads_.find(target.id());
  if (it == grads_.end()) {
    grads_.emplace(target.id(), g);
    return;
  }
  Tensor& acc = it->second;
  Tensor merged = acc.clone();
  const size_t n = merged.numel();
  if (merged.dtype() == DType::f32) {
    float* a = merged.mutable_data<float>();
    const float* b = g.data<float>();
    for (size_t i = 0; i < n; ++i) a[i] += b[i];
  } else {
    double* a = merged.mutable_data<double>();
    const double* b = g.data<double>();
    for (size_t i = 0; i < n; ++i) a[i] += b[i];
  }
  acc = merged;
}

GradMap Tape::backward(const Tensor& loss) {
  TEMPO_CHECK(loss.defined() && loss.numel() == 1,
              "backward: loss must be a one-element tensor");
  grads_.clear();
  grads_.emplace(loss.id(), Tensor::full(loss.shape(), 1.0, loss.dtype()));
  for (size_t i = nodes_.size(); i > 0; --i) {
    const Node& node = nodes_[i - 1];
    if (grads_.count(node.output_id)) node.fn(*this);
  }
  GradMap out;
  for (const Tensor& p : watched_) {
    auto it = grads_.find(p.id());
    if (it != grads_.end()) {
      out.by_id.emplace(p.id(), it->second);
    } else {
      out.by_id.emplace(p.id(), Tensor::zeros(p.shape(), p.dtype()));
    }
  }
  grads_.clear();
  return out;
}

void Tape::clear() {
  nodes_.clear();
  watched_.clear();
  grads_.clear();
}

}  // namespace tempo

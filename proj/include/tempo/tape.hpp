#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "tempo/tensor.hpp"

namespace tempo {

// Gradients produced by one backward pass, keyed by tensor id. Watched
// parameters that the loss does not reach are present with zero gradients.
struct GradMap {
  std::unordered_map<int64_t, Tensor> by_id;

  const Tensor& for_param(const Tensor& p) const {
    auto it = by_id.find(p.id());
    TEMPO_CHECK(it != by_id.end(), "gradients: tensor ", p.id(), " was not watched");
    return it->second;
  }
};

// Reverse-mode tape. Operations executed while a Tape::Scope is active record
// themselves in execution order; backward() replays the records once, last to
// first, which is reverse topological order by construction. A tape is
// single-threaded; independent tapes on different threads do not interact.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;

   private:
    Tape* prev_;
  };

  // Suspends recording on the current thread (read-only forward passes).
  class Pause {
   public:
    Pause();
    ~Pause();
    Pause(const Pause&) = delete;

   private:
    Tape* prev_;
  };

  // Tape recording ops on the current thread, or nullptr.
  static Tape* current();

  // Registers a parameter so backward() reports a gradient for it (zero when
  // unreachable). The tensor must have requires_grad set.
  void watch(const Tensor& param);
  const std::vector<Tensor>& watched() const { return watched_; }

  // Called by ops: fn pulls the output gradient and accumulates into inputs.
  void record(int64_t output_id, std::function<void(Tape&)> fn);
  size_t num_nodes() const { return nodes_.size(); }

  // Valid during backward().
  bool has_grad(int64_t id) const { return grads_.count(id) != 0; }
  const Tensor& grad(int64_t id) const;
  void accumulate(const Tensor& target, const Tensor& g);

  // Seeds d(loss)/d(loss) = 1 and replays the tape. loss must be a
  // one-element tensor.
  GradMap backward(const Tensor& loss);

  void clear();

 private:
  struct Node {
    int64_t output_id;
    std::function<void(Tape&)> fn;
  };

  std::vector<Node> nodes_;
  std::vector<Tensor> watched_;
  std::unordered_map<int64_t, Tensor> grads_;
};

}  // namespace tempo

#pragma once

#include <map>
#include <string>

#include "tempo/tape.hpp"
#include "tempo/tensor.hpp"

namespace tempo {

// Named parameter collection. Names are stable ("rgb.conv1a.weight", ...);
// iteration order is lexicographic, which keeps checkpoints and update loops
// deterministic.
struct ParamStore {
  std::map<std::string, Tensor> items;

  bool has(const std::string& name) const { return items.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = items.find(name);
    TEMPO_CHECK(it != items.end(), "params: no parameter named '", name, "'");
    return it->second;
  }

  void put(const std::string& name, Tensor t) { items[name] = std::move(t); }

  // Adds every trainable parameter to the tape's registry.
  void watch_all(Tape& tape) const {
    for (const auto& [name, t] : items) {
      if (t.requires_grad()) tape.watch(t);
    }
  }

  // Copies entries whose names start with prefix into a new store, with the
  // prefix stripped.
  ParamStore slice(const std::string& prefix) const;
  // Inserts all entries of other under prefix.
  void merge(const std::string& prefix, const ParamStore& other);
};

// Checkpoint archive: "TNSA" magic, version byte, JSON metadata blob, then
// named tensors each serialized in the tensor file format.
void save_checkpoint(const std::string& path, const ParamStore& params,
                     const std::string& meta_json);
ParamStore load_checkpoint(const std::string& path, std::string& meta_json);

}  // namespace tempo

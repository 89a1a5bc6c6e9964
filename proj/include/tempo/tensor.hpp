#pragma once

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "tempo/error.hpp"

namespace tempo {

// Values of the dtype byte in the on-disk tensor format.
enum class DType : uint8_t { f32 = 1, f64 = 2 };

inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }
inline size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor. Copies are cheap handles onto shared storage;
// storage is treated as immutable once a tensor has been handed out of the
// kernel that built it. A scalar is a rank-0 tensor with one element.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dt = DType::f64);
  static Tensor full(Shape shape, double value, DType dt = DType::f64);
  static Tensor scalar(double value, DType dt = DType::f64);
  static Tensor from_f64(Shape shape, std::vector<double> values);
  static Tensor from_f32(Shape shape, std::vector<float> values);

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t dim(size_t axis) const;
  size_t numel() const { return numel_; }
  DType dtype() const { return dtype_; }
  int64_t id() const { return id_; }

  bool requires_grad() const { return requires_grad_; }
  // Used by ops before a freshly built output is published.
  void set_requires_grad(bool v) { requires_grad_ = v; }
  Tensor with_grad() const;   // same storage, new id, requires_grad = true
  Tensor detached() const;    // same storage, new id, requires_grad = false
  // Shares storage under a new shape of equal element count (new id).
  Tensor reshaped(Shape new_shape) const;

  Tensor clone() const;           // deep copy
  Tensor astype(DType dt) const;  // deep copy with conversion

  template <class T>
  const T* data() const;
  template <class T>
  T* mutable_data();  // only valid before the tensor is published

  double item() const;  // value of a one-element tensor
  double flat(size_t i) const;
  double at(std::initializer_list<size_t> index) const;

  bool all_finite() const;
  // Flat index of the first non-finite value, or numel() if none.
  size_t first_non_finite() const;
  double max_abs() const;

  bool same_bits(const Tensor& other) const;

 private:
  struct Storage {
    std::vector<float> f32;
    std::vector<double> f64;
  };

  static Tensor make(Shape shape, DType dt);
  static int64_t next_id();

  Shape shape_;
  size_t numel_ = 0;
  DType dtype_ = DType::f64;
  bool requires_grad_ = false;
  int64_t id_ = -1;
  std::shared_ptr<Storage> st_;
};

// On-disk format: "TNSR", version byte 1, dtype byte, rank byte, rank u64
// little-endian dims, then the row-major little-endian payload.
void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);
void write_tensor_bytes(const Tensor& t, std::string& out);
Tensor read_tensor_bytes(const char* data, size_t size, size_t& consumed);

// Throws if any value in t is NaN/Inf, naming the producing operation.
void check_finite(const Tensor& t, const char* op);

}  // namespace tempo

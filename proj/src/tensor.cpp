#include "tempo/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tempo {

size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

int64_t Tensor::next_id() {
  static std::atomic<int64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::make(Shape shape, DType dt) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = shape_numel(t.shape_);
  t.dtype_ = dt;
  t.id_ = next_id();
  t.st_ = std::make_shared<Storage>();
  if (dt == DType::f32) {
    t.st_->f32.resize(t.numel_);
  } else {
    t.st_->f64.resize(t.numel_);
  }
  return t;
}

Tensor Tensor::zeros(Shape shape, DType dt) { return make(std::move(shape), dt); }

Tensor Tensor::full(Shape shape, double value, DType dt) {
  Tensor t = make(std::move(shape), dt);
  if (dt == DType::f32) {
    std::fill(t.st_->f32.begin(), t.st_->f32.end(), static_cast<float>(value));
  } else {
    std::fill(t.st_->f64.begin(), t.st_->f64.end(), value);
  }
  return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({}, value, dt); }

Tensor Tensor::from_f64(Shape shape, std::vector<double> values) {
  TEMPO_CHECK(shape_numel(shape) == values.size(), "tensor: shape ", shape_str(shape),
              " does not match ", values.size(), " values");
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = values.size();
  t.dtype_ = DType::f64;
  t.id_ = next_id();
  t.st_ = std::make_shared<Storage>();
  t.st_->f64 = std::move(values);
  return t;
}

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
  TEMPO_CHECK(shape_numel(shape) == values.size(), "tensor: shape ", shape_str(shape),
              " does not match ", values.size(), " values");
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = values.size();
  t.dtype_ = DType::f32;
  t.id_ = next_id();
  t.st_ = std::make_shared<Storage>();
  t.st_->f32 = std::move(values);
  return t;
}

size_t Tensor::dim(size_t axis) const {
  TEMPO_CHECK(axis < shape_.size(), "tensor: axis ", axis, " out of range for ",
              shape_str(shape_));
  return shape_[axis];
}

Tensor Tensor::with_grad() const {
  Tensor t = *this;
  t.id_ = next_id();
  t.requires_grad_ = true;
  return t;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.id_ = next_id();
  t.requires_grad_ = false;
  return t;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  TEMPO_CHECK(shape_numel(new_shape) == numel_, "reshape: ", shape_str(shape_), " to ",
              shape_str(new_shape), " changes element count");
  Tensor t = *this;
  t.shape_ = std::move(new_shape);
  t.id_ = next_id();
  t.requires_grad_ = false;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = make(shape_, dtype_);
  if (dtype_ == DType::f32) {
    t.st_->f32 = st_->f32;
  } else {
    t.st_->f64 = st_->f64;
  }
  return t;
}

Tensor Tensor::astype(DType dt) const {
  if (dt == dtype_) return clone();
  Tensor t = make(shape_, dt);
  if (dt == DType::f32) {
    for (size_t i = 0; i < numel_; ++i) t.st_->f32[i] = static_cast<float>(st_->f64[i]);
  } else {
    for (size_t i = 0; i < numel_; ++i) t.st_->f64[i] = static_cast<double>(st_->f32[i]);
  }
  return t;
}

template <>
const float* Tensor::data<float>() const {
  TEMPO_CHECK(dtype_ == DType::f32, "tensor: f32 access on ", dtype_name(dtype_), " tensor");
  return st_->f32.data();
}

template <>
const double* Tensor::data<double>() const {
  TEMPO_CHECK(dtype_ == DType::f64, "tensor: f64 access on ", dtype_name(dtype_), " tensor");
  return st_->f64.data();
}

template <>
float* Tensor::mutable_data<float>() {
  TEMPO_CHECK(dtype_ == DType::f32, "tensor: f32 access on ", dtype_name(dtype_), " tensor");
  return st_->f32.data();
}

template <>
double* Tensor::mutable_data<double>() {
  TEMPO_CHECK(dtype_ == DType::f64, "tensor: f64 access on ", dtype_name(dtype_), " tensor");
  return st_->f64.data();
}

double Tensor::item() const {
  TEMPO_CHECK(numel_ == 1, "tensor: item() on tensor of ", numel_, " elements");
  return flat(0);
}

double Tensor::flat(size_t i) const {
  TEMPO_CHECK(i < numel_, "tensor: flat index ", i, " out of range ", numel_);
  return dtype_ == DType::f32 ? static_cast<double>(st_->f32[i]) : st_->f64[i];
}

double Tensor::at(std::initializer_list<size_t> index) const {
  TEMPO_CHECK(index.size() == shape_.size(), "tensor: index rank ", index.size(),
              " does not match tensor rank ", shape_.size());
  size_t flat_idx = 0;
  size_t axis = 0;
  for (size_t v : index) {
    TEMPO_CHECK(v < shape_[axis], "tensor: index ", v, " out of range on axis ", axis);
    flat_idx = flat_idx * shape_[axis] + v;
    ++axis;
  }
  return flat(flat_idx);
}

size_t Tensor::first_non_finite() const {
  if (dtype_ == DType::f32) {
    for (size_t i = 0; i < numel_; ++i)
      if (!std::isfinite(st_->f32[i])) return i;
  } else {
    for (size_t i = 0; i < numel_; ++i)
      if (!std::isfinite(st_->f64[i])) return i;
  }
  return numel_;
}

bool Tensor::all_finite() const { return first_non_finite() == numel_; }

double Tensor::max_abs() const {
  double m = 0;
  for (size_t i = 0; i < numel_; ++i) m = std::max(m, std::fabs(flat(i)));
  return m;
}

bool Tensor::same_bits(const Tensor& other) const {
  if (shape_ != other.shape_ || dtype_ != other.dtype_) return false;
  if (dtype_ == DType::f32) {
    return std::memcmp(st_->f32.data(), other.st_->f32.data(), numel_ * 4) == 0;
  }
  return std::memcmp(st_->f64.data(), other.st_->f64.data(), numel_ * 8) == 0;
}

void check_finite(const Tensor& t, const char* op) {
  const size_t bad = t.first_non_finite();
  if (bad != t.numel()) {
    fail(op, ": non-finite value at flat index ", bad, " of output ", shape_str(t.shape()));
  }
}

namespace {

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void write_tensor_bytes(const Tensor& t, std::string& out) {
  TEMPO_CHECK(t.defined(), "tensor i/o: writing undefined tensor");
  out.append("TNSR");
  out.push_back(1);  // version
  out.push_back(static_cast<char>(t.dtype()));
  TEMPO_CHECK(t.rank() <= 255, "tensor i/o: rank ", t.rank(), " exceeds format limit");
  out.push_back(static_cast<char>(t.rank()));
  for (size_t d : t.shape()) put_u64(out, d);
  // Values are serialized little-endian; on the targets we build for this is
  // the native layout, so the payload is a straight byte copy.
  if (t.dtype() == DType::f32) {
    const char* p = reinterpret_cast<const char*>(t.data<float>());
    out.append(p, t.numel() * 4);
  } else {
    const char* p = reinterpret_cast<const char*>(t.data<double>());
    out.append(p, t.numel() * 8);
  }
}

Tensor read_tensor_bytes(const char* data, size_t size, size_t& consumed) {
  const unsigned char* p = reinterpret_cast<const unsigned char*>(data);
  TEMPO_CHECK(size >= 7, "tensor i/o: truncated header");
  TEMPO_CHECK(std::memcmp(p, "TNSR", 4) == 0, "tensor i/o: bad magic bytes");
  TEMPO_CHECK(p[4] == 1, "tensor i/o: unsupported version ", static_cast<int>(p[4]));
  const uint8_t dt_byte = p[5];
  TEMPO_CHECK(dt_byte == 1 || dt_byte == 2, "tensor i/o: bad dtype byte ",
              static_cast<int>(dt_byte));
  const DType dt = static_cast<DType>(dt_byte);
  const size_t rank = p[6];
  size_t off = 7;
  TEMPO_CHECK(size >= off + rank * 8, "tensor i/o: truncated dims");
  Shape shape(rank);
  for (size_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<size_t>(get_u64(p + off));
    off += 8;
  }
  const size_t n = shape_numel(shape);
  const size_t payload = n * dtype_size(dt);
  TEMPO_CHECK(size >= off + payload, "tensor i/o: truncated payload, expected ", payload,
              " bytes");
  Tensor t = Tensor::zeros(shape, dt);
  if (dt == DType::f32) {
    std::memcpy(t.mutable_data<float>(), data + off, payload);
  } else {
    std::memcpy(t.mutable_data<double>(), data + off, payload);
  }
  consumed = off + payload;
  return t;
}

void save_tensor(const Tensor& t, const std::string& path) {
  std::string bytes;
  write_tensor_bytes(t, bytes);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  TEMPO_CHECK(f.good(), "tensor i/o: cannot open ", path, " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  TEMPO_CHECK(f.good(), "tensor i/o: write failed for ", path);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  TEMPO_CHECK(f.good(), "tensor i/o: cannot open ", path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  size_t consumed = 0;
  Tensor t = read_tensor_bytes(bytes.data(), bytes.size(), consumed);
  TEMPO_CHECK(consumed == bytes.size(), "tensor i/o: trailing bytes in ", path);
  return t;
}

}  // namespace tempo

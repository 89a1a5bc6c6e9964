#pragma once

#include <span>

#include "tempo/tape.hpp"
#include "tempo/tensor.hpp"

namespace tempo {

// (t, h, w) extents for kernels, strides and padding.
struct Dims3 {
  size_t t = 1, h = 1, w = 1;
};

// All operations validate shapes, reject non-finite outputs, and record a
// backward closure on the active tape when any input requires a gradient.

// input [Ci,T,H,W] * weight [Co,Ci,kt,kh,kw] + bias [Co] -> [Co,T',H',W'],
// X' = floor((X + 2p - k) / s) + 1.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              Dims3 stride = {1, 1, 1}, Dims3 pad = {0, 0, 0});

// input [C,T,H,W] -> [C,T',H',W'], X' = floor((X - k) / s) + 1. Argmax
// positions are saved at forward time; ties go to the lowest flat index.
Tensor maxpool3d(const Tensor& input, Dims3 kernel, Dims3 stride);

// input [N,D] * weight [D,M] + bias [M] -> [N,M]. N may be zero.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);

Tensor elementwise_sum(const Tensor& a, const Tensor& b);

// Concatenation along an arbitrary axis; shapes must agree elsewhere.
Tensor concat(const Tensor& a, const Tensor& b, size_t axis);
// Channel concat: axis 1 for matrices [N,D], axis 0 for feature maps.
Tensor concat_channels(const Tensor& a, const Tensor& b);

// Mean over rows of -log softmax(logits)[label]. Max-subtraction keeps the
// computation stable for any logit magnitude.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Row-wise softmax over a [N,C] matrix.
Tensor softmax(const Tensor& logits);

Tensor reshape(const Tensor& x, Shape new_shape);

// Reorders axes: out[i_axes[0], i_axes[1], ...] = x[i_0, i_1, ...].
Tensor permute(const Tensor& x, std::span<const size_t> axes);

// Treats x as [N, rest...] and selects rows (duplicates allowed).
Tensor gather_rows(const Tensor& x, std::span<const size_t> rows);

// x [N, C, rest...], index[N] in [0, C): out[n, ...] = x[n, index[n], ...].
Tensor gather_per_row(const Tensor& x, std::span<const size_t> index);

// Flattens each part to one row of a [N, D] matrix; all parts must have the
// same element count and dtype.
Tensor stack_rows(std::span<const Tensor> parts);

Tensor scale(const Tensor& x, double factor);

Tensor sum_all(const Tensor& x);  // rank-0 sum

// Sum over all coordinates of the Fast R-CNN smooth L1 of (pred - target):
// 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise.
Tensor smooth_l1_sum(const Tensor& pred, const Tensor& target);

// Appends zero-filled frames along the time axis of a [C,T,H,W] tensor until
// it has target_t frames. Data-path helper: input must not require grad.
Tensor pad_frames_zero(const Tensor& x, size_t target_t);

}  // namespace tempo

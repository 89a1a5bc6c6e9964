#include "tempo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "tempo/parallel.hpp"

namespace tempo {
namespace {

using std::size_t;

long floor_div(long a, long b) {
  long q = a / b, r = a % b;
  return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
long ceil_div(long a, long b) { return -floor_div(-a, b); }

// Output index range [lo, hi) on one axis such that o*stride + k - pad lands
// inside [0, extent).
void conv_range(long extent, long out_extent, long stride, long pad, long k, long& lo,
                long& hi) {
  lo = std::max(0L, ceil_div(pad - k, stride));
  hi = std::min(out_extent, floor_div(extent - 1 + pad - k, stride) + 1);
  if (hi < lo) hi = lo;
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  TEMPO_CHECK(a.dtype() == b.dtype(), op, ": dtype mismatch (", dtype_name(a.dtype()),
              " vs ", dtype_name(b.dtype()), ")");
}

// Eight-lane partial sums; vectorizes without reassociating the reduction.
template <class T>
T dot_shifted(const T* __restrict a, const T* __restrict b, size_t n) {
  T acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (size_t j = 0; j < 8; ++j) acc[j] += a[i + j] * b[i + j];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) +
         tail;
}

struct ConvDims {
  long ci, ti, hi, wi;
  long co, kt, kh, kw;
  long st, sh, sw, pt, ph, pw;
  long to, ho, wo;

  bool k3s1p1() const {
    return kt == 3 && kh == 3 && kw == 3 && st == 1 && sh == 1 && sw == 1 && pt == 1 &&
           ph == 1 && pw == 1;
  }
};

// One output row updated with a full 3x3 spatial tile (three input rows, nine
// taps). w9 is the [dh][dw] tile.
template <class T>
void row_taps9(T* __restrict o, const T* __restrict r0, const T* __restrict r1,
               const T* __restrict r2, const T* __restrict w9, long w) {
  if (w == 1) {
    o[0] += w9[1] * r0[0] + w9[4] * r1[0] + w9[7] * r2[0];
    return;
  }
  o[0] += w9[1] * r0[0] + w9[2] * r0[1] + w9[4] * r1[0] + w9[5] * r1[1] + w9[7] * r2[0] +
          w9[8] * r2[1];
  for (long x = 1; x < w - 1; ++x) {
    o[x] += w9[0] * r0[x - 1] + w9[1] * r0[x] + w9[2] * r0[x + 1] + w9[3] * r1[x - 1] +
            w9[4] * r1[x] + w9[5] * r1[x + 1] + w9[6] * r2[x - 1] + w9[7] * r2[x] +
            w9[8] * r2[x + 1];
  }
  o[w - 1] += w9[0] * r0[w - 2] + w9[1] * r0[w - 1] + w9[3] * r1[w - 2] +
              w9[4] * r1[w - 1] + w9[6] * r2[w - 2] + w9[7] * r2[w - 1];
}

// Single-input-row variant (three taps) for border rows.
template <class T>
void row_taps3(T* __restrict o, const T* __restrict r, const T* __restrict w3, long w) {
  if (w == 1) {
    o[0] += w3[1] * r[0];
    return;
  }
  o[0] += w3[1] * r[0] + w3[2] * r[1];
  for (long x = 1; x < w - 1; ++x) {
    o[x] += w3[0] * r[x - 1] + w3[1] * r[x] + w3[2] * r[x + 1];
  }
  o[w - 1] += w3[0] * r[w - 2] + w3[1] * r[w - 1];
}

// Correlation of one [T,H,W] plane with a 3x3x3 kernel at stride 1 pad 1,
// accumulated into out (same extents). Shared by the forward pass and, with
// a flipped kernel, by the input-gradient pass.
template <class T>
void plane_corr_3x3(const T* __restrict in, const T* __restrict w27, T* __restrict out,
                    long t_ext, long h, long w) {
  const long plane = h * w;
  for (long ot = 0; ot < t_ext; ++ot) {
    T* __restrict op = out + ot * plane;
    for (long dt = 0; dt < 3; ++dt) {
      const long it = ot + dt - 1;
      if (it < 0 || it >= t_ext) continue;
      const T* __restrict tp = in + it * plane;
      const T* __restrict w9 = w27 + dt * 9;
      for (long oh = 0; oh < h; ++oh) {
        T* __restrict orow = op + oh * w;
        if (oh >= 1 && oh + 1 < h) {
          row_taps9(orow, tp + (oh - 1) * w, tp + oh * w, tp + (oh + 1) * w, w9, w);
        } else {
          for (long dh = 0; dh < 3; ++dh) {
            const long ih = oh + dh - 1;
            if (ih < 0 || ih >= h) continue;
            row_taps3(orow, tp + ih * w, w9 + dh * 3, w);
          }
        }
      }
    }
  }
}

// Weight gradient of the same specialized case: per (dt,dh), one pass over
// each valid row pair accumulates the three dw taps at once.
template <class T>
void plane_wgrad_3x3(const T* __restrict go, const T* __restrict in, T* __restrict gw27,
                     long t_ext, long h, long w) {
  const long plane = h * w;
  for (long dt = 0; dt < 3; ++dt) {
    for (long dh = 0; dh < 3; ++dh) {
      T acc0 = 0, acc1 = 0, acc2 = 0;
      for (long ot = 0; ot < t_ext; ++ot) {
        const long it = ot + dt - 1;
        if (it < 0 || it >= t_ext) continue;
        for (long oh = 0; oh < h; ++oh) {
          const long ih = oh + dh - 1;
          if (ih < 0 || ih >= h) continue;
          const T* __restrict g = go + (ot * h + oh) * w;
          const T* __restrict r = in + (it * h + ih) * w;
          // Tap dw pairs g[x] with r[x + dw - 1].
          if (w == 1) {
            acc1 += g[0] * r[0];
            continue;
          }
          T a0 = 0, a1 = 0, a2 = 0;
          for (long x = 1; x < w - 1; ++x) {
            const T gv = g[x];
            a0 += gv * r[x - 1];
            a1 += gv * r[x];
            a2 += gv * r[x + 1];
          }
          a1 += g[0] * r[0] + g[w - 1] * r[w - 1];
          a2 += g[0] * r[1];
          a0 += g[w - 1] * r[w - 2];
          acc0 += a0;
          acc1 += a1;
          acc2 += a2;
        }
      }
      gw27[(dt * 3 + dh) * 3 + 0] += acc0;
      gw27[(dt * 3 + dh) * 3 + 1] += acc1;
      gw27[(dt * 3 + dh) * 3 + 2] += acc2;
    }
  }
}

template <class T>
void conv3d_forward(const T* __restrict in, const T* __restrict w, const T* __restrict b,
                    T* __restrict out, const ConvDims& d) {
  const long in_plane = d.ti * d.hi * d.wi;
  const long out_plane = d.to * d.ho * d.wo;
  const long ksz = d.kt * d.kh * d.kw;
  if (d.k3s1p1()) {
    parallel_for(static_cast<size_t>(d.co), [&](size_t co0, size_t co1) {
      for (long co = static_cast<long>(co0); co < static_cast<long>(co1); ++co) {
        T* op = out + co * out_plane;
        std::fill(op, op + out_plane, b[co]);
        for (long ci = 0; ci < d.ci; ++ci) {
          plane_corr_3x3(in + ci * in_plane, w + (co * d.ci + ci) * 27, op, d.ti, d.hi,
                         d.wi);
        }
      }
    });
    return;
  }
  // Per-offset output ranges on the width axis, hoisted out of the hot loop.
  std::vector<long> wlo(d.kw), whi(d.kw);
  for (long dw = 0; dw < d.kw; ++dw) conv_range(d.wi, d.wo, d.sw, d.pw, dw, wlo[dw], whi[dw]);
  parallel_for(static_cast<size_t>(d.co), [&](size_t co0, size_t co1) {
    for (long co = static_cast<long>(co0); co < static_cast<long>(co1); ++co) {
      T* __restrict op = out + co * out_plane;
      std::fill(op, op + out_plane, b[co]);
      for (long ot = 0; ot < d.to; ++ot) {
        for (long oh = 0; oh < d.ho; ++oh) {
          T* __restrict orow = op + (ot * d.ho + oh) * d.wo;
          for (long ci = 0; ci < d.ci; ++ci) {
            const T* __restrict ip = in + ci * in_plane;
            const T* __restrict wp = w + (co * d.ci + ci) * ksz;
            for (long dt = 0; dt < d.kt; ++dt) {
              const long it = ot * d.st + dt - d.pt;
              if (it < 0 || it >= d.ti) continue;
              for (long dh = 0; dh < d.kh; ++dh) {
                const long ih = oh * d.sh + dh - d.ph;
                if (ih < 0 || ih >= d.hi) continue;
                const T* __restrict irow = ip + (it * d.hi + ih) * d.wi;
                const T* __restrict wrow = wp + (dt * d.kh + dh) * d.kw;
                for (long dw = 0; dw < d.kw; ++dw) {
                  const T wv = wrow[dw];
                  if (d.sw == 1) {
                    const T* __restrict ir = irow + dw - d.pw;
                    for (long ow = wlo[dw]; ow < whi[dw]; ++ow) orow[ow] += wv * ir[ow];
                  } else {
                    for (long ow = wlo[dw]; ow < whi[dw]; ++ow)
                      orow[ow] += wv * irow[ow * d.sw + dw - d.pw];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

template <class T>
void conv3d_backward_input(const T* __restrict go, const T* __restrict w,
                           T* __restrict gin, const ConvDims& d) {
  const long in_plane = d.ti * d.hi * d.wi;
  const long out_plane = d.to * d.ho * d.wo;
  const long ksz = d.kt * d.kh * d.kw;
  if (d.k3s1p1()) {
    // The adjoint of a stride-1 pad-1 3x3x3 correlation is the same
    // correlation with the kernel flipped on every axis.
    parallel_for(static_cast<size_t>(d.ci), [&](size_t ci0, size_t ci1) {
      for (long ci = static_cast<long>(ci0); ci < static_cast<long>(ci1); ++ci) {
        T* gp = gin + ci * in_plane;
        std::fill(gp, gp + in_plane, T(0));
        for (long co = 0; co < d.co; ++co) {
          const T* wp = w + (co * d.ci + ci) * 27;
          T flipped[27];
          for (long k = 0; k < 27; ++k) flipped[k] = wp[26 - k];
          plane_corr_3x3(go + co * out_plane, flipped, gp, d.ti, d.hi, d.wi);
        }
      }
    });
    return;
  }
  parallel_for(static_cast<size_t>(d.ci), [&](size_t ci0, size_t ci1) {
    for (long ci = static_cast<long>(ci0); ci < static_cast<long>(ci1); ++ci) {
      T* gp = gin + ci * in_plane;
      std::fill(gp, gp + in_plane, T(0));
      for (long co = 0; co < d.co; ++co) {
        const T* op = go + co * out_plane;
        const T* wp = w + (co * d.ci + ci) * ksz;
        for (long dt = 0; dt < d.kt; ++dt) {
          long lo_t, hi_t;
          conv_range(d.ti, d.to, d.st, d.pt, dt, lo_t, hi_t);
          for (long dh = 0; dh < d.kh; ++dh) {
            long lo_h, hi_h;
            conv_range(d.hi, d.ho, d.sh, d.ph, dh, lo_h, hi_h);
            for (long dw = 0; dw < d.kw; ++dw) {
              long lo_w, hi_w;
              conv_range(d.wi, d.wo, d.sw, d.pw, dw, lo_w, hi_w);
              const T wv = wp[(dt * d.kh + dh) * d.kw + dw];
              for (long ot = lo_t; ot < hi_t; ++ot) {
                const long it = ot * d.st + dt - d.pt;
                for (long oh = lo_h; oh < hi_h; ++oh) {
                  const long ih = oh * d.sh + dh - d.ph;
                  const T* __restrict grow = op + (ot * d.ho + oh) * d.wo;
                  if (d.sw == 1) {
                    T* __restrict ir = gp + (it * d.hi + ih) * d.wi + dw - d.pw;
                    for (long ow = lo_w; ow < hi_w; ++ow) ir[ow] += wv * grow[ow];
                  } else {
                    T* __restrict irow = gp + (it * d.hi + ih) * d.wi;
                    for (long ow = lo_w; ow < hi_w; ++ow)
                      irow[ow * d.sw + dw - d.pw] += wv * grow[ow];
                  }
                }
              }
            }
          }
        }
      }
    }
  });
}

template <class T>
void conv3d_backward_weight(const T* go, const T* in, T* gw, const ConvDims& d) {
  const long in_plane = d.ti * d.hi * d.wi;
  const long out_plane = d.to * d.ho * d.wo;
  const long ksz = d.kt * d.kh * d.kw;
  if (d.k3s1p1()) {
    parallel_for(static_cast<size_t>(d.co), [&](size_t co0, size_t co1) {
      for (long co = static_cast<long>(co0); co < static_cast<long>(co1); ++co) {
        for (long ci = 0; ci < d.ci; ++ci) {
          plane_wgrad_3x3(go + co * out_plane, in + ci * in_plane,
                          gw + (co * d.ci + ci) * 27, d.ti, d.hi, d.wi);
        }
      }
    });
    return;
  }
  parallel_for(static_cast<size_t>(d.co), [&](size_t co0, size_t co1) {
    for (long co = static_cast<long>(co0); co < static_cast<long>(co1); ++co) {
      const T* op = go + co * out_plane;
      for (long ci = 0; ci < d.ci; ++ci) {
        const T* ip = in + ci * in_plane;
        T* wp = gw + (co * d.ci + ci) * ksz;
        for (long dt = 0; dt < d.kt; ++dt) {
          long lo_t, hi_t;
          conv_range(d.ti, d.to, d.st, d.pt, dt, lo_t, hi_t);
          for (long dh = 0; dh < d.kh; ++dh) {
            long lo_h, hi_h;
            conv_range(d.hi, d.ho, d.sh, d.ph, dh, lo_h, hi_h);
            for (long dw = 0; dw < d.kw; ++dw) {
              long lo_w, hi_w;
              conv_range(d.wi, d.wo, d.sw, d.pw, dw, lo_w, hi_w);
              T acc = 0;
              for (long ot = lo_t; ot < hi_t; ++ot) {
                const long it = ot * d.st + dt - d.pt;
                for (long oh = lo_h; oh < hi_h; ++oh) {
                  const long ih = oh * d.sh + dh - d.ph;
                  const T* grow = op + (ot * d.ho + oh) * d.wo + lo_w;
                  if (d.sw == 1) {
                    const T* irow = ip + (it * d.hi + ih) * d.wi + lo_w + dw - d.pw;
                    acc += dot_shifted(grow, irow, static_cast<size_t>(hi_w - lo_w));
                  } else {
                    const T* irow = ip + (it * d.hi + ih) * d.wi;
                    for (long ow = lo_w; ow < hi_w; ++ow)
                      acc += grow[ow - lo_w] * irow[ow * d.sw + dw - d.pw];
                  }
                }
              }
              wp[(dt * d.kh + dh) * d.kw + dw] = acc;
            }
          }
        }
      }
    }
  });
}

template <class T>
void conv3d_backward_bias(const T* go, T* gb, long co, long plane) {
  for (long c = 0; c < co; ++c) {
    T acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    const T* p = go + c * plane;
    long i = 0;
    for (; i + 8 <= plane; i += 8)
      for (long j = 0; j < 8; ++j) acc[j] += p[i + j];
    T tail = 0;
    for (; i < plane; ++i) tail += p[i];
    gb[c] = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
            ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
  }
}

template <class T>
Tensor run_conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                  const ConvDims& d) {
  Tensor out = Tensor::zeros(
      {static_cast<size_t>(d.co), static_cast<size_t>(d.to), static_cast<size_t>(d.ho),
       static_cast<size_t>(d.wo)},
      input.dtype());
  conv3d_forward(input.data<T>(), weight.data<T>(), bias.data<T>(), out.mutable_data<T>(),
                 d);
  return out;
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, Dims3 stride,
              Dims3 pad) {
  TEMPO_CHECK(input.rank() == 4, "conv3d: input rank ", input.rank(), " != 4");
  TEMPO_CHECK(weight.rank() == 5, "conv3d: weight rank ", weight.rank(), " != 5");
  TEMPO_CHECK(bias.rank() == 1, "conv3d: bias rank ", bias.rank(), " != 1");
  check_same_dtype(input, weight, "conv3d");
  check_same_dtype(input, bias, "conv3d");
  TEMPO_CHECK(weight.dim(1) == input.dim(0), "conv3d: input channel axis mismatch (input ",
              input.dim(0), " vs weight ", weight.dim(1), ")");
  TEMPO_CHECK(bias.dim(0) == weight.dim(0), "conv3d: bias axis 0 (", bias.dim(0),
              ") != output channels (", weight.dim(0), ")");
  TEMPO_CHECK(stride.t >= 1 && stride.h >= 1 && stride.w >= 1, "conv3d: stride must be >= 1");

  ConvDims d;
  d.ci = static_cast<long>(input.dim(0));
  d.ti = static_cast<long>(input.dim(1));
  d.hi = static_cast<long>(input.dim(2));
  d.wi = static_cast<long>(input.dim(3));
  d.co = static_cast<long>(weight.dim(0));
  d.kt = static_cast<long>(weight.dim(2));
  d.kh = static_cast<long>(weight.dim(3));
  d.kw = static_cast<long>(weight.dim(4));
  d.st = static_cast<long>(stride.t);
  d.sh = static_cast<long>(stride.h);
  d.sw = static_cast<long>(stride.w);
  d.pt = static_cast<long>(pad.t);
  d.ph = static_cast<long>(pad.h);
  d.pw = static_cast<long>(pad.w);
  const long ext_t = d.ti + 2 * d.pt, ext_h = d.hi + 2 * d.ph, ext_w = d.wi + 2 * d.pw;
  TEMPO_CHECK(d.kt <= ext_t, "conv3d: kernel exceeds padded input on time axis (", d.kt,
              " > ", ext_t, ")");
  TEMPO_CHECK(d.kh <= ext_h, "conv3d: kernel exceeds padded input on height axis (", d.kh,
              " > ", ext_h, ")");
  TEMPO_CHECK(d.kw <= ext_w, "conv3d: kernel exceeds padded input on width axis (", d.kw,
              " > ", ext_w, ")");
  d.to = (ext_t - d.kt) / d.st + 1;
  d.ho = (ext_h - d.kh) / d.sh + 1;
  d.wo = (ext_w - d.kw) / d.sw + 1;

  Tensor out = input.dtype() == DType::f64 ? run_conv3d<double>(input, weight, bias, d)
                                           : run_conv3d<float>(input, weight, bias, d);
  check_finite(out, "conv3d");

  if (wants_grad({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [input, weight, bias, out, d](Tape& t) {
      const Tensor& go = t.grad(out.id());
      auto run = [&](auto tag) {
        using T = decltype(tag);
        if (input.requires_grad()) {
          Tensor gi = Tensor::zeros(input.shape(), input.dtype());
          conv3d_backward_input(go.data<T>(), weight.data<T>(), gi.mutable_data<T>(), d);
          t.accumulate(input, gi);
        }
        if (weight.requires_grad()) {
          Tensor gw = Tensor::zeros(weight.shape(), weight.dtype());
          conv3d_backward_weight(go.data<T>(), input.data<T>(), gw.mutable_data<T>(), d);
          t.accumulate(weight, gw);
        }
        if (bias.requires_grad()) {
          Tensor gb = Tensor::zeros(bias.shape(), bias.dtype());
          conv3d_backward_bias(go.data<T>(), gb.mutable_data<T>(), d.co,
                               d.to * d.ho * d.wo);
          t.accumulate(bias, gb);
        }
      };
      if (input.dtype() == DType::f64) {
        run(double{});
      } else {
        run(float{});
      }
    });
  }
  return out;
}

namespace {

template <class T>
void maxpool_forward(const T* in, T* out, uint32_t* argmax, long c, long ti, long hi,
                     long wi, long kt, long kh, long kw, long st, long sh, long sw, long to,
                     long ho, long wo) {
  const long in_plane = ti * hi * wi;
  const long out_plane = to * ho * wo;
  parallel_for(static_cast<size_t>(c), [&](size_t c0, size_t c1) {
    for (long ch = static_cast<long>(c0); ch < static_cast<long>(c1); ++ch) {
      const T* ip = in + ch * in_plane;
      T* op = out + ch * out_plane;
      uint32_t* ap = argmax + ch * out_plane;
      for (long ot = 0; ot < to; ++ot) {
        for (long oh = 0; oh < ho; ++oh) {
          for (long ow = 0; ow < wo; ++ow) {
            const long t0 = ot * st, h0 = oh * sh, w0 = ow * sw;
            T best = ip[(t0 * hi + h0) * wi + w0];
            long best_idx = (t0 * hi + h0) * wi + w0;
            for (long dt = 0; dt < kt; ++dt)
              for (long dh = 0; dh < kh; ++dh)
                for (long dw = 0; dw < kw; ++dw) {
                  const long idx = ((t0 + dt) * hi + (h0 + dh)) * wi + (w0 + dw);
                  if (ip[idx] > best) {  // strict: ties keep the lowest flat index
                    best = ip[idx];
                    best_idx = idx;
                  }
                }
            op[(ot * ho + oh) * wo + ow] = best;
            ap[(ot * ho + oh) * wo + ow] =
                static_cast<uint32_t>(ch * in_plane + best_idx);
          }
        }
      }
    }
  });
}

}  // namespace

Tensor maxpool3d(const Tensor& input, Dims3 kernel, Dims3 stride) {
  TEMPO_CHECK(input.rank() == 4, "maxpool3d: input rank ", input.rank(), " != 4");
  TEMPO_CHECK(kernel.t >= 1 && kernel.h >= 1 && kernel.w >= 1, "maxpool3d: kernel must be >= 1");
  TEMPO_CHECK(stride.t >= 1 && stride.h >= 1 && stride.w >= 1, "maxpool3d: stride must be >= 1");
  TEMPO_CHECK(kernel.t <= input.dim(1), "maxpool3d: kernel exceeds input on time axis (",
              kernel.t, " > ", input.dim(1), ")");
  TEMPO_CHECK(kernel.h <= input.dim(2), "maxpool3d: kernel exceeds input on height axis (",
              kernel.h, " > ", input.dim(2), ")");
  TEMPO_CHECK(kernel.w <= input.dim(3), "maxpool3d: kernel exceeds input on width axis (",
              kernel.w, " > ", input.dim(3), ")");
  const long c = static_cast<long>(input.dim(0));
  const long ti = static_cast<long>(input.dim(1));
  const long hi = static_cast<long>(input.dim(2));
  const long wi = static_cast<long>(input.dim(3));
  const long to = (ti - static_cast<long>(kernel.t)) / static_cast<long>(stride.t) + 1;
  const long ho = (hi - static_cast<long>(kernel.h)) / static_cast<long>(stride.h) + 1;
  const long wo = (wi - static_cast<long>(kernel.w)) / static_cast<long>(stride.w) + 1;

  Tensor out = Tensor::zeros({static_cast<size_t>(c), static_cast<size_t>(to),
                              static_cast<size_t>(ho), static_cast<size_t>(wo)},
                             input.dtype());
  auto argmax = std::make_shared<std::vector<uint32_t>>(out.numel());
  if (input.dtype() == DType::f64) {
    maxpool_forward(input.data<double>(), out.mutable_data<double>(), argmax->data(), c, ti,
                    hi, wi, kernel.t, kernel.h, kernel.w, stride.t, stride.h, stride.w, to,
                    ho, wo);
  } else {
    maxpool_forward(input.data<float>(), out.mutable_data<float>(), argmax->data(), c, ti,
                    hi, wi, kernel.t, kernel.h, kernel.w, stride.t, stride.h, stride.w, to,
                    ho, wo);
  }
  check_finite(out, "maxpool3d");

  if (wants_grad({&input})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [input, out, argmax](Tape& t) {
      const Tensor& go = t.grad(out.id());
      Tensor gi = Tensor::zeros(input.shape(), input.dtype());
      const size_t n = out.numel();
      if (input.dtype() == DType::f64) {
        double* g = gi.mutable_data<double>();
        const double* p = go.data<double>();
        for (size_t i = 0; i < n; ++i) g[(*argmax)[i]] += p[i];
      } else {
        float* g = gi.mutable_data<float>();
        const float* p = go.data<float>();
        for (size_t i = 0; i < n; ++i) g[(*argmax)[i]] += p[i];
      }
      t.accumulate(input, gi);
    });
  }
  return out;
}

namespace {

template <class T>
void linear_forward(const T* __restrict in, const T* __restrict w, const T* __restrict b,
                    T* __restrict out, long n, long d, long m) {
  parallel_for(static_cast<size_t>(n),
               [&](size_t r0, size_t r1) {
                 for (long r = static_cast<long>(r0); r < static_cast<long>(r1); ++r) {
                   T* __restrict orow = out + r * m;
                   std::copy(b, b + m, orow);
                   const T* __restrict irow = in + r * d;
                   for (long k = 0; k < d; ++k) {
                     const T v = irow[k];
                     const T* __restrict wrow = w + k * m;
                     for (long j = 0; j < m; ++j) orow[j] += v * wrow[j];
                   }
                 }
               },
               8);
}

}  // namespace

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  TEMPO_CHECK(input.rank() == 2, "linear: input rank ", input.rank(), " != 2");
  TEMPO_CHECK(weight.rank() == 2, "linear: weight rank ", weight.rank(), " != 2");
  TEMPO_CHECK(bias.rank() == 1, "linear: bias rank ", bias.rank(), " != 1");
  check_same_dtype(input, weight, "linear");
  check_same_dtype(input, bias, "linear");
  TEMPO_CHECK(input.dim(1) == weight.dim(0), "linear: inner dimensions disagree (",
              input.dim(1), " vs ", weight.dim(0), ")");
  TEMPO_CHECK(bias.dim(0) == weight.dim(1), "linear: bias width ", bias.dim(0),
              " != output width ", weight.dim(1));
  const long n = static_cast<long>(input.dim(0));
  const long d = static_cast<long>(input.dim(1));
  const long m = static_cast<long>(weight.dim(1));

  Tensor out = Tensor::zeros({static_cast<size_t>(n), static_cast<size_t>(m)}, input.dtype());
  if (input.dtype() == DType::f64) {
    linear_forward(input.data<double>(), weight.data<double>(), bias.data<double>(),
                   out.mutable_data<double>(), n, d, m);
  } else {
    linear_forward(input.data<float>(), weight.data<float>(), bias.data<float>(),
                   out.mutable_data<float>(), n, d, m);
  }
  check_finite(out, "linear");

  if (wants_grad({&input, &weight, &bias})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [input, weight, bias, out, n, d, m](Tape& t) {
      const Tensor& go = t.grad(out.id());
      auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* g = go.data<T>();
        if (input.requires_grad()) {
          Tensor gi = Tensor::zeros(input.shape(), input.dtype());
          T* gp = gi.mutable_data<T>();
          const T* w = weight.data<T>();
          for (long r = 0; r < n; ++r)
            for (long k = 0; k < d; ++k)
              gp[r * d + k] = dot_shifted(g + r * m, w + k * m, static_cast<size_t>(m));
          t.accumulate(input, gi);
        }
        if (weight.requires_grad()) {
          Tensor gw = Tensor::zeros(weight.shape(), weight.dtype());
          T* gp = gw.mutable_data<T>();
          const T* in = input.data<T>();
          for (long r = 0; r < n; ++r) {
            const T* grow = g + r * m;
            for (long k = 0; k < d; ++k) {
              const T v = in[r * d + k];
              T* wrow = gp + k * m;
              for (long j = 0; j < m; ++j) wrow[j] += v * grow[j];
            }
          }
          t.accumulate(weight, gw);
        }
        if (bias.requires_grad()) {
          Tensor gb = Tensor::zeros(bias.shape(), bias.dtype());
          T* gp = gb.mutable_data<T>();
          for (long r = 0; r < n; ++r)
            for (long j = 0; j < m; ++j) gp[j] += g[r * m + j];
          t.accumulate(bias, gb);
        }
      };
      if (input.dtype() == DType::f64) {
        run(double{});
      } else {
        run(float{});
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  TEMPO_CHECK(x.defined(), "relu: undefined input");
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  const size_t n = x.numel();
  if (x.dtype() == DType::f64) {
    const double* p = x.data<double>();
    double* q = out.mutable_data<double>();
    for (size_t i = 0; i < n; ++i) q[i] = p[i] > 0 ? p[i] : 0.0;
  } else {
    const float* p = x.data<float>();
    float* q = out.mutable_data<float>();
    for (size_t i = 0; i < n; ++i) q[i] = p[i] > 0 ? p[i] : 0.0f;
  }
  check_finite(out, "relu");
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [x, out](Tape& t) {
      const Tensor& go = t.grad(out.id());
      Tensor gi = Tensor::zeros(x.shape(), x.dtype());
      const size_t n = x.numel();
      if (x.dtype() == DType::f64) {
        const double* p = x.data<double>();
        const double* g = go.data<double>();
        double* q = gi.mutable_data<double>();
        for (size_t i = 0; i < n; ++i) q[i] = p[i] > 0 ? g[i] : 0.0;
      } else {
        const float* p = x.data<float>();
        const float* g = go.data<float>();
        float* q = gi.mutable_data<float>();
        for (size_t i = 0; i < n; ++i) q[i] = p[i] > 0 ? g[i] : 0.0f;
      }
      t.accumulate(x, gi);
    });
  }
  return out;
}

Tensor elementwise_sum(const Tensor& a, const Tensor& b) {
  TEMPO_CHECK(a.shape() == b.shape(), "elementwise_sum: shape mismatch ",
              shape_str(a.shape()), " vs ", shape_str(b.shape()));
  check_same_dtype(a, b, "elementwise_sum");
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  const size_t n = a.numel();
  if (a.dtype() == DType::f64) {
    const double* pa = a.data<double>();
    const double* pb = b.data<double>();
    double* q = out.mutable_data<double>();
    for (size_t i = 0; i < n; ++i) q[i] = pa[i] + pb[i];
  } else {
    const float* pa = a.data<float>();
    const float* pb = b.data<float>();
    float* q = out.mutable_data<float>();
    for (size_t i = 0; i < n; ++i) q[i] = pa[i] + pb[i];
  }
  check_finite(out, "elementwise_sum");
  if (wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [a, b, out](Tape& t) {
      const Tensor& go = t.grad(out.id());
      if (a.requires_grad()) t.accumulate(a, go);
      if (b.requires_grad()) t.accumulate(b, go);
    });
  }
  return out;
}

namespace {

template <class T>
void copy_concat(const T* a, const T* b, T* out, size_t outer, size_t block_a,
                 size_t block_b) {
  for (size_t o = 0; o < outer; ++o) {
    std::memcpy(out + o * (block_a + block_b), a + o * block_a, block_a * sizeof(T));
    std::memcpy(out + o * (block_a + block_b) + block_a, b + o * block_b,
                block_b * sizeof(T));
  }
}

template <class T>
void split_concat(const T* g, T* ga, T* gb, size_t outer, size_t block_a, size_t block_b) {
  for (size_t o = 0; o < outer; ++o) {
    std::memcpy(ga + o * block_a, g + o * (block_a + block_b), block_a * sizeof(T));
    std::memcpy(gb + o * block_b, g + o * (block_a + block_b) + block_a,
                block_b * sizeof(T));
  }
}

}  // namespace

Tensor concat(const Tensor& a, const Tensor& b, size_t axis) {
  TEMPO_CHECK(a.rank() == b.rank(), "concat: rank mismatch ", a.rank(), " vs ", b.rank());
  TEMPO_CHECK(axis < a.rank(), "concat: axis ", axis, " out of range for rank ", a.rank());
  check_same_dtype(a, b, "concat");
  for (size_t i = 0; i < a.rank(); ++i) {
    if (i != axis) {
      TEMPO_CHECK(a.dim(i) == b.dim(i), "concat: shapes ", shape_str(a.shape()), " and ",
                  shape_str(b.shape()), " differ on non-concat axis ", i);
    }
  }
  Shape out_shape = a.shape();
  out_shape[axis] += b.dim(axis);
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const size_t block_a = a.dim(axis) * inner;
  const size_t block_b = b.dim(axis) * inner;

  Tensor out = Tensor::zeros(out_shape, a.dtype());
  if (a.dtype() == DType::f64) {
    copy_concat(a.data<double>(), b.data<double>(), out.mutable_data<double>(), outer,
                block_a, block_b);
  } else {
    copy_concat(a.data<float>(), b.data<float>(), out.mutable_data<float>(), outer, block_a,
                block_b);
  }
  check_finite(out, "concat");
  if (wants_grad({&a, &b})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [a, b, out, outer, block_a, block_b](Tape& t) {
      const Tensor& go = t.grad(out.id());
      Tensor ga = Tensor::zeros(a.shape(), a.dtype());
      Tensor gb = Tensor::zeros(b.shape(), b.dtype());
      if (a.dtype() == DType::f64) {
        split_concat(go.data<double>(), ga.mutable_data<double>(),
                     gb.mutable_data<double>(), outer, block_a, block_b);
      } else {
        split_concat(go.data<float>(), ga.mutable_data<float>(), gb.mutable_data<float>(),
                     outer, block_a, block_b);
      }
      if (a.requires_grad()) t.accumulate(a, ga);
      if (b.requires_grad()) t.accumulate(b, gb);
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  return concat(a, b, a.rank() == 2 ? 1 : 0);
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  TEMPO_CHECK(logits.rank() == 2, "softmax_cross_entropy: logits rank ", logits.rank(),
              " != 2");
  const size_t n = logits.dim(0), c = logits.dim(1);
  TEMPO_CHECK(labels.size() == n, "softmax_cross_entropy: ", labels.size(), " labels for ",
              n, " rows");
  TEMPO_CHECK(n >= 1, "softmax_cross_entropy: empty batch");
  for (size_t i = 0; i < n; ++i) {
    TEMPO_CHECK(labels[i] >= 0 && static_cast<size_t>(labels[i]) < c,
                "softmax_cross_entropy: label ", labels[i], " out of range [0,", c,
                ") at row ", i);
  }
  // Probabilities are kept for the backward pass.
  Tensor probs = Tensor::zeros(logits.shape(), DType::f64);
  double* pp = probs.mutable_data<double>();
  double total = 0;
  for (size_t i = 0; i < n; ++i) {
    double mx = logits.flat(i * c);
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, logits.flat(i * c + j));
    double z = 0;
    for (size_t j = 0; j < c; ++j) {
      const double e = std::exp(logits.flat(i * c + j) - mx);
      pp[i * c + j] = e;
      z += e;
    }
    for (size_t j = 0; j < c; ++j) pp[i * c + j] /= z;
    total += std::log(z) - (logits.flat(i * c + static_cast<size_t>(labels[i])) - mx);
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(n), logits.dtype());
  check_finite(out, "softmax_cross_entropy");

  if (wants_grad({&logits})) {
    out.set_requires_grad(true);
    std::vector<int> lab(labels.begin(), labels.end());
    Tape::current()->record(out.id(), [logits, out, probs, lab, n, c](Tape& t) {
      const double g = t.grad(out.id()).flat(0);
      Tensor gi = Tensor::zeros(logits.shape(), logits.dtype());
      const double* pp = probs.data<double>();
      const double inv_n = 1.0 / static_cast<double>(n);
      if (logits.dtype() == DType::f64) {
        double* q = gi.mutable_data<double>();
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j)
            q[i * c + j] = g * inv_n *
                           (pp[i * c + j] - (static_cast<size_t>(lab[i]) == j ? 1.0 : 0.0));
      } else {
        float* q = gi.mutable_data<float>();
        for (size_t i = 0; i < n; ++i)
          for (size_t j = 0; j < c; ++j)
            q[i * c + j] = static_cast<float>(
                g * inv_n *
                (pp[i * c + j] - (static_cast<size_t>(lab[i]) == j ? 1.0 : 0.0)));
      }
      t.accumulate(logits, gi);
    });
  }
  return out;
}

Tensor softmax(const Tensor& logits) {
  TEMPO_CHECK(logits.rank() == 2, "softmax: logits rank ", logits.rank(), " != 2");
  const size_t n = logits.dim(0), c = logits.dim(1);
  Tensor out = Tensor::zeros(logits.shape(), logits.dtype());
  std::vector<double> row(c);
  for (size_t i = 0; i < n; ++i) {
    double mx = logits.flat(i * c);
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, logits.flat(i * c + j));
    double z = 0;
    for (size_t j = 0; j < c; ++j) {
      row[j] = std::exp(logits.flat(i * c + j) - mx);
      z += row[j];
    }
    for (size_t j = 0; j < c; ++j) {
      const double v = row[j] / z;
      if (out.dtype() == DType::f64) {
        out.mutable_data<double>()[i * c + j] = v;
      } else {
        out.mutable_data<float>()[i * c + j] = static_cast<float>(v);
      }
    }
  }
  check_finite(out, "softmax");
  if (wants_grad({&logits})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [logits, out, n, c](Tape& t) {
      const Tensor& go = t.grad(out.id());
      Tensor gi = Tensor::zeros(logits.shape(), logits.dtype());
      for (size_t i = 0; i < n; ++i) {
        double dot = 0;
        for (size_t j = 0; j < c; ++j) dot += go.flat(i * c + j) * out.flat(i * c + j);
        for (size_t j = 0; j < c; ++j) {
          const double v = out.flat(i * c + j) * (go.flat(i * c + j) - dot);
          if (gi.dtype() == DType::f64) {
            gi.mutable_data<double>()[i * c + j] = v;
          } else {
            gi.mutable_data<float>()[i * c + j] = static_cast<float>(v);
          }
        }
      }
      t.accumulate(logits, gi);
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  Tensor out = x.reshaped(std::move(new_shape));
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [x, out](Tape& t) {
      if (x.requires_grad()) t.accumulate(x, t.grad(out.id()).reshaped(x.shape()));
    });
  }
  return out;
}

namespace {

// out[perm(idx)] = x[idx]; returns the flat copy mapping so the backward pass
// can invert it cheaply.
Tensor permute_copy(const Tensor& x, const std::vector<size_t>& axes) {
  const size_t r = x.rank();
  Shape out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  std::vector<size_t> in_strides(r, 1), out_strides(r, 1);
  for (size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
  for (size_t i = r; i-- > 1;) out_strides[i - 1] = out_strides[i] * out_shape[i];
  const size_t n = x.numel();
  std::vector<size_t> idx(r, 0);
  for (size_t flat = 0; flat < n; ++flat) {
    size_t src = flat;
    size_t dst = 0;
    for (size_t i = 0; i < r; ++i) {
      idx[i] = src / in_strides[i];
      src %= in_strides[i];
    }
    for (size_t i = 0; i < r; ++i) dst += idx[axes[i]] * out_strides[i];
    if (x.dtype() == DType::f64) {
      out.mutable_data<double>()[dst] = x.data<double>()[flat];
    } else {
      out.mutable_data<float>()[dst] = x.data<float>()[flat];
    }
  }
  return out;
}

}  // namespace

Tensor permute(const Tensor& x, std::span<const size_t> axes) {
  TEMPO_CHECK(axes.size() == x.rank(), "permute: ", axes.size(), " axes for rank ",
              x.rank());
  std::vector<char> seen(x.rank(), 0);
  for (size_t a : axes) {
    TEMPO_CHECK(a < x.rank() && !seen[a], "permute: invalid axis list");
    seen[a] = 1;
  }
  std::vector<size_t> ax(axes.begin(), axes.end());
  Tensor out = permute_copy(x, ax);
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [x, out, ax](Tape& t) {
      std::vector<size_t> inverse(ax.size());
      for (size_t i = 0; i < ax.size(); ++i) inverse[ax[i]] = i;
      t.accumulate(x, permute_copy(t.grad(out.id()), inverse));
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, std::span<const size_t> rows) {
  TEMPO_CHECK(x.rank() >= 1, "gather_rows: input must have rank >= 1");
  const size_t n = x.dim(0);
  const size_t inner = x.numel() / std::max<size_t>(n, 1);
  for (size_t r : rows) TEMPO_CHECK(r < n, "gather_rows: row ", r, " out of range ", n);
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  for (size_t i = 0; i < rows.size(); ++i) {
    if (x.dtype() == DType::f64) {
      std::memcpy(out.mutable_data<double>() + i * inner, x.data<double>() + rows[i] * inner,
                  inner * 8);
    } else {
      std::memcpy(out.mutable_data<float>() + i * inner, x.data<float>() + rows[i] * inner,
                  inner * 4);
    }
  }
  check_finite(out, "gather_rows");
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    std::vector<size_t> idx(rows.begin(), rows.end());
    Tape::current()->record(out.id(), [x, out, idx, inner](Tape& t) {
      const Tensor& go = t.grad(out.id());
      Tensor gi = Tensor::zeros(x.shape(), x.dtype());
      for (size_t i = 0; i < idx.size(); ++i) {
        if (x.dtype() == DType::f64) {
          double* dst = gi.mutable_data<double>() + idx[i] * inner;
          const double* src = go.data<double>() + i * inner;
          for (size_t j = 0; j < inner; ++j) dst[j] += src[j];
        } else {
          float* dst = gi.mutable_data<float>() + idx[i] * inner;
          const float* src = go.data<float>() + i * inner;
          for (size_t j = 0; j < inner; ++j) dst[j] += src[j];
        }
      }
      t.accumulate(x, gi);
    });
  }
  return out;
}

Tensor gather_per_row(const Tensor& x, std::span<const size_t> index) {
  TEMPO_CHECK(x.rank() >= 2, "gather_per_row: input must have rank >= 2");
  const size_t n = x.dim(0), c = x.dim(1);
  TEMPO_CHECK(index.size() == n, "gather_per_row: ", index.size(), " indices for ", n,
              " rows");
  const size_t inner = x.numel() / std::max<size_t>(n * c, 1);
  for (size_t v : index)
    TEMPO_CHECK(v < c, "gather_per_row: index ", v, " out of range ", c);
  Shape out_shape;
  out_shape.push_back(n);
  for (size_t i = 2; i < x.rank(); ++i) out_shape.push_back(x.dim(i));
  Tensor out = Tensor::zeros(out_shape, x.dtype());
  for (size_t i = 0; i < n; ++i) {
    const size_t src = (i * c + index[i]) * inner;
    if (x.dtype() == DType::f64) {
      std::memcpy(out.mutable_data<double>() + i * inner, x.data<double>() + src, inner * 8);
    } else {
      std::memcpy(out.mutable_data<float>() + i * inner, x.data<float>() + src, inner * 4);
    }
  }
  check_finite(out, "gather_per_row");
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    std::vector<size_t> idx(index.begin(), index.end());
    Tape::current()->record(out.id(), [x, out, idx, c, inner](Tape& t) {
      const Tensor& go = t.grad(out.id());
      Tensor gi = Tensor::zeros(x.shape(), x.dtype());
      for (size_t i = 0; i < idx.size(); ++i) {
        const size_t dst = (i * c + idx[i]) * inner;
        if (x.dtype() == DType::f64) {
          double* d = gi.mutable_data<double>() + dst;
          const double* s = go.data<double>() + i * inner;
          for (size_t j = 0; j < inner; ++j) d[j] += s[j];
        } else {
          float* d = gi.mutable_data<float>() + dst;
          const float* s = go.data<float>() + i * inner;
          for (size_t j = 0; j < inner; ++j) d[j] += s[j];
        }
      }
      t.accumulate(x, gi);
    });
  }
  return out;
}

Tensor stack_rows(std::span<const Tensor> parts) {
  TEMPO_CHECK(!parts.empty(), "stack_rows: no inputs");
  const size_t d = parts[0].numel();
  const DType dt = parts[0].dtype();
  for (const Tensor& p : parts) {
    TEMPO_CHECK(p.numel() == d, "stack_rows: element count mismatch (", p.numel(), " vs ",
                d, ")");
    TEMPO_CHECK(p.dtype() == dt, "stack_rows: dtype mismatch");
  }
  Tensor out = Tensor::zeros({parts.size(), d}, dt);
  for (size_t i = 0; i < parts.size(); ++i) {
    if (dt == DType::f64) {
      std::memcpy(out.mutable_data<double>() + i * d, parts[i].data<double>(), d * 8);
    } else {
      std::memcpy(out.mutable_data<float>() + i * d, parts[i].data<float>(), d * 4);
    }
  }
  check_finite(out, "stack_rows");
  bool any_grad = false;
  for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
  if (Tape::current() && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor> held(parts.begin(), parts.end());
    Tape::current()->record(out.id(), [held, out, d, dt](Tape& t) {
      const Tensor& go = t.grad(out.id());
      for (size_t i = 0; i < held.size(); ++i) {
        if (!held[i].requires_grad()) continue;
        Tensor gp = Tensor::zeros(held[i].shape(), dt);
        if (dt == DType::f64) {
          std::memcpy(gp.mutable_data<double>(), go.data<double>() + i * d, d * 8);
        } else {
          std::memcpy(gp.mutable_data<float>(), go.data<float>() + i * d, d * 4);
        }
        t.accumulate(held[i], gp);
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  const size_t n = x.numel();
  if (x.dtype() == DType::f64) {
    const double* p = x.data<double>();
    double* q = out.mutable_data<double>();
    for (size_t i = 0; i < n; ++i) q[i] = p[i] * factor;
  } else {
    const float* p = x.data<float>();
    float* q = out.mutable_data<float>();
    const float f = static_cast<float>(factor);
    for (size_t i = 0; i < n; ++i) q[i] = p[i] * f;
  }
  check_finite(out, "scale");
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [x, out, factor](Tape& t) {
      const Tensor& go = t.grad(out.id());
      Tensor gi = Tensor::zeros(x.shape(), x.dtype());
      const size_t n = x.numel();
      if (x.dtype() == DType::f64) {
        const double* g = go.data<double>();
        double* q = gi.mutable_data<double>();
        for (size_t i = 0; i < n; ++i) q[i] = g[i] * factor;
      } else {
        const float* g = go.data<float>();
        float* q = gi.mutable_data<float>();
        const float f = static_cast<float>(factor);
        for (size_t i = 0; i < n; ++i) q[i] = g[i] * f;
      }
      t.accumulate(x, gi);
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double total = 0;
  for (size_t i = 0; i < x.numel(); ++i) total += x.flat(i);
  Tensor out = Tensor::scalar(total, x.dtype());
  check_finite(out, "sum_all");
  if (wants_grad({&x})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [x, out](Tape& t) {
      const double g = t.grad(out.id()).flat(0);
      t.accumulate(x, Tensor::full(x.shape(), g, x.dtype()));
    });
  }
  return out;
}

Tensor smooth_l1_sum(const Tensor& pred, const Tensor& target) {
  TEMPO_CHECK(pred.shape() == target.shape(), "smooth_l1: shape mismatch ",
              shape_str(pred.shape()), " vs ", shape_str(target.shape()));
  check_same_dtype(pred, target, "smooth_l1");
  double total = 0;
  const size_t n = pred.numel();
  for (size_t i = 0; i < n; ++i) {
    const double d = pred.flat(i) - target.flat(i);
    const double a = std::fabs(d);
    total += a < 1.0 ? 0.5 * d * d : a - 0.5;
  }
  Tensor out = Tensor::scalar(total, pred.dtype());
  check_finite(out, "smooth_l1");
  if (wants_grad({&pred, &target})) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [pred, target, out, n](Tape& t) {
      const double g = t.grad(out.id()).flat(0);
      // d/dx smooth_l1 = x for |x| < 1, sign(x) otherwise (clamped to +-1).
      Tensor gp = Tensor::zeros(pred.shape(), pred.dtype());
      for (size_t i = 0; i < n; ++i) {
        const double d = pred.flat(i) - target.flat(i);
        const double slope = d > 1.0 ? 1.0 : (d < -1.0 ? -1.0 : d);
        const double v = g * slope;
        if (gp.dtype() == DType::f64) {
          gp.mutable_data<double>()[i] = v;
        } else {
          gp.mutable_data<float>()[i] = static_cast<float>(v);
        }
      }
      if (pred.requires_grad()) t.accumulate(pred, gp);
      if (target.requires_grad()) t.accumulate(target, scale(gp.detached(), -1.0));
    });
  }
  return out;
}

Tensor pad_frames_zero(const Tensor& x, size_t target_t) {
  TEMPO_CHECK(x.rank() == 4, "pad_frames_zero: input rank ", x.rank(), " != 4");
  TEMPO_CHECK(!x.requires_grad(), "pad_frames_zero: data-path helper, input must not require grad");
  const size_t c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
  TEMPO_CHECK(target_t >= t, "pad_frames_zero: target ", target_t, " < current ", t);
  if (target_t == t) return x;
  Tensor out = Tensor::zeros({c, target_t, h, w}, x.dtype());
  const size_t plane = h * w;
  for (size_t ch = 0; ch < c; ++ch) {
    if (x.dtype() == DType::f64) {
      std::memcpy(out.mutable_data<double>() + ch * target_t * plane,
                  x.data<double>() + ch * t * plane, t * plane * 8);
    } else {
      std::memcpy(out.mutable_data<float>() + ch * target_t * plane,
                  x.data<float>() + ch * t * plane, t * plane * 4);
    }
  }
  return out;
}

}  // namespace tempo

#include "tempo/roi3d.hpp"

#include <cmath>
#include <vector>

#include "tempo/ops.hpp"
#include "tempo/tape.hpp"

namespace tempo {
namespace {

// Bin boundaries round(k * extent / bins) shifted by base; an empty bin is
// replaced by its nearest cell inside [base, base+extent).
void bin_ranges(long base, long extent, size_t bins, std::vector<long>& lo,
                std::vector<long>& hi) {
  lo.resize(bins);
  hi.resize(bins);
  for (size_t k = 0; k < bins; ++k) {
    long b0 = base + std::lround(static_cast<double>(k) * extent / bins);
    long b1 = base + std::lround(static_cast<double>(k + 1) * extent / bins);
    if (b1 <= b0) {
      const long cell = std::min(std::max(b0, base), base + extent - 1);
      b0 = cell;
      b1 = cell + 1;
    }
    lo[k] = b0;
    hi[k] = b1;
  }
}

}  // namespace

Tensor roi_pool_3d(const Tensor& feat, const Segment& proposal_frames, const RoiGrid& grid,
                   size_t temporal_stride) {
  TEMPO_CHECK(feat.rank() == 4, "roi_pool: features rank ", feat.rank(), " != 4");
  grid.validate();
  TEMPO_CHECK(proposal_frames.length > 0, "roi_pool: proposal length must be positive");
  const long c = static_cast<long>(feat.dim(0));
  const long t_ext = static_cast<long>(feat.dim(1));
  const long h_ext = static_cast<long>(feat.dim(2));
  const long w_ext = static_cast<long>(feat.dim(3));

  const double fs = proposal_frames.start() / static_cast<double>(temporal_stride);
  const double fe = proposal_frames.end() / static_cast<double>(temporal_stride);
  long t0 = static_cast<long>(std::floor(fs));
  long t1 = static_cast<long>(std::ceil(fe));
  t0 = std::max(0L, t0);
  t1 = std::min(t_ext, t1);
  TEMPO_CHECK(t1 > t0, "roi_pool: proposal [", proposal_frames.start(), ",",
              proposal_frames.end(), ") lies outside the feature extent (clip first)");

  std::vector<long> tlo, thi, hlo, hhi, wlo, whi;
  bin_ranges(t0, t1 - t0, grid.l, tlo, thi);
  bin_ranges(0, h_ext, grid.h, hlo, hhi);
  bin_ranges(0, w_ext, grid.w, wlo, whi);

  Tensor out = Tensor::zeros({feat.dim(0), grid.l, grid.h, grid.w}, feat.dtype());
  auto argmax = std::make_shared<std::vector<uint32_t>>(out.numel());
  const long plane = t_ext * h_ext * w_ext;
  const long out_bins = static_cast<long>(grid.l * grid.h * grid.w);

  auto run = [&](auto tag) {
    using T = decltype(tag);
    const T* fp = feat.data<T>();
    T* op = out.mutable_data<T>();
    for (long ch = 0; ch < c; ++ch) {
      for (size_t bt = 0; bt < grid.l; ++bt) {
        for (size_t bh = 0; bh < grid.h; ++bh) {
          for (size_t bw = 0; bw < grid.w; ++bw) {
            long best_idx = -1;
            T best = 0;
            for (long t = tlo[bt]; t < thi[bt]; ++t) {
              for (long y = hlo[bh]; y < hhi[bh]; ++y) {
                for (long x = wlo[bw]; x < whi[bw]; ++x) {
                  const long idx = ch * plane + (t * h_ext + y) * w_ext + x;
                  if (best_idx < 0 || fp[idx] > best) {
                    best = fp[idx];
                    best_idx = idx;
                  }
                }
              }
            }
            const long o =
                ch * out_bins +
                static_cast<long>((bt * grid.h + bh) * grid.w + bw);
            op[o] = best;
            (*argmax)[static_cast<size_t>(o)] = static_cast<uint32_t>(best_idx);
          }
        }
      }
    }
  };
  if (feat.dtype() == DType::f64) {
    run(double{});
  } else {
    run(float{});
  }
  check_finite(out, "roi_pool_3d");

  if (Tape::current() && feat.requires_grad()) {
    out.set_requires_grad(true);
    Tape::current()->record(out.id(), [feat, out, argmax](Tape& t) {
      const Tensor& go = t.grad(out.id());
      Tensor gi = Tensor::zeros(feat.shape(), feat.dtype());
      const size_t n = out.numel();
      if (feat.dtype() == DType::f64) {
        double* g = gi.mutable_data<double>();
        const double* p = go.data<double>();
        for (size_t i = 0; i < n; ++i) g[(*argmax)[i]] += p[i];
      } else {
        float* g = gi.mutable_data<float>();
        const float* p = go.data<float>();
        for (size_t i = 0; i < n; ++i) g[(*argmax)[i]] += p[i];
      }
      t.accumulate(feat, gi);
    });
  }
  return out;
}

Tensor roi_pool_rows(const Tensor& feat, std::span<const Segment> proposals,
                     const RoiGrid& grid, size_t temporal_stride) {
  TEMPO_CHECK(!proposals.empty(), "roi_pool: no proposals to pool");
  std::vector<Tensor> rows;
  rows.reserve(proposals.size());
  for (const Segment& p : proposals) {
    rows.push_back(roi_pool_3d(feat, p, grid, temporal_stride));
  }
  return stack_rows(rows);
}

}  // namespace tempo

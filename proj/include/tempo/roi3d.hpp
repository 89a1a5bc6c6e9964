#pragma once

#include <span>

#include "tempo/geometry.hpp"
#include "tempo/tensor.hpp"

namespace tempo {

// Output bin grid of 3D RoI pooling.
struct RoiGrid {
  size_t l = 1, h = 2, w = 2;

  static RoiGrid paper() { return RoiGrid{1, 4, 4}; }
  void validate() const {
    TEMPO_CHECK(l >= 1 && h >= 1 && w >= 1, "roi grid: bins must be >= 1");
  }
};

// Pools feat [C, T, H', W'] over a temporal proposal (frame units) into
// [C, l, h, w]. The proposal maps to feature cells by dividing by
// temporal_stride, rounding outward (floor start, ceil end) and clamping to
// [0, T]; the resulting span must be at least one cell. Bin boundaries are
// round(k * extent / bins); an empty bin borrows its nearest in-span cell.
// Each bin is max pooled; gradients route to the recorded argmax cells.
Tensor roi_pool_3d(const Tensor& feat, const Segment& proposal_frames, const RoiGrid& grid,
                   size_t temporal_stride = 8);

// Pools each proposal and stacks the results as rows of [N, C*l*h*w].
Tensor roi_pool_rows(const Tensor& feat, std::span<const Segment> proposals,
                     const RoiGrid& grid, size_t temporal_stride = 8);

}  // namespace tempo

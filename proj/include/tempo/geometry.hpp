#pragma once

#include <optional>
#include <span>
#include <vector>

#include "tempo/error.hpp"

namespace tempo {

// Temporal interval in frame units (real-valued, half-open on the real line).
struct Segment {
  double center = 0.0;
  double length = 0.0;

  static Segment from_range(double start, double end) {
    TEMPO_CHECK(end > start, "segment: end ", end, " <= start ", start);
    return Segment{0.5 * (start + end), end - start};
  }

  double start() const { return center - 0.5 * length; }
  double end() const { return center + 0.5 * length; }
};

// Dimensionless regression offsets: center shift over anchor length and log
// length ratio.
struct Offset {
  double dc = 0.0;
  double dl = 0.0;
};

// Multiscale anchor layout over the temporally downsampled feature grid.
struct AnchorConfig {
  std::vector<int> scales;    // feature-map units, strictly increasing
  int temporal_stride = 8;    // input frames per feature step
  double fps = 25.0;          // for reporting only

  void validate() const;
  double scale_duration_sec(int scale) const {
    return static_cast<double>(scale) * temporal_stride / fps;
  }
};

struct ScoredSegment {
  Segment seg;
  double score = 0.0;
  int label = -1;  // -1 = class-agnostic proposal
};

// One anchor per (location, scale): K anchors at each of num_frames/stride
// locations, centered at (i + 0.5) * stride with length scale * stride.
// Anchors are emitted location-major, scale-minor.
std::vector<Segment> generate_anchors(const AnchorConfig& cfg, size_t num_frames);

// Intersection over union of two intervals on the real line.
double tiou(const Segment& a, const Segment& b);

// dc = (gt.center - anchor.center) / anchor.length, dl = log(gt.length /
// anchor.length).
Offset encode(const Segment& anchor, const Segment& gt);

// Inverse of encode. dl is clamped to [-max_dl, max_dl] before exp so an
// untrained regressor cannot overflow.
Segment decode(const Segment& anchor, const Offset& off, double max_dl = 10.0);

// Clamps to [0, num_frames]; nullopt when nothing of positive length is left.
std::optional<Segment> clip(const Segment& seg, double num_frames);

// Greedy NMS: repeatedly keep the highest-score item (ties to the lower
// original index) and suppress remaining items with tIoU > threshold.
std::vector<size_t> nms_indices(std::span<const ScoredSegment> items, double threshold);
std::vector<ScoredSegment> nms(std::span<const ScoredSegment> items, double threshold);

}  // namespace tempo

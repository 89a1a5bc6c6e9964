#include "tempo/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace tempo {

void AnchorConfig::validate() const {
  TEMPO_CHECK(!scales.empty(), "anchors: at least one scale required");
  TEMPO_CHECK(temporal_stride >= 1, "anchors: temporal stride must be >= 1");
  TEMPO_CHECK(fps > 0, "anchors: fps must be positive");
  for (size_t i = 0; i < scales.size(); ++i) {
    TEMPO_CHECK(scales[i] >= 1, "anchors: scale ", scales[i], " must be positive");
    if (i) {
      TEMPO_CHECK(scales[i] > scales[i - 1], "anchors: scales must be strictly increasing");
    }
  }
}

std::vector<Segment> generate_anchors(const AnchorConfig& cfg, size_t num_frames) {
  cfg.validate();
  const size_t stride = static_cast<size_t>(cfg.temporal_stride);
  TEMPO_CHECK(num_frames % stride == 0, "anchors: frame count ", num_frames,
              " not divisible by temporal stride ", stride);
  const size_t locations = num_frames / stride;
  std::vector<Segment> out;
  out.reserve(locations * cfg.scales.size());
  for (size_t i = 0; i < locations; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * static_cast<double>(stride);
    for (int s : cfg.scales) {
      out.push_back(Segment{center, static_cast<double>(s) * static_cast<double>(stride)});
    }
  }
  return out;
}

double tiou(const Segment& a, const Segment& b) {
  const double inter =
      std::max(0.0, std::min(a.end(), b.end()) - std::max(a.start(), b.start()));
  if (inter <= 0.0) return 0.0;
  const double uni = a.length + b.length - inter;
  return inter / uni;
}

Offset encode(const Segment& anchor, const Segment& gt) {
  TEMPO_CHECK(anchor.length > 0, "encode: anchor length ", anchor.length,
              " must be positive");
  TEMPO_CHECK(gt.length > 0, "encode: ground-truth length ", gt.length,
              " must be positive");
  return Offset{(gt.center - anchor.center) / anchor.length,
                std::log(gt.length / anchor.length)};
}

Segment decode(const Segment& anchor, const Offset& off, double max_dl) {
  const double dl = std::clamp(off.dl, -max_dl, max_dl);
  return Segment{anchor.center + off.dc * anchor.length, anchor.length * std::exp(dl)};
}

std::optional<Segment> clip(const Segment& seg, double num_frames) {
  const double s = std::max(0.0, seg.start());
  const double e = std::min(num_frames, seg.end());
  if (e - s <= 0.0) return std::nullopt;
  return Segment{0.5 * (s + e), e - s};
}

std::vector<size_t> nms_indices(std::span<const ScoredSegment> items, double threshold) {
  TEMPO_CHECK(threshold >= 0.0 && threshold <= 1.0, "nms: threshold ", threshold,
              " outside [0,1]");
  std::vector<size_t> order(items.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return items[a].score > items[b].score;  // stable: ties keep lower index first
  });
  std::vector<char> alive(items.size(), 1);
  std::vector<size_t> kept;
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const size_t i = order[oi];
    if (!alive[i]) continue;
    kept.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const size_t j = order[oj];
      if (alive[j] && tiou(items[i].seg, items[j].seg) > threshold) alive[j] = 0;
    }
  }
  return kept;
}

std::vector<ScoredSegment> nms(std::span<const ScoredSegment> items, double threshold) {
  std::vector<ScoredSegment> out;
  for (size_t i : nms_indices(items, threshold)) out.push_back(items[i]);
  return out;
}

}  // namespace tempo

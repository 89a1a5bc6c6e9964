#pragma once

#include <span>

#include "tempo/geometry.hpp"
#include "tempo/params.hpp"
#include "tempo/rng.hpp"

namespace tempo {

// Temporal proposal head: a 3x3x3 conv, a spatial collapse pool, and two
// 1x1x1 convs emitting 2K score logits and 2K offsets per temporal location.
struct ProposalHead {
  ParamStore params;  // tpn.weight/bias, score.weight/bias, offset.weight/bias
  size_t k = 0;       // anchor scales per location
};

// Score and offset layers start at zero so an untrained head scores every
// anchor 0.5 and proposes the anchors themselves.
ProposalHead init_proposal_head(size_t in_channels, size_t mid_channels, size_t k,
                                Rng& rng, DType dtype);

// [C, T, H', W'] -> [C_mid, T, 1, 1]: 3x3x3 conv (pad 1), then max pool with
// kernel (1, H', W').
Tensor tpn_features(const ProposalHead& head, const Tensor& c5);

struct ProposalPredictions {
  Tensor scores;   // [T, K, 2] logits, last axis {background, activity}
  Tensor offsets;  // [T, K, 2] (dc, dl)
};
ProposalPredictions predict(const ProposalHead& head, const Tensor& tpn);

enum class AnchorLabel : int8_t { ignore = -1, negative = 0, positive = 1 };

struct AnchorLabeling {
  std::vector<AnchorLabel> labels;
  std::vector<Offset> targets;  // valid where positive

  std::vector<size_t> indices_of(AnchorLabel which) const;
};

// Positive: tIoU > pos_thresh with some ground truth, or highest-tIoU anchor
// of some ground truth (ties to the lower anchor index). Negative: best tIoU
// < neg_thresh and not positive. Anything else is held out. Positives regress
// toward their own highest-tIoU ground truth.
AnchorLabeling assign_anchor_labels(std::span<const Segment> anchors,
                                    std::span<const Segment> gts,
                                    double pos_thresh = 0.7, double neg_thresh = 0.3);

struct SampledBatch {
  std::vector<size_t> indices;  // positives first, then negatives
  size_t num_positive = 0;
  bool short_batch = false;  // not enough candidates to fill the batch
};

// Up to batch*pos_frac positives without replacement, remainder filled with
// negatives; a positive shortfall is filled with extra negatives.
SampledBatch sample_balanced(std::span<const size_t> positives,
                             std::span<const size_t> negatives, size_t batch,
                             double pos_frac, Rng& rng);

SampledBatch sample_proposal_batch(const AnchorLabeling& labeling, size_t batch, Rng& rng,
                                   double pos_frac = 0.5);

}  // namespace tempo

#pragma once

#include <span>

#include "tempo/backbone.hpp"
#include "tempo/geometry.hpp"
#include "tempo/params.hpp"
#include "tempo/rng.hpp"

namespace tempo {

// Per-proposal classifier: two FC layers per stream, then a classification
// layer (C+1 logits, background first) and a regression layer (2 offsets per
// foreground class, or 2 shared when class-agnostic).
struct ClassifierHead {
  ParamStore params;  // rgb.fc1/fc2, flow.fc1/fc2 (two-stream), class.*, reg.*
  size_t num_classes = 0;  // foreground classes C
  size_t hidden = 256;
  FusionMode mode = FusionMode::single;
  bool class_agnostic_reg = false;

  size_t reg_classes() const { return class_agnostic_reg ? 1 : num_classes; }
};

ClassifierHead init_classifier_head(size_t pooled_dim, size_t hidden, size_t num_classes,
                                    FusionMode mode, bool class_agnostic_reg, Rng& rng,
                                    DType dtype);

struct ClassifierOutputs {
  Tensor class_logits;  // [N, C+1]
  Tensor offsets;       // [N, reg_classes, 2]
};

// pooled_flow must be present exactly when the head was built for a
// two-stream mode; streams fuse after their FC stacks.
ClassifierOutputs classify(const ClassifierHead& head, const Tensor& pooled_rgb,
                           const Tensor* pooled_flow = nullptr);

// NMS at nms_threshold, then the top max_n by score.
std::vector<ScoredSegment> select_proposals(std::span<const ScoredSegment> scored,
                                            size_t max_n, double nms_threshold = 0.7);

// Per-proposal class labels: the argmax-tIoU ground truth's class (1-based;
// 0 is background) iff that tIoU > fg_thresh. Foreground targets regress
// proposal -> matched ground truth.
struct ProposalLabeling {
  std::vector<int> labels;      // 0 = background, 1..C = foreground class
  std::vector<Offset> targets;  // valid where label >= 1

  std::vector<size_t> foreground_indices() const;
  std::vector<size_t> background_indices() const;
};

ProposalLabeling assign_proposal_labels(std::span<const Segment> proposals,
                                        std::span<const Segment> gts,
                                        std::span<const int> gt_labels,
                                        double fg_thresh = 0.5);

struct SampledBatch;  // proposal.hpp
SampledBatch sample_cls_batch(const ProposalLabeling& labeling, size_t batch, Rng& rng,
                              double pos_frac = 0.25);

// Read-only hard-example selection: per-proposal loss (classification plus,
// for foreground, regression) computed with the live head's weights but no
// gradient recording; returns the top_n highest-loss proposal indices in
// ascending index order. Equal losses rank by lower index.
std::vector<size_t> ohem_select(const ClassifierHead& head, const Tensor& pooled_rgb,
                                const Tensor* pooled_flow, const ProposalLabeling& labeling,
                                size_t top_n);

}  // namespace tempo

#pragma once

#include <optional>

#include "tempo/backbone.hpp"
#include "tempo/classify.hpp"
#include "tempo/dataset.hpp"
#include "tempo/proposal.hpp"
#include "tempo/roi3d.hpp"

namespace tempo {

struct ModelConfig {
  BackboneConfig backbone;  // in_channels is forced to 3 (RGB) / 2 (flow)
  FusionMode mode = FusionMode::single;
  std::vector<int> anchor_scales = {1, 2, 3, 4};
  size_t num_classes = 3;  // foreground classes
  size_t hidden = 256;
  RoiGrid roi_grid{1, 2, 2};
  bool class_agnostic_reg = false;
  DType dtype = DType::f64;
  size_t buffer_len = 96;
  size_t train_top_n = 2000;  // proposals kept for the classifier during training
  size_t infer_top_n = 300;   // proposals kept at inference
  size_t freeze_conv_layers = 0;  // first N convs of each stream stay fixed
  double fps_hint = 8.0;          // anchors' reporting fps
  std::vector<std::string> class_names;

  static constexpr int kTemporalStride = 8;

  AnchorConfig anchor_config() const {
    return AnchorConfig{anchor_scales, kTemporalStride, fps_hint};
  }
  size_t pooled_dim() const {
    return backbone.out_channels() * roi_grid.l * roi_grid.h * roi_grid.w;
  }
  void validate() const;
};

struct Model {
  ModelConfig cfg;
  ParamStore rgb_stream;
  ParamStore flow_stream;  // empty in single-stream mode
  ProposalHead prop;
  ClassifierHead cls;

  // Merged view of every parameter under stable prefixed names
  // (rgb.conv1a.weight, flow..., prop.score.weight, cls.class.bias, ...).
  // Handles are shared with the sub-stores, so tape ids line up.
  ParamStore all_params() const;
  void replace_params(const ParamStore& updated);
  void watch_all(Tape& tape) const;
};

Model init_model(const ModelConfig& cfg, uint64_t seed);
void save_model(const Model& m, const std::string& path);
Model load_model(const std::string& path);

struct StreamFeatures {
  Tensor rgb_c5;   // [C5, T/8, H/16, W/16]
  Tensor flow_c5;  // defined in two-stream modes
  Tensor fused;    // proposal-subnet input (rgb_c5 in single mode)
};

// rgb [3,L,H,W] and flow [2,L-1,H,W] buffers in the model dtype.
StreamFeatures forward_features(const Model& m, const Tensor& rgb, const Tensor* flow);

ProposalPredictions forward_proposals(const Model& m, const StreamFeatures& feats);

// Decodes every anchor with its predicted offset, scores it with the
// activity probability, clips to the buffer and drops degenerate segments.
std::vector<ScoredSegment> decode_scored_proposals(const Model& m,
                                                   const ProposalPredictions& preds,
                                                   size_t num_frames);

// Full inference. Returned segments are in frame units of the source video,
// labels are 0-based foreground classes, list is sorted by score descending.
// Final per-class NMS runs at (alpha_eval - 0.1).
std::vector<ScoredSegment> detect(const Model& m, const VideoSample& sample,
                                  double alpha_eval);

// Inference over pre-built buffers of one video (the compute core of detect;
// the bench harness times this, excluding disk I/O and buffer assembly).
std::vector<ScoredSegment> detect_buffers(const Model& m, std::span<const Buffer> buffers,
                                          double video_frames, double alpha_eval);

// Stage-1 proposals for one video (NMS 0.7, top max_per_video by score).
std::vector<ScoredSegment> detect_proposals(const Model& m, const VideoSample& sample,
                                            size_t max_per_video = 100);

}  // namespace tempo

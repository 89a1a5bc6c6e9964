#pragma once

#include <span>
#include <string>

#include "tempo/pipeline.hpp"

namespace tempo {

// Spec-level smooth L1 for offsets: sum over coordinates, mean over rows.
// Empty input yields a zero scalar.
Tensor smooth_l1(const Tensor& pred, const Tensor& target);

struct LossConfig {
  double lambda = 1.0;  // regression trade-off
};

struct JointLossParts {
  Tensor total;      // scalar, tape-connected
  double cls = 0.0;  // classification component value
  double reg = 0.0;  // weighted regression component value
};

// (1/N_cls) sum CE + lambda (1/N_reg) sum_fg smooth L1. reg_pred is [B,2]
// (the offset relevant to each row); fg_mask marks rows with a regression
// target. N_reg == 0 drops the regression term.
JointLossParts joint_loss(const Tensor& cls_logits, std::span<const int> cls_labels,
                          const Tensor& reg_pred, std::span<const Offset> reg_targets,
                          std::span<const char> fg_mask, const LossConfig& cfg);

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 0.0005;
};

struct OptimState {
  std::map<std::string, Tensor> velocity;  // keyed by parameter name
};

// v <- momentum v + (g + weight_decay w); w <- w - lr v. Parameters without
// requires_grad pass through untouched. Non-finite gradients abort the step
// naming the parameter.
ParamStore sgd_step(const ParamStore& params, const GradMap& grads, OptimState& state,
                    double lr, const SgdConfig& cfg = {});

enum class ClsSampler { sampled, ohem, full };

struct TrainConfig {
  ModelConfig model;
  size_t epochs = 10;
  double lr = 0.01;
  size_t lr_drop_epoch = 0;  // 0 = constant lr; else drop after this epoch
  double lr_after_drop = 0.001;
  SgdConfig sgd;
  LossConfig loss;
  size_t proposal_batch = 64;
  double proposal_pos_frac = 0.5;
  size_t cls_batch = 128;
  double cls_pos_frac = 0.25;
  ClsSampler sampler = ClsSampler::sampled;
  size_t ohem_top_n = 128;
  bool two_way = false;
  bool flip = false;
  uint64_t seed = 7;
  size_t checkpoint_every = 1;  // epochs between checkpoints

  void validate() const;
};

// Discrete decisions of one optimization step, frozen so the loss below is a
// differentiable function of the weights alone. Proposal segments are
// constants here: no gradient flows through segment coordinates.
struct StepPlan {
  std::vector<size_t> prop_batch;     // anchor indices (positives first)
  std::vector<int> prop_labels;       // 1 activity / 0 background, per batch row
  std::vector<size_t> prop_pos_rows;  // batch rows that are positive
  std::vector<Offset> prop_targets;   // aligned with prop_pos_rows
  std::vector<Segment> proposals;     // stage-2 candidates (buffer frame units)
  ProposalLabeling cls_labeling;      // over proposals
  std::vector<size_t> cls_batch;      // indices into proposals
};

struct StepRngs {
  Rng prop;
  Rng cls;
};

StepPlan make_step_plan(const Model& m, const StreamFeatures& feats,
                        const ProposalPredictions& preds,
                        std::span<const BufferAnnotation> gts, const TrainConfig& cfg,
                        StepRngs& rngs);

struct StepLosses {
  double prop_cls = 0, prop_reg = 0, cls_cls = 0, cls_reg = 0, total = 0;
};

// Differentiable loss of one step under an active tape.
Tensor step_loss(const Model& m, const StreamFeatures& feats,
                 const ProposalPredictions& preds, const StepPlan& plan,
                 const LossConfig& cfg, StepLosses* parts);

// One full optimization step on one buffer (forward, plan, backward, SGD).
StepLosses train_step(Model& m, const Buffer& buf, const TrainConfig& cfg, StepRngs& rngs,
                      OptimState& optim, double lr);

// Epoch loop over the manifest. Writes log.csv, per-epoch checkpoints and
// model.tnsa under out_dir; returns the trained model.
Model train(const Manifest& manifest, const TrainConfig& cfg, const std::string& out_dir);

}  // namespace tempo

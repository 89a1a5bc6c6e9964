#include "tempo/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "tempo/ops.hpp"

namespace fs = std::filesystem;

namespace tempo {

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  TEMPO_CHECK(pred.shape() == target.shape(), "smooth_l1: shape mismatch");
  if (pred.numel() == 0 || pred.dim(0) == 0) return Tensor::scalar(0.0, pred.dtype());
  return scale(smooth_l1_sum(pred, target), 1.0 / static_cast<double>(pred.dim(0)));
}

namespace {

Tensor offsets_to_tensor(std::span<const Offset> offs, DType dtype) {
  Tensor t = Tensor::zeros({offs.size(), 2}, dtype);
  for (size_t i = 0; i < offs.size(); ++i) {
    if (dtype == DType::f64) {
      t.mutable_data<double>()[i * 2 + 0] = offs[i].dc;
      t.mutable_data<double>()[i * 2 + 1] = offs[i].dl;
    } else {
      t.mutable_data<float>()[i * 2 + 0] = static_cast<float>(offs[i].dc);
      t.mutable_data<float>()[i * 2 + 1] = static_cast<float>(offs[i].dl);
    }
  }
  return t;
}

}  // namespace

JointLossParts joint_loss(const Tensor& cls_logits, std::span<const int> cls_labels,
                          const Tensor& reg_pred, std::span<const Offset> reg_targets,
                          std::span<const char> fg_mask, const LossConfig& cfg) {
  TEMPO_CHECK(cfg.lambda >= 0, "loss: lambda must be non-negative");
  TEMPO_CHECK(fg_mask.size() == cls_labels.size(), "loss: fg mask size mismatch");
  JointLossParts out;
  Tensor ce = softmax_cross_entropy(cls_logits, cls_labels);
  out.cls = ce.item();
  std::vector<size_t> fg_rows;
  for (size_t i = 0; i < fg_mask.size(); ++i) {
    if (fg_mask[i]) fg_rows.push_back(i);
  }
  if (fg_rows.empty()) {
    out.total = ce;
    return out;
  }
  TEMPO_CHECK(reg_targets.size() == fg_rows.size(), "loss: ", reg_targets.size(),
              " regression targets for ", fg_rows.size(), " foreground rows");
  Tensor fg_pred = gather_rows(reg_pred, fg_rows);
  Tensor target = offsets_to_tensor(reg_targets, reg_pred.dtype());
  Tensor reg = scale(smooth_l1_sum(fg_pred, target),
                     cfg.lambda / static_cast<double>(fg_rows.size()));
  out.reg = reg.item();
  out.total = elementwise_sum(ce, reg);
  return out;
}

ParamStore sgd_step(const ParamStore& params, const GradMap& grads, OptimState& state,
                    double lr, const SgdConfig& cfg) {
  ParamStore out;
  for (const auto& [name, w] : params.items) {
    if (!w.requires_grad()) {
      out.put(name, w);
      continue;
    }
    const Tensor& g = grads.for_param(w);
    if (!g.all_finite()) {
      fail("sgd: non-finite gradient for '", name, "' (max |g| so far ", g.max_abs(), ")");
    }
    auto vel_it = state.velocity.find(name);
    Tensor vel = vel_it != state.velocity.end() ? vel_it->second
                                                : Tensor::zeros(w.shape(), w.dtype());
    TEMPO_CHECK(vel.shape() == w.shape(), "sgd: velocity shape drift for '", name, "'");
    Tensor new_w = Tensor::zeros(w.shape(), w.dtype());
    Tensor new_v = Tensor::zeros(w.shape(), w.dtype());
    const size_t n = w.numel();
    if (w.dtype() == DType::f64) {
      const double* wp = w.data<double>();
      const double* gp = g.data<double>();
      const double* vp = vel.data<double>();
      double* nw = new_w.mutable_data<double>();
      double* nv = new_v.mutable_data<double>();
      for (size_t i = 0; i < n; ++i) {
        nv[i] = cfg.momentum * vp[i] + (gp[i] + cfg.weight_decay * wp[i]);
        nw[i] = wp[i] - lr * nv[i];
      }
    } else {
      const float* wp = w.data<float>();
      const float* gp = g.data<float>();
      const float* vp = vel.data<float>();
      float* nw = new_w.mutable_data<float>();
      float* nv = new_v.mutable_data<float>();
      const float mom = static_cast<float>(cfg.momentum);
      const float wd = static_cast<float>(cfg.weight_decay);
      const float flr = static_cast<float>(lr);
      for (size_t i = 0; i < n; ++i) {
        nv[i] = mom * vp[i] + (gp[i] + wd * wp[i]);
        nw[i] = wp[i] - flr * nv[i];
      }
    }
    state.velocity[name] = new_v;
    new_w.set_requires_grad(true);
    out.put(name, new_w);
  }
  return out;
}

void TrainConfig::validate() const {
  model.validate();
  TEMPO_CHECK(epochs >= 1, "train: epochs must be >= 1");
  TEMPO_CHECK(lr > 0, "train: learning rate must be positive");
  TEMPO_CHECK(proposal_batch >= 2 && proposal_batch % 2 == 0,
              "train: proposal batch must be even and >= 2");
  TEMPO_CHECK(cls_batch >= 1, "train: classifier batch must be >= 1");
  TEMPO_CHECK(ohem_top_n >= 1, "train: ohem top_n must be >= 1");
  TEMPO_CHECK(loss.lambda > 0, "train: lambda must be positive");
}

StepPlan make_step_plan(const Model& m, const StreamFeatures& feats,
                        const ProposalPredictions& preds,
                        std::span<const BufferAnnotation> gts, const TrainConfig& cfg,
                        StepRngs& rngs) {
  StepPlan plan;
  std::vector<Segment> gt_segs;
  std::vector<int> gt_labels;
  for (const BufferAnnotation& a : gts) {
    gt_segs.push_back(a.seg);
    gt_labels.push_back(a.label);
  }

  // Stage 1: anchor labels and the balanced score batch.
  const std::vector<Segment> anchors =
      generate_anchors(m.cfg.anchor_config(), m.cfg.buffer_len);
  const AnchorLabeling labeling = assign_anchor_labels(anchors, gt_segs);
  const SampledBatch sampled =
      sample_proposal_batch(labeling, cfg.proposal_batch, rngs.prop, cfg.proposal_pos_frac);
  plan.prop_batch = sampled.indices;
  plan.prop_labels.assign(sampled.indices.size(), 0);
  for (size_t i = 0; i < sampled.num_positive; ++i) {
    plan.prop_labels[i] = 1;
    plan.prop_pos_rows.push_back(i);
    plan.prop_targets.push_back(labeling.targets[sampled.indices[i]]);
  }

  // Stage 2: decode, clip, NMS, label.
  const std::vector<ScoredSegment> scored =
      decode_scored_proposals(m, preds, m.cfg.buffer_len);
  const std::vector<ScoredSegment> selected =
      select_proposals(scored, m.cfg.train_top_n, 0.7);
  for (const ScoredSegment& s : selected) plan.proposals.push_back(s.seg);
  plan.cls_labeling = assign_proposal_labels(plan.proposals, gt_segs, gt_labels);

  if (plan.proposals.empty()) return plan;
  switch (cfg.sampler) {
    case ClsSampler::sampled:
      plan.cls_batch =
          sample_cls_batch(plan.cls_labeling, cfg.cls_batch, rngs.cls, cfg.cls_pos_frac)
              .indices;
      break;
    case ClsSampler::full:
      plan.cls_batch.resize(plan.proposals.size());
      std::iota(plan.cls_batch.begin(), plan.cls_batch.end(), size_t{0});
      break;
    case ClsSampler::ohem: {
      // Read-only scoring pass over every candidate proposal.
      Tape::Pause no_recording;
      Tensor pooled_rgb =
          roi_pool_rows(feats.rgb_c5.detached(), plan.proposals, m.cfg.roi_grid);
      Tensor pooled_flow;
      const Tensor* flow_ptr = nullptr;
      if (m.cfg.mode != FusionMode::single) {
        pooled_flow = roi_pool_rows(feats.flow_c5.detached(), plan.proposals, m.cfg.roi_grid);
        flow_ptr = &pooled_flow;
      }
      plan.cls_batch =
          ohem_select(m.cls, pooled_rgb, flow_ptr, plan.cls_labeling, cfg.ohem_top_n);
      break;
    }
  }
  return plan;
}

Tensor step_loss(const Model& m, const StreamFeatures& feats,
                 const ProposalPredictions& preds, const StepPlan& plan,
                 const LossConfig& cfg, StepLosses* parts) {
  StepLosses out;
  const size_t tk = preds.scores.dim(0) * preds.scores.dim(1);
  Tensor total;

  if (!plan.prop_batch.empty()) {
    Tensor flat_scores = reshape(preds.scores, {tk, 2});
    Tensor batch_logits = gather_rows(flat_scores, plan.prop_batch);
    std::vector<char> fg_mask(plan.prop_batch.size(), 0);
    for (size_t row : plan.prop_pos_rows) fg_mask[row] = 1;
    Tensor flat_offsets = reshape(preds.offsets, {tk, 2});
    Tensor batch_offsets = gather_rows(flat_offsets, plan.prop_batch);
    JointLossParts prop = joint_loss(batch_logits, plan.prop_labels, batch_offsets,
                                     plan.prop_targets, fg_mask, cfg);
    out.prop_cls = prop.cls;
    out.prop_reg = prop.reg;
    total = prop.total;
  }

  if (!plan.cls_batch.empty()) {
    std::vector<Segment> segs;
    std::vector<int> labels;
    std::vector<char> fg_mask;
    std::vector<Offset> targets;
    std::vector<size_t> reg_index;
    for (size_t idx : plan.cls_batch) {
      segs.push_back(plan.proposals[idx]);
      const int label = plan.cls_labeling.labels[idx];
      labels.push_back(label);
      fg_mask.push_back(label >= 1 ? 1 : 0);
      if (label >= 1) targets.push_back(plan.cls_labeling.targets[idx]);
      reg_index.push_back(
          label >= 1 && !m.cls.class_agnostic_reg ? static_cast<size_t>(label - 1) : 0);
    }
    Tensor pooled_rgb = roi_pool_rows(feats.rgb_c5, segs, m.cfg.roi_grid);
    Tensor pooled_flow;
    const Tensor* flow_ptr = nullptr;
    if (m.cfg.mode != FusionMode::single) {
      pooled_flow = roi_pool_rows(feats.flow_c5, segs, m.cfg.roi_grid);
      flow_ptr = &pooled_flow;
    }
    ClassifierOutputs outputs = classify(m.cls, pooled_rgb, flow_ptr);
    Tensor row_offsets = gather_per_row(outputs.offsets, reg_index);  // [B,2]
    JointLossParts cls =
        joint_loss(outputs.class_logits, labels, row_offsets, targets, fg_mask, cfg);
    out.cls_cls = cls.cls;
    out.cls_reg = cls.reg;
    total = total.defined() ? elementwise_sum(total, cls.total) : cls.total;
  }

  if (!total.defined()) total = Tensor::scalar(0.0, m.cfg.dtype);
  out.total = total.item();
  if (parts) *parts = out;
  return total;
}

StepLosses train_step(Model& m, const Buffer& buf, const TrainConfig& cfg, StepRngs& rngs,
                      OptimState& optim, double lr) {
  Tensor rgb = buf.rgb.dtype() == m.cfg.dtype ? buf.rgb : buf.rgb.astype(m.cfg.dtype);
  Tensor flow;
  const Tensor* flow_ptr = nullptr;
  if (m.cfg.mode != FusionMode::single) {
    flow = buf.flow.dtype() == m.cfg.dtype ? buf.flow : buf.flow.astype(m.cfg.dtype);
    flow_ptr = &flow;
  }

  Tape tape;
  StepLosses parts;
  GradMap grads;
  {
    Tape::Scope scope(tape);
    StreamFeatures feats = forward_features(m, rgb, flow_ptr);
    ProposalPredictions preds = forward_proposals(m, feats);
    StepPlan plan = make_step_plan(m, feats, preds, buf.annotations, cfg, rngs);
    Tensor loss = step_loss(m, feats, preds, plan, cfg.loss, &parts);
    m.watch_all(tape);
    grads = tape.backward(loss);
  }
  ParamStore updated = sgd_step(m.all_params(), grads, optim, lr, cfg.sgd);
  m.replace_params(updated);
  return parts;
}

Model train(const Manifest& manifest, const TrainConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  TEMPO_CHECK(!manifest.videos.empty(), "train: empty manifest");
  fs::create_directories(out_dir);

  // Whole corpus cached in RAM as stored (f32); buffers convert per step.
  std::vector<VideoSample> samples;
  samples.reserve(manifest.videos.size());
  for (size_t i = 0; i < manifest.videos.size(); ++i) samples.push_back(load_video(manifest, i));

  Model model = init_model(cfg.model, cfg.seed);

  Rng root(cfg.seed);
  Rng shuffle_rng = root.substream(101);
  StepRngs rngs{root.substream(102), root.substream(103)};

  // (video, buffer) iteration units; the per-video buffer count is fixed by
  // the augmentation flags.
  std::vector<std::pair<size_t, size_t>> units;
  for (size_t v = 0; v < samples.size(); ++v) {
    const size_t windows =
        (samples[v].num_frames() + cfg.model.buffer_len - 1) / cfg.model.buffer_len;
    size_t count = windows;
    if (cfg.two_way) count *= 2;
    if (cfg.flip) count *= 2;
    for (size_t b = 0; b < count; ++b) units.emplace_back(v, b);
  }

  std::ofstream log(fs::path(out_dir) / "log.csv", std::ios::trunc);
  TEMPO_CHECK(log.good(), "train: cannot open log.csv under ", out_dir);
  log << "iteration,lr,prop_cls_loss,prop_reg_loss,cls_cls_loss,cls_reg_loss,total\n";

  size_t iteration = 0;
  OptimState optim;
  for (size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr =
        (cfg.lr_drop_epoch > 0 && epoch > cfg.lr_drop_epoch) ? cfg.lr_after_drop : cfg.lr;
    std::vector<std::pair<size_t, size_t>> order = units;
    shuffle_rng.shuffle(order);
    for (const auto& [v, b] : order) {
      const std::vector<Buffer> bufs =
          build_buffers(samples[v], cfg.model.buffer_len, cfg.two_way, cfg.flip);
      const StepLosses losses = train_step(model, bufs.at(b), cfg, rngs, optim, lr);
      ++iteration;
      log << iteration << ',' << lr << ',' << losses.prop_cls << ',' << losses.prop_reg
          << ',' << losses.cls_cls << ',' << losses.cls_reg << ',' << losses.total << '\n';
    }
    log.flush();
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0) {
      save_model(model, (fs::path(out_dir) / ("ckpt_epoch" + std::to_string(epoch) + ".tnsa"))
                            .string());
    }
  }
  save_model(model, (fs::path(out_dir) / "model.tnsa").string());
  return model;
}

}  // namespace tempo

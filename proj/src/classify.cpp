#include "tempo/classify.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tempo/ops.hpp"
#include "tempo/proposal.hpp"

namespace tempo {
namespace {

Tensor init_fc_weight(size_t in_dim, size_t out_dim, Rng& rng, DType dtype) {
  Tensor w = Tensor::zeros({in_dim, out_dim}, dtype);
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim));
  for (size_t i = 0; i < w.numel(); ++i) {
    const double v = rng.uniform(-bound, bound);
    if (dtype == DType::f64) {
      w.mutable_data<double>()[i] = v;
    } else {
      w.mutable_data<float>()[i] = static_cast<float>(v);
    }
  }
  return w;
}

void put_fc_stack(ParamStore& store, const std::string& prefix, size_t in_dim,
                  size_t hidden, Rng& rng, DType dtype) {
  store.put(prefix + ".fc1.weight", init_fc_weight(in_dim, hidden, rng, dtype).with_grad());
  store.put(prefix + ".fc1.bias", Tensor::zeros({hidden}, dtype).with_grad());
  store.put(prefix + ".fc2.weight", init_fc_weight(hidden, hidden, rng, dtype).with_grad());
  store.put(prefix + ".fc2.bias", Tensor::zeros({hidden}, dtype).with_grad());
}

Tensor run_fc_stack(const ParamStore& store, const std::string& prefix, const Tensor& in) {
  Tensor h = relu(linear(in, store.at(prefix + ".fc1.weight"), store.at(prefix + ".fc1.bias")));
  return relu(linear(h, store.at(prefix + ".fc2.weight"), store.at(prefix + ".fc2.bias")));
}

}  // namespace

ClassifierHead init_classifier_head(size_t pooled_dim, size_t hidden, size_t num_classes,
                                    FusionMode mode, bool class_agnostic_reg, Rng& rng,
                                    DType dtype) {
  TEMPO_CHECK(num_classes >= 1, "classifier: need at least one foreground class");
  ClassifierHead head;
  head.num_classes = num_classes;
  head.hidden = hidden;
  head.mode = mode;
  head.class_agnostic_reg = class_agnostic_reg;
  put_fc_stack(head.params, "rgb", pooled_dim, hidden, rng, dtype);
  if (mode != FusionMode::single) put_fc_stack(head.params, "flow", pooled_dim, hidden, rng, dtype);
  const size_t fused = mode == FusionMode::two_concat ? 2 * hidden : hidden;
  // Final layers start at zero: uniform class scores, proposals kept as-is.
  head.params.put("class.weight", Tensor::zeros({fused, num_classes + 1}, dtype).with_grad());
  head.params.put("class.bias", Tensor::zeros({num_classes + 1}, dtype).with_grad());
  head.params.put("reg.weight",
                  Tensor::zeros({fused, 2 * head.reg_classes()}, dtype).with_grad());
  head.params.put("reg.bias", Tensor::zeros({2 * head.reg_classes()}, dtype).with_grad());
  return head;
}

ClassifierOutputs classify(const ClassifierHead& head, const Tensor& pooled_rgb,
                           const Tensor* pooled_flow) {
  TEMPO_CHECK(pooled_rgb.rank() == 2, "classify: pooled features must be [N,D]");
  const bool two_stream = head.mode != FusionMode::single;
  TEMPO_CHECK(two_stream == (pooled_flow != nullptr),
              "classify: flow features ", pooled_flow ? "given" : "missing",
              " for mode ", fusion_mode_name(head.mode));
  Tensor h = run_fc_stack(head.params, "rgb", pooled_rgb);
  if (two_stream) {
    Tensor hf = run_fc_stack(head.params, "flow", *pooled_flow);
    h = head.mode == FusionMode::two_sum ? elementwise_sum(h, hf) : concat_channels(h, hf);
  }
  ClassifierOutputs out;
  out.class_logits = linear(h, head.params.at("class.weight"), head.params.at("class.bias"));
  Tensor reg = linear(h, head.params.at("reg.weight"), head.params.at("reg.bias"));
  out.offsets = reshape(reg, {pooled_rgb.dim(0), head.reg_classes(), 2});
  return out;
}

std::vector<ScoredSegment> select_proposals(std::span<const ScoredSegment> scored,
                                            size_t max_n, double nms_threshold) {
  std::vector<ScoredSegment> kept = nms(scored, nms_threshold);
  if (kept.size() > max_n) kept.resize(max_n);  // nms output is score-ordered
  return kept;
}

std::vector<size_t> ProposalLabeling::foreground_indices() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] >= 1) out.push_back(i);
  return out;
}

std::vector<size_t> ProposalLabeling::background_indices() const {
  std::vector<size_t> out;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == 0) out.push_back(i);
  return out;
}

ProposalLabeling assign_proposal_labels(std::span<const Segment> proposals,
                                        std::span<const Segment> gts,
                                        std::span<const int> gt_labels, double fg_thresh) {
  TEMPO_CHECK(gts.size() == gt_labels.size(), "proposal labels: ", gts.size(),
              " segments vs ", gt_labels.size(), " labels");
  ProposalLabeling out;
  out.labels.assign(proposals.size(), 0);
  out.targets.assign(proposals.size(), Offset{});
  for (size_t i = 0; i < proposals.size(); ++i) {
    double best = 0.0;
    size_t best_j = 0;
    for (size_t j = 0; j < gts.size(); ++j) {
      const double v = tiou(proposals[i], gts[j]);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    if (!gts.empty() && best > fg_thresh) {
      out.labels[i] = gt_labels[best_j] + 1;
      out.targets[i] = encode(proposals[i], gts[best_j]);
    }
  }
  return out;
}

SampledBatch sample_cls_batch(const ProposalLabeling& labeling, size_t batch, Rng& rng,
                              double pos_frac) {
  return sample_balanced(labeling.foreground_indices(), labeling.background_indices(),
                         batch, pos_frac, rng);
}

std::vector<size_t> ohem_select(const ClassifierHead& head, const Tensor& pooled_rgb,
                                const Tensor* pooled_flow, const ProposalLabeling& labeling,
                                size_t top_n) {
  const size_t n = pooled_rgb.dim(0);
  TEMPO_CHECK(labeling.labels.size() == n, "ohem: ", labeling.labels.size(),
              " labels for ", n, " proposals");
  Tape::Pause no_recording;
  const ClassifierOutputs out = classify(head, pooled_rgb, pooled_flow);

  const size_t c1 = head.num_classes + 1;
  std::vector<double> loss(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const int label = labeling.labels[i];
    double mx = out.class_logits.flat(i * c1);
    for (size_t j = 1; j < c1; ++j) mx = std::max(mx, out.class_logits.flat(i * c1 + j));
    double z = 0;
    for (size_t j = 0; j < c1; ++j) z += std::exp(out.class_logits.flat(i * c1 + j) - mx);
    loss[i] = std::log(z) - (out.class_logits.flat(i * c1 + static_cast<size_t>(label)) - mx);
    if (label >= 1) {
      const size_t rc = head.class_agnostic_reg ? 0 : static_cast<size_t>(label - 1);
      const double dc =
          out.offsets.flat((i * head.reg_classes() + rc) * 2 + 0) - labeling.targets[i].dc;
      const double dl =
          out.offsets.flat((i * head.reg_classes() + rc) * 2 + 1) - labeling.targets[i].dl;
      for (double d : {dc, dl}) {
        const double a = std::fabs(d);
        loss[i] += a < 1.0 ? 0.5 * d * d : a - 0.5;
      }
    }
  }

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return loss[a] > loss[b]; });
  if (order.size() > top_n) order.resize(top_n);
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace tempo

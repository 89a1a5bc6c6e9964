#include "tempo/proposal.hpp"

#include <algorithm>
#include <cmath>

#include "tempo/ops.hpp"

namespace tempo {

ProposalHead init_proposal_head(size_t in_channels, size_t mid_channels, size_t k,
                                Rng& rng, DType dtype) {
  TEMPO_CHECK(k >= 1, "proposal head: K must be >= 1");
  ProposalHead head;
  head.k = k;
  Tensor tpn_w = Tensor::zeros({mid_channels, in_channels, 3, 3, 3}, dtype);
  const double bound = std::sqrt(6.0 / static_cast<double>(in_channels * 27));
  for (size_t i = 0; i < tpn_w.numel(); ++i) {
    const double v = rng.uniform(-bound, bound);
    if (dtype == DType::f64) {
      tpn_w.mutable_data<double>()[i] = v;
    } else {
      tpn_w.mutable_data<float>()[i] = static_cast<float>(v);
    }
  }
  head.params.put("tpn.weight", tpn_w.with_grad());
  head.params.put("tpn.bias", Tensor::zeros({mid_channels}, dtype).with_grad());
  head.params.put("score.weight",
                  Tensor::zeros({2 * k, mid_channels, 1, 1, 1}, dtype).with_grad());
  head.params.put("score.bias", Tensor::zeros({2 * k}, dtype).with_grad());
  head.params.put("offset.weight",
                  Tensor::zeros({2 * k, mid_channels, 1, 1, 1}, dtype).with_grad());
  head.params.put("offset.bias", Tensor::zeros({2 * k}, dtype).with_grad());
  return head;
}

Tensor tpn_features(const ProposalHead& head, const Tensor& c5) {
  TEMPO_CHECK(c5.rank() == 4, "tpn: features rank ", c5.rank(), " != 4");
  Tensor x = conv3d(c5, head.params.at("tpn.weight"), head.params.at("tpn.bias"),
                    {1, 1, 1}, {1, 1, 1});
  x = relu(x);
  return maxpool3d(x, {1, c5.dim(2), c5.dim(3)}, {1, 1, 1});
}

namespace {

// [2K, T, 1, 1] -> [T, K, 2]: per location, anchor k occupies channels
// (2k, 2k+1).
Tensor to_per_anchor(const Tensor& raw, size_t k) {
  const size_t t = raw.dim(1);
  Tensor flat = reshape(raw, {2 * k, t});
  const size_t axes[2] = {1, 0};
  Tensor swapped = permute(flat, axes);  // [T, 2K]
  return reshape(swapped, {t, k, 2});
}

}  // namespace

ProposalPredictions predict(const ProposalHead& head, const Tensor& tpn) {
  TEMPO_CHECK(tpn.rank() == 4 && tpn.dim(2) == 1 && tpn.dim(3) == 1,
              "predict: expected temporal-only features [C,T,1,1], got ",
              shape_str(tpn.shape()));
  const Tensor& sw = head.params.at("score.weight");
  TEMPO_CHECK(sw.dim(0) == 2 * head.k, "predict: score head emits ", sw.dim(0),
              " channels for K=", head.k);
  Tensor score_map =
      conv3d(tpn, sw, head.params.at("score.bias"), {1, 1, 1}, {0, 0, 0});
  Tensor offset_map = conv3d(tpn, head.params.at("offset.weight"),
                             head.params.at("offset.bias"), {1, 1, 1}, {0, 0, 0});
  return ProposalPredictions{to_per_anchor(score_map, head.k),
                             to_per_anchor(offset_map, head.k)};
}

std::vector<size_t> AnchorLabeling::indices_of(AnchorLabel which) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == which) out.push_back(i);
  }
  return out;
}

AnchorLabeling assign_anchor_labels(std::span<const Segment> anchors,
                                    std::span<const Segment> gts, double pos_thresh,
                                    double neg_thresh) {
  const size_t n = anchors.size(), m = gts.size();
  AnchorLabeling out;
  out.labels.assign(n, AnchorLabel::negative);
  out.targets.assign(n, Offset{});
  if (m == 0) return out;

  std::vector<double> best_iou(n, 0.0);
  std::vector<size_t> best_gt(n, 0);
  std::vector<double> gt_best_iou(m, -1.0);
  std::vector<size_t> gt_best_anchor(m, 0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < m; ++j) {
      const double v = tiou(anchors[i], gts[j]);
      if (v > best_iou[i]) {  // ties keep the lower gt index
        best_iou[i] = v;
        best_gt[i] = j;
      }
      if (v > gt_best_iou[j]) {  // ties keep the lower anchor index
        gt_best_iou[j] = v;
        gt_best_anchor[j] = i;
      }
    }
  }

  std::vector<char> forced(n, 0);
  for (size_t j = 0; j < m; ++j) forced[gt_best_anchor[j]] = 1;

  for (size_t i = 0; i < n; ++i) {
    if (best_iou[i] > pos_thresh || forced[i]) {
      out.labels[i] = AnchorLabel::positive;
      out.targets[i] = encode(anchors[i], gts[best_gt[i]]);
    } else if (best_iou[i] < neg_thresh) {
      out.labels[i] = AnchorLabel::negative;
    } else {
      out.labels[i] = AnchorLabel::ignore;
    }
  }
  return out;
}

SampledBatch sample_balanced(std::span<const size_t> positives,
                             std::span<const size_t> negatives, size_t batch,
                             double pos_frac, Rng& rng) {
  TEMPO_CHECK(batch >= 1, "sampler: batch must be >= 1");
  TEMPO_CHECK(pos_frac >= 0.0 && pos_frac <= 1.0, "sampler: pos_frac ", pos_frac,
              " outside [0,1]");
  const size_t quota = static_cast<size_t>(std::lround(pos_frac * static_cast<double>(batch)));
  const size_t take_pos = std::min(quota, positives.size());
  SampledBatch out;
  for (size_t i : rng.choose(positives.size(), take_pos)) out.indices.push_back(positives[i]);
  out.num_positive = out.indices.size();
  const size_t need = batch - out.indices.size();
  const size_t take_neg = std::min(need, negatives.size());
  for (size_t i : rng.choose(negatives.size(), take_neg)) out.indices.push_back(negatives[i]);
  out.short_batch = out.indices.size() < batch;
  return out;
}

SampledBatch sample_proposal_batch(const AnchorLabeling& labeling, size_t batch, Rng& rng,
                                   double pos_frac) {
  return sample_balanced(labeling.indices_of(AnchorLabel::positive),
                         labeling.indices_of(AnchorLabel::negative), batch, pos_frac, rng);
}

}  // namespace tempo

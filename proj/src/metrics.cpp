#include "tempo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

using nlohmann::json;

namespace tempo {

std::vector<EvalGt> gts_from_manifest(const Manifest& m) {
  std::vector<EvalGt> out;
  for (size_t v = 0; v < m.videos.size(); ++v) {
    for (const Annotation& a : m.videos[v].annotations) {
      out.push_back(EvalGt{v, a.label, Segment::from_range(a.start_sec, a.end_sec)});
    }
  }
  return out;
}

std::vector<EvalDet> dets_from_detections(std::span<const Detection> dets,
                                          const Manifest& m) {
  std::map<std::string, size_t> index;
  for (size_t v = 0; v < m.videos.size(); ++v) index[m.videos[v].id] = v;
  std::vector<EvalDet> out;
  for (const Detection& d : dets) {
    auto it = index.find(d.video_id);
    TEMPO_CHECK(it != index.end(), "eval: detection references unknown video '",
                d.video_id, "'");
    TEMPO_CHECK(d.end_sec > d.start_sec, "eval: empty detection interval in video '",
                d.video_id, "'");
    out.push_back(EvalDet{it->second, d.label,
                          Segment::from_range(d.start_sec, d.end_sec), d.score});
  }
  return out;
}

std::vector<char> match_detections(std::span<const ScoredSegment> dets,
                                   std::span<const Segment> gts, double alpha) {
  std::vector<char> matched(gts.size(), 0);
  std::vector<char> flags(dets.size(), 0);
  for (size_t i = 0; i < dets.size(); ++i) {
    double best = -1.0;
    size_t best_j = gts.size();
    for (size_t j = 0; j < gts.size(); ++j) {
      if (matched[j]) continue;
      const double v = tiou(dets[i].seg, gts[j]);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best_j < gts.size() && best >= alpha) {
      flags[i] = 1;
      matched[best_j] = 1;
    }
  }
  return flags;
}

double average_precision(std::span<const char> tp_flags, size_t num_gt) {
  if (num_gt == 0) return 0.0;
  const size_t n = tp_flags.size();
  std::vector<double> precision(n);
  size_t tp = 0;
  for (size_t k = 0; k < n; ++k) {
    if (tp_flags[k]) ++tp;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  // Interpolated precision: running max from the right.
  for (size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0.0;
  for (size_t k = 0; k < n; ++k) {
    if (tp_flags[k]) ap += precision[k];
  }
  return ap / static_cast<double>(num_gt);
}

namespace {

// Rank detections of one class by score (descending, stable) and produce the
// TP/FP flags against per-video unmatched ground-truth pools.
std::vector<char> class_flags(std::span<const EvalDet> dets, std::span<const EvalGt> gts,
                              int label, double alpha, size_t* num_gt_out) {
  std::vector<size_t> det_idx;
  for (size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].label == label) det_idx.push_back(i);
  }
  std::stable_sort(det_idx.begin(), det_idx.end(),
                   [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });

  std::map<size_t, std::vector<size_t>> gt_by_video;
  size_t num_gt = 0;
  for (size_t j = 0; j < gts.size(); ++j) {
    if (gts[j].label == label) {
      gt_by_video[gts[j].video].push_back(j);
      ++num_gt;
    }
  }
  *num_gt_out = num_gt;

  std::vector<char> matched(gts.size(), 0);
  std::vector<char> flags(det_idx.size(), 0);
  for (size_t r = 0; r < det_idx.size(); ++r) {
    const EvalDet& d = dets[det_idx[r]];
    auto it = gt_by_video.find(d.video);
    if (it == gt_by_video.end()) continue;
    double best = -1.0;
    size_t best_j = gts.size();
    for (size_t j : it->second) {
      if (matched[j]) continue;
      const double v = tiou(d.seg, gts[j].seg);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    if (best_j < gts.size() && best >= alpha) {
      flags[r] = 1;
      matched[best_j] = 1;
    }
  }
  return flags;
}

}  // namespace

double map_at(std::span<const EvalDet> dets, std::span<const EvalGt> gts, double alpha,
              size_t num_classes, std::vector<ClassAp>* per_class) {
  double sum = 0.0;
  size_t counted = 0;
  if (per_class) per_class->clear();
  for (size_t c = 0; c < num_classes; ++c) {
    size_t num_gt = 0;
    const std::vector<char> flags = class_flags(dets, gts, static_cast<int>(c), alpha,
                                                &num_gt);
    if (num_gt == 0) continue;  // classes without ground truth are excluded
    const double ap = average_precision(flags, num_gt);
    if (per_class) per_class->push_back(ClassAp{static_cast<int>(c), num_gt, ap});
    sum += ap;
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

double average_map(std::span<const EvalDet> dets, std::span<const EvalGt> gts,
                   size_t num_classes) {
  double sum = 0.0;
  for (int k = 0; k < 10; ++k) {
    const double alpha = 0.5 + 0.05 * k;
    sum += map_at(dets, gts, alpha, num_classes);
  }
  return sum / 10.0;
}

double ar_an_auc(std::span<const EvalDet> proposals, std::span<const EvalGt> gts,
                 size_t num_videos, size_t max_an) {
  TEMPO_CHECK(max_an >= 1, "auc: max_an must be >= 1");
  std::vector<std::vector<size_t>> props_by_video(num_videos);
  for (size_t i = 0; i < proposals.size(); ++i) {
    TEMPO_CHECK(proposals[i].video < num_videos, "auc: proposal video index out of range");
    props_by_video[proposals[i].video].push_back(i);
  }
  std::vector<std::vector<size_t>> gts_by_video(num_videos);
  for (size_t j = 0; j < gts.size(); ++j) {
    TEMPO_CHECK(gts[j].video < num_videos, "auc: gt video index out of range");
    gts_by_video[gts[j].video].push_back(j);
  }
  for (auto& vp : props_by_video) {
    std::stable_sort(vp.begin(), vp.end(), [&](size_t a, size_t b) {
      return proposals[a].score > proposals[b].score;
    });
    if (vp.size() > max_an) vp.resize(max_an);
  }

  // recall_at[n-1] accumulates recall over (threshold, video) pairs.
  std::vector<double> recall_sum(max_an, 0.0);
  size_t groups = 0;
  for (int k = 0; k < 10; ++k) {
    const double thr = 0.5 + 0.05 * k;
    for (size_t v = 0; v < num_videos; ++v) {
      const auto& vgts = gts_by_video[v];
      if (vgts.empty()) continue;
      ++groups;
      // Greedy in rank order; decisions for rank r do not depend on later
      // proposals, so one pass yields the match rank of every ground truth.
      std::vector<char> matched(vgts.size(), 0);
      std::vector<size_t> match_rank;  // 1-based ranks of successful matches
      const auto& vprops = props_by_video[v];
      for (size_t r = 0; r < vprops.size(); ++r) {
        const EvalDet& p = proposals[vprops[r]];
        double best = -1.0;
        size_t best_j = vgts.size();
        for (size_t jj = 0; jj < vgts.size(); ++jj) {
          if (matched[jj]) continue;
          const double ov = tiou(p.seg, gts[vgts[jj]].seg);
          if (ov > best) {
            best = ov;
            best_j = jj;
          }
        }
        if (best_j < vgts.size() && best >= thr) {
          matched[best_j] = 1;
          match_rank.push_back(r + 1);
        }
      }
      for (size_t n = 1; n <= max_an; ++n) {
        size_t hit = 0;
        for (size_t r : match_rank) {
          if (r <= n) ++hit;
        }
        recall_sum[n - 1] += static_cast<double>(hit) / static_cast<double>(vgts.size());
      }
    }
  }
  if (groups == 0) return 0.0;
  double auc = 0.0;
  for (size_t n = 0; n < max_an; ++n) auc += recall_sum[n] / static_cast<double>(groups);
  return auc / static_cast<double>(max_an);
}

double frame_level_map(std::span<const EvalDet> dets, std::span<const EvalGt> gts,
                       std::span<const double> video_durations_sec, size_t num_classes,
                       size_t num_frames, bool smooth) {
  TEMPO_CHECK(num_frames >= 1, "frame map: need at least one frame");
  const size_t num_videos = video_durations_sec.size();
  // Per video: scores[j*C+c], positives and coverage likewise. Only frames a
  // detection actually scores enter the ranking; unscored positive frames
  // count as misses through the recall denominator.
  std::vector<std::vector<double>> scores(num_videos);
  std::vector<std::vector<char>> positive(num_videos), covered(num_videos);
  std::vector<std::vector<double>> stamps(num_videos);
  for (size_t v = 0; v < num_videos; ++v) {
    scores[v].assign(num_frames * num_classes, 0.0);
    positive[v].assign(num_frames * num_classes, 0);
    covered[v].assign(num_frames * num_classes, 0);
    stamps[v].resize(num_frames);
    for (size_t j = 0; j < num_frames; ++j) {
      stamps[v][j] = (static_cast<double>(j) + 0.5) * video_durations_sec[v] /
                     static_cast<double>(num_frames);
    }
  }
  for (const EvalGt& g : gts) {
    TEMPO_CHECK(g.video < num_videos, "frame map: gt video index out of range");
    for (size_t j = 0; j < num_frames; ++j) {
      const double t = stamps[g.video][j];
      if (t >= g.seg.start() && t < g.seg.end()) {
        positive[g.video][j * num_classes + static_cast<size_t>(g.label)] = 1;
      }
    }
  }
  for (const EvalDet& d : dets) {
    TEMPO_CHECK(d.video < num_videos, "frame map: detection video index out of range");
    for (size_t j = 0; j < num_frames; ++j) {
      const double t = stamps[d.video][j];
      if (t >= d.seg.start() && t < d.seg.end()) {
        const size_t cell = j * num_classes + static_cast<size_t>(d.label);
        scores[d.video][cell] = std::max(scores[d.video][cell], d.score);
        covered[d.video][cell] = 1;
      }
    }
  }
  if (smooth) {
    // 20-frame window average of each class's score track; coverage spreads
    // with the window.
    for (size_t v = 0; v < num_videos; ++v) {
      std::vector<double> s2(scores[v].size(), 0.0);
      std::vector<char> c2(covered[v].size(), 0);
      for (size_t c = 0; c < num_classes; ++c) {
        for (size_t j = 0; j < num_frames; ++j) {
          const long lo = std::max<long>(0, static_cast<long>(j) - 9);
          const long hi = std::min<long>(static_cast<long>(num_frames) - 1,
                                         static_cast<long>(j) + 10);
          double acc = 0.0;
          char any = 0;
          for (long jj = lo; jj <= hi; ++jj) {
            acc += scores[v][jj * num_classes + c];
            any |= covered[v][jj * num_classes + c];
          }
          s2[j * num_classes + c] = acc / static_cast<double>(hi - lo + 1);
          c2[j * num_classes + c] = any;
        }
      }
      scores[v] = std::move(s2);
      covered[v] = std::move(c2);
    }
  }

  double sum = 0.0;
  size_t counted = 0;
  for (size_t c = 0; c < num_classes; ++c) {
    struct Item {
      double score;
      char pos;
    };
    std::vector<Item> items;
    size_t num_pos = 0;
    for (size_t v = 0; v < num_videos; ++v) {
      for (size_t j = 0; j < num_frames; ++j) {
        const char p = positive[v][j * num_classes + c];
        if (p) ++num_pos;
        if (covered[v][j * num_classes + c]) {
          items.push_back(Item{scores[v][j * num_classes + c], p});
        }
      }
    }
    if (num_pos == 0) continue;
    std::stable_sort(items.begin(), items.end(),
                     [](const Item& a, const Item& b) { return a.score > b.score; });
    std::vector<char> flags(items.size());
    for (size_t i = 0; i < items.size(); ++i) flags[i] = items[i].pos;
    sum += average_precision(flags, num_pos);
    ++counted;
  }
  return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

void write_metric_csv(const std::string& path, std::span<const MetricRow> rows) {
  std::ofstream f(path, std::ios::trunc);
  TEMPO_CHECK(f.good(), "metrics: cannot open ", path, " for writing");
  f << "metric,class_or_ALL,alpha,value\n";
  for (const MetricRow& r : rows) {
    f << r.metric << ',' << r.class_or_all << ',' << r.alpha << ',' << r.value << '\n';
  }
  TEMPO_CHECK(f.good(), "metrics: write failed for ", path);
}

void write_metric_json(const std::string& path, std::span<const MetricRow> rows) {
  json arr = json::array();
  for (const MetricRow& r : rows) {
    arr.push_back({{"metric", r.metric},
                   {"class", r.class_or_all},
                   {"alpha", r.alpha},
                   {"value", r.value}});
  }
  std::ofstream f(path, std::ios::trunc);
  TEMPO_CHECK(f.good(), "metrics: cannot open ", path, " for writing");
  f << arr.dump(2) << "\n";
}

}  // namespace tempo

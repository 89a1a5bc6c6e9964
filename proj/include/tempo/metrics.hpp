#pragma once

#include <span>
#include <string>
#include <vector>

#include "tempo/dataset.hpp"
#include "tempo/geometry.hpp"

namespace tempo {

// Detections and ground truths indexed by video for evaluation. Segments are
// in seconds here; the metrics only rely on interval arithmetic.
struct EvalDet {
  size_t video = 0;
  int label = 0;
  Segment seg;
  double score = 0.0;
};

struct EvalGt {
  size_t video = 0;
  int label = 0;
  Segment seg;
};

std::vector<EvalGt> gts_from_manifest(const Manifest& m);
// Maps detection video ids through the manifest; unknown ids are an error.
std::vector<EvalDet> dets_from_detections(std::span<const Detection> dets,
                                          const Manifest& m);

// Greedy one-to-one matching for one (class, video) group: detections must be
// sorted by score descending (ties by original index). A detection is TP iff
// its best-tIoU currently unmatched ground truth reaches tIoU >= alpha.
std::vector<char> match_detections(std::span<const ScoredSegment> dets,
                                   std::span<const Segment> gts, double alpha);

// All-point interpolated AP over a ranked TP/FP list: running-max precision
// from the right, summed at each TP, divided by num_gt.
double average_precision(std::span<const char> tp_flags, size_t num_gt);

struct ClassAp {
  int label = 0;
  size_t num_gt = 0;
  double ap = 0.0;
};

// Mean AP over classes with at least one ground truth.
double map_at(std::span<const EvalDet> dets, std::span<const EvalGt> gts, double alpha,
              size_t num_classes, std::vector<ClassAp>* per_class = nullptr);

// Mean of mAP@alpha over the ten thresholds 0.5, 0.55, ..., 0.95.
double average_map(std::span<const EvalDet> dets, std::span<const EvalGt> gts,
                   size_t num_classes);

// Area under average recall vs proposal count: AR(n) averages, over the ten
// tIoU thresholds and over videos with ground truth, the fraction of ground
// truths matched within the top-n proposals (greedy by rank); the AUC is the
// mean of AR(n) over n = 1..max_an. Proposal class labels are ignored.
double ar_an_auc(std::span<const EvalDet> proposals, std::span<const EvalGt> gts,
                 size_t num_videos, size_t max_an = 100);

// Charades-style frame mAP: num_frames equidistant timestamps per video
// become multi-label instances; a detection contributes its score to every
// timestamp inside its segment (max over detections per class). smooth
// averages each class's scores over a 20-frame window first.
double frame_level_map(std::span<const EvalDet> dets, std::span<const EvalGt> gts,
                       std::span<const double> video_durations_sec, size_t num_classes,
                       size_t num_frames = 25, bool smooth = false);

struct MetricRow {
  std::string metric;
  std::string class_or_all;  // class name or "ALL"
  double alpha = 0.0;        // 0 when not applicable
  double value = 0.0;
};

void write_metric_csv(const std::string& path, std::span<const MetricRow> rows);
void write_metric_json(const std::string& path, std::span<const MetricRow> rows);

}  // namespace tempo

#pragma once

#include <string>
#include <vector>

#include "tempo/geometry.hpp"
#include "tempo/rng.hpp"
#include "tempo/tensor.hpp"

namespace tempo {

struct Annotation {
  int label = 0;
  double start_sec = 0.0;
  double end_sec = 0.0;
};

// One untrimmed video held in memory: RGB in [0,1], flow in exact pixel
// displacements with temporal extent L-1.
struct VideoSample {
  std::string id;
  double fps = 8.0;
  Tensor rgb;   // [3, L, H, W]
  Tensor flow;  // [2, L-1, H, W]
  std::vector<Annotation> annotations;

  size_t num_frames() const { return rgb.dim(1); }
};

struct SynthConfig {
  size_t num_videos = 20;
  size_t first_index = 0;  // continues id/substream numbering across corpora
  int num_classes = 3;
  size_t num_frames = 96;  // L
  size_t height = 32;
  size_t width = 32;
  double fps = 8.0;
  double min_duration_sec = 1.0;
  double max_duration_sec = 4.0;
  int min_activities = 1;
  int max_activities = 3;
  bool allow_overlap = false;  // Charades-style overlapping instances
  uint64_t seed = 7;

  void validate() const;
};

// Integer per-frame displacement that identifies a class; pairwise distinct.
struct MotionSig {
  int dx = 0;
  int dy = 0;
};
MotionSig class_motion(int class_index);

struct VideoEntry {
  std::string id;
  double fps = 8.0;
  size_t num_frames = 0;
  std::string rgb_path;   // relative to the manifest directory
  std::string flow_path;
  std::vector<Annotation> annotations;
};

struct Manifest {
  std::vector<std::string> classes;
  std::vector<VideoEntry> videos;
  std::string root_dir;  // set when loaded/saved
};

// Writes <out_dir>/manifest.json plus one rgb/flow tensor file pair per video
// (f32). Reproducible: video i draws from substream seed ^ (first_index + i).
Manifest synth_generate(const SynthConfig& cfg, const std::string& out_dir);

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& m, const std::string& path);
VideoSample load_video(const Manifest& m, size_t index);

// One fixed-length network input window with frame-unit annotations.
struct BufferAnnotation {
  int label = 0;
  Segment seg;  // frame units within the buffer
};

struct Buffer {
  std::string video_id;
  Tensor rgb;   // [3, BL, H, W]
  Tensor flow;  // [2, BL-1, H, W]
  std::vector<BufferAnnotation> annotations;
};

// Short videos are padded by repeating the last frame (flow pads with zeros);
// long videos split into consecutive windows. two_way appends a temporally
// reversed pass; flip appends horizontally mirrored copies (flow dx negated).
// Annotations are clipped per buffer and dropped when the clipped segment has
// tIoU < 0.5 with the original.
std::vector<Buffer> build_buffers(const VideoSample& sample, size_t buffer_len,
                                  bool two_way, bool flip);

struct Detection {
  std::string video_id;
  int label = 0;
  double start_sec = 0.0;
  double end_sec = 0.0;
  double score = 0.0;
};

// JSON-lines, one object per detection.
void save_detections(const std::string& path, std::span<const Detection> dets);
std::vector<Detection> load_detections(const std::string& path);

}  // namespace tempo

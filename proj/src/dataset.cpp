#include "tempo/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "tempo/parallel.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tempo {

void SynthConfig::validate() const {
  TEMPO_CHECK(num_videos > 0, "synth: num_videos must be positive");
  TEMPO_CHECK(num_classes > 0, "synth: num_classes must be positive");
  TEMPO_CHECK(num_frames >= 2, "synth: num_frames must be >= 2");
  TEMPO_CHECK(height > 0 && width > 0, "synth: frame size must be positive");
  TEMPO_CHECK(fps > 0, "synth: fps must be positive");
  TEMPO_CHECK(min_duration_sec > 0 && max_duration_sec >= min_duration_sec,
              "synth: bad duration range [", min_duration_sec, ",", max_duration_sec, "]");
  TEMPO_CHECK(min_activities >= 0 && max_activities >= min_activities,
              "synth: bad activities range [", min_activities, ",", max_activities, "]");
  const double max_frames = max_duration_sec * fps;
  TEMPO_CHECK(max_frames <= static_cast<double>(num_frames),
              "synth: max duration ", max_duration_sec, "s (", max_frames,
              " frames) does not fit in ", num_frames, " frames");
  TEMPO_CHECK(min_duration_sec * fps >= 2.0,
              "synth: min duration must span at least 2 frames at ", fps, " fps");
}

MotionSig class_motion(int class_index) {
  static const int dirs[8][2] = {{1, 0},  {0, 1},  {-1, 0}, {0, -1},
                                 {1, 1},  {-1, -1}, {-1, 1}, {1, -1}};
  TEMPO_CHECK(class_index >= 0, "class_motion: negative class index");
  const int speed = 1 + class_index / 8;
  const int* d = dirs[class_index % 8];
  return MotionSig{d[0] * speed, d[1] * speed};
}

namespace {

struct Instance {
  int label;
  long f0, f1;  // frame interval [f0, f1)
  long x0, y0;  // initial block top-left
};

// Draws activity intervals for one video. Durations are redrawn until their
// sum fits; placement then distributes the slack between instances, so any
// feasible request succeeds. Infeasible requests are rejected up front.
std::vector<Instance> draw_instances(const SynthConfig& cfg, Rng& rng) {
  const long L = static_cast<long>(cfg.num_frames);
  const int count =
      cfg.min_activities +
      static_cast<int>(rng.uniform_int(
          static_cast<uint64_t>(cfg.max_activities - cfg.min_activities + 1)));
  if (count == 0) return {};

  const long min_d = std::max<long>(2, std::lround(cfg.min_duration_sec * cfg.fps));
  const long max_d = std::max(min_d, std::lround(cfg.max_duration_sec * cfg.fps));

  auto draw_duration = [&]() {
    return min_d + static_cast<long>(
                       rng.uniform_int(static_cast<uint64_t>(max_d - min_d + 1)));
  };
  auto make_instance = [&](long f0, long dur) {
    Instance inst;
    inst.label = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.num_classes)));
    inst.f0 = f0;
    inst.f1 = f0 + dur;
    inst.x0 = static_cast<long>(rng.uniform_int(cfg.width));
    inst.y0 = static_cast<long>(rng.uniform_int(cfg.height));
    return inst;
  };

  std::vector<Instance> out;
  if (cfg.allow_overlap) {
    for (int i = 0; i < count; ++i) {
      const long dur = draw_duration();
      const long start =
          static_cast<long>(rng.uniform_int(static_cast<uint64_t>(L - dur + 1)));
      out.push_back(make_instance(start, dur));
    }
    std::sort(out.begin(), out.end(),
              [](const Instance& a, const Instance& b) { return a.f0 < b.f0; });
    return out;
  }

  TEMPO_CHECK(static_cast<long>(count) * min_d <= L, "synth: cannot pack ", count,
              " activities of >= ", min_d, " frames into ", L, " frames");
  std::vector<long> durations(count);
  long total = 0;
  for (int attempt = 0;; ++attempt) {
    total = 0;
    for (int i = 0; i < count; ++i) {
      durations[i] = draw_duration();
      total += durations[i];
    }
    if (total <= L) break;
    TEMPO_CHECK(attempt < 256, "synth: could not pack ", count,
                " non-overlapping activities into ", cfg.num_frames, " frames");
  }
  // Distribute the free frames across the count+1 gaps.
  long free = L - total;
  long cursor = 0;
  for (int i = 0; i < count; ++i) {
    const long gap = static_cast<long>(rng.uniform_int(static_cast<uint64_t>(free + 1)));
    free -= gap;
    cursor += gap;
    out.push_back(make_instance(cursor, durations[i]));
    cursor += durations[i];
  }
  return out;
}

VideoSample render_video(const SynthConfig& cfg, size_t global_index) {
  Rng rng(cfg.seed ^ static_cast<uint64_t>(global_index));
  const size_t L = cfg.num_frames, H = cfg.height, W = cfg.width;

  VideoSample v;
  v.id = "vid" + std::to_string(global_index);
  v.fps = cfg.fps;
  v.rgb = Tensor::zeros({3, L, H, W}, DType::f32);
  v.flow = Tensor::zeros({2, L - 1, H, W}, DType::f32);
  float* rgb = v.rgb.mutable_data<float>();
  float* flow = v.flow.mutable_data<float>();

  // Static noise background: one texture per channel, constant over time, so
  // the only motion in the video is the rendered activity (matching the zero
  // background flow).
  const size_t plane = H * W;
  for (size_t c = 0; c < 3; ++c) {
    std::vector<float> texture(plane);
    for (size_t i = 0; i < plane; ++i) {
      texture[i] = static_cast<float>(0.05 + 0.4 * rng.uniform());
    }
    for (size_t t = 0; t < L; ++t) {
      std::copy(texture.begin(), texture.end(), rgb + (c * L + t) * plane);
    }
  }

  const std::vector<Instance> instances = draw_instances(cfg, rng);
  const long bs = static_cast<long>(std::max<size_t>(4, H / 4));  // block side

  // Each instance is a bright textured patch translating rigidly; the texture
  // rides along with the block, so every interior pixel carries the motion
  // signal, not just the edges. All classes share the texture statistics:
  // only the displacement signature separates them.
  std::vector<std::vector<float>> textures;
  for (size_t i = 0; i < instances.size(); ++i) {
    std::vector<float> tex(static_cast<size_t>(bs) * bs);
    for (float& t : tex) t = static_cast<float>(0.55 + 0.4 * rng.uniform());
    textures.push_back(std::move(tex));
  }

  // Painter's order: later instances overwrite earlier ones, for pixels and
  // for flow alike.
  for (size_t ii = 0; ii < instances.size(); ++ii) {
    const Instance& inst = instances[ii];
    const MotionSig sig = class_motion(inst.label);
    for (long f = inst.f0; f < inst.f1; ++f) {
      const long k = f - inst.f0;
      const long bx = ((inst.x0 + k * sig.dx) % static_cast<long>(W) + W) % W;
      const long by = ((inst.y0 + k * sig.dy) % static_cast<long>(H) + H) % H;
      const bool moving = f + 1 < inst.f1;  // block present in the next frame too
      for (long dy = 0; dy < bs; ++dy) {
        const long y = (by + dy) % static_cast<long>(H);
        for (long dx = 0; dx < bs; ++dx) {
          const long x = (bx + dx) % static_cast<long>(W);
          const size_t pix = static_cast<size_t>(y) * W + x;
          const float value = textures[ii][static_cast<size_t>(dy) * bs + dx];
          for (size_t c = 0; c < 3; ++c) rgb[(c * L + f) * plane + pix] = value;
          if (moving && static_cast<size_t>(f) < L - 1) {
            flow[(0 * (L - 1) + f) * plane + pix] = static_cast<float>(sig.dx);
            flow[(1 * (L - 1) + f) * plane + pix] = static_cast<float>(sig.dy);
          }
        }
      }
    }
    v.annotations.push_back(Annotation{inst.label,
                                       static_cast<double>(inst.f0) / cfg.fps,
                                       static_cast<double>(inst.f1) / cfg.fps});
  }
  return v;
}

json annotations_to_json(const std::vector<Annotation>& anns) {
  json arr = json::array();
  for (const Annotation& a : anns) {
    arr.push_back({{"label", a.label}, {"start_sec", a.start_sec}, {"end_sec", a.end_sec}});
  }
  return arr;
}

}  // namespace

Manifest synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  // The class signatures must stay pairwise distinguishable.
  for (int a = 0; a < cfg.num_classes; ++a) {
    for (int b = a + 1; b < cfg.num_classes; ++b) {
      const MotionSig sa = class_motion(a), sb = class_motion(b);
      TEMPO_CHECK(sa.dx != sb.dx || sa.dy != sb.dy,
                  "synth: classes ", a, " and ", b, " share a motion signature");
    }
  }
  fs::create_directories(out_dir);

  Manifest m;
  m.root_dir = out_dir;
  for (int c = 0; c < cfg.num_classes; ++c) m.classes.push_back("class_" + std::to_string(c));
  m.videos.resize(cfg.num_videos);

  parallel_for(cfg.num_videos, [&](size_t lo, size_t hi) {
    for (size_t i = lo; i < hi; ++i) {
      const size_t gi = cfg.first_index + i;
      VideoSample v = render_video(cfg, gi);
      VideoEntry e;
      e.id = v.id;
      e.fps = v.fps;
      e.num_frames = v.num_frames();
      e.rgb_path = v.id + ".rgb.tnsr";
      e.flow_path = v.id + ".flow.tnsr";
      e.annotations = v.annotations;
      save_tensor(v.rgb, (fs::path(out_dir) / e.rgb_path).string());
      save_tensor(v.flow, (fs::path(out_dir) / e.flow_path).string());
      m.videos[i] = std::move(e);
    }
  });

  save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
  return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
  json root;
  root["classes"] = m.classes;
  json vids = json::array();
  for (const VideoEntry& e : m.videos) {
    vids.push_back({{"id", e.id},
                    {"fps", e.fps},
                    {"num_frames", e.num_frames},
                    {"rgb_path", e.rgb_path},
                    {"flow_path", e.flow_path},
                    {"annotations", annotations_to_json(e.annotations)}});
  }
  root["videos"] = vids;
  std::ofstream f(path, std::ios::trunc);
  TEMPO_CHECK(f.good(), "manifest: cannot open ", path, " for writing");
  f << root.dump(2) << "\n";
}

Manifest load_manifest(const std::string& path) {
  std::ifstream f(path);
  TEMPO_CHECK(f.good(), "manifest: cannot open ", path);
  json root;
  try {
    f >> root;
  } catch (const json::exception& e) {
    fail("manifest: malformed JSON in ", path, ": ", e.what());
  }
  Manifest m;
  m.root_dir = fs::path(path).parent_path().string();
  try {
    m.classes = root.at("classes").get<std::vector<std::string>>();
    for (const json& jv : root.at("videos")) {
      VideoEntry e;
      e.id = jv.at("id").get<std::string>();
      e.fps = jv.at("fps").get<double>();
      e.num_frames = jv.at("num_frames").get<size_t>();
      e.rgb_path = jv.at("rgb_path").get<std::string>();
      e.flow_path = jv.at("flow_path").get<std::string>();
      for (const json& ja : jv.at("annotations")) {
        Annotation a;
        a.label = ja.at("label").get<int>();
        a.start_sec = ja.at("start_sec").get<double>();
        a.end_sec = ja.at("end_sec").get<double>();
        TEMPO_CHECK(a.start_sec >= 0 && a.start_sec < a.end_sec,
                    "manifest: bad annotation interval [", a.start_sec, ",", a.end_sec,
                    ") in video ", e.id);
        TEMPO_CHECK(a.label >= 0 && static_cast<size_t>(a.label) < m.classes.size(),
                    "manifest: label ", a.label, " out of range in video ", e.id);
        e.annotations.push_back(a);
      }
      m.videos.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    fail("manifest: missing or mistyped field in ", path, ": ", e.what());
  }
  return m;
}

VideoSample load_video(const Manifest& m, size_t index) {
  TEMPO_CHECK(index < m.videos.size(), "manifest: video index ", index, " out of range ",
              m.videos.size());
  const VideoEntry& e = m.videos[index];
  VideoSample v;
  v.id = e.id;
  v.fps = e.fps;
  v.annotations = e.annotations;
  const fs::path root(m.root_dir);
  const std::string rgb_file = (root / e.rgb_path).string();
  const std::string flow_file = (root / e.flow_path).string();
  TEMPO_CHECK(fs::exists(rgb_file), "manifest: tensor file ", rgb_file, " is missing");
  TEMPO_CHECK(fs::exists(flow_file), "manifest: tensor file ", flow_file, " is missing");
  v.rgb = load_tensor(rgb_file);
  v.flow = load_tensor(flow_file);
  TEMPO_CHECK(v.rgb.rank() == 4 && v.rgb.dim(0) == 3, "manifest: ", rgb_file,
              " is not a [3,L,H,W] tensor");
  TEMPO_CHECK(v.flow.rank() == 4 && v.flow.dim(0) == 2, "manifest: ", flow_file,
              " is not a [2,L-1,H,W] tensor");
  TEMPO_CHECK(v.flow.dim(1) + 1 == v.rgb.dim(1), "manifest: flow extent ", v.flow.dim(1),
              " != L-1 for video ", e.id);
  TEMPO_CHECK(v.rgb.dim(1) == e.num_frames, "manifest: video ", e.id, " declares ",
              e.num_frames, " frames but tensor has ", v.rgb.dim(1));
  return v;
}

namespace {

// Copies frame t_src of every channel of src into frame t_dst of dst.
void copy_frame(const Tensor& src, Tensor& dst, size_t t_src, size_t t_dst) {
  const size_t c = src.dim(0), plane = src.dim(2) * src.dim(3);
  const size_t ts = src.dim(1), td = dst.dim(1);
  for (size_t ch = 0; ch < c; ++ch) {
    std::memcpy(dst.mutable_data<float>() + (ch * td + t_dst) * plane,
                src.data<float>() + (ch * ts + t_src) * plane, plane * sizeof(float));
  }
}

VideoSample reverse_sample(const VideoSample& v) {
  const size_t L = v.num_frames();
  VideoSample r;
  r.id = v.id;
  r.fps = v.fps;
  r.rgb = Tensor::zeros(v.rgb.shape(), DType::f32);
  r.flow = Tensor::zeros(v.flow.shape(), DType::f32);
  for (size_t t = 0; t < L; ++t) copy_frame(v.rgb, r.rgb, L - 1 - t, t);
  // Reversed-time flow: displacement between reversed frames (t, t+1) is the
  // negated forward flow at L-2-t.
  const size_t plane = v.flow.dim(2) * v.flow.dim(3);
  const float* src = v.flow.data<float>();
  float* dst = r.flow.mutable_data<float>();
  for (size_t c = 0; c < 2; ++c) {
    for (size_t t = 0; t + 1 < L; ++t) {
      const float* s = src + (c * (L - 1) + (L - 2 - t)) * plane;
      float* d = dst + (c * (L - 1) + t) * plane;
      for (size_t i = 0; i < plane; ++i) d[i] = -s[i];
    }
  }
  const double total = static_cast<double>(L) / v.fps;
  for (const Annotation& a : v.annotations) {
    r.annotations.push_back(Annotation{a.label, total - a.end_sec, total - a.start_sec});
  }
  return r;
}

Buffer mirror_buffer(const Buffer& b) {
  Buffer m;
  m.video_id = b.video_id;
  m.annotations = b.annotations;
  m.rgb = Tensor::zeros(b.rgb.shape(), DType::f32);
  m.flow = Tensor::zeros(b.flow.shape(), DType::f32);
  const size_t h = b.rgb.dim(2), w = b.rgb.dim(3);
  auto mirror = [&](const Tensor& src, Tensor& dst, bool negate_ch0) {
    const size_t c = src.dim(0), t = src.dim(1);
    const float* s = src.data<float>();
    float* d = dst.mutable_data<float>();
    for (size_t ch = 0; ch < c; ++ch) {
      const float sign = (negate_ch0 && ch == 0) ? -1.0f : 1.0f;
      for (size_t f = 0; f < t; ++f) {
        for (size_t y = 0; y < h; ++y) {
          const size_t base = ((ch * t + f) * h + y) * w;
          for (size_t x = 0; x < w; ++x) d[base + x] = sign * s[base + (w - 1 - x)];
        }
      }
    }
  };
  mirror(b.rgb, m.rgb, false);
  mirror(b.flow, m.flow, true);  // horizontal displacement changes sign
  return m;
}

void append_windows(const VideoSample& v, size_t buffer_len, std::vector<Buffer>& out) {
  const size_t L = v.num_frames();
  const size_t H = v.rgb.dim(2), W = v.rgb.dim(3);
  const size_t plane = H * W;
  const size_t windows = (L + buffer_len - 1) / buffer_len;
  for (size_t wnd = 0; wnd < windows; ++wnd) {
    const size_t ws = wnd * buffer_len;
    const size_t avail = std::min(buffer_len, L - ws);
    Buffer b;
    b.video_id = v.id;
    b.rgb = Tensor::zeros({3, buffer_len, H, W}, DType::f32);
    b.flow = Tensor::zeros({2, buffer_len - 1, H, W}, DType::f32);
    for (size_t t = 0; t < buffer_len; ++t) {
      const size_t src = ws + std::min(t, avail - 1);  // repeat last frame
      copy_frame(v.rgb, b.rgb, src, t);
    }
    // Flow entry t covers frames (ws+t, ws+t+1); valid while both frames are
    // real content of this window. Padded frames keep zero flow.
    for (size_t t = 0; t + 1 < avail; ++t) {
      for (size_t c = 0; c < 2; ++c) {
        std::memcpy(b.flow.mutable_data<float>() + (c * (buffer_len - 1) + t) * plane,
                    v.flow.data<float>() + (c * (L - 1) + ws + t) * plane,
                    plane * sizeof(float));
      }
    }
    for (const Annotation& a : v.annotations) {
      const double fa = a.start_sec * v.fps, fb = a.end_sec * v.fps;
      const double cs = std::max(fa, static_cast<double>(ws));
      const double ce = std::min(fb, static_cast<double>(ws + buffer_len));
      if (ce - cs <= 0) continue;
      const Segment original = Segment::from_range(fa, fb);
      const Segment clipped = Segment::from_range(cs, ce);
      if (tiou(original, clipped) < 0.5) continue;
      b.annotations.push_back(BufferAnnotation{
          a.label, Segment::from_range(cs - static_cast<double>(ws),
                                       ce - static_cast<double>(ws))});
    }
    out.push_back(std::move(b));
  }
}

}  // namespace

std::vector<Buffer> build_buffers(const VideoSample& sample, size_t buffer_len,
                                  bool two_way, bool flip) {
  TEMPO_CHECK(buffer_len >= 8 && buffer_len % 8 == 0, "buffers: buffer length ",
              buffer_len, " must be a positive multiple of 8");
  TEMPO_CHECK(sample.rgb.dtype() == DType::f32 && sample.flow.dtype() == DType::f32,
              "buffers: samples are expected in f32 storage");
  std::vector<Buffer> out;
  append_windows(sample, buffer_len, out);
  if (two_way) {
    const VideoSample rev = reverse_sample(sample);
    append_windows(rev, buffer_len, out);
  }
  if (flip) {
    const size_t base = out.size();
    for (size_t i = 0; i < base; ++i) out.push_back(mirror_buffer(out[i]));
  }
  return out;
}

void save_detections(const std::string& path, std::span<const Detection> dets) {
  std::ofstream f(path, std::ios::trunc);
  TEMPO_CHECK(f.good(), "detections: cannot open ", path, " for writing");
  for (const Detection& d : dets) {
    json j = {{"video_id", d.video_id},
              {"label", d.label},
              {"start_sec", d.start_sec},
              {"end_sec", d.end_sec},
              {"score", d.score}};
    f << j.dump() << "\n";
  }
  TEMPO_CHECK(f.good(), "detections: write failed for ", path);
}

std::vector<Detection> load_detections(const std::string& path) {
  std::ifstream f(path);
  TEMPO_CHECK(f.good(), "detections: cannot open ", path);
  std::vector<Detection> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Detection d;
      d.video_id = j.at("video_id").get<std::string>();
      d.label = j.at("label").get<int>();
      d.start_sec = j.at("start_sec").get<double>();
      d.end_sec = j.at("end_sec").get<double>();
      d.score = j.at("score").get<double>();
      out.push_back(std::move(d));
    } catch (const json::exception& e) {
      fail("detections: bad record at ", path, ":", lineno, ": ", e.what());
    }
  }
  return out;
}

}  // namespace tempo

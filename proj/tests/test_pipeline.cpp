#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "tempo/ops.hpp"
#include "tempo/pipeline.hpp"
#include "tempo/train.hpp"

using namespace tempo;
namespace fs = std::filesystem;

namespace {

ModelConfig desk_cfg(FusionMode mode = FusionMode::single) {
  ModelConfig mc;
  mc.backbone.widths = {2, 2, 4, 4, 4};
  mc.mode = mode;
  mc.anchor_scales = {1, 2, 3};
  mc.num_classes = 3;
  mc.hidden = 8;
  mc.roi_grid = RoiGrid{1, 2, 2};
  mc.buffer_len = 32;
  mc.fps_hint = 8.0;
  mc.infer_top_n = 24;
  return mc;
}

VideoSample sample_with_gt(uint64_t seed, size_t frames = 32) {
  const fs::path dir = fs::temp_directory_path() / "tempo_pipe_sample";
  fs::remove_all(dir);
  SynthConfig sc;
  sc.num_videos = 1;
  sc.num_classes = 3;
  sc.num_frames = frames;
  sc.height = sc.width = 32;
  sc.fps = 8.0;
  sc.min_duration_sec = 1.0;
  sc.max_duration_sec = 2.0;
  sc.max_activities = 2;
  sc.seed = seed;
  Manifest m = synth_generate(sc, dir.string());
  VideoSample v = load_video(m, 0);
  fs::remove_all(dir);
  return v;
}

// The score/offset/class/reg layers start at zero, which blocks gradient flow
// into the trunk; give them small random values when a test needs gradients
// (or nontrivial predictions) past the heads.
void randomize_heads(Model& m, uint64_t seed) {
  Rng rng(seed);
  auto jitter = [&](ParamStore& store, const std::string& key) {
    Tensor t = store.at(key).clone();
    for (size_t i = 0; i < t.numel(); ++i) {
      t.mutable_data<double>()[i] = 0.1 * rng.normal();
    }
    t.set_requires_grad(true);
    store.put(key, t);
  };
  jitter(m.prop.params, "score.weight");
  jitter(m.prop.params, "offset.weight");
  jitter(m.cls.params, "class.weight");
  jitter(m.cls.params, "reg.weight");
}

// Flow stream and flow FC stacks forced to exact zero.
void zero_flow_path(Model& m) {
  for (auto& [name, t] : m.flow_stream.items) {
    Tensor z = Tensor::zeros(t.shape(), t.dtype());
    z.set_requires_grad(t.requires_grad());
    m.flow_stream.put(name, z);
  }
  for (const char* key : {"flow.fc1.weight", "flow.fc1.bias", "flow.fc2.weight",
                          "flow.fc2.bias"}) {
    const Tensor& t = m.cls.params.at(key);
    Tensor z = Tensor::zeros(t.shape(), t.dtype());
    z.set_requires_grad(true);
    m.cls.params.put(key, z);
  }
}

}  // namespace

TEST_CASE("zero-initialized heads propose the anchors with uniform confidence") {
  Model m = init_model(desk_cfg(), 51);
  VideoSample v = sample_with_gt(3);
  Tensor rgb = v.rgb.astype(DType::f64);
  StreamFeatures feats = forward_features(m, rgb, nullptr);
  ProposalPredictions preds = forward_proposals(m, feats);
  CHECK(preds.scores.max_abs() == 0.0);
  CHECK(preds.offsets.max_abs() == 0.0);

  const auto scored = decode_scored_proposals(m, preds, 32);
  const auto anchors = generate_anchors(m.cfg.anchor_config(), 32);
  REQUIRE(scored.size() <= anchors.size());
  for (const ScoredSegment& s : scored) CHECK(s.score == doctest::Approx(0.5));

  // Unclipped anchors come through identically.
  size_t exact = 0;
  size_t ai = 0;
  for (const Segment& a : anchors) {
    if (a.start() >= 0 && a.end() <= 32) {
      while (ai < scored.size() &&
             std::fabs(scored[ai].seg.center - a.center) +
                     std::fabs(scored[ai].seg.length - a.length) >
                 1e-12) {
        ++ai;
      }
      if (ai < scored.size()) ++exact;
    }
  }
  CHECK(exact > 0);
}

TEST_CASE("detect is deterministic and clipped to the video") {
  Model m = init_model(desk_cfg(), 52);
  VideoSample v = sample_with_gt(4);
  const auto d1 = detect(m, v, 0.5);
  const auto d2 = detect(m, v, 0.5);
  REQUIRE(d1.size() == d2.size());
  for (size_t i = 0; i < d1.size(); ++i) {
    CHECK(d1[i].seg.center == d2[i].seg.center);
    CHECK(d1[i].score == d2[i].score);
    CHECK(d1[i].label == d2[i].label);
    CHECK(d1[i].seg.start() >= 0.0);
    CHECK(d1[i].seg.end() <= 32.0);
    CHECK(d1[i].label >= 0);  // background never emits
  }
  // Sorted by score descending.
  for (size_t i = 1; i < d1.size(); ++i) CHECK(d1[i - 1].score >= d1[i].score);
}

TEST_CASE("an oracle-weight model detects an anchor-aligned ground truth at tIoU 1") {
  ModelConfig cfg = desk_cfg();
  Model m = init_model(cfg, 53);

  // Bias the activity logit of scale-0 anchors (length 8 frames) sky high,
  // leave offsets zero: proposals equal the anchors, every scale-0 anchor
  // scores ~1. Consecutive scale-0 anchors overlap well below the 0.7 NMS
  // threshold, so all of them survive into classification.
  Tensor bias = Tensor::zeros({2 * m.prop.k});
  for (size_t k = 0; k < m.prop.k; ++k) {
    bias.mutable_data<double>()[2 * k + 0] = k == 0 ? -12.0 : 12.0;
    bias.mutable_data<double>()[2 * k + 1] = k == 0 ? 12.0 : -12.0;
  }
  m.prop.params.put("score.bias", bias.with_grad());

  // Ground truth exactly on a scale-0 anchor: frames [8, 16).
  VideoSample v = sample_with_gt(5);
  v.annotations = {{1, 1.0, 2.0}};

  const auto dets = detect(m, v, 0.5);
  REQUIRE(!dets.empty());
  const Segment gt = Segment::from_range(8.0, 16.0);
  bool hit = false;
  for (const ScoredSegment& d : dets) {
    if (tiou(d.seg, gt) > 1.0 - 1e-9) hit = true;
  }
  CHECK(hit);
}

TEST_CASE("final NMS for alpha 0.5 runs at threshold 0.4") {
  // Construct synthetic stage outputs through detect_buffers: two detections
  // of the same class with tIoU 0.45 survive together at alpha 0.6 (NMS 0.5)
  // but not at alpha 0.5 (NMS 0.4). Verified indirectly via the geometry op
  // here; the threshold arithmetic is in detect itself.
  Model m = init_model(desk_cfg(), 54);
  VideoSample v = sample_with_gt(6);
  // With uniform scores and zero offsets, anchors of different scales at one
  // location have tIoU 1/2 (scale 1 vs 2) and are suppressed at 0.4 but both
  // kept at alpha 0.95 (NMS threshold 0.85).
  const auto tight = detect(m, v, 0.5);
  const auto loose = detect(m, v, 0.95);
  CHECK(loose.size() >= tight.size());
}

TEST_CASE("two-stream sum with a zeroed flow path reproduces single-stream bits") {
  VideoSample v = sample_with_gt(7);

  Model single = init_model(desk_cfg(FusionMode::single), 55);
  Model twosum = init_model(desk_cfg(FusionMode::two_sum), 55);
  // Same RGB trunk weights; classifier fc stacks are re-seeded per model, so
  // copy them across too.
  twosum.rgb_stream = single.rgb_stream;
  twosum.prop.params = single.prop.params;
  for (const char* key : {"rgb.fc1.weight", "rgb.fc1.bias", "rgb.fc2.weight",
                          "rgb.fc2.bias", "class.weight", "class.bias", "reg.weight",
                          "reg.bias"}) {
    twosum.cls.params.put(key, single.cls.params.at(key));
  }
  zero_flow_path(twosum);

  const auto ds = detect(single, v, 0.5);
  const auto dt = detect(twosum, v, 0.5);
  REQUIRE(ds.size() == dt.size());
  for (size_t i = 0; i < ds.size(); ++i) {
    // Bit-for-bit equality on scores and boundaries.
    CHECK(std::memcmp(&ds[i].score, &dt[i].score, sizeof(double)) == 0);
    CHECK(std::memcmp(&ds[i].seg.center, &dt[i].seg.center, sizeof(double)) == 0);
    CHECK(std::memcmp(&ds[i].seg.length, &dt[i].seg.length, sizeof(double)) == 0);
    CHECK(ds[i].label == dt[i].label);
  }
}

TEST_CASE("concat fusion doubles pre-fusion width but keeps the logit width") {
  Model m = init_model(desk_cfg(FusionMode::two_concat), 56);
  CHECK(m.cls.params.at("class.weight").dim(0) == 2 * m.cfg.hidden);
  CHECK(m.cls.params.at("class.weight").dim(1) == m.cfg.num_classes + 1);

  VideoSample v = sample_with_gt(8);
  Tensor rgb = v.rgb.astype(DType::f64);
  Tensor flow = v.flow.astype(DType::f64);
  StreamFeatures feats = forward_features(m, rgb, &flow);
  CHECK(feats.fused.dim(0) == 2 * m.cfg.backbone.out_channels());

  const auto dets = detect(m, v, 0.5);  // runs end to end
  (void)dets;
}

TEST_CASE("gradients reach both streams' first layers in two-stream mode") {
  Model m = init_model(desk_cfg(FusionMode::two_sum), 57);
  randomize_heads(m, 570);
  VideoSample v = sample_with_gt(9);
  Buffer buf = build_buffers(v, 32, false, false).at(0);

  TrainConfig tc;
  tc.model = m.cfg;
  tc.proposal_batch = 8;
  tc.cls_batch = 8;
  tc.sampler = ClsSampler::full;

  Tensor rgb = buf.rgb.astype(DType::f64);
  Tensor flow = buf.flow.astype(DType::f64);
  Tape tape;
  GradMap grads;
  {
    Tape::Scope scope(tape);
    StreamFeatures feats = forward_features(m, rgb, &flow);
    ProposalPredictions preds = forward_proposals(m, feats);
    StepRngs rngs{Rng(1), Rng(2)};
    StepPlan plan = make_step_plan(m, feats, preds, buf.annotations, tc, rngs);
    m.watch_all(tape);
    grads = tape.backward(step_loss(m, feats, preds, plan, tc.loss, nullptr));
  }
  CHECK(grads.for_param(m.rgb_stream.at("conv1a.weight")).max_abs() > 0.0);
  CHECK(grads.for_param(m.flow_stream.at("conv1a.weight")).max_abs() > 0.0);
}

TEST_CASE("model checkpoints restore config and bits") {
  Model m = init_model(desk_cfg(FusionMode::two_concat), 58);
  m.cfg.class_names = {"a", "b", "c"};
  const std::string path = (fs::temp_directory_path() / "model_rt.tnsa").string();
  save_model(m, path);
  Model back = load_model(path);
  CHECK(back.cfg.mode == FusionMode::two_concat);
  CHECK(back.cfg.anchor_scales == m.cfg.anchor_scales);
  CHECK(back.cfg.class_names == m.cfg.class_names);
  for (const auto& [name, t] : m.all_params().items) {
    CHECK(back.all_params().at(name).same_bits(t));
  }
  // Forward after reload is bit-identical.
  VideoSample v = sample_with_gt(10);
  const auto d1 = detect(m, v, 0.5);
  const auto d2 = detect(back, v, 0.5);
  REQUIRE(d1.size() == d2.size());
  for (size_t i = 0; i < d1.size(); ++i) {
    CHECK(std::memcmp(&d1[i].score, &d2[i].score, sizeof(double)) == 0);
  }
  fs::remove(path);
}

TEST_CASE("proposal export clips to the video and respects the budget") {
  Model m = init_model(desk_cfg(), 59);
  VideoSample v = sample_with_gt(11, 96);  // three buffers
  const auto props = detect_proposals(m, v, 10);
  CHECK(props.size() <= 10);
  for (const ScoredSegment& p : props) {
    CHECK(p.seg.start() >= 0.0);
    CHECK(p.seg.end() <= 96.0);
    CHECK(p.label == -1);
  }
}

TEST_CASE("missing flow input in a two-stream model is an error") {
  Model m = init_model(desk_cfg(FusionMode::two_sum), 60);
  VideoSample v = sample_with_gt(12);
  Tensor rgb = v.rgb.astype(DType::f64);
  CHECK_THROWS_WITH_AS(forward_features(m, rgb, nullptr), doctest::Contains("flow"),
                       Error);
}

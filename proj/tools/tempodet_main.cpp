// Command-line front end: synth | train | detect | eval | bench.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tempo/config.hpp"
#include "tempo/metrics.hpp"
#include "tempo/pipeline.hpp"
#include "tempo/train.hpp"

namespace fs = std::filesystem;
using namespace tempo;

namespace {

SynthConfig synth_config_from(const Config& cfg, long seed_override) {
  SynthConfig sc;
  sc.num_videos = static_cast<size_t>(cfg.get_int("synth.num_videos", 20));
  sc.first_index = static_cast<size_t>(cfg.get_int("synth.first_index", 0));
  sc.num_classes = static_cast<int>(cfg.get_int("synth.num_classes", 3));
  sc.num_frames = static_cast<size_t>(cfg.get_int("synth.num_frames", 96));
  sc.height = sc.width = static_cast<size_t>(cfg.get_int("synth.size", 32));
  sc.fps = cfg.get_double("synth.fps", 8.0);
  sc.min_duration_sec = cfg.get_double("synth.min_duration_sec", 1.0);
  sc.max_duration_sec = cfg.get_double("synth.max_duration_sec", 4.0);
  sc.min_activities = static_cast<int>(cfg.get_int("synth.min_activities", 1));
  sc.max_activities = static_cast<int>(cfg.get_int("synth.max_activities", 3));
  sc.allow_overlap = cfg.get_bool("synth.allow_overlap", false);
  sc.seed = static_cast<uint64_t>(seed_override >= 0 ? seed_override
                                                     : cfg.get_int("seed", 7));
  return sc;
}

ModelConfig model_config_from(const Config& cfg) {
  ModelConfig mc;
  mc.mode = parse_fusion_mode(cfg.get_str("model.mode", "single"));
  mc.backbone.widths.clear();
  for (long w : cfg.get_int_list("model.widths", {8, 16, 32, 32, 32})) {
    mc.backbone.widths.push_back(static_cast<size_t>(w));
  }
  mc.anchor_scales.clear();
  for (long s : cfg.get_int_list("model.anchor_scales", {1, 2, 3, 4})) {
    mc.anchor_scales.push_back(static_cast<int>(s));
  }
  mc.num_classes = static_cast<size_t>(cfg.get_int("model.num_classes", 3));
  mc.hidden = static_cast<size_t>(cfg.get_int("model.hidden", 256));
  const auto grid = cfg.get_int_list("model.roi_grid", {1, 2, 2});
  TEMPO_CHECK(grid.size() == 3, "config: model.roi_grid needs exactly 3 entries");
  mc.roi_grid = RoiGrid{static_cast<size_t>(grid[0]), static_cast<size_t>(grid[1]),
                        static_cast<size_t>(grid[2])};
  mc.class_agnostic_reg = cfg.get_bool("model.class_agnostic_reg", false);
  const std::string dt = cfg.get_str("model.dtype", "f64");
  TEMPO_CHECK(dt == "f32" || dt == "f64", "config: model.dtype must be f32 or f64");
  mc.dtype = dt == "f32" ? DType::f32 : DType::f64;
  mc.buffer_len = static_cast<size_t>(cfg.get_int("model.buffer_len", 96));
  mc.train_top_n = static_cast<size_t>(cfg.get_int("model.train_top_n", 2000));
  mc.infer_top_n = static_cast<size_t>(cfg.get_int("model.infer_top_n", 300));
  mc.freeze_conv_layers = static_cast<size_t>(cfg.get_int("model.freeze_conv", 0));
  mc.fps_hint = cfg.get_double("model.fps", 8.0);
  return mc;
}

TrainConfig train_config_from(const Config& cfg) {
  TrainConfig tc;
  tc.model = model_config_from(cfg);
  tc.epochs = static_cast<size_t>(cfg.get_int("train.epochs", 10));
  tc.lr = cfg.get_double("train.lr", 0.01);
  tc.lr_drop_epoch = static_cast<size_t>(cfg.get_int("train.lr_drop_epoch", 0));
  tc.lr_after_drop = cfg.get_double("train.lr_after_drop", tc.lr * 0.1);
  tc.sgd.momentum = cfg.get_double("train.momentum", 0.9);
  tc.sgd.weight_decay = cfg.get_double("train.weight_decay", 0.0005);
  tc.loss.lambda = cfg.get_double("train.lambda", 1.0);
  tc.proposal_batch = static_cast<size_t>(cfg.get_int("train.proposal_batch", 64));
  tc.proposal_pos_frac = cfg.get_double("train.proposal_pos_frac", 0.5);
  tc.cls_batch = static_cast<size_t>(cfg.get_int("train.cls_batch", 128));
  tc.cls_pos_frac = cfg.get_double("train.cls_pos_frac", 0.25);
  const std::string sampler = cfg.get_str("train.sampler", "sampled");
  if (sampler == "sampled") {
    tc.sampler = ClsSampler::sampled;
  } else if (sampler == "ohem") {
    tc.sampler = ClsSampler::ohem;
  } else if (sampler == "full") {
    tc.sampler = ClsSampler::full;
  } else {
    fail("config: train.sampler must be sampled|ohem|full, got '", sampler, "'");
  }
  tc.ohem_top_n = static_cast<size_t>(cfg.get_int("train.ohem_top_n", 128));
  tc.two_way = cfg.get_bool("train.two_way", false);
  tc.flip = cfg.get_bool("train.flip", false);
  tc.seed = static_cast<uint64_t>(cfg.get_int("seed", 7));
  tc.checkpoint_every = static_cast<size_t>(cfg.get_int("train.checkpoint_every", 1));
  return tc;
}

std::vector<Detection> to_detections(std::span<const ScoredSegment> segs,
                                     const std::string& video_id, double fps) {
  std::vector<Detection> out;
  for (const ScoredSegment& s : segs) {
    out.push_back(Detection{video_id, s.label, s.seg.start() / fps, s.seg.end() / fps,
                            s.score});
  }
  return out;
}

ParamStore cast_store(const ParamStore& in, DType dt) {
  ParamStore out;
  for (const auto& [name, t] : in.items) {
    Tensor c = t.dtype() == dt ? t : t.astype(dt);
    c.set_requires_grad(false);
    out.put(name, c);
  }
  return out;
}

Model cast_model(Model m, DType dt) {
  if (m.cfg.dtype == dt) return m;
  m.cfg.dtype = dt;
  m.rgb_stream = cast_store(m.rgb_stream, dt);
  m.flow_stream = cast_store(m.flow_stream, dt);
  m.prop.params = cast_store(m.prop.params, dt);
  m.cls.params = cast_store(m.cls.params, dt);
  return m;
}

int run(int argc, char** argv) {
  CLI::App app{"Two-stream temporal activity detection pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_path, manifest_path, checkpoint_path, detections_path;
  long seed_override = -1;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic video corpus");
  synth->add_option("--config", config_path, "key=value config file");
  synth->add_option("--out", out_path, "output directory")->required();
  synth->add_option("--seed", seed_override, "seed override");

  auto* trainc = app.add_subcommand("train", "Train a detector");
  trainc->add_option("--config", config_path, "key=value config file");
  trainc->add_option("--manifest", manifest_path, "training manifest (overrides config)");
  trainc->add_option("--out", out_path, "output directory")->required();
  trainc->add_option("--seed", seed_override, "seed override");
  std::string mode_flag;
  trainc->add_option("--mode", mode_flag, "single|two_sum|two_concat (overrides config)");
  bool ohem_flag = false, two_way_flag = false, flip_flag = false;
  trainc->add_flag("--ohem", ohem_flag, "use online hard example mining");
  trainc->add_flag("--two-way", two_way_flag, "add reversed-time buffers");
  trainc->add_flag("--flip", flip_flag, "add horizontally mirrored buffers");

  auto* detect_cmd = app.add_subcommand("detect", "Run inference on a manifest");
  detect_cmd->add_option("checkpoint", checkpoint_path, "model checkpoint")->required();
  detect_cmd->add_option("manifest", manifest_path, "video manifest")->required();
  detect_cmd->add_option("out", out_path, "output detections (JSON lines)")->required();
  double alpha = 0.5;
  detect_cmd->add_option("--alpha", alpha, "evaluation tIoU (final NMS at alpha-0.1)");
  bool proposals_only = false;
  detect_cmd->add_flag("--proposals", proposals_only,
                       "emit stage-1 proposals (label -1, top 100 per video)");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate detections against a manifest");
  eval_cmd->add_option("detections", detections_path, "detections JSON lines")->required();
  eval_cmd->add_option("manifest", manifest_path, "video manifest")->required();
  std::string metric = "map";
  eval_cmd->add_option("--metric", metric, "map|avg_map|auc|frame_map");
  std::vector<double> alphas;
  eval_cmd->add_option("--alpha", alphas, "tIoU threshold(s) for --metric map");
  bool smooth = false;
  eval_cmd->add_flag("--smooth", smooth, "20-frame smoothing for frame_map");
  eval_cmd->add_option("--out", out_path, "report path prefix (writes .csv and .json)");

  auto* bench_cmd = app.add_subcommand("bench", "Measure inference throughput");
  bench_cmd->add_option("checkpoint", checkpoint_path, "model checkpoint")->required();
  bench_cmd->add_option("manifest", manifest_path, "video manifest")->required();
  long repeat = 3;
  bench_cmd->add_option("--repeat", repeat, "timed passes over the manifest");
  std::string bench_dtype = "f32";
  bench_cmd->add_option("--dtype", bench_dtype, "f32|f64 compute dtype");
  bench_cmd->add_option("--out", out_path, "write the fps report here (JSON)");

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    Config cfg = config_path.empty() ? Config{} : Config::from_file(config_path);
    const SynthConfig sc = synth_config_from(cfg, seed_override);
    const Manifest m = synth_generate(sc, out_path);
    std::cout << "wrote " << m.videos.size() << " videos to " << out_path << "\n";
    return 0;
  }

  if (trainc->parsed()) {
    Config cfg = config_path.empty() ? Config{} : Config::from_file(config_path);
    TrainConfig tc = train_config_from(cfg);
    if (seed_override >= 0) tc.seed = static_cast<uint64_t>(seed_override);
    if (!mode_flag.empty()) tc.model.mode = parse_fusion_mode(mode_flag);
    if (ohem_flag) tc.sampler = ClsSampler::ohem;
    if (two_way_flag) tc.two_way = true;
    if (flip_flag) tc.flip = true;
    std::string mpath = !manifest_path.empty()
                            ? manifest_path
                            : cfg.get_str("train.manifest", "");
    TEMPO_CHECK(!mpath.empty(), "train: no manifest given (--manifest or train.manifest)");
    const Manifest manifest = load_manifest(mpath);
    tc.model.class_names = manifest.classes;
    TEMPO_CHECK(tc.model.num_classes == manifest.classes.size(),
                "train: model.num_classes (", tc.model.num_classes,
                ") does not match manifest classes (", manifest.classes.size(), ")");
    train(manifest, tc, out_path);
    std::cout << "checkpoint: " << (fs::path(out_path) / "model.tnsa").string() << "\n";
    return 0;
  }

  if (detect_cmd->parsed()) {
    const Model model = load_model(checkpoint_path);
    const Manifest manifest = load_manifest(manifest_path);
    std::vector<Detection> all;
    for (size_t v = 0; v < manifest.videos.size(); ++v) {
      const VideoSample sample = load_video(manifest, v);
      const std::vector<ScoredSegment> segs =
          proposals_only ? detect_proposals(model, sample) : detect(model, sample, alpha);
      const std::vector<Detection> dets = to_detections(segs, sample.id, sample.fps);
      all.insert(all.end(), dets.begin(), dets.end());
    }
    save_detections(out_path, all);
    std::cout << "wrote " << all.size() << " records to " << out_path << "\n";
    return 0;
  }

  if (eval_cmd->parsed()) {
    const Manifest manifest = load_manifest(manifest_path);
    const std::vector<EvalDet> dets =
        dets_from_detections(load_detections(detections_path), manifest);
    const std::vector<EvalGt> gts = gts_from_manifest(manifest);
    const size_t num_classes = manifest.classes.size();
    std::vector<MetricRow> rows;
    if (metric == "map") {
      if (alphas.empty()) alphas.push_back(0.5);
      for (double a : alphas) {
        std::vector<ClassAp> per_class;
        const double v = map_at(dets, gts, a, num_classes, &per_class);
        rows.push_back(MetricRow{"map", "ALL", a, v});
        for (const ClassAp& ap : per_class) {
          rows.push_back(MetricRow{"ap", manifest.classes[ap.label], a, ap.ap});
        }
      }
    } else if (metric == "avg_map") {
      rows.push_back(MetricRow{"avg_map", "ALL", 0.0, average_map(dets, gts, num_classes)});
    } else if (metric == "auc") {
      rows.push_back(MetricRow{"ar_an_auc", "ALL", 0.0,
                               ar_an_auc(dets, gts, manifest.videos.size())});
    } else if (metric == "frame_map") {
      std::vector<double> durations;
      for (const VideoEntry& e : manifest.videos) {
        durations.push_back(static_cast<double>(e.num_frames) / e.fps);
      }
      rows.push_back(MetricRow{"frame_map", "ALL", 0.0,
                               frame_level_map(dets, gts, durations, num_classes, 25,
                                               smooth)});
    } else {
      fail("eval: unknown metric '", metric, "' (map|avg_map|auc|frame_map)");
    }
    for (const MetricRow& r : rows) {
      std::cout << r.metric << " " << r.class_or_all << " alpha=" << r.alpha << " "
                << r.value << "\n";
    }
    if (!out_path.empty()) {
      write_metric_csv(out_path + ".csv", rows);
      write_metric_json(out_path + ".json", rows);
    }
    return 0;
  }

  if (bench_cmd->parsed()) {
    TEMPO_CHECK(repeat >= 1, "bench: --repeat must be >= 1");
    TEMPO_CHECK(bench_dtype == "f32" || bench_dtype == "f64",
                "bench: --dtype must be f32 or f64");
    Model model = cast_model(load_model(checkpoint_path),
                             bench_dtype == "f32" ? DType::f32 : DType::f64);
    const Manifest manifest = load_manifest(manifest_path);
    // Everything the timer covers is compute: buffers are assembled up front.
    std::vector<std::vector<Buffer>> buffers;
    std::vector<double> frames;
    size_t total_frames = 0;
    for (size_t v = 0; v < manifest.videos.size(); ++v) {
      const VideoSample sample = load_video(manifest, v);
      buffers.push_back(build_buffers(sample, model.cfg.buffer_len, false, false));
      frames.push_back(static_cast<double>(sample.num_frames()));
      total_frames += sample.num_frames();
    }
    std::vector<double> fps_runs;
    for (long r = 0; r < repeat; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      size_t sink = 0;
      for (size_t v = 0; v < buffers.size(); ++v) {
        sink += detect_buffers(model, buffers[v], frames[v], 0.5).size();
      }
      const auto t1 = std::chrono::steady_clock::now();
      const double sec = std::chrono::duration<double>(t1 - t0).count();
      fps_runs.push_back(static_cast<double>(total_frames) / sec);
      std::cout << "run " << (r + 1) << ": " << fps_runs.back() << " fps (" << sink
                << " detections)\n";
    }
    double mean = 0, lo = fps_runs[0], hi = fps_runs[0];
    for (double f : fps_runs) {
      mean += f;
      lo = std::min(lo, f);
      hi = std::max(hi, f);
    }
    mean /= static_cast<double>(fps_runs.size());
    const double spread = (hi - lo) / mean;
    std::cout << "mean " << mean << " fps over " << repeat << " runs, spread "
              << spread * 100.0 << "%\n";
    if (!out_path.empty()) {
      nlohmann::json j = {{"runs_fps", fps_runs},
                          {"mean_fps", mean},
                          {"relative_spread", spread},
                          {"frames_per_pass", total_frames},
                          {"dtype", bench_dtype}};
      std::ofstream f(out_path, std::ios::trunc);
      TEMPO_CHECK(f.good(), "bench: cannot open ", out_path);
      f << j.dump(2) << "\n";
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

#include "tempo/pipeline.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "tempo/ops.hpp"

using nlohmann::json;

namespace tempo {

void ModelConfig::validate() const {
  backbone.validate();
  roi_grid.validate();
  anchor_config().validate();
  TEMPO_CHECK(num_classes >= 1, "model: need at least one foreground class");
  TEMPO_CHECK(hidden >= 1, "model: hidden width must be >= 1");
  TEMPO_CHECK(buffer_len >= 8 && buffer_len % 8 == 0, "model: buffer length ", buffer_len,
              " must be a positive multiple of 8");
  TEMPO_CHECK(freeze_conv_layers <= stream_layer_names().size(),
              "model: cannot freeze ", freeze_conv_layers, " conv layers");
}

namespace {

void apply_freeze(ParamStore& stream, size_t freeze_layers) {
  const auto& names = stream_layer_names();
  for (size_t i = 0; i < freeze_layers && i < names.size(); ++i) {
    for (const char* kind : {".weight", ".bias"}) {
      Tensor t = stream.at(names[i] + kind);
      t.set_requires_grad(false);
      stream.put(names[i] + kind, t);
    }
  }
}

}  // namespace

ParamStore Model::all_params() const {
  ParamStore merged;
  merged.merge("rgb.", rgb_stream);
  merged.merge("flow.", flow_stream);
  merged.merge("prop.", prop.params);
  merged.merge("cls.", cls.params);
  return merged;
}

void Model::replace_params(const ParamStore& updated) {
  for (const auto& [name, t] : updated.items) {
    if (name.rfind("rgb.", 0) == 0) {
      rgb_stream.put(name.substr(4), t);
    } else if (name.rfind("flow.", 0) == 0) {
      flow_stream.put(name.substr(5), t);
    } else if (name.rfind("prop.", 0) == 0) {
      prop.params.put(name.substr(5), t);
    } else if (name.rfind("cls.", 0) == 0) {
      cls.params.put(name.substr(4), t);
    } else {
      fail("model: unknown parameter prefix in '", name, "'");
    }
  }
}

void Model::watch_all(Tape& tape) const {
  all_params().watch_all(tape);
}

Model init_model(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  m.cfg.backbone.in_channels = 3;

  Rng root(seed);
  Rng rgb_rng = root.substream(1);
  Rng head_rng = root.substream(2);
  Rng cls_rng = root.substream(3);

  m.rgb_stream = init_stream(m.cfg.backbone, rgb_rng, cfg.dtype);
  if (cfg.mode != FusionMode::single) {
    m.flow_stream = init_flow_from_rgb(m.rgb_stream);
  }
  const size_t c5 = cfg.backbone.out_channels();
  const size_t fused_ch = cfg.mode == FusionMode::two_concat ? 2 * c5 : c5;
  m.prop = init_proposal_head(fused_ch, c5, cfg.anchor_scales.size(), head_rng, cfg.dtype);
  m.cls = init_classifier_head(cfg.pooled_dim(), cfg.hidden, cfg.num_classes, cfg.mode,
                               cfg.class_agnostic_reg, cls_rng, cfg.dtype);
  apply_freeze(m.rgb_stream, cfg.freeze_conv_layers);
  apply_freeze(m.flow_stream, cfg.freeze_conv_layers);
  return m;
}

namespace {

json config_to_json(const ModelConfig& cfg) {
  json j;
  j["mode"] = fusion_mode_name(cfg.mode);
  j["widths"] = cfg.backbone.widths;
  j["anchor_scales"] = cfg.anchor_scales;
  j["num_classes"] = cfg.num_classes;
  j["hidden"] = cfg.hidden;
  j["roi_grid"] = {cfg.roi_grid.l, cfg.roi_grid.h, cfg.roi_grid.w};
  j["class_agnostic_reg"] = cfg.class_agnostic_reg;
  j["dtype"] = dtype_name(cfg.dtype);
  j["buffer_len"] = cfg.buffer_len;
  j["train_top_n"] = cfg.train_top_n;
  j["infer_top_n"] = cfg.infer_top_n;
  j["freeze_conv_layers"] = cfg.freeze_conv_layers;
  j["fps_hint"] = cfg.fps_hint;
  j["class_names"] = cfg.class_names;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.mode = parse_fusion_mode(j.at("mode").get<std::string>());
  cfg.backbone.widths = j.at("widths").get<std::vector<size_t>>();
  cfg.anchor_scales = j.at("anchor_scales").get<std::vector<int>>();
  cfg.num_classes = j.at("num_classes").get<size_t>();
  cfg.hidden = j.at("hidden").get<size_t>();
  const auto grid = j.at("roi_grid").get<std::vector<size_t>>();
  TEMPO_CHECK(grid.size() == 3, "checkpoint meta: roi_grid needs 3 entries");
  cfg.roi_grid = RoiGrid{grid[0], grid[1], grid[2]};
  cfg.class_agnostic_reg = j.at("class_agnostic_reg").get<bool>();
  cfg.dtype = j.at("dtype").get<std::string>() == "f32" ? DType::f32 : DType::f64;
  cfg.buffer_len = j.at("buffer_len").get<size_t>();
  cfg.train_top_n = j.at("train_top_n").get<size_t>();
  cfg.infer_top_n = j.at("infer_top_n").get<size_t>();
  cfg.freeze_conv_layers = j.at("freeze_conv_layers").get<size_t>();
  cfg.fps_hint = j.at("fps_hint").get<double>();
  cfg.class_names = j.at("class_names").get<std::vector<std::string>>();
  return cfg;
}

}  // namespace

void save_model(const Model& m, const std::string& path) {
  save_checkpoint(path, m.all_params(), config_to_json(m.cfg).dump());
}

Model load_model(const std::string& path) {
  std::string meta;
  ParamStore params = load_checkpoint(path, meta);
  json j;
  try {
    j = json::parse(meta);
  } catch (const json::exception& e) {
    fail("checkpoint: bad metadata in ", path, ": ", e.what());
  }
  Model m;
  m.cfg = config_from_json(j);
  m.cfg.validate();
  m.rgb_stream = params.slice("rgb.");
  m.flow_stream = params.slice("flow.");
  m.prop.params = params.slice("prop.");
  m.prop.k = m.cfg.anchor_scales.size();
  m.cls.params = params.slice("cls.");
  m.cls.num_classes = m.cfg.num_classes;
  m.cls.hidden = m.cfg.hidden;
  m.cls.mode = m.cfg.mode;
  m.cls.class_agnostic_reg = m.cfg.class_agnostic_reg;
  // Loaded tensors are plain data; re-mark trainables.
  auto mark = [&](ParamStore& store) {
    for (auto& [name, t] : store.items) {
      Tensor p = t;
      p.set_requires_grad(true);
      store.put(name, p);
    }
  };
  mark(m.rgb_stream);
  mark(m.flow_stream);
  mark(m.prop.params);
  mark(m.cls.params);
  apply_freeze(m.rgb_stream, m.cfg.freeze_conv_layers);
  apply_freeze(m.flow_stream, m.cfg.freeze_conv_layers);
  return m;
}

namespace {

// Fixed input centering for the RGB stream. Raw frames live in [0,1]; the
// shifted signal keeps first-layer responses from being dominated by the
// shared DC component. Flow input is already signed and stays as-is.
Tensor center_rgb(const Tensor& rgb) {
  TEMPO_CHECK(!rgb.requires_grad(), "forward: rgb input must not require grad");
  Tensor out = Tensor::zeros(rgb.shape(), rgb.dtype());
  const size_t n = rgb.numel();
  if (rgb.dtype() == DType::f64) {
    const double* p = rgb.data<double>();
    double* q = out.mutable_data<double>();
    for (size_t i = 0; i < n; ++i) q[i] = p[i] - 0.5;
  } else {
    const float* p = rgb.data<float>();
    float* q = out.mutable_data<float>();
    for (size_t i = 0; i < n; ++i) q[i] = p[i] - 0.5f;
  }
  return out;
}

}  // namespace

StreamFeatures forward_features(const Model& m, const Tensor& rgb, const Tensor* flow) {
  const bool two_stream = m.cfg.mode != FusionMode::single;
  TEMPO_CHECK(two_stream == (flow != nullptr), "forward: flow input ",
              flow ? "given" : "missing", " for mode ", fusion_mode_name(m.cfg.mode));
  StreamFeatures f;
  f.rgb_c5 = stream_forward(m.rgb_stream, center_rgb(rgb));
  if (two_stream) {
    f.flow_c5 = stream_forward(m.flow_stream, *flow);
    f.fused = fuse(f.rgb_c5, f.flow_c5, m.cfg.mode);
  } else {
    f.fused = f.rgb_c5;
  }
  return f;
}

ProposalPredictions forward_proposals(const Model& m, const StreamFeatures& feats) {
  return predict(m.prop, tpn_features(m.prop, feats.fused));
}

std::vector<ScoredSegment> decode_scored_proposals(const Model& m,
                                                   const ProposalPredictions& preds,
                                                   size_t num_frames) {
  const std::vector<Segment> anchors = generate_anchors(m.cfg.anchor_config(), num_frames);
  const size_t k = m.cfg.anchor_scales.size();
  TEMPO_CHECK(preds.scores.dim(0) * k == anchors.size(), "decode: prediction grid ",
              preds.scores.dim(0), "x", k, " does not match ", anchors.size(), " anchors");
  std::vector<ScoredSegment> out;
  out.reserve(anchors.size());
  for (size_t i = 0; i < anchors.size(); ++i) {
    const double s_bg = preds.scores.flat(i * 2 + 0);
    const double s_fg = preds.scores.flat(i * 2 + 1);
    const double p = 1.0 / (1.0 + std::exp(s_bg - s_fg));
    const Offset off{preds.offsets.flat(i * 2 + 0), preds.offsets.flat(i * 2 + 1)};
    const auto clipped = clip(decode(anchors[i], off), static_cast<double>(num_frames));
    if (clipped) out.push_back(ScoredSegment{*clipped, p, -1});
  }
  return out;
}

namespace {

struct BufferDetections {
  std::vector<ScoredSegment> items;  // video-frame coordinates
};

// Runs the shared per-buffer inference front end: features, proposal
// decoding, NMS and top-N selection.
std::vector<ScoredSegment> buffer_proposals(const Model& m, const Buffer& buf,
                                            StreamFeatures* feats_out, size_t top_n) {
  Tensor rgb = buf.rgb.dtype() == m.cfg.dtype ? buf.rgb : buf.rgb.astype(m.cfg.dtype);
  Tensor flow;
  const Tensor* flow_ptr = nullptr;
  if (m.cfg.mode != FusionMode::single) {
    flow = buf.flow.dtype() == m.cfg.dtype ? buf.flow : buf.flow.astype(m.cfg.dtype);
    flow_ptr = &flow;
  }
  StreamFeatures feats = forward_features(m, rgb, flow_ptr);
  ProposalPredictions preds = forward_proposals(m, feats);
  std::vector<ScoredSegment> scored =
      decode_scored_proposals(m, preds, m.cfg.buffer_len);
  std::vector<ScoredSegment> kept = select_proposals(scored, top_n, 0.7);
  if (feats_out) *feats_out = feats;
  return kept;
}

}  // namespace

std::vector<ScoredSegment> detect(const Model& m, const VideoSample& sample,
                                  double alpha_eval) {
  const std::vector<Buffer> buffers = build_buffers(sample, m.cfg.buffer_len, false, false);
  return detect_buffers(m, buffers, static_cast<double>(sample.num_frames()), alpha_eval);
}

std::vector<ScoredSegment> detect_buffers(const Model& m, std::span<const Buffer> buffers,
                                          double video_frames, double alpha_eval) {
  TEMPO_CHECK(alpha_eval > 0.0 && alpha_eval <= 1.0, "detect: alpha ", alpha_eval,
              " outside (0,1]");
  std::vector<ScoredSegment> candidates;
  for (size_t w = 0; w < buffers.size(); ++w) {
    const double offset = static_cast<double>(w * m.cfg.buffer_len);
    StreamFeatures feats;
    std::vector<ScoredSegment> props =
        buffer_proposals(m, buffers[w], &feats, m.cfg.infer_top_n);
    if (props.empty()) continue;

    std::vector<Segment> segs;
    segs.reserve(props.size());
    for (const ScoredSegment& p : props) segs.push_back(p.seg);

    Tensor pooled_rgb = roi_pool_rows(feats.rgb_c5, segs, m.cfg.roi_grid);
    Tensor pooled_flow;
    const Tensor* pooled_flow_ptr = nullptr;
    if (m.cfg.mode != FusionMode::single) {
      pooled_flow = roi_pool_rows(feats.flow_c5, segs, m.cfg.roi_grid);
      pooled_flow_ptr = &pooled_flow;
    }
    const ClassifierOutputs out = classify(m.cls, pooled_rgb, pooled_flow_ptr);
    const Tensor probs = softmax(out.class_logits);

    const size_t c1 = m.cfg.num_classes + 1;
    for (size_t i = 0; i < segs.size(); ++i) {
      for (size_t c = 1; c < c1; ++c) {
        const size_t rc = m.cls.class_agnostic_reg ? 0 : c - 1;
        const Offset off{out.offsets.flat((i * m.cls.reg_classes() + rc) * 2 + 0),
                         out.offsets.flat((i * m.cls.reg_classes() + rc) * 2 + 1)};
        Segment refined = decode(segs[i], off);
        refined.center += offset;
        const auto clipped = clip(refined, video_frames);
        if (!clipped) continue;
        candidates.push_back(
            ScoredSegment{*clipped, probs.flat(i * c1 + c), static_cast<int>(c - 1)});
      }
    }
  }

  // Per-class NMS at a threshold 0.1 below the evaluation tIoU.
  const double nms_thr = std::max(0.0, alpha_eval - 0.1);
  std::vector<ScoredSegment> final_dets;
  for (size_t c = 0; c < m.cfg.num_classes; ++c) {
    std::vector<ScoredSegment> of_class;
    for (const ScoredSegment& s : candidates) {
      if (s.label == static_cast<int>(c)) of_class.push_back(s);
    }
    for (ScoredSegment& s : nms(of_class, nms_thr)) final_dets.push_back(s);
  }
  std::stable_sort(final_dets.begin(), final_dets.end(),
                   [](const ScoredSegment& a, const ScoredSegment& b) {
                     return a.score > b.score;
                   });
  return final_dets;
}

std::vector<ScoredSegment> detect_proposals(const Model& m, const VideoSample& sample,
                                            size_t max_per_video) {
  const double video_frames = static_cast<double>(sample.num_frames());
  const std::vector<Buffer> buffers = build_buffers(sample, m.cfg.buffer_len, false, false);
  std::vector<ScoredSegment> all;
  for (size_t w = 0; w < buffers.size(); ++w) {
    const double offset = static_cast<double>(w * m.cfg.buffer_len);
    StreamFeatures feats;
    std::vector<ScoredSegment> props =
        buffer_proposals(m, buffers[w], &feats, m.cfg.infer_top_n);
    for (ScoredSegment& p : props) {
      Segment s = p.seg;
      s.center += offset;
      const auto clipped = clip(s, video_frames);
      if (clipped) all.push_back(ScoredSegment{*clipped, p.score, -1});
    }
  }
  std::vector<ScoredSegment> kept = select_proposals(all, max_per_video, 0.7);
  return kept;
}

}  // namespace tempo

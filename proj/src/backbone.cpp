#include "tempo/backbone.hpp"

#include <cmath>

#include "tempo/ops.hpp"

namespace tempo {

void BackboneConfig::validate() const {
  TEMPO_CHECK(widths.size() == 5, "backbone: expected 5 stage widths, got ", widths.size());
  for (size_t w : widths) TEMPO_CHECK(w >= 1, "backbone: zero stage width");
  TEMPO_CHECK(in_channels >= 1, "backbone: input channels must be >= 1");
}

const std::vector<std::string>& stream_layer_names() {
  static const std::vector<std::string> names = {"conv1a", "conv2a", "conv3a", "conv3b",
                                                 "conv4a", "conv4b", "conv5a", "conv5b"};
  return names;
}

namespace {

// Stage index (0-based) of each conv layer, in stream_layer_names() order.
constexpr int kLayerStage[8] = {0, 1, 2, 2, 3, 3, 4, 4};

Tensor init_conv_weight(size_t co, size_t ci, Rng& rng, DType dtype) {
  Tensor w = Tensor::zeros({co, ci, 3, 3, 3}, dtype);
  // Uniform bound sqrt(6/fan_in): keeps activation variance steady through
  // the relu stack.
  const double bound = std::sqrt(6.0 / static_cast<double>(ci * 27));
  const size_t n = w.numel();
  if (dtype == DType::f64) {
    double* p = w.mutable_data<double>();
    for (size_t i = 0; i < n; ++i) p[i] = rng.uniform(-bound, bound);
  } else {
    float* p = w.mutable_data<float>();
    for (size_t i = 0; i < n; ++i) p[i] = static_cast<float>(rng.uniform(-bound, bound));
  }
  return w;
}

}  // namespace

ParamStore init_stream(const BackboneConfig& cfg, Rng& rng, DType dtype) {
  cfg.validate();
  ParamStore store;
  size_t in_ch = cfg.in_channels;
  const auto& names = stream_layer_names();
  for (size_t i = 0; i < names.size(); ++i) {
    const size_t out_ch = cfg.widths[kLayerStage[i]];
    store.put(names[i] + ".weight", init_conv_weight(out_ch, in_ch, rng, dtype).with_grad());
    store.put(names[i] + ".bias", Tensor::zeros({out_ch}, dtype).with_grad());
    in_ch = out_ch;
  }
  return store;
}

Tensor stream_forward(const ParamStore& stream, const Tensor& input) {
  TEMPO_CHECK(input.rank() == 4, "backbone: input rank ", input.rank(), " != 4");
  TEMPO_CHECK(input.dim(2) % 16 == 0, "backbone: height ", input.dim(2),
              " not divisible by 16");
  TEMPO_CHECK(input.dim(3) % 16 == 0, "backbone: width ", input.dim(3),
              " not divisible by 16");
  Tensor x = input;
  if (x.dim(1) % 8 != 0) {
    TEMPO_CHECK(x.dim(1) % 8 == 7, "backbone: temporal extent ", x.dim(1),
                " not divisible by 8");
    x = pad_frames_zero(x, x.dim(1) + 1);
  }
  const auto& names = stream_layer_names();
  for (size_t i = 0; i < names.size(); ++i) {
    x = conv3d(x, stream.at(names[i] + ".weight"), stream.at(names[i] + ".bias"),
               {1, 1, 1}, {1, 1, 1});
    x = relu(x);
    // Pools close stages 1-4.
    if (names[i] == "conv1a") x = maxpool3d(x, {1, 2, 2}, {1, 2, 2});
    if (names[i] == "conv2a" || names[i] == "conv3b" || names[i] == "conv4b") {
      x = maxpool3d(x, {2, 2, 2}, {2, 2, 2});
    }
  }
  return x;
}

ParamStore init_flow_from_rgb(const ParamStore& rgb) {
  ParamStore flow;
  for (const auto& [name, t] : rgb.items) {
    if (name == "conv1a.weight") {
      const size_t co = t.dim(0), ci = t.dim(1);
      TEMPO_CHECK(ci == 3, "flow init: rgb first layer has ", ci, " input channels, not 3");
      const size_t k = t.dim(2) * t.dim(3) * t.dim(4);
      Tensor w = Tensor::zeros({co, 2, t.dim(2), t.dim(3), t.dim(4)}, t.dtype());
      for (size_t o = 0; o < co; ++o) {
        for (size_t j = 0; j < k; ++j) {
          double mean = 0;
          for (size_t c = 0; c < ci; ++c) mean += t.flat((o * ci + c) * k + j);
          mean /= static_cast<double>(ci);
          for (size_t c = 0; c < 2; ++c) {
            if (w.dtype() == DType::f64) {
              w.mutable_data<double>()[(o * 2 + c) * k + j] = mean;
            } else {
              w.mutable_data<float>()[(o * 2 + c) * k + j] = static_cast<float>(mean);
            }
          }
        }
      }
      flow.put(name, w.with_grad());
    } else {
      flow.put(name, t.clone().with_grad());
    }
  }
  return flow;
}

const char* fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::single: return "single";
    case FusionMode::two_sum: return "two_sum";
    case FusionMode::two_concat: return "two_concat";
  }
  return "?";
}

FusionMode parse_fusion_mode(const std::string& name) {
  if (name == "single") return FusionMode::single;
  if (name == "two_sum") return FusionMode::two_sum;
  if (name == "two_concat") return FusionMode::two_concat;
  fail("mode: unknown fusion mode '", name, "' (single|two_sum|two_concat)");
}

Tensor fuse(const Tensor& rgb_feat, const Tensor& flow_feat, FusionMode mode) {
  switch (mode) {
    case FusionMode::two_sum: return elementwise_sum(rgb_feat, flow_feat);
    case FusionMode::two_concat: return concat_channels(rgb_feat, flow_feat);
    case FusionMode::single: break;
  }
  fail("fuse: fusion requested in single-stream mode");
}

}  // namespace tempo

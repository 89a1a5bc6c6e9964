#pragma once

#include <vector>

#include "tempo/params.hpp"
#include "tempo/rng.hpp"

namespace tempo {

// Stage widths for the 3D conv trunk. Downsampling is fixed at x8 temporal
// and x16 spatial regardless of widths: stages pool at (1,2,2), (2,2,2),
// (2,2,2), (2,2,2) and the fifth stage keeps its resolution.
struct BackboneConfig {
  std::vector<size_t> widths = {8, 16, 32, 32, 32};
  size_t in_channels = 3;

  static BackboneConfig paper_scale() {
    BackboneConfig cfg;
    cfg.widths = {64, 128, 256, 512, 512};
    return cfg;
  }

  void validate() const;
  size_t out_channels() const { return widths.back(); }
};

// Layer names in network order; stages 3..5 have two convs each.
const std::vector<std::string>& stream_layer_names();

// Parameters of one stream, keyed "conv1a.weight" / "conv1a.bias" / ...
// Weights are fan-in-scaled centered uniform, biases zero.
ParamStore init_stream(const BackboneConfig& cfg, Rng& rng, DType dtype);

// [C_in, T, H, W] -> [C5, T/8, H/16, W/16]. H and W must be divisible by 16.
// A temporal extent one short of a multiple of 8 (the flow stream's L-1) is
// restored with one zero frame at the end; other misalignments are rejected.
Tensor stream_forward(const ParamStore& stream, const Tensor& input);

// Flow-stream initialization: identical to the RGB stream except the first
// conv kernels, which are the RGB kernels averaged over the input-channel
// axis, replicated across the 2 flow channels.
ParamStore init_flow_from_rgb(const ParamStore& rgb);

enum class FusionMode { single, two_sum, two_concat };

const char* fusion_mode_name(FusionMode m);
FusionMode parse_fusion_mode(const std::string& name);

// sum: element-wise, same shape; concat: channel axis doubled.
Tensor fuse(const Tensor& rgb_feat, const Tensor& flow_feat, FusionMode mode);

}  // namespace tempo

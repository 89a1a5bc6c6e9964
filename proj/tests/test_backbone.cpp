#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "gradcheck.hpp"
#include "tempo/backbone.hpp"
#include "tempo/ops.hpp"

using namespace tempo;

namespace {

Tensor rand_input(Shape shape, uint64_t seed) {
  Rng rng(seed);
  return gradcheck::randu(std::move(shape), rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("stream forward hits the contracted output shape") {
  BackboneConfig cfg;  // desk widths [8,16,32,32,32]
  Rng rng(3);
  ParamStore stream = init_stream(cfg, rng, DType::f64);
  Tensor out = stream_forward(stream, rand_input({3, 96, 32, 32}, 1));
  CHECK(out.shape() == Shape{32, 12, 2, 2});
}

TEST_CASE("shape contract holds over randomized valid sizes") {
  BackboneConfig cfg;
  cfg.widths = {2, 2, 4, 4, 4};
  Rng rng(4);
  ParamStore stream = init_stream(cfg, rng, DType::f64);
  Rng sizes(9);
  for (int i = 0; i < 6; ++i) {
    const size_t l = 8 * (1 + sizes.uniform_int(3));
    const size_t h = 16 * (1 + sizes.uniform_int(2));
    const size_t w = 16 * (1 + sizes.uniform_int(2));
    Tensor out = stream_forward(stream, rand_input({3, l, h, w}, 100 + i));
    CHECK(out.shape() == Shape{4, l / 8, h / 16, w / 16});
  }
  CHECK_THROWS_WITH_AS(stream_forward(stream, Tensor::zeros({3, 16, 20, 16})),
                       doctest::Contains("divisible"), Error);
  CHECK_THROWS_WITH_AS(stream_forward(stream, Tensor::zeros({3, 12, 16, 16})),
                       doctest::Contains("divisible"), Error);
}

TEST_CASE("paper-preset channel widths flow through") {
  BackboneConfig cfg = BackboneConfig::paper_scale();
  Rng rng(5);
  ParamStore stream = init_stream(cfg, rng, DType::f32);
  // Minimal valid spatial/temporal extent keeps this tractable; the
  // downsampling factors are the same as at any size.
  Tensor out = stream_forward(stream, Tensor::full({3, 8, 16, 16}, 0.5f, DType::f32));
  CHECK(out.shape() == Shape{512, 1, 1, 1});
}

TEST_CASE("flow stream pads its L-1 input with one zero frame") {
  BackboneConfig cfg;
  cfg.widths = {2, 2, 4, 4, 4};
  cfg.in_channels = 2;
  Rng rng(6);
  ParamStore stream = init_stream(cfg, rng, DType::f64);
  Tensor out = stream_forward(stream, rand_input({2, 23, 16, 16}, 2));
  CHECK(out.shape() == Shape{4, 3, 1, 1});
}

TEST_CASE("zero input with zero biases produces zero features, deterministically") {
  BackboneConfig cfg;
  cfg.widths = {2, 2, 4, 4, 4};
  Rng rng(7);
  ParamStore stream = init_stream(cfg, rng, DType::f64);
  Tensor a = stream_forward(stream, Tensor::zeros({3, 16, 16, 16}));
  CHECK(a.max_abs() == 0.0);
  Tensor b = stream_forward(stream, Tensor::zeros({3, 16, 16, 16}));
  CHECK(a.same_bits(b));
}

TEST_CASE("flow initialization averages first-layer kernels across channels") {
  BackboneConfig cfg;
  Rng rng(8);
  ParamStore rgb = init_stream(cfg, rng, DType::f64);
  ParamStore flow = init_flow_from_rgb(rgb);

  const Tensor& rw = rgb.at("conv1a.weight");
  const Tensor& fw = flow.at("conv1a.weight");
  CHECK(fw.dim(1) == 2);
  const size_t co = rw.dim(0), k = 27;
  for (size_t o = 0; o < co; ++o) {
    for (size_t j = 0; j < k; ++j) {
      const double mean =
          (rw.flat((o * 3 + 0) * k + j) + rw.flat((o * 3 + 1) * k + j) +
           rw.flat((o * 3 + 2) * k + j)) /
          3.0;
      CHECK(fw.flat((o * 2 + 0) * k + j) == doctest::Approx(mean).epsilon(1e-15));
      CHECK(fw.flat((o * 2 + 1) * k + j) == doctest::Approx(mean).epsilon(1e-15));
    }
  }
  // Deeper layers byte-identical.
  for (const char* name : {"conv2a.weight", "conv3a.weight", "conv5b.weight",
                           "conv3b.bias"}) {
    CHECK(flow.at(name).same_bits(rgb.at(name)));
  }
}

TEST_CASE("flow first layer gives 2/3 of the rgb response on channel-constant input") {
  BackboneConfig cfg;
  cfg.widths = {4, 4, 4, 4, 4};
  Rng rng(9);
  ParamStore rgb = init_stream(cfg, rng, DType::f64);
  ParamStore flow = init_flow_from_rgb(rgb);

  // Same constant image on every channel of both inputs; biases are zero at
  // initialization, so the first-layer responses obey the exact 2/3 ratio.
  Tensor plane = rand_input({1, 4, 16, 16}, 3);
  Tensor rgb_in = Tensor::zeros({3, 4, 16, 16});
  Tensor flow_in = Tensor::zeros({2, 4, 16, 16});
  for (size_t c = 0; c < 3; ++c)
    for (size_t i = 0; i < plane.numel(); ++i)
      rgb_in.mutable_data<double>()[c * plane.numel() + i] = plane.flat(i);
  for (size_t c = 0; c < 2; ++c)
    for (size_t i = 0; i < plane.numel(); ++i)
      flow_in.mutable_data<double>()[c * plane.numel() + i] = plane.flat(i);

  Tensor rgb_pre = conv3d(rgb_in, rgb.at("conv1a.weight"), rgb.at("conv1a.bias"),
                          {1, 1, 1}, {1, 1, 1});
  Tensor flow_pre = conv3d(flow_in, flow.at("conv1a.weight"), flow.at("conv1a.bias"),
                           {1, 1, 1}, {1, 1, 1});
  for (size_t i = 0; i < rgb_pre.numel(); ++i) {
    CHECK(flow_pre.flat(i) ==
          doctest::Approx(rgb_pre.flat(i) * 2.0 / 3.0).epsilon(1e-10));
  }
}

TEST_CASE("fusion: sum identity with zeros, concat doubles channels") {
  Tensor rgb = rand_input({4, 3, 2, 2}, 4);
  Tensor zero = Tensor::zeros({4, 3, 2, 2});
  Tensor summed = fuse(rgb, zero, FusionMode::two_sum);
  CHECK(summed.same_bits(rgb));  // x + 0.0 is bitwise x here

  Tensor cat = fuse(rgb, rgb, FusionMode::two_concat);
  CHECK(cat.shape() == Shape{8, 3, 2, 2});
  CHECK_THROWS_AS(fuse(rgb, zero, FusionMode::single), Error);

  // Sum commutes bitwise.
  Tensor other = rand_input({4, 3, 2, 2}, 5);
  CHECK(fuse(rgb, other, FusionMode::two_sum)
            .same_bits(fuse(other, rgb, FusionMode::two_sum)));
}

TEST_CASE("checkpoint round trip is bit exact and preserves forward results") {
  BackboneConfig cfg;
  cfg.widths = {2, 2, 4, 4, 4};
  Rng rng(10);
  ParamStore stream = init_stream(cfg, rng, DType::f64);
  Tensor input = rand_input({3, 16, 16, 16}, 6);
  Tensor before = stream_forward(stream, input);

  const std::string path =
      (std::filesystem::temp_directory_path() / "stream.tnsa").string();
  save_checkpoint(path, stream, "{}");
  std::string meta;
  ParamStore loaded = load_checkpoint(path, meta);
  CHECK(meta == "{}");
  REQUIRE(loaded.items.size() == stream.items.size());
  for (const auto& [name, t] : stream.items) CHECK(loaded.at(name).same_bits(t));

  Tensor after = stream_forward(loaded, input);
  CHECK(after.same_bits(before));
  std::filesystem::remove(path);
}

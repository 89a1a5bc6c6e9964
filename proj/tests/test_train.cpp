#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gradcheck.hpp"
#include "tempo/ops.hpp"
#include "tempo/train.hpp"

using namespace tempo;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_model_cfg() {
  ModelConfig mc;
  mc.backbone.widths = {2, 2, 4, 4, 4};
  mc.mode = FusionMode::single;
  mc.anchor_scales = {1, 2};
  mc.num_classes = 2;
  mc.hidden = 8;
  mc.roi_grid = RoiGrid{1, 1, 1};
  mc.buffer_len = 16;
  mc.fps_hint = 8.0;
  mc.train_top_n = 64;
  mc.infer_top_n = 16;
  return mc;
}

TrainConfig micro_train_cfg() {
  TrainConfig tc;
  tc.model = micro_model_cfg();
  tc.proposal_batch = 8;
  tc.cls_batch = 8;
  tc.lr = 0.01;
  tc.seed = 3;
  return tc;
}

SynthConfig micro_synth_cfg() {
  SynthConfig sc;
  sc.num_videos = 1;
  sc.num_classes = 2;
  sc.num_frames = 16;
  sc.height = sc.width = 16;
  sc.fps = 8.0;
  sc.min_duration_sec = 0.5;
  sc.max_duration_sec = 1.0;
  sc.min_activities = 1;
  sc.max_activities = 1;
  sc.seed = 5;
  return sc;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("tempo_train_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Buffer micro_buffer(bool with_gt) {
  TempDir dir(with_gt ? "buf1" : "buf0");
  SynthConfig sc = micro_synth_cfg();
  if (!with_gt) sc.min_activities = sc.max_activities = 0;
  Manifest m = synth_generate(sc, dir.path.string());
  VideoSample v = load_video(m, 0);
  return build_buffers(v, 16, false, false).at(0);
}

Model clone_model(const Model& m) {
  Model out = m;
  auto deep = [](ParamStore& store) {
    for (auto& [name, t] : store.items) {
      Tensor c = t.clone();
      c.set_requires_grad(t.requires_grad());
      store.put(name, c);
    }
  };
  deep(out.rgb_stream);
  deep(out.flow_stream);
  deep(out.prop.params);
  deep(out.cls.params);
  return out;
}

bool stores_equal(const ParamStore& a, const ParamStore& b, double tol) {
  if (a.items.size() != b.items.size()) return false;
  for (const auto& [name, t] : a.items) {
    const Tensor& o = b.at(name);
    if (t.shape() != o.shape()) return false;
    for (size_t i = 0; i < t.numel(); ++i) {
      if (std::fabs(t.flat(i) - o.flat(i)) > tol) return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("smooth l1 closed-form values through the offset-level helper") {
  // One row per case: the helper sums coordinates and averages rows.
  Tensor p = Tensor::from_f64({1, 2}, {0.0, 0.0});
  Tensor t = Tensor::from_f64({1, 2}, {0.0, 0.0});
  CHECK(smooth_l1(p, t).item() == 0.0);

  Tensor p2 = Tensor::from_f64({1, 2}, {0.5, 0.0});
  CHECK(smooth_l1(p2, t).item() == doctest::Approx(0.125).epsilon(1e-12));

  Tensor p3 = Tensor::from_f64({1, 2}, {2.0, 0.0});
  CHECK(smooth_l1(p3, t).item() == doctest::Approx(1.5).epsilon(1e-12));

  // Mean over rows.
  Tensor p4 = Tensor::from_f64({2, 2}, {0.5, 0.0, 2.0, 0.0});
  Tensor t4 = Tensor::zeros({2, 2});
  CHECK(smooth_l1(p4, t4).item() == doctest::Approx((0.125 + 1.5) / 2).epsilon(1e-12));

  CHECK(smooth_l1(Tensor::zeros({0, 2}), Tensor::zeros({0, 2})).item() == 0.0);
}

namespace {

// Straight-line scalar reference for Eq-style losses.
double scalar_joint_loss(const Tensor& logits, const std::vector<int>& labels,
                         const Tensor& reg_pred, const std::vector<Offset>& targets,
                         const std::vector<char>& fg, double lambda) {
  const size_t n = logits.dim(0), c = logits.dim(1);
  double ce = 0;
  for (size_t i = 0; i < n; ++i) {
    double mx = -1e300, z = 0;
    for (size_t j = 0; j < c; ++j) mx = std::max(mx, logits.flat(i * c + j));
    for (size_t j = 0; j < c; ++j) z += std::exp(logits.flat(i * c + j) - mx);
    ce += std::log(z) - (logits.flat(i * c + labels[i]) - mx);
  }
  ce /= static_cast<double>(n);
  double reg = 0;
  size_t npos = 0, k = 0;
  for (size_t i = 0; i < n; ++i) {
    if (!fg[i]) continue;
    ++npos;
    for (size_t coord = 0; coord < 2; ++coord) {
      const double target = coord == 0 ? targets[k].dc : targets[k].dl;
      const double d = reg_pred.flat(i * 2 + coord) - target;
      reg += std::fabs(d) < 1 ? 0.5 * d * d : std::fabs(d) - 0.5;
    }
    ++k;
  }
  if (npos == 0) return ce;
  return ce + lambda * reg / static_cast<double>(npos);
}

}  // namespace

TEST_CASE("joint loss matches an independently coded scalar reference") {
  Rng rng(21);
  for (int trial = 0; trial < 30; ++trial) {
    const size_t n = 1 + rng.uniform_int(12);
    const size_t c = 2 + rng.uniform_int(3);
    Tensor logits = gradcheck::randu({n, c}, rng, -2, 2);
    Tensor reg = gradcheck::randu({n, 2}, rng, -2, 2);
    std::vector<int> labels(n);
    std::vector<char> fg(n);
    std::vector<Offset> targets;
    for (size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng.uniform_int(c));
      fg[i] = rng.uniform() < 0.4 ? 1 : 0;
      if (fg[i]) targets.push_back(Offset{rng.uniform(-1, 1), rng.uniform(-1, 1)});
    }
    const double lambda = 0.25 + rng.uniform(0, 2);
    LossConfig cfg;
    cfg.lambda = lambda;
    JointLossParts got = joint_loss(logits, labels, reg, targets, fg, cfg);
    const double want = scalar_joint_loss(logits, labels, reg, targets, fg, lambda);
    CHECK(got.total.item() == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("joint loss gating: perfect predictions, lambda zero, empty foreground") {
  // Perfect predictions: regression contributes nothing; classification sits
  // at its entropy floor for the given margin.
  Tensor logits = Tensor::zeros({2, 3});
  logits.mutable_data<double>()[0] = 30.0;       // row 0 -> class 0
  logits.mutable_data<double>()[3 + 1] = 30.0;   // row 1 -> class 1
  std::vector<int> labels = {0, 1};
  std::vector<char> fg = {1, 1};
  std::vector<Offset> targets = {{0.5, 0.2}, {-0.1, 0.3}};
  Tensor reg = Tensor::from_f64({2, 2}, {0.5, 0.2, -0.1, 0.3});
  LossConfig cfg;
  JointLossParts out = joint_loss(logits, labels, reg, targets, fg, cfg);
  CHECK(out.reg == 0.0);
  CHECK(out.total.item() < 1e-12);

  // Lambda 0 leaves the pure classification loss.
  Rng rng(1);
  Tensor off = gradcheck::randu({2, 2}, rng, -3, 3);
  LossConfig zero;
  zero.lambda = 0.0;
  JointLossParts gated = joint_loss(logits, labels, off, targets, fg, zero);
  CHECK(gated.total.item() == doctest::Approx(out.cls).epsilon(1e-12));

  // No foreground rows: the regression term vanishes entirely.
  std::vector<char> none = {0, 0};
  JointLossParts bg_only = joint_loss(logits, labels, off, {}, none, cfg);
  CHECK(bg_only.reg == 0.0);
  CHECK(bg_only.total.item() == doctest::Approx(bg_only.cls).epsilon(1e-15));
}

TEST_CASE("joint loss is invariant under batch permutation") {
  Rng rng(22);
  const size_t n = 10;
  Tensor logits = gradcheck::randu({n, 4}, rng, -2, 2);
  Tensor reg = gradcheck::randu({n, 2}, rng, -2, 2);
  std::vector<int> labels(n);
  std::vector<char> fg(n);
  std::vector<Offset> targets;
  for (size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<int>(rng.uniform_int(4));
    fg[i] = i % 3 == 0;
    if (fg[i]) targets.push_back(Offset{0.2, -0.4});
  }
  LossConfig cfg;
  const double base = joint_loss(logits, labels, reg, targets, fg, cfg).total.item();

  // Reverse the batch.
  std::vector<size_t> perm(n);
  for (size_t i = 0; i < n; ++i) perm[i] = n - 1 - i;
  Tensor logits_p = gather_rows(logits, perm);
  Tensor reg_p = gather_rows(reg, perm);
  std::vector<int> labels_p(n);
  std::vector<char> fg_p(n);
  std::vector<Offset> targets_p;
  for (size_t i = 0; i < n; ++i) {
    labels_p[i] = labels[perm[i]];
    fg_p[i] = fg[perm[i]];
  }
  for (size_t i = 0; i < n; ++i) {
    if (!fg_p[i]) continue;
    size_t k = 0;
    for (size_t j = 0; j < perm[i]; ++j) k += fg[j] ? 1 : 0;
    targets_p.push_back(targets[k]);
  }
  const double permuted =
      joint_loss(logits_p, labels_p, reg_p, targets_p, fg_p, cfg).total.item();
  CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("sgd follows the momentum and weight decay recurrences") {
  // Decay only: zero gradient, zero velocity.
  ParamStore params;
  params.put("w", Tensor::from_f64({2}, {2.0, -4.0}).with_grad());
  GradMap grads;
  grads.by_id.emplace(params.at("w").id(), Tensor::zeros({2}));
  OptimState state;
  ParamStore out = sgd_step(params, grads, state, 0.1);
  CHECK(out.at("w").flat(0) == doctest::Approx(2.0 - 0.1 * 0.0005 * 2.0).epsilon(1e-15));
  CHECK(out.at("w").flat(1) == doctest::Approx(-4.0 + 0.1 * 0.0005 * 4.0).epsilon(1e-15));

  // One step on a scalar with a hand-computed update.
  ParamStore p2;
  p2.put("x", Tensor::from_f64({1}, {3.0}).with_grad());
  GradMap g2;
  g2.by_id.emplace(p2.at("x").id(), Tensor::from_f64({1}, {1.5}));
  OptimState s2;
  SgdConfig cfg;  // momentum 0.9, wd 5e-4
  ParamStore o2 = sgd_step(p2, g2, s2, 0.2, cfg);
  const double v1 = 1.5 + 0.0005 * 3.0;
  CHECK(o2.at("x").flat(0) == doctest::Approx(3.0 - 0.2 * v1).epsilon(1e-15));

  // Two identical-gradient steps without decay: v2 = 1.9 g.
  ParamStore p3;
  p3.put("y", Tensor::from_f64({1}, {0.0}).with_grad());
  SgdConfig nodecay;
  nodecay.weight_decay = 0.0;
  OptimState s3;
  GradMap g3;
  g3.by_id.emplace(p3.at("y").id(), Tensor::from_f64({1}, {1.0}));
  ParamStore r1 = sgd_step(p3, g3, s3, 1.0, nodecay);
  GradMap g4;
  g4.by_id.emplace(r1.at("y").id(), Tensor::from_f64({1}, {1.0}));
  ParamStore r2 = sgd_step(r1, g4, s3, 1.0, nodecay);
  CHECK(s3.velocity.at("y").flat(0) == doctest::Approx(1.9).epsilon(1e-15));
  CHECK(r2.at("y").flat(0) == doctest::Approx(0.0 - 1.0 - 1.9).epsilon(1e-15));

  // lr = 0 and wd = 0 leaves parameters bit-stable.
  ParamStore p4;
  p4.put("z", Tensor::from_f64({3}, {1.0, 2.0, 3.0}).with_grad());
  GradMap g5;
  g5.by_id.emplace(p4.at("z").id(), Tensor::from_f64({3}, {5.0, -1.0, 0.25}));
  OptimState s4;
  ParamStore r4 = sgd_step(p4, g5, s4, 0.0, nodecay);
  CHECK(r4.at("z").same_bits(p4.at("z")));

  // Non-finite gradients abort with the parameter named.
  GradMap bad;
  bad.by_id.emplace(p4.at("z").id(),
                    Tensor::from_f64({3}, {1.0, std::nan(""), 0.0}));
  OptimState s5;
  CHECK_THROWS_WITH_AS(sgd_step(p4, bad, s5, 0.1), doctest::Contains("'z'"), Error);
}

TEST_CASE("a step on a buffer without ground truth trains without error") {
  Model m = init_model(micro_model_cfg(), 17);
  Buffer buf = micro_buffer(false);
  TrainConfig tc = micro_train_cfg();
  StepRngs rngs{Rng(1), Rng(2)};
  OptimState optim;
  const StepLosses losses = train_step(m, buf, tc, rngs, optim, 0.005);
  CHECK(losses.prop_reg == 0.0);  // no positives anywhere
  CHECK(losses.cls_reg == 0.0);
  CHECK(losses.total > 0.0);
}

TEST_CASE("background proposals contribute zero regression gradient") {
  Model m = init_model(micro_model_cfg(), 18);
  Buffer buf = micro_buffer(true);
  TrainConfig tc = micro_train_cfg();
  tc.sampler = ClsSampler::full;

  Tensor rgb = buf.rgb.astype(DType::f64);
  Tape tape;
  Tape::Scope scope(tape);
  StreamFeatures feats = forward_features(m, rgb, nullptr);
  ProposalPredictions preds = forward_proposals(m, feats);
  StepRngs rngs{Rng(1), Rng(2)};
  StepPlan plan = make_step_plan(m, feats, preds, buf.annotations, tc, rngs);

  StepLosses parts;
  const double base = step_loss(m, feats, preds, plan, tc.loss, &parts).item();

  // Perturbing regression targets of background proposals changes nothing.
  StepPlan tweaked = plan;
  bool any_bg = false;
  for (size_t i = 0; i < tweaked.cls_labeling.labels.size(); ++i) {
    if (tweaked.cls_labeling.labels[i] == 0) {
      tweaked.cls_labeling.targets[i] = Offset{123.0, -77.0};
      any_bg = true;
    }
  }
  REQUIRE(any_bg);
  const double tweaked_loss = step_loss(m, feats, preds, tweaked, tc.loss, nullptr).item();
  CHECK(tweaked_loss == base);
}

TEST_CASE("an ohem step with top_n covering everything equals a full-batch step") {
  const Model base = init_model(micro_model_cfg(), 19);
  Buffer buf = micro_buffer(true);

  Model ohem_model = clone_model(base);
  Model full_model = clone_model(base);

  TrainConfig ohem_cfg = micro_train_cfg();
  ohem_cfg.sampler = ClsSampler::ohem;
  ohem_cfg.ohem_top_n = 100000;  // larger than any candidate set
  TrainConfig full_cfg = micro_train_cfg();
  full_cfg.sampler = ClsSampler::full;

  OptimState opt_a, opt_b;
  StepRngs rngs_a{Rng(7), Rng(8)}, rngs_b{Rng(7), Rng(8)};
  train_step(ohem_model, buf, ohem_cfg, rngs_a, opt_a, 0.01);
  train_step(full_model, buf, full_cfg, rngs_b, opt_b, 0.01);

  CHECK(stores_equal(ohem_model.all_params(), full_model.all_params(), 1e-10));
}

TEST_CASE("end-to-end micro-graph gradients match finite differences") {
  Model m = init_model(micro_model_cfg(), 20);
  // Zero-initialized heads would null the trunk gradients; randomize them so
  // the check exercises every layer.
  {
    Rng rng(200);
    for (const char* key : {"score.weight", "offset.weight"}) {
      Tensor t = m.prop.params.at(key).clone();
      for (size_t i = 0; i < t.numel(); ++i) t.mutable_data<double>()[i] = 0.1 * rng.normal();
      t.set_requires_grad(true);
      m.prop.params.put(key, t);
    }
    for (const char* key : {"class.weight", "reg.weight"}) {
      Tensor t = m.cls.params.at(key).clone();
      for (size_t i = 0; i < t.numel(); ++i) t.mutable_data<double>()[i] = 0.1 * rng.normal();
      t.set_requires_grad(true);
      m.cls.params.put(key, t);
    }
  }
  Buffer buf = micro_buffer(true);
  TrainConfig tc = micro_train_cfg();
  tc.sampler = ClsSampler::full;  // deterministic plan, no sampling noise

  Tensor rgb = buf.rgb.astype(DType::f64);

  // Freeze the plan once; the loss is then a differentiable function of the
  // weights alone (proposals are constants by construction).
  StepPlan plan;
  {
    Tape tape;
    Tape::Scope scope(tape);
    StreamFeatures feats = forward_features(m, rgb, nullptr);
    ProposalPredictions preds = forward_proposals(m, feats);
    StepRngs rngs{Rng(1), Rng(2)};
    plan = make_step_plan(m, feats, preds, buf.annotations, tc, rngs);
  }
  REQUIRE(!plan.prop_batch.empty());
  REQUIRE(!plan.cls_batch.empty());

  auto loss_t = [&]() {
    StreamFeatures feats = forward_features(m, rgb, nullptr);
    ProposalPredictions preds = forward_proposals(m, feats);
    return step_loss(m, feats, preds, plan, tc.loss, nullptr);
  };
  auto loss_v = [&]() { return loss_t().item(); };

  Tape tape;
  GradMap grads;
  {
    Tape::Scope scope(tape);
    m.watch_all(tape);
    grads = tape.backward(loss_t());
  }

  Rng pick(99);
  const ParamStore all = m.all_params();
  for (const auto& [name, p] : all.items) {
    if (!p.requires_grad()) continue;
    const Tensor& g = grads.for_param(p);
    std::vector<size_t> coords;
    if (p.numel() <= 8) {
      for (size_t i = 0; i < p.numel(); ++i) coords.push_back(i);
    } else {
      for (int i = 0; i < 8; ++i) coords.push_back(pick.uniform_int(p.numel()));
    }
    Tensor handle = p;  // shares storage; FD perturbs it in place
    const double err = gradcheck::max_rel_error(handle, g, loss_v, coords);
    INFO("parameter ", name);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("training overfits one video and reproduces logs from the seed") {
  TempDir corpus("overfit_corpus");
  SynthConfig sc = micro_synth_cfg();
  sc.num_frames = 32;
  Manifest manifest = synth_generate(sc, corpus.path.string());

  TrainConfig tc = micro_train_cfg();
  tc.model.buffer_len = 32;
  tc.epochs = 50;  // one video: one iteration per epoch
  tc.lr = 0.02;
  tc.seed = 11;
  tc.checkpoint_every = 0;
  tc.model.class_names = manifest.classes;

  TempDir run1("overfit_run1"), run2("overfit_run2");
  train(manifest, tc, run1.path.string());
  train(manifest, tc, run2.path.string());

  std::ifstream l1(run1.path / "log.csv"), l2(run2.path / "log.csv");
  const std::string log1((std::istreambuf_iterator<char>(l1)), {});
  const std::string log2((std::istreambuf_iterator<char>(l2)), {});
  CHECK(log1 == log2);  // bit-identical logs from a fixed seed

  // Total loss at the last iteration is strictly below the first.
  std::vector<double> totals;
  std::istringstream ss(log1);
  std::string line;
  std::getline(ss, line);  // header
  while (std::getline(ss, line)) {
    const size_t comma = line.rfind(',');
    totals.push_back(std::stod(line.substr(comma + 1)));
  }
  REQUIRE(totals.size() == 50);
  CHECK(totals.back() < totals.front());
}

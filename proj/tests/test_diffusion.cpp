#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "layerforge/diffusion.hpp"
#include "layerforge/errors.hpp"
#include "layerforge/random.hpp"

using namespace layerforge;
using namespace layerforge::diffusion;
using denoiser::BranchId;

namespace {

denoiser::DenoiserConfig small_config() {
  denoiser::DenoiserConfig c;
  c.widths = {8, 16};
  c.heads = 2;
  c.d_txt = 16;
  c.groups = 4;
  return c;
}

std::vector<TrainSample> fixture(int n, int k, std::uint64_t seed = 0) {
  synth::Constraints c;
  c.min_layers = c.max_layers = k;
  std::vector<TrainSample> out;
  for (int i = 0; i < n; ++i) {
    auto s = synth::generate_scene(seed + static_cast<std::uint64_t>(i), c);
    out.push_back({quantized(s.image), s.prompt});
  }
  return out;
}

std::vector<const TrainSample*> pointers(const std::vector<TrainSample>& data) {
  std::vector<const TrainSample*> p;
  for (const auto& s : data) p.push_back(&s);
  return p;
}

Tensor noise(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  Tensor t(std::move(shape));
  for (float& v : t.values()) v = d(rng);
  return t;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "layerforge_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Schedule, LinearEndpointsAndMonotonicity) {
  const auto s = schedule_tables(ScheduleKind::Linear, 1000);
  ASSERT_EQ(s.beta.size(), 1001u);
  EXPECT_DOUBLE_EQ(s.alpha_bar[0], 1.0);
  EXPECT_NEAR(s.beta[1], 1e-4, 1e-15);
  EXPECT_NEAR(s.beta[1000], 0.02, 1e-15);
  for (int t = 2; t <= 1000; ++t) {
    EXPECT_LT(s.beta[t - 1], s.beta[t]);
    EXPECT_GT(s.beta[t], 0.0);
    EXPECT_LT(s.beta[t], 1.0);
  }
  for (int t = 1; t <= 1000; ++t) EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
}

TEST(Schedule, AlphaBarMatchesLoopOracle) {
  const auto s = schedule_tables(ScheduleKind::Linear, 1000);
  double prod = 1.0;
  for (int i = 0; i < 1000; ++i) prod *= 1.0 - (1e-4 + i * (0.02 - 1e-4) / 999.0);
  EXPECT_NEAR(s.alpha_bar[1000], prod, 1e-12);
}

TEST(Schedule, CosineAndErrors) {
  const auto s = schedule_tables(ScheduleKind::Cosine, 200);
  for (int t = 1; t <= 200; ++t) {
    EXPECT_GT(s.beta[t], 0.0);
    EXPECT_LT(s.beta[t], 1.0);
    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
  }
  EXPECT_EQ(parse_schedule_kind("cosine"), ScheduleKind::Cosine);
  EXPECT_EQ(to_string(parse_schedule_kind("linear")), "linear");
  EXPECT_THROW(parse_schedule_kind("sigmoid"), ValidationError);
  EXPECT_THROW(schedule_tables(ScheduleKind::Linear, 1), ValidationError);
}

TEST(AddNoise, WorkedExamples) {
  auto s = schedule_tables(ScheduleKind::Linear, 10);
  const Tensor x0({1}, 1.0f), eps({1}, 0.5f);
  EXPECT_FLOAT_EQ(add_noise(x0, 0, eps, s)[0], 1.0f);
  s.alpha_bar[3] = 0.25;
  EXPECT_NEAR(add_noise(x0, 3, eps, s)[0], 0.5 + std::sqrt(0.75) * 0.5, 1e-6);
  EXPECT_NEAR(add_noise(x0, 3, eps, s)[0], 0.9330, 1e-4);
  s.alpha_bar[4] = 0.0;
  EXPECT_FLOAT_EQ(add_noise(x0, 4, eps, s)[0], 0.5f);
}

TEST(AddNoise, IsAffineInCleanImageAndNoise) {
  const auto s = schedule_tables();
  const Tensor a = noise({4, 6, 6}, 1), b = noise({4, 6, 6}, 2), e1 = noise({4, 6, 6}, 3), e2 = noise({4, 6, 6}, 4);
  Tensor ab = a, ee = e1;
  for (std::size_t i = 0; i < ab.size(); ++i) {
    ab[i] = 0.3f * a[i] + 0.7f * b[i];
    ee[i] = 0.3f * e1[i] + 0.7f * e2[i];
  }
  const Tensor lhs = add_noise(ab, 400, ee, s);
  const Tensor r1 = add_noise(a, 400, e1, s), r2 = add_noise(b, 400, e2, s);
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], 0.3f * r1[i] + 0.7f * r2[i], 1e-5);
}

TEST(AddNoise, RejectsBadInputs) {
  const auto s = schedule_tables(ScheduleKind::Linear, 100);
  const Tensor x({2, 2}), e({2, 2}), other({3});
  EXPECT_THROW(add_noise(x, -1, e, s), ValidationError);
  EXPECT_THROW(add_noise(x, 101, e, s), ValidationError);
  EXPECT_THROW(add_noise(x, 5, other, s), DimensionError);
}

TEST(Targets, EncodeAndDecodeRoundTrip) {
  const auto data = fixture(1, 2);
  const auto& img = data[0].image;
  const Tensor t = branch_targets(img);
  ASSERT_EQ(t.shape(), (Shape{4, 4, 32, 32}));
  const std::size_t plane = 32 * 32;
  for (int b : {0, 3})
    for (std::size_t p = 0; p < plane; ++p) EXPECT_EQ(t[(b * 4 + 3) * plane + p], 1.0f);
  for (float v : t.values()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
  std::vector<Tensor> branches;
  for (int b = 0; b < 4; ++b)
    branches.emplace_back(Shape{4, 32, 32}, std::vector<float>(t.data() + b * 4 * plane, t.data() + (b + 1) * 4 * plane));
  const Decoded d = decode_branches(branches);
  EXPECT_NO_THROW(validate(d.image));
  EXPECT_LT(max_abs_diff(d.global, composite_closed_form(img)), 1e-6);
  EXPECT_LT(max_abs_diff(composite_closed_form(d.image), composite_closed_form(img)), 1e-5);
  for (std::size_t p = 0; p < plane; ++p) EXPECT_NEAR(d.image.foregrounds[1].alpha.values[p], img.foregrounds[1].alpha.values[p], 1e-6);
}

TEST(Loss, ZeroForExactPredictionAndMeanInvariant) {
  const Tensor eps = noise({4, 4, 8, 8}, 7);
  EXPECT_EQ(branch_loss(eps, eps, 2, 1), 0.0);

  const Tensor pred = noise({4, 4, 8, 8}, 8);
  const double one = branch_loss(pred, eps, 2, 1);
  Tensor pred2({8, 4, 8, 8}), eps2({8, 4, 8, 8});
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred2[i] = pred2[i + pred.size()] = pred[i];
    eps2[i] = eps2[i + eps.size()] = eps[i];
  }
  EXPECT_NEAR(branch_loss(pred2, eps2, 2, 2), one, 1e-12);
}

TEST(Loss, ExcludesGlobalAndBackgroundAlpha) {
  const Tensor eps = noise({3, 4, 8, 8}, 9);
  Tensor pred = eps;
  const std::size_t plane = 64;
  for (int b : {0, 2})
    for (std::size_t p = 0; p < plane; ++p) pred[(b * 4 + 3) * plane + p] += 5.0f;
  EXPECT_EQ(branch_loss(pred, eps, 1, 1), 0.0);
  pred[(1 * 4 + 3) * plane] += 1.0f;  // foreground alpha counts
  EXPECT_NEAR(branch_loss(pred, eps, 1, 1), 1.0 / (4 * plane) / 3.0, 1e-9);
  // Background color: one unit error over its 3 scored channels.
  Tensor pred3 = eps;
  pred3[(2 * 4) * plane] += 1.0f;
  EXPECT_NEAR(branch_loss(pred3, eps, 1, 1), 1.0 / (3 * plane) / 3.0, 1e-9);
  const auto mask = loss_mask(1, 8, 8);
  EXPECT_EQ(mask[(0 * 4 + 3) * plane], 0.0f);
  EXPECT_EQ(mask[(1 * 4 + 3) * plane], 1.0f);
  EXPECT_EQ(mask[(2 * 4 + 3) * plane], 0.0f);
}

TEST(Train, StepReportsConsistentLosses) {
  denoiser::Denoiser net(small_config(), 3);
  const auto data = fixture(2, 2);
  AdamW opt;
  std::mt19937_64 rng(1);
  StepOptions o;
  o.update = false;
  const StepLoss l = train_step(net, opt, schedule_tables(), pointers(data), rng, o);
  EXPECT_TRUE(std::isfinite(l.loss));
  EXPECT_NEAR(l.loss, (l.global + 2 * l.foreground + l.background) / 4.0, 1e-9);
  EXPECT_EQ(opt.step, 0);
}

TEST(Train, TenStepsReduceLossOnFixture) {
  denoiser::Denoiser net(small_config(), 5);
  const auto data = fixture(4, 1, 20);
  const auto sched = schedule_tables();
  AdamW opt;
  opt.lr = 1e-3;
  StepOptions probe;
  probe.update = false;
  auto eval = [&] {
    std::mt19937_64 rng(99);  // same timesteps and noise every time
    return train_step(net, opt, sched, pointers(data), rng, probe).loss;
  };
  const double before = eval();
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10; ++i) train_step(net, opt, sched, pointers(data), rng);
  EXPECT_EQ(opt.step, 10);
  EXPECT_LT(eval(), before);
}

TEST(Train, SharedNoiseIsDeterministicAndDistinct) {
  // Same seed, same draw; switching the flag changes the noise.
  denoiser::Denoiser net(small_config(), 6);
  const auto data = fixture(1, 2);
  AdamW opt;
  StepOptions o;
  o.update = false;
  o.shared_eps = true;
  std::mt19937_64 a(3), b(3);
  const StepLoss s1 = train_step(net, opt, schedule_tables(), pointers(data), a, o);
  const StepLoss s2 = train_step(net, opt, schedule_tables(), pointers(data), b, o);
  EXPECT_EQ(s1.loss, s2.loss);
  o.shared_eps = false;
  std::mt19937_64 c(3);
  EXPECT_NE(train_step(net, opt, schedule_tables(), pointers(data), c, o).loss, s1.loss);
}

TEST(Train, MixedLayerCountsAreRejected) {
  denoiser::Denoiser net(small_config(), 6);
  auto data = fixture(1, 1);
  const auto more = fixture(1, 2);
  data.push_back(more[0]);
  AdamW opt;
  std::mt19937_64 rng(0);
  EXPECT_THROW(train_step(net, opt, schedule_tables(), pointers(data), rng), ValidationError);
}

TEST(Train, NonFiniteLossAbortsWithoutUpdating) {
  denoiser::Denoiser net(small_config(), 6);
  const auto data = fixture(1, 1);
  net.param("out.w")->value[0] = std::nanf("");
  const Tensor before = net.param("down0.res.conv1.w")->value;
  AdamW opt;
  std::mt19937_64 rng(0);
  EXPECT_THROW(train_step(net, opt, schedule_tables(), pointers(data), rng), NumericError);
  EXPECT_EQ(opt.step, 0);
  EXPECT_EQ(net.param("down0.res.conv1.w")->value.storage(), before.storage());
}

TEST(Train, AdamWDecaysMatricesOnly) {
  auto w = ag::parameter(Tensor({2, 2}, 1.0f));
  auto b = ag::parameter(Tensor({2}, 1.0f));
  w->grad = Tensor({2, 2});
  b->grad = Tensor({2});
  AdamW opt;
  opt.lr = 0.1;
  opt.weight_decay = 0.5;
  opt.update({{"w", w}, {"b", b}});
  EXPECT_NEAR(w->value[0], 1.0 - 0.1 * 0.5, 1e-6);
  EXPECT_EQ(b->value[0], 1.0f);
}

TEST(Train, BatchSamplerGroupsByLayerCount) {
  auto data = fixture(5, 1);
  for (auto& s : fixture(3, 3, 50)) data.push_back(s);
  BatchSampler a(data, 4, 11), b(data, 4, 11);
  for (int i = 0; i < 20; ++i) {
    const auto batch = a.next();
    ASSERT_EQ(batch.size(), 4u);
    for (const auto* s : batch) EXPECT_EQ(s->image.layer_count(), batch[0]->image.layer_count());
    EXPECT_EQ(batch, b.next());
  }
}

TEST(Train, ConfigJson) {
  TrainConfig c;
  c.steps = 7;
  c.shared_eps = true;
  EXPECT_EQ(train_config_from_json(to_json(c)), c);
  auto j = to_json(c);
  j["ema"] = 0.999;
  EXPECT_THROW(train_config_from_json(j), ValidationError);
  j = to_json(c);
  j["batch_size"] = 0;
  EXPECT_THROW(train_config_from_json(j), ValidationError);
  j["batch_size"] = "eight";
  EXPECT_THROW(train_config_from_json(j), ValidationError);
}

TEST(Train, RunDirectoryContents) {
  denoiser::Denoiser net(small_config(), 8);
  const auto data = fixture(3, 1);
  TrainConfig c;
  c.steps = 3;
  c.batch_size = 2;
  c.checkpoint_every = 2;
  c.sample_grid = 2;
  const auto dir = temp_dir("train_run");
  auto sched = schedule_tables(ScheduleKind::Linear, 20);
  int calls = 0;
  const auto r = train(net, data, sched, c, dir, {{"train", to_json(c)}}, [&](int, const StepLoss&) { ++calls; });
  EXPECT_EQ(r.history.size(), 3u);
  EXPECT_EQ(calls, 3);
  for (const char* f : {"config.json", "loss.csv", "model.ckpt", "samples.png", "checkpoints/step_000002.ckpt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  std::ifstream csv(dir / "loss.csv");
  std::string header, line;
  std::getline(csv, header);
  EXPECT_EQ(header, "step,loss,global,foreground,background");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3);
  const auto loaded = denoiser::Denoiser::load(dir / "model.ckpt");
  EXPECT_EQ(loaded.param("out.w")->value.storage(), net.param("out.w")->value.storage());
}

TEST(Sampler, ConfigValidationAndTimesteps) {
  const auto s = schedule_tables();
  SamplerConfig c;
  EXPECT_NO_THROW(validate(c, s));
  c.steps = 0;
  EXPECT_THROW(validate(c, s), ValidationError);
  c.steps = 1001;
  EXPECT_THROW(validate(c, s), ValidationError);
  c.steps = 50;
  c.eta = 1.5;
  EXPECT_THROW(validate(c, s), ValidationError);
  const auto ts = ddim_timesteps(50, 1000);
  ASSERT_EQ(ts.size(), 50u);
  EXPECT_EQ(ts.front(), 981);
  EXPECT_EQ(ts.back(), 1);
  for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
}

TEST(Sampler, DeterministicAndValid) {
  const denoiser::Denoiser net(small_config(), 9);
  const auto prompt = fixture(1, 2)[0].prompt;
  const auto sched = schedule_tables(ScheduleKind::Linear, 100);
  SamplerConfig c;
  c.steps = 5;
  c.seed = 17;
  const auto a = sample_tensors(net, prompt, sched, c), b = sample_tensors(net, prompt, sched, c);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].storage(), b[i].storage());
  c.seed = 18;
  EXPECT_NE(sample_tensors(net, prompt, sched, c)[1].storage(), a[1].storage());

  c.seed = 17;
  const Decoded d = sample(net, prompt, sched, c);
  EXPECT_EQ(d.image.layer_count(), 2);
  EXPECT_NO_THROW(validate(d.image));
  const auto path = temp_dir("sampler") / "out.lfa";
  save_archive({quantized(d.image), synth::to_json(prompt), 17}, path);
  const auto back = load_archive(path);
  EXPECT_NO_THROW(validate(back.image));
  EXPECT_LT(max_abs_diff(composite_closed_form(back.image), composite_closed_form(quantized(d.image))), 1e-12);
}

TEST(Sampler, StochasticEtaUsesBranchStreams) {
  const denoiser::Denoiser net(small_config(), 9);
  const auto prompt = fixture(1, 1)[0].prompt;
  const auto sched = schedule_tables(ScheduleKind::Linear, 100);
  SamplerConfig c;
  c.steps = 4;
  c.eta = 1.0;
  const auto a = sample_tensors(net, prompt, sched, c), b = sample_tensors(net, prompt, sched, c);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].storage(), b[i].storage());
  EXPECT_NE(branch_stream(0, BranchId::global()), branch_stream(0, BranchId::background()));
  EXPECT_NE(branch_stream(0, BranchId::foreground(1)), branch_stream(0, BranchId::foreground(2)));
}

TEST(Sampler, TogglesOffFactorizesIntoSingleBranchRuns) {
  denoiser::Denoiser net(small_config(), 10);
  net.set_toggles(false, false);
  const auto prompt = fixture(1, 2)[0].prompt;
  const auto sched = schedule_tables(ScheduleKind::Linear, 100);
  SamplerConfig c;
  c.steps = 4;
  c.seed = 5;
  const auto joint = sample_tensors(net, prompt, sched, c);
  const auto order = denoiser::branch_order(2);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Tensor alone = sample_single_branch(net, order[i], denoiser::branch_tokens(prompt, order[i]), sched, c);
    double worst = 0.0;
    for (std::size_t j = 0; j < alone.size(); ++j) worst = std::max(worst, std::abs(double(alone[j]) - joint[i][j]));
    EXPECT_LT(worst, 1e-5) << denoiser::to_string(order[i]);
  }
}

TEST(Sampler, GridLayout) {
  const denoiser::Denoiser net(small_config(), 9);
  const auto sched = schedule_tables(ScheduleKind::Linear, 50);
  SamplerConfig c;
  c.steps = 2;
  std::vector<Decoded> images;
  for (const auto& s : fixture(2, 1)) images.push_back(sample(net, s.prompt, sched, c));
  const auto grid = sample_grid(images, 3);
  EXPECT_EQ(grid.channels, 3);
  EXPECT_EQ(grid.width, 5 * 32 + 6 * 2);
  EXPECT_EQ(grid.height, 2 * 32 + 3 * 2);
}

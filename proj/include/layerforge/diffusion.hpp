#pragma once

// DDPM noise schedule, multi-branch training and DDIM sampling.
//
// Branch tensors are 4 x H x W in [-1, 1]. Foregrounds carry premultiplied
// color plus alpha; the global composite and the background carry RGB plus a
// constant alpha channel of 1 that is never noised and never scored.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerforge/compositing.hpp"
#include "layerforge/image_io.hpp"
#include "layerforge/denoiser.hpp"
#include "layerforge/synthdata.hpp"

namespace layerforge::diffusion {

enum class ScheduleKind { Linear, Cosine };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

// Index t runs over 0..T; t = 0 is the clean image (alpha_bar = 1, beta = 0).
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::Linear;
  int steps = 1000;
  std::vector<double> beta, alpha, alpha_bar;
};

NoiseSchedule schedule_tables(ScheduleKind kind = ScheduleKind::Linear, int steps = 1000);

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps
Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// data

struct TrainSample {
  LayeredImage image;
  synth::PromptSpec prompt;
};

// [(K + 2), 4, H, W] targets in branch order.
Tensor branch_targets(const LayeredImage& image);

// Loss weight per element: alpha channels of GLOBAL and BACKGROUND are zero.
Tensor loss_mask(int k, int height, int width);

// Inverse of branch_targets for one sampled set of branch tensors: alpha is
// clamped to [0, 1] and color is un-premultiplied where alpha > 1e-3.
struct Decoded {
  LayeredImage image;
  RgbImage global;
};
Decoded decode_branches(const std::vector<Tensor>& branches);

std::vector<TrainSample> load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// training

struct AdamW {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  long step = 0;
  std::vector<Tensor> m, v;

  void update(const std::vector<std::pair<std::string, ag::Var>>& params);
};

struct StepLoss {
  double loss = 0.0;
  double global = 0.0;      // mean over samples
  double foreground = 0.0;  // mean over samples and foreground branches
  double background = 0.0;
  double grad_norm = 0.0;   // before clipping
};

struct StepOptions {
  bool shared_eps = false;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  bool update = true;
};

// One optimizer update on a batch whose samples all have the same K. Throws
// NumericError (without touching the weights) when the loss is not finite.
StepLoss train_step(denoiser::Denoiser& net, AdamW& opt, const NoiseSchedule& sched,
                    const std::vector<const TrainSample*>& batch, std::mt19937_64& rng, const StepOptions& options = {});

// Loss of fixed predictions against fixed noise, with the same weighting as
// train_step. `pred` and `eps` are [B * (K + 2), 4, H, W].
double branch_loss(const Tensor& pred, const Tensor& eps, int k, int batch);

struct TrainConfig {
  int steps = 2000;
  int batch_size = 8;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  bool shared_eps = false;
  int log_every = 1;
  int checkpoint_every = 500;
  int sample_grid = 4;  // scenes in the final sample grid; 0 disables
  std::uint64_t seed = 0;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Draws batches of equal K, sampling a K group in proportion to its size and
// then walking a shuffled order within it.
class BatchSampler {
 public:
  BatchSampler(const std::vector<TrainSample>& data, int batch_size, std::uint64_t seed);
  std::vector<const TrainSample*> next();

 private:
  const std::vector<TrainSample>& data_;
  int batch_size_;
  std::mt19937_64 rng_;
  std::vector<std::vector<int>> groups_;
  std::vector<std::size_t> cursor_;
};

struct TrainResult {
  std::vector<StepLoss> history;  // one entry per step
};

// Trains in `run_dir`: config.json (the caller's snapshot), loss.csv,
// checkpoints/step_NNNNNN.ckpt, model.ckpt and samples.png.
TrainResult train(denoiser::Denoiser& net, const std::vector<TrainSample>& data, const NoiseSchedule& sched,
                  const TrainConfig& cfg, const std::filesystem::path& run_dir, const nlohmann::json& config_snapshot,
                  const std::function<void(int, const StepLoss&)>& on_step = {});

// ---------------------------------------------------------------------------
// sampling

struct SamplerConfig {
  int steps = 50;
  double eta = 0.0;
  std::uint64_t seed = 0;
  bool operator==(const SamplerConfig&) const = default;
};

void validate(const SamplerConfig& s, const NoiseSchedule& sched);

// DDIM timesteps, descending.
std::vector<int> ddim_timesteps(int steps, int T);

// Noise stream of one branch: the same for joint and single-branch sampling.
std::uint64_t branch_stream(std::uint64_t seed, denoiser::BranchId id);

// Final x0 estimates for every branch, in branch order. Probe captures are
// appended to `captured` in step order, for every DDIM step or only for the
// step with index `capture_step`.
std::vector<Tensor> sample_tensors(const denoiser::Denoiser& net, const synth::PromptSpec& prompt,
                                   const NoiseSchedule& sched, const SamplerConfig& sampler,
                                   const std::vector<denoiser::ProbeSelector>& probes = {},
                                   std::vector<denoiser::ProbeCapture>* captured = nullptr, int capture_step = -1);

// The same trajectory for one branch run alone.
Tensor sample_single_branch(const denoiser::Denoiser& net, denoiser::BranchId id, const std::vector<int>& tokens,
                            const NoiseSchedule& sched, const SamplerConfig& sampler);

Decoded sample(const denoiser::Denoiser& net, const synth::PromptSpec& prompt, const NoiseSchedule& sched,
               const SamplerConfig& sampler);

// Rows of [composite | background | foregrounds over a checkerboard], one row
// per image, as 8-bit RGB.
io::Image8 sample_grid(const std::vector<Decoded>& images, int max_layers);

}  // namespace layerforge::diffusion

#include "layerforge/diffusion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <iterator>
#include <numbers>

#include "layerforge/errors.hpp"
#include "layerforge/image_io.hpp"
#include "layerforge/random.hpp"

namespace layerforge::diffusion {

using denoiser::BranchId;
using denoiser::Role;

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "cosine") return ScheduleKind::Cosine;
  throw ValidationError("unknown schedule kind '" + name + "' (expected linear or cosine)");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::Linear ? "linear" : "cosine"; }

NoiseSchedule schedule_tables(ScheduleKind kind, int steps) {
  if (steps < 2) throw ValidationError("schedule needs at least 2 steps");
  NoiseSchedule s;
  s.kind = kind;
  s.steps = steps;
  s.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  if (kind == ScheduleKind::Linear) {
    for (int t = 1; t <= steps; ++t) s.beta[t] = 1e-4 + (0.02 - 1e-4) * (t - 1) / (steps - 1);
  } else {
    auto f = [&](int t) {
      const double x = (static_cast<double>(t) / steps + 0.008) / 1.008 * std::numbers::pi / 2;
      return std::cos(x) * std::cos(x);
    };
    for (int t = 1; t <= steps; ++t) s.beta[t] = std::min(1.0 - f(t) / f(t - 1), 0.999);
  }
  s.alpha.resize(s.beta.size());
  s.alpha_bar.resize(s.beta.size());
  s.alpha[0] = 1.0;
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= steps; ++t) {
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t < 0 || t > sched.steps) throw ValidationError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.steps) + "]");
  if (!x0.same_shape(eps)) throw DimensionError("add_noise: shape mismatch");
  const double a = std::sqrt(sched.alpha_bar[t]), b = std::sqrt(1.0 - sched.alpha_bar[t]);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * x0[i] + b * eps[i]);
  return out;
}

// ---------------------------------------------------------------------------
// data

Tensor branch_targets(const LayeredImage& image) {
  const int k = image.layer_count(), h = image.height(), w = image.width();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor t({k + 2, 4, h, w});
  auto put_rgb = [&](int b, const RgbImage& rgb) {
    float* dst = t.data() + static_cast<std::size_t>(b) * 4 * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      for (int c = 0; c < 3; ++c) dst[c * plane + p] = static_cast<float>(2.0 * rgb.values[p * 3 + c] - 1.0);
      dst[3 * plane + p] = 1.0f;
    }
  };
  put_rgb(0, composite_closed_form(image));
  for (int i = 0; i < k; ++i) {
    const auto& f = image.foregrounds[static_cast<std::size_t>(i)];
    float* dst = t.data() + static_cast<std::size_t>(i + 1) * 4 * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      const double a = f.alpha.values[p];
      for (int c = 0; c < 3; ++c) {
        const double pm = f.premultiplied ? f.color.values[p * 3 + c] : f.color.values[p * 3 + c] * a;
        dst[c * plane + p] = static_cast<float>(2.0 * pm - 1.0);
      }
      dst[3 * plane + p] = static_cast<float>(2.0 * a - 1.0);
    }
  }
  put_rgb(k + 1, image.background);
  return t;
}

Tensor loss_mask(int k, int height, int width) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Tensor m({k + 2, 4, height, width}, 1.0f);
  for (int b : {0, k + 1}) std::fill_n(m.data() + (static_cast<std::size_t>(b) * 4 + 3) * plane, plane, 0.0f);
  return m;
}

Decoded decode_branches(const std::vector<Tensor>& branches) {
  if (branches.size() < 2) throw DimensionError("need at least the global and background branches");
  const int h = branches[0].dim(1), w = branches[0].dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto unit = [](float v) { return std::clamp((static_cast<double>(v) + 1.0) / 2.0, 0.0, 1.0); };
  auto rgb = [&](const Tensor& t) {
    RgbImage img(h, w);
    for (std::size_t p = 0; p < plane; ++p)
      for (int c = 0; c < 3; ++c) img.values[p * 3 + c] = unit(t[c * plane + p]);
    return img;
  };
  Decoded d;
  d.global = rgb(branches.front());
  d.image.background = rgb(branches.back());
  for (std::size_t i = 1; i + 1 < branches.size(); ++i) {
    const Tensor& t = branches[i];
    RgbaLayer layer{RgbImage(h, w), AlphaMap(h, w), false};
    for (std::size_t p = 0; p < plane; ++p) {
      const double a = unit(t[3 * plane + p]);
      layer.alpha.values[p] = a;
      for (int c = 0; c < 3; ++c)
        layer.color.values[p * 3 + c] = a > 1e-3 ? std::min(1.0, unit(t[c * plane + p]) / a) : 0.0;
    }
    d.image.foregrounds.push_back(std::move(layer));
  }
  return d;
}

std::vector<TrainSample> load_dataset(const std::filesystem::path& dir) {
  const auto manifest = synth::load_manifest(dir);
  std::vector<TrainSample> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) out.push_back({load_archive(dir / e.path).image, e.prompt});
  if (out.empty()) throw ValidationError("dataset " + dir.string() + " is empty");
  return out;
}

// ---------------------------------------------------------------------------
// training

void AdamW::update(const std::vector<std::pair<std::string, ag::Var>>& params) {
  if (m.empty()) {
    for (const auto& [name, p] : params) {
      m.emplace_back(p->value.shape());
      v.emplace_back(p->value.shape());
    }
  }
  ++step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    if (!p->has_grad()) continue;
    // Decay matrices and kernels only, not norms, biases or embeddings' offsets.
    const double decay = p->value.rank() >= 2 ? weight_decay : 0.0;
    float* w = p->value.data();
    const float* g = p->grad.data();
    float* mi = m[i].data();
    float* vi = v[i].data();
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      mi[j] = static_cast<float>(beta1 * mi[j] + (1.0 - beta1) * g[j]);
      vi[j] = static_cast<float>(beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j]);
      const double mh = mi[j] / c1, vh = vi[j] / c2;
      w[j] = static_cast<float>(w[j] - lr * (mh / (std::sqrt(vh) + eps) + decay * w[j]));
    }
  }
}

namespace {

// Element weights so that a plain weighted sum equals the mean over
// branches of each branch's MSE over its scored channels.
Tensor step_weights(int k, int batch, int h, int w) {
  const Tensor mask = loss_mask(k, h, w);
  const std::size_t plane = static_cast<std::size_t>(h) * w, per = 4 * plane;
  const double branches = static_cast<double>(batch) * (k + 2);
  Tensor out({batch * (k + 2), 4, h, w});
  for (int s = 0; s < batch; ++s)
    for (int b = 0; b < k + 2; ++b) {
      const float* src = mask.data() + static_cast<std::size_t>(b) * per;
      float* dst = out.data() + (static_cast<std::size_t>(s) * (k + 2) + b) * per;
      double scored = 0.0;
      for (std::size_t j = 0; j < per; ++j) scored += src[j];
      for (std::size_t j = 0; j < per; ++j) dst[j] = static_cast<float>(src[j] / scored / branches);
    }
  return out;
}

// Per-role means of the per-branch MSE.
StepLoss role_losses(const Tensor& pred, const Tensor& eps, int k, int batch) {
  const int h = pred.dim(2), w = pred.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w, per = 4 * plane;
  StepLoss r;
  double total = 0.0;
  for (int s = 0; s < batch; ++s)
    for (int b = 0; b < k + 2; ++b) {
      const bool rgb_only = b == 0 || b == k + 1;
      const std::size_t n = rgb_only ? 3 * plane : per;
      const std::size_t base = (static_cast<std::size_t>(s) * (k + 2) + b) * per;
      double se = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = static_cast<double>(pred[base + j]) - eps[base + j];
        se += d * d;
      }
      const double mse = se / static_cast<double>(n);
      total += mse;
      if (b == 0) r.global += mse / batch;
      else if (b == k + 1) r.background += mse / batch;
      else r.foreground += mse / (static_cast<double>(batch) * k);
    }
  r.loss = total / (static_cast<double>(batch) * (k + 2));
  return r;
}

}  // namespace

double branch_loss(const Tensor& pred, const Tensor& eps, int k, int batch) {
  if (!pred.same_shape(eps) || pred.rank() != 4 || pred.dim(0) != batch * (k + 2))
    throw DimensionError("branch_loss: tensors must be [B * (K + 2), 4, H, W]");
  return role_losses(pred, eps, k, batch).loss;
}

StepLoss train_step(denoiser::Denoiser& net, AdamW& opt, const NoiseSchedule& sched,
                    const std::vector<const TrainSample*>& batch, std::mt19937_64& rng, const StepOptions& options) {
  if (batch.empty()) throw ValidationError("empty batch");
  const int k = batch[0]->image.layer_count();
  const int h = batch[0]->image.height(), w = batch[0]->image.width();
  for (const auto* s : batch)
    if (s->image.layer_count() != k || s->image.height() != h || s->image.width() != w)
      throw ValidationError("every sample in a batch must have the same K and size");
  const int B = static_cast<int>(batch.size()), rows = B * (k + 2);
  const std::size_t plane = static_cast<std::size_t>(h) * w, per = 4 * plane;

  std::uniform_int_distribution<int> pick_t(1, sched.steps);
  std::normal_distribution<float> gauss;
  Tensor x({rows, 4, h, w}), eps({rows, 4, h, w});
  std::vector<int> ts;
  std::vector<synth::PromptSpec> prompts;
  for (int s = 0; s < B; ++s) {
    const int t = pick_t(rng);
    ts.push_back(t);
    prompts.push_back(batch[static_cast<std::size_t>(s)]->prompt);
    const Tensor x0 = branch_targets(batch[static_cast<std::size_t>(s)]->image);
    Tensor shared({4, h, w});
    if (options.shared_eps)
      for (float& v : shared.values()) v = gauss(rng);
    const double a = std::sqrt(sched.alpha_bar[t]), b = std::sqrt(1.0 - sched.alpha_bar[t]);
    for (int br = 0; br < k + 2; ++br) {
      const std::size_t base = (static_cast<std::size_t>(s) * (k + 2) + br) * per;
      for (std::size_t j = 0; j < per; ++j) eps[base + j] = options.shared_eps ? shared[j] : gauss(rng);
      for (std::size_t j = 0; j < per; ++j)
        x[base + j] = static_cast<float>(a * x0[static_cast<std::size_t>(br) * per + j] + b * eps[base + j]);
      if (br == 0 || br == k + 1) std::fill_n(x.data() + base + 3 * plane, plane, 1.0f);
    }
  }

  for (const auto& [name, p] : net.parameters()) p->grad = Tensor();
  denoiser::BatchInput in{k, ag::constant(std::move(x)), ts, prompts, std::nullopt};
  const auto out = denoiser::forward(net, in);
  const ag::Var loss = ag::weighted_square_error(out.eps, eps, step_weights(k, B, h, w));
  StepLoss r = role_losses(out.eps->value, eps, k, B);
  if (!std::isfinite(loss->value[0]) || !std::isfinite(r.loss)) {
    char msg[256];
    std::snprintf(msg, sizeof msg, "non-finite loss at step %ld (global %g, foreground %g, background %g)", opt.step + 1,
                  r.global, r.foreground, r.background);
    throw NumericError(msg);
  }
  if (!options.update) return r;
  ag::backward(loss);

  double sq = 0.0;
  for (const auto& [name, p] : net.parameters())
    if (p->has_grad())
      for (float g : p->grad.values()) sq += static_cast<double>(g) * g;
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(opt.step + 1));
  if (options.grad_clip > 0.0 && r.grad_norm > options.grad_clip) {
    const float f = static_cast<float>(options.grad_clip / r.grad_norm);
    for (const auto& [name, p] : net.parameters())
      if (p->has_grad()) p->grad.scale_(f);
  }
  opt.update(net.parameters());
  for (const auto& [name, p] : net.parameters()) p->grad = Tensor();
  return r;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},         {"batch_size", c.batch_size},
          {"lr", c.lr},               {"weight_decay", c.weight_decay},
          {"grad_clip", c.grad_clip}, {"shared_eps", c.shared_eps},
          {"log_every", c.log_every}, {"checkpoint_every", c.checkpoint_every},
          {"sample_grid", c.sample_grid}, {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("train: expected an object");
  TrainConfig c;
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ValidationError("train: unknown key '" + it.key() + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("steps", c.steps);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("weight_decay", c.weight_decay);
    get("grad_clip", c.grad_clip);
    get("shared_eps", c.shared_eps);
    get("log_every", c.log_every);
    get("checkpoint_every", c.checkpoint_every);
    get("sample_grid", c.sample_grid);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("train: ") + e.what());
  }
  if (c.steps < 1) throw ValidationError("train: steps must be positive");
  if (c.batch_size < 1) throw ValidationError("train: batch_size must be positive");
  if (!(c.lr > 0.0)) throw ValidationError("train: lr must be positive");
  if (c.weight_decay < 0.0) throw ValidationError("train: weight_decay must be non-negative");
  if (c.log_every < 1) throw ValidationError("train: log_every must be positive");
  if (c.checkpoint_every < 0) throw ValidationError("train: checkpoint_every must be non-negative");
  if (c.sample_grid < 0) throw ValidationError("train: sample_grid must be non-negative");
  return c;
}

BatchSampler::BatchSampler(const std::vector<TrainSample>& data, int batch_size, std::uint64_t seed)
    : data_(data), batch_size_(batch_size), rng_(derive_seed(seed, 0xba7c4)) {
  if (data.empty()) throw ValidationError("cannot sample batches from an empty dataset");
  std::map<int, std::vector<int>> by_k;
  for (std::size_t i = 0; i < data.size(); ++i) by_k[data[i].image.layer_count()].push_back(static_cast<int>(i));
  for (auto& [k, idx] : by_k) {
    std::shuffle(idx.begin(), idx.end(), rng_);
    groups_.push_back(std::move(idx));
  }
  cursor_.assign(groups_.size(), 0);
}

std::vector<const TrainSample*> BatchSampler::next() {
  std::vector<double> sizes;
  for (const auto& g : groups_) sizes.push_back(static_cast<double>(g.size()));
  std::discrete_distribution<std::size_t> pick(sizes.begin(), sizes.end());
  const std::size_t gi = pick(rng_);
  auto& group = groups_[gi];
  std::vector<const TrainSample*> batch;
  for (int i = 0; i < batch_size_; ++i) {
    if (cursor_[gi] == group.size()) {
      std::shuffle(group.begin(), group.end(), rng_);
      cursor_[gi] = 0;
    }
    batch.push_back(&data_[static_cast<std::size_t>(group[cursor_[gi]++])]);
  }
  return batch;
}

TrainResult train(denoiser::Denoiser& net, const std::vector<TrainSample>& data, const NoiseSchedule& sched,
                  const TrainConfig& cfg, const std::filesystem::path& run_dir, const nlohmann::json& config_snapshot,
                  const std::function<void(int, const StepLoss&)>& on_step) {
  std::filesystem::create_directories(run_dir / "checkpoints");
  io::write_text(run_dir / "config.json", config_snapshot.dump(2) + "\n");
  for (const auto& s : data)
    if (s.image.layer_count() > net.config().k_max)
      throw ValidationError("dataset has a scene with more layers than K_max");

  AdamW opt;
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  BatchSampler sampler(data, cfg.batch_size, cfg.seed);
  std::mt19937_64 rng(derive_seed(cfg.seed, 0x7e11));
  StepOptions options;
  options.shared_eps = cfg.shared_eps;
  options.grad_clip = cfg.grad_clip;

  TrainResult result;
  std::string csv = "step,loss,global,foreground,background\n";
  char line[160];
  for (int step = 1; step <= cfg.steps; ++step) {
    const StepLoss l = train_step(net, opt, sched, sampler.next(), rng, options);
    result.history.push_back(l);
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.6f,%.6f\n", step, l.loss, l.global, l.foreground, l.background);
      csv += line;
    }
    if (on_step) on_step(step, l);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
      std::snprintf(line, sizeof line, "step_%06d.ckpt", step);
      net.save(run_dir / "checkpoints" / line);
      io::write_text(run_dir / "loss.csv", csv);
    }
  }
  io::write_text(run_dir / "loss.csv", csv);
  net.save(run_dir / "model.ckpt");

  if (cfg.sample_grid > 0) {
    std::vector<Decoded> images;
    SamplerConfig sc;
    sc.steps = std::min(sc.steps, sched.steps);
    for (int i = 0; i < std::min<int>(cfg.sample_grid, static_cast<int>(data.size())); ++i) {
      sc.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
      images.push_back(sample(net, data[static_cast<std::size_t>(i)].prompt, sched, sc));
    }
    io::write_png(run_dir / "samples.png", sample_grid(images, net.config().k_max));
  }
  return result;
}

// ---------------------------------------------------------------------------
// sampling

void validate(const SamplerConfig& s, const NoiseSchedule& sched) {
  if (s.steps < 1 || s.steps > sched.steps)
    throw ValidationError("sample: steps must lie in [1, " + std::to_string(sched.steps) + "]");
  if (!(s.eta >= 0.0 && s.eta <= 1.0)) throw ValidationError("sample: eta must lie in [0, 1]");
}

std::vector<int> ddim_timesteps(int steps, int T) {
  const int stride = T / steps;
  std::vector<int> ts;
  for (int j = steps - 1; j >= 0; --j) ts.push_back(j * stride + 1);
  return ts;
}

std::uint64_t branch_stream(std::uint64_t seed, BranchId id) {
  const std::uint64_t stream = id.role == Role::Global ? 0 : id.role == Role::Background ? 1000 : static_cast<std::uint64_t>(id.index);
  return derive_seed(seed, stream);
}

namespace {

struct BranchState {
  BranchId id;
  std::mt19937_64 rng;
  Tensor x;
};

BranchState init_branch(BranchId id, const SamplerConfig& sampler, int size) {
  BranchState b{id, std::mt19937_64(branch_stream(sampler.seed, id)), Tensor({4, size, size})};
  std::normal_distribution<float> gauss;
  for (float& v : b.x.values()) v = gauss(b.rng);
  if (id.role != Role::Foreground) std::fill_n(b.x.data() + 3 * size * size, size * size, 1.0f);
  return b;
}

// One DDIM update of a branch from t to t_prev given its noise prediction.
void ddim_update(BranchState& b, const Tensor& eps, int t, int t_prev, const NoiseSchedule& sched, double eta) {
  const double ab = sched.alpha_bar[t], ab_prev = sched.alpha_bar[t_prev];
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
  std::normal_distribution<float> gauss;
  for (std::size_t i = 0; i < b.x.size(); ++i) {
    const double x0 = std::clamp((b.x[i] - std::sqrt(1.0 - ab) * eps[i]) / std::sqrt(ab), -1.0, 1.0);
    double next = std::sqrt(ab_prev) * x0 + dir * eps[i];
    if (sigma > 0.0) next += sigma * gauss(b.rng);
    b.x[i] = static_cast<float>(next);
  }
  const int plane = b.x.dim(1) * b.x.dim(2);
  if (b.id.role != Role::Foreground) std::fill_n(b.x.data() + 3 * plane, plane, 1.0f);
}

}  // namespace

std::vector<Tensor> sample_tensors(const denoiser::Denoiser& net, const synth::PromptSpec& prompt,
                                   const NoiseSchedule& sched, const SamplerConfig& sampler,
                                   const std::vector<denoiser::ProbeSelector>& probes,
                                   std::vector<denoiser::ProbeCapture>* captured, int capture_step) {
  validate(sampler, sched);
  synth::validate(prompt);
  const int k = prompt.layer_count();
  if (k > net.config().k_max) throw ValidationError("prompt has more layers than K_max");
  const int size = net.config().image_size;
  std::vector<BranchState> branches;
  for (BranchId id : denoiser::branch_order(k)) branches.push_back(init_branch(id, sampler, size));
  const auto ts = ddim_timesteps(sampler.steps, sched.steps);
  for (std::size_t j = 0; j < ts.size(); ++j) {
    const int t = ts[j], t_prev = j + 1 < ts.size() ? ts[j + 1] : 0;
    std::map<BranchId, Tensor> noisy;
    for (const auto& b : branches) noisy[b.id] = b.x;
    const bool capture = captured && (capture_step < 0 || capture_step == static_cast<int>(j));
    std::vector<denoiser::ProbeCapture> step_probes;
    const auto eps = denoiser::forward_multi_branch(net, noisy, t, prompt, capture ? probes : std::vector<denoiser::ProbeSelector>{},
                                                    capture ? &step_probes : nullptr);
    if (capture) std::move(step_probes.begin(), step_probes.end(), std::back_inserter(*captured));
    for (auto& b : branches) ddim_update(b, eps.at(b.id), t, t_prev, sched, sampler.eta);
  }
  std::vector<Tensor> out;
  for (auto& b : branches) out.push_back(std::move(b.x));
  return out;
}

Tensor sample_single_branch(const denoiser::Denoiser& net, BranchId id, const std::vector<int>& tokens,
                            const NoiseSchedule& sched, const SamplerConfig& sampler) {
  validate(sampler, sched);
  BranchState b = init_branch(id, sampler, net.config().image_size);
  const auto ts = ddim_timesteps(sampler.steps, sched.steps);
  for (std::size_t j = 0; j < ts.size(); ++j) {
    const int t = ts[j], t_prev = j + 1 < ts.size() ? ts[j + 1] : 0;
    ddim_update(b, denoiser::forward_single_branch(net, b.x, t, id, tokens), t, t_prev, sched, sampler.eta);
  }
  return b.x;
}

Decoded sample(const denoiser::Denoiser& net, const synth::PromptSpec& prompt, const NoiseSchedule& sched,
               const SamplerConfig& sampler) {
  return decode_branches(sample_tensors(net, prompt, sched, sampler));
}

io::Image8 sample_grid(const std::vector<Decoded>& images, int max_layers) {
  if (images.empty()) throw ValidationError("sample_grid: no images");
  const int h = images[0].image.height(), w = images[0].image.width(), gap = 2;
  const int cols = 2 + max_layers;
  io::Image8 grid;
  grid.width = cols * w + (cols + 1) * gap;
  grid.height = static_cast<int>(images.size()) * h + (static_cast<int>(images.size()) + 1) * gap;
  grid.channels = 3;
  grid.pixels.assign(static_cast<std::size_t>(grid.width) * grid.height * 3, 255);
  auto put = [&](int row, int col, auto&& pixel) {
    const int ox = gap + col * (w + gap), oy = gap + row * (h + gap);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto rgb = pixel(y, x);
        for (int c = 0; c < 3; ++c)
          grid.pixels[(static_cast<std::size_t>(oy + y) * grid.width + ox + x) * 3 + c] = to_byte(rgb[c]);
      }
  };
  for (std::size_t r = 0; r < images.size(); ++r) {
    const auto& d = images[r];
    const RgbImage comp = composite_closed_form(d.image);
    const int row = static_cast<int>(r);
    put(row, 0, [&](int y, int x) { return std::array<double, 3>{comp.at(y, x, 0), comp.at(y, x, 1), comp.at(y, x, 2)}; });
    put(row, 1, [&](int y, int x) {
      return std::array<double, 3>{d.image.background.at(y, x, 0), d.image.background.at(y, x, 1), d.image.background.at(y, x, 2)};
    });
    for (int k = 0; k < max_layers; ++k) {
      put(row, 2 + k, [&](int y, int x) {
        const double checker = ((x / 4 + y / 4) % 2) ? 0.8 : 0.6;
        if (k >= d.image.layer_count()) return std::array<double, 3>{0.9, 0.9, 0.9};
        const auto& f = d.image.foregrounds[static_cast<std::size_t>(k)];
        const double a = f.alpha.at(y, x);
        std::array<double, 3> out;
        for (int c = 0; c < 3; ++c) out[c] = a * f.color.at(y, x, c) + (1.0 - a) * checker;
        return out;
      });
    }
  }
  return grid;
}

}  // namespace layerforge::diffusion

#pragma once

// Ablation harness: sample the same prompts and seeds under several trained
// configurations, score every output with the geometric proxies and compare
// configurations pairwise with a sign test.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "layerforge/diffusion.hpp"
#include "layerforge/metrics.hpp"

namespace layerforge::eval {

struct SampleMetrics {
  int sample_id = 0;
  std::string config;
  double iou = 0.0;                           // mean over layers
  std::optional<double> centroid_px;          // mean over layers with both supports
  std::optional<double> shadow_dev_deg;       // mean over layers with a shadow estimate
  double occupancy = 0.0;                     // mean over layers
  bool valid = false;                         // compositing invariants and finite values
};

struct MetricReport {
  std::string config;
  std::vector<SampleMetrics> samples;
  double mean_iou = 0.0;
  double mean_centroid_px = 0.0;
  double mean_shadow_dev_deg = 0.0;
  double mean_occupancy = 0.0;
  int centroid_defined = 0;
  int shadow_defined = 0;
  int valid = 0;
  double threshold = metrics::kBinarize;
};

MetricReport aggregate(const std::string& config, std::vector<SampleMetrics> samples);

// The layout reference of foreground layer i: the mean over DDIM steps and
// over attention blocks at the reweighting resolution of that layer's
// blurred global-attention mask, upsampled to the image size.
std::vector<AlphaMap> layout_masks(const std::vector<denoiser::ProbeCapture>& captures, int k, int height, int width);

// Probes for every foreground branch at every block at the reweighting
// resolution.
std::vector<denoiser::ProbeSelector> layout_probes(const denoiser::Denoiser& net, int k);

struct EvalCase {
  int sample_id = 0;
  synth::PromptSpec prompt;
  std::uint64_t seed = 0;
};

// Prompts of n generated scenes; the sampler seed of case i is derived from
// `seed` and i so that every configuration sees the same noise.
std::vector<EvalCase> eval_cases(int n, std::uint64_t seed, int k_max);

struct Scored {
  SampleMetrics metrics;
  diffusion::Decoded output;
  std::vector<AlphaMap> masks;
};

Scored score_sample(const denoiser::Denoiser& net, const std::string& config, const EvalCase& c,
                    const diffusion::NoiseSchedule& sched, const diffusion::SamplerConfig& sampler);

// Metrics of an already sampled image against its layout masks.
SampleMetrics measure(const diffusion::Decoded& out, const std::vector<AlphaMap>& masks, synth::Light light);

// One-sided binomial sign test: probability of at least `wins` successes in
// wins + losses fair trials. Ties are dropped by the caller.
double sign_test(int wins, int losses);

struct Comparison {
  std::string metric;     // iou, occupancy, shadow_dev_deg
  std::string better;     // config expected to win
  std::string worse;
  bool higher_is_better = true;
  double better_mean = 0.0;
  double worse_mean = 0.0;
  int wins = 0, losses = 0, ties = 0;
  double p_value = 1.0;
  bool direction_holds = false;  // means ordered as expected
  bool significant = false;      // direction holds and p < 0.05
};

Comparison compare(const MetricReport& better, const MetricReport& worse, const std::string& metric);

struct AblationSlot {
  std::string name;
  const denoiser::Denoiser* net = nullptr;
  bool reweighting = true;
  bool joint = true;
};

// full, no_reweighting and no_joint with their toggles.
std::vector<AblationSlot> standard_slots(const denoiser::Denoiser& full, const denoiser::Denoiser& no_reweighting,
                                         const denoiser::Denoiser& no_joint);

struct AblationResult {
  std::vector<MetricReport> reports;  // slot order
  std::vector<Comparison> comparisons;
};

// Throws ValidationError when a slot's checkpoint disagrees with its toggles
// or when the slots do not share image size, K_max and vocabulary.
AblationResult ablation_run(const std::vector<AblationSlot>& slots, const std::vector<EvalCase>& cases,
                            const diffusion::NoiseSchedule& sched, const diffusion::SamplerConfig& sampler);

// The two directional claims, when the standard slot names are present:
// full vs no_reweighting on occupancy and IoU, full vs no_joint on shadow
// deviation.
std::vector<Comparison> standard_comparisons(const std::vector<MetricReport>& reports);

std::string to_csv(const std::vector<MetricReport>& reports);
std::string summary_markdown(const AblationResult& result);
void write_report(const AblationResult& result, const std::filesystem::path& dir);

}  // namespace layerforge::eval

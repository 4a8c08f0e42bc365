#include "layerforge/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "layerforge/errors.hpp"
#include "layerforge/image_io.hpp"
#include "layerforge/random.hpp"

namespace layerforge::eval {

using denoiser::BranchId;
using denoiser::Role;

MetricReport aggregate(const std::string& config, std::vector<SampleMetrics> samples) {
  MetricReport r;
  r.config = config;
  r.samples = std::move(samples);
  double iou = 0.0, occ = 0.0, cen = 0.0, dev = 0.0;
  for (const auto& s : r.samples) {
    iou += s.iou;
    occ += s.occupancy;
    if (s.centroid_px) {
      cen += *s.centroid_px;
      ++r.centroid_defined;
    }
    if (s.shadow_dev_deg) {
      dev += *s.shadow_dev_deg;
      ++r.shadow_defined;
    }
    r.valid += s.valid ? 1 : 0;
  }
  const double n = static_cast<double>(r.samples.size());
  if (n > 0) {
    r.mean_iou = iou / n;
    r.mean_occupancy = occ / n;
  }
  if (r.centroid_defined) r.mean_centroid_px = cen / r.centroid_defined;
  if (r.shadow_defined) r.mean_shadow_dev_deg = dev / r.shadow_defined;
  return r;
}

std::vector<denoiser::ProbeSelector> layout_probes(const denoiser::Denoiser& net, int k) {
  std::vector<denoiser::ProbeSelector> out;
  for (const auto& block : net.attention_blocks())
    if (net.block_resolution(block) == net.config().reweight_resolution)
      for (int i = 1; i <= k; ++i) {
        out.push_back(denoiser::register_attention_probe(net.config(), block, BranchId::foreground(i)));
        out.back().self_weights = false;
      }
  return out;
}

std::vector<AlphaMap> layout_masks(const std::vector<denoiser::ProbeCapture>& captures, int k, int height, int width) {
  std::vector<AlphaMap> sum(static_cast<std::size_t>(k));
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  for (const auto& cap : captures) {
    const BranchId id = cap.selector.branch;
    if (id.role != Role::Foreground || !cap.mask || id.index < 1 || id.index > k) continue;
    auto& s = sum[static_cast<std::size_t>(id.index - 1)];
    if (s.values.empty()) s = AlphaMap(cap.mask->height, cap.mask->width);
    if (s.height != cap.mask->height || s.width != cap.mask->width) throw DimensionError("layout masks at mixed resolutions");
    for (std::size_t p = 0; p < s.values.size(); ++p) s.values[p] += cap.mask->values[p];
    ++count[static_cast<std::size_t>(id.index - 1)];
  }
  std::vector<AlphaMap> out;
  for (int i = 0; i < k; ++i) {
    auto& s = sum[static_cast<std::size_t>(i)];
    if (count[static_cast<std::size_t>(i)] == 0) {
      out.emplace_back(height, width);
      continue;
    }
    for (double& v : s.values) v /= count[static_cast<std::size_t>(i)];
    out.push_back(metrics::upsample_nearest(s, height, width));
  }
  return out;
}

std::vector<EvalCase> eval_cases(int n, std::uint64_t seed, int k_max) {
  if (n < 1) throw ValidationError("eval: n must be positive");
  synth::Constraints c;
  c.max_layers = std::min(k_max, synth::kMaxLayers);
  std::vector<EvalCase> out;
  for (int i = 0; i < n; ++i) {
    const auto scene = synth::generate_scene(derive_seed(seed, 0xe7a1000u + static_cast<std::uint64_t>(i)), c);
    out.push_back({i, scene.prompt, derive_seed(seed, static_cast<std::uint64_t>(i))});
  }
  return out;
}

SampleMetrics measure(const diffusion::Decoded& out, const std::vector<AlphaMap>& masks, synth::Light light) {
  SampleMetrics m;
  const int k = out.image.layer_count();
  if (static_cast<int>(masks.size()) != k) throw DimensionError("one layout mask per layer expected");
  m.valid = true;
  try {
    validate(out.image);
  } catch (const ValidationError&) {
    m.valid = false;
  }
  if (k == 0) return m;
  const double light_deg = synth::light_angle_degrees(light);
  double iou = 0.0, occ = 0.0, cen = 0.0, dev = 0.0;
  int n_cen = 0, n_dev = 0;
  for (int i = 0; i < k; ++i) {
    const auto& alpha = out.image.foregrounds[static_cast<std::size_t>(i)].alpha;
    for (double v : alpha.values) m.valid = m.valid && std::isfinite(v);
    const auto la = metrics::layout_agreement(alpha, masks[static_cast<std::size_t>(i)]);
    iou += la.iou;
    if (la.centroid_distance) {
      cen += *la.centroid_distance;
      ++n_cen;
    }
    occ += metrics::occupancy_ratio(alpha);
    if (const auto dir = metrics::shadow_direction(alpha)) {
      dev += metrics::angular_deviation(*dir, light_deg);
      ++n_dev;
    }
  }
  m.iou = iou / k;
  m.occupancy = occ / k;
  if (n_cen) m.centroid_px = cen / n_cen;
  if (n_dev) m.shadow_dev_deg = dev / n_dev;
  return m;
}

Scored score_sample(const denoiser::Denoiser& net, const std::string& config, const EvalCase& c,
                    const diffusion::NoiseSchedule& sched, const diffusion::SamplerConfig& sampler) {
  diffusion::SamplerConfig s = sampler;
  s.seed = c.seed;
  const int k = c.prompt.layer_count();
  std::vector<denoiser::ProbeCapture> captures;
  Scored out;
  out.output = diffusion::decode_branches(diffusion::sample_tensors(net, c.prompt, sched, s, layout_probes(net, k), &captures));
  const int size = net.config().image_size;
  out.masks = layout_masks(captures, k, size, size);
  out.metrics = measure(out.output, out.masks, synth::detokenize(c.prompt).light);
  out.metrics.sample_id = c.sample_id;
  out.metrics.config = config;
  return out;
}

double sign_test(int wins, int losses) {
  const int n = wins + losses;
  if (n == 0) return 1.0;
  double p = 0.0;
  for (int i = wins; i <= n; ++i)
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  return std::min(1.0, p);
}

namespace {

std::optional<double> value_of(const SampleMetrics& s, const std::string& metric) {
  if (metric == "iou") return s.iou;
  if (metric == "occupancy") return s.occupancy;
  if (metric == "centroid_px") return s.centroid_px;
  if (metric == "shadow_dev_deg") return s.shadow_dev_deg;
  throw ValidationError("unknown metric '" + metric + "'");
}

}  // namespace

Comparison compare(const MetricReport& better, const MetricReport& worse, const std::string& metric) {
  Comparison c;
  c.metric = metric;
  c.better = better.config;
  c.worse = worse.config;
  c.higher_is_better = metric == "iou";
  std::map<int, const SampleMetrics*> other;
  for (const auto& s : worse.samples) other[s.sample_id] = &s;
  // Means over the samples where both configurations have a value.
  double sb = 0.0, sw = 0.0;
  int n = 0;
  for (const auto& s : better.samples) {
    auto it = other.find(s.sample_id);
    if (it == other.end()) continue;
    const auto a = value_of(s, metric), b = value_of(*it->second, metric);
    if (!a || !b) continue;
    sb += *a;
    sw += *b;
    ++n;
    const double d = c.higher_is_better ? *a - *b : *b - *a;
    if (d > 0) ++c.wins;
    else if (d < 0) ++c.losses;
    else ++c.ties;
  }
  if (n) {
    c.better_mean = sb / n;
    c.worse_mean = sw / n;
  }
  c.p_value = sign_test(c.wins, c.losses);
  c.direction_holds = n > 0 && (c.higher_is_better ? c.better_mean > c.worse_mean : c.better_mean < c.worse_mean);
  c.significant = c.direction_holds && c.p_value < 0.05;
  return c;
}

std::vector<AblationSlot> standard_slots(const denoiser::Denoiser& full, const denoiser::Denoiser& no_reweighting,
                                         const denoiser::Denoiser& no_joint) {
  return {{"full", &full, true, true}, {"no_reweighting", &no_reweighting, false, true}, {"no_joint", &no_joint, true, false}};
}

AblationResult ablation_run(const std::vector<AblationSlot>& slots, const std::vector<EvalCase>& cases,
                            const diffusion::NoiseSchedule& sched, const diffusion::SamplerConfig& sampler) {
  if (slots.empty()) throw ValidationError("ablation: no configurations");
  diffusion::validate(sampler, sched);
  const auto& ref = slots.front().net->config();
  for (const auto& s : slots) {
    if (!s.net) throw ValidationError("ablation: slot " + s.name + " has no checkpoint");
    const auto& c = s.net->config();
    if (c.reweighting_on != s.reweighting || c.joint_attention_on != s.joint)
      throw ValidationError("ablation: checkpoint for " + s.name + " was configured with reweighting=" +
                            (c.reweighting_on ? "on" : "off") + " joint=" + (c.joint_attention_on ? "on" : "off"));
    if (c.image_size != ref.image_size || c.k_max != ref.k_max || c.reweight_resolution != ref.reweight_resolution)
      throw ValidationError("ablation: checkpoint for " + s.name + " does not match the other configurations");
  }
  for (const auto& e : cases)
    if (e.prompt.layer_count() > ref.k_max) throw ValidationError("ablation: prompt exceeds K_max");

  AblationResult r;
  for (const auto& s : slots) {
    std::vector<SampleMetrics> samples;
    for (const auto& e : cases) samples.push_back(score_sample(*s.net, s.name, e, sched, sampler).metrics);
    r.reports.push_back(aggregate(s.name, std::move(samples)));
  }
  r.comparisons = standard_comparisons(r.reports);
  return r;
}

std::vector<Comparison> standard_comparisons(const std::vector<MetricReport>& reports) {
  auto find = [&](const std::string& name) -> const MetricReport* {
    for (const auto& r : reports)
      if (r.config == name) return &r;
    return nullptr;
  };
  std::vector<Comparison> out;
  const auto *full = find("full"), *no_rw = find("no_reweighting"), *no_joint = find("no_joint");
  if (full && no_rw) {
    out.push_back(compare(*full, *no_rw, "occupancy"));
    out.push_back(compare(*full, *no_rw, "iou"));
  }
  if (full && no_joint) out.push_back(compare(*full, *no_joint, "shadow_dev_deg"));
  return out;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : ""; }

}  // namespace

std::string to_csv(const std::vector<MetricReport>& reports) {
  std::string out = "sample_id,config,iou,centroid_px,shadow_dev_deg,occupancy,valid\n";
  for (const auto& r : reports)
    for (const auto& s : r.samples)
      out += std::to_string(s.sample_id) + "," + s.config + "," + fmt(s.iou) + "," + fmt(s.centroid_px) + "," +
             fmt(s.shadow_dev_deg) + "," + fmt(s.occupancy) + "," + (s.valid ? "1" : "0") + "\n";
  return out;
}

std::string summary_markdown(const AblationResult& result) {
  std::ostringstream md;
  md << "# Ablation summary\n\n";
  md << "Alpha and masks binarized at " << metrics::kBinarize << ". Shadow deviation in degrees, centroid distance in pixels.\n\n";
  md << "| config | samples | valid | IoU | centroid px | shadow dev | shadow n | occupancy |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : result.reports)
    md << "| " << r.config << " | " << r.samples.size() << " | " << r.valid << " | " << fmt(r.mean_iou) << " | "
       << fmt(r.mean_centroid_px) << " | " << fmt(r.mean_shadow_dev_deg) << " | " << r.shadow_defined << " | "
       << fmt(r.mean_occupancy) << " |\n";
  if (!result.comparisons.empty()) {
    md << "\n| claim | expected | means | wins / losses / ties | sign test p | verdict |\n";
    md << "|---|---|---|---|---|---|\n";
    for (const auto& c : result.comparisons) {
      const char* op = c.higher_is_better ? ">" : "<";
      md << "| " << c.metric << " | " << c.better << " " << op << " " << c.worse << " | " << fmt(c.better_mean) << " vs "
         << fmt(c.worse_mean) << " | " << c.wins << " / " << c.losses << " / " << c.ties << " | " << fmt(c.p_value)
         << " | " << (c.significant ? "holds" : c.direction_holds ? "direction only" : "does not hold") << " |\n";
    }
  }
  return md.str();
}

void write_report(const AblationResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  io::write_text(dir / "metrics.csv", to_csv(result.reports));
  io::write_text(dir / "summary.md", summary_markdown(result));
}

}  // namespace layerforge::eval

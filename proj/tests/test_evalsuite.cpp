#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "layerforge/errors.hpp"
#include "layerforge/evalsuite.hpp"

using namespace layerforge;
using namespace layerforge::eval;
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

SampleMetrics metric(int id, const std::string& config, double iou, double occ, std::optional<double> dev) {
  SampleMetrics m;
  m.sample_id = id;
  m.config = config;
  m.iou = iou;
  m.occupancy = occ;
  m.shadow_dev_deg = dev;
  m.valid = true;
  return m;
}

// Binomial tail by Pascal's triangle.
double tail_oracle(int wins, int n) {
  std::vector<double> row{1.0};
  for (int i = 0; i < n; ++i) {
    std::vector<double> next(row.size() + 1, 0.0);
    for (std::size_t j = 0; j < row.size(); ++j) {
      next[j] += row[j] / 2;
      next[j + 1] += row[j] / 2;
    }
    row = next;
  }
  double p = 0.0;
  for (int j = wins; j <= n; ++j) p += row[static_cast<std::size_t>(j)];
  return p;
}

}  // namespace

TEST(SignTest, MatchesBinomialTail) {
  EXPECT_DOUBLE_EQ(sign_test(0, 0), 1.0);
  EXPECT_NEAR(sign_test(5, 0), 1.0 / 32, 1e-12);
  for (auto [w, l] : std::vector<std::pair<int, int>>{{10, 10}, {15, 5}, {120, 80}, {3, 17}, {150, 50}})
    EXPECT_NEAR(sign_test(w, l), tail_oracle(w, w + l), 1e-9) << w << " " << l;
  EXPECT_LT(sign_test(15, 5), 0.05);
  EXPECT_GT(sign_test(12, 8), 0.05);
}

TEST(Compare, DirectionAndSignificance) {
  std::vector<SampleMetrics> a, b;
  for (int i = 0; i < 20; ++i) {
    a.push_back(metric(i, "full", 0.6, 0.2, i < 18 ? std::optional<double>(10.0) : std::nullopt));
    b.push_back(metric(i, "no_joint", i < 16 ? 0.4 : 0.8, 0.3, 40.0));
  }
  const auto ra = aggregate("full", a), rb = aggregate("no_joint", b);
  EXPECT_EQ(ra.shadow_defined, 18);
  EXPECT_DOUBLE_EQ(ra.mean_shadow_dev_deg, 10.0);

  const auto iou = compare(ra, rb, "iou");
  EXPECT_EQ(iou.wins, 16);
  EXPECT_EQ(iou.losses, 4);
  EXPECT_TRUE(iou.direction_holds);
  EXPECT_TRUE(iou.significant);

  const auto dev = compare(ra, rb, "shadow_dev_deg");
  EXPECT_FALSE(dev.higher_is_better);
  EXPECT_EQ(dev.wins + dev.losses + dev.ties, 18);  // undefined samples dropped
  EXPECT_TRUE(dev.significant);

  const auto occ = compare(rb, ra, "occupancy");
  EXPECT_FALSE(occ.direction_holds);
  EXPECT_FALSE(occ.significant);
  EXPECT_THROW(compare(ra, rb, "fid"), ValidationError);
}

TEST(LayoutMasks, AverageStepsAndUpsample) {
  std::vector<denoiser::ProbeCapture> caps;
  for (float v : {1.0f, 0.0f, 1.0f}) {
    denoiser::ProbeCapture c;
    c.selector.branch = BranchId::foreground(2);
    c.mask = attention::SpatialMask<float>{2, 2, {v, 0.0f, 0.0f, 1.0f}, false};
    caps.push_back(c);
  }
  const auto masks = layout_masks(caps, 2, 4, 4);
  ASSERT_EQ(masks.size(), 2u);
  EXPECT_EQ(masks[0].values, std::vector<double>(16, 0.0));  // no captures
  EXPECT_NEAR(masks[1].at(0, 0), 2.0 / 3.0, 1e-6);
  EXPECT_NEAR(masks[1].at(1, 1), 2.0 / 3.0, 1e-6);
  EXPECT_EQ(masks[1].at(0, 3), 0.0);
  EXPECT_EQ(masks[1].at(3, 3), 1.0);
}

TEST(Measure, DatasetSceneAgainstItsOwnSupport) {
  const auto scene = synth::generate_scene(4);
  diffusion::Decoded d;
  d.image = scene.image;
  std::vector<AlphaMap> masks;
  for (const auto& f : scene.image.foregrounds) masks.push_back(f.alpha);
  const auto m = measure(d, masks, scene.spec.light);
  EXPECT_TRUE(m.valid);
  EXPECT_DOUBLE_EQ(m.iou, 1.0);
  ASSERT_TRUE(m.centroid_px);
  EXPECT_DOUBLE_EQ(*m.centroid_px, 0.0);
  ASSERT_TRUE(m.shadow_dev_deg);
  EXPECT_LT(*m.shadow_dev_deg, 45.0);
  EXPECT_GT(m.occupancy, 0.0);
  EXPECT_LT(m.occupancy, 1.0);

  d.image.foregrounds[0].alpha.values[0] = 1.5;
  EXPECT_FALSE(measure(d, masks, scene.spec.light).valid);
  masks.pop_back();
  EXPECT_THROW(measure(d, masks, scene.spec.light), DimensionError);
}

TEST(Cases, DeterministicAndBounded) {
  const auto a = eval_cases(12, 3, 2), b = eval_cases(12, 3, 2);
  ASSERT_EQ(a.size(), 12u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].prompt, b[i].prompt);
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_LE(a[i].prompt.layer_count(), 2);
  }
  EXPECT_NE(eval_cases(1, 4, 3)[0].seed, a[0].seed);
  EXPECT_THROW(eval_cases(0, 1, 3), ValidationError);
}

TEST(Ablation, IdenticalCheckpointsGiveIdenticalReports) {
  const denoiser::Denoiser net(small_config(), 2);
  const auto sched = diffusion::schedule_tables(diffusion::ScheduleKind::Linear, 50);
  diffusion::SamplerConfig s;
  s.steps = 3;
  const auto cases = eval_cases(3, 9, 3);
  const auto r = ablation_run({{"full", &net, true, true}, {"copy", &net, true, true}}, cases, sched, s);
  ASSERT_EQ(r.reports.size(), 2u);
  EXPECT_TRUE(r.comparisons.empty());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto &x = r.reports[0].samples[i], &y = r.reports[1].samples[i];
    EXPECT_EQ(x.iou, y.iou);
    EXPECT_EQ(x.occupancy, y.occupancy);
    EXPECT_EQ(x.shadow_dev_deg, y.shadow_dev_deg);
    EXPECT_EQ(x.centroid_px, y.centroid_px);
    EXPECT_TRUE(x.valid);
    EXPECT_GE(x.iou, 0.0);
    EXPECT_LE(x.iou, 1.0);
    if (x.shadow_dev_deg) {
      EXPECT_GE(*x.shadow_dev_deg, 0.0);
      EXPECT_LE(*x.shadow_dev_deg, 180.0);
    }
  }
}

TEST(Ablation, StandardSlotsReportAndMismatch) {
  const auto cfg = small_config();
  denoiser::Denoiser full(cfg, 2), no_rw(cfg, 3), no_joint(cfg, 4);
  no_rw.set_toggles(false, true);
  no_joint.set_toggles(true, false);
  const auto sched = diffusion::schedule_tables(diffusion::ScheduleKind::Linear, 50);
  diffusion::SamplerConfig s;
  s.steps = 2;
  const auto cases = eval_cases(2, 1, 2);
  const auto r = ablation_run(standard_slots(full, no_rw, no_joint), cases, sched, s);
  ASSERT_EQ(r.comparisons.size(), 3u);
  EXPECT_EQ(r.comparisons[0].metric, "occupancy");
  EXPECT_EQ(r.comparisons[1].metric, "iou");
  EXPECT_EQ(r.comparisons[2].metric, "shadow_dev_deg");
  EXPECT_EQ(r.comparisons[2].worse, "no_joint");

  const auto csv = to_csv(r.reports);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "sample_id,config,iou,centroid_px,shadow_dev_deg,occupancy,valid");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6);
  const auto md = summary_markdown(r);
  EXPECT_NE(md.find("no_reweighting"), std::string::npos);
  EXPECT_NE(md.find("sign test p"), std::string::npos);

  const auto dir = std::filesystem::temp_directory_path() / "layerforge_tests" / "ablation";
  write_report(r, dir);
  EXPECT_TRUE(std::filesystem::exists(dir / "metrics.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "summary.md"));

  // Slots whose checkpoints contradict their toggles.
  EXPECT_THROW(ablation_run(standard_slots(full, full, no_joint), cases, sched, s), ValidationError);
  auto other = cfg;
  other.k_max = 2;
  const denoiser::Denoiser small_k(other, 5);
  EXPECT_THROW(ablation_run({{"full", &full, true, true}, {"x", &small_k, true, true}}, cases, sched, s), ValidationError);
}

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "layerforge/cli.hpp"
#include "layerforge/errors.hpp"
#include "layerforge/image_io.hpp"

using namespace layerforge;
using namespace layerforge::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / "layerforge_tests" / "cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const json kTiny = json::parse(R"({
  "data": {"n": 6},
  "model": {"widths": [8, 16], "heads": 2, "d_txt": 16, "groups": 4},
  "schedule": {"steps": 100},
  "train": {"steps": 2, "batch_size": 2, "checkpoint_every": 0, "sample_grid": 1},
  "sample": {"steps": 3},
  "eval": {"n": 2}
})");

const json kPrompt = json::parse(R"({"background": "checker", "light": "SE",
  "layers": [{"color": "red", "shape": "circle", "scale": "small"}, {"color": "blue", "shape": "star", "scale": "large"}]})");

fs::path write_json(const fs::path& path, const json& j) {
  std::ofstream(path) << j.dump(2);
  return path;
}

struct Result {
  int code;
  std::string out, err;
};

Result invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Every regular file under `dir`, relative path -> bytes.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  return out;
}

// A trained-for-two-steps checkpoint shared by the sampling tests.
const fs::path& checkpoint() {
  static const fs::path path = [] {
    const auto dir = temp_dir("shared_train");
    const auto cfg = write_json(dir / "tiny.json", kTiny);
    const auto r = invoke({"train", "--config", cfg.string(), "--seed", "1", "--out", (dir / "run").string()});
    EXPECT_EQ(r.code, 0) << r.err;
    return dir / "run" / "model.ckpt";
  }();
  return path;
}

}  // namespace

TEST(Config, DefaultsRoundTripAndRejectUnknownKeys) {
  const RunConfig c;
  EXPECT_EQ(run_config_from_json(to_json(c)), c);
  EXPECT_EQ(run_config_from_json(json::object()), c);
  for (const char* section : {"data", "model", "schedule", "train", "sample", "eval"}) {
    json j = to_json(c);
    j[section]["bogus"] = 1;
    try {
      run_config_from_json(j);
      ADD_FAILURE() << section;
    } catch (const ValidationError& e) {
      EXPECT_NE(std::string(e.what()).find(section), std::string::npos) << e.what();
    }
  }
  json top = to_json(c);
  top["extra"] = json::object();
  EXPECT_THROW(run_config_from_json(top), ValidationError);
}

TEST(Config, RangeAndConsistencyChecks) {
  auto bad = [](const char* section, const char* key, json value) {
    json j = json::object();
    j[section][key] = std::move(value);
    EXPECT_THROW(run_config_from_json(j), ValidationError) << section << "." << key;
  };
  bad("data", "n", 0);
  bad("data", "width", 16);  // differs from model.image_size
  bad("data", "max_layers", 4);
  bad("data", "n", "many");
  bad("schedule", "kind", "sigmoid");
  bad("sample", "steps", 2000);
  bad("sample", "eta", 2.0);
  bad("eval", "inspect_step", 50);
  bad("train", "lr", -1.0);
  bad("model", "heads", 0);
}

TEST(Config, SeedAndToggleOverrides) {
  RunConfig c;
  apply_seed(c, 42);
  EXPECT_EQ(c.data.seed, 42u);
  EXPECT_EQ(c.train.seed, 42u);
  EXPECT_EQ(c.sample.seed, 42u);
  EXPECT_EQ(c.eval.seed, 42u);
  apply_toggle(c.model, "reweighting=off");
  EXPECT_FALSE(c.model.reweighting_on);
  apply_toggle(c.model, "joint=off");
  EXPECT_FALSE(c.model.joint_attention_on);
  apply_toggle(c.model, "joint=on");
  EXPECT_TRUE(c.model.joint_attention_on);
  EXPECT_THROW(apply_toggle(c.model, "joint"), ValidationError);
  EXPECT_THROW(apply_toggle(c.model, "dropout=on"), ValidationError);
}

TEST(PromptFile, MinimalOneLayer) {
  const auto p = parse_prompt(json::parse(R"({"background": "gradient", "light": "NW", "layers": [{"color": "green", "shape": "square"}]})"));
  EXPECT_EQ(p.layer_count(), 1);
  const auto c = synth::detokenize(p);
  EXPECT_EQ(c.background, synth::Background::Gradient);
  EXPECT_EQ(c.light, synth::Light::NW);
  EXPECT_EQ(c.layers[0].shape, synth::ShapeKind::Square);
  EXPECT_EQ(c.layers[0].scale, synth::Scale::Medium);
  ASSERT_EQ(p.global_subject.size(), 1u);
  EXPECT_TRUE(synth::is_shape_token(p.global[static_cast<std::size_t>(p.global_subject[0])]));
}

TEST(PromptFile, LayerBoundAndErrors) {
  json four = kPrompt;
  four["layers"] = json::array();
  for (int i = 0; i < 4; ++i) four["layers"].push_back({{"color", "red"}, {"shape", "circle"}});
  EXPECT_THROW(parse_prompt(four, 3), ValidationError);
  json two = kPrompt;
  EXPECT_THROW(parse_prompt(two, 1), ValidationError);
  json none = kPrompt;
  none["layers"] = json::array();
  EXPECT_THROW(parse_prompt(none), ValidationError);
  json extra = kPrompt;
  extra["mood"] = "calm";
  EXPECT_THROW(parse_prompt(extra), ValidationError);
  json missing = kPrompt;
  missing.erase("light");
  EXPECT_THROW(parse_prompt(missing), ValidationError);
  EXPECT_THROW(parse_prompt_file("/nonexistent/prompt.json"), ValidationError);
}

TEST(PromptFile, UnknownWordsCarrySuggestions) {
  json j = kPrompt;
  j["layers"][0]["shape"] = "circel";
  try {
    parse_prompt(j);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("did you mean: circle"), std::string::npos) << e.what();
  }
  j = kPrompt;
  j["background"] = "zzzzzzzz";
  try {
    parse_prompt(j);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("expected one of: gradient checker noise horizon"), std::string::npos) << e.what();
  }
  EXPECT_EQ(suggestions("bleu", {"red", "blue", "green"}), std::vector<std::string>{"blue"});
}

TEST(PromptFile, CanonicalRoundTrip) {
  const auto p = parse_prompt(kPrompt);
  const json canonical = prompt_file_json(p);
  EXPECT_EQ(parse_prompt(canonical), p);
  EXPECT_EQ(prompt_file_json(parse_prompt(canonical)), canonical);
  // Dataset prompts survive the trip too.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = synth::generate_scene(seed);
    EXPECT_EQ(parse_prompt(prompt_file_json(s.prompt)), s.prompt);
  }
}

TEST(Attention, GridTextAndHeatmap) {
  std::vector<float> v(16 * 16);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i) / 255.0f;
  const auto text = attention_grid_text(v, 16, 16, {{"block", "mid.attn"}});
  std::istringstream in(text);
  std::string line;
  int rows = 0, header = 0;
  while (std::getline(in, line)) {
    if (line[0] == '#') {
      ++header;
      continue;
    }
    std::istringstream row(line);
    float x;
    int cols = 0;
    while (row >> x) {
      EXPECT_FLOAT_EQ(x, v[static_cast<std::size_t>(rows * 16 + cols)]);
      ++cols;
    }
    EXPECT_EQ(cols, 16);
    ++rows;
  }
  EXPECT_EQ(rows, 16);
  EXPECT_EQ(header, 4);
  const auto img = heatmap(v, 16, 16, 4);
  EXPECT_EQ(img.width, 64);
  EXPECT_EQ(img.channels, 3);
  EXPECT_EQ(img.pixels[0], 0);
  EXPECT_THROW(heatmap(v, 4, 4), DimensionError);
}

TEST(Commands, GenDataIsDeterministic) {
  const auto dir = temp_dir("gen");
  auto a = invoke({"gen-data", "--n", "10", "--seed", "7", "--out", (dir / "a").string()});
  auto b = invoke({"gen-data", "--n", "10", "--seed", "7", "--out", (dir / "b").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(synth::load_manifest(dir / "a").checksum, synth::load_manifest(dir / "b").checksum);
  EXPECT_EQ(tree(dir / "a"), tree(dir / "b"));
  EXPECT_EQ(synth::load_manifest(dir / "a").entries.size(), 10u);
  const auto echoed = json::parse(slurp(dir / "a" / "config.json"));
  EXPECT_EQ(echoed["data"]["seed"], 7);
  EXPECT_EQ(echoed["data"]["n"], 10);
}

TEST(Commands, ComposeMatchesClosedForm) {
  const auto dir = temp_dir("compose");
  const auto scene = synth::generate_scene(3);
  const auto img = quantized(scene.image);
  save_archive({img, synth::to_json(scene.prompt), 3}, dir / "in.lfa");
  const auto r = invoke({"compose", (dir / "in.lfa").string(), (dir / "out.png").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto png = io::read_png(dir / "out.png");
  const auto expected = composite_closed_form(load_archive(dir / "in.lfa").image);
  ASSERT_EQ(png.pixels.size(), expected.values.size());
  for (std::size_t i = 0; i < png.pixels.size(); ++i) ASSERT_EQ(png.pixels[i], to_byte(expected.values[i]));
  EXPECT_EQ(invoke({"compose", (dir / "missing.lfa").string(), (dir / "x.png").string()}).code, kExitRuntime);
  EXPECT_EQ(invoke({"compose", (dir / "in.lfa").string()}).code, kExitValidation);
}

TEST(Commands, ExitCodes) {
  const auto dir = temp_dir("codes");
  const auto prompt = write_json(dir / "p.json", kPrompt);
  EXPECT_EQ(invoke({"sample", "--checkpoint", (dir / "none.ckpt").string(), "--prompt-file", prompt.string(), "--out",
                 (dir / "s").string()}).code,
            kExitCheckpoint);
  EXPECT_EQ(invoke({"frobnicate"}).code, kExitValidation);
  EXPECT_EQ(invoke({}).code, kExitValidation);
  EXPECT_EQ(invoke({"train", "--config", (dir / "absent.json").string()}).code, kExitValidation);
  json bad = kTiny;
  bad["train"]["steps"] = 0;
  EXPECT_EQ(invoke({"train", "--config", write_json(dir / "bad.json", bad).string(), "--out", (dir / "t").string()}).code,
            kExitValidation);
  EXPECT_EQ(invoke({"train", "--config", write_json(dir / "tiny.json", kTiny).string(), "--toggle", "joint=sometimes", "--out",
                 (dir / "t").string()}).code,
            kExitValidation);
  EXPECT_EQ(invoke({"sample", "--checkpoint", checkpoint().string(), "--out", (dir / "s").string()}).code, kExitValidation);
  EXPECT_EQ(invoke({"--help"}).code, kExitOk);
}

TEST(Commands, SampleThenEvalAndDeterminism) {
  const auto dir = temp_dir("sample");
  const auto cfg = write_json(dir / "tiny.json", kTiny);
  const auto prompt = write_json(dir / "p.json", kPrompt);
  for (const char* run : {"a", "b"}) {
    const auto r = invoke({"sample", "--config", cfg.string(), "--checkpoint", checkpoint().string(), "--prompt-file",
                        prompt.string(), "--seed", "3", "--n", "2", "--out", (dir / run).string()});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(tree(dir / "a"), tree(dir / "b"));
  const auto archive = load_archive(dir / "a" / "sample_001" / "layers.lfa");
  EXPECT_EQ(archive.image.layer_count(), 2);
  EXPECT_NO_THROW(validate(archive.image));
  EXPECT_EQ(parse_prompt(json::parse(slurp(dir / "a" / "sample_000" / "prompt.json"))), parse_prompt(kPrompt));

  const auto e = invoke({"eval", "--out", (dir / "eval").string(), (dir / "a").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto csv = slurp(dir / "eval" / "metrics.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_TRUE(fs::exists(dir / "eval" / "summary.md"));
  EXPECT_EQ(invoke({"eval", "--out", (dir / "eval2").string(), (dir / "empty").string()}).code, kExitValidation);

  // A different seed gives different images.
  const auto c = invoke({"sample", "--config", cfg.string(), "--checkpoint", checkpoint().string(), "--prompt-file",
                      prompt.string(), "--seed", "4", "--out", (dir / "c").string()});
  ASSERT_EQ(c.code, 0);
  EXPECT_NE(slurp(dir / "a" / "sample_000" / "layers.lfa"), slurp(dir / "c" / "sample_000" / "layers.lfa"));
}

TEST(Commands, EchoedConfigReproducesTraining) {
  const auto dir = temp_dir("echo");
  const auto cfg = write_json(dir / "tiny.json", kTiny);
  auto a = invoke({"train", "--config", cfg.string(), "--seed", "5", "--toggle", "reweighting=off", "--out", (dir / "a").string()});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto echoed = json::parse(slurp(dir / "a" / "config.json"));
  EXPECT_EQ(echoed["model"]["reweighting_on"], false);
  EXPECT_EQ(echoed["train"]["seed"], 5);
  auto b = invoke({"train", "--config", (dir / "a" / "config.json").string(), "--out", (dir / "b").string()});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(tree(dir / "a"), tree(dir / "b"));
  EXPECT_FALSE(denoiser::Denoiser::load(dir / "b" / "model.ckpt").config().reweighting_on);
}

TEST(Commands, InspectAttentionDumpsGrids) {
  const auto dir = temp_dir("inspect");
  const auto cfg = write_json(dir / "tiny.json", kTiny);
  const auto prompt = write_json(dir / "p.json", kPrompt);
  const auto r = invoke({"inspect-attn", "--config", cfg.string(), "--checkpoint", checkpoint().string(), "--prompt-file",
                      prompt.string(), "--seed", "2", "--out", (dir / "a").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto net = denoiser::Denoiser::load(checkpoint());
  for (const auto& block : net.attention_blocks()) {
    const int res = net.block_resolution(block);
    for (const char* kind : {"global", "layer", "mask"}) {
      const auto stem = dir / "a" / (block + ".fg1." + kind);
      ASSERT_TRUE(fs::exists(stem.string() + ".txt")) << stem;
      ASSERT_TRUE(fs::exists(stem.string() + ".png")) << stem;
      std::istringstream in(slurp(stem.string() + ".txt"));
      std::string line;
      int rows = 0;
      while (std::getline(in, line))
        if (line[0] != '#') ++rows;
      EXPECT_EQ(rows, res);
    }
    const bool reweighted = res == net.config().reweight_resolution;
    EXPECT_EQ(fs::exists(dir / "a" / (block + ".fg2.reweighted.txt")), reweighted) << block;
    EXPECT_TRUE(fs::exists(dir / "a" / (block + ".background.mask.txt")));
  }
  const auto again = invoke({"inspect-attn", "--config", cfg.string(), "--checkpoint", checkpoint().string(), "--prompt-file",
                          prompt.string(), "--seed", "2", "--out", (dir / "b").string()});
  ASSERT_EQ(again.code, 0);
  EXPECT_EQ(tree(dir / "a"), tree(dir / "b"));
}

TEST(Commands, AblateWithGivenCheckpoints) {
  const auto dir = temp_dir("ablate");
  json cfg = kTiny;
  // No checkpoints given: the three variants are trained for two steps each.
  const auto r = invoke({"ablate", "--config", write_json(dir / "tiny.json", cfg).string(), "--seed", "1", "--n", "2", "--out",
                      (dir / "a").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"metrics.csv", "summary.md", "train_full/model.ckpt", "train_no_reweighting/model.ckpt",
                        "train_no_joint/model.ckpt"})
    EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
  EXPECT_FALSE(denoiser::Denoiser::load(dir / "a" / "train_no_joint" / "model.ckpt").config().joint_attention_on);

  cfg["eval"]["full"] = (dir / "a" / "train_full" / "model.ckpt").string();
  cfg["eval"]["no_reweighting"] = (dir / "a" / "train_no_reweighting" / "model.ckpt").string();
  cfg["eval"]["no_joint"] = (dir / "a" / "train_no_joint" / "model.ckpt").string();
  const auto b = invoke({"ablate", "--config", write_json(dir / "given.json", cfg).string(), "--seed", "1", "--n", "2", "--out",
                      (dir / "b").string()});
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(dir / "a" / "metrics.csv"), slurp(dir / "b" / "metrics.csv"));

  cfg["eval"]["no_joint"] = cfg["eval"]["full"];  // toggles contradict the slot
  EXPECT_EQ(invoke({"ablate", "--config", write_json(dir / "mismatch.json", cfg).string(), "--n", "1", "--out", (dir / "c").string()}).code,
            kExitValidation);
  cfg["eval"]["no_joint"] = (dir / "nothing.ckpt").string();
  EXPECT_EQ(invoke({"ablate", "--config", write_json(dir / "missing.json", cfg).string(), "--n", "1", "--out", (dir / "d").string()}).code,
            kExitCheckpoint);
}

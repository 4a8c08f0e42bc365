#include "layerforge/cli.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "layerforge/errors.hpp"
#include "layerforge/image_io.hpp"
#include "layerforge/random.hpp"

namespace layerforge::cli {

using nlohmann::json;
using denoiser::BranchId;
using denoiser::Role;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// configuration

namespace {

json data_json(const DataConfig& d) {
  return {{"dir", d.dir},
          {"n", d.n},
          {"seed", d.seed},
          {"width", d.width},
          {"height", d.height},
          {"min_layers", d.min_layers},
          {"max_layers", d.max_layers},
          {"max_occlusion", d.max_occlusion}};
}

json eval_json(const EvalConfig& e) {
  return {{"n", e.n},       {"seed", e.seed},
          {"inspect_step", e.inspect_step}, {"full", e.full},
          {"no_reweighting", e.no_reweighting}, {"no_joint", e.no_joint}};
}

json sample_json(const diffusion::SamplerConfig& s) { return {{"steps", s.steps}, {"eta", s.eta}, {"seed", s.seed}}; }

json schedule_json(const ScheduleConfig& s) { return {{"kind", diffusion::to_string(s.kind)}, {"steps", s.steps}}; }

void reject_unknown(const json& j, const json& known, const std::string& section) {
  if (!j.is_object()) throw ValidationError(section + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ValidationError(section + ": unknown key '" + it.key() + "'");
}

template <class T>
void read(const json& j, const char* key, T& field, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(section + "." + key + ": wrong type");
  }
}

// Sections owned by other modules are rejected with their own messages;
// prefix them so the user sees where the problem is.
template <class F>
auto section(const char* name, F&& parse) {
  try {
    return parse();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    if (msg.rfind(std::string(name) + ":", 0) == 0 || msg.rfind(std::string(name) + ".", 0) == 0) throw;
    throw ValidationError(std::string(name) + ": " + msg);
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  return {{"data", data_json(c.data)},           {"model", denoiser::to_json(c.model)},
          {"schedule", schedule_json(c.schedule)}, {"train", diffusion::to_json(c.train)},
          {"sample", sample_json(c.sample)},     {"eval", eval_json(c.eval)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  reject_unknown(j, to_json(c), "config");
  if (j.contains("data")) {
    const json& d = j.at("data");
    reject_unknown(d, data_json(c.data), "data");
    read(d, "dir", c.data.dir, "data");
    read(d, "n", c.data.n, "data");
    read(d, "seed", c.data.seed, "data");
    read(d, "width", c.data.width, "data");
    read(d, "height", c.data.height, "data");
    read(d, "min_layers", c.data.min_layers, "data");
    read(d, "max_layers", c.data.max_layers, "data");
    read(d, "max_occlusion", c.data.max_occlusion, "data");
  }
  if (j.contains("model")) c.model = section("model", [&] { return denoiser::config_from_json(j.at("model")); });
  if (j.contains("schedule")) {
    const json& s = j.at("schedule");
    reject_unknown(s, schedule_json(c.schedule), "schedule");
    std::string kind = diffusion::to_string(c.schedule.kind);
    read(s, "kind", kind, "schedule");
    c.schedule.kind = section("schedule", [&] { return diffusion::parse_schedule_kind(kind); });
    read(s, "steps", c.schedule.steps, "schedule");
  }
  if (j.contains("train")) c.train = section("train", [&] { return diffusion::train_config_from_json(j.at("train")); });
  if (j.contains("sample")) {
    const json& s = j.at("sample");
    reject_unknown(s, sample_json(c.sample), "sample");
    read(s, "steps", c.sample.steps, "sample");
    read(s, "eta", c.sample.eta, "sample");
    read(s, "seed", c.sample.seed, "sample");
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    reject_unknown(e, eval_json(c.eval), "eval");
    read(e, "n", c.eval.n, "eval");
    read(e, "seed", c.eval.seed, "eval");
    read(e, "inspect_step", c.eval.inspect_step, "eval");
    read(e, "full", c.eval.full, "eval");
    read(e, "no_reweighting", c.eval.no_reweighting, "eval");
    read(e, "no_joint", c.eval.no_joint, "eval");
  }

  const auto& d = c.data;
  if (d.n < 1) throw ValidationError("data.n must be positive");
  if (d.width < 8 || d.height < 8) throw ValidationError("data: width and height must be at least 8");
  if (d.min_layers < 1 || d.max_layers > synth::kMaxLayers || d.min_layers > d.max_layers)
    throw ValidationError("data: need 1 <= min_layers <= max_layers <= " + std::to_string(synth::kMaxLayers));
  if (!(d.max_occlusion > 0.0 && d.max_occlusion <= 1.0)) throw ValidationError("data.max_occlusion must lie in (0, 1]");
  section("model", [&] { c.model.validate(); return 0; });
  if (d.width != c.model.image_size || d.height != c.model.image_size)
    throw ValidationError("data: width and height must equal model.image_size");
  if (d.max_layers > c.model.k_max) throw ValidationError("data.max_layers exceeds model.k_max");
  const auto sched = section("schedule", [&] { return diffusion::schedule_tables(c.schedule.kind, c.schedule.steps); });
  section("sample", [&] { diffusion::validate(c.sample, sched); return 0; });
  if (c.eval.n < 1) throw ValidationError("eval.n must be positive");
  if (c.eval.inspect_step < -1 || c.eval.inspect_step >= c.sample.steps)
    throw ValidationError("eval.inspect_step must be -1 or a DDIM step index below sample.steps");
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("config file " + path.string() + " not found");
  std::ifstream in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.data.seed = seed;
  c.train.seed = seed;
  c.sample.seed = seed;
  c.eval.seed = seed;
}

void apply_toggle(denoiser::DenoiserConfig& model, const std::string& spec) {
  const auto eq = spec.find('=');
  const std::string name = spec.substr(0, eq), value = eq == std::string::npos ? "" : spec.substr(eq + 1);
  if (value != "on" && value != "off") throw ValidationError("--toggle expects name=on|off, got '" + spec + "'");
  const bool on = value == "on";
  if (name == "reweighting") model.reweighting_on = on;
  else if (name == "joint") model.joint_attention_on = on;
  else throw ValidationError("unknown toggle '" + name + "' (expected reweighting or joint)");
}

synth::Constraints constraints_of(const DataConfig& d) {
  synth::Constraints c;
  c.width = d.width;
  c.height = d.height;
  c.min_layers = d.min_layers;
  c.max_layers = d.max_layers;
  c.max_occlusion = d.max_occlusion;
  return c;
}

// ---------------------------------------------------------------------------
// prompt files

namespace {

std::string lower(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return s;
}

int edit_distance(const std::string& a, const std::string& b) {
  std::vector<int> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::vector<std::string> words(int first, int count) {
  std::vector<std::string> out;
  for (int i = 0; i < count; ++i) out.push_back(synth::token_word(first + i));
  return out;
}

// Index of `word` within its category, or a ValidationError with suggestions.
int lookup(const std::string& word, const char* category, int first, int count) {
  const auto candidates = words(first, count);
  for (int i = 0; i < count; ++i)
    if (lower(candidates[static_cast<std::size_t>(i)]) == lower(word)) return i;
  std::string msg = std::string("unknown ") + category + " '" + word + "'";
  const auto near = suggestions(word, candidates);
  msg += near.empty() ? " (expected one of:" : " (did you mean:";
  for (const auto& w : near.empty() ? candidates : near) msg += " " + w;
  throw ValidationError(msg + ")");
}

std::string word_of(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ValidationError(where + ": missing '" + key + "'");
  if (!j.at(key).is_string()) throw ValidationError(where + "." + key + ": expected a string");
  return j.at(key).get<std::string>();
}

}  // namespace

std::vector<std::string> suggestions(const std::string& word, const std::vector<std::string>& candidates) {
  std::vector<std::pair<int, std::string>> scored;
  for (const auto& c : candidates) {
    const int d = edit_distance(lower(word), lower(c));
    if (d <= std::max<int>(2, static_cast<int>(c.size()) / 2)) scored.emplace_back(d, c);
  }
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  std::vector<std::string> out;
  for (std::size_t i = 0; i < scored.size() && i < 3; ++i) out.push_back(scored[i].second);
  return out;
}

synth::PromptSpec parse_prompt(const json& j, int k_max) {
  if (!j.is_object()) throw ValidationError("prompt: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "background" && it.key() != "light" && it.key() != "layers")
      throw ValidationError("prompt: unknown key '" + it.key() + "'");
  synth::PromptContent c;
  c.background = static_cast<synth::Background>(lookup(word_of(j, "background", "prompt"), "background", synth::token::kBackground, 4));
  c.light = static_cast<synth::Light>(lookup(word_of(j, "light", "prompt"), "light direction", synth::token::kLight, 4));
  if (!j.contains("layers") || !j.at("layers").is_array()) throw ValidationError("prompt: 'layers' must be an array");
  const auto& layers = j.at("layers");
  if (layers.empty()) throw ValidationError("prompt: at least one layer is required");
  if (static_cast<int>(layers.size()) > k_max)
    throw ValidationError("prompt: " + std::to_string(layers.size()) + " layers requested but K_max is " + std::to_string(k_max));
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const json& l = layers[i];
    const std::string where = "prompt.layers[" + std::to_string(i) + "]";
    if (!l.is_object()) throw ValidationError(where + ": expected an object");
    for (auto it = l.begin(); it != l.end(); ++it)
      if (it.key() != "color" && it.key() != "shape" && it.key() != "scale")
        throw ValidationError(where + ": unknown key '" + it.key() + "'");
    synth::PromptContent::Layer layer;
    layer.color = lookup(word_of(l, "color", where), "color", synth::token::kColor, synth::kColors);
    layer.shape = static_cast<synth::ShapeKind>(lookup(word_of(l, "shape", where), "shape", synth::token::kShape, 4));
    layer.scale = l.contains("scale") ? static_cast<synth::Scale>(lookup(word_of(l, "scale", where), "scale", synth::token::kScale, 3))
                                      : synth::Scale::Medium;
    c.layers.push_back(layer);
  }
  auto p = synth::tokenize(c);
  synth::validate(p);
  return p;
}

synth::PromptSpec parse_prompt_file(const fs::path& path, int k_max) {
  if (!fs::exists(path)) throw ValidationError("prompt file " + path.string() + " not found");
  std::ifstream in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("prompt file " + path.string() + ": " + e.what());
  }
  return parse_prompt(j, k_max);
}

json prompt_file_json(const synth::PromptSpec& prompt) {
  const auto c = synth::detokenize(prompt);
  json layers = json::array();
  for (const auto& l : c.layers)
    layers.push_back({{"color", synth::token_word(synth::token::kColor + l.color)},
                      {"shape", synth::token_word(synth::token::kShape + static_cast<int>(l.shape))},
                      {"scale", synth::token_word(synth::token::kScale + static_cast<int>(l.scale))}});
  return {{"background", synth::token_word(synth::token::kBackground + static_cast<int>(c.background))},
          {"light", synth::token_word(synth::token::kLight + static_cast<int>(c.light))},
          {"layers", layers}};
}

// ---------------------------------------------------------------------------
// images

io::Image8 to_image8(const RgbImage& img) {
  io::Image8 out{img.width, img.height, 3, {}};
  out.pixels.reserve(img.values.size());
  for (double v : img.values) out.pixels.push_back(to_byte(v));
  return out;
}

namespace {

io::Image8 alpha_image(const RgbaLayer& layer) {
  io::Image8 out{layer.alpha.width, layer.alpha.height, 4, {}};
  for (std::size_t p = 0; p < layer.alpha.values.size(); ++p) {
    for (int c = 0; c < 3; ++c) out.pixels.push_back(to_byte(layer.color.values[p * 3 + c]));
    out.pixels.push_back(to_byte(layer.alpha.values[p]));
  }
  return out;
}

std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace

std::string attention_grid_text(const std::vector<float>& values, int height, int width,
                                const std::vector<std::pair<std::string, std::string>>& header) {
  if (values.size() != static_cast<std::size_t>(height) * width) throw DimensionError("attention grid size mismatch");
  std::string out = "# layerforge attention grid\n";
  for (const auto& [k, v] : header) out += "# " + k + ": " + v + "\n";
  out += "# height: " + std::to_string(height) + "\n# width: " + std::to_string(width) + "\n";
  char buf[32];
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      std::snprintf(buf, sizeof buf, x ? " %.8e" : "%.8e", static_cast<double>(values[static_cast<std::size_t>(y) * width + x]));
      out += buf;
    }
    out += "\n";
  }
  return out;
}

io::Image8 heatmap(const std::vector<float>& values, int height, int width, int scale) {
  if (values.size() != static_cast<std::size_t>(height) * width) throw DimensionError("heatmap size mismatch");
  float lo = values.empty() ? 0.0f : *std::min_element(values.begin(), values.end());
  float hi = values.empty() ? 0.0f : *std::max_element(values.begin(), values.end());
  const float span = hi > lo ? hi - lo : 1.0f;
  // black -> purple -> orange -> pale yellow
  static constexpr std::array<std::array<double, 3>, 4> stops{{{0.0, 0.0, 0.02}, {0.45, 0.1, 0.45}, {0.95, 0.45, 0.1}, {1.0, 1.0, 0.7}}};
  io::Image8 out{width * scale, height * scale, 3, {}};
  out.pixels.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      const double u = (values[static_cast<std::size_t>(y / scale) * width + x / scale] - lo) / span * 3.0;
      const int i = std::min(2, static_cast<int>(u));
      const double f = u - i;
      for (int c = 0; c < 3; ++c)
        out.pixels[(static_cast<std::size_t>(y) * out.width + x) * 3 + c] = to_byte(stops[i][c] * (1 - f) + stops[i + 1][c] * f);
    }
  return out;
}

// ---------------------------------------------------------------------------
// commands

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> n;
  std::string checkpoint;
  std::string prompt_file;
  std::vector<std::string> toggles;
  std::vector<std::string> inputs;
};

std::string timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

struct Session {
  std::string command;
  Options opt;
  RunConfig cfg;
  fs::path dir;
  std::ostream& out;

  void echo_config() const { io::write_text(dir / "config.json", to_json(cfg).dump(2) + "\n"); }
  diffusion::NoiseSchedule schedule() const { return diffusion::schedule_tables(cfg.schedule.kind, cfg.schedule.steps); }
};

fs::path run_dir(const std::string& command, const Options& o) {
  fs::path dir = o.out.empty() ? fs::path("runs") / (command + "-" + timestamp()) : fs::path(o.out);
  fs::create_directories(dir);
  return dir;
}

denoiser::Denoiser load_checkpoint(const Session& s) {
  if (s.opt.checkpoint.empty()) throw ValidationError(s.command + ": --checkpoint is required");
  auto net = denoiser::Denoiser::load(s.opt.checkpoint);
  auto model = net.config();
  for (const auto& t : s.opt.toggles) apply_toggle(model, t);
  net.set_toggles(model.reweighting_on, model.joint_attention_on);
  return net;
}

synth::PromptSpec require_prompt(const Session& s, int k_max) {
  if (s.opt.prompt_file.empty()) throw ValidationError(s.command + ": --prompt-file is required");
  return parse_prompt_file(s.opt.prompt_file, k_max);
}

std::string sample_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%03d", i);
  return buf;
}

json masks_json(const std::vector<AlphaMap>& masks) {
  json layers = json::array();
  for (const auto& m : masks) {
    json v = json::array();
    for (double x : m.values) v.push_back(std::round(x * 1e6) / 1e6);
    layers.push_back(v);
  }
  const int h = masks.empty() ? 0 : masks[0].height, w = masks.empty() ? 0 : masks[0].width;
  return {{"height", h}, {"width", w}, {"threshold", metrics::kBinarize}, {"layers", layers}};
}

std::vector<AlphaMap> masks_from_json(const json& j) {
  std::vector<AlphaMap> out;
  try {
    const int h = j.at("height").get<int>(), w = j.at("width").get<int>();
    for (const auto& l : j.at("layers")) {
      AlphaMap m(h, w);
      m.values = l.get<std::vector<double>>();
      if (m.values.size() != static_cast<std::size_t>(h) * w) throw FormatError("layout mask has the wrong size");
      out.push_back(std::move(m));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("layout_masks.json: ") + e.what());
  }
  return out;
}

void write_sample(const fs::path& dir, const eval::Scored& s, const synth::PromptSpec& prompt, std::uint64_t seed) {
  fs::create_directories(dir);
  const LayeredImage img = quantized(s.output.image);
  save_archive({img, synth::to_json(prompt), seed}, dir / "layers.lfa");
  io::write_png(dir / "composite.png", to_image8(composite_closed_form(img)));
  io::write_png(dir / "global.png", to_image8(s.output.global));
  io::write_png(dir / "background.png", to_image8(img.background));
  for (int i = 0; i < img.layer_count(); ++i)
    io::write_png(dir / ("fg_" + std::to_string(i + 1) + ".png"), alpha_image(img.foregrounds[static_cast<std::size_t>(i)]));
  io::write_text(dir / "layout_masks.json", masks_json(s.masks).dump() + "\n");
  io::write_text(dir / "prompt.json", prompt_file_json(prompt).dump(2) + "\n");
}

std::vector<diffusion::TrainSample> training_data(const Session& s) {
  if (!s.cfg.data.dir.empty()) {
    auto data = diffusion::load_dataset(s.cfg.data.dir);
    for (const auto& d : data)
      if (d.image.height() != s.cfg.model.image_size || d.image.width() != s.cfg.model.image_size)
        throw ValidationError("dataset image size does not match model.image_size");
    return data;
  }
  const auto c = constraints_of(s.cfg.data);
  std::vector<diffusion::TrainSample> data;
  for (int i = 0; i < s.cfg.data.n; ++i) {
    const auto scene = synth::generate_scene(synth::scene_seed(s.cfg.data.seed, i), c);
    data.push_back({quantized(scene.image), scene.prompt});
  }
  return data;
}

denoiser::Denoiser train_model(const Session& s, const std::vector<diffusion::TrainSample>& data,
                               const denoiser::DenoiserConfig& model, const fs::path& dir) {
  denoiser::Denoiser net(model, s.cfg.train.seed);
  RunConfig echo = s.cfg;
  echo.model = model;
  const auto sched = s.schedule();
  const int every = std::max(1, s.cfg.train.steps / 20);
  diffusion::train(net, data, sched, s.cfg.train, dir, to_json(echo), [&](int step, const diffusion::StepLoss& l) {
    if (step % every == 0 || step == s.cfg.train.steps)
      s.out << "step " << step << "/" << s.cfg.train.steps << " loss " << format_float(l.loss) << "\n" << std::flush;
  });
  return net;
}

int cmd_gen_data(Session& s) {
  const auto m = synth::build_dataset(s.cfg.data.n, s.cfg.data.seed, s.dir, constraints_of(s.cfg.data));
  char crc[16];
  std::snprintf(crc, sizeof crc, "%08x", m.checksum);
  s.out << "wrote " << m.entries.size() << " scenes to " << s.dir.string() << " (manifest checksum " << crc << ")\n";
  return kExitOk;
}

int cmd_train(Session& s) {
  const auto data = training_data(s);
  s.out << "training on " << data.size() << " scenes for " << s.cfg.train.steps << " steps\n";
  train_model(s, data, s.cfg.model, s.dir);
  s.out << "wrote " << (s.dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

int cmd_sample(Session& s) {
  const auto net = load_checkpoint(s);
  s.cfg.model = net.config();
  const auto prompt = require_prompt(s, net.config().k_max);
  const auto sched = s.schedule();
  const int n = s.opt.n.value_or(1);
  if (n < 1) throw ValidationError("sample: --n must be positive");
  s.echo_config();
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = derive_seed(s.cfg.sample.seed, static_cast<std::uint64_t>(i));
    const auto scored = eval::score_sample(net, "sample", {i, prompt, seed}, sched, s.cfg.sample);
    write_sample(s.dir / sample_name(i), scored, prompt, seed);
  }
  s.out << "wrote " << n << " sample(s) to " << s.dir.string() << "\n";
  return kExitOk;
}

int cmd_compose(Session& s) {
  if (s.opt.inputs.size() != 2) throw ValidationError("compose: expected <archive> <out.png>");
  const auto archive = load_archive(s.opt.inputs[0]);
  io::write_png(s.opt.inputs[1], to_image8(composite_closed_form(archive.image)));
  s.out << "wrote " << s.opt.inputs[1] << "\n";
  return kExitOk;
}

int cmd_inspect(Session& s) {
  const auto net = load_checkpoint(s);
  s.cfg.model = net.config();
  const auto prompt = require_prompt(s, net.config().k_max);
  const int k = prompt.layer_count();
  std::vector<denoiser::ProbeSelector> probes;
  for (const auto& block : net.attention_blocks()) {
    for (int i = 1; i <= k; ++i) probes.push_back(denoiser::register_attention_probe(net.config(), block, BranchId::foreground(i)));
    probes.push_back(denoiser::register_attention_probe(net.config(), block, BranchId::background()));
  }
  for (auto& p : probes) p.self_weights = false;
  const int step = s.cfg.eval.inspect_step < 0 ? s.cfg.sample.steps - 1 : s.cfg.eval.inspect_step;
  const int t = diffusion::ddim_timesteps(s.cfg.sample.steps, s.cfg.schedule.steps)[static_cast<std::size_t>(step)];
  std::vector<denoiser::ProbeCapture> caps;
  const auto out = diffusion::decode_branches(diffusion::sample_tensors(net, prompt, s.schedule(), s.cfg.sample, probes, &caps, step));
  s.echo_config();
  io::write_png(s.dir / "composite.png", to_image8(composite_closed_form(quantized(out.image))));
  io::write_text(s.dir / "prompt.json", prompt_file_json(prompt).dump(2) + "\n");

  int files = 0;
  auto dump = [&](const denoiser::ProbeCapture& c, const std::string& kind, const std::vector<float>& v) {
    if (v.empty()) return;
    const std::string stem = c.selector.block + "." + denoiser::to_string(c.selector.branch) + "." + kind;
    const std::vector<std::pair<std::string, std::string>> header{
        {"block", c.selector.block}, {"branch", denoiser::to_string(c.selector.branch)}, {"map", kind},
        {"resolution", std::to_string(c.resolution)}, {"ddim_step", std::to_string(step)}, {"timestep", std::to_string(t)}};
    io::write_text(s.dir / (stem + ".txt"), attention_grid_text(v, c.resolution, c.resolution, header));
    io::write_png(s.dir / (stem + ".png"), heatmap(v, c.resolution, c.resolution));
    files += 2;
  };
  for (const auto& c : caps) {
    if (c.selector.branch.role == Role::Foreground) {
      dump(c, "global", c.global_map);
      dump(c, "layer", c.layer_map);
      dump(c, "reweighted", c.reweighted);
    }
    if (c.mask) dump(c, "mask", c.mask->values);
  }
  s.out << "wrote " << files << " attention files for DDIM step " << step << " (t = " << t << ") to " << s.dir.string() << "\n";
  return kExitOk;
}

std::vector<fs::path> sample_dirs(const fs::path& input) {
  if (fs::exists(input / "layers.lfa")) return {input};
  std::vector<fs::path> out;
  if (fs::is_directory(input))
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_directory() && fs::exists(e.path() / "layers.lfa")) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ValidationError("eval: no samples found under " + input.string());
  return out;
}

int cmd_eval(Session& s) {
  std::vector<eval::SampleMetrics> samples;
  std::string config = "checkpoint";
  if (!s.opt.inputs.empty()) {
    config = "samples";
    int id = 0;
    for (const auto& input : s.opt.inputs)
      for (const auto& dir : sample_dirs(input)) {
        const auto archive = load_archive(dir / "layers.lfa");
        const auto prompt = synth::prompt_from_json(archive.prompt);
        std::ifstream in(dir / "layout_masks.json");
        if (!in) throw ValidationError("eval: " + dir.string() + " has no layout_masks.json");
        json mj;
        try {
          in >> mj;
        } catch (const json::exception& e) {
          throw FormatError(std::string("layout_masks.json: ") + e.what());
        }
        diffusion::Decoded d;
        d.image = archive.image;
        auto m = eval::measure(d, masks_from_json(mj), synth::detokenize(prompt).light);
        m.sample_id = id++;
        m.config = config;
        samples.push_back(m);
      }
    s.echo_config();
  } else {
    const auto net = load_checkpoint(s);
    s.cfg.model = net.config();
    s.echo_config();
    const auto sched = s.schedule();
    const int n = s.opt.n.value_or(s.cfg.eval.n);
    for (const auto& c : eval::eval_cases(n, s.cfg.eval.seed, net.config().k_max))
      samples.push_back(eval::score_sample(net, config, c, sched, s.cfg.sample).metrics);
  }
  eval::AblationResult r;
  r.reports.push_back(eval::aggregate(config, std::move(samples)));
  eval::write_report(r, s.dir);
  const auto& rep = r.reports[0];
  s.out << "evaluated " << rep.samples.size() << " samples: IoU " << format_float(rep.mean_iou) << ", occupancy "
        << format_float(rep.mean_occupancy) << ", shadow deviation " << format_float(rep.mean_shadow_dev_deg) << " deg, valid "
        << rep.valid << "/" << rep.samples.size() << "\n";
  return kExitOk;
}

int cmd_ablate(Session& s) {
  struct Slot {
    std::string name;
    std::string checkpoint;
    bool reweighting, joint;
  };
  const std::vector<Slot> slots{{"full", s.cfg.eval.full, true, true},
                                {"no_reweighting", s.cfg.eval.no_reweighting, false, true},
                                {"no_joint", s.cfg.eval.no_joint, true, false}};
  s.echo_config();
  std::vector<diffusion::TrainSample> data;
  std::vector<denoiser::Denoiser> nets;
  for (const auto& slot : slots) {
    if (!slot.checkpoint.empty()) {
      nets.push_back(denoiser::Denoiser::load(slot.checkpoint));
      continue;
    }
    if (data.empty()) data = training_data(s);
    auto model = s.cfg.model;
    model.reweighting_on = slot.reweighting;
    model.joint_attention_on = slot.joint;
    s.out << "training " << slot.name << "\n";
    nets.push_back(train_model(s, data, model, s.dir / ("train_" + slot.name)));
  }
  const auto n = s.opt.n.value_or(s.cfg.eval.n);
  const auto cases = eval::eval_cases(n, s.cfg.eval.seed, nets[0].config().k_max);
  s.out << "sampling " << n << " scenes under " << slots.size() << " configurations\n";
  const auto result = eval::ablation_run(eval::standard_slots(nets[0], nets[1], nets[2]), cases, s.schedule(), s.cfg.sample);
  eval::write_report(result, s.dir);
  for (const auto& c : result.comparisons)
    s.out << c.metric << ": " << c.better << " " << format_float(c.better_mean) << " vs " << c.worse << " "
          << format_float(c.worse_mean) << ", sign test p = " << format_float(c.p_value) << (c.significant ? " (holds)\n" : " (does not hold)\n");
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Layered RGBA scene diffusion"};
  app.name("layerforge");
  app.require_subcommand(1);
  Options opt;
  auto common = [&](CLI::App* sub, bool n, bool checkpoint, bool prompt, bool toggles) {
    sub->add_option("--config", opt.config, "JSON run configuration");
    sub->add_option("--seed", opt.seed, "seed for every random stream");
    sub->add_option("--out", opt.out, "run directory (default runs/<command>-<time>)");
    if (n) sub->add_option("--n", opt.n, "number of scenes or samples");
    if (checkpoint) sub->add_option("--checkpoint", opt.checkpoint, "model checkpoint");
    if (prompt) sub->add_option("--prompt-file", opt.prompt_file, "layered prompt (JSON)");
    if (toggles) sub->add_option("--toggle", opt.toggles, "reweighting=on|off or joint=on|off")->take_all();
  };
  common(app.add_subcommand("gen-data", "generate a synthetic layered dataset"), true, false, false, false);
  common(app.add_subcommand("train", "train the multi-branch denoiser"), true, false, false, true);
  common(app.add_subcommand("sample", "sample layered images from a prompt file"), true, true, true, true);
  auto* compose = app.add_subcommand("compose", "composite a layer archive to PNG");
  compose->add_option("files", opt.inputs, "<archive> <out.png>")->expected(2);
  common(app.add_subcommand("inspect-attn", "dump attention maps and masks of one sampling step"), false, true, true, true);
  auto* ev = app.add_subcommand("eval", "score sampled images, or a checkpoint on generated prompts");
  common(ev, true, true, false, true);
  ev->add_option("samples", opt.inputs, "sample run directories");
  common(app.add_subcommand("ablate", "train or load the three ablation models and compare them"), true, false, false, false);

  std::vector<const char*> argv{"layerforge"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    RunConfig cfg = opt.config.empty() ? run_config_from_json(json::object()) : load_run_config(opt.config);
    if (opt.seed) apply_seed(cfg, *opt.seed);
    if (command == "gen-data" && opt.n) cfg.data.n = *opt.n;
    if (command == "train" && opt.n) cfg.data.n = *opt.n;
    if (command == "train")
      for (const auto& t : opt.toggles) apply_toggle(cfg.model, t);
    cfg = run_config_from_json(to_json(cfg));  // re-validate with overrides
    if (command == "compose") {
      Session s{command, opt, cfg, {}, out};
      return cmd_compose(s);
    }
    Session s{command, opt, cfg, run_dir(command, opt), out};
    if (command == "gen-data") {
      s.echo_config();
      return cmd_gen_data(s);
    }
    if (command == "train") {
      s.echo_config();
      return cmd_train(s);
    }
    if (command == "sample") return cmd_sample(s);
    if (command == "inspect-attn") return cmd_inspect(s);
    if (command == "eval") return cmd_eval(s);
    return cmd_ablate(s);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const CheckpointNotFound& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace layerforge::cli

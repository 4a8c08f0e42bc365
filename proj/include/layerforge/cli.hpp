#pragma once

// Command-line front end: gen-data, train, sample, compose, inspect-attn, eval
// and ablate, driven by a JSON run configuration.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerforge/diffusion.hpp"
#include "layerforge/evalsuite.hpp"

namespace layerforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitValidation = 2;
inline constexpr int kExitCheckpoint = 3;

struct DataConfig {
  std::string dir;  // existing dataset; empty means generate n scenes in memory
  int n = 500;
  std::uint64_t seed = 0;
  int width = 32;
  int height = 32;
  int min_layers = 1;
  int max_layers = 3;
  double max_occlusion = 0.6;
  bool operator==(const DataConfig&) const = default;
};

struct ScheduleConfig {
  diffusion::ScheduleKind kind = diffusion::ScheduleKind::Linear;
  int steps = 1000;
  bool operator==(const ScheduleConfig&) const = default;
};

struct EvalConfig {
  int n = 200;
  std::uint64_t seed = 0;
  int inspect_step = -1;  // DDIM step index dumped by inspect-attn; -1 is the last
  // Checkpoints for ablate; empty entries are trained first.
  std::string full;
  std::string no_reweighting;
  std::string no_joint;
  bool operator==(const EvalConfig&) const = default;
};

struct RunConfig {
  DataConfig data;
  denoiser::DenoiserConfig model;
  ScheduleConfig schedule;
  diffusion::TrainConfig train;
  diffusion::SamplerConfig sample;
  EvalConfig eval;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& c);
// Missing keys keep their defaults; unknown keys and bad values throw
// ValidationError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

// --seed: every seed in the configuration.
void apply_seed(RunConfig& c, std::uint64_t seed);
// --toggle reweighting=on|off, --toggle joint=on|off
void apply_toggle(denoiser::DenoiserConfig& model, const std::string& spec);

synth::Constraints constraints_of(const DataConfig& d);

// Prompt file:
//   {"background": "checker", "light": "SE",
//    "layers": [{"color": "red", "shape": "circle", "scale": "small"}, ...]}
// Layers run bottom to top. Words are matched case-insensitively; unknown
// words are reported with the closest vocabulary entries.
synth::PromptSpec parse_prompt(const nlohmann::json& j, int k_max = synth::kMaxLayers);
synth::PromptSpec parse_prompt_file(const std::filesystem::path& path, int k_max = synth::kMaxLayers);
nlohmann::json prompt_file_json(const synth::PromptSpec& prompt);

// Up to three vocabulary words of the given category closest to `word`.
std::vector<std::string> suggestions(const std::string& word, const std::vector<std::string>& candidates);

// Attention grid dump: '#' header lines, then one row of floats per line.
std::string attention_grid_text(const std::vector<float>& values, int height, int width,
                                const std::vector<std::pair<std::string, std::string>>& header);
io::Image8 heatmap(const std::vector<float>& values, int height, int width, int scale = 8);

io::Image8 to_image8(const RgbImage& img);

// Runs one command. `args` excludes the program name. Returns the exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace layerforge::cli

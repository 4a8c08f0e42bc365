#pragma once

// Procedural layered scenes: a textured background plus 1..3 anti-aliased
// shapes, each on its own RGBA layer together with a soft drop shadow. All
// shadows in a scene point the same way, and that direction is named only in
// the global prompt.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerforge/compositing.hpp"

namespace layerforge::synth {

enum class Background { Gradient, Checker, Noise, Horizon };
enum class ShapeKind { Circle, Square, Triangle, Star };
enum class Scale { Small, Medium, Large };
enum class Light { NE, NW, SE, SW };

inline constexpr int kColors = 8;
inline constexpr int kSequenceLength = 16;
inline constexpr int kMaxLayers = 3;
inline constexpr double kShadowAlpha = 0.45;
inline constexpr double kShadowOffset = 0.6;  // times the shape radius

struct ShapeSpec {
  ShapeKind shape = ShapeKind::Circle;
  int color = 0;  // palette index
  Scale scale = Scale::Medium;
  double cx = 0.5;  // center as a fraction of width / height
  double cy = 0.5;

  bool operator==(const ShapeSpec&) const = default;
};

struct SceneSpec {
  int width = 32;
  int height = 32;
  Background background = Background::Gradient;
  std::uint64_t background_seed = 0;
  Light light = Light::NE;
  std::vector<ShapeSpec> shapes;  // bottom to top

  bool operator==(const SceneSpec&) const = default;
};

struct Constraints {
  int width = 32;
  int height = 32;
  int min_layers = 1;
  int max_layers = 3;
  double max_occlusion = 0.6;
  int max_attempts = 100;
};

// ---------------------------------------------------------------------------
// vocabulary

namespace token {
inline constexpr int kPad = 0;
inline constexpr int kBackground = 1;  // + Background
inline constexpr int kColor = 5;       // + palette index
inline constexpr int kShape = 13;      // + ShapeKind
inline constexpr int kScale = 17;      // + Scale
inline constexpr int kLight = 20;      // + Light
inline constexpr int kVocabulary = 24;
}  // namespace token

const std::string& token_word(int id);
// -1 when the word is unknown.
int token_id(const std::string& word);
std::vector<std::string> vocabulary();

bool is_shape_token(int id);

struct PromptSpec {
  std::vector<int> global;               // [BG, (COL, SHP) x K, LIGHT, PAD...]
  std::vector<std::vector<int>> layers;  // [COL, SHP, SCALE, PAD...] per layer
  std::vector<int> background;           // [BG, PAD...]
  std::vector<int> global_subject;       // shape-token index in `global`, per layer
  std::vector<int> layer_subject;        // shape-token index in each layer sequence

  int layer_count() const { return static_cast<int>(layers.size()); }
  bool operator==(const PromptSpec&) const = default;
};

PromptSpec tokenize(const SceneSpec& spec);

// Scene fields carried by the tokens (no positions, sizes or seeds).
struct PromptContent {
  Background background = Background::Gradient;
  Light light = Light::NE;
  struct Layer {
    ShapeKind shape;
    int color;
    Scale scale;
    bool operator==(const Layer&) const = default;
  };
  std::vector<Layer> layers;
  bool operator==(const PromptContent&) const = default;
};

PromptContent detokenize(const PromptSpec& prompt);
PromptContent content_of(const SceneSpec& spec);
PromptSpec tokenize(const PromptContent& content);

// Throws ValidationError on malformed sequences.
void validate(const PromptSpec& prompt);

nlohmann::json to_json(const PromptSpec& prompt);
PromptSpec prompt_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const nlohmann::json& j);

std::string describe(const PromptContent& content);

// ---------------------------------------------------------------------------
// rendering

std::array<double, 3> palette(int index);
// Unit offset direction in image coordinates (y down).
std::array<double, 2> light_vector(Light light);
// Angle of the light vector in degrees, counter-clockwise from +x with y up.
double light_angle_degrees(Light light);

double radius_fraction(Scale s);

struct Scene {
  LayeredImage image;
  PromptSpec prompt;
  SceneSpec spec;
};

LayeredImage render(const SceneSpec& spec);

// The first layer's (shape, color, scale) and the light are stratified by
// seed: any 384 consecutive seeds cover every combination once.
Scene generate_scene(std::uint64_t seed, const Constraints& constraints = {});

// ---------------------------------------------------------------------------
// datasets on disk

struct DatasetEntry {
  std::string path;  // relative to the dataset directory
  std::uint32_t crc = 0;
  std::uint64_t seed = 0;
  PromptSpec prompt;
  SceneSpec spec;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  int width = 32;
  int height = 32;
  std::vector<DatasetEntry> entries;
  std::uint32_t checksum = 0;  // CRC over the serialized entries
};

std::uint64_t scene_seed(std::uint64_t dataset_seed, int index);

// Writes n archives and manifest.json. Files whose bytes already match are
// left untouched, so interrupted runs can be resumed.
DatasetManifest build_dataset(int n, std::uint64_t seed, const std::filesystem::path& dir, const Constraints& constraints = {});

// Parses manifest.json and checks every archive against its recorded CRC.
DatasetManifest load_manifest(const std::filesystem::path& dir, bool verify = true);

}  // namespace layerforge::synth

#pragma once

// Layered images and source-over compositing.
//
// Layers hold straight (non-premultiplied) alpha; foreground index 1 is the
// bottom-most layer and index K the top-most. Colors are linear values in
// [0, 1] stored as doubles, interleaved RGB per pixel.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace layerforge {

struct AlphaMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // height * width

  AlphaMap() = default;
  AlphaMap(int h, int w, double fill = 0.0) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}
  double& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // height * width * 3

  RgbImage() = default;
  RgbImage(int h, int w, double fill = 0.0) : height(h), width(w), values(static_cast<std::size_t>(h) * w * 3, fill) {}
  double& at(int y, int x, int c) { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const { return values[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

struct RgbaLayer {
  RgbImage color;
  AlphaMap alpha;
  bool premultiplied = false;
};

struct LayeredImage {
  RgbImage background;
  std::vector<RgbaLayer> foregrounds;  // [0] is layer 1 (bottom)

  int height() const { return background.height; }
  int width() const { return background.width; }
  int layer_count() const { return static_cast<int>(foregrounds.size()); }
};

RgbaLayer make_layer(int height, int width, double r, double g, double b, double alpha);

// Throws ValidationError naming the first violated invariant (ranges, shapes,
// premultiplied color bound).
void validate(const RgbImage& img);
void validate(const RgbaLayer& layer);
void validate(const LayeredImage& img);

RgbaLayer premultiply(const RgbaLayer& layer);

RgbImage composite_recursive(const LayeredImage& img);
RgbImage composite_closed_form(const LayeredImage& img);

// prod_k (1 - alpha_k)
AlphaMap background_visibility(const LayeredImage& img);

// prod_{j>k} (1 - alpha_j) * alpha_k * c_k for 1 <= k <= K.
RgbImage layer_contribution(const LayeredImage& img, int k);

double max_abs_diff(const RgbImage& a, const RgbImage& b);

// 8-bit round-half-up quantization used by all file output.
std::uint8_t to_byte(double v);
double from_byte(std::uint8_t b);

// Snap every value to the 8-bit grid so that archives round-trip exactly.
LayeredImage quantized(const LayeredImage& img);

// ---------------------------------------------------------------------------
// layer archive: a zip holding manifest.json, background.png, fg_NN.png

struct LayerArchive {
  LayeredImage image;
  nlohmann::json prompt = nlohmann::json::object();
  std::uint64_t seed = 0;
};

void save_archive(const LayerArchive& archive, const std::filesystem::path& path);
LayerArchive load_archive(const std::filesystem::path& path);

}  // namespace layerforge

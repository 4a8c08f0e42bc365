#include "layerforge/compositing.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "layerforge/errors.hpp"
#include "layerforge/image_io.hpp"

namespace layerforge {

namespace {

constexpr int kArchiveVersion = 1;

void check_range(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!(x >= 0.0 && x <= 1.0)) throw ValidationError(std::string(what) + " value " + std::to_string(x) + " outside [0,1]");
}

void check_shapes(const LayeredImage& img) {
  const auto& bg = img.background;
  if (bg.values.size() != static_cast<std::size_t>(bg.height) * bg.width * 3)
    throw DimensionError("background buffer does not match its dimensions");
  for (std::size_t k = 0; k < img.foregrounds.size(); ++k) {
    const auto& f = img.foregrounds[k];
    if (f.color.height != bg.height || f.color.width != bg.width || f.alpha.height != bg.height ||
        f.alpha.width != bg.width || f.color.values.size() != bg.values.size() ||
        f.alpha.values.size() != static_cast<std::size_t>(bg.height) * bg.width)
      throw DimensionError("foreground " + std::to_string(k + 1) + " shape differs from the background");
  }
}

void require_straight(const LayeredImage& img) {
  for (std::size_t k = 0; k < img.foregrounds.size(); ++k)
    if (img.foregrounds[k].premultiplied)
      throw ValidationError("foreground " + std::to_string(k + 1) + " is premultiplied; compositing expects straight alpha");
}

std::string fg_name(int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fg_%02d.png", k);
  return buf;
}

}  // namespace

RgbaLayer make_layer(int height, int width, double r, double g, double b, double alpha) {
  RgbaLayer l;
  l.color = RgbImage(height, width);
  for (std::size_t i = 0; i < l.color.values.size(); i += 3) {
    l.color.values[i] = r;
    l.color.values[i + 1] = g;
    l.color.values[i + 2] = b;
  }
  l.alpha = AlphaMap(height, width, alpha);
  return l;
}

void validate(const RgbImage& img) {
  if (img.height < 0 || img.width < 0 || img.values.size() != static_cast<std::size_t>(img.height) * img.width * 3)
    throw DimensionError("rgb buffer does not match its dimensions");
  check_range(img.values, "color");
}

void validate(const RgbaLayer& layer) {
  validate(layer.color);
  if (layer.alpha.height != layer.color.height || layer.alpha.width != layer.color.width ||
      layer.alpha.values.size() != static_cast<std::size_t>(layer.alpha.height) * layer.alpha.width)
    throw DimensionError("alpha shape differs from color shape");
  check_range(layer.alpha.values, "alpha");
  if (layer.premultiplied)
    for (std::size_t p = 0; p < layer.alpha.values.size(); ++p)
      for (int c = 0; c < 3; ++c)
        if (layer.color.values[p * 3 + c] > layer.alpha.values[p] + 1e-6)
          throw ValidationError("premultiplied color exceeds alpha at pixel " + std::to_string(p));
}

void validate(const LayeredImage& img) {
  validate(img.background);
  check_shapes(img);
  for (const auto& f : img.foregrounds) validate(f);
}

RgbaLayer premultiply(const RgbaLayer& layer) {
  if (layer.premultiplied) throw ValidationError("layer is already premultiplied");
  RgbaLayer out = layer;
  for (std::size_t p = 0; p < out.alpha.values.size(); ++p)
    for (int c = 0; c < 3; ++c) out.color.values[p * 3 + c] *= out.alpha.values[p];
  out.premultiplied = true;
  return out;
}

RgbImage composite_recursive(const LayeredImage& img) {
  check_shapes(img);
  require_straight(img);
  RgbImage out = img.background;
  for (const auto& f : img.foregrounds) {
    for (std::size_t p = 0; p < f.alpha.values.size(); ++p) {
      const double a = f.alpha.values[p];
      for (int c = 0; c < 3; ++c) {
        double& v = out.values[p * 3 + c];
        v = (1.0 - a) * v + a * f.color.values[p * 3 + c];
      }
    }
  }
  return out;
}

RgbImage composite_closed_form(const LayeredImage& img) {
  check_shapes(img);
  require_straight(img);
  const int k_count = img.layer_count();
  RgbImage out(img.height(), img.width());
  const std::size_t pixels = static_cast<std::size_t>(img.height()) * img.width();
  for (std::size_t p = 0; p < pixels; ++p) {
    double occlusion = 1.0;  // prod over layers above the current one
    double acc[3] = {0.0, 0.0, 0.0};
    for (int k = k_count - 1; k >= 0; --k) {
      const auto& f = img.foregrounds[static_cast<std::size_t>(k)];
      const double a = f.alpha.values[p];
      for (int c = 0; c < 3; ++c) acc[c] += occlusion * a * f.color.values[p * 3 + c];
      occlusion *= 1.0 - a;
    }
    for (int c = 0; c < 3; ++c) out.values[p * 3 + c] = occlusion * img.background.values[p * 3 + c] + acc[c];
  }
  return out;
}

AlphaMap background_visibility(const LayeredImage& img) {
  check_shapes(img);
  AlphaMap vis(img.height(), img.width(), 1.0);
  for (const auto& f : img.foregrounds)
    for (std::size_t p = 0; p < vis.values.size(); ++p) vis.values[p] *= 1.0 - f.alpha.values[p];
  return vis;
}

RgbImage layer_contribution(const LayeredImage& img, int k) {
  check_shapes(img);
  require_straight(img);
  if (k < 1 || k > img.layer_count())
    throw ValidationError("layer index " + std::to_string(k) + " outside 1.." + std::to_string(img.layer_count()));
  const auto& f = img.foregrounds[static_cast<std::size_t>(k - 1)];
  RgbImage out(img.height(), img.width());
  for (std::size_t p = 0; p < f.alpha.values.size(); ++p) {
    double occlusion = 1.0;
    for (int j = k; j < img.layer_count(); ++j) occlusion *= 1.0 - img.foregrounds[static_cast<std::size_t>(j)].alpha.values[p];
    const double w = occlusion * f.alpha.values[p];
    for (int c = 0; c < 3; ++c) out.values[p * 3 + c] = w * f.color.values[p * 3 + c];
  }
  return out;
}

double max_abs_diff(const RgbImage& a, const RgbImage& b) {
  if (a.values.size() != b.values.size()) throw DimensionError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::fabs(a.values[i] - b.values[i]));
  return m;
}

std::uint8_t to_byte(double v) {
  const double q = std::floor(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
  return static_cast<std::uint8_t>(std::min(q, 255.0));
}

double from_byte(std::uint8_t b) { return b / 255.0; }

LayeredImage quantized(const LayeredImage& img) {
  LayeredImage out = img;
  auto snap = [](std::vector<double>& v) {
    for (double& x : v) x = from_byte(to_byte(x));
  };
  snap(out.background.values);
  for (auto& f : out.foregrounds) {
    snap(f.color.values);
    snap(f.alpha.values);
  }
  return out;
}

void save_archive(const LayerArchive& archive, const std::filesystem::path& path) {
  const LayeredImage& img = archive.image;
  validate(img);
  require_straight(img);
  const int h = img.height(), w = img.width();
  std::vector<io::ZipEntry> entries;

  nlohmann::json manifest;
  manifest["version"] = kArchiveVersion;
  manifest["width"] = w;
  manifest["height"] = h;
  manifest["background"] = "background.png";
  manifest["foregrounds"] = nlohmann::json::array();
  for (int k = 1; k <= img.layer_count(); ++k) manifest["foregrounds"].push_back(fg_name(k));
  manifest["prompt"] = archive.prompt;
  manifest["seed"] = archive.seed;
  const std::string text = manifest.dump(2) + "\n";
  entries.push_back({"manifest.json", std::vector<std::uint8_t>(text.begin(), text.end())});

  io::Image8 bg{w, h, 3, {}};
  bg.pixels.reserve(img.background.values.size());
  for (double v : img.background.values) bg.pixels.push_back(to_byte(v));
  entries.push_back({"background.png", io::encode_png(bg)});

  for (int k = 1; k <= img.layer_count(); ++k) {
    const auto& f = img.foregrounds[static_cast<std::size_t>(k - 1)];
    io::Image8 fg{w, h, 4, {}};
    fg.pixels.reserve(static_cast<std::size_t>(w) * h * 4);
    for (std::size_t p = 0; p < f.alpha.values.size(); ++p) {
      for (int c = 0; c < 3; ++c) fg.pixels.push_back(to_byte(f.color.values[p * 3 + c]));
      fg.pixels.push_back(to_byte(f.alpha.values[p]));
    }
    entries.push_back({fg_name(k), io::encode_png(fg)});
  }
  io::write_file(path, io::build_zip(entries));
}

LayerArchive load_archive(const std::filesystem::path& path) {
  std::map<std::string, std::vector<std::uint8_t>> files;
  for (auto& e : io::parse_zip(io::read_file(path))) files[e.name] = std::move(e.data);

  auto it = files.find("manifest.json");
  if (it == files.end()) throw FormatError(path.string() + ": no manifest.json");
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(it->second.begin(), it->second.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt manifest: " + e.what());
  }
  LayerArchive out;
  int h = 0, w = 0;
  std::string bg_name;
  std::vector<std::string> fg_names;
  try {
    if (m.at("version").get<int>() != kArchiveVersion) throw FormatError(path.string() + ": unsupported archive version");
    h = m.at("height").get<int>();
    w = m.at("width").get<int>();
    bg_name = m.at("background").get<std::string>();
    fg_names = m.at("foregrounds").get<std::vector<std::string>>();
    out.prompt = m.value("prompt", nlohmann::json::object());
    out.seed = m.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": corrupt manifest: " + e.what());
  }
  const std::size_t payload = files.size() - 1;
  if (payload != fg_names.size() + 1)
    throw FormatError(path.string() + ": manifest lists " + std::to_string(fg_names.size() + 1) + " layers but archive holds " +
                      std::to_string(payload));

  auto load = [&](const std::string& name, int channels) {
    auto f = files.find(name);
    if (f == files.end()) throw FormatError(path.string() + ": missing layer file " + name);
    io::Image8 img = io::decode_png(f->second);
    if (img.width != w || img.height != h) throw FormatError(path.string() + ": " + name + " has wrong dimensions");
    if (img.channels != channels) throw FormatError(path.string() + ": " + name + " has " + std::to_string(img.channels) + " channels");
    return img;
  };

  io::Image8 bg = load(bg_name, 3);
  out.image.background = RgbImage(h, w);
  for (std::size_t i = 0; i < bg.pixels.size(); ++i) out.image.background.values[i] = from_byte(bg.pixels[i]);
  for (const auto& name : fg_names) {
    io::Image8 fg = load(name, 4);
    RgbaLayer layer;
    layer.color = RgbImage(h, w);
    layer.alpha = AlphaMap(h, w);
    for (std::size_t p = 0; p < layer.alpha.values.size(); ++p) {
      for (int c = 0; c < 3; ++c) layer.color.values[p * 3 + c] = from_byte(fg.pixels[p * 4 + c]);
      layer.alpha.values[p] = from_byte(fg.pixels[p * 4 + 3]);
    }
    out.image.foregrounds.push_back(std::move(layer));
  }
  return out;
}

}  // namespace layerforge

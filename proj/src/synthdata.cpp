#include "layerforge/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "layerforge/errors.hpp"
#include "layerforge/image_io.hpp"
#include "layerforge/random.hpp"

namespace layerforge::synth {

namespace {

const std::vector<std::string>& words() {
  static const std::vector<std::string> w = {
      "<pad>",  "gradient", "checker", "noise",  "horizon", "red",   "green",    "blue",
      "yellow", "cyan",     "magenta", "orange", "white",   "circle", "square", "triangle",
      "star",   "small",    "medium",  "large",  "NE",      "NW",     "SE",     "SW"};
  return w;
}

constexpr int kSupersample = 4;
constexpr double kShadowSigma = 0.8;
constexpr int kShadowRadius = 3;  // ceil(3 sigma)
constexpr int kStrata = 4 * kColors * 3 * 4;

template <class E>
E pick(std::mt19937_64& rng, int n) {
  return static_cast<E>(std::uniform_int_distribution<int>(0, n - 1)(rng));
}

bool point_in_polygon(const std::vector<std::array<double, 2>>& poly, double x, double y) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) inside = !inside;
  }
  return inside;
}

std::vector<std::array<double, 2>> regular_polygon(int points, double r_outer, double r_inner) {
  std::vector<std::array<double, 2>> poly;
  const int n = r_inner > 0 ? 2 * points : points;
  for (int i = 0; i < n; ++i) {
    const double r = (r_inner > 0 && i % 2 == 1) ? r_inner : r_outer;
    const double a = -std::numbers::pi / 2 + 2 * std::numbers::pi * i / n;  // first vertex points up
    poly.push_back({r * std::cos(a), r * std::sin(a)});
  }
  return poly;
}

// Shape membership for an offset (dx, dy) from the center, in pixels.
class ShapeTest {
 public:
  ShapeTest(ShapeKind kind, double r) : kind_(kind), r_(r) {
    if (kind == ShapeKind::Triangle) poly_ = regular_polygon(3, r, 0.0);
    if (kind == ShapeKind::Star) poly_ = regular_polygon(5, r, 0.45 * r);
  }
  bool operator()(double dx, double dy) const {
    switch (kind_) {
      case ShapeKind::Circle: return dx * dx + dy * dy <= r_ * r_;
      case ShapeKind::Square: return std::max(std::fabs(dx), std::fabs(dy)) <= 0.8 * r_;
      default: return point_in_polygon(poly_, dx, dy);
    }
  }

 private:
  ShapeKind kind_;
  double r_;
  std::vector<std::array<double, 2>> poly_;
};

// Supersampled coverage of a shape centered at (cx, cy) in pixel units.
std::vector<double> coverage(int h, int w, ShapeKind kind, double r, double cx, double cy) {
  ShapeTest inside(kind, r);
  std::vector<double> cov(static_cast<std::size_t>(h) * w, 0.0);
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r)) - 1);
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(cx + r)) + 1);
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r)) - 1);
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(cy + r)) + 1);
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSupersample; ++sy)
        for (int sx = 0; sx < kSupersample; ++sx) {
          const double px = x + (sx + 0.5) / kSupersample;
          const double py = y + (sy + 0.5) / kSupersample;
          hits += inside(px - cx, py - cy) ? 1 : 0;
        }
      cov[static_cast<std::size_t>(y) * w + x] = static_cast<double>(hits) / (kSupersample * kSupersample);
    }
  return cov;
}

std::vector<double> blur(const std::vector<double>& src, int h, int w) {
  std::vector<double> k(2 * kShadowRadius + 1);
  double s = 0.0;
  for (int i = -kShadowRadius; i <= kShadowRadius; ++i)
    s += k[i + kShadowRadius] = std::exp(-0.5 * i * i / (kShadowSigma * kShadowSigma));
  for (double& v : k) v /= s;
  std::vector<double> tmp(src.size(), 0.0), out(src.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -kShadowRadius; i <= kShadowRadius; ++i)
        if (x + i >= 0 && x + i < w) acc += k[i + kShadowRadius] * src[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -kShadowRadius; i <= kShadowRadius; ++i)
        if (y + i >= 0 && y + i < h) acc += k[i + kShadowRadius] * tmp[static_cast<std::size_t>(y + i) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

std::array<double, 3> muted(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.2, 0.8);
  std::array<double, 3> c{u(rng), u(rng), u(rng)};
  const double grey = (c[0] + c[1] + c[2]) / 3.0;
  for (double& v : c) v = 0.5 * v + 0.5 * grey;
  return c;
}

RgbImage render_background(const SceneSpec& spec) {
  const int h = spec.height, w = spec.width;
  RgbImage img(h, w);
  std::mt19937_64 rng(splitmix64(spec.background_seed));
  const auto a = muted(rng);
  const auto b = muted(rng);
  auto put = [&](int y, int x, double t) {
    for (int c = 0; c < 3; ++c) img.at(y, x, c) = (1.0 - t) * a[c] + t * b[c];
  };
  switch (spec.background) {
    case Background::Gradient: {
      const double angle = std::uniform_real_distribution<double>(0.0, 2 * std::numbers::pi)(rng);
      const double ux = std::cos(angle), uy = std::sin(angle);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double px = (x + 0.5) / w - 0.5, py = (y + 0.5) / h - 0.5;
          put(y, x, std::clamp(0.5 + (px * ux + py * uy), 0.0, 1.0));
        }
      break;
    }
    case Background::Checker: {
      const int tile = std::uniform_int_distribution<int>(0, 1)(rng) ? 4 : 8;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) put(y, x, ((x / tile + y / tile) % 2) ? 1.0 : 0.0);
      break;
    }
    case Background::Noise: {
      constexpr int g = 5;
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::vector<double> grid(g * g);
      for (double& v : grid) v = u(rng);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double fx = (x + 0.5) / w * (g - 1), fy = (y + 0.5) / h * (g - 1);
          const int ix = std::min(static_cast<int>(fx), g - 2), iy = std::min(static_cast<int>(fy), g - 2);
          const double tx = fx - ix, ty = fy - iy;
          const double top = (1 - tx) * grid[iy * g + ix] + tx * grid[iy * g + ix + 1];
          const double bot = (1 - tx) * grid[(iy + 1) * g + ix] + tx * grid[(iy + 1) * g + ix + 1];
          put(y, x, (1 - ty) * top + ty * bot);
        }
      break;
    }
    case Background::Horizon: {
      const double line = std::uniform_real_distribution<double>(0.4, 0.6)(rng) * h;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (y + 0.5 < line) {
            const double t = 0.4 * (y + 0.5) / line;  // sky brightens towards the horizon
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = std::min(1.0, a[c] + t * (1.0 - a[c]) * 0.5);
          } else {
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.7 * b[c];
          }
        }
      break;
    }
  }
  return img;
}

double radius_px(const SceneSpec& spec, const ShapeSpec& s) { return radius_fraction(s.scale) * spec.width; }

// Allowed center range along one axis so that body and shadow stay at least
// one pixel away from the border.
std::pair<double, double> center_range(int extent, double r, double offset) {
  const double lo = 1.0 + r + std::max(0.0, kShadowRadius - offset);
  const double hi = extent - 1.0 - r - std::max(0.0, kShadowRadius + offset);
  return {lo, hi};
}

int position_cell(double f) { return std::clamp(static_cast<int>((f - 0.15) / 0.7 * 3.0), 0, 2); }

const char* enum_word(Background b) { return words()[token::kBackground + static_cast<int>(b)].c_str(); }
const char* enum_word(Light l) { return words()[token::kLight + static_cast<int>(l)].c_str(); }
const char* enum_word(ShapeKind s) { return words()[token::kShape + static_cast<int>(s)].c_str(); }
const char* enum_word(Scale s) { return words()[token::kScale + static_cast<int>(s)].c_str(); }

int word_in_range(const std::string& w, int base, int count, const char* what) {
  const int id = token_id(w);
  if (id < base || id >= base + count) throw ValidationError(std::string("unknown ") + what + " '" + w + "'");
  return id - base;
}

}  // namespace

const std::string& token_word(int id) {
  if (id < 0 || id >= token::kVocabulary) throw ValidationError("token id " + std::to_string(id) + " outside vocabulary");
  return words()[static_cast<std::size_t>(id)];
}

int token_id(const std::string& word) {
  const auto& w = words();
  auto it = std::find(w.begin(), w.end(), word);
  return it == w.end() ? -1 : static_cast<int>(it - w.begin());
}

std::vector<std::string> vocabulary() { return words(); }

bool is_shape_token(int id) { return id >= token::kShape && id < token::kShape + 4; }

std::array<double, 3> palette(int index) {
  static const std::array<std::array<double, 3>, kColors> p = {{{0.90, 0.12, 0.12},
                                                                 {0.12, 0.75, 0.20},
                                                                 {0.15, 0.30, 0.92},
                                                                 {0.95, 0.85, 0.10},
                                                                 {0.10, 0.80, 0.85},
                                                                 {0.85, 0.20, 0.80},
                                                                 {0.97, 0.55, 0.08},
                                                                 {0.96, 0.96, 0.96}}};
  if (index < 0 || index >= kColors) throw ValidationError("palette index out of range");
  return p[static_cast<std::size_t>(index)];
}

std::array<double, 2> light_vector(Light light) {
  const double s = std::numbers::sqrt2 / 2;
  switch (light) {
    case Light::NE: return {s, -s};
    case Light::NW: return {-s, -s};
    case Light::SE: return {s, s};
    case Light::SW: return {-s, s};
  }
  return {0, 0};
}

double light_angle_degrees(Light light) {
  switch (light) {
    case Light::NE: return 45.0;
    case Light::NW: return 135.0;
    case Light::SW: return 225.0;
    case Light::SE: return 315.0;
  }
  return 0.0;
}

double radius_fraction(Scale s) {
  switch (s) {
    case Scale::Small: return 0.08;
    case Scale::Medium: return 0.14;
    case Scale::Large: return 0.22;
  }
  return 0.0;
}

PromptSpec tokenize(const PromptContent& content) {
  const int k = static_cast<int>(content.layers.size());
  if (1 + 2 * k + 1 > kSequenceLength) throw ValidationError("too many layers for the token budget");
  PromptSpec p;
  p.global.push_back(token::kBackground + static_cast<int>(content.background));
  for (const auto& l : content.layers) {
    if (l.color < 0 || l.color >= kColors) throw ValidationError("palette index out of range");
    p.global.push_back(token::kColor + l.color);
    p.global_subject.push_back(static_cast<int>(p.global.size()));
    p.global.push_back(token::kShape + static_cast<int>(l.shape));
    std::vector<int> seq = {token::kColor + l.color, token::kShape + static_cast<int>(l.shape),
                            token::kScale + static_cast<int>(l.scale)};
    seq.resize(kSequenceLength, token::kPad);
    p.layers.push_back(std::move(seq));
    p.layer_subject.push_back(1);
  }
  p.global.push_back(token::kLight + static_cast<int>(content.light));
  p.global.resize(kSequenceLength, token::kPad);
  p.background.assign(kSequenceLength, token::kPad);
  p.background[0] = token::kBackground + static_cast<int>(content.background);
  return p;
}

PromptContent content_of(const SceneSpec& spec) {
  PromptContent c;
  c.background = spec.background;
  c.light = spec.light;
  for (const auto& s : spec.shapes) c.layers.push_back({s.shape, s.color, s.scale});
  return c;
}

PromptSpec tokenize(const SceneSpec& spec) { return tokenize(content_of(spec)); }

void validate(const PromptSpec& p) {
  auto check_seq = [](const std::vector<int>& seq, const char* what) {
    if (static_cast<int>(seq.size()) != kSequenceLength)
      throw ValidationError(std::string(what) + " sequence must have " + std::to_string(kSequenceLength) + " tokens");
    for (int id : seq)
      if (id < 0 || id >= token::kVocabulary) throw ValidationError(std::string(what) + " sequence has out-of-vocabulary token " + std::to_string(id));
  };
  check_seq(p.global, "global");
  check_seq(p.background, "background");
  const int k = p.layer_count();
  if (k < 1 || k > kMaxLayers) throw ValidationError("layer count " + std::to_string(k) + " outside 1.." + std::to_string(kMaxLayers));
  if (static_cast<int>(p.global_subject.size()) != k || static_cast<int>(p.layer_subject.size()) != k)
    throw ValidationError("one subject index per layer is required");
  for (int i = 0; i < k; ++i) {
    check_seq(p.layers[static_cast<std::size_t>(i)], "layer");
    const int gs = p.global_subject[static_cast<std::size_t>(i)], ls = p.layer_subject[static_cast<std::size_t>(i)];
    if (gs < 0 || gs >= kSequenceLength || !is_shape_token(p.global[static_cast<std::size_t>(gs)]))
      throw ValidationError("global subject index of layer " + std::to_string(i + 1) + " does not point at a shape token");
    if (ls < 0 || ls >= kSequenceLength || !is_shape_token(p.layers[static_cast<std::size_t>(i)][static_cast<std::size_t>(ls)]))
      throw ValidationError("layer subject index of layer " + std::to_string(i + 1) + " does not point at a shape token");
  }
}

PromptContent detokenize(const PromptSpec& p) {
  validate(p);
  PromptContent c;
  auto in = [](int id, int base, int n) { return id >= base && id < base + n; };
  if (!in(p.global[0], token::kBackground, 4)) throw ValidationError("global sequence must start with a background token");
  c.background = static_cast<Background>(p.global[0] - token::kBackground);
  const int k = p.layer_count();
  const int light = p.global[static_cast<std::size_t>(1 + 2 * k)];
  if (!in(light, token::kLight, 4)) throw ValidationError("light token missing after the layer tokens");
  c.light = static_cast<Light>(light - token::kLight);
  for (const auto& seq : p.layers) {
    if (!in(seq[0], token::kColor, kColors) || !in(seq[2], token::kScale, 3))
      throw ValidationError("layer sequence must be [color, shape, scale]");
    c.layers.push_back({static_cast<ShapeKind>(seq[1] - token::kShape), seq[0] - token::kColor,
                        static_cast<Scale>(seq[2] - token::kScale)});
  }
  return c;
}

nlohmann::json to_json(const PromptSpec& p) {
  return {{"global", p.global},
          {"layers", p.layers},
          {"background", p.background},
          {"global_subject", p.global_subject},
          {"layer_subject", p.layer_subject}};
}

PromptSpec prompt_from_json(const nlohmann::json& j) {
  PromptSpec p;
  try {
    p.global = j.at("global").get<std::vector<int>>();
    p.layers = j.at("layers").get<std::vector<std::vector<int>>>();
    p.background = j.at("background").get<std::vector<int>>();
    p.global_subject = j.at("global_subject").get<std::vector<int>>();
    p.layer_subject = j.at("layer_subject").get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prompt record: ") + e.what());
  }
  validate(p);
  return p;
}

nlohmann::json to_json(const SceneSpec& s) {
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& sh : s.shapes)
    shapes.push_back({{"shape", enum_word(sh.shape)},
                      {"color", token_word(token::kColor + sh.color)},
                      {"scale", enum_word(sh.scale)},
                      {"cx", sh.cx},
                      {"cy", sh.cy}});
  return {{"width", s.width},
          {"height", s.height},
          {"background", enum_word(s.background)},
          {"background_seed", s.background_seed},
          {"light", enum_word(s.light)},
          {"shapes", shapes}};
}

SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  try {
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    s.background = static_cast<Background>(word_in_range(j.at("background").get<std::string>(), token::kBackground, 4, "background"));
    s.background_seed = j.at("background_seed").get<std::uint64_t>();
    s.light = static_cast<Light>(word_in_range(j.at("light").get<std::string>(), token::kLight, 4, "light"));
    for (const auto& sh : j.at("shapes")) {
      ShapeSpec x;
      x.shape = static_cast<ShapeKind>(word_in_range(sh.at("shape").get<std::string>(), token::kShape, 4, "shape"));
      x.color = word_in_range(sh.at("color").get<std::string>(), token::kColor, kColors, "color");
      x.scale = static_cast<Scale>(word_in_range(sh.at("scale").get<std::string>(), token::kScale, 3, "scale"));
      x.cx = sh.at("cx").get<double>();
      x.cy = sh.at("cy").get<double>();
      s.shapes.push_back(x);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scene record: ") + e.what());
  }
  return s;
}

std::string describe(const PromptContent& c) {
  std::string out = std::string(enum_word(c.background)) + " background";
  for (const auto& l : c.layers)
    out += "; " + token_word(token::kColor + l.color) + " " + enum_word(l.shape) + " (" + enum_word(l.scale) + ")";
  out += "; light " + std::string(enum_word(c.light));
  return out;
}

LayeredImage render(const SceneSpec& spec) {
  const int h = spec.height, w = spec.width;
  LayeredImage img;
  img.background = render_background(spec);
  const auto dir = light_vector(spec.light);
  for (const auto& s : spec.shapes) {
    const double r = radius_px(spec, s);
    const double cx = s.cx * w, cy = s.cy * h;
    const auto body = coverage(h, w, s.shape, r, cx, cy);
    const auto shadow = blur(coverage(h, w, s.shape, r, cx + kShadowOffset * r * dir[0], cy + kShadowOffset * r * dir[1]), h, w);
    const auto color = palette(s.color);
    RgbaLayer layer;
    layer.color = RgbImage(h, w);
    layer.alpha = AlphaMap(h, w);
    for (std::size_t p = 0; p < body.size(); ++p) {
      const double b = body[p];
      const double sh = kShadowAlpha * std::min(1.0, shadow[p]);
      const double a = b + sh * (1.0 - b);
      layer.alpha.values[p] = a;
      // Shadow is black, so straight color is the body's share of the coverage.
      if (a > 0.0)
        for (int c = 0; c < 3; ++c) layer.color.values[p * 3 + c] = std::min(1.0, b * color[static_cast<std::size_t>(c)] / a);
    }
    img.foregrounds.push_back(std::move(layer));
  }
  return img;
}

Scene generate_scene(std::uint64_t seed, const Constraints& c) {
  if (c.min_layers < 1 || c.max_layers > kMaxLayers || c.min_layers > c.max_layers)
    throw ValidationError("layer count bounds must satisfy 1 <= min <= max <= " + std::to_string(kMaxLayers));
  if (c.width < 8 || c.height < 8) throw ValidationError("canvas must be at least 8x8");
  std::mt19937_64 rng(splitmix64(seed));

  SceneSpec spec;
  spec.width = c.width;
  spec.height = c.height;
  int stratum = static_cast<int>(seed % kStrata);
  spec.light = static_cast<Light>(stratum % 4);
  stratum /= 4;
  const Scale first_scale = static_cast<Scale>(stratum % 3);
  stratum /= 3;
  const int first_color = stratum % kColors;
  const ShapeKind first_shape = static_cast<ShapeKind>(stratum / kColors);

  const int k = std::uniform_int_distribution<int>(c.min_layers, c.max_layers)(rng);
  spec.background = pick<Background>(rng, 4);
  spec.background_seed = rng();
  for (int i = 0; i < k; ++i) {
    ShapeSpec s;
    if (i == 0) {
      s.shape = first_shape;
      s.color = first_color;
      s.scale = first_scale;
    } else {
      s.shape = pick<ShapeKind>(rng, 4);
      s.color = std::uniform_int_distribution<int>(0, kColors - 1)(rng);
      s.scale = pick<Scale>(rng, 3);
    }
    spec.shapes.push_back(s);
  }
  // Draw layers in random depth order so the stratified one is not always at the bottom.
  std::shuffle(spec.shapes.begin(), spec.shapes.end(), rng);

  const auto dir = light_vector(spec.light);
  std::uniform_real_distribution<double> pos(0.15, 0.85);
  for (int attempt = 0; attempt < c.max_attempts; ++attempt) {
    bool ok = true;
    std::vector<std::array<int, 3>> cells;
    for (auto& s : spec.shapes) {
      const double fx = pos(rng), fy = pos(rng);
      const std::array<int, 3> cell = {static_cast<int>(s.scale), position_cell(fx), position_cell(fy)};
      if (std::find(cells.begin(), cells.end(), cell) != cells.end()) ok = false;
      cells.push_back(cell);
      const double r = radius_px(spec, s);
      const auto [x0, x1] = center_range(spec.width, r, kShadowOffset * r * dir[0]);
      const auto [y0, y1] = center_range(spec.height, r, kShadowOffset * r * dir[1]);
      if (x0 > x1 || y0 > y1) throw ValidationError("canvas too small for a " + std::string(enum_word(s.scale)) + " shape");
      s.cx = std::clamp(fx * spec.width, x0, x1) / spec.width;
      s.cy = std::clamp(fy * spec.height, y0, y1) / spec.height;
    }
    if (!ok) continue;
    // Fraction of each body hidden by the bodies above it.
    std::vector<std::vector<double>> bodies;
    for (const auto& s : spec.shapes)
      bodies.push_back(coverage(spec.height, spec.width, s.shape, radius_px(spec, s), s.cx * spec.width, s.cy * spec.height));
    for (std::size_t i = 0; i < bodies.size() && ok; ++i) {
      double area = 0.0, hidden = 0.0;
      for (std::size_t p = 0; p < bodies[i].size(); ++p) {
        double visible = 1.0;
        for (std::size_t j = i + 1; j < bodies.size(); ++j) visible *= 1.0 - bodies[j][p];
        area += bodies[i][p];
        hidden += bodies[i][p] * (1.0 - visible);
      }
      if (area <= 0.0 || hidden / area >= c.max_occlusion) ok = false;
    }
    if (ok) {
      Scene scene;
      scene.image = render(spec);
      scene.prompt = tokenize(spec);
      scene.spec = std::move(spec);
      return scene;
    }
  }
  throw ValidationError("no placement satisfied the occlusion constraints after " + std::to_string(c.max_attempts) +
                        " attempts (seed " + std::to_string(seed) + ")");
}

std::uint64_t scene_seed(std::uint64_t dataset_seed, int index) {
  return (dataset_seed << 20) + static_cast<std::uint64_t>(index);
}

namespace {

nlohmann::json entries_json(const std::vector<DatasetEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries)
    arr.push_back({{"path", e.path}, {"crc32", e.crc}, {"seed", e.seed}, {"prompt", to_json(e.prompt)}, {"scene", to_json(e.spec)}});
  return arr;
}

}  // namespace

DatasetManifest build_dataset(int n, std::uint64_t seed, const std::filesystem::path& dir, const Constraints& c) {
  if (n < 1) throw ValidationError("dataset size must be at least 1");
  if (n >= (1 << 20)) throw ValidationError("dataset size must be below 2^20");
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.seed = seed;
  m.width = c.width;
  m.height = c.height;
  const auto tmp = dir / "scene.tmp.zip";
  for (int i = 0; i < n; ++i) {
    DatasetEntry e;
    e.seed = scene_seed(seed, i);
    Scene s = generate_scene(e.seed, c);
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05d.zip", i);
    e.path = name;
    e.prompt = s.prompt;
    e.spec = s.spec;
    LayerArchive a;
    a.image = quantized(s.image);
    a.prompt = to_json(s.prompt);
    a.prompt["text"] = describe(content_of(s.spec));
    a.seed = e.seed;
    save_archive(a, tmp);
    auto bytes = io::read_file(tmp);
    e.crc = io::crc32(bytes);
    const auto target = dir / e.path;
    if (!std::filesystem::exists(target) || io::read_file(target) != bytes)
      std::filesystem::rename(tmp, target);
    m.entries.push_back(std::move(e));
  }
  std::filesystem::remove(tmp);
  const auto entries = entries_json(m.entries);
  m.checksum = io::crc32(entries.dump());
  nlohmann::json j = {{"version", 1},     {"seed", seed},     {"count", n},          {"width", c.width},
                      {"height", c.height}, {"checksum", m.checksum}, {"entries", entries}};
  io::write_text(dir / "manifest.json", j.dump(2) + "\n");
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& dir, bool verify) {
  const auto bytes = io::read_file(dir / "manifest.json");
  DatasetManifest m;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
    m.seed = j.at("seed").get<std::uint64_t>();
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.checksum = j.at("checksum").get<std::uint32_t>();
    for (const auto& e : j.at("entries")) {
      DatasetEntry d;
      d.path = e.at("path").get<std::string>();
      d.crc = e.at("crc32").get<std::uint32_t>();
      d.seed = e.at("seed").get<std::uint64_t>();
      d.prompt = prompt_from_json(e.at("prompt"));
      d.spec = scene_from_json(e.at("scene"));
      m.entries.push_back(std::move(d));
    }
    if (j.at("count").get<std::size_t>() != m.entries.size()) throw FormatError("dataset manifest count does not match its entries");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset manifest: " + std::string(e.what()));
  }
  if (io::crc32(j.at("entries").dump()) != m.checksum) throw FormatError("dataset manifest checksum mismatch");
  if (verify)
    for (const auto& e : m.entries) {
      const auto p = dir / e.path;
      if (!std::filesystem::exists(p)) throw FormatError("dataset archive missing: " + e.path);
      if (io::crc32(io::read_file(p)) != e.crc) throw FormatError("dataset archive corrupt or partially written: " + e.path);
    }
  return m;
}

}  // namespace layerforge::synth

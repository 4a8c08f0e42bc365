#pragma once

// Attention machinery shared by the denoiser and the tests.
//
// Everything here is templated on the scalar type: the denoiser instantiates
// float, the gradient checks instantiate double. Forward functions that take
// part in training return a cache; the matching *_backward function turns an
// output gradient into input and weight gradients.
//
// Layout conventions: spatial features are (positions x model_dim) row-major,
// heads split the model dimension into contiguous slices of head_dim columns,
// attention maps are (heads x positions x tokens).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "layerforge/errors.hpp"
#include "layerforge/kernels.hpp"

namespace layerforge::attention {

template <class T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c, T fill = T(0)) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

  T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  T operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
};

template <class T>
struct ProjectionWeights {
  int heads = 1;
  Matrix<T> query;  // d_model x d_model
  Matrix<T> key;    // d_context x d_model
  Matrix<T> value;  // d_context x d_model
  Matrix<T> out;    // d_model x d_model

  int model_dim() const { return query.cols; }
  int head_dim() const { return query.cols / heads; }

  void validate(int query_in, int context_in) const {
    const int d = query.cols;
    if (heads < 1 || d % heads != 0)
      throw DimensionError("model dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
    if (query.rows != query_in) throw DimensionError("query projection expects input dim " + std::to_string(query.rows));
    if (key.rows != context_in || value.rows != context_in)
      throw DimensionError("key/value projections expect context dim " + std::to_string(key.rows));
    if (key.cols != d || value.cols != d) throw DimensionError("key/value projection width must equal model dim");
    if (out.rows != d) throw DimensionError("output projection must take model dim input");
  }
};

// Extra key/value projections applied to the global branch's hidden states.
template <class T>
struct GlobalShareWeights {
  Matrix<T> key;    // d_model x d_model
  Matrix<T> value;  // d_model x d_model
};

template <class T>
struct AttentionMap {
  int heads = 0;
  int positions = 0;
  int tokens = 0;
  std::vector<T> values;

  AttentionMap() = default;
  AttentionMap(int h, int p, int s) : heads(h), positions(p), tokens(s), values(static_cast<std::size_t>(h) * p * s) {}

  T* row(int h, int p) { return values.data() + (static_cast<std::size_t>(h) * positions + p) * tokens; }
  const T* row(int h, int p) const { return values.data() + (static_cast<std::size_t>(h) * positions + p) * tokens; }
  T at(int h, int p, int s) const { return row(h, p)[s]; }
};

// One token's column, averaged over heads (length = positions).
template <class T>
using TokenMap = std::vector<T>;

template <class T>
struct SpatialMask {
  int height = 0;
  int width = 0;
  std::vector<T> values;
  bool binary = false;
};

// ---------------------------------------------------------------------------
// small helpers

namespace detail {

template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols != b.rows) throw DimensionError("matmul inner dims " + std::to_string(a.cols) + " vs " + std::to_string(b.rows));
  Matrix<T> c(a.rows, b.cols);
  kernels::gemm<T>(kernels::Trans::No, kernels::Trans::No, a.rows, b.cols, a.cols, T(1), a.data.data(), a.cols,
                   b.data.data(), b.cols, T(0), c.data.data(), c.cols);
  return c;
}

// c += a^T b
template <class T>
void add_matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  kernels::gemm<T>(kernels::Trans::Yes, kernels::Trans::No, a.cols, b.cols, a.rows, T(1), a.data.data(), a.cols,
                   b.data.data(), b.cols, T(1), c.data.data(), c.cols);
}

// c += a b^T
template <class T>
void add_matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
  kernels::gemm<T>(kernels::Trans::No, kernels::Trans::Yes, a.rows, b.rows, a.cols, T(1), a.data.data(), a.cols,
                   b.data.data(), b.cols, T(1), c.data.data(), c.cols);
}

template <class T>
std::size_t argmax(const std::vector<T>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <class T>
std::size_t argmin(const std::vector<T>& v) {
  return static_cast<std::size_t>(std::min_element(v.begin(), v.end()) - v.begin());
}

// Softmax backward for a block of rows: ds = p * (dp - sum(dp * p)).
template <class T>
void softmax_backward_rows(const T* p, const T* dp, T* ds, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    const T* pr = p + static_cast<std::size_t>(r) * cols;
    const T* dr = dp + static_cast<std::size_t>(r) * cols;
    T* out = ds + static_cast<std::size_t>(r) * cols;
    T dot = T(0);
    for (int c = 0; c < cols; ++c) dot += pr[c] * dr[c];
    for (int c = 0; c < cols; ++c) out[c] = pr[c] * (dr[c] - dot);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// cross-attention maps

// Per head Softmax(Q K^T / sqrt(d)) with Q from the spatial features and K
// from the text embedding.
template <class T>
AttentionMap<T> cross_attention_map(const Matrix<T>& spatial, const Matrix<T>& text, const ProjectionWeights<T>& w) {
  w.validate(spatial.cols, text.cols);
  if (text.rows < 1) throw DimensionError("cross attention needs at least one token");
  const Matrix<T> q = detail::matmul(spatial, w.query);
  const Matrix<T> k = detail::matmul(text, w.key);
  const int d = w.head_dim(), dm = w.model_dim();
  AttentionMap<T> map(w.heads, spatial.rows, text.rows);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (int h = 0; h < w.heads; ++h) {
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::Yes, spatial.rows, text.rows, d, scale, q.data.data() + h * d,
                     dm, k.data.data() + h * d, dm, T(0), map.row(h, 0), text.rows);
    kernels::softmax_rows(map.row(h, 0), spatial.rows, text.rows);
  }
  return map;
}

template <class T>
TokenMap<T> extract_token_map(const AttentionMap<T>& map, int token_index) {
  if (token_index < 0 || token_index >= map.tokens)
    throw DimensionError("token index " + std::to_string(token_index) + " out of range [0," +
                         std::to_string(map.tokens) + ")");
  TokenMap<T> out(static_cast<std::size_t>(map.positions), T(0));
  for (int h = 0; h < map.heads; ++h)
    for (int p = 0; p < map.positions; ++p) out[p] += map.at(h, p, token_index);
  const T inv = T(1) / static_cast<T>(map.heads);
  for (T& v : out) v *= inv;
  return out;
}

// (v - min) / (max - min); a constant input maps to all ones.
template <class T>
TokenMap<T> minmax_norm(const TokenMap<T>& v) {
  if (v.empty()) throw DimensionError("minmax_norm of an empty map");
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const T mn = *lo, mx = *hi;
  TokenMap<T> out(v.size(), T(1));
  if (mx > mn) {
    const T range = mx - mn;
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mn) / range;
  }
  return out;
}

template <class T>
struct ReweightResult {
  TokenMap<T> reweighted;         // rescaled to the layer map's peak
  TokenMap<T> product;            // normalized global map times layer map
  TokenMap<T> normalized_global;
  bool degenerate = false;        // product was all zero; reweighted == product
};

// Gate the layer's subject-token column by the normalized global column, then
// restore the layer column's original peak value.
template <class T>
ReweightResult<T> reweight_layer_map(const TokenMap<T>& global_map, const TokenMap<T>& layer_map) {
  if (global_map.size() != layer_map.size())
    throw DimensionError("reweight: global map has " + std::to_string(global_map.size()) + " positions, layer map " +
                         std::to_string(layer_map.size()));
  ReweightResult<T> r;
  r.normalized_global = minmax_norm(global_map);
  r.product.resize(layer_map.size());
  for (std::size_t i = 0; i < layer_map.size(); ++i) r.product[i] = r.normalized_global[i] * layer_map[i];
  const T peak = *std::max_element(r.product.begin(), r.product.end());
  if (!(peak > T(0))) {
    r.degenerate = true;
    r.reweighted = r.product;
    return r;
  }
  const T layer_peak = *std::max_element(layer_map.begin(), layer_map.end());
  // One scale factor keeps a uniform global map an exact identity; peaks are
  // pinned so the restored maximum is exact too.
  const T scale = layer_peak / peak;
  r.reweighted.resize(layer_map.size());
  for (std::size_t i = 0; i < layer_map.size(); ++i)
    r.reweighted[i] = r.product[i] == peak ? layer_peak : r.product[i] * scale;
  return r;
}

template <class T>
struct ReweightGrad {
  TokenMap<T> global_map;
  TokenMap<T> layer_map;
};

// Analytic gradient of reweight_layer_map. Max/min selections use the first
// extremal index, so the result is exact away from ties.
template <class T>
ReweightGrad<T> reweight_layer_map_backward(const TokenMap<T>& global_map, const TokenMap<T>& layer_map,
                                            const TokenMap<T>& grad_out) {
  const std::size_t n = layer_map.size();
  if (global_map.size() != n || grad_out.size() != n) throw DimensionError("reweight backward: size mismatch");
  const ReweightResult<T> fwd = reweight_layer_map(global_map, layer_map);
  ReweightGrad<T> g{TokenMap<T>(n, T(0)), TokenMap<T>(n, T(0))};

  TokenMap<T> d_product(n, T(0));
  if (fwd.degenerate) {
    d_product = grad_out;
  } else {
    const std::size_t a = detail::argmax(fwd.product);
    const std::size_t b = detail::argmax(layer_map);
    const T peak = fwd.product[a], layer_peak = layer_map[b];
    T dot = T(0);
    for (std::size_t j = 0; j < n; ++j) dot += grad_out[j] * fwd.product[j];
    for (std::size_t k = 0; k < n; ++k) d_product[k] = grad_out[k] * layer_peak / peak;
    d_product[a] -= dot * layer_peak / (peak * peak);
    g.layer_map[b] += dot / peak;
  }

  TokenMap<T> d_norm(n);
  for (std::size_t k = 0; k < n; ++k) {
    g.layer_map[k] += d_product[k] * fwd.normalized_global[k];
    d_norm[k] = d_product[k] * layer_map[k];
  }

  const std::size_t lo = detail::argmin(global_map), hi = detail::argmax(global_map);
  const T range = global_map[hi] - global_map[lo];
  if (range > T(0)) {
    T s_all = T(0), s_weighted = T(0);
    for (std::size_t k = 0; k < n; ++k) {
      g.global_map[k] = d_norm[k] / range;
      s_all += d_norm[k];
      s_weighted += d_norm[k] * fwd.normalized_global[k];
    }
    g.global_map[lo] -= (s_all - s_weighted) / range;
    g.global_map[hi] -= s_weighted / range;
  }
  return g;
}

template <class T>
struct ApplyResult {
  AttentionMap<T> map;
  int degenerate_rows = 0;  // rows that summed to zero and were left unchanged
};

// Replace one token column (in every head) with `reweighted` and renormalize
// each row back to a distribution.
template <class T>
ApplyResult<T> apply_reweighted_cross_attention(const AttentionMap<T>& map, int token_index,
                                                const TokenMap<T>& reweighted) {
  if (token_index < 0 || token_index >= map.tokens) throw DimensionError("token index out of range");
  if (static_cast<int>(reweighted.size()) != map.positions)
    throw DimensionError("reweighted map length " + std::to_string(reweighted.size()) + " != positions " +
                         std::to_string(map.positions));
  ApplyResult<T> r{map, 0};
  for (int h = 0; h < map.heads; ++h)
    for (int p = 0; p < map.positions; ++p) {
      T* row = r.map.row(h, p);
      const T* src = map.row(h, p);
      T z = T(0);
      for (int s = 0; s < map.tokens; ++s) z += (s == token_index ? reweighted[p] : src[s]);
      if (!(z > T(0))) {
        ++r.degenerate_rows;
        continue;
      }
      for (int s = 0; s < map.tokens; ++s) row[s] = (s == token_index ? reweighted[p] : src[s]) / z;
    }
  return r;
}

template <class T>
struct ApplyGrad {
  AttentionMap<T> map;
  TokenMap<T> reweighted;
};

template <class T>
ApplyGrad<T> apply_reweighted_cross_attention_backward(const AttentionMap<T>& map, int token_index,
                                                       const TokenMap<T>& reweighted, const AttentionMap<T>& out,
                                                       const AttentionMap<T>& grad_out) {
  ApplyGrad<T> g{AttentionMap<T>(map.heads, map.positions, map.tokens), TokenMap<T>(map.positions, T(0))};
  for (int h = 0; h < map.heads; ++h)
    for (int p = 0; p < map.positions; ++p) {
      const T* src = map.row(h, p);
      const T* o = out.row(h, p);
      const T* go = grad_out.row(h, p);
      T* gi = g.map.row(h, p);
      T z = T(0);
      for (int s = 0; s < map.tokens; ++s) z += (s == token_index ? reweighted[p] : src[s]);
      if (!(z > T(0))) {
        for (int s = 0; s < map.tokens; ++s) gi[s] = go[s];
        continue;
      }
      T dot = T(0);
      for (int s = 0; s < map.tokens; ++s) dot += go[s] * o[s];
      for (int s = 0; s < map.tokens; ++s) {
        const T d = (go[s] - dot) / z;
        if (s == token_index)
          g.reweighted[p] += d;
        else
          gi[s] = d;
      }
    }
  return g;
}

// ---------------------------------------------------------------------------
// spatial masks

template <class T>
SpatialMask<T> binarize_token_map(const TokenMap<T>& global_map, int height, int width, T threshold) {
  if (static_cast<long>(global_map.size()) != static_cast<long>(height) * width)
    throw DimensionError("token map length " + std::to_string(global_map.size()) + " does not match latent grid " +
                         std::to_string(height) + "x" + std::to_string(width));
  if (!(threshold > T(0) && threshold < T(1))) throw ValidationError("mask threshold must lie in (0,1)");
  const TokenMap<T> norm = minmax_norm(global_map);
  SpatialMask<T> m{height, width, std::vector<T>(norm.size()), true};
  for (std::size_t i = 0; i < norm.size(); ++i) m.values[i] = norm[i] >= threshold ? T(1) : T(0);
  return m;
}

namespace detail {

// Half-sample symmetric reflection: ... c b a | a b c ... | c b a ...
inline int reflect_index(int i, int n) {
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

template <class T>
std::vector<T> gaussian_kernel(T sigma) {
  const int radius = static_cast<int>(std::ceil(T(3) * sigma));
  std::vector<T> k(static_cast<std::size_t>(2 * radius + 1));
  T sum = T(0);
  for (int i = -radius; i <= radius; ++i) {
    const T v = std::exp(-T(0.5) * static_cast<T>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (T& v : k) v /= sum;
  return k;
}

}  // namespace detail

// Separable Gaussian blur truncated at 3 sigma, unit-sum kernel, reflective
// boundary. sigma == 0 returns the input unchanged.
template <class T>
SpatialMask<T> gaussian_blur(const SpatialMask<T>& mask, T sigma) {
  if (sigma < T(0)) throw ValidationError("blur sigma must be non-negative");
  if (sigma == T(0)) return mask;
  const std::vector<T> k = detail::gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int h = mask.height, w = mask.width;
  std::vector<T> tmp(mask.values.size()), out(mask.values.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T s = T(0);
      for (int i = -radius; i <= radius; ++i)
        s += k[static_cast<std::size_t>(i + radius)] * mask.values[static_cast<std::size_t>(y) * w + detail::reflect_index(x + i, w)];
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T s = T(0);
      for (int i = -radius; i <= radius; ++i)
        s += k[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(detail::reflect_index(y + i, h)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = std::clamp(s, T(0), T(1));
    }
  return SpatialMask<T>{h, w, std::move(out), false};
}

// min-max normalize -> threshold -> blur.
template <class T>
SpatialMask<T> derive_spatial_mask(const TokenMap<T>& global_map, int height, int width, T threshold, T sigma) {
  if (sigma < T(0)) throw ValidationError("blur sigma must be non-negative");
  return gaussian_blur(binarize_token_map(global_map, height, width, threshold), sigma);
}

// Complement of the union of the (binary) foreground masks.
template <class T>
SpatialMask<T> background_mask(const std::vector<SpatialMask<T>>& foreground, int height, int width) {
  SpatialMask<T> m{height, width, std::vector<T>(static_cast<std::size_t>(height) * width, T(1)), true};
  for (const auto& f : foreground) {
    if (f.height != height || f.width != width) throw DimensionError("background_mask: mask grid mismatch");
    for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = std::min(m.values[i], T(1) - f.values[i]);
  }
  return m;
}

// ---------------------------------------------------------------------------
// partial joint self-attention

template <class T>
struct JointAttentionCache {
  int heads = 1;
  int global_positions = 0;          // rows in the full global hidden-state matrix
  std::vector<int> global_index;     // global rows that survived the mask
  Matrix<T> z;                       // layer input
  Matrix<T> global_rows;             // selected global hidden states
  Matrix<T> q, keys, vals, o;        // keys/vals: [global selected ; layer]
  std::vector<T> bias;               // additive logit bias per key
  std::vector<T> probs;              // heads x positions x keys
};

template <class T>
struct JointAttentionResult {
  Matrix<T> output;
  JointAttentionCache<T> cache;
};

template <class T>
struct JointAttentionGrad {
  Matrix<T> z, global_hidden;
  ProjectionWeights<T> weights;  // query/key/value/out gradients
  GlobalShareWeights<T> share;
};

// Self-attention of the layer tokens over [global keys ; layer keys]. Global
// keys and values come from the dedicated share projections; logits towards
// global position p get log(mask[p] + 1e-8), and mask[p] == 0 removes p
// outright. With `global_hidden == nullptr` this is plain self-attention.
// `layer_bias`, when given, is a constant logit bias per layer key.
template <class T>
JointAttentionResult<T> partial_joint_self_attention(const Matrix<T>& z, const Matrix<T>* global_hidden,
                                                     const SpatialMask<T>* mask, const ProjectionWeights<T>& w,
                                                     const GlobalShareWeights<T>* share,
                                                     const std::vector<T>* layer_bias = nullptr) {
  w.validate(z.cols, z.cols);
  const int dm = w.model_dim(), d = w.head_dim(), hw = z.rows;
  JointAttentionResult<T> res;
  auto& c = res.cache;
  c.heads = w.heads;
  c.z = z;
  c.q = detail::matmul(z, w.query);
  const Matrix<T> kl = detail::matmul(z, w.key);
  const Matrix<T> vl = detail::matmul(z, w.value);

  Matrix<T> kg, vg;
  if (global_hidden) {
    if (!mask || !share) throw DimensionError("joint attention needs a mask and share weights");
    if (global_hidden->cols != z.cols) throw DimensionError("global hidden width must equal layer width");
    if (static_cast<int>(mask->values.size()) != global_hidden->rows)
      throw DimensionError("mask length " + std::to_string(mask->values.size()) + " != global positions " +
                           std::to_string(global_hidden->rows));
    if (share->key.rows != z.cols || share->key.cols != dm || share->value.rows != z.cols || share->value.cols != dm)
      throw DimensionError("share projections must map model dim to model dim");
    c.global_positions = global_hidden->rows;
    for (int p = 0; p < global_hidden->rows; ++p)
      if (mask->values[p] > T(0)) c.global_index.push_back(p);
    c.global_rows = Matrix<T>(static_cast<int>(c.global_index.size()), z.cols);
    for (std::size_t i = 0; i < c.global_index.size(); ++i)
      std::copy(global_hidden->row(c.global_index[i]), global_hidden->row(c.global_index[i]) + z.cols,
                c.global_rows.row(static_cast<int>(i)));
    if (c.global_rows.rows > 0) {
      kg = detail::matmul(c.global_rows, share->key);
      vg = detail::matmul(c.global_rows, share->value);
    }
  }
  const int ng = static_cast<int>(c.global_index.size());
  const int nk = ng + hw;
  c.keys = Matrix<T>(nk, dm);
  c.vals = Matrix<T>(nk, dm);
  if (ng > 0) {
    std::copy(kg.data.begin(), kg.data.end(), c.keys.data.begin());
    std::copy(vg.data.begin(), vg.data.end(), c.vals.data.begin());
  }
  std::copy(kl.data.begin(), kl.data.end(), c.keys.data.begin() + static_cast<std::ptrdiff_t>(ng) * dm);
  std::copy(vl.data.begin(), vl.data.end(), c.vals.data.begin() + static_cast<std::ptrdiff_t>(ng) * dm);
  c.bias.assign(static_cast<std::size_t>(nk), T(0));
  for (int i = 0; i < ng; ++i) c.bias[i] = std::log(mask->values[c.global_index[i]] + T(1e-8));
  if (layer_bias) {
    if (static_cast<int>(layer_bias->size()) != hw) throw DimensionError("layer bias length must equal positions");
    std::copy(layer_bias->begin(), layer_bias->end(), c.bias.begin() + ng);
  }
  const int biased = layer_bias ? nk : ng;

  c.probs.assign(static_cast<std::size_t>(w.heads) * hw * nk, T(0));
  c.o = Matrix<T>(hw, dm);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (int h = 0; h < w.heads; ++h) {
    T* ph = c.probs.data() + static_cast<std::size_t>(h) * hw * nk;
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::Yes, hw, nk, d, scale, c.q.data.data() + h * d, dm,
                     c.keys.data.data() + h * d, dm, T(0), ph, nk);
    if (biased > 0)
      for (int p = 0; p < hw; ++p) {
        T* row = ph + static_cast<std::size_t>(p) * nk;
        for (int j = 0; j < biased; ++j) row[j] += c.bias[j];
      }
    kernels::softmax_rows(ph, hw, nk);
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::No, hw, d, nk, T(1), ph, nk, c.vals.data.data() + h * d, dm,
                     T(0), c.o.data.data() + h * d, dm);
  }
  res.output = detail::matmul(c.o, w.out);
  return res;
}

// Full (positions x (global_positions + positions)) weight matrix of one head,
// with explicit zeros at masked-out global positions.
template <class T>
Matrix<T> joint_attention_weights(const JointAttentionCache<T>& c, int head) {
  const int hw = c.z.rows, ng = static_cast<int>(c.global_index.size()), nk = ng + hw;
  Matrix<T> full(hw, c.global_positions + hw);
  const T* ph = c.probs.data() + static_cast<std::size_t>(head) * hw * nk;
  for (int p = 0; p < hw; ++p) {
    const T* row = ph + static_cast<std::size_t>(p) * nk;
    for (int j = 0; j < ng; ++j) full(p, c.global_index[j]) = row[j];
    for (int j = 0; j < hw; ++j) full(p, c.global_positions + j) = row[ng + j];
  }
  return full;
}

template <class T>
JointAttentionGrad<T> partial_joint_self_attention_backward(const JointAttentionCache<T>& c,
                                                            const ProjectionWeights<T>& w,
                                                            const GlobalShareWeights<T>* share,
                                                            const Matrix<T>& grad_out) {
  const int dm = w.model_dim(), d = w.head_dim(), hw = c.z.rows;
  const int ng = static_cast<int>(c.global_index.size()), nk = ng + hw;
  JointAttentionGrad<T> g;
  g.weights.heads = w.heads;
  g.weights.out = Matrix<T>(w.out.rows, w.out.cols);
  detail::add_matmul_tn(c.o, grad_out, g.weights.out);
  Matrix<T> d_o(hw, dm);
  detail::add_matmul_nt(grad_out, w.out, d_o);

  Matrix<T> d_q(hw, dm), d_keys(nk, dm), d_vals(nk, dm);
  std::vector<T> d_p(static_cast<std::size_t>(hw) * nk), d_s(static_cast<std::size_t>(hw) * nk);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (int h = 0; h < w.heads; ++h) {
    const T* ph = c.probs.data() + static_cast<std::size_t>(h) * hw * nk;
    // dP = dO_h V_h^T ; dV_h = P^T dO_h
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::Yes, hw, nk, d, T(1), d_o.data.data() + h * d, dm,
                     c.vals.data.data() + h * d, dm, T(0), d_p.data(), nk);
    kernels::gemm<T>(kernels::Trans::Yes, kernels::Trans::No, nk, d, hw, T(1), ph, nk, d_o.data.data() + h * d, dm,
                     T(0), d_vals.data.data() + h * d, dm);
    detail::softmax_backward_rows(ph, d_p.data(), d_s.data(), hw, nk);
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::No, hw, d, nk, scale, d_s.data(), nk,
                     c.keys.data.data() + h * d, dm, T(0), d_q.data.data() + h * d, dm);
    kernels::gemm<T>(kernels::Trans::Yes, kernels::Trans::No, nk, d, hw, scale, d_s.data(), nk,
                     c.q.data.data() + h * d, dm, T(0), d_keys.data.data() + h * d, dm);
  }

  Matrix<T> d_kl(hw, dm), d_vl(hw, dm);
  std::copy(d_keys.data.begin() + static_cast<std::ptrdiff_t>(ng) * dm, d_keys.data.end(), d_kl.data.begin());
  std::copy(d_vals.data.begin() + static_cast<std::ptrdiff_t>(ng) * dm, d_vals.data.end(), d_vl.data.begin());

  g.weights.query = Matrix<T>(w.query.rows, w.query.cols);
  g.weights.key = Matrix<T>(w.key.rows, w.key.cols);
  g.weights.value = Matrix<T>(w.value.rows, w.value.cols);
  detail::add_matmul_tn(c.z, d_q, g.weights.query);
  detail::add_matmul_tn(c.z, d_kl, g.weights.key);
  detail::add_matmul_tn(c.z, d_vl, g.weights.value);
  g.z = Matrix<T>(hw, c.z.cols);
  detail::add_matmul_nt(d_q, w.query, g.z);
  detail::add_matmul_nt(d_kl, w.key, g.z);
  detail::add_matmul_nt(d_vl, w.value, g.z);

  if (share) {
    g.share.key = Matrix<T>(share->key.rows, share->key.cols);
    g.share.value = Matrix<T>(share->value.rows, share->value.cols);
  }
  if (c.global_positions > 0) {
    g.global_hidden = Matrix<T>(c.global_positions, c.z.cols);
    if (ng > 0 && share) {
      Matrix<T> d_kg(ng, dm), d_vg(ng, dm);
      std::copy(d_keys.data.begin(), d_keys.data.begin() + static_cast<std::ptrdiff_t>(ng) * dm, d_kg.data.begin());
      std::copy(d_vals.data.begin(), d_vals.data.begin() + static_cast<std::ptrdiff_t>(ng) * dm, d_vg.data.begin());
      detail::add_matmul_tn(c.global_rows, d_kg, g.share.key);
      detail::add_matmul_tn(c.global_rows, d_vg, g.share.value);
      Matrix<T> d_rows(ng, c.z.cols);
      detail::add_matmul_nt(d_kg, share->key, d_rows);
      detail::add_matmul_nt(d_vg, share->value, d_rows);
      for (int i = 0; i < ng; ++i)
        std::copy(d_rows.row(i), d_rows.row(i) + c.z.cols, g.global_hidden.row(c.global_index[i]));
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// cross-attention layer with optional subject-column reweighting

template <class T>
struct CrossReweighting {
  TokenMap<T> global_map;  // head-averaged global column for this layer's subject
  int token_index = 0;     // subject token in this branch's own sequence
};

template <class T>
struct CrossAttentionCache {
  Matrix<T> x, text, q, k, v, o;
  AttentionMap<T> raw;   // softmax probabilities
  AttentionMap<T> used;  // probabilities after subject-column substitution
  std::optional<CrossReweighting<T>> reweighting;
  TokenMap<T> layer_map;   // head-averaged subject column of `raw`
  TokenMap<T> reweighted;  // substituted column
  bool degenerate = false;
  int degenerate_rows = 0;
};

template <class T>
struct CrossAttentionResult {
  Matrix<T> output;
  CrossAttentionCache<T> cache;
};

template <class T>
struct CrossAttentionGrad {
  Matrix<T> x, text;
  ProjectionWeights<T> weights;
  TokenMap<T> global_map;  // empty unless reweighting was active
};

template <class T>
CrossAttentionResult<T> cross_attention_layer(const Matrix<T>& x, const Matrix<T>& text,
                                              const ProjectionWeights<T>& w,
                                              std::optional<CrossReweighting<T>> reweighting) {
  w.validate(x.cols, text.cols);
  const int dm = w.model_dim(), d = w.head_dim(), hw = x.rows, s = text.rows;
  CrossAttentionResult<T> res;
  auto& c = res.cache;
  c.x = x;
  c.text = text;
  c.q = detail::matmul(x, w.query);
  c.k = detail::matmul(text, w.key);
  c.v = detail::matmul(text, w.value);
  c.raw = AttentionMap<T>(w.heads, hw, s);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (int h = 0; h < w.heads; ++h) {
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::Yes, hw, s, d, scale, c.q.data.data() + h * d, dm,
                     c.k.data.data() + h * d, dm, T(0), c.raw.row(h, 0), s);
    kernels::softmax_rows(c.raw.row(h, 0), hw, s);
  }
  c.reweighting = std::move(reweighting);
  if (c.reweighting) {
    c.layer_map = extract_token_map(c.raw, c.reweighting->token_index);
    auto rw = reweight_layer_map(c.reweighting->global_map, c.layer_map);
    c.degenerate = rw.degenerate;
    c.reweighted = std::move(rw.reweighted);
    auto applied = apply_reweighted_cross_attention(c.raw, c.reweighting->token_index, c.reweighted);
    c.used = std::move(applied.map);
    c.degenerate_rows = applied.degenerate_rows;
  } else {
    c.used = c.raw;
  }
  c.o = Matrix<T>(hw, dm);
  for (int h = 0; h < w.heads; ++h)
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::No, hw, d, s, T(1), c.used.row(h, 0), s,
                     c.v.data.data() + h * d, dm, T(0), c.o.data.data() + h * d, dm);
  res.output = detail::matmul(c.o, w.out);
  return res;
}

template <class T>
CrossAttentionGrad<T> cross_attention_layer_backward(const CrossAttentionCache<T>& c, const ProjectionWeights<T>& w,
                                                     const Matrix<T>& grad_out) {
  const int dm = w.model_dim(), d = w.head_dim(), hw = c.x.rows, s = c.text.rows;
  CrossAttentionGrad<T> g;
  g.weights.heads = w.heads;
  g.weights.out = Matrix<T>(w.out.rows, w.out.cols);
  detail::add_matmul_tn(c.o, grad_out, g.weights.out);
  Matrix<T> d_o(hw, dm);
  detail::add_matmul_nt(grad_out, w.out, d_o);

  AttentionMap<T> d_used(w.heads, hw, s);
  Matrix<T> d_v(s, dm);
  for (int h = 0; h < w.heads; ++h) {
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::Yes, hw, s, d, T(1), d_o.data.data() + h * d, dm,
                     c.v.data.data() + h * d, dm, T(0), d_used.row(h, 0), s);
    kernels::gemm<T>(kernels::Trans::Yes, kernels::Trans::No, s, d, hw, T(1), c.used.row(h, 0), s,
                     d_o.data.data() + h * d, dm, T(0), d_v.data.data() + h * d, dm);
  }

  AttentionMap<T> d_raw = d_used;
  if (c.reweighting) {
    const int ti = c.reweighting->token_index;
    auto ga = apply_reweighted_cross_attention_backward(c.raw, ti, c.reweighted, c.used, d_used);
    d_raw = std::move(ga.map);
    auto gr = reweight_layer_map_backward(c.reweighting->global_map, c.layer_map, ga.reweighted);
    g.global_map = std::move(gr.global_map);
    const T inv_heads = T(1) / static_cast<T>(w.heads);
    for (int h = 0; h < w.heads; ++h)
      for (int p = 0; p < hw; ++p) d_raw.row(h, p)[ti] += gr.layer_map[p] * inv_heads;
  }

  Matrix<T> d_q(hw, dm), d_k(s, dm);
  std::vector<T> d_s(static_cast<std::size_t>(hw) * s);
  const T scale = T(1) / std::sqrt(static_cast<T>(d));
  for (int h = 0; h < w.heads; ++h) {
    detail::softmax_backward_rows(c.raw.row(h, 0), d_raw.row(h, 0), d_s.data(), hw, s);
    kernels::gemm<T>(kernels::Trans::No, kernels::Trans::No, hw, d, s, scale, d_s.data(), s,
                     c.k.data.data() + h * d, dm, T(0), d_q.data.data() + h * d, dm);
    kernels::gemm<T>(kernels::Trans::Yes, kernels::Trans::No, s, d, hw, scale, d_s.data(), s,
                     c.q.data.data() + h * d, dm, T(0), d_k.data.data() + h * d, dm);
  }
  g.weights.query = Matrix<T>(w.query.rows, w.query.cols);
  g.weights.key = Matrix<T>(w.key.rows, w.key.cols);
  g.weights.value = Matrix<T>(w.value.rows, w.value.cols);
  detail::add_matmul_tn(c.x, d_q, g.weights.query);
  detail::add_matmul_tn(c.text, d_k, g.weights.key);
  detail::add_matmul_tn(c.text, d_v, g.weights.value);
  g.x = Matrix<T>(hw, c.x.cols);
  detail::add_matmul_nt(d_q, w.query, g.x);
  g.text = Matrix<T>(s, c.text.cols);
  detail::add_matmul_nt(d_k, w.key, g.text);
  detail::add_matmul_nt(d_v, w.value, g.text);
  return g;
}

}  // namespace layerforge::attention

#pragma once

// Straight-loop reference implementations used as test oracles. They share no
// code with the library's attention path (no gemm, no caches, no key
// selection): every logit is computed element by element.

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "layerforge/attention.hpp"

namespace oracle {

using layerforge::attention::Matrix;
using layerforge::attention::ProjectionWeights;

template <class T>
Matrix<T> random_matrix(int rows, int cols, std::mt19937_64& rng, T scale = T(1)) {
  std::normal_distribution<T> n(T(0), scale);
  Matrix<T> m(rows, cols);
  for (T& v : m.data) v = n(rng);
  return m;
}

template <class T>
ProjectionWeights<T> random_weights(int d_in, int d_ctx, int d_model, int heads, std::mt19937_64& rng) {
  ProjectionWeights<T> w;
  w.heads = heads;
  const T s = T(1) / std::sqrt(static_cast<T>(d_model));
  w.query = random_matrix<T>(d_in, d_model, rng, s);
  w.key = random_matrix<T>(d_ctx, d_model, rng, s);
  w.value = random_matrix<T>(d_ctx, d_model, rng, s);
  w.out = random_matrix<T>(d_model, d_in, rng, s);
  return w;
}

template <class T>
T dot_proj(const Matrix<T>& x, int row, const Matrix<T>& w, int col) {
  T s = T(0);
  for (int i = 0; i < x.cols; ++i) s += x(row, i) * w(i, col);
  return s;
}

// probs[h][p][s]
template <class T>
std::vector<std::vector<std::vector<T>>> cross_attention(const Matrix<T>& x, const Matrix<T>& text,
                                                         const ProjectionWeights<T>& w) {
  const int dm = w.query.cols, d = dm / w.heads;
  std::vector<std::vector<std::vector<T>>> out(w.heads);
  for (int h = 0; h < w.heads; ++h) {
    out[h].assign(x.rows, std::vector<T>(text.rows));
    for (int p = 0; p < x.rows; ++p) {
      std::vector<T> logits(text.rows);
      for (int s = 0; s < text.rows; ++s) {
        T l = T(0);
        for (int e = h * d; e < (h + 1) * d; ++e) l += dot_proj(x, p, w.query, e) * dot_proj(text, s, w.key, e);
        logits[s] = l / std::sqrt(static_cast<T>(d));
      }
      T mx = logits[0];
      for (T v : logits) mx = std::max(mx, v);
      T z = T(0);
      for (T v : logits) z += std::exp(v - mx);
      for (int s = 0; s < text.rows; ++s) out[h][p][s] = std::exp(logits[s] - mx) / z;
    }
  }
  return out;
}

// Concatenate [global ; layer] keys/values explicitly, add log-mask bias to the
// global block (mask == 0 -> -inf), softmax, aggregate, project.
template <class T>
Matrix<T> joint_attention(const Matrix<T>& z, const Matrix<T>* g, const std::vector<T>* mask,
                          const ProjectionWeights<T>& w, const Matrix<T>* kgl, const Matrix<T>* vgl,
                          std::vector<Matrix<T>>* weights_out = nullptr) {
  const int dm = w.query.cols, d = dm / w.heads, hw = z.rows;
  const int ng = g ? g->rows : 0;
  const int nk = ng + hw;
  Matrix<T> keys(nk, dm), vals(nk, dm), q(hw, dm);
  for (int p = 0; p < hw; ++p)
    for (int e = 0; e < dm; ++e) q(p, e) = dot_proj(z, p, w.query, e);
  for (int j = 0; j < ng; ++j)
    for (int e = 0; e < dm; ++e) {
      keys(j, e) = dot_proj(*g, j, *kgl, e);
      vals(j, e) = dot_proj(*g, j, *vgl, e);
    }
  for (int j = 0; j < hw; ++j)
    for (int e = 0; e < dm; ++e) {
      keys(ng + j, e) = dot_proj(z, j, w.key, e);
      vals(ng + j, e) = dot_proj(z, j, w.value, e);
    }
  Matrix<T> o(hw, dm);
  if (weights_out) weights_out->assign(w.heads, Matrix<T>(hw, nk));
  for (int h = 0; h < w.heads; ++h)
    for (int p = 0; p < hw; ++p) {
      std::vector<T> logits(nk);
      for (int j = 0; j < nk; ++j) {
        T l = T(0);
        for (int e = h * d; e < (h + 1) * d; ++e) l += q(p, e) * keys(j, e);
        l /= std::sqrt(static_cast<T>(d));
        if (j < ng) {
          const T m = (*mask)[j];
          l = m == T(0) ? -std::numeric_limits<T>::infinity() : l + std::log(m + T(1e-8));
        }
        logits[j] = l;
      }
      T mx = -std::numeric_limits<T>::infinity();
      for (T v : logits) mx = std::max(mx, v);
      T zsum = T(0);
      for (T v : logits) zsum += std::exp(v - mx);
      for (int j = 0; j < nk; ++j) {
        const T pj = std::exp(logits[j] - mx) / zsum;
        if (weights_out) (*weights_out)[h](p, j) = pj;
        for (int e = h * d; e < (h + 1) * d; ++e) o(p, e) += pj * vals(j, e);
      }
    }
  Matrix<T> out(hw, w.out.cols);
  for (int p = 0; p < hw; ++p)
    for (int c = 0; c < w.out.cols; ++c) out(p, c) = dot_proj(o, p, w.out, c);
  return out;
}

// Direct 2-D convolution with the separable kernel's outer product and
// half-sample reflection, written independently of the library blur.
inline std::vector<double> blur2d(const std::vector<double>& img, int h, int w, double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k1(2 * r + 1);
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += (k1[i + r] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k1) v /= s;
  auto refl = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> out(img.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) acc += k1[dy + r] * k1[dx + r] * img[refl(y + dy, h) * w + refl(x + dx, w)];
      out[y * w + x] = acc;
    }
  return out;
}

}  // namespace oracle

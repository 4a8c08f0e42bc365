#include "layerforge/kernels.hpp"

#include <vector>

namespace layerforge::kernels {

namespace {

void im2col(const ConvGeometry& g, const float* x, float* col) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  const int rows = g.patch();
#pragma omp parallel for schedule(static)
  for (int r = 0; r < rows; ++r) {
    const int c = r / (k * k);
    const int ky = (r / k) % k;
    const int kx = r % k;
    const float* xc = x + static_cast<std::ptrdiff_t>(c) * g.height * g.width;
    float* dst = col + static_cast<std::ptrdiff_t>(r) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      const int iy = oy * g.stride - g.pad + ky;
      float* drow = dst + oy * wo;
      if (iy < 0 || iy >= g.height) {
        std::fill(drow, drow + wo, 0.0f);
        continue;
      }
      const float* srow = xc + iy * g.width;
      for (int ox = 0; ox < wo; ++ox) {
        const int ix = ox * g.stride - g.pad + kx;
        drow[ox] = (ix >= 0 && ix < g.width) ? srow[ix] : 0.0f;
      }
    }
  }
}

// Scatter-add of columns back to the image; parallel over input channels so
// no two threads write the same element.
void col2im_add(const ConvGeometry& g, const float* col, float* dx) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.in_channels; ++c) {
    float* xc = dx + static_cast<std::ptrdiff_t>(c) * g.height * g.width;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const int r = (c * k + ky) * k + kx;
        const float* src = col + static_cast<std::ptrdiff_t>(r) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.height) continue;
          float* xrow = xc + iy * g.width;
          const float* srow = src + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.width) xrow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.pad == 0; }

}  // namespace

void conv2d_forward(const ConvGeometry& g, const float* x, const float* w, const float* b, float* y) {
  const int hw_out = g.out_height() * g.out_width();
  const int patch = g.patch();
  const std::ptrdiff_t x_stride = static_cast<std::ptrdiff_t>(g.in_channels) * g.height * g.width;
  const std::ptrdiff_t y_stride = static_cast<std::ptrdiff_t>(g.out_channels) * hw_out;
  std::vector<float> col;
  if (!is_pointwise(g)) col.resize(static_cast<std::size_t>(patch) * hw_out);
  for (int n = 0; n < g.batch; ++n) {
    const float* xn = x + n * x_stride;
    float* yn = y + n * y_stride;
    const float* src = xn;
    if (!is_pointwise(g)) {
      im2col(g, xn, col.data());
      src = col.data();
    }
    gemm<float>(Trans::No, Trans::No, g.out_channels, hw_out, patch, 1.0f, w, patch, src, hw_out, 0.0f, yn, hw_out);
    if (b) {
#pragma omp parallel for schedule(static)
      for (int o = 0; o < g.out_channels; ++o) {
        float* row = yn + static_cast<std::ptrdiff_t>(o) * hw_out;
        for (int i = 0; i < hw_out; ++i) row[i] += b[o];
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, const float* x, const float* w, const float* dy, float* dx, float* dw,
                     float* db) {
  const int hw_out = g.out_height() * g.out_width();
  const int patch = g.patch();
  const std::ptrdiff_t x_stride = static_cast<std::ptrdiff_t>(g.in_channels) * g.height * g.width;
  const std::ptrdiff_t y_stride = static_cast<std::ptrdiff_t>(g.out_channels) * hw_out;
  const bool pointwise = is_pointwise(g);
  std::vector<float> col(pointwise ? 0 : static_cast<std::size_t>(patch) * hw_out);
  for (int n = 0; n < g.batch; ++n) {
    const float* xn = x + n * x_stride;
    const float* dyn = dy + n * y_stride;
    if (db) {
      for (int o = 0; o < g.out_channels; ++o) {
        const float* row = dyn + static_cast<std::ptrdiff_t>(o) * hw_out;
        float s = 0.0f;
        for (int i = 0; i < hw_out; ++i) s += row[i];
        db[o] += s;
      }
    }
    if (dw) {
      const float* src = xn;
      if (!pointwise) {
        im2col(g, xn, col.data());
        src = col.data();
      }
      gemm<float>(Trans::No, Trans::Yes, g.out_channels, patch, hw_out, 1.0f, dyn, hw_out, src, hw_out, 1.0f, dw,
                  patch);
    }
    if (dx) {
      float* dxn = dx + n * x_stride;
      if (pointwise) {
        gemm<float>(Trans::Yes, Trans::No, patch, hw_out, g.out_channels, 1.0f, w, patch, dyn, hw_out, 1.0f, dxn,
                    hw_out);
      } else {
        gemm<float>(Trans::Yes, Trans::No, patch, hw_out, g.out_channels, 1.0f, w, patch, dyn, hw_out, 0.0f,
                    col.data(), hw_out);
        col2im_add(g, col.data(), dxn);
      }
    }
  }
}

void group_norm_forward(int n, int c, int hw, int groups, const float* x, const float* gamma, const float* beta,
                        float eps, float* y, float* mean, float* rstd) {
  const int cpg = c / groups;
  const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(cpg) * hw;
#pragma omp parallel for schedule(static)
  for (int ng = 0; ng < n * groups; ++ng) {
    const int ni = ng / groups, gi = ng % groups;
    const float* xs = x + (static_cast<std::ptrdiff_t>(ni) * c + gi * cpg) * hw;
    float* ys = y + (static_cast<std::ptrdiff_t>(ni) * c + gi * cpg) * hw;
    double s = 0.0;
    for (std::ptrdiff_t i = 0; i < span; ++i) s += xs[i];
    const double mu = s / static_cast<double>(span);
    double v = 0.0;
    for (std::ptrdiff_t i = 0; i < span; ++i) {
      const double d = xs[i] - mu;
      v += d * d;
    }
    const float r = static_cast<float>(1.0 / std::sqrt(v / static_cast<double>(span) + eps));
    const float m = static_cast<float>(mu);
    mean[ng] = m;
    rstd[ng] = r;
    for (int cc = 0; cc < cpg; ++cc) {
      const int ch = gi * cpg + cc;
      const float ga = gamma[ch] * r, be = beta[ch];
      const float* xr = xs + static_cast<std::ptrdiff_t>(cc) * hw;
      float* yr = ys + static_cast<std::ptrdiff_t>(cc) * hw;
      for (int i = 0; i < hw; ++i) yr[i] = (xr[i] - m) * ga + be;
    }
  }
}

void group_norm_backward(int n, int c, int hw, int groups, const float* x, const float* gamma, const float* mean,
                         const float* rstd, const float* dy, float* dx, float* dgamma, float* dbeta) {
  const int cpg = c / groups;
  const double count = static_cast<double>(cpg) * hw;
  // Parameter grads: reduce per channel across the batch in a fixed order.
  if (dgamma || dbeta) {
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
      const int gi = ch / cpg;
      double sg = 0.0, sb = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const float m = mean[ni * groups + gi], r = rstd[ni * groups + gi];
        const float* xr = x + (static_cast<std::ptrdiff_t>(ni) * c + ch) * hw;
        const float* dr = dy + (static_cast<std::ptrdiff_t>(ni) * c + ch) * hw;
        for (int i = 0; i < hw; ++i) {
          sg += static_cast<double>(dr[i]) * (xr[i] - m) * r;
          sb += dr[i];
        }
      }
      if (dgamma) dgamma[ch] += static_cast<float>(sg);
      if (dbeta) dbeta[ch] += static_cast<float>(sb);
    }
  }
  if (!dx) return;
#pragma omp parallel for schedule(static)
  for (int ng = 0; ng < n * groups; ++ng) {
    const int ni = ng / groups, gi = ng % groups;
    const float m = mean[ng], r = rstd[ng];
    double sum_d = 0.0, sum_dx = 0.0;
    for (int cc = 0; cc < cpg; ++cc) {
      const int ch = gi * cpg + cc;
      const float* xr = x + (static_cast<std::ptrdiff_t>(ni) * c + ch) * hw;
      const float* dr = dy + (static_cast<std::ptrdiff_t>(ni) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        const double d = static_cast<double>(dr[i]) * gamma[ch];
        sum_d += d;
        sum_dx += d * (xr[i] - m) * r;
      }
    }
    const double md = sum_d / count, mdx = sum_dx / count;
    for (int cc = 0; cc < cpg; ++cc) {
      const int ch = gi * cpg + cc;
      const float* xr = x + (static_cast<std::ptrdiff_t>(ni) * c + ch) * hw;
      const float* dr = dy + (static_cast<std::ptrdiff_t>(ni) * c + ch) * hw;
      float* out = dx + (static_cast<std::ptrdiff_t>(ni) * c + ch) * hw;
      for (int i = 0; i < hw; ++i) {
        const double xhat = (xr[i] - m) * r;
        out[i] += static_cast<float>(r * (static_cast<double>(dr[i]) * gamma[ch] - md - xhat * mdx));
      }
    }
  }
}

namespace reference {

void conv2d_forward(const ConvGeometry& g, const float* x, const float* w, const float* b, float* y) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double s = b ? b[o] : 0.0;
          for (int c = 0; c < g.in_channels; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                s += static_cast<double>(x[((n * g.in_channels + c) * g.height + iy) * g.width + ix]) *
                     w[((o * g.in_channels + c) * k + ky) * k + kx];
              }
          y[((n * g.out_channels + o) * ho + oy) * wo + ox] = static_cast<float>(s);
        }
}

void conv2d_backward(const ConvGeometry& g, const float* x, const float* w, const float* dy, float* dx, float* dw,
                     float* db) {
  const int ho = g.out_height(), wo = g.out_width(), k = g.kernel;
  for (int n = 0; n < g.batch; ++n)
    for (int o = 0; o < g.out_channels; ++o)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const float d = dy[((n * g.out_channels + o) * ho + oy) * wo + ox];
          if (db) db[o] += d;
          for (int c = 0; c < g.in_channels; ++c)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int iy = oy * g.stride - g.pad + ky, ix = ox * g.stride - g.pad + kx;
                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                const int xi = ((n * g.in_channels + c) * g.height + iy) * g.width + ix;
                const int wi = ((o * g.in_channels + c) * k + ky) * k + kx;
                if (dw) dw[wi] += d * x[xi];
                if (dx) dx[xi] += d * w[wi];
              }
        }
}

void group_norm_forward(int n, int c, int hw, int groups, const float* x, const float* gamma, const float* beta,
                        float eps, float* y, float* mean, float* rstd) {
  const int cpg = c / groups;
  for (int ni = 0; ni < n; ++ni)
    for (int gi = 0; gi < groups; ++gi) {
      double s = 0.0, s2 = 0.0;
      const int count = cpg * hw;
      for (int cc = 0; cc < cpg; ++cc)
        for (int i = 0; i < hw; ++i) s += x[(ni * c + gi * cpg + cc) * hw + i];
      const double mu = s / count;
      for (int cc = 0; cc < cpg; ++cc)
        for (int i = 0; i < hw; ++i) {
          const double d = x[(ni * c + gi * cpg + cc) * hw + i] - mu;
          s2 += d * d;
        }
      const double r = 1.0 / std::sqrt(s2 / count + eps);
      mean[ni * groups + gi] = static_cast<float>(mu);
      rstd[ni * groups + gi] = static_cast<float>(r);
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = gi * cpg + cc;
        for (int i = 0; i < hw; ++i) {
          const int idx = (ni * c + ch) * hw + i;
          y[idx] = static_cast<float>((x[idx] - mu) * r * gamma[ch] + beta[ch]);
        }
      }
    }
}

void group_norm_backward(int n, int c, int hw, int groups, const float* x, const float* gamma, const float* mean,
                         const float* rstd, const float* dy, float* dx, float* dgamma, float* dbeta) {
  const int cpg = c / groups;
  const double count = static_cast<double>(cpg) * hw;
  for (int ni = 0; ni < n; ++ni)
    for (int gi = 0; gi < groups; ++gi) {
      const double m = mean[ni * groups + gi], r = rstd[ni * groups + gi];
      double sd = 0.0, sdx = 0.0;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = gi * cpg + cc;
        for (int i = 0; i < hw; ++i) {
          const int idx = (ni * c + ch) * hw + i;
          const double xhat = (x[idx] - m) * r;
          const double d = static_cast<double>(dy[idx]) * gamma[ch];
          sd += d;
          sdx += d * xhat;
          if (dgamma) dgamma[ch] += static_cast<float>(dy[idx] * xhat);
          if (dbeta) dbeta[ch] += dy[idx];
        }
      }
      if (!dx) continue;
      for (int cc = 0; cc < cpg; ++cc) {
        const int ch = gi * cpg + cc;
        for (int i = 0; i < hw; ++i) {
          const int idx = (ni * c + ch) * hw + i;
          const double xhat = (x[idx] - m) * r;
          dx[idx] += static_cast<float>(r / count * (count * dy[idx] * gamma[ch] - sd - xhat * sdx));
        }
      }
    }
}

}  // namespace reference

}  // namespace layerforge::kernels

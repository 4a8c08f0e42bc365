#pragma once

// Compute kernels used by the autograd engine and the attention ops.
//
// Every kernel has an OpenMP-parallel version in `kernels` and a plain serial
// loop version in `kernels::reference`. The parallel versions only split work
// over independent outputs, so results do not depend on the thread count.
// Tests check the two against each other; bench/ times them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace layerforge::kernels {

enum class Trans { No, Yes };

namespace detail {

template <class T>
constexpr int gemm_nr() {
  return static_cast<int>(128 / sizeof(T));  // two 512-bit vectors
}

template <class T, int MR, int NR>
inline void gemm_micro(int kc, const T* __restrict a, const T* __restrict b, T* __restrict c, int ldc, int mr, int nr,
                       T alpha) {
  T acc[MR][NR] = {};
  for (int k = 0; k < kc; ++k) {
    const T* bk = b + static_cast<std::ptrdiff_t>(k) * NR;
    const T* ak = a + static_cast<std::ptrdiff_t>(k) * MR;
#pragma GCC unroll 8
    for (int i = 0; i < MR; ++i) {
      const T av = ak[i];
#pragma omp simd
      for (int j = 0; j < NR; ++j) acc[i][j] += av * bk[j];
    }
  }
  if (mr == MR && nr == NR) {
    for (int i = 0; i < MR; ++i) {
      T* ci = c + static_cast<std::ptrdiff_t>(i) * ldc;
#pragma omp simd
      for (int j = 0; j < NR; ++j) ci[j] += alpha * acc[i][j];
    }
  } else {
    for (int i = 0; i < mr; ++i) {
      T* ci = c + static_cast<std::ptrdiff_t>(i) * ldc;
      for (int j = 0; j < nr; ++j) ci[j] += alpha * acc[i][j];
    }
  }
}

}  // namespace detail

// C[M x N] = alpha * op(A) * op(B) + beta * C, row-major.
// op(A) is M x K, op(B) is K x N. beta == 0 overwrites C (NaNs in C are not propagated).
template <class T>
void gemm(Trans ta, Trans tb, int M, int N, int K, T alpha, const T* A, int lda, const T* B, int ldb, T beta, T* C,
          int ldc) {
  if (M <= 0 || N <= 0) return;
  if (beta == T(0)) {
    for (int i = 0; i < M; ++i) std::fill(C + static_cast<std::ptrdiff_t>(i) * ldc, C + static_cast<std::ptrdiff_t>(i) * ldc + N, T(0));
  } else if (beta != T(1)) {
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < N; ++j) C[static_cast<std::ptrdiff_t>(i) * ldc + j] *= beta;
  }
  if (K <= 0 || alpha == T(0)) return;

  constexpr int MR = 6;
  constexpr int NR = detail::gemm_nr<T>();
  constexpr int KC = 256;
  constexpr int MC = 16 * MR;
  constexpr int NC = 64 * NR;

  const bool a_trans = ta == Trans::Yes;
  const bool b_trans = tb == Trans::Yes;
  thread_local std::vector<T> bpack;
  const std::size_t b_cols = static_cast<std::size_t>((std::min(NC, N) + NR - 1) / NR) * NR;
  if (bpack.size() < static_cast<std::size_t>(std::min(KC, K)) * b_cols) bpack.resize(static_cast<std::size_t>(std::min(KC, K)) * b_cols);
  T* const bbuf = bpack.data();

  for (int jc = 0; jc < N; jc += NC) {
    const int nc = std::min(NC, N - jc);
    const int npanels = (nc + NR - 1) / NR;
    for (int pc = 0; pc < K; pc += KC) {
      const int kc = std::min(KC, K - pc);

#pragma omp parallel
      {
#pragma omp for schedule(static)
        for (int jp = 0; jp < npanels; ++jp) {
          T* dst = bbuf + static_cast<std::ptrdiff_t>(jp) * kc * NR;
          const int j0 = jc + jp * NR;
          const int nr = std::min(NR, N - j0);
          for (int k = 0; k < kc; ++k) {
            T* row = dst + static_cast<std::ptrdiff_t>(k) * NR;
            if (!b_trans) {
              const T* src = B + static_cast<std::ptrdiff_t>(pc + k) * ldb + j0;
              for (int j = 0; j < nr; ++j) row[j] = src[j];
            } else {
              for (int j = 0; j < nr; ++j) row[j] = B[static_cast<std::ptrdiff_t>(j0 + j) * ldb + pc + k];
            }
            for (int j = nr; j < NR; ++j) row[j] = T(0);
          }
        }

        thread_local std::vector<T> apack;
        if (apack.size() < static_cast<std::size_t>(MC) * KC) apack.resize(static_cast<std::size_t>(MC) * KC);
#pragma omp for schedule(static)
        for (int ic = 0; ic < M; ic += MC) {
          const int mc = std::min(MC, M - ic);
          const int mpanels = (mc + MR - 1) / MR;
          for (int ip = 0; ip < mpanels; ++ip) {
            T* dst = apack.data() + static_cast<std::ptrdiff_t>(ip) * kc * MR;
            const int i0 = ic + ip * MR;
            const int mr = std::min(MR, M - i0);
            for (int k = 0; k < kc; ++k) {
              T* col = dst + static_cast<std::ptrdiff_t>(k) * MR;
              for (int i = 0; i < mr; ++i)
                col[i] = a_trans ? A[static_cast<std::ptrdiff_t>(pc + k) * lda + i0 + i]
                                 : A[static_cast<std::ptrdiff_t>(i0 + i) * lda + pc + k];
              for (int i = mr; i < MR; ++i) col[i] = T(0);
            }
          }
          for (int jp = 0; jp < npanels; ++jp) {
            const int j0 = jc + jp * NR;
            const int nr = std::min(NR, N - j0);
            const T* bp = bbuf + static_cast<std::ptrdiff_t>(jp) * kc * NR;
            for (int ip = 0; ip < mpanels; ++ip) {
              const int i0 = ic + ip * MR;
              const int mr = std::min(MR, M - i0);
              detail::gemm_micro<T, MR, NR>(kc, apack.data() + static_cast<std::ptrdiff_t>(ip) * kc * MR, bp,
                                            C + static_cast<std::ptrdiff_t>(i0) * ldc + j0, ldc, mr, nr, alpha);
            }
          }
        }
      }
    }
  }
}

// Row-wise softmax in place over a rows x cols block.
template <class T>
void softmax_rows(T* data, int rows, int cols) {
#pragma omp parallel for schedule(static) if (rows * cols > 16384)
  for (int r = 0; r < rows; ++r) {
    T* row = data + static_cast<std::ptrdiff_t>(r) * cols;
    T m = row[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, row[c]);
    T s = T(0);
    for (int c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - m);
      s += row[c];
    }
    const T inv = T(1) / s;
    for (int c = 0; c < cols; ++c) row[c] *= inv;
  }
}

struct ConvGeometry {
  int batch = 1;
  int in_channels = 1;
  int height = 1;
  int width = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
  int patch() const { return in_channels * kernel * kernel; }
};

// y[N,Cout,Ho,Wo] = conv(x[N,Cin,H,W], w[Cout,Cin,k,k]) + b[Cout]; b may be null.
void conv2d_forward(const ConvGeometry& g, const float* x, const float* w, const float* b, float* y);

// Accumulates (+=) into dx, dw, db; any of them may be null.
void conv2d_backward(const ConvGeometry& g, const float* x, const float* w, const float* dy, float* dx, float* dw,
                     float* db);

// Group normalization over [N, C, HW]; writes per-(n, group) mean and inverse std.
void group_norm_forward(int n, int c, int hw, int groups, const float* x, const float* gamma, const float* beta,
                        float eps, float* y, float* mean, float* rstd);

// Accumulates into dx, dgamma, dbeta.
void group_norm_backward(int n, int c, int hw, int groups, const float* x, const float* gamma, const float* mean,
                         const float* rstd, const float* dy, float* dx, float* dgamma, float* dbeta);

namespace reference {

template <class T>
void gemm(Trans ta, Trans tb, int M, int N, int K, T alpha, const T* A, int lda, const T* B, int ldb, T beta, T* C,
          int ldc) {
  for (int i = 0; i < M; ++i) {
    for (int j = 0; j < N; ++j) {
      T s = T(0);
      for (int k = 0; k < K; ++k) {
        const T a = ta == Trans::No ? A[i * lda + k] : A[k * lda + i];
        const T b = tb == Trans::No ? B[k * ldb + j] : B[j * ldb + k];
        s += a * b;
      }
      T& c = C[i * ldc + j];
      c = (beta == T(0) ? T(0) : beta * c) + alpha * s;
    }
  }
}

template <class T>
void softmax_rows(T* data, int rows, int cols) {
  for (int r = 0; r < rows; ++r) {
    T* row = data + r * cols;
    T m = row[0];
    for (int c = 1; c < cols; ++c) m = std::max(m, row[c]);
    T s = T(0);
    for (int c = 0; c < cols; ++c) s += std::exp(row[c] - m);
    for (int c = 0; c < cols; ++c) row[c] = std::exp(row[c] - m) / s;
  }
}

void conv2d_forward(const ConvGeometry& g, const float* x, const float* w, const float* b, float* y);
void conv2d_backward(const ConvGeometry& g, const float* x, const float* w, const float* dy, float* dx, float* dw,
                     float* db);
void group_norm_forward(int n, int c, int hw, int groups, const float* x, const float* gamma, const float* beta,
                        float eps, float* y, float* mean, float* rstd);
void group_norm_backward(int n, int c, int hw, int groups, const float* x, const float* gamma, const float* mean,
                         const float* rstd, const float* dy, float* dx, float* dgamma, float* dbeta);

}  // namespace reference

}  // namespace layerforge::kernels

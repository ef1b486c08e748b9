#pragma once

#include <cmath>
#include <type_traits>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace zssrt::detail {

#if defined(__AVX512F__)
// Four rows times T sixteen-wide column tiles held in registers.
template <int T>
inline void dense_tile4(const float* const* xr, int k, const float* wt, int n, int j0,
                        const float* b, float* const* yr) {
  __m512 acc[4][T];
  for (int t = 0; t < T; ++t) {
    const __m512 bv = b ? _mm512_loadu_ps(b + j0 + 16 * t) : _mm512_setzero_ps();
    for (int r = 0; r < 4; ++r) acc[r][t] = bv;
  }
  for (int c = 0; c < k; ++c) {
    const float* wc = wt + std::size_t(c) * n + j0;
    __m512 wv[T];
    for (int t = 0; t < T; ++t) wv[t] = _mm512_loadu_ps(wc + 16 * t);
    for (int r = 0; r < 4; ++r) {
      const __m512 xv = _mm512_set1_ps(xr[r][c]);
      for (int t = 0; t < T; ++t) acc[r][t] = _mm512_fmadd_ps(xv, wv[t], acc[r][t]);
    }
  }
  for (int r = 0; r < 4; ++r)
    for (int t = 0; t < T; ++t) _mm512_storeu_ps(yr[r] + j0 + 16 * t, acc[r][t]);
}

// Trailing tile narrower than sixteen columns.
inline void dense_tile4_masked(const float* const* xr, int k, const float* wt, int n, int j0,
                               const float* b, float* const* yr) {
  const __mmask16 mask = static_cast<__mmask16>((1u << (n - j0)) - 1u);
  const __m512 bv = b ? _mm512_maskz_loadu_ps(mask, b + j0) : _mm512_setzero_ps();
  __m512 acc[4] = {bv, bv, bv, bv};
  for (int c = 0; c < k; ++c) {
    const __m512 wv = _mm512_maskz_loadu_ps(mask, wt + std::size_t(c) * n + j0);
    for (int r = 0; r < 4; ++r) acc[r] = _mm512_fmadd_ps(_mm512_set1_ps(xr[r][c]), wv, acc[r]);
  }
  for (int r = 0; r < 4; ++r) _mm512_mask_storeu_ps(yr[r] + j0, mask, acc[r]);
}
#endif

// Y = X * W^T + b. Every output element is accumulated with the same
// sequence of fused multiply-adds over k, whatever the blocking, so a row's
// result does not depend on how many other rows share the batch.
// W is N x K row-major; wt receives its K x N transpose.
template <typename Real>
void dense_rows(const Real* x, int m, int k, int ldx, const Real* w, const Real* b, int n,
                Real* y, int ldy, std::vector<Real>& wt) {
  wt.resize(std::size_t(k) * n);
  for (int j = 0; j < n; ++j)
    for (int c = 0; c < k; ++c) wt[std::size_t(c) * n + j] = w[std::size_t(j) * k + c];

  auto scalar_cols = [&](int i, int j_begin) {
    const Real* xi = x + std::size_t(i) * ldx;
    Real* yi = y + std::size_t(i) * ldy;
    for (int j = j_begin; j < n; ++j) yi[j] = b ? b[j] : Real(0);
    for (int c = 0; c < k; ++c) {
      const Real* wc = wt.data() + std::size_t(c) * n;
      for (int j = j_begin; j < n; ++j) yi[j] = std::fma(xi[c], wc[j], yi[j]);
    }
  };

  int i = 0;
#if defined(__AVX512F__)
  if constexpr (std::is_same_v<Real, float>) {
    for (; i + 4 <= m; i += 4) {
      const float* xr[4];
      float* yr[4];
      for (int r = 0; r < 4; ++r) {
        xr[r] = x + std::size_t(i + r) * ldx;
        yr[r] = y + std::size_t(i + r) * ldy;
      }
      int j0 = 0;
      for (; j0 + 64 <= n; j0 += 64) dense_tile4<4>(xr, k, wt.data(), n, j0, b, yr);
      for (; j0 + 16 <= n; j0 += 16) dense_tile4<1>(xr, k, wt.data(), n, j0, b, yr);
      if (j0 < n) dense_tile4_masked(xr, k, wt.data(), n, j0, b, yr);
    }
  }
#endif
  for (; i < m; ++i) scalar_cols(i, 0);
}

}  // namespace zssrt::detail

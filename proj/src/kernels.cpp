#include "par/kernels.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace par::kernels {

namespace {

void attention_probs_generic(const float* q, const float* k_base, size_t k_stride, const std::uint8_t* visible,
                             int nkeys, int head_dim, float scale, float* probs) {
  float mx = -std::numeric_limits<float>::infinity();
  for (int k = 0; k < nkeys; ++k) {
    if (!visible[k]) continue;
    const float* kr = k_base + static_cast<size_t>(k) * k_stride;
    float dot = 0;
    for (int i = 0; i < head_dim; ++i) dot = std::fma(q[i], kr[i], dot);
    probs[k] = dot * scale;
    mx = std::max(mx, probs[k]);
  }
  float sum = 0;
  for (int k = 0; k < nkeys; ++k) {
    probs[k] = visible[k] ? std::exp(probs[k] - mx) : 0.0f;
    sum += probs[k];
  }
  for (int k = 0; k < nkeys; ++k) probs[k] /= sum;
}

void weighted_sum_generic(const float* probs, const std::uint8_t* visible, int nkeys, const float* v_base,
                          size_t v_stride, int head_dim, float* out) {
  for (int i = 0; i < head_dim; ++i) out[i] = 0;
  for (int k = 0; k < nkeys; ++k) {
    if (!visible[k]) continue;
    const float* vr = v_base + static_cast<size_t>(k) * v_stride;
    for (int i = 0; i < head_dim; ++i) out[i] = std::fma(probs[k], vr[i], out[i]);
  }
}

}  // namespace

PackedWeights pack_weights(const float* w, int k, int cols) {
  constexpr int S = PackedWeights::kStrip;
  PackedWeights p;
  p.k = k;
  p.cols = cols;
  const int strips = (cols + S - 1) / S;
  p.data.assign(static_cast<size_t>(strips) * k * S, 0.0f);
  for (int s = 0; s < strips; ++s) {
    const int width = std::min(S, cols - s * S);
    float* dst = p.data.data() + static_cast<size_t>(s) * k * S;
    for (int i = 0; i < k; ++i)
      std::copy_n(w + static_cast<size_t>(i) * cols + s * S, width, dst + static_cast<size_t>(i) * S);
  }
  return p;
}

#if defined(__AVX512F__)

namespace {

// Weight rows fetched ahead of use; strips are strided by the full row length,
// which the hardware prefetcher does not follow.
constexpr int kAhead = 8;
constexpr int kBlock = 256;

// R rows x 64 columns, accumulators held in registers.
template <int R>
inline void tile64(const float* x, int ldx, const float* w, int ldw, int k, float* y, int ldy, bool acc = false) {
  __m512 c[R][4];
  for (int a = 0; a < R; ++a)
    for (int b = 0; b < 4; ++b)
      c[a][b] = acc ? _mm512_loadu_ps(y + static_cast<size_t>(a) * ldy + 16 * b) : _mm512_setzero_ps();
  for (int i = 0; i < k; ++i) {
    const float* wr = w + static_cast<size_t>(i) * ldw;
    for (int q = 0; q < 4; ++q) _mm_prefetch(reinterpret_cast<const char*>(wr + kAhead * ldw + 16 * q), _MM_HINT_T0);
    const __m512 w0 = _mm512_loadu_ps(wr);
    const __m512 w1 = _mm512_loadu_ps(wr + 16);
    const __m512 w2 = _mm512_loadu_ps(wr + 32);
    const __m512 w3 = _mm512_loadu_ps(wr + 48);
    for (int a = 0; a < R; ++a) {
      const __m512 s = _mm512_set1_ps(x[static_cast<size_t>(a) * ldx + i]);
      c[a][0] = _mm512_fmadd_ps(s, w0, c[a][0]);
      c[a][1] = _mm512_fmadd_ps(s, w1, c[a][1]);
      c[a][2] = _mm512_fmadd_ps(s, w2, c[a][2]);
      c[a][3] = _mm512_fmadd_ps(s, w3, c[a][3]);
    }
  }
  for (int a = 0; a < R; ++a)
    for (int b = 0; b < 4; ++b) _mm512_storeu_ps(y + static_cast<size_t>(a) * ldy + 16 * b, c[a][b]);
}

// R rows x 32 columns.
template <int R>
inline void tile32(const float* x, int ldx, const float* w, int ldw, int k, float* y, int ldy, bool acc) {
  __m512 c[R][2];
  for (int a = 0; a < R; ++a) {
    c[a][0] = acc ? _mm512_loadu_ps(y + static_cast<size_t>(a) * ldy) : _mm512_setzero_ps();
    c[a][1] = acc ? _mm512_loadu_ps(y + static_cast<size_t>(a) * ldy + 16) : _mm512_setzero_ps();
  }
  for (int i = 0; i < k; ++i) {
    const float* wr = w + static_cast<size_t>(i) * ldw;
    _mm_prefetch(reinterpret_cast<const char*>(wr + kAhead * ldw), _MM_HINT_T0);
    _mm_prefetch(reinterpret_cast<const char*>(wr + kAhead * ldw + 16), _MM_HINT_T0);
    const __m512 w0 = _mm512_loadu_ps(wr);
    const __m512 w1 = _mm512_loadu_ps(wr + 16);
    for (int a = 0; a < R; ++a) {
      const __m512 s = _mm512_set1_ps(x[static_cast<size_t>(a) * ldx + i]);
      c[a][0] = _mm512_fmadd_ps(s, w0, c[a][0]);
      c[a][1] = _mm512_fmadd_ps(s, w1, c[a][1]);
    }
  }
  for (int a = 0; a < R; ++a) {
    _mm512_storeu_ps(y + static_cast<size_t>(a) * ldy, c[a][0]);
    _mm512_storeu_ps(y + static_cast<size_t>(a) * ldy + 16, c[a][1]);
  }
}

// R rows x up to 16 columns (masked tail).
template <int R>
inline void tile16(const float* x, int ldx, const float* w, int ldw, int k, float* y, int ldy,
                   __mmask16 mask, bool acc = false) {
  __m512 c[R];
  for (int a = 0; a < R; ++a)
    c[a] = acc ? _mm512_maskz_loadu_ps(mask, y + static_cast<size_t>(a) * ldy) : _mm512_setzero_ps();
  for (int i = 0; i < k; ++i) {
    _mm_prefetch(reinterpret_cast<const char*>(w + static_cast<size_t>(i + kAhead) * ldw), _MM_HINT_T0);
    const __m512 wv = _mm512_maskz_loadu_ps(mask, w + static_cast<size_t>(i) * ldw);
    for (int a = 0; a < R; ++a) {
      c[a] = _mm512_fmadd_ps(_mm512_set1_ps(x[static_cast<size_t>(a) * ldx + i]), wv, c[a]);
    }
  }
  for (int a = 0; a < R; ++a) _mm512_mask_storeu_ps(y + static_cast<size_t>(a) * ldy, mask, c[a]);
}

}  // namespace

void matmul_f32(const float* x, int rows, int k, const float* w, int cols, float* y) {
  auto Y = [&](int a, int j) { return y + static_cast<size_t>(a) * cols + j; };
  if (rows < 4) {
    auto X = [&](int a) { return x + static_cast<size_t>(a) * k; };
    int j = 0;
    for (; j + 64 <= cols; j += 64)
      for (int a = 0; a < rows; ++a) tile64<1>(X(a), k, w + j, cols, k, Y(a, j), cols);
    for (; j < cols; j += 16) {
      const int width = cols - j < 16 ? cols - j : 16;
      const auto mask = static_cast<__mmask16>((1u << width) - 1u);
      for (int a = 0; a < rows; ++a) tile16<1>(X(a), k, w + j, cols, k, Y(a, j), cols, mask);
    }
    return;
  }
  // Blocks of kBlock weight rows stay cache-resident while every row tile and
  // column strip consumes them; partial sums carry over through y, so each
  // output is still one ascending chain of FMAs.
  for (int kb = 0; kb < k; kb += kBlock) {
    const int kk = k - kb < kBlock ? k - kb : kBlock;
    const bool acc = kb > 0;
    const float* wb = w + static_cast<size_t>(kb) * cols;
    auto X = [&](int a) { return x + static_cast<size_t>(a) * k + kb; };
    int j = 0;
    for (; j + 32 <= cols; j += 32) {
      int a = 0;
      for (; a + 8 <= rows; a += 8) tile32<8>(X(a), k, wb + j, cols, kk, Y(a, j), cols, acc);
      for (; a + 4 <= rows; a += 4) tile32<4>(X(a), k, wb + j, cols, kk, Y(a, j), cols, acc);
      for (; a < rows; ++a) tile32<1>(X(a), k, wb + j, cols, kk, Y(a, j), cols, acc);
    }
    for (; j < cols; j += 16) {
      const int width = cols - j < 16 ? cols - j : 16;
      const auto mask = static_cast<__mmask16>((1u << width) - 1u);
      int a = 0;
      for (; a + 4 <= rows; a += 4) tile16<4>(X(a), k, wb + j, cols, kk, Y(a, j), cols, mask, acc);
      for (; a < rows; ++a) tile16<1>(X(a), k, wb + j, cols, kk, Y(a, j), cols, mask, acc);
    }
  }
}

void matmul_packed_f32(const float* x, int rows, const PackedWeights& w, float* y) {
  constexpr int S = PackedWeights::kStrip;
  const int k = w.k, cols = w.cols;
  alignas(64) float tail[8 * S];
  for (int j = 0; j < cols; j += S) {
    const float* ws = w.data.data() + static_cast<size_t>(j) * k;
    const int width = std::min(S, cols - j);
    // Padded strips go through a scratch tile and only the real columns are kept.
    float* out = width == S ? y + j : tail;
    const int ldo = width == S ? cols : S;
    auto keep = [&](int a, int r) {
      if (width == S) return;
      for (int b = 0; b < r; ++b)
        std::copy_n(tail + static_cast<size_t>(b) * S, width, y + static_cast<size_t>(a + b) * cols + j);
    };
    int a = 0;
    for (; a + 8 <= rows; a += 8) {
      tile32<8>(x + static_cast<size_t>(a) * k, k, ws, S, k, out + (width == S ? static_cast<size_t>(a) * cols : 0), ldo,
                false);
      keep(a, 8);
    }
    for (; a + 4 <= rows; a += 4) {
      tile32<4>(x + static_cast<size_t>(a) * k, k, ws, S, k, out + (width == S ? static_cast<size_t>(a) * cols : 0), ldo,
                false);
      keep(a, 4);
    }
    for (; a < rows; ++a) {
      tile32<1>(x + static_cast<size_t>(a) * k, k, ws, S, k, out + (width == S ? static_cast<size_t>(a) * cols : 0), ldo,
                false);
      keep(a, 1);
    }
  }
}

namespace {

// Cephes-style expf: x = n ln2 + r, exp(r) by a degree-6 polynomial.
inline __m512 exp512(__m512 x) {
  x = _mm512_min_ps(_mm512_max_ps(x, _mm512_set1_ps(-87.3f)), _mm512_set1_ps(88.3f));
  const __m512 n = _mm512_roundscale_ps(_mm512_fmadd_ps(x, _mm512_set1_ps(1.44269504088896341f), _mm512_set1_ps(0.5f)),
                                        _MM_FROUND_TO_NEG_INF | _MM_FROUND_NO_EXC);
  __m512 r = _mm512_fnmadd_ps(n, _mm512_set1_ps(0.693359375f), x);
  r = _mm512_fnmadd_ps(n, _mm512_set1_ps(-2.12194440e-4f), r);
  __m512 p = _mm512_set1_ps(1.9875691500e-4f);
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.3981999507e-3f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(8.3334519073e-3f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(4.1665795894e-2f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(1.6666665459e-1f));
  p = _mm512_fmadd_ps(p, r, _mm512_set1_ps(5.0000001201e-1f));
  p = _mm512_fmadd_ps(_mm512_mul_ps(p, r), r, _mm512_add_ps(r, _mm512_set1_ps(1.0f)));
  const __m512i e = _mm512_slli_epi32(_mm512_add_epi32(_mm512_cvtps_epi32(n), _mm512_set1_epi32(127)), 23);
  return _mm512_mul_ps(p, _mm512_castsi512_ps(e));
}

// Sixteen lane vectors in, their sixteen lane sums out (key j in lane j).
// Each sum pairs lanes j + 8, then + 4, + 2, + 1.
inline __m512 transpose_sum16(__m512 a[16]) {
  __m512 c[8], d[4], e[2];
  for (int i = 0; i < 8; ++i)
    c[i] = _mm512_add_ps(_mm512_shuffle_f32x4(a[i], a[i + 8], 0x44), _mm512_shuffle_f32x4(a[i], a[i + 8], 0xEE));
  for (int i = 0; i < 4; ++i)
    d[i] = _mm512_add_ps(_mm512_shuffle_f32x4(c[i], c[i + 4], 0x88), _mm512_shuffle_f32x4(c[i], c[i + 4], 0xDD));
  for (int i = 0; i < 2; ++i)
    e[i] = _mm512_add_ps(_mm512_shuffle_ps(d[i], d[i + 2], 0x44), _mm512_shuffle_ps(d[i], d[i + 2], 0xEE));
  const __m512 f = _mm512_add_ps(_mm512_shuffle_ps(e[0], e[1], 0x88), _mm512_shuffle_ps(e[0], e[1], 0xDD));
  // Lane l of f holds key kFrom[l]; the permutation is its own inverse.
  alignas(64) static const std::int32_t kFrom[16] = {0, 2, 1, 3, 8, 10, 9, 11, 4, 6, 5, 7, 12, 14, 13, 15};
  return _mm512_permutexvar_ps(_mm512_load_si512(kFrom), f);
}

template <int B>
[[gnu::always_inline]] inline void dots16(const float* q, const float* k, size_t stride, int m, __m512 part[16]) {
  __m512 qv[B];
  for (int b = 0; b < B; ++b) qv[b] = _mm512_loadu_ps(q + 16 * b);
  if (m == 16) {
    for (int j = 0; j < 16; ++j) {
      const float* kr = k + static_cast<size_t>(j) * stride;
      __m512 a = _mm512_mul_ps(qv[0], _mm512_loadu_ps(kr));
      for (int b = 1; b < B; ++b) a = _mm512_fmadd_ps(qv[b], _mm512_loadu_ps(kr + 16 * b), a);
      part[j] = a;
    }
    return;
  }
  for (int j = 0; j < 16; ++j) {
    __m512 a = _mm512_setzero_ps();
    if (j < m) {
      const float* kr = k + static_cast<size_t>(j) * stride;
      a = _mm512_mul_ps(qv[0], _mm512_loadu_ps(kr));
      for (int b = 1; b < B; ++b) a = _mm512_fmadd_ps(qv[b], _mm512_loadu_ps(kr + 16 * b), a);
    }
    part[j] = a;
  }
}

inline void dots16_any(const float* q, const float* k, size_t stride, int m, int blocks, __m512 part[16]) {
  for (int j = 0; j < 16; ++j) {
    __m512 a = _mm512_setzero_ps();
    if (j < m) {
      const float* kr = k + static_cast<size_t>(j) * stride;
      a = _mm512_mul_ps(_mm512_loadu_ps(q), _mm512_loadu_ps(kr));
      for (int b = 1; b < blocks; ++b) a = _mm512_fmadd_ps(_mm512_loadu_ps(q + 16 * b), _mm512_loadu_ps(kr + 16 * b), a);
    }
    part[j] = a;
  }
}

}  // namespace

void attention_probs_f32(const float* q, const float* k_base, size_t k_stride, const std::uint8_t* visible,
                         int nkeys, int head_dim, float scale, float* probs) {
  if (head_dim % 16 != 0) {
    attention_probs_generic(q, k_base, k_stride, visible, nkeys, head_dim, scale, probs);
    return;
  }
  const __m512 vscale = _mm512_set1_ps(scale);
  const __m512 ninf = _mm512_set1_ps(-std::numeric_limits<float>::infinity());
  __m512 vmax = ninf;
  for (int k0 = 0; k0 < nkeys; k0 += 16) {
    const int m = std::min(16, nkeys - k0);
    const auto valid = static_cast<__mmask16>((1u << m) - 1u);
    __m512 part[16];
    switch (head_dim) {
      case 16: dots16<1>(q, k_base + static_cast<size_t>(k0) * k_stride, k_stride, m, part); break;
      case 32: dots16<2>(q, k_base + static_cast<size_t>(k0) * k_stride, k_stride, m, part); break;
      case 64: dots16<4>(q, k_base + static_cast<size_t>(k0) * k_stride, k_stride, m, part); break;
      default: dots16_any(q, k_base + static_cast<size_t>(k0) * k_stride, k_stride, m, head_dim / 16, part);
    }
    const __mmask16 vis =
        _mm_mask_cmpneq_epi8_mask(valid, _mm_maskz_loadu_epi8(valid, visible + k0), _mm_setzero_si128());
    const __m512 sc = _mm512_mask_mov_ps(ninf, vis, _mm512_mul_ps(transpose_sum16(part), vscale));
    vmax = _mm512_max_ps(vmax, sc);
    _mm512_mask_storeu_ps(probs + k0, valid, sc);
  }
  const __m512 mx = _mm512_set1_ps(_mm512_reduce_max_ps(vmax));
  __m512 vsum = _mm512_setzero_ps();
  for (int k0 = 0; k0 < nkeys; k0 += 16) {
    const int m = std::min(16, nkeys - k0);
    const auto valid = static_cast<__mmask16>((1u << m) - 1u);
    const __m512 sc = _mm512_maskz_loadu_ps(valid, probs + k0);
    const __mmask16 vis = _mm512_mask_cmp_ps_mask(valid, sc, ninf, _CMP_NEQ_OQ);
    const __m512 e = _mm512_maskz_mov_ps(vis, exp512(_mm512_sub_ps(sc, mx)));
    vsum = _mm512_add_ps(vsum, e);
    _mm512_mask_storeu_ps(probs + k0, valid, e);
  }
  alignas(64) float lanes[16];
  _mm512_store_ps(lanes, vsum);
  for (int w = 8; w > 0; w /= 2)
    for (int j = 0; j < w; ++j) lanes[j] += lanes[j + w];
  const __m512 inv = _mm512_set1_ps(1.0f / lanes[0]);
  for (int k0 = 0; k0 < nkeys; k0 += 16) {
    const auto valid = static_cast<__mmask16>((1u << std::min(16, nkeys - k0)) - 1u);
    _mm512_mask_storeu_ps(probs + k0, valid, _mm512_mul_ps(_mm512_maskz_loadu_ps(valid, probs + k0), inv));
  }
}

void weighted_sum_f32(const float* probs, const std::uint8_t* visible, int nkeys, const float* v_base,
                      size_t v_stride, int head_dim, float* out) {
  if (head_dim % 16 != 0 || head_dim > 64) {
    weighted_sum_generic(probs, visible, nkeys, v_base, v_stride, head_dim, out);
    return;
  }
  const int blocks = head_dim / 16;
  __m512 acc[2][4];
  for (auto& a : acc)
    for (auto& b : a) b = _mm512_setzero_ps();
  for (int k = 0; k < nkeys; ++k) {
    if (!visible[k]) continue;
    const __m512 p = _mm512_set1_ps(probs[k]);
    const float* vr = v_base + static_cast<size_t>(k) * v_stride;
    __m512* a = acc[k & 1];
    for (int b = 0; b < blocks; ++b) a[b] = _mm512_fmadd_ps(p, _mm512_loadu_ps(vr + 16 * b), a[b]);
  }
  for (int b = 0; b < blocks; ++b) _mm512_storeu_ps(out + 16 * b, _mm512_add_ps(acc[0][b], acc[1][b]));
}

void swiglu_f32(const float* g, const float* u, float* a, int n) {
  const __m512 one = _mm512_set1_ps(1.0f);
  for (int j = 0; j < n; j += 16) {
    const auto m = static_cast<__mmask16>((1u << std::min(16, n - j)) - 1u);
    const __m512 gv = _mm512_maskz_loadu_ps(m, g + j);
    const __m512 sg = _mm512_div_ps(one, _mm512_add_ps(one, exp512(_mm512_sub_ps(_mm512_setzero_ps(), gv))));
    _mm512_mask_storeu_ps(a + j, m, _mm512_mul_ps(_mm512_mul_ps(gv, sg), _mm512_maskz_loadu_ps(m, u + j)));
  }
}

#else

void weighted_sum_f32(const float* probs, const std::uint8_t* visible, int nkeys, const float* v_base,
                      size_t v_stride, int head_dim, float* out) {
  weighted_sum_generic(probs, visible, nkeys, v_base, v_stride, head_dim, out);
}

void swiglu_f32(const float* g, const float* u, float* a, int n) {
  for (int j = 0; j < n; ++j) a[j] = g[j] / (1.0f + std::exp(-g[j])) * u[j];
}

void attention_probs_f32(const float* q, const float* k_base, size_t k_stride, const std::uint8_t* visible,
                         int nkeys, int head_dim, float scale, float* probs) {
  attention_probs_generic(q, k_base, k_stride, visible, nkeys, head_dim, scale, probs);
}

void matmul_f32(const float* x, int rows, int k, const float* w, int cols, float* y) {
  for (int a = 0; a < rows; ++a) {
    float* yr = y + static_cast<size_t>(a) * cols;
    for (int j = 0; j < cols; ++j) yr[j] = 0.0f;
    for (int i = 0; i < k; ++i) {
      const float s = x[static_cast<size_t>(a) * k + i];
      const float* wr = w + static_cast<size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) yr[j] = std::fma(s, wr[j], yr[j]);
    }
  }
}

void matmul_packed_f32(const float* x, int rows, const PackedWeights& w, float* y) {
  constexpr int S = PackedWeights::kStrip;
  for (int a = 0; a < rows; ++a) {
    float* yr = y + static_cast<size_t>(a) * w.cols;
    for (int j = 0; j < w.cols; ++j) {
      const float* col = w.data.data() + static_cast<size_t>(j / S) * w.k * S + j % S;
      float acc = 0.0f;
      for (int i = 0; i < w.k; ++i) acc = std::fma(x[static_cast<size_t>(a) * w.k + i], col[static_cast<size_t>(i) * S], acc);
      yr[j] = acc;
    }
  }
}

#endif

}  // namespace par::kernels

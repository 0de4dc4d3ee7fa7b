#pragma once

// Row-level primitives shared by the full forward pass and the cached decoder.
// Both paths must call exactly these so their results agree bitwise.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "par/model.hpp"

namespace par::detail {

// Sum of a[i] * b[i] in 16 interleaved lanes reduced by a fixed tree, so the
// result depends only on the inputs and the loop vectorizes.
template <class S>
[[gnu::always_inline]] inline S dot(const S* a, const S* b, int n) {
  constexpr int L = 16;
  S acc[L] = {};
  int i = 0;
  for (; i + L <= n; i += L)
    for (int j = 0; j < L; ++j) acc[j] += a[i + j] * b[i + j];
  for (int w = L / 2; w > 0; w /= 2)
    for (int j = 0; j < w; ++j) acc[j] += acc[j + w];
  S s = acc[0];
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Branch-free exp for float (range reduction by ln 2 and a degree-6
// polynomial, about 2 ulp); std::exp otherwise.
template <class S>
[[gnu::always_inline]] inline S exp_(S x) {
  if constexpr (std::is_same_v<S, float>) {
    x = std::fmin(std::fmax(x, -87.3f), 88.3f);
    const float n = std::floor(x * 1.44269504088896341f + 0.5f);
    float r = x - n * 0.693359375f;
    r = r - n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    return p * std::bit_cast<float>((static_cast<std::int32_t>(n) + 127) << 23);
  } else {
    return std::exp(x);
  }
}

template <class S>
void rmsnorm_rows(const Mat<S>& x, const Mat<S>& gain, double eps, Mat<S>& out,
                  std::vector<S>* rinv_out = nullptr) {
  const int rows = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  out.resize(rows, d);
  if (rinv_out) rinv_out->resize(rows);
  for (int r = 0; r < rows; ++r) {
    const S* xr = x.data() + static_cast<size_t>(r) * d;
    const S ss = dot(xr, xr, d);
    const S rinv = S(1) / std::sqrt(ss / static_cast<S>(d) + static_cast<S>(eps));
    if (rinv_out) (*rinv_out)[r] = rinv;
    S* orow = out.data() + static_cast<size_t>(r) * d;
    for (int j = 0; j < d; ++j) orow[j] = xr[j] * rinv * gain(0, j);
  }
}

template <class S>
void check_slot(const SlotInput& s, const ModelConfig& cfg) {
  switch (s.kind) {
    case SlotKind::Token:
      if (s.id < 0 || s.id >= cfg.vocab)
        throw std::invalid_argument("token id " + std::to_string(s.id) + " outside vocab");
      break;
    case SlotKind::Label:
      if (s.id < 0 || s.id > cfg.labels)
        throw std::invalid_argument("label " + std::to_string(s.id) + " outside [0, C]");
      break;
    case SlotKind::Transition:
      if (s.id < 1 || s.id >= cfg.group_size)
        throw std::invalid_argument("transition index " + std::to_string(s.id) + " outside [1, n)");
      break;
  }
}

template <class S>
void embed(const Params<S>& p, const ModelConfig& cfg, std::span<const SlotInput> slots, Mat<S>& x) {
  const int rows = static_cast<int>(slots.size());
  x.resize(rows, cfg.hidden);
  for (int r = 0; r < rows; ++r) {
    const SlotInput& s = slots[r];
    check_slot<S>(s, cfg);
    switch (s.kind) {
      case SlotKind::Token:
        x.row(r) = p.tok_emb.row(s.id);
        break;
      case SlotKind::Label:
        x.row(r) = p.label_emb.row(s.id);
        break;
      case SlotKind::Transition:
        x.row(r) = p.transition_emb.row(s.id - 1);
        break;
    }
  }
}

// Rotates the q and k parts of each [q | k | v] row in place.
template <class S>
void rotate_qk(Mat<S>& qkv, std::span<const RopeCoord> coords, int heads, int head_dim,
               const RopeTable& rope) {
  const int d = heads * head_dim;
  for (int r = 0; r < static_cast<int>(qkv.rows()); ++r) {
    S* row = qkv.data() + static_cast<size_t>(r) * 3 * d;
    for (int h = 0; h < heads; ++h) {
      rope.apply(std::span<S>(row + h * head_dim, head_dim), coords[r]);
      rope.apply(std::span<S>(row + d + h * head_dim, head_dim), coords[r]);
    }
  }
}

// Softmax over visible keys in ascending key order; invisible keys get 0.
template <class S>
void attention_probs(const S* q, const S* k_base, size_t k_stride, const std::uint8_t* visible,
                     int nkeys, int head_dim, S scale, S* probs) {
  if constexpr (std::is_same_v<S, float>) {
    kernels::attention_probs_f32(q, k_base, k_stride, visible, nkeys, head_dim, scale, probs);
    return;
  }
  S mx = -std::numeric_limits<S>::infinity();
  for (int k = 0; k < nkeys; ++k) {
    if (!visible[k]) {
      probs[k] = 0;
      continue;
    }
    const S* kr = k_base + static_cast<size_t>(k) * k_stride;
    probs[k] = dot(q, kr, head_dim) * scale;
    if (probs[k] > mx) mx = probs[k];
  }
  S sum = 0;
  for (int k = 0; k < nkeys; ++k) {
    if (!visible[k]) continue;
    probs[k] = exp_(probs[k] - mx);
    sum += probs[k];
  }
  const S inv = S(1) / sum;
  for (int k = 0; k < nkeys; ++k)
    if (visible[k]) probs[k] *= inv;
}

template <class S>
void weighted_sum(const S* probs, const std::uint8_t* visible, int nkeys, const S* v_base,
                  size_t v_stride, int head_dim, S* out) {
  if constexpr (std::is_same_v<S, float>) {
    kernels::weighted_sum_f32(probs, visible, nkeys, v_base, v_stride, head_dim, out);
    return;
  }
  for (int i = 0; i < head_dim; ++i) out[i] = 0;
  for (int k = 0; k < nkeys; ++k) {
    if (!visible[k]) continue;
    const S p = probs[k];
    const S* vr = v_base + static_cast<size_t>(k) * v_stride;
    for (int i = 0; i < head_dim; ++i) out[i] += p * vr[i];
  }
}

template <class S>
[[gnu::always_inline]] inline S sigmoid(S x) {
  return S(1) / (S(1) + exp_(-x));
}

// act = silu(gate) * up for rows laid out as [gate | up].
template <class S>
void swiglu_rows(const Mat<S>& gu, Mat<S>& act) {
  const int rows = static_cast<int>(gu.rows());
  const int f = static_cast<int>(gu.cols() / 2);
  act.resize(rows, f);
  for (int r = 0; r < rows; ++r) {
    const S* g = gu.data() + static_cast<size_t>(r) * 2 * f;
    const S* u = g + f;
    S* a = act.data() + static_cast<size_t>(r) * f;
    if constexpr (std::is_same_v<S, float>)
      kernels::swiglu_f32(g, u, a, f);
    else
      for (int j = 0; j < f; ++j) a[j] = g[j] * sigmoid(g[j]) * u[j];
  }
}

}  // namespace par::detail

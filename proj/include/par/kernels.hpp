#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <type_traits>
#include <vector>

namespace par {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace kernels {

// y = x * w for row-major float matrices. Every output element is accumulated
// over k in ascending order with one FMA per term, independent of how many
// rows x has, so a row computed alone is bitwise equal to the same row computed
// inside a larger batch.
void matmul_f32(const float* x, int rows, int k, const float* w, int cols, float* y);

// A k x cols weight matrix stored as column strips of kStrip, each strip k x
// kStrip contiguous and zero-padded on the right.
struct PackedWeights {
  static constexpr int kStrip = 32;
  int k = 0;
  int cols = 0;
  std::vector<float> data;
};

PackedWeights pack_weights(const float* w, int k, int cols);

// Same products and summation order as matmul_f32, so bitwise equal results.
void matmul_packed_f32(const float* x, int rows, const PackedWeights& w, float* y);

// Softmax of scale * q.k over the visible keys; hidden keys get 0. Keys are
// rows of k_base with stride k_stride. A key's score and its contribution to
// the normalizer depend only on its position and value, so appending hidden
// keys leaves every probability bitwise unchanged.
void attention_probs_f32(const float* q, const float* k_base, size_t k_stride, const std::uint8_t* visible,
                         int nkeys, int head_dim, float scale, float* probs);

// out = sum over visible keys of probs[k] * v_k, keys split by parity into two
// partial sums added at the end.
void weighted_sum_f32(const float* probs, const std::uint8_t* visible, int nkeys, const float* v_base,
                      size_t v_stride, int head_dim, float* out);

// a[j] = silu(g[j]) * u[j].
void swiglu_f32(const float* g, const float* u, float* a, int n);

}  // namespace kernels

template <class S>
void matmul(const Mat<S>& x, const Mat<S>& w, Mat<S>& y) {
  y.resize(x.rows(), w.cols());
  if constexpr (std::is_same_v<S, float>) {
    kernels::matmul_f32(x.data(), static_cast<int>(x.rows()), static_cast<int>(x.cols()), w.data(),
                        static_cast<int>(w.cols()), y.data());
  } else {
    y.noalias() = x * w;
  }
}

}  // namespace par

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace par {

// Per-axis grid coordinate; 2 axes use (y, x), 3 axes use (t, y, x).
struct RopeCoord {
  std::array<int, 3> axis{0, 0, 0};
  bool identity = false;  // label and transition slots carry no coordinate

  static RopeCoord none() { return RopeCoord{{0, 0, 0}, true}; }
  bool operator==(const RopeCoord&) const = default;
};

// Multi-axis rotary table. The head dimension is split evenly across axes;
// axis a owns dims [a*D, (a+1)*D) with D = head_dim / axes, rotated as
// adjacent pairs with angle coord * base^(-2i/D).
class RopeTable {
 public:
  RopeTable() = default;
  RopeTable(int head_dim, int axes, std::array<int, 3> max_coords, double base = 10000.0);

  int head_dim() const { return head_dim_; }
  int axes() const { return axes_; }
  int pairs_per_axis() const { return pairs_; }
  const std::array<int, 3>& max_coords() const { return max_coords_; }
  double base() const { return base_; }

  double frequency(int pair) const { return freqs_[pair]; }
  // Every axis uses the same frequency ladder.
  double angle(int coord, int pair) const { return static_cast<double>(coord) * freqs_[pair]; }

  // Rotates one head vector in place. Throws std::out_of_range.
  template <class S>
  void apply(std::span<S> v, const RopeCoord& c) const;
  // Applies the transpose rotation (used for gradients).
  template <class S>
  void apply_inverse(std::span<S> v, const RopeCoord& c) const;

  void check(const RopeCoord& c) const;

 private:
  template <class S, bool Inverse>
  void rotate(std::span<S> v, const RopeCoord& c) const;

  int head_dim_ = 0;
  int axes_ = 0;
  int pairs_ = 0;
  double base_ = 10000.0;
  std::array<int, 3> max_coords_{0, 0, 0};
  std::vector<double> freqs_;
  // [axis][coord][pair]
  std::vector<double> cos_;
  std::vector<double> sin_;
  std::array<size_t, 3> axis_offset_{0, 0, 0};
};

RopeTable build_rope_table(int head_dim, int axes, std::array<int, 3> max_coords,
                           double base = 10000.0);

// Rotates each row (length head_dim) by its coordinate.
std::vector<float> apply_rope(std::span<const float> vectors, std::span<const RopeCoord> coords,
                              const RopeTable& table);

template <class S, bool Inverse>
void RopeTable::rotate(std::span<S> v, const RopeCoord& c) const {
  if (c.identity) return;
  check(c);
  if (static_cast<int>(v.size()) != head_dim_) {
    throw std::invalid_argument("rope vector length " + std::to_string(v.size()) +
                                " != head_dim " + std::to_string(head_dim_));
  }
  for (int a = 0; a < axes_; ++a) {
    const size_t row = axis_offset_[a] + static_cast<size_t>(c.axis[a]) * pairs_;
    S* base = v.data() + static_cast<size_t>(a) * pairs_ * 2;
    for (int i = 0; i < pairs_; ++i) {
      const S cs = static_cast<S>(cos_[row + i]);
      const S sn = Inverse ? -static_cast<S>(sin_[row + i]) : static_cast<S>(sin_[row + i]);
      const S x0 = base[2 * i];
      const S x1 = base[2 * i + 1];
      base[2 * i] = x0 * cs - x1 * sn;
      base[2 * i + 1] = x0 * sn + x1 * cs;
    }
  }
}

template <class S>
void RopeTable::apply(std::span<S> v, const RopeCoord& c) const {
  rotate<S, false>(v, c);
}

template <class S>
void RopeTable::apply_inverse(std::span<S> v, const RopeCoord& c) const {
  rotate<S, true>(v, c);
}

}  // namespace par

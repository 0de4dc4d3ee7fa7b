#include "par/rope.hpp"

namespace par {

RopeTable::RopeTable(int head_dim, int axes, std::array<int, 3> max_coords, double base)
    : head_dim_(head_dim), axes_(axes), base_(base), max_coords_(max_coords) {
  if (axes < 1 || axes > 3) throw std::invalid_argument("rope axes must be 1..3");
  if (head_dim <= 0 || head_dim % (2 * axes) != 0) {
    throw std::invalid_argument("head_dim " + std::to_string(head_dim) +
                                " is not divisible by 2*axes = " + std::to_string(2 * axes));
  }
  if (!(base > 1.0)) throw std::invalid_argument("rope base must exceed 1");
  pairs_ = head_dim / (2 * axes);
  const int per_axis_dim = head_dim / axes;
  freqs_.resize(pairs_);
  for (int i = 0; i < pairs_; ++i) freqs_[i] = std::pow(base, -2.0 * i / per_axis_dim);

  size_t offset = 0;
  for (int a = 0; a < axes_; ++a) {
    if (max_coords_[a] < 1) throw std::invalid_argument("rope max coordinate must be >= 1");
    axis_offset_[a] = offset;
    offset += static_cast<size_t>(max_coords_[a]) * pairs_;
  }
  cos_.resize(offset);
  sin_.resize(offset);
  for (int a = 0; a < axes_; ++a) {
    for (int c = 0; c < max_coords_[a]; ++c) {
      for (int i = 0; i < pairs_; ++i) {
        const size_t idx = axis_offset_[a] + static_cast<size_t>(c) * pairs_ + i;
        cos_[idx] = std::cos(angle(c, i));
        sin_[idx] = std::sin(angle(c, i));
      }
    }
  }
}

void RopeTable::check(const RopeCoord& c) const {
  for (int a = 0; a < axes_; ++a) {
    if (c.axis[a] < 0 || c.axis[a] >= max_coords_[a]) {
      throw std::out_of_range("rope coordinate " + std::to_string(c.axis[a]) + " on axis " +
                              std::to_string(a) + " outside [0, " + std::to_string(max_coords_[a]) +
                              ")");
    }
  }
}

RopeTable build_rope_table(int head_dim, int axes, std::array<int, 3> max_coords, double base) {
  return RopeTable(head_dim, axes, max_coords, base);
}

std::vector<float> apply_rope(std::span<const float> vectors, std::span<const RopeCoord> coords,
                              const RopeTable& table) {
  const size_t d = table.head_dim();
  if (vectors.size() != coords.size() * d) {
    throw std::invalid_argument("apply_rope: " + std::to_string(vectors.size()) +
                                " values for " + std::to_string(coords.size()) + " coordinates");
  }
  std::vector<float> out(vectors.begin(), vectors.end());
  for (size_t r = 0; r < coords.size(); ++r) {
    table.apply(std::span<float>(out.data() + r * d, d), coords[r]);
  }
  return out;
}

}  // namespace par

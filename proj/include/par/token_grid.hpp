#pragma once

#include <vector>

#include "par/order.hpp"

namespace par {

// Tokens of one sample in flat raster order (t, y, x), plus its class label.
struct TokenGrid {
  GridShape shape;
  std::vector<int> tokens;
  int label = 0;

  int at(const Coord& c) const { return tokens[(c.t * shape.h + c.y) * shape.w + c.x]; }
  bool operator==(const TokenGrid&) const = default;
};

// Grid tokens rearranged into the plan's sequence order, and back.
std::vector<int> to_sequence(const OrderPlan& plan, const std::vector<int>& grid_tokens);
std::vector<int> from_sequence(const OrderPlan& plan, const std::vector<int>& seq_tokens);

}  // namespace par

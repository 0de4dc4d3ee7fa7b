#include "par/order.hpp"

#include <sstream>

namespace par {

void GridShape::validate() const {
  if (t < 1 || h < 1 || w < 1 || m < 1) {
    throw ShapeError("grid shape must have t, h, w, m >= 1, got " + std::to_string(t) + "x" +
                     std::to_string(h) + "x" + std::to_string(w) + " m=" + std::to_string(m));
  }
  if (h % m != 0 || w % m != 0) {
    throw ShapeError("grid " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible into " + std::to_string(m) + "x" + std::to_string(m) +
                     " regions");
  }
}

int GroupSchedule::covered_positions() const {
  int total = 0;
  for (const auto& s : steps) total += s.size;
  return total;
}

int OrderPlan::flat_index(const Coord& c) const {
  return (c.t * shape.h + c.y) * shape.w + c.x;
}

Coord OrderPlan::coord_of_flat(int flat) const {
  const int hw = shape.h * shape.w;
  return Coord{flat / hw, (flat % hw) / shape.w, flat % shape.w};
}

namespace {

void append_par_order(OrderPlan& plan) {
  const GridShape& s = plan.shape;
  const int rh = s.region_rows();
  const int rw = s.region_cols();
  const int regions = s.group_size();
  for (int f = 0; f < s.t; ++f) {
    for (int j = 0; j < plan.k; ++j) {
      const int oy = j / rw;
      const int ox = j % rw;
      for (int r = 0; r < regions; ++r) {
        const int ry = r / s.m;
        const int rx = r % s.m;
        plan.perm.push_back(Coord{f, ry * rh + oy, rx * rw + ox});
      }
    }
  }
}

void append_raster_order(OrderPlan& plan) {
  const GridShape& s = plan.shape;
  for (int f = 0; f < s.t; ++f)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) plan.perm.push_back(Coord{f, y, x});
}

}  // namespace

OrderPlan build_order_plan(const GridShape& shape, const OrderOptions& options) {
  shape.validate();
  OrderPlan plan;
  plan.shape = shape;
  plan.options = options;
  plan.n = shape.group_size();
  plan.k = shape.tokens_per_region();
  const int total = shape.token_count();
  plan.perm.reserve(total);

  if (options.scan == ScanOrder::Par) {
    append_par_order(plan);
  } else {
    append_raster_order(plan);
  }

  plan.inv_perm.assign(total, -1);
  for (int i = 0; i < total; ++i) plan.inv_perm[plan.flat_index(plan.perm[i])] = i;

  // Stage 1 covers the first n positions one at a time; every later step is a
  // contiguous block of n. Blocks never straddle frames because h*w % n == 0.
  auto& steps = plan.schedule.steps;
  int pos = 0;
  if (options.sequential_prefix) {
    for (; pos < plan.n; ++pos) steps.push_back(Step{pos, 1, Stage::Sequential});
  }
  for (; pos < total; pos += plan.n) steps.push_back(Step{pos, plan.n, Stage::Parallel});
  return plan;
}

int step_count(const GridShape& shape) {
  shape.validate();
  const int n = shape.group_size();
  return n + (shape.token_count() - n) / n;
}

Coord position_map(const OrderPlan& plan, int seq_index) {
  if (seq_index < 0 || seq_index >= plan.token_count()) {
    throw std::out_of_range("sequence index " + std::to_string(seq_index) + " outside [0, " +
                            std::to_string(plan.token_count()) + ")");
  }
  return plan.perm[seq_index];
}

int position_map(const OrderPlan& plan, const Coord& c) {
  const GridShape& s = plan.shape;
  if (c.t < 0 || c.t >= s.t || c.y < 0 || c.y >= s.h || c.x < 0 || c.x >= s.w) {
    throw std::out_of_range("coordinate " + to_string(c) + " outside grid");
  }
  return plan.inv_perm[plan.flat_index(c)];
}

std::string to_string(const Coord& c) {
  std::ostringstream os;
  os << "(" << c.t << "," << c.y << "," << c.x << ")";
  return os.str();
}

}  // namespace par

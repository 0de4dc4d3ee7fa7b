#pragma once

#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace par {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token grid of t frames, h rows, w cols, split into m x m spatial regions.
struct GridShape {
  int t = 1;
  int h = 0;
  int w = 0;
  int m = 1;

  int token_count() const { return t * h * w; }
  int group_size() const { return m * m; }
  int region_rows() const { return h / m; }
  int region_cols() const { return w / m; }
  int tokens_per_region() const { return region_rows() * region_cols(); }

  // Throws ShapeError when the invariants do not hold.
  void validate() const;

  bool operator==(const GridShape&) const = default;
};

struct Coord {
  int t = 0;
  int y = 0;
  int x = 0;

  auto operator<=>(const Coord&) const = default;
};

enum class Stage : std::uint8_t { Sequential, Parallel };

// A contiguous run of sequence positions generated in one step.
struct Step {
  int begin = 0;
  int size = 0;
  Stage stage = Stage::Sequential;

  int end() const { return begin + size; }
};

struct GroupSchedule {
  std::vector<Step> steps;

  int covered_positions() const;
};

enum class ScanOrder : std::uint8_t {
  Par,     // region-initial tokens first, then aligned offsets across regions
  Raster,  // row-major; parallel groups are runs of adjacent tokens
};

struct OrderOptions {
  ScanOrder scan = ScanOrder::Par;
  // When false the first group is predicted in parallel as well (no stage 1).
  bool sequential_prefix = true;
};

struct OrderPlan {
  GridShape shape;
  OrderOptions options;
  std::vector<Coord> perm;    // sequence position -> grid coordinate
  std::vector<int> inv_perm;  // flat raster index -> sequence position
  GroupSchedule schedule;
  int n = 1;  // group size, m^2
  int k = 1;  // tokens per region

  int token_count() const { return static_cast<int>(perm.size()); }
  int flat_index(const Coord& c) const;
  Coord coord_of_flat(int flat) const;
  int step_count() const { return static_cast<int>(schedule.steps.size()); }
};

OrderPlan build_order_plan(const GridShape& shape, const OrderOptions& options = {});

// m^2 + (t*h*w - m^2) / m^2 for the default plan.
int step_count(const GridShape& shape);

// Sequence position <-> grid coordinate. Throws std::out_of_range.
Coord position_map(const OrderPlan& plan, int seq_index);
int position_map(const OrderPlan& plan, const Coord& coord);

std::string to_string(const Coord& c);

}  // namespace par

#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <vector>

namespace sarjepa {

struct PatchGrid {
  int rows = 8;
  int cols = 8;
  int patch = 8;

  int count() const { return rows * cols; }
  void validate() const;
};

/// Rectangular block of the patch grid. Local windows are square.
struct MaskWindow {
  int row = 0;
  int col = 0;
  int rows = 0;
  int cols = 0;
  /// Window-relative indices (r * cols + c), ascending.
  std::vector<int> masked;

  int size() const { return rows * cols; }
  /// Grid index of window-relative position `i`.
  int grid_index(int i, int grid_cols) const { return (row + i / cols) * grid_cols + col + i % cols; }
  std::vector<int> visible() const;
  /// is_masked[i] for every window position.
  std::vector<bool> mask_flags() const;
};

enum class MaskMode { Local, Global };

struct MaskPlan {
  MaskMode mode = MaskMode::Local;
  std::vector<MaskWindow> windows;
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;
};

/// round-half-up(ratio * n).
int masked_count(double mask_ratio, int n);

/// k square windows of side w with independent uniform top-left positions.
std::vector<MaskWindow> sample_local_windows(const PatchGrid& grid, int k, int w, std::uint64_t seed);

/// Masks a uniformly random subset of exactly masked_count(ratio, w*w) positions per window.
MaskPlan mask_plan(std::vector<MaskWindow> windows, double mask_ratio, std::uint64_t seed);

/// One window covering the whole grid.
MaskPlan global_mask_plan(const PatchGrid& grid, double mask_ratio, std::uint64_t seed);

nlohmann::json to_json(const MaskPlan& plan);

}  // namespace sarjepa

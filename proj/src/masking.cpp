#include "sarjepa/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sarjepa/errors.hpp"
#include "sarjepa/rng.hpp"

namespace sarjepa {

void PatchGrid::validate() const {
  require(rows >= 1 && cols >= 1, "patch grid must have at least one patch");
  require(patch >= 1, "patch side must be >= 1");
}

std::vector<int> MaskWindow::visible() const {
  std::vector<int> out;
  const auto flags = mask_flags();
  for (int i = 0; i < size(); ++i)
    if (!flags[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

std::vector<bool> MaskWindow::mask_flags() const {
  std::vector<bool> flags(static_cast<std::size_t>(size()), false);
  for (int i : masked) flags[static_cast<std::size_t>(i)] = true;
  return flags;
}

int masked_count(double mask_ratio, int n) {
  return static_cast<int>(std::floor(mask_ratio * n + 0.5));
}

std::vector<MaskWindow> sample_local_windows(const PatchGrid& grid, int k, int w, std::uint64_t seed) {
  grid.validate();
  require(k >= 1, "window count must be >= 1");
  require(w >= 1 && w <= std::min(grid.rows, grid.cols), "window side exceeds the patch grid");
  Rng rng = make_rng(derive_seed(seed, 0, stream::windows));
  std::uniform_int_distribution<int> top(0, grid.rows - w), left(0, grid.cols - w);
  std::vector<MaskWindow> windows(static_cast<std::size_t>(k));
  for (auto& win : windows) {
    win.row = top(rng);
    win.col = left(rng);
    win.rows = win.cols = w;
  }
  return windows;
}

MaskPlan mask_plan(std::vector<MaskWindow> windows, double mask_ratio, std::uint64_t seed) {
  require(mask_ratio >= 0.0 && mask_ratio <= 1.0, "mask_ratio must be in [0, 1]");
  Rng rng = make_rng(derive_seed(seed, 0, stream::mask));
  MaskPlan plan;
  plan.mask_ratio = mask_ratio;
  plan.seed = seed;
  for (auto& win : windows) {
    const int n = win.size();
    const int m = masked_count(mask_ratio, n);
    // Partial Fisher-Yates: the first m entries form a uniform m-subset.
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    for (int i = 0; i < m; ++i) {
      std::uniform_int_distribution<int> pick(i, n - 1);
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
    }
    win.masked.assign(order.begin(), order.begin() + m);
    std::sort(win.masked.begin(), win.masked.end());
  }
  plan.windows = std::move(windows);
  return plan;
}

MaskPlan global_mask_plan(const PatchGrid& grid, double mask_ratio, std::uint64_t seed) {
  grid.validate();
  MaskWindow whole;
  whole.rows = grid.rows;
  whole.cols = grid.cols;
  MaskPlan plan = mask_plan({whole}, mask_ratio, seed);
  plan.mode = MaskMode::Global;
  return plan;
}

nlohmann::json to_json(const MaskPlan& plan) {
  nlohmann::json wins = nlohmann::json::array();
  for (const auto& w : plan.windows)
    wins.push_back({{"row", w.row}, {"col", w.col}, {"rows", w.rows}, {"cols", w.cols}, {"masked", w.masked}});
  return {{"mode", plan.mode == MaskMode::Local ? "local" : "global"},
          {"windows", wins},
          {"mask_ratio", plan.mask_ratio},
          {"seed", plan.seed}};
}

}  // namespace sarjepa

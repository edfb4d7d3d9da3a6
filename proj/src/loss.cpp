#include "sarjepa/loss.hpp"

#include "sarjepa/errors.hpp"

namespace sarjepa {

template <typename T>
T mim_loss(const Mat<T>& pred, const Mat<T>& targets, const std::vector<bool>& masked, const SeqLayout& layout,
           bool all_positions, Mat<T>* dpred, std::vector<T>* per_sequence) {
  if (pred.rows() != targets.rows() || pred.cols() != targets.cols() || pred.rows() != layout.total() ||
      masked.size() != static_cast<std::size_t>(pred.rows()))
    throw ValidationError("prediction and target shapes disagree");
  const int n = layout.tokens();
  const T dim = static_cast<T>(pred.cols());
  if (dpred) dpred->setZero(pred.rows(), pred.cols());
  if (per_sequence) per_sequence->assign(static_cast<std::size_t>(layout.count), T(0));

  T total = 0;
  for (int s = 0; s < layout.count; ++s) {
    int count = 0;
    for (int i = 0; i < n; ++i) count += (all_positions || masked[static_cast<std::size_t>(s * n + i)]) ? 1 : 0;
    if (count == 0) throw ValidationError("no masked tokens in window while masked prediction is on");
    T seq = 0;
    for (int i = 0; i < n; ++i) {
      const int row = s * n + i;
      if (!all_positions && !masked[static_cast<std::size_t>(row)]) continue;
      const auto diff = pred.row(row) - targets.row(row);
      seq += diff.squaredNorm() / dim;
      if (dpred) dpred->row(row) = diff * (T(2) / (dim * static_cast<T>(count) * static_cast<T>(layout.count)));
    }
    seq /= static_cast<T>(count);
    if (per_sequence) (*per_sequence)[static_cast<std::size_t>(s)] = seq;
    total += seq;
  }
  return total / static_cast<T>(layout.count);
}

double mim_loss(const Mat<double>& pred, const Mat<double>& targets, const MaskPlan& plan) {
  require(!plan.windows.empty(), "mask plan has no windows");
  const auto& first = plan.windows.front();
  std::vector<bool> masked;
  for (const auto& w : plan.windows) {
    require(w.rows == first.rows && w.cols == first.cols, "windows of one plan must share a shape");
    const auto flags = w.mask_flags();
    masked.insert(masked.end(), flags.begin(), flags.end());
  }
  const SeqLayout layout{first.rows, first.cols, static_cast<int>(plan.windows.size())};
  return mim_loss<double>(pred, targets, masked, layout, plan.mask_ratio == 0.0);
}

template float mim_loss(const Mat<float>&, const Mat<float>&, const std::vector<bool>&, const SeqLayout&, bool,
                        Mat<float>*, std::vector<float>*);
template double mim_loss(const Mat<double>&, const Mat<double>&, const std::vector<bool>&, const SeqLayout&, bool,
                         Mat<double>*, std::vector<double>*);

}  // namespace sarjepa

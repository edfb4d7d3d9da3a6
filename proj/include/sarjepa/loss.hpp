#pragma once

#include <vector>

#include "sarjepa/masking.hpp"
#include "sarjepa/model.hpp"

namespace sarjepa {

/// Feature-space MSE over masked tokens, averaged per sequence (window) and
/// then over sequences. With `all_positions` (no-mask mode) every token of
/// every sequence counts. Throws ValidationError when a sequence has no
/// masked token and all_positions is off.
///
/// `dpred`, when given, receives dLoss/dPred. `per_sequence`, when given,
/// receives each sequence's loss.
template <typename T>
T mim_loss(const Mat<T>& pred, const Mat<T>& targets, const std::vector<bool>& masked, const SeqLayout& layout,
           bool all_positions, Mat<T>* dpred = nullptr, std::vector<T>* per_sequence = nullptr);

/// Rows of `pred`/`targets` are the concatenated window tokens of one image's
/// plan, in plan order. A plan with mask_ratio 0 is scored on all positions.
double mim_loss(const Mat<double>& pred, const Mat<double>& targets, const MaskPlan& plan);

}  // namespace sarjepa

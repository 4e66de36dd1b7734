#pragma once

#include <Eigen/Dense>
#include <span>
#include <utility>

#include "painmeter/nn.hpp"

namespace painmeter {

/// Ground truth for one example: the position of the true pain score within
/// the dataset's ordered category values.
struct OrdinalTarget {
  int true_index = 0;
  int categories = 0;

  Eigen::VectorXd onehot() const;
  void check() const;  // true_index in [0, C-1], C >= 2
};

/// Distance weight applied to the cross entropy: 1 + |argmax(p) - true| /
/// (C - 1). Lies in [1, 2]; equals 1 exactly when the prediction is correct.
double ordinal_weight(const ProbVector& p, const OrdinalTarget& target);

/// Distance-weighted ordinal cross entropy:
///   weight * (1/C) * (-log p[true_index])
/// with p[true_index] floored at 1e-12 inside the log.
double ordinal_loss(const ProbVector& p, const OrdinalTarget& target);

/// Gradient of the loss with respect to pre-softmax logits. The distance
/// weight is piecewise constant in the logits and is treated as a stopped
/// constant, giving weight/C * (p - onehot).
Eigen::VectorXd ordinal_loss_logit_gradient(const ProbVector& p,
                                            const OrdinalTarget& target);

/// Arithmetic mean of per-example losses over a nonempty batch.
double batch_ordinal_loss(
    std::span<const std::pair<ProbVector, OrdinalTarget>> batch);

}  // namespace painmeter

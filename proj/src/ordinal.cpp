#include "painmeter/ordinal.hpp"

#include <cmath>

#include "painmeter/errors.hpp"

namespace painmeter {

namespace {
constexpr double kProbFloor = 1e-12;
}

Eigen::VectorXd OrdinalTarget::onehot() const {
  check();
  Eigen::VectorXd y = Eigen::VectorXd::Zero(categories);
  y[true_index] = 1.0;
  return y;
}

void OrdinalTarget::check() const {
  if (categories < 2) {
    throw UsageError("ordinal target needs at least 2 categories");
  }
  if (true_index < 0 || true_index >= categories) {
    throw UsageError("ordinal target index out of range");
  }
}

double ordinal_weight(const ProbVector& p, const OrdinalTarget& target) {
  target.check();
  if (p.size() != target.categories) {
    throw UsageError("ordinal_weight: probability vector size mismatch");
  }
  const int predicted = argmax_index(p);
  const double normalized_error =
      std::abs(predicted - target.true_index) /
      static_cast<double>(target.categories - 1);
  return 1.0 + normalized_error;
}

double ordinal_loss(const ProbVector& p, const OrdinalTarget& target) {
  const double weight = ordinal_weight(p, target);
  const double p_true = std::max(p[target.true_index], kProbFloor);
  return weight / target.categories * (-std::log(p_true));
}

Eigen::VectorXd ordinal_loss_logit_gradient(const ProbVector& p,
                                            const OrdinalTarget& target) {
  const double weight = ordinal_weight(p, target);
  Eigen::VectorXd grad = p;
  grad[target.true_index] -= 1.0;
  return weight / target.categories * grad;
}

double batch_ordinal_loss(
    std::span<const std::pair<ProbVector, OrdinalTarget>> batch) {
  if (batch.empty()) throw UsageError("batch_ordinal_loss: empty batch");
  double total = 0.0;
  for (const auto& [p, target] : batch) total += ordinal_loss(p, target);
  return total / static_cast<double>(batch.size());
}

}  // namespace painmeter

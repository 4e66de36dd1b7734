#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <span>
#include <vector>

#include "painmeter/nn.hpp"

namespace painmeter {

/// Rows are true categories, columns predicted categories.
struct ConfusionMatrix {
  Eigen::MatrixXi counts;

  int categories() const { return static_cast<int>(counts.rows()); }
  long total() const;
  long trace() const;
  double accuracy() const { return static_cast<double>(trace()) / total(); }
};

ConfusionMatrix confusion(std::span<const int> predictions,
                          std::span<const int> truths, int categories);

/// Histogram of |prediction - truth| over distances 0..C-1.
std::vector<long> ape_histogram(std::span<const int> predictions,
                                std::span<const int> truths, int categories);

struct ExpectedScoreFit {
  /// (expected predicted score, true score) per example; expected scores are
  /// rounded to one decimal.
  std::vector<std::pair<double, double>> pairs;
  double r2 = 0.0;
  bool defined = true;  // false when the truths have zero variance
};

/// Expected predicted score sum_c category_values[c] * p[c] against the true
/// scores, with the coefficient of determination of the identity fit.
ExpectedScoreFit expected_score_r2(std::span<const ProbVector> probs,
                                   std::span<const int> truth_indices,
                                   std::span<const int> category_values);

void save_confusion(const ConfusionMatrix& matrix,
                    const std::filesystem::path& path);
void save_ape_histogram(std::span<const long> histogram,
                        const std::filesystem::path& path);
void save_expected_scores(const ExpectedScoreFit& fit,
                          const std::filesystem::path& path);

}  // namespace painmeter

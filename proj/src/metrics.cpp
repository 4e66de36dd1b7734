#include "painmeter/metrics.hpp"

#include <cmath>
#include <fstream>

#include "painmeter/errors.hpp"

namespace painmeter {

long ConfusionMatrix::total() const {
  long n = 0;
  for (Eigen::Index r = 0; r < counts.rows(); ++r) {
    for (Eigen::Index c = 0; c < counts.cols(); ++c) n += counts(r, c);
  }
  return n;
}

long ConfusionMatrix::trace() const {
  long n = 0;
  for (Eigen::Index i = 0; i < counts.rows(); ++i) n += counts(i, i);
  return n;
}

namespace {

void check_labels(std::span<const int> predictions, std::span<const int> truths,
                  int categories) {
  if (predictions.size() != truths.size() || predictions.empty()) {
    throw UsageError("metrics: prediction/truth size mismatch");
  }
  if (categories < 2) throw UsageError("metrics: categories < 2");
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] < 0 || predictions[i] >= categories ||
        truths[i] < 0 || truths[i] >= categories) {
      throw UsageError("metrics: label out of range at index " +
                       std::to_string(i));
    }
  }
}

}  // namespace

ConfusionMatrix confusion(std::span<const int> predictions,
                          std::span<const int> truths, int categories) {
  check_labels(predictions, truths, categories);
  ConfusionMatrix matrix;
  matrix.counts = Eigen::MatrixXi::Zero(categories, categories);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    ++matrix.counts(truths[i], predictions[i]);
  }
  return matrix;
}

std::vector<long> ape_histogram(std::span<const int> predictions,
                                std::span<const int> truths, int categories) {
  check_labels(predictions, truths, categories);
  std::vector<long> histogram(categories, 0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    ++histogram[std::abs(predictions[i] - truths[i])];
  }
  return histogram;
}

ExpectedScoreFit expected_score_r2(std::span<const ProbVector> probs,
                                   std::span<const int> truth_indices,
                                   std::span<const int> category_values) {
  if (probs.size() != truth_indices.size() || probs.empty()) {
    throw UsageError("expected_score_r2: size mismatch");
  }
  const int c = static_cast<int>(category_values.size());
  ExpectedScoreFit fit;
  fit.pairs.reserve(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != c) {
      throw UsageError("expected_score_r2: probability length mismatch");
    }
    double expected = 0.0;
    for (int k = 0; k < c; ++k) expected += category_values[k] * probs[i][k];
    expected = std::round(expected * 10.0) / 10.0;  // one-decimal precision
    const int t = truth_indices[i];
    if (t < 0 || t >= c) throw UsageError("expected_score_r2: bad truth index");
    fit.pairs.push_back({expected, static_cast<double>(category_values[t])});
  }

  double truth_mean = 0.0;
  for (const auto& [e, t] : fit.pairs) truth_mean += t;
  truth_mean /= static_cast<double>(fit.pairs.size());
  double ss_res = 0.0, ss_tot = 0.0;
  for (const auto& [e, t] : fit.pairs) {
    ss_res += (t - e) * (t - e);
    ss_tot += (t - truth_mean) * (t - truth_mean);
  }
  if (ss_tot <= 0.0) {
    fit.defined = false;
    fit.r2 = 0.0;
  } else {
    fit.r2 = 1.0 - ss_res / ss_tot;
  }
  return fit;
}

void save_confusion(const ConfusionMatrix& matrix,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write confusion matrix " + path.string());
  for (Eigen::Index r = 0; r < matrix.counts.rows(); ++r) {
    for (Eigen::Index c = 0; c < matrix.counts.cols(); ++c) {
      if (c) out << '\t';
      out << matrix.counts(r, c);
    }
    out << '\n';
  }
}

void save_ape_histogram(std::span<const long> histogram,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write error histogram " + path.string());
  out << "absolute_error\tcount\n";
  for (std::size_t d = 0; d < histogram.size(); ++d) {
    out << d << '\t' << histogram[d] << '\n';
  }
}

void save_expected_scores(const ExpectedScoreFit& fit,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write expected scores " + path.string());
  out << "expected_score\ttrue_score\n";
  for (const auto& [e, t] : fit.pairs) out << e << '\t' << t << '\n';
  out << "# r2=" << (fit.defined ? std::to_string(fit.r2) : "undefined")
      << '\n';
}

}  // namespace painmeter

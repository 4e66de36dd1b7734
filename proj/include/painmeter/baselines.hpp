#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

#include "painmeter/nn.hpp"
#include "painmeter/pipeline.hpp"

namespace painmeter {

inline constexpr int kDefaultFftBins = 64;

/// Pearson correlation of two equal-length signals. Pairs involving a
/// zero-variance signal are defined as 0 and flagged degenerate.
double pearson(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
               bool* degenerate = nullptr);

struct PearsonPairs {
  Eigen::VectorXd r;                    // upper-triangle order (0,1),(0,2),...
  std::vector<std::uint8_t> degenerate;
  int degenerate_count() const;
};
/// Pairwise correlations between all channel rows of a slice.
PearsonPairs pearson_pairs(const Eigen::MatrixXd& slice_values);

/// Hand-crafted features for the logistic-regression baseline: per-channel
/// spectral magnitudes plus pairwise channel correlations.
struct FeatureVector {
  Eigen::VectorXd fft_block;   // channels x bins, channel-major
  Eigen::VectorXd corr_block;  // N(N-1)/2 correlations
  Eigen::VectorXd concat() const;
};

FeatureVector slice_features(const SliceTensor& slice,
                             int fft_bins = kDefaultFftBins);
/// One feature row per slice.
Eigen::MatrixXd feature_matrix(std::span<const SliceTensor> slices,
                               int fft_bins = kDefaultFftBins);

/// Per-feature standardization fitted on training rows.
struct FeatureScaler {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
  Eigen::MatrixXd apply(const Eigen::MatrixXd& rows) const;
};
FeatureScaler fit_feature_scaler(const Eigen::MatrixXd& training_rows);

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

struct LogisticOptions {
  double tolerance = 1e-8;  // stop when the gradient inf-norm drops below
  int max_iterations = 20000;
};

struct LogisticParams {
  Eigen::MatrixXd weight;     // categories x features
  Eigen::VectorXd intercept;  // categories
  int categories() const { return static_cast<int>(weight.rows()); }
};

/// Multinomial logistic regression fitted by gradient descent with
/// backtracking line search. L2 of strength `l2` applies to weights only;
/// intercepts are free.
LogisticParams logistic_train(const Eigen::MatrixXd& X,
                              const std::vector<int>& labels, int categories,
                              double l2,
                              const LogisticOptions& options = {});

Eigen::MatrixXd logistic_predict_proba(const LogisticParams& params,
                                       const Eigen::MatrixXd& X);
std::vector<int> logistic_predict(const LogisticParams& params,
                                  const Eigen::MatrixXd& X);

/// Two-class sigmoid route: P(Y=1|x) = 1 / (1 + exp(-(w0 + w.x))).
struct BinaryLogistic {
  Eigen::VectorXd weights;
  double intercept = 0.0;
  double predict(const Eigen::VectorXd& x) const;
};
/// Fits the sigmoid form directly. The L2 strength is scaled so the optimum
/// coincides with the multinomial route at C=2.
BinaryLogistic logistic_train_binary(const Eigen::MatrixXd& X,
                                     const std::vector<int>& labels01,
                                     double l2,
                                     const LogisticOptions& options = {});
/// Sigmoid form implied by a fitted two-class multinomial model.
BinaryLogistic binary_sigmoid_form(const LogisticParams& params);

// ---------------------------------------------------------------------------
// MLP baseline
// ---------------------------------------------------------------------------

/// Dense-only network over the flattened slice: three hidden ReLU layers
/// (256/128/64 by default) plus the softmax output layer.
ModelParams mlp_build(int input_length, int categories, std::uint64_t seed,
                      std::vector<int> hidden = {256, 128, 64});

}  // namespace painmeter

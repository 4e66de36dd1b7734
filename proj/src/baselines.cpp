#include "painmeter/baselines.hpp"

#include <cmath>

#include "painmeter/errors.hpp"
#include "painmeter/fft.hpp"

namespace painmeter {

double pearson(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
               bool* degenerate) {
  if (x.size() != y.size() || x.size() < 2) {
    throw UsageError("pearson: signals must share a length >= 2");
  }
  const double n = static_cast<double>(x.size());
  const double mx = x.mean();
  const double my = y.mean();
  const Eigen::ArrayXd dx = x.array() - mx;
  const Eigen::ArrayXd dy = y.array() - my;
  const double vx = dx.square().sum() / n;
  const double vy = dy.square().sum() / n;
  if (degenerate) *degenerate = false;
  if (vx <= 0.0 || vy <= 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  const double cov = (dx * dy).sum() / n;
  return cov / std::sqrt(vx * vy);
}

int PearsonPairs::degenerate_count() const {
  int n = 0;
  for (std::uint8_t d : degenerate) n += d;
  return n;
}

PearsonPairs pearson_pairs(const Eigen::MatrixXd& slice_values) {
  const Eigen::Index channels = slice_values.rows();
  PearsonPairs out;
  out.r.resize(channels * (channels - 1) / 2);
  out.degenerate.resize(out.r.size(), 0);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < channels; ++i) {
    for (Eigen::Index j = i + 1; j < channels; ++j) {
      bool degenerate = false;
      out.r[k] = pearson(slice_values.row(i), slice_values.row(j),
                         &degenerate);
      out.degenerate[k] = degenerate ? 1 : 0;
      ++k;
    }
  }
  return out;
}

Eigen::VectorXd FeatureVector::concat() const {
  Eigen::VectorXd v(fft_block.size() + corr_block.size());
  v << fft_block, corr_block;
  return v;
}

FeatureVector slice_features(const SliceTensor& slice, int fft_bins) {
  const Eigen::Index channels = slice.values.rows();
  FeatureVector f;
  f.fft_block.resize(channels * fft_bins);
  for (Eigen::Index c = 0; c < channels; ++c) {
    f.fft_block.segment(c * fft_bins, fft_bins) =
        fft_magnitudes(slice.values.row(c), fft_bins);
  }
  f.corr_block = pearson_pairs(slice.values).r;
  return f;
}

Eigen::MatrixXd feature_matrix(std::span<const SliceTensor> slices,
                               int fft_bins) {
  if (slices.empty()) throw UsageError("feature_matrix: no slices");
  const FeatureVector first = slice_features(slices.front(), fft_bins);
  const Eigen::Index dim = first.concat().size();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(slices.size()), dim);
  X.row(0) = first.concat();
  for (std::size_t i = 1; i < slices.size(); ++i) {
    X.row(static_cast<Eigen::Index>(i)) =
        slice_features(slices[i], fft_bins).concat();
  }
  return X;
}

Eigen::MatrixXd FeatureScaler::apply(const Eigen::MatrixXd& rows) const {
  if (rows.cols() != mean.size()) {
    throw UsageError("feature scaler dimension mismatch");
  }
  return (rows.rowwise() - mean.transpose()).array().rowwise() /
         std.transpose().array();
}

FeatureScaler fit_feature_scaler(const Eigen::MatrixXd& training_rows) {
  if (training_rows.rows() < 1) {
    throw UsageError("fit_feature_scaler: no rows");
  }
  FeatureScaler s;
  s.mean = training_rows.colwise().mean();
  const Eigen::ArrayXd var =
      (training_rows.rowwise() - s.mean.transpose()).array().square()
          .colwise()
          .mean();
  s.std = var.sqrt().max(1e-8).matrix();
  return s;
}

// ---------------------------------------------------------------------------
// Logistic regression
// ---------------------------------------------------------------------------

namespace {

void check_features_finite(const Eigen::MatrixXd& X) {
  if (!X.allFinite()) {
    throw DataError("logistic regression: non-finite feature values");
  }
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double shift = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - shift).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  return p;
}

/// Generic gradient descent with Armijo backtracking on a convex objective.
/// `eval` fills the gradient and returns the objective at `theta`.
template <typename Eval>
void descend(Eigen::VectorXd& theta, const Eval& eval,
             const LogisticOptions& options) {
  Eigen::VectorXd grad(theta.size());
  double value = eval(theta, grad);
  double step = 1.0;
  for (int it = 0; it < options.max_iterations; ++it) {
    const double gnorm = grad.lpNorm<Eigen::Infinity>();
    if (gnorm < options.tolerance) break;
    const double g2 = grad.squaredNorm();
    step = std::min(step * 2.0, 1e4);
    Eigen::VectorXd trial_grad(theta.size());
    for (;;) {
      const Eigen::VectorXd trial = theta - step * grad;
      const double trial_value = eval(trial, trial_grad);
      if (trial_value <= value - 0.5 * step * g2 || step < 1e-18) {
        theta = trial;
        value = trial_value;
        grad = trial_grad;
        break;
      }
      step *= 0.5;
    }
  }
}

}  // namespace

LogisticParams logistic_train(const Eigen::MatrixXd& X,
                              const std::vector<int>& labels, int categories,
                              double l2, const LogisticOptions& options) {
  if (X.rows() < 1 || static_cast<std::size_t>(X.rows()) != labels.size()) {
    throw UsageError("logistic_train: feature/label size mismatch");
  }
  if (categories < 2) throw UsageError("logistic_train: categories < 2");
  check_features_finite(X);
  for (int y : labels) {
    if (y < 0 || y >= categories) {
      throw UsageError("logistic_train: label out of range");
    }
  }

  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  const Eigen::Index dim = static_cast<Eigen::Index>(categories) * (d + 1);

  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, categories);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, labels[i]) = 1.0;

  const auto unpack = [&](const Eigen::VectorXd& theta, Eigen::MatrixXd& W,
                          Eigen::VectorXd& b) {
    W = Eigen::Map<const Eigen::MatrixXd>(theta.data(), categories, d);
    b = theta.segment(static_cast<Eigen::Index>(categories) * d, categories);
  };

  const auto eval = [&](const Eigen::VectorXd& theta,
                        Eigen::VectorXd& grad) -> double {
    Eigen::MatrixXd W;
    Eigen::VectorXd b;
    unpack(theta, W, b);
    const Eigen::MatrixXd logits =
        (X * W.transpose()).rowwise() + b.transpose();
    const Eigen::MatrixXd P = softmax_rows(logits);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      loss += -std::log(std::max(P(i, labels[i]), 1e-300));
    }
    loss /= static_cast<double>(n);
    loss += 0.5 * l2 * W.squaredNorm();
    const Eigen::MatrixXd diff = P - onehot;  // n x C
    Eigen::MatrixXd gW =
        (diff.transpose() * X) / static_cast<double>(n) + l2 * W;
    Eigen::VectorXd gB = diff.colwise().mean();
    grad.resize(dim);
    Eigen::Map<Eigen::MatrixXd>(grad.data(), categories, d) = gW;
    grad.segment(static_cast<Eigen::Index>(categories) * d, categories) = gB;
    return loss;
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim);
  descend(theta, eval, options);

  LogisticParams params;
  unpack(theta, params.weight, params.intercept);
  return params;
}

Eigen::MatrixXd logistic_predict_proba(const LogisticParams& params,
                                       const Eigen::MatrixXd& X) {
  check_features_finite(X);
  const Eigen::MatrixXd logits =
      (X * params.weight.transpose()).rowwise() + params.intercept.transpose();
  return softmax_rows(logits);
}

std::vector<int> logistic_predict(const LogisticParams& params,
                                  const Eigen::MatrixXd& X) {
  const Eigen::MatrixXd P = logistic_predict_proba(params, X);
  std::vector<int> preds(P.rows());
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    preds[i] = argmax_index(P.row(i).transpose());
  }
  return preds;
}

double BinaryLogistic::predict(const Eigen::VectorXd& x) const {
  return 1.0 / (1.0 + std::exp(-(intercept + weights.dot(x))));
}

BinaryLogistic logistic_train_binary(const Eigen::MatrixXd& X,
                                     const std::vector<int>& labels01,
                                     double l2,
                                     const LogisticOptions& options) {
  if (X.rows() < 1 || static_cast<std::size_t>(X.rows()) != labels01.size()) {
    throw UsageError("logistic_train_binary: feature/label size mismatch");
  }
  check_features_finite(X);
  const Eigen::Index n = X.rows();
  const Eigen::Index d = X.cols();
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels01[i] != 0 && labels01[i] != 1) {
      throw UsageError("logistic_train_binary: labels must be 0/1");
    }
    y[i] = labels01[i];
  }
  // l2/4 on the weight difference matches the multinomial route, whose
  // penalty splits the difference symmetrically across the two rows.
  const double ridge = 0.25 * l2;

  const auto eval = [&](const Eigen::VectorXd& theta,
                        Eigen::VectorXd& grad) -> double {
    const Eigen::VectorXd w = theta.head(d);
    const double w0 = theta[d];
    const Eigen::ArrayXd z = (X * w).array() + w0;
    const Eigen::ArrayXd p = 1.0 / (1.0 + (-z).exp());
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double pi = std::min(std::max(p[i], 1e-300), 1.0 - 1e-16);
      loss += y[i] > 0.5 ? -std::log(pi) : -std::log(1.0 - pi);
    }
    loss /= static_cast<double>(n);
    loss += ridge * w.squaredNorm();
    const Eigen::VectorXd diff = (p - y.array()).matrix();
    grad.resize(d + 1);
    grad.head(d) =
        X.transpose() * diff / static_cast<double>(n) + 2.0 * ridge * w;
    grad[d] = diff.mean();
    return loss;
  };

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d + 1);
  descend(theta, eval, options);
  BinaryLogistic out;
  out.weights = theta.head(d);
  out.intercept = theta[d];
  return out;
}

BinaryLogistic binary_sigmoid_form(const LogisticParams& params) {
  if (params.categories() != 2) {
    throw UsageError("binary_sigmoid_form: model is not two-class");
  }
  BinaryLogistic out;
  out.weights = (params.weight.row(1) - params.weight.row(0)).transpose();
  out.intercept = params.intercept[1] - params.intercept[0];
  return out;
}

ModelParams mlp_build(int input_length, int categories, std::uint64_t seed,
                      std::vector<int> hidden) {
  if (input_length < 1) throw UsageError("mlp_build: input_length < 1");
  Architecture arch;
  arch.flat_input = input_length;
  arch.hidden = std::move(hidden);
  arch.categories = categories;
  arch.check();
  return init_model(arch, seed);
}

}  // namespace painmeter

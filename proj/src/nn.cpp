#include "painmeter/nn.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "painmeter/errors.hpp"
#include "painmeter/rng.hpp"

namespace painmeter {
namespace {

void require(bool cond, const char* msg) {
  if (!cond) throw UsageError(msg);
}

/// Splits [0, n) into `workers` contiguous chunks and runs fn(worker, begin,
/// end) on each, on its own thread when workers > 1.
template <typename Fn>
void parallel_chunks(int workers, int n, const Fn& fn) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const int begin = static_cast<int>(static_cast<long>(n) * w / workers);
    const int end = static_cast<int>(static_cast<long>(n) * (w + 1) / workers);
    threads.emplace_back([&fn, w, begin, end] { fn(w, begin, end); });
  }
  for (auto& t : threads) t.join();
}

/// Window patches of x in column = output position (row-major), row =
/// window entry (row-major). Shape (s*t) x ((rows-s+1)*(cols-t+1)).
Eigen::MatrixXd im2col(const Grid2D& x, int s, int t) {
  const Eigen::Index map_rows = x.rows() - s + 1;
  const Eigen::Index map_cols = x.cols() - t + 1;
  Eigen::MatrixXd patches(static_cast<Eigen::Index>(s) * t,
                          map_rows * map_cols);
  for (Eigen::Index r = 0; r < map_rows; ++r) {
    for (Eigen::Index c = 0; c < map_cols; ++c) {
      const Eigen::Index pos = r * map_cols + c;
      for (int dr = 0; dr < s; ++dr) {
        for (int dc = 0; dc < t; ++dc) {
          patches(static_cast<Eigen::Index>(dr) * t + dc, pos) =
              x(r + dr, c + dc);
        }
      }
    }
  }
  return patches;
}

void check_conv_window(const Grid2D& x, Eigen::Index s, Eigen::Index t) {
  if (s < 1 || t < 1 || s > x.rows() || t > x.cols()) {
    throw ShapeError("convolution window (" + std::to_string(s) + "x" +
                     std::to_string(t) + ") does not fit input (" +
                     std::to_string(x.rows()) + "x" +
                     std::to_string(x.cols()) + ")");
  }
}

Eigen::VectorXd flatten_row_major(const Grid2D& x) {
  Eigen::VectorXd flat(x.size());
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) flat[k++] = x(r, c);
  }
  return flat;
}

}  // namespace

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

Grid2D conv_linear(const Grid2D& x, const ConvFilter& filter) {
  const Eigen::Index s = filter.weights.rows();
  const Eigen::Index t = filter.weights.cols();
  check_conv_window(x, s, t);
  const Eigen::Index map_rows = x.rows() - s + 1;
  const Eigen::Index map_cols = x.cols() - t + 1;
  Grid2D out(map_rows, map_cols);
  for (Eigen::Index r = 0; r < map_rows; ++r) {
    for (Eigen::Index c = 0; c < map_cols; ++c) {
      out(r, c) =
          (filter.weights.array() * x.block(r, c, s, t).array()).sum() +
          filter.bias;
    }
  }
  return out;
}

Grid2D conv_forward(const Grid2D& x, const ConvFilter& filter) {
  return conv_linear(x, filter).cwiseMax(0.0);
}

ConvGrads conv_backward(const Grid2D& x, const ConvFilter& filter,
                        const Grid2D& dout) {
  const Eigen::Index s = filter.weights.rows();
  const Eigen::Index t = filter.weights.cols();
  const Grid2D pre = conv_linear(x, filter);
  if (dout.rows() != pre.rows() || dout.cols() != pre.cols()) {
    throw ShapeError("conv_backward: output gradient shape mismatch");
  }
  ConvGrads g;
  g.dweights = Grid2D::Zero(s, t);
  g.dinput = Grid2D::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    for (Eigen::Index c = 0; c < pre.cols(); ++c) {
      if (pre(r, c) <= 0.0) continue;  // ReLU gate
      const double d = dout(r, c);
      if (d == 0.0) continue;
      g.dbias += d;
      g.dweights += d * x.block(r, c, s, t);
      g.dinput.block(r, c, s, t) += d * filter.weights;
    }
  }
  return g;
}

double global_max_pool(const Grid2D& f, ArgMax2D* argmax) {
  if (f.size() == 0) throw ShapeError("global_max_pool: empty grid");
  Eigen::Index best_r = 0, best_c = 0;
  double best = f(0, 0);
  for (Eigen::Index r = 0; r < f.rows(); ++r) {
    for (Eigen::Index c = 0; c < f.cols(); ++c) {
      if (f(r, c) > best) {
        best = f(r, c);
        best_r = r;
        best_c = c;
      }
    }
  }
  if (argmax) *argmax = {best_r, best_c};
  return best;
}

Grid2D global_max_pool_backward(const Grid2D& f, double dout) {
  ArgMax2D arg;
  global_max_pool(f, &arg);
  Grid2D din = Grid2D::Zero(f.rows(), f.cols());
  din(arg.row, arg.col) = dout;
  return din;
}

Grid2D local_max_pool(const Grid2D& f, int window_rows, int window_cols,
                      int stride_rows, int stride_cols) {
  require(stride_rows >= 1 && stride_cols >= 1, "pool stride must be >= 1");
  if (window_rows < 1 || window_cols < 1 || window_rows > f.rows() ||
      window_cols > f.cols()) {
    throw ShapeError("local_max_pool: window exceeds input");
  }
  const Eigen::Index out_r = (f.rows() - window_rows) / stride_rows + 1;
  const Eigen::Index out_c = (f.cols() - window_cols) / stride_cols + 1;
  Grid2D out(out_r, out_c);
  for (Eigen::Index i = 0; i < out_r; ++i) {
    for (Eigen::Index j = 0; j < out_c; ++j) {
      out(i, j) = f.block(i * stride_rows, j * stride_cols, window_rows,
                          window_cols)
                      .maxCoeff();
    }
  }
  return out;
}

Grid2D local_max_pool_backward(const Grid2D& f, int window_rows,
                               int window_cols, int stride_rows,
                               int stride_cols, const Grid2D& dout) {
  Grid2D din = Grid2D::Zero(f.rows(), f.cols());
  for (Eigen::Index i = 0; i < dout.rows(); ++i) {
    for (Eigen::Index j = 0; j < dout.cols(); ++j) {
      // first-in-row-major tie rule, matching the forward pass
      Eigen::Index best_r = i * stride_rows, best_c = j * stride_cols;
      double best = f(best_r, best_c);
      for (int dr = 0; dr < window_rows; ++dr) {
        for (int dc = 0; dc < window_cols; ++dc) {
          const Eigen::Index r = i * stride_rows + dr;
          const Eigen::Index c = j * stride_cols + dc;
          if (f(r, c) > best) {
            best = f(r, c);
            best_r = r;
            best_c = c;
          }
        }
      }
      din(best_r, best_c) += dout(i, j);
    }
  }
  return din;
}

Eigen::VectorXd dense_forward(const Eigen::VectorXd& v,
                              const Eigen::MatrixXd& weights,
                              const Eigen::VectorXd& bias, Activation act) {
  if (weights.cols() != v.size() || weights.rows() != bias.size()) {
    throw ShapeError("dense_forward: dimension mismatch");
  }
  Eigen::VectorXd out = weights * v + bias;
  if (act == Activation::kRelu) out = out.cwiseMax(0.0);
  return out;
}

DenseGrads dense_backward(const Eigen::VectorXd& v,
                          const Eigen::MatrixXd& weights,
                          const Eigen::VectorXd& bias, Activation act,
                          const Eigen::VectorXd& dout) {
  if (dout.size() != weights.rows()) {
    throw ShapeError("dense_backward: output gradient mismatch");
  }
  Eigen::VectorXd dpre = dout;
  if (act == Activation::kRelu) {
    const Eigen::VectorXd pre = weights * v + bias;
    dpre = (pre.array() > 0.0).select(dout, 0.0);
  }
  DenseGrads g;
  g.dweights = dpre * v.transpose();
  g.dbias = dpre;
  g.dinput = weights.transpose() * dpre;
  return g;
}

std::vector<Grid2D> batchnorm_forward(const std::vector<Grid2D>& batch,
                                      const Eigen::VectorXd& gamma,
                                      const Eigen::VectorXd& beta, Mode mode,
                                      Eigen::VectorXd& running_mean,
                                      Eigen::VectorXd& running_var,
                                      BatchNormStats* stats_out) {
  if (mode == Mode::kTrain && batch.empty()) {
    throw UsageError("batchnorm_forward: empty batch in train mode");
  }
  if (batch.empty()) return {};
  const Eigen::Index features = batch.front().rows();
  require(gamma.size() == features && beta.size() == features,
          "batchnorm_forward: scale/shift size mismatch");
  for (const Grid2D& g : batch) {
    if (g.rows() != features || g.cols() != batch.front().cols()) {
      throw ShapeError("batchnorm_forward: ragged batch");
    }
  }

  BatchNormStats stats;
  if (mode == Mode::kTrain) {
    stats.mean = Eigen::VectorXd::Zero(features);
    stats.var = Eigen::VectorXd::Zero(features);
    const double count =
        static_cast<double>(batch.size()) * batch.front().cols();
    for (const Grid2D& g : batch) stats.mean += g.rowwise().sum();
    stats.mean /= count;
    for (const Grid2D& g : batch) {
      stats.var +=
          (g.colwise() - stats.mean).array().square().matrix().rowwise().sum();
    }
    stats.var /= count;
    running_mean = kBatchNormMomentum * running_mean +
                   (1.0 - kBatchNormMomentum) * stats.mean;
    running_var = kBatchNormMomentum * running_var +
                  (1.0 - kBatchNormMomentum) * stats.var;
  } else {
    require(running_mean.size() == features && running_var.size() == features,
            "batchnorm_forward: running statistics missing in infer mode");
    stats.mean = running_mean;
    stats.var = running_var;
  }
  if (stats_out) *stats_out = stats;

  const Eigen::ArrayXd inv_std =
      (stats.var.array() + kBatchNormEpsilon).sqrt().inverse();
  std::vector<Grid2D> out;
  out.reserve(batch.size());
  for (const Grid2D& g : batch) {
    Grid2D y = g;
    for (Eigen::Index r = 0; r < features; ++r) {
      y.row(r) = ((g.row(r).array() - stats.mean[r]) * inv_std[r] * gamma[r] +
                  beta[r])
                     .matrix();
    }
    out.push_back(std::move(y));
  }
  return out;
}

BatchNormGrads batchnorm_backward(const std::vector<Grid2D>& batch,
                                  const Eigen::VectorXd& gamma,
                                  const BatchNormStats& stats,
                                  const std::vector<Grid2D>& dout) {
  require(!batch.empty() && batch.size() == dout.size(),
          "batchnorm_backward: batch/gradient mismatch");
  const Eigen::Index features = batch.front().rows();
  const double count =
      static_cast<double>(batch.size()) * batch.front().cols();
  const Eigen::ArrayXd inv_std =
      (stats.var.array() + kBatchNormEpsilon).sqrt().inverse();

  BatchNormGrads g;
  g.dgamma = Eigen::VectorXd::Zero(features);
  g.dbeta = Eigen::VectorXd::Zero(features);
  Eigen::VectorXd sum_dxhat = Eigen::VectorXd::Zero(features);
  Eigen::VectorXd sum_dxhat_xhat = Eigen::VectorXd::Zero(features);

  for (std::size_t n = 0; n < batch.size(); ++n) {
    for (Eigen::Index r = 0; r < features; ++r) {
      const auto xhat =
          (batch[n].row(r).array() - stats.mean[r]) * inv_std[r];
      const auto dy = dout[n].row(r).array();
      g.dbeta[r] += dy.sum();
      g.dgamma[r] += (dy * xhat).sum();
      const auto dxhat = dy * gamma[r];
      sum_dxhat[r] += dxhat.sum();
      sum_dxhat_xhat[r] += (dxhat * xhat).sum();
    }
  }

  g.dinput.reserve(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    Grid2D dx(features, batch[n].cols());
    for (Eigen::Index r = 0; r < features; ++r) {
      const auto xhat =
          (batch[n].row(r).array() - stats.mean[r]) * inv_std[r];
      const auto dxhat = dout[n].row(r).array() * gamma[r];
      dx.row(r) = (inv_std[r] / count *
                   (count * dxhat - sum_dxhat[r] - xhat * sum_dxhat_xhat[r]))
                      .matrix();
    }
    g.dinput.push_back(std::move(dx));
  }
  return g;
}

Eigen::VectorXd dropout_mask(Eigen::Index size, double rate,
                             std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must lie in [0, 1)");
  Eigen::VectorXd mask(size);
  if (rate == 0.0) {
    mask.setOnes();
    return mask;
  }
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < size; ++i) {
    mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
  }
  return mask;
}

Eigen::VectorXd dropout(const Eigen::VectorXd& v, double rate, Mode mode,
                        std::uint64_t seed) {
  require(rate >= 0.0 && rate < 1.0, "dropout rate must lie in [0, 1)");
  if (mode == Mode::kInfer || rate == 0.0) return v;
  return v.cwiseProduct(dropout_mask(v.size(), rate, seed));
}

ProbVector softmax(const Eigen::VectorXd& logits) {
  require(logits.size() >= 1, "softmax: empty logits");
  const double shift = logits.maxCoeff();
  Eigen::ArrayXd e = (logits.array() - shift).exp();
  return (e / e.sum()).matrix();
}

bool is_prob_vector(const ProbVector& p, double tol) {
  if (p.size() == 0) return false;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0)) return false;
  }
  return std::abs(p.sum() - 1.0) <= tol;
}

int argmax_index(const Eigen::VectorXd& v) {
  require(v.size() >= 1, "argmax_index: empty vector");
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Architecture / parameters
// ---------------------------------------------------------------------------

int Architecture::penultimate_size() const {
  return dense_only() ? flat_input : conv.back().filters;
}

void Architecture::check() const {
  require(categories >= 2, "architecture: need at least 2 categories");
  if (dense_only()) {
    require(flat_input >= 1, "architecture: dense-only net needs flat_input");
    for (int h : hidden) require(h >= 1, "architecture: hidden width < 1");
    return;
  }
  require(input_channels >= 1, "architecture: input_channels < 1");
  require(conv.size() >= 2 && conv.size() <= 5,
          "architecture: conv layer count must lie in [2, 5]");
  int rows = input_channels;
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const ConvLayerSpec& spec = conv[i];
    require(spec.filters >= 1, "architecture: filter count < 1");
    require(spec.window_rows >= 1 && spec.window_cols >= 1,
            "architecture: window dims < 1");
    require(spec.window_rows <= rows,
            "architecture: window taller than layer input");
    require(spec.pool_width >= 1 && spec.pool_stride >= 1,
            "architecture: pool dims < 1");
    rows = spec.filters;
  }
  for (int h : hidden) require(h >= 1, "architecture: hidden width < 1");
}

Architecture default_cnn_architecture(int input_channels, int categories,
                                      int conv_layers, int filters) {
  Architecture arch;
  arch.input_channels = input_channels;
  arch.categories = categories;
  for (int i = 0; i < conv_layers; ++i) {
    ConvLayerSpec spec;
    spec.filters = filters;
    spec.window_rows = i == 0 ? std::min(3, input_channels) : 1;
    spec.window_cols = i == 0 ? 25 : 9;
    const bool last = i == conv_layers - 1;
    spec.pool_width = last ? 1 : 4;
    spec.pool_stride = last ? 1 : 4;
    arch.conv.push_back(spec);
  }
  arch.hidden = {64};
  arch.check();
  return arch;
}

ConvFilter ModelParams::filter(int layer, int index) const {
  const ConvLayerSpec& spec = arch.conv.at(layer);
  const ConvLayerParams& p = conv.at(layer);
  ConvFilter f;
  f.weights.resize(spec.window_rows, spec.window_cols);
  for (int r = 0; r < spec.window_rows; ++r) {
    for (int c = 0; c < spec.window_cols; ++c) {
      f.weights(r, c) = p.weight(index, r * spec.window_cols + c);
    }
  }
  f.bias = p.bias[index];
  return f;
}

void ModelParams::check() const {
  arch.check();
  require(conv.size() == arch.conv.size(),
          "model: conv layer count mismatch");
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const ConvLayerSpec& spec = arch.conv[i];
    const ConvLayerParams& p = conv[i];
    const Eigen::Index window = spec.window_rows * spec.window_cols;
    require(p.weight.rows() == spec.filters && p.weight.cols() == window,
            "model: conv weight shape mismatch");
    require(p.bias.size() == spec.filters && p.gamma.size() == spec.filters &&
                p.beta.size() == spec.filters &&
                p.running_mean.size() == spec.filters &&
                p.running_var.size() == spec.filters,
            "model: conv vector shape mismatch");
  }
  require(dense.size() == arch.hidden.size() + 1,
          "model: dense layer count mismatch");
  int in = arch.penultimate_size();
  for (std::size_t i = 0; i < dense.size(); ++i) {
    const int out = i < arch.hidden.size() ? arch.hidden[i] : arch.categories;
    require(dense[i].weight.rows() == out && dense[i].weight.cols() == in &&
                dense[i].bias.size() == out,
            "model: dense shape mismatch");
    in = out;
  }
}

ModelParams init_model(const Architecture& arch, std::uint64_t seed) {
  arch.check();
  Rng rng(derive_seed(seed, "model-init"));
  const auto he_uniform = [&rng](Eigen::MatrixXd& w, int fan_in) {
    const double limit = std::sqrt(6.0 / fan_in);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) {
        w(r, c) = rng.uniform(-limit, limit);
      }
    }
  };

  ModelParams params;
  params.arch = arch;
  for (const ConvLayerSpec& spec : arch.conv) {
    ConvLayerParams layer;
    const int window = spec.window_rows * spec.window_cols;
    layer.weight.resize(spec.filters, window);
    he_uniform(layer.weight, window);
    layer.bias = Eigen::VectorXd::Zero(spec.filters);
    layer.gamma = Eigen::VectorXd::Ones(spec.filters);
    layer.beta = Eigen::VectorXd::Zero(spec.filters);
    layer.running_mean = Eigen::VectorXd::Zero(spec.filters);
    layer.running_var = Eigen::VectorXd::Ones(spec.filters);
    params.conv.push_back(std::move(layer));
  }
  int in = arch.penultimate_size();
  for (std::size_t i = 0; i <= arch.hidden.size(); ++i) {
    const bool last = i == arch.hidden.size();
    const int out = last ? arch.categories : arch.hidden[i];
    DenseLayerParams layer;
    layer.weight.resize(out, in);
    if (last) {
      layer.weight.setZero();  // fresh model predicts the uniform distribution
    } else {
      he_uniform(layer.weight, in);
    }
    layer.bias = Eigen::VectorXd::Zero(out);
    params.dense.push_back(std::move(layer));
    in = out;
  }
  params.check();
  return params;
}

ModelGrads ModelGrads::zeros_like(const ModelParams& params) {
  ModelGrads g;
  for (const ConvLayerParams& layer : params.conv) {
    ConvLayerGrads cg;
    cg.weight = Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols());
    cg.bias = Eigen::VectorXd::Zero(layer.bias.size());
    cg.gamma = Eigen::VectorXd::Zero(layer.gamma.size());
    cg.beta = Eigen::VectorXd::Zero(layer.beta.size());
    g.conv.push_back(std::move(cg));
  }
  for (const DenseLayerParams& layer : params.dense) {
    DenseLayerGrads dg;
    dg.weight = Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols());
    dg.bias = Eigen::VectorXd::Zero(layer.bias.size());
    g.dense.push_back(std::move(dg));
  }
  return g;
}

void ModelGrads::accumulate(const ModelGrads& other) {
  require(conv.size() == other.conv.size() &&
              dense.size() == other.dense.size(),
          "ModelGrads::accumulate: shape mismatch");
  for (std::size_t i = 0; i < conv.size(); ++i) {
    conv[i].weight += other.conv[i].weight;
    conv[i].bias += other.conv[i].bias;
    conv[i].gamma += other.conv[i].gamma;
    conv[i].beta += other.conv[i].beta;
  }
  for (std::size_t i = 0; i < dense.size(); ++i) {
    dense[i].weight += other.dense[i].weight;
    dense[i].bias += other.dense[i].bias;
  }
}

void ModelGrads::scale(double factor) {
  for (auto& layer : conv) {
    layer.weight *= factor;
    layer.bias *= factor;
    layer.gamma *= factor;
    layer.beta *= factor;
  }
  for (auto& layer : dense) {
    layer.weight *= factor;
    layer.bias *= factor;
  }
}

double ModelGrads::max_abs() const {
  double m = 0.0;
  for (const auto& layer : conv) {
    m = std::max(m, layer.weight.cwiseAbs().maxCoeff());
    if (layer.bias.size()) m = std::max(m, layer.bias.cwiseAbs().maxCoeff());
    if (layer.gamma.size()) m = std::max(m, layer.gamma.cwiseAbs().maxCoeff());
    if (layer.beta.size()) m = std::max(m, layer.beta.cwiseAbs().maxCoeff());
  }
  for (const auto& layer : dense) {
    m = std::max(m, layer.weight.cwiseAbs().maxCoeff());
    if (layer.bias.size()) m = std::max(m, layer.bias.cwiseAbs().maxCoeff());
  }
  return m;
}

namespace {

template <typename MatrixFn, typename VectorFn>
void visit_param_arrays(const ModelParams& params, const MatrixFn& on_matrix,
                        const VectorFn& on_vector) {
  for (std::size_t i = 0; i < params.conv.size(); ++i) {
    on_matrix(params.conv[i].weight, i, 0);
    on_vector(params.conv[i].bias, i, 1);
    on_vector(params.conv[i].gamma, i, 2);
    on_vector(params.conv[i].beta, i, 3);
  }
  for (std::size_t i = 0; i < params.dense.size(); ++i) {
    on_matrix(params.dense[i].weight, params.conv.size() + i, 0);
    on_vector(params.dense[i].bias, params.conv.size() + i, 1);
  }
}

}  // namespace

Eigen::VectorXd flatten_parameters(const ModelParams& params) {
  std::vector<double> flat;
  visit_param_arrays(
      params,
      [&flat](const Eigen::MatrixXd& m, std::size_t, int) {
        for (Eigen::Index r = 0; r < m.rows(); ++r) {
          for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
        }
      },
      [&flat](const Eigen::VectorXd& v, std::size_t, int) {
        for (Eigen::Index i = 0; i < v.size(); ++i) flat.push_back(v[i]);
      });
  return Eigen::Map<Eigen::VectorXd>(flat.data(),
                                     static_cast<Eigen::Index>(flat.size()));
}

void unflatten_parameters(const Eigen::VectorXd& flat, ModelParams& params) {
  Eigen::Index k = 0;
  const auto take_matrix = [&flat, &k](Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[k++];
    }
  };
  const auto take_vector = [&flat, &k](Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = flat[k++];
  };
  for (auto& layer : params.conv) {
    take_matrix(layer.weight);
    take_vector(layer.bias);
    take_vector(layer.gamma);
    take_vector(layer.beta);
  }
  for (auto& layer : params.dense) {
    take_matrix(layer.weight);
    take_vector(layer.bias);
  }
  require(k == flat.size(), "unflatten_parameters: size mismatch");
}

Eigen::VectorXd flatten_gradients(const ModelGrads& grads) {
  std::vector<double> flat;
  const auto push_matrix = [&flat](const Eigen::MatrixXd& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
    }
  };
  const auto push_vector = [&flat](const Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) flat.push_back(v[i]);
  };
  for (const auto& layer : grads.conv) {
    push_matrix(layer.weight);
    push_vector(layer.bias);
    push_vector(layer.gamma);
    push_vector(layer.beta);
  }
  for (const auto& layer : grads.dense) {
    push_matrix(layer.weight);
    push_vector(layer.bias);
  }
  return Eigen::Map<Eigen::VectorXd>(flat.data(),
                                     static_cast<Eigen::Index>(flat.size()));
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace {

/// Runs one conv layer on a single example up to the pre-activation and
/// leaves the layer tape partially filled. Returns per-filter sums and
/// squared sums for batch statistics.
void conv_layer_preact(const Grid2D& input, const ConvLayerParams& p,
                       const ConvLayerSpec& spec, ConvLayerTape& tape) {
  check_conv_window(input, spec.window_rows, spec.window_cols);
  tape.input = input;
  tape.map_rows = static_cast<int>(input.rows()) - spec.window_rows + 1;
  tape.map_cols = static_cast<int>(input.cols()) - spec.window_cols + 1;
  tape.patches = im2col(input, spec.window_rows, spec.window_cols);
  tape.preact.noalias() = p.weight * tape.patches;
  tape.preact.colwise() += p.bias;
}

/// Finishes a conv layer given normalization statistics: batch-norm affine,
/// ReLU, column-wise max collapse to one row per filter, local max pooling.
void conv_layer_finish(const ConvLayerParams& p, const ConvLayerSpec& spec,
                       const BatchNormStats& stats, ConvLayerTape& tape) {
  const int filters = spec.filters;
  const int map_rows = tape.map_rows;
  const int map_cols = tape.map_cols;
  tape.stats = stats;

  tape.activated.resize(filters, tape.preact.cols());
  for (int f = 0; f < filters; ++f) {
    const double inv_std =
        1.0 / std::sqrt(stats.var[f] + kBatchNormEpsilon);
    tape.activated.row(f) =
        ((tape.preact.row(f).array() - stats.mean[f]) * inv_std * p.gamma[f] +
         p.beta[f])
            .cwiseMax(0.0)
            .matrix();
  }

  tape.collapsed.resize(filters, map_cols);
  tape.collapse_row.resize(filters, map_cols);
  for (int f = 0; f < filters; ++f) {
    for (int c = 0; c < map_cols; ++c) {
      int best_r = 0;
      double best = tape.activated(f, c);
      for (int r = 1; r < map_rows; ++r) {
        const double v = tape.activated(f, r * map_cols + c);
        if (v > best) {
          best = v;
          best_r = r;
        }
      }
      tape.collapsed(f, c) = best;
      tape.collapse_row(f, c) = best_r;
    }
  }

  if (spec.pool_width == 1 && spec.pool_stride == 1) {
    tape.output = tape.collapsed;
    tape.pool_col.resize(0, 0);
    return;
  }
  if (spec.pool_width > map_cols) {
    throw ShapeError("conv layer: pool window exceeds feature width");
  }
  const int out_c = (map_cols - spec.pool_width) / spec.pool_stride + 1;
  tape.output.resize(filters, out_c);
  tape.pool_col.resize(filters, out_c);
  for (int f = 0; f < filters; ++f) {
    for (int j = 0; j < out_c; ++j) {
      int best_c = j * spec.pool_stride;
      double best = tape.collapsed(f, best_c);
      for (int d = 1; d < spec.pool_width; ++d) {
        const int c = j * spec.pool_stride + d;
        if (tape.collapsed(f, c) > best) {
          best = tape.collapsed(f, c);
          best_c = c;
        }
      }
      tape.output(f, j) = best;
      tape.pool_col(f, j) = best_c;
    }
  }
}

void dense_head_forward(const Eigen::VectorXd& features,
                        const ModelParams& params, const ForwardOptions& opt,
                        ModelTape& tape) {
  Eigen::VectorXd current = features;
  Rng dropout_rng(opt.dropout_seed);
  tape.dense.clear();
  for (std::size_t i = 0; i < params.dense.size(); ++i) {
    const bool last = i + 1 == params.dense.size();
    DenseTape dt;
    dt.input = current;
    dt.preact = params.dense[i].weight * current + params.dense[i].bias;
    dt.output = last ? dt.preact : dt.preact.cwiseMax(0.0);
    if (!last && opt.mode == Mode::kTrain && opt.dropout_rate > 0.0) {
      dt.mask = dropout_mask(dt.output.size(), opt.dropout_rate,
                             dropout_rng.next_u64());
      dt.output = dt.output.cwiseProduct(dt.mask);
    }
    current = dt.output;
    tape.dense.push_back(std::move(dt));
  }
  tape.logits = current;
  tape.probs = softmax(current);
}

Eigen::VectorXd flatten_input_checked(const Grid2D& x,
                                      const Architecture& arch) {
  if (x.size() != arch.flat_input) {
    throw ShapeError("model_forward: flattened input size " +
                     std::to_string(x.size()) + " != expected " +
                     std::to_string(arch.flat_input));
  }
  return flatten_row_major(x);
}

}  // namespace

ProbVector model_forward(const Grid2D& x, const ModelParams& params,
                         const ForwardOptions& options, ModelTape* tape_out) {
  const Architecture& arch = params.arch;
  ModelTape local;
  ModelTape& tape = tape_out ? *tape_out : local;
  tape = ModelTape{};

  if (arch.dense_only()) {
    tape.features = flatten_input_checked(x, arch);
  } else {
    if (x.rows() != arch.input_channels) {
      throw ShapeError("model_forward: input has " + std::to_string(x.rows()) +
                       " channels, expected " +
                       std::to_string(arch.input_channels));
    }
    tape.conv.resize(arch.conv.size());
    Grid2D current = x;
    for (std::size_t l = 0; l < arch.conv.size(); ++l) {
      ConvLayerTape& lt = tape.conv[l];
      conv_layer_preact(current, params.conv[l], arch.conv[l], lt);
      BatchNormStats stats;
      if (options.mode == Mode::kInfer) {
        stats.mean = params.conv[l].running_mean;
        stats.var = params.conv[l].running_var;
      } else if (options.norm_stats) {
        stats = (*options.norm_stats)[l];
      } else {
        // batch of one: statistics from this example
        const double count = static_cast<double>(lt.preact.cols());
        stats.mean = lt.preact.rowwise().sum() / count;
        stats.var = (lt.preact.colwise() - stats.mean)
                        .array()
                        .square()
                        .matrix()
                        .rowwise()
                        .sum() /
                    count;
      }
      conv_layer_finish(params.conv[l], arch.conv[l], stats, lt);
      current = lt.output;
    }
    const ConvLayerTape& last = tape.conv.back();
    const int filters = arch.conv.back().filters;
    tape.features.resize(filters);
    tape.feature_col.resize(filters);
    for (int f = 0; f < filters; ++f) {
      int best_c = 0;
      double best = last.output(f, 0);
      for (Eigen::Index c = 1; c < last.output.cols(); ++c) {
        if (last.output(f, c) > best) {
          best = last.output(f, c);
          best_c = static_cast<int>(c);
        }
      }
      tape.features[f] = best;
      tape.feature_col[f] = best_c;
    }
  }

  dense_head_forward(tape.features, params, options, tape);
  tape.valid = true;
  return tape.probs;
}

ProbVector model_forward(const Grid2D& x, const ModelParams& params,
                         Mode mode) {
  ForwardOptions opt;
  opt.mode = mode;
  return model_forward(x, params, opt);
}

BatchForwardResult model_forward_batch(
    std::span<const Grid2D> xs, const ModelParams& params, Mode mode,
    double dropout_rate, std::span<const std::uint64_t> dropout_seeds,
    int workers) {
  BatchForwardResult result;
  model_forward_batch(xs, params, mode, dropout_rate, dropout_seeds, workers,
                      result);
  return result;
}

void model_forward_batch(std::span<const Grid2D> xs, const ModelParams& params,
                         Mode mode, double dropout_rate,
                         std::span<const std::uint64_t> dropout_seeds,
                         int workers, BatchForwardResult& result) {
  require(!xs.empty(), "model_forward_batch: empty batch");
  require(dropout_seeds.empty() || dropout_seeds.size() == xs.size(),
          "model_forward_batch: dropout seed count mismatch");
  const Architecture& arch = params.arch;
  const int n = static_cast<int>(xs.size());

  result.tapes.resize(n);
  result.stats.clear();

  if (!arch.dense_only()) {
    for (int e = 0; e < n; ++e) result.tapes[e].conv.resize(arch.conv.size());
    for (std::size_t l = 0; l < arch.conv.size(); ++l) {
      const ConvLayerSpec& spec = arch.conv[l];
      const ConvLayerParams& layer = params.conv[l];
      std::vector<Eigen::VectorXd> sums(n), sq_sums(n);
      parallel_chunks(workers, n, [&](int, int begin, int end) {
        for (int e = begin; e < end; ++e) {
          const Grid2D& input =
              l == 0 ? xs[e] : result.tapes[e].conv[l - 1].output;
          if (input.rows() != (l == 0 ? arch.input_channels
                                      : arch.conv[l - 1].filters)) {
            throw ShapeError("model_forward_batch: channel mismatch");
          }
          ConvLayerTape& lt = result.tapes[e].conv[l];
          conv_layer_preact(input, layer, spec, lt);
          sums[e] = lt.preact.rowwise().sum();
          sq_sums[e] = lt.preact.array().square().matrix().rowwise().sum();
        }
      });

      BatchNormStats stats;
      if (mode == Mode::kTrain) {
        // reduce in example order so the result is worker-count invariant
        Eigen::VectorXd total = Eigen::VectorXd::Zero(spec.filters);
        Eigen::VectorXd total_sq = Eigen::VectorXd::Zero(spec.filters);
        for (int e = 0; e < n; ++e) {
          total += sums[e];
          total_sq += sq_sums[e];
        }
        const double count = static_cast<double>(n) *
                             result.tapes[0].conv[l].preact.cols();
        stats.mean = total / count;
        stats.var = (total_sq / count - stats.mean.array().square().matrix())
                        .cwiseMax(0.0);
      } else {
        stats.mean = layer.running_mean;
        stats.var = layer.running_var;
      }
      result.stats.push_back(stats);

      parallel_chunks(workers, n, [&](int, int begin, int end) {
        for (int e = begin; e < end; ++e) {
          conv_layer_finish(layer, spec, stats, result.tapes[e].conv[l]);
        }
      });
    }
  }

  parallel_chunks(workers, n, [&](int, int begin, int end) {
    for (int e = begin; e < end; ++e) {
      ModelTape& tape = result.tapes[e];
      if (arch.dense_only()) {
        tape.features = flatten_input_checked(xs[e], arch);
      } else {
        const ConvLayerTape& last = tape.conv.back();
        const int filters = arch.conv.back().filters;
        tape.features.resize(filters);
        tape.feature_col.resize(filters);
        for (int f = 0; f < filters; ++f) {
          int best_c = 0;
          double best = last.output(f, 0);
          for (Eigen::Index c = 1; c < last.output.cols(); ++c) {
            if (last.output(f, c) > best) {
              best = last.output(f, c);
              best_c = static_cast<int>(c);
            }
          }
          tape.features[f] = best;
          tape.feature_col[f] = best_c;
        }
      }
      ForwardOptions opt;
      opt.mode = mode;
      opt.dropout_rate = dropout_seeds.empty() ? 0.0 : dropout_rate;
      opt.dropout_seed = dropout_seeds.empty() ? 0 : dropout_seeds[e];
      dense_head_forward(tape.features, params, opt, tape);
      tape.valid = true;
    }
  });
}

void model_backward(const ModelTape& tape, const ModelParams& params,
                    const Eigen::VectorXd& dlogits, ModelGrads& grads) {
  if (!tape.valid) {
    throw UsageError("model_backward called without a forward pass");
  }
  require(dlogits.size() == params.arch.categories,
          "model_backward: logit gradient size mismatch");

  // dense head
  Eigen::VectorXd dcurrent = dlogits;
  for (int i = static_cast<int>(params.dense.size()) - 1; i >= 0; --i) {
    const DenseTape& dt = tape.dense[i];
    const bool last = i + 1 == static_cast<int>(params.dense.size());
    Eigen::VectorXd dpre;
    if (last) {
      dpre = dcurrent;
    } else {
      Eigen::VectorXd dout = dcurrent;
      if (dt.mask.size()) dout = dout.cwiseProduct(dt.mask);
      dpre = (dt.preact.array() > 0.0).select(dout, 0.0);
    }
    grads.dense[i].weight.noalias() += dpre * dt.input.transpose();
    grads.dense[i].bias += dpre;
    dcurrent.noalias() = params.dense[i].weight.transpose() * dpre;
  }

  if (params.arch.dense_only()) return;

  // global max pool routes the feature gradient to one column per filter
  const int last_l = static_cast<int>(params.conv.size()) - 1;
  Grid2D doutput = Grid2D::Zero(tape.conv[last_l].output.rows(),
                                tape.conv[last_l].output.cols());
  for (int f = 0; f < params.arch.conv[last_l].filters; ++f) {
    doutput(f, tape.feature_col[f]) += dcurrent[f];
  }

  for (int l = last_l; l >= 0; --l) {
    const ConvLayerSpec& spec = params.arch.conv[l];
    const ConvLayerTape& lt = tape.conv[l];
    const int filters = spec.filters;
    const int map_cols = lt.map_cols;

    // local max pool
    Grid2D dcollapsed;
    if (lt.pool_col.size() == 0) {
      dcollapsed = doutput;
    } else {
      dcollapsed = Grid2D::Zero(filters, map_cols);
      for (int f = 0; f < filters; ++f) {
        for (Eigen::Index j = 0; j < doutput.cols(); ++j) {
          dcollapsed(f, lt.pool_col(f, j)) += doutput(f, j);
        }
      }
    }

    // row collapse
    Eigen::MatrixXd dactivated =
        Eigen::MatrixXd::Zero(filters, lt.preact.cols());
    for (int f = 0; f < filters; ++f) {
      for (int c = 0; c < map_cols; ++c) {
        dactivated(f, lt.collapse_row(f, c) * map_cols + c) +=
            dcollapsed(f, c);
      }
    }

    // ReLU gate then batch-norm affine (statistics are constants)
    Eigen::MatrixXd dpreact(filters, lt.preact.cols());
    for (int f = 0; f < filters; ++f) {
      const double inv_std =
          1.0 / std::sqrt(lt.stats.var[f] + kBatchNormEpsilon);
      const auto gate = (lt.activated.row(f).array() > 0.0).cast<double>();
      const auto dnormed = dactivated.row(f).array() * gate;
      const auto xhat =
          (lt.preact.row(f).array() - lt.stats.mean[f]) * inv_std;
      grads.conv[l].gamma[f] += (dnormed * xhat).sum();
      grads.conv[l].beta[f] += dnormed.sum();
      dpreact.row(f) =
          (dnormed * params.conv[l].gamma[f] * inv_std).matrix();
    }

    // convolution
    grads.conv[l].weight.noalias() += dpreact * lt.patches.transpose();
    grads.conv[l].bias += dpreact.rowwise().sum();

    if (l == 0) break;  // input gradient of the data slice is not needed
    const Eigen::MatrixXd dpatches =
        params.conv[l].weight.transpose() * dpreact;
    doutput = Grid2D::Zero(lt.input.rows(), lt.input.cols());
    for (int r = 0; r < lt.map_rows; ++r) {
      for (int c = 0; c < map_cols; ++c) {
        const Eigen::Index pos = static_cast<Eigen::Index>(r) * map_cols + c;
        for (int dr = 0; dr < spec.window_rows; ++dr) {
          for (int dc = 0; dc < spec.window_cols; ++dc) {
            doutput(r + dr, c + dc) +=
                dpatches(static_cast<Eigen::Index>(dr) * spec.window_cols + dc,
                         pos);
          }
        }
      }
    }
  }
}

ModelGrads model_backward(const ModelTape& tape, const ModelParams& params,
                          const Eigen::VectorXd& dlogits) {
  ModelGrads grads = ModelGrads::zeros_like(params);
  model_backward(tape, params, dlogits, grads);
  return grads;
}

ModelGrads model_backward_batch(std::span<const ModelTape> tapes,
                                const ModelParams& params,
                                std::span<const Eigen::VectorXd> dlogits,
                                int workers) {
  require(tapes.size() == dlogits.size() && !tapes.empty(),
          "model_backward_batch: size mismatch");
  const int n = static_cast<int>(tapes.size());
  workers = std::max(1, std::min(workers, n));
  std::vector<ModelGrads> partial(workers);
  parallel_chunks(workers, n, [&](int w, int begin, int end) {
    partial[w] = ModelGrads::zeros_like(params);
    for (int e = begin; e < end; ++e) {
      model_backward(tapes[e], params, dlogits[e], partial[w]);
    }
  });
  ModelGrads total = std::move(partial[0]);
  for (int w = 1; w < workers; ++w) total.accumulate(partial[w]);
  return total;
}

void update_running_stats(ModelParams& params,
                          const std::vector<BatchNormStats>& observed,
                          double momentum) {
  require(observed.size() == params.conv.size(),
          "update_running_stats: layer count mismatch");
  for (std::size_t l = 0; l < params.conv.size(); ++l) {
    params.conv[l].running_mean = momentum * params.conv[l].running_mean +
                                  (1.0 - momentum) * observed[l].mean;
    params.conv[l].running_var = momentum * params.conv[l].running_var +
                                 (1.0 - momentum) * observed[l].var;
  }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

AdamState AdamState::init(const ModelParams& params, const AdamConfig& config) {
  AdamState state;
  state.first_moment = ModelGrads::zeros_like(params);
  state.second_moment = ModelGrads::zeros_like(params);
  state.step = 0;
  state.config = config;
  return state;
}

namespace {

template <typename Array>
void adam_update_array(Array& param, const Array& grad, Array& m, Array& v,
                       const AdamConfig& cfg, double bias1, double bias2) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = (cfg.beta2 * v.array() + (1.0 - cfg.beta2) * grad.array().square())
          .matrix();
  const auto m_hat = m.array() / bias1;
  const auto v_hat = v.array() / bias2;
  param = (param.array() - cfg.learning_rate * m_hat /
                               (v_hat.sqrt() + cfg.epsilon))
              .matrix();
}

}  // namespace

void adam_step(ModelParams& params, const ModelGrads& grads, AdamState& state) {
  require(grads.conv.size() == params.conv.size() &&
              grads.dense.size() == params.dense.size(),
          "adam_step: gradient shape mismatch");
  state.step += 1;
  const AdamConfig& cfg = state.config;
  const double bias1 = 1.0 - std::pow(cfg.beta1, state.step);
  const double bias2 = 1.0 - std::pow(cfg.beta2, state.step);
  for (std::size_t i = 0; i < params.conv.size(); ++i) {
    adam_update_array(params.conv[i].weight, grads.conv[i].weight,
                      state.first_moment.conv[i].weight,
                      state.second_moment.conv[i].weight, cfg, bias1, bias2);
    adam_update_array(params.conv[i].bias, grads.conv[i].bias,
                      state.first_moment.conv[i].bias,
                      state.second_moment.conv[i].bias, cfg, bias1, bias2);
    adam_update_array(params.conv[i].gamma, grads.conv[i].gamma,
                      state.first_moment.conv[i].gamma,
                      state.second_moment.conv[i].gamma, cfg, bias1, bias2);
    adam_update_array(params.conv[i].beta, grads.conv[i].beta,
                      state.first_moment.conv[i].beta,
                      state.second_moment.conv[i].beta, cfg, bias1, bias2);
  }
  for (std::size_t i = 0; i < params.dense.size(); ++i) {
    adam_update_array(params.dense[i].weight, grads.dense[i].weight,
                      state.first_moment.dense[i].weight,
                      state.second_moment.dense[i].weight, cfg, bias1, bias2);
    adam_update_array(params.dense[i].bias, grads.dense[i].bias,
                      state.first_moment.dense[i].bias,
                      state.second_moment.dense[i].bias, cfg, bias1, bias2);
  }
}

}  // namespace painmeter

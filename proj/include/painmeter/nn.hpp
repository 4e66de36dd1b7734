#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <vector>

namespace painmeter {

/// Dense rows x cols value grid; the working tensor type throughout.
using Grid2D = Eigen::MatrixXd;
/// Softmax output: one probability per category, summing to 1.
using ProbVector = Eigen::VectorXd;

enum class Mode { kTrain, kInfer };
enum class Activation { kNone, kRelu };

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// One convolution filter: an s x t weight window plus a scalar bias.
struct ConvFilter {
  Grid2D weights;
  double bias = 0.0;
};

/// Valid cross-correlation of the filter window over the input, no
/// activation. Output shape (rows-s+1) x (cols-t+1).
Grid2D conv_linear(const Grid2D& x, const ConvFilter& filter);

/// conv_linear followed by elementwise ReLU.
Grid2D conv_forward(const Grid2D& x, const ConvFilter& filter);

struct ConvGrads {
  Grid2D dweights;
  double dbias = 0.0;
  Grid2D dinput;
};
/// Gradients of conv_forward (ReLU included) given the output gradient.
ConvGrads conv_backward(const Grid2D& x, const ConvFilter& filter,
                        const Grid2D& dout);

struct ArgMax2D {
  Eigen::Index row = 0;
  Eigen::Index col = 0;
};
/// Maximum entry of the grid. Ties resolve to the first position in
/// row-major order; the argmax is recorded for gradient routing.
double global_max_pool(const Grid2D& f, ArgMax2D* argmax = nullptr);
Grid2D global_max_pool_backward(const Grid2D& f, double dout);

/// Standard max pooling. Output dims: floor((in - window)/stride) + 1 per
/// axis; trailing entries that do not fill a window are dropped.
Grid2D local_max_pool(const Grid2D& f, int window_rows, int window_cols,
                      int stride_rows, int stride_cols);
Grid2D local_max_pool_backward(const Grid2D& f, int window_rows,
                               int window_cols, int stride_rows,
                               int stride_cols, const Grid2D& dout);

Eigen::VectorXd dense_forward(const Eigen::VectorXd& v,
                              const Eigen::MatrixXd& weights,
                              const Eigen::VectorXd& bias, Activation act);
struct DenseGrads {
  Eigen::MatrixXd dweights;
  Eigen::VectorXd dbias;
  Eigen::VectorXd dinput;
};
DenseGrads dense_backward(const Eigen::VectorXd& v,
                          const Eigen::MatrixXd& weights,
                          const Eigen::VectorXd& bias, Activation act,
                          const Eigen::VectorXd& dout);

/// Per-feature first and second moments used by batch normalization.
/// Feature r is grid row r; moments are taken over (batch, columns).
struct BatchNormStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd var;  // population variance
};

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.9;

/// Batch normalization over a batch of equally shaped grids.
/// Train mode standardizes each feature row by the batch moments, applies
/// scale/shift, and updates the running statistics with momentum 0.9.
/// Infer mode standardizes by the running statistics.
std::vector<Grid2D> batchnorm_forward(const std::vector<Grid2D>& batch,
                                      const Eigen::VectorXd& gamma,
                                      const Eigen::VectorXd& beta, Mode mode,
                                      Eigen::VectorXd& running_mean,
                                      Eigen::VectorXd& running_var,
                                      BatchNormStats* stats_out = nullptr);

struct BatchNormGrads {
  Eigen::VectorXd dgamma;
  Eigen::VectorXd dbeta;
  std::vector<Grid2D> dinput;
};
/// Full train-mode backward: the dependence of the batch moments on the
/// inputs is differentiated through.
BatchNormGrads batchnorm_backward(const std::vector<Grid2D>& batch,
                                  const Eigen::VectorXd& gamma,
                                  const BatchNormStats& stats,
                                  const std::vector<Grid2D>& dout);

/// Inverted dropout mask: each entry is 0 with probability `rate`, else
/// 1/(1-rate), so expectation is preserved.
Eigen::VectorXd dropout_mask(Eigen::Index size, double rate,
                             std::uint64_t seed);
Eigen::VectorXd dropout(const Eigen::VectorXd& v, double rate, Mode mode,
                        std::uint64_t seed);

/// Numerically stable softmax (max-subtracted).
ProbVector softmax(const Eigen::VectorXd& logits);
bool is_prob_vector(const ProbVector& p, double tol = 1e-9);

/// First index attaining the maximum.
int argmax_index(const Eigen::VectorXd& v);

// ---------------------------------------------------------------------------
// Model family: a stack of conv/batch-norm/ReLU/max-pool layers feeding a
// per-filter global max pool and a dense softmax head, or a dense-only net
// over the flattened input when no conv layers are configured.
//
// Each conv layer applies its filter bank to the incoming grid, normalizes
// and rectifies the per-filter maps, reduces each map to a single row by a
// column-wise max over the map's rows, and stacks those rows so the next
// layer sees a (filters x time) grid. Local max pooling over time runs
// between conv layers.
// ---------------------------------------------------------------------------

struct ConvLayerSpec {
  int filters = 0;
  int window_rows = 0;  // s
  int window_cols = 0;  // t
  int pool_width = 1;   // 1 = no pooling after this layer
  int pool_stride = 1;
};

struct Architecture {
  int input_channels = 0;  // conv nets: rows of the input grid
  int flat_input = 0;      // dense-only nets: flattened input length
  std::vector<ConvLayerSpec> conv;
  std::vector<int> hidden;  // hidden dense widths (ReLU, dropout after each)
  int categories = 0;

  bool dense_only() const { return conv.empty(); }
  int penultimate_size() const;
  void check() const;  // throws UsageError on an invalid configuration
};

/// Default stack: `conv_layers` layers of `filters` filters each; layer 1
/// window 3x25 (clamped to the channel count), deeper layers 1x9 over the
/// (filters x time) grid; 1x4 stride-4 max pooling between conv layers;
/// one 64-unit hidden dense layer.
Architecture default_cnn_architecture(int input_channels, int categories,
                                      int conv_layers = 2, int filters = 16);

struct ConvLayerParams {
  Eigen::MatrixXd weight;  // filters x (s*t); row f is filter f, window
                           // entries in row-major order
  Eigen::VectorXd bias;
  Eigen::VectorXd gamma, beta;                // batch-norm scale/shift
  Eigen::VectorXd running_mean, running_var;  // batch-norm running stats
};
struct DenseLayerParams {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;
};

struct ModelParams {
  Architecture arch;
  std::vector<ConvLayerParams> conv;
  std::vector<DenseLayerParams> dense;

  /// Unpacked view of one convolution filter.
  ConvFilter filter(int layer, int index) const;
  void check() const;
};

/// He-style uniform initialization scaled by fan-in, deterministic in the
/// seed. The final dense layer starts at zero so a fresh model predicts the
/// uniform distribution.
ModelParams init_model(const Architecture& arch, std::uint64_t seed);

struct ConvLayerGrads {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias, gamma, beta;
};
struct DenseLayerGrads {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};
/// Gradients (or any parameter-shaped accumulator, e.g. Adam moments).
struct ModelGrads {
  std::vector<ConvLayerGrads> conv;
  std::vector<DenseLayerGrads> dense;

  static ModelGrads zeros_like(const ModelParams& params);
  void accumulate(const ModelGrads& other);
  void scale(double factor);
  double max_abs() const;
};

/// Flat parameter vector in a fixed documented order (conv layers first:
/// weight row-major, bias, gamma, beta; then dense layers: weight row-major,
/// bias). Running statistics are excluded: they are not trained.
Eigen::VectorXd flatten_parameters(const ModelParams& params);
void unflatten_parameters(const Eigen::VectorXd& flat, ModelParams& params);
Eigen::VectorXd flatten_gradients(const ModelGrads& grads);

// ---- forward / backward ----

struct ConvLayerTape {
  Grid2D input;
  Eigen::MatrixXd patches;  // im2col of input: (s*t) x positions
  Eigen::MatrixXd preact;   // filters x positions (position = r*map_cols + c)
  int map_rows = 0, map_cols = 0;
  BatchNormStats stats;      // statistics used for normalization
  Eigen::MatrixXd activated; // post batch-norm + ReLU
  Eigen::MatrixXi collapse_row;  // filters x map_cols: row of the column max
  Grid2D collapsed;              // filters x map_cols
  Eigen::MatrixXi pool_col;      // filters x pooled_cols: source column
  Grid2D output;                 // filters x pooled_cols
};
struct DenseTape {
  Eigen::VectorXd input, preact, output;
  Eigen::VectorXd mask;  // dropout mask applied after activation; empty = none
};
struct ModelTape {
  std::vector<ConvLayerTape> conv;
  std::vector<int> feature_col;  // per filter: column of the global max
  Eigen::VectorXd features;      // penultimate layer
  std::vector<DenseTape> dense;
  Eigen::VectorXd logits;
  ProbVector probs;
  bool valid = false;
};

struct ForwardOptions {
  Mode mode = Mode::kInfer;
  /// Train mode: per-conv-layer normalization statistics, usually from the
  /// surrounding batch. Null means the example is treated as a batch of one.
  const std::vector<BatchNormStats>* norm_stats = nullptr;
  double dropout_rate = 0.0;
  std::uint64_t dropout_seed = 0;
};

ProbVector model_forward(const Grid2D& x, const ModelParams& params,
                         const ForwardOptions& options,
                         ModelTape* tape = nullptr);
/// Convenience overload: infer mode uses running statistics and no dropout;
/// train mode treats the example as a batch of one, without dropout.
ProbVector model_forward(const Grid2D& x, const ModelParams& params,
                         Mode mode);

struct BatchForwardResult {
  std::vector<ModelTape> tapes;
  std::vector<BatchNormStats> stats;  // per conv layer, over the batch
};
/// Layer-synchronized batch forward. In train mode the normalization
/// statistics of each conv layer are computed over the whole batch, reduced
/// in example order (so the result is independent of the worker count), and
/// recorded as constants for the backward pass. Dropout seeds are per
/// example; pass an empty span to disable dropout.
BatchForwardResult model_forward_batch(std::span<const Grid2D> xs,
                                       const ModelParams& params, Mode mode,
                                       double dropout_rate,
                                       std::span<const std::uint64_t> dropout_seeds,
                                       int workers = 1);

/// Same, writing into a caller-held workspace so repeated steps reuse the
/// tape allocations.
void model_forward_batch(std::span<const Grid2D> xs, const ModelParams& params,
                         Mode mode, double dropout_rate,
                         std::span<const std::uint64_t> dropout_seeds,
                         int workers, BatchForwardResult& result);

/// Reverse-mode gradients for one example given the loss gradient in logit
/// space (the softmax is folded into the loss gradient). Accumulates into
/// `grads`. Throws UsageError when the tape does not hold a forward pass.
void model_backward(const ModelTape& tape, const ModelParams& params,
                    const Eigen::VectorXd& dlogits, ModelGrads& grads);
ModelGrads model_backward(const ModelTape& tape, const ModelParams& params,
                          const Eigen::VectorXd& dlogits);

/// Sum of per-example gradients, chunked over `workers` and combined in
/// ascending worker order.
ModelGrads model_backward_batch(std::span<const ModelTape> tapes,
                                const ModelParams& params,
                                std::span<const Eigen::VectorXd> dlogits,
                                int workers = 1);

/// Moves the running batch-norm statistics toward the observed batch
/// statistics: running = momentum * running + (1 - momentum) * observed.
void update_running_stats(ModelParams& params,
                          const std::vector<BatchNormStats>& observed,
                          double momentum = kBatchNormMomentum);

// ---- Adam ----

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  ModelGrads first_moment;
  ModelGrads second_moment;
  long step = 0;
  AdamConfig config;

  static AdamState init(const ModelParams& params, const AdamConfig& config);
};

/// Standard bias-corrected Adam update; increments the step counter.
void adam_step(ModelParams& params, const ModelGrads& grads, AdamState& state);

}  // namespace painmeter

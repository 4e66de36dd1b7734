#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "painmeter/nn.hpp"
#include "painmeter/ordinal.hpp"
#include "painmeter/pipeline.hpp"

namespace painmeter {

struct TrainConfig {
  int batch_size = 24;
  int max_epochs = 2000;
  double dropout_rate = 0.5;
  double seq_length_s = 15.0;
  double learning_rate = 1e-3;
  int patience_validations = 100;
  int validation_every_steps = 10;
  std::uint64_t seed = 1;
  int workers = 1;

  void check() const;
};

/// Preset with the aggressive 0.5 learning rate and 2000-epoch budget.
/// The engine default keeps Adam at 1e-3.
TrainConfig aggressive_train_config();

/// key=value config file; unknown keys are rejected.
TrainConfig load_train_config(const std::filesystem::path& path);
void save_train_config(const TrainConfig& config,
                       const std::filesystem::path& path);
/// Applies one "key=value" override (CLI flags win over file values).
void apply_config_override(TrainConfig& config, const std::string& assignment);

struct TrainReport {
  std::vector<std::pair<long, double>> loss_curve;  // (step, batch loss)
  std::vector<double> validation_curve;             // accuracy per validation
  long stop_step = 0;
  enum class StopReason { kEarlyStop, kMaxEpochs } reason = StopReason::kMaxEpochs;
  int best_validation_index = -1;
  double best_validation_accuracy = 0.0;
};

std::string_view to_string(TrainReport::StopReason reason);

/// Writes <base>_loss.tsv, <base>_validation.tsv and <base>_summary.txt.
void save_train_report(const TrainReport& report,
                       const std::filesystem::path& base);

struct TrainResult {
  ModelParams best;
  TrainReport report;
};

/// Shuffled mini-batch Adam on the batch ordinal loss. Validates every
/// validation_every_steps steps on the validation slices (inference mode,
/// slice accuracy); stops when patience_validations validations pass without
/// a strictly better accuracy, or when max_epochs is exhausted. Returns the
/// parameters snapshotted at the best validation.
TrainResult train(const ModelParams& initial,
                  std::span<const SliceTensor> train_slices,
                  std::span<const SliceTensor> val_slices,
                  const std::vector<int>& category_values,
                  const TrainConfig& config);

/// Mean-loss gradient over one batch computed by `workers` workers on equal
/// sub-batches against the same parameter snapshot: per-example gradients
/// are summed within each worker chunk, the chunk sums are combined in
/// ascending worker order, and the total is scaled by 1/batch. The batch
/// size must be divisible by the worker count.
ModelGrads parallel_gradient_step(const ModelParams& params,
                                  std::span<const Grid2D> xs,
                                  std::span<const OrdinalTarget> targets,
                                  int workers, double dropout_rate = 0.0,
                                  std::uint64_t dropout_seed_base = 0,
                                  double* batch_loss = nullptr,
                                  std::vector<BatchNormStats>* stats_out = nullptr,
                                  BatchForwardResult* workspace = nullptr);

struct EvalResult {
  std::vector<int> predictions;    // category indices
  std::vector<int> truth_indices;  // category indices
  std::vector<ProbVector> probs;
  double accuracy = 0.0;
};

/// Inference-mode forward per slice; accuracy is the fraction whose argmax
/// matches the true category index.
EvalResult evaluate(const ModelParams& params,
                    std::span<const SliceTensor> slices,
                    const std::vector<int>& category_values, int workers = 1);

/// Maps a pain score to its index in category_values; throws ManifestError
/// when the score is not part of the category space.
int category_index_checked(const std::vector<int>& category_values, int score);

}  // namespace painmeter

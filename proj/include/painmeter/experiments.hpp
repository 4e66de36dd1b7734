#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "painmeter/baselines.hpp"
#include "painmeter/checkpoint.hpp"
#include "painmeter/consensus.hpp"
#include "painmeter/metrics.hpp"
#include "painmeter/pipeline.hpp"
#include "painmeter/recording.hpp"
#include "painmeter/trainer.hpp"

namespace painmeter {

struct RecordingMeta {
  std::string id;
  std::string subject_id;
  int pain_score = 0;
};

/// A dataset in memory, divided into minute samples.
struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<RecordingMeta> recordings;
  std::vector<std::vector<MinuteSample>> minutes;  // [recording][minute]
  std::vector<ChannelSpec> channel_specs;

  const std::vector<int>& categories() const {
    return manifest.category_values;
  }
  int channel_count() const {
    return static_cast<int>(channel_specs.size());
  }
};

/// Loads and validates every manifest entry, splitting minutes eagerly.
LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

/// The same dataset restricted to a single channel row.
LoadedDataset single_channel_view(const LoadedDataset& data, int channel);

enum class ModelKind { kCnn, kMlp, kLogistic };
std::string_view to_string(ModelKind kind);
ModelKind model_kind_from_string(std::string_view text);

enum class ConsensusGranularity { kRecording, kMinute };

struct RunOptions {
  ModelKind model = ModelKind::kCnn;
  Protocol protocol = Protocol::kFivefoldWithinRecording;
  TrainConfig config;
  /// Conv stack override; empty uses default_cnn_architecture.
  std::vector<ConvLayerSpec> conv_spec;
  std::vector<int> hidden = {64};
  std::vector<int> mlp_hidden = {256, 128, 64};
  int consensus_k = 100;
  ConsensusGranularity granularity = ConsensusGranularity::kRecording;
  double validation_fraction = 0.1;
  double logistic_l2 = 1e-3;
  int fft_bins = kDefaultFftBins;
  /// Folds to run; empty means all folds of the protocol.
  std::vector<int> fold_subset;
  std::uint64_t eval_seed = 7;
  /// When set, per-fold artifacts and summaries are written here.
  std::filesystem::path out_dir;
};

/// Slices and units materialized for one fold, all normalization fitted on
/// the fold's training portion only.
struct FoldData {
  std::vector<SliceTensor> train, val, test;  // normalized
  Normalizer normalizer;
  std::vector<ConsensusUnit> test_units;  // point into the dataset minutes
  std::vector<int> unit_truths;           // category indices
};

FoldData materialize_fold(const LoadedDataset& data, const FoldPlan& plan,
                          int fold, double seq_length_s,
                          double validation_fraction, std::uint64_t seed,
                          ConsensusGranularity granularity);

struct FoldOutcome {
  int fold = 0;
  EvalResult test_eval;
  double slice_accuracy = 0.0;
  std::vector<int> consensus_predictions;
  std::vector<int> consensus_truths;
  std::vector<ProbVector> consensus_vote_fractions;
  double consensus_accuracy = 0.0;
  TrainReport train_report;             // CNN / MLP only
  std::optional<Checkpoint> checkpoint; // CNN / MLP only
};

struct ProtocolResult {
  Protocol protocol = Protocol::kFivefoldWithinRecording;
  ModelKind model = ModelKind::kCnn;
  std::vector<FoldOutcome> folds;
  // pooled over the folds that ran
  double slice_accuracy = 0.0;
  double consensus_accuracy = 0.0;
  ConfusionMatrix slice_confusion;
  ConfusionMatrix consensus_confusion;
  std::vector<long> slice_ape;
  ExpectedScoreFit consensus_fit;  // expected scores from vote fractions
};

/// Full cross-validation run of one model kind under one protocol:
/// per fold, train on the fold's training slices, score the test slices,
/// and vote with consensus_k random slices per test unit.
ProtocolResult run_protocol(const LoadedDataset& data,
                            const RunOptions& options);

struct MetricsReport {
  double slice_accuracy = 0.0;
  bool has_consensus = false;
  double consensus_accuracy = 0.0;
  ConfusionMatrix slice_confusion;
  ConfusionMatrix consensus_confusion;
  std::vector<long> ape;
  ExpectedScoreFit consensus_fit;
};

MetricsReport metrics_from_result(const ProtocolResult& result);
void save_metrics_report(const MetricsReport& report,
                         const std::filesystem::path& dir);

/// Scores one saved checkpoint over a dataset: slice metrics over all tiled
/// slices plus, when consensus_k > 0, recording-level consensus votes.
MetricsReport evaluate_checkpoint(const LoadedDataset& data,
                                  const Checkpoint& checkpoint,
                                  double seq_length_s, int consensus_k,
                                  std::uint64_t eval_seed, int workers = 1);

struct AblationRow {
  int channel = 0;
  std::string name;
  ChannelKind kind = ChannelKind::kPulse;
  double accuracy = 0.0;
};

/// Retrains the model from scratch on each single-channel view and reports
/// the pooled cross-validation slice accuracy, sorted descending.
std::vector<AblationRow> sensor_ablation(const LoadedDataset& data,
                                         const RunOptions& base);
void save_ablation(std::span<const AblationRow> rows,
                   const std::filesystem::path& path);

struct SweepPoint {
  double seq_length_s = 0.0;
  double slice_accuracy = 0.0;
  double consensus_accuracy = 0.0;
};

/// Full train/eval per slice length with shared seeds.
std::vector<SweepPoint> seqlen_sweep(const LoadedDataset& data,
                                     const RunOptions& base,
                                     std::span<const double> lengths);
void save_sweep(std::span<const SweepPoint> points,
                const std::filesystem::path& path);

}  // namespace painmeter

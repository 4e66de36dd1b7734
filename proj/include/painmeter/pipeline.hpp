#pragma once

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "painmeter/recording.hpp"
#include "painmeter/rng.hpp"

namespace painmeter {

/// One of the ten mutually exclusive 1-minute divisions of a recording.
struct MinuteSample {
  std::string recording_id;
  int recording_index = 0;  // position within the dataset
  int minute_index = 0;     // 0..9
  int label = 0;            // pain score
  double sample_period_ms = 15.0;
  Eigen::MatrixXd values;   // channels x timesteps_per_minute
};

/// A contiguous window of a minute sample; the unit the network classifies.
struct SliceTensor {
  Eigen::MatrixXd values;  // channels x slice timesteps
  std::string source_id;   // "<recording>/<minute>"
  int start_offset = 0;    // timesteps into the parent minute sample
  int label = 0;
};

/// Timesteps in one minute at the given sampling period (4000 at 15 ms).
int timesteps_per_minute(double sample_period_ms);
/// Timesteps in a slice of `seq_length_s` seconds (1000 at 15 s, 15 ms).
int slice_timesteps(double seq_length_s, double sample_period_ms);

inline constexpr int kMinutesPerRecording = 10;

/// Divides a recording into ten contiguous, non-overlapping minute samples.
/// Timesteps beyond the first ten minutes are dropped; shorter recordings
/// raise LengthError naming the deficit.
std::vector<MinuteSample> split_minutes(const Recording& rec,
                                        int recording_index = 0);

/// Non-overlapping slices at offsets 0, Ls, 2*Ls, ... (training layout).
std::vector<SliceTensor> extract_slices_tiled(const MinuteSample& sample,
                                              double seq_length_s);
/// k slices at uniformly random start offsets (consensus layout).
std::vector<SliceTensor> extract_slices_random(const MinuteSample& sample,
                                               double seq_length_s, int k,
                                               Rng& rng);

/// Per-channel standardization statistics, fitted on training slices only.
struct Normalizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;  // floored at 1e-8

  void apply_in_place(Eigen::MatrixXd& values) const;
  Eigen::MatrixXd apply(const Eigen::MatrixXd& values) const;
};

Normalizer fit_normalizer(std::span<const SliceTensor> training_slices);

enum class Protocol { kFivefoldWithinRecording, kLeaveOneRecordingOut };

std::string_view to_string(Protocol protocol);
Protocol protocol_from_string(std::string_view text);

/// Assignment of every minute sample to exactly one test fold.
/// Fivefold: fold i tests minutes [2i, 2i+2) of every recording.
/// Leave-one-recording-out: fold r tests all minutes of recording r.
struct FoldPlan {
  Protocol protocol = Protocol::kFivefoldWithinRecording;
  int num_folds = 0;
  std::vector<std::string> recording_ids;
  /// test_fold[r][m] = fold in which minute m of recording r is tested.
  std::vector<std::array<int, kMinutesPerRecording>> test_fold;

  bool is_test(int recording, int minute, int fold) const {
    return test_fold[recording][minute] == fold;
  }
  /// Throws unless folds are disjoint and exhaustive over all minutes.
  void check() const;
};

FoldPlan make_folds(const DatasetManifest& manifest, Protocol protocol);

void save_fold_plan(const FoldPlan& plan, const std::filesystem::path& path);
FoldPlan load_fold_plan(const std::filesystem::path& path);

}  // namespace painmeter

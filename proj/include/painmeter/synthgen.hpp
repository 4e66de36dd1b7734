#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "painmeter/recording.hpp"

namespace painmeter {

/// Strengths of the planted, label-dependent structure.
struct EffectSizes {
  double hr_base_bpm = 60.0;
  double hr_slope_bpm = 5.0;        // heart-rate increase per pain unit
  double subject_hr_sd_bpm = 5.0;   // per-subject random offset
  double recording_hr_sd_bpm = 1.0; // per-recording jitter
  double pulse_amp_slope = 0.3;     // relative amplitude increase per unit
  double pulse_degrade_prob = 0.25; // chance a pulse channel is erratic
  double burst_rate_base_per_min = 1.0;
  double burst_rate_per_min_per_unit = 2.0;
  double burst_amp = 1.2;
  double gsr_fluct_base_per_min = 2.0;
  double gsr_fluct_per_min_per_unit = 1.5;
  double noise_sd = 0.08;
  double temp_drift_sd = 0.05;      // stationary drift amplitude
};

struct SynthSpec {
  std::string name = "synth";
  int num_recordings = 4;
  int num_subjects = 1;
  std::vector<int> category_values{1, 2};
  /// Relative label frequencies, matched to category_values.
  std::vector<double> category_weights{1.0, 1.0};
  enum class Layout { kPainMeter15, kPainMeter25 };
  Layout layout = Layout::kPainMeter15;
  EffectSizes effects;
  std::uint64_t seed = 2024;
  double duration_minutes = 10.0;
  double sample_period_ms = 15.0;

  void check() const;
};

/// 15-signal layout: seven pulse sensors (temples, neck, fingertip, palm),
/// a temperature sensor at each pulse site, one palm GSR sensor.
std::vector<ChannelSpec> painmeter1_channels();
/// 25-signal layout: six pulse sensors, two temperature sensors, 3-axis
/// accelerometers and gyros at head and wrist, four force sensors, one GSR.
std::vector<ChannelSpec> painmeter2_channels();

struct PlantedRecord {
  std::string recording_id;
  std::string subject_id;
  int pain_score = 0;
  double heart_rate_bpm = 0.0;
  double subject_offset_bpm = 0.0;
  std::vector<double> burst_times_s;
  int gsr_event_count = 0;
};

struct GroundTruthLog {
  std::vector<PlantedRecord> rows;
};

void save_ground_truth(const GroundTruthLog& log,
                       const std::filesystem::path& path);

struct SynthResult {
  DatasetManifest manifest;
  GroundTruthLog log;
};

/// Generates the dataset under out_dir: one recording file per entry, a
/// manifest ("manifest.txt") and the planted-parameter log
/// ("ground_truth.tsv"). Deterministic in spec.seed.
SynthResult generate(const SynthSpec& spec,
                     const std::filesystem::path& out_dir);

/// 4 recordings from one subject, 15 channels, balanced scores {1, 2}.
SynthSpec dataset1_preset();
/// 62 recordings from 20 subjects, 25 channels, scores 0..6 with the mass
/// skewed toward score 2.
SynthSpec dataset2_preset();

}  // namespace painmeter

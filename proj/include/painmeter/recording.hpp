#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace painmeter {

enum class ChannelKind { kPulse, kTemperature, kGsr, kAccel, kGyro, kForce };

std::string_view to_string(ChannelKind kind);
ChannelKind channel_kind_from_string(std::string_view text);

/// One sensor channel of a recording device.
struct ChannelSpec {
  std::string name;       // unique within a recording
  ChannelKind kind = ChannelKind::kPulse;
  std::string placement;  // free text, e.g. "left temple"
};

/// One device session: an ordered channel list and a channels x timesteps
/// value grid, labeled with a self-reported pain score in [0, 10].
struct Recording {
  std::string id;
  std::string subject_id;
  int pain_score = 0;
  double sample_period_ms = 15.0;
  std::vector<ChannelSpec> channels;
  Eigen::MatrixXd values;  // rows follow `channels` order

  int channel_count() const { return static_cast<int>(channels.size()); }
  Eigen::Index timesteps() const { return values.cols(); }

  /// Throws UsageError/DataError/ManifestError when an invariant is broken:
  /// at least one channel and one timestep, unique channel names, a value
  /// row per channel, all values finite, pain_score in [0, 10].
  void check() const;
};

/// Describes a dataset: the ordinal category space and where its recording
/// files live. Paths are resolved relative to `base_dir` (the directory the
/// manifest file was loaded from).
struct DatasetManifest {
  std::string dataset_name;
  std::vector<int> category_values;  // sorted ascending, distinct
  struct Entry {
    std::filesystem::path path;
    std::string recording_id;  // filled once the file has been read
  };
  std::vector<Entry> recording_entries;
  std::filesystem::path base_dir;

  int num_categories() const { return static_cast<int>(category_values.size()); }
  /// Index of a pain score within category_values, or -1 when absent.
  int category_index(int score) const;
  std::filesystem::path resolve(const Entry& entry) const;
};

Recording load_recording(const std::filesystem::path& path);
void save_recording(const Recording& rec, const std::filesystem::path& path);

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& path);

/// Non-throwing dataset audit: returns one human-readable issue per problem
/// (missing file, parse failure, pain score outside the category space).
/// Empty result means every entry loads and is consistent.
std::vector<std::string> validate_manifest(const DatasetManifest& manifest);

}  // namespace painmeter

#include "painmeter/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "painmeter/errors.hpp"

namespace painmeter {

int timesteps_per_minute(double sample_period_ms) {
  if (!(sample_period_ms > 0.0)) {
    throw UsageError("sample period must be positive");
  }
  return static_cast<int>(std::llround(60000.0 / sample_period_ms));
}

int slice_timesteps(double seq_length_s, double sample_period_ms) {
  if (!(seq_length_s > 0.0)) throw UsageError("seq_length must be positive");
  return static_cast<int>(std::llround(seq_length_s * 1000.0 /
                                       sample_period_ms));
}

std::vector<MinuteSample> split_minutes(const Recording& rec,
                                        int recording_index) {
  const int per_minute = timesteps_per_minute(rec.sample_period_ms);
  const Eigen::Index needed =
      static_cast<Eigen::Index>(per_minute) * kMinutesPerRecording;
  if (rec.timesteps() < needed) {
    throw LengthError("recording '" + rec.id + "' has " +
                      std::to_string(rec.timesteps()) + " timesteps, " +
                      std::to_string(needed - rec.timesteps()) +
                      " short of the required " + std::to_string(needed));
  }
  std::vector<MinuteSample> minutes;
  minutes.reserve(kMinutesPerRecording);
  for (int m = 0; m < kMinutesPerRecording; ++m) {
    MinuteSample sample;
    sample.recording_id = rec.id;
    sample.recording_index = recording_index;
    sample.minute_index = m;
    sample.label = rec.pain_score;
    sample.sample_period_ms = rec.sample_period_ms;
    sample.values = rec.values.middleCols(
        static_cast<Eigen::Index>(m) * per_minute, per_minute);
    minutes.push_back(std::move(sample));
  }
  return minutes;
}

namespace {

SliceTensor make_slice(const MinuteSample& sample, int offset, int length) {
  SliceTensor slice;
  slice.values = sample.values.middleCols(offset, length);
  slice.source_id =
      sample.recording_id + "/" + std::to_string(sample.minute_index);
  slice.start_offset = offset;
  slice.label = sample.label;
  return slice;
}

int checked_slice_length(const MinuteSample& sample, double seq_length_s) {
  const int length = slice_timesteps(seq_length_s, sample.sample_period_ms);
  if (length > sample.values.cols()) {
    throw LengthError("slice of " + std::to_string(length) +
                      " timesteps exceeds minute sample of " +
                      std::to_string(sample.values.cols()));
  }
  return length;
}

}  // namespace

std::vector<SliceTensor> extract_slices_tiled(const MinuteSample& sample,
                                              double seq_length_s) {
  const int length = checked_slice_length(sample, seq_length_s);
  const int count = static_cast<int>(sample.values.cols()) / length;
  std::vector<SliceTensor> slices;
  slices.reserve(count);
  for (int i = 0; i < count; ++i) {
    slices.push_back(make_slice(sample, i * length, length));
  }
  return slices;
}

std::vector<SliceTensor> extract_slices_random(const MinuteSample& sample,
                                               double seq_length_s, int k,
                                               Rng& rng) {
  if (k < 1) throw UsageError("extract_slices_random: k must be >= 1");
  const int length = checked_slice_length(sample, seq_length_s);
  const int max_offset = static_cast<int>(sample.values.cols()) - length;
  std::vector<SliceTensor> slices;
  slices.reserve(k);
  for (int i = 0; i < k; ++i) {
    slices.push_back(make_slice(sample, rng.uniform_int(0, max_offset),
                                length));
  }
  return slices;
}

void Normalizer::apply_in_place(Eigen::MatrixXd& values) const {
  if (values.rows() != mean.size()) {
    throw UsageError("normalizer channel count mismatch");
  }
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    values.row(r) = (values.row(r).array() - mean[r]) / std[r];
  }
}

Eigen::MatrixXd Normalizer::apply(const Eigen::MatrixXd& values) const {
  Eigen::MatrixXd out = values;
  apply_in_place(out);
  return out;
}

Normalizer fit_normalizer(std::span<const SliceTensor> training_slices) {
  if (training_slices.empty()) {
    throw UsageError("fit_normalizer: no training slices");
  }
  const Eigen::Index channels = training_slices.front().values.rows();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(channels);
  Eigen::VectorXd sq_sum = Eigen::VectorXd::Zero(channels);
  double count = 0.0;
  for (const SliceTensor& slice : training_slices) {
    if (slice.values.rows() != channels) {
      throw UsageError("fit_normalizer: inconsistent channel counts");
    }
    sum += slice.values.rowwise().sum();
    sq_sum += slice.values.array().square().matrix().rowwise().sum();
    count += static_cast<double>(slice.values.cols());
  }
  Normalizer norm;
  norm.mean = sum / count;
  norm.std = ((sq_sum.array() / count - norm.mean.array().square())
                  .cwiseMax(0.0))
                 .sqrt()
                 .cwiseMax(1e-8)
                 .matrix();
  return norm;
}

std::string_view to_string(Protocol protocol) {
  switch (protocol) {
    case Protocol::kFivefoldWithinRecording: return "fivefold";
    case Protocol::kLeaveOneRecordingOut: return "loro";
  }
  throw UsageError("invalid protocol");
}

Protocol protocol_from_string(std::string_view text) {
  if (text == "fivefold") return Protocol::kFivefoldWithinRecording;
  if (text == "loro" || text == "leave-one-recording-out") {
    return Protocol::kLeaveOneRecordingOut;
  }
  throw UsageError("unknown protocol '" + std::string(text) +
                   "' (expected fivefold or loro)");
}

void FoldPlan::check() const {
  if (num_folds < 2) throw UsageError("fold plan needs at least 2 folds");
  if (test_fold.size() != recording_ids.size()) {
    throw UsageError("fold plan recording count mismatch");
  }
  std::vector<long> per_fold(num_folds, 0);
  for (const auto& minutes : test_fold) {
    for (int fold : minutes) {
      if (fold < 0 || fold >= num_folds) {
        throw UsageError("fold plan assigns a minute to a nonexistent fold");
      }
      ++per_fold[fold];
    }
  }
  for (long n : per_fold) {
    if (n == 0) throw UsageError("fold plan has an empty test fold");
  }
}

FoldPlan make_folds(const DatasetManifest& manifest, Protocol protocol) {
  const int recordings = static_cast<int>(manifest.recording_entries.size());
  if (recordings < 1) throw UsageError("make_folds: empty manifest");
  FoldPlan plan;
  plan.protocol = protocol;
  for (const auto& entry : manifest.recording_entries) {
    plan.recording_ids.push_back(entry.recording_id.empty()
                                     ? entry.path.string()
                                     : entry.recording_id);
  }
  plan.test_fold.resize(recordings);
  if (protocol == Protocol::kFivefoldWithinRecording) {
    plan.num_folds = 5;
    for (int r = 0; r < recordings; ++r) {
      for (int m = 0; m < kMinutesPerRecording; ++m) {
        plan.test_fold[r][m] = m / 2;
      }
    }
  } else {
    if (recordings < 2) {
      throw UsageError(
          "leave-one-recording-out requires at least 2 recordings");
    }
    plan.num_folds = recordings;
    for (int r = 0; r < recordings; ++r) plan.test_fold[r].fill(r);
  }
  plan.check();
  return plan;
}

void save_fold_plan(const FoldPlan& plan, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write fold plan " + path.string());
  out << "protocol=" << to_string(plan.protocol) << '\n';
  out << "folds=" << plan.num_folds << '\n';
  for (std::size_t r = 0; r < plan.recording_ids.size(); ++r) {
    for (int m = 0; m < kMinutesPerRecording; ++m) {
      out << plan.recording_ids[r] << '/' << m << '\t'
          << plan.test_fold[r][m] << '\n';
    }
  }
  if (!out) throw IoError("write failed for " + path.string());
}

FoldPlan load_fold_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fold plan " + path.string());
  std::string line;
  FoldPlan plan;
  if (!std::getline(in, line) || line.rfind("protocol=", 0) != 0) {
    throw FormatError("fold plan missing protocol line");
  }
  plan.protocol = protocol_from_string(line.substr(9));
  if (!std::getline(in, line) || line.rfind("folds=", 0) != 0) {
    throw FormatError("fold plan missing folds line");
  }
  plan.num_folds = std::stoi(line.substr(6));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    const auto slash = line.rfind('/', tab);
    if (tab == std::string::npos || slash == std::string::npos) {
      throw FormatError("malformed fold plan line: " + line);
    }
    const std::string rec_id = line.substr(0, slash);
    const int minute = std::stoi(line.substr(slash + 1, tab - slash - 1));
    const int fold = std::stoi(line.substr(tab + 1));
    if (plan.recording_ids.empty() || plan.recording_ids.back() != rec_id) {
      plan.recording_ids.push_back(rec_id);
      plan.test_fold.emplace_back();
      plan.test_fold.back().fill(-1);
    }
    if (minute < 0 || minute >= kMinutesPerRecording) {
      throw FormatError("fold plan minute out of range: " + line);
    }
    plan.test_fold.back()[minute] = fold;
  }
  plan.check();
  return plan;
}

}  // namespace painmeter

#include "painmeter/recording.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "painmeter/errors.hpp"

namespace painmeter {
namespace {

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw IoError("failed to format real value");
  return std::string(buf, ptr);
}

double parse_double(std::string_view text, std::string_view what) {
  double v = 0.0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc{} || ptr != end) {
    throw FormatError("unparseable real for " + std::string(what) + ": '" +
                      std::string(text) + "'");
  }
  return v;
}

int parse_int(std::string_view text, std::string_view what) {
  int v = 0;
  const char* begin = text.data();
  const char* end = begin + text.size();
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (ec != std::errc{} || ptr != end) {
    throw FormatError("unparseable integer for " + std::string(what) + ": '" +
                      std::string(text) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(line.substr(start));
      return parts;
    }
    parts.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
}

/// Reads one "key=value" header line and returns the value.
std::string expect_kv(std::istream& in, std::string_view key,
                      const std::filesystem::path& path) {
  std::string line;
  if (!std::getline(in, line)) {
    throw ManifestError("missing metadata key '" + std::string(key) + "' in " +
                        path.string());
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const std::size_t eq = line.find('=');
  if (eq == std::string::npos || line.substr(0, eq) != key) {
    throw ManifestError("expected metadata key '" + std::string(key) +
                        "' in " + path.string() + ", got '" + line + "'");
  }
  return line.substr(eq + 1);
}

void check_field_text(const std::string& text, std::string_view what) {
  if (text.find_first_of(",:\n") != std::string::npos) {
    throw UsageError(std::string(what) +
                     " may not contain ',', ':' or newline: '" + text + "'");
  }
}

}  // namespace

std::string_view to_string(ChannelKind kind) {
  switch (kind) {
    case ChannelKind::kPulse: return "pulse";
    case ChannelKind::kTemperature: return "temperature";
    case ChannelKind::kGsr: return "gsr";
    case ChannelKind::kAccel: return "accel";
    case ChannelKind::kGyro: return "gyro";
    case ChannelKind::kForce: return "force";
  }
  throw UsageError("invalid ChannelKind");
}

ChannelKind channel_kind_from_string(std::string_view text) {
  if (text == "pulse") return ChannelKind::kPulse;
  if (text == "temperature") return ChannelKind::kTemperature;
  if (text == "gsr") return ChannelKind::kGsr;
  if (text == "accel") return ChannelKind::kAccel;
  if (text == "gyro") return ChannelKind::kGyro;
  if (text == "force") return ChannelKind::kForce;
  throw FormatError("unknown channel kind '" + std::string(text) + "'");
}

void Recording::check() const {
  if (channels.empty()) throw UsageError("recording has no channels");
  if (values.rows() != channel_count()) {
    throw DataError("recording '" + id + "': " +
                    std::to_string(channels.size()) + " channel specs but " +
                    std::to_string(values.rows()) + " value rows");
  }
  if (values.cols() < 1) throw DataError("recording '" + id + "' is empty");
  if (pain_score < 0 || pain_score > 10) {
    throw ManifestError("recording '" + id + "': pain_score " +
                        std::to_string(pain_score) + " outside [0, 10]");
  }
  if (!(sample_period_ms > 0.0)) {
    throw DataError("recording '" + id + "': non-positive sample period");
  }
  std::unordered_set<std::string> names;
  for (const ChannelSpec& ch : channels) {
    if (!names.insert(ch.name).second) {
      throw DataError("recording '" + id + "': duplicate channel name '" +
                      ch.name + "'");
    }
  }
  for (Eigen::Index r = 0; r < values.rows(); ++r) {
    for (Eigen::Index c = 0; c < values.cols(); ++c) {
      if (!std::isfinite(values(r, c))) {
        throw DataError("recording '" + id + "': non-finite value at channel " +
                        std::to_string(r) + ", timestep " + std::to_string(c));
      }
    }
  }
}

int DatasetManifest::category_index(int score) const {
  const auto it =
      std::find(category_values.begin(), category_values.end(), score);
  if (it == category_values.end()) return -1;
  return static_cast<int>(it - category_values.begin());
}

std::filesystem::path DatasetManifest::resolve(const Entry& entry) const {
  if (entry.path.is_absolute() || base_dir.empty()) return entry.path;
  return base_dir / entry.path;
}

Recording load_recording(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open recording file " + path.string());

  Recording rec;
  rec.id = expect_kv(in, "id", path);
  rec.subject_id = expect_kv(in, "subject", path);
  rec.pain_score = parse_int(expect_kv(in, "pain_score", path), "pain_score");
  rec.sample_period_ms =
      parse_double(expect_kv(in, "sample_period_ms", path), "sample_period_ms");

  std::string line;
  if (!std::getline(in, line)) {
    throw FormatError("missing channel list in " + path.string());
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (std::string_view triplet : split(line, ',')) {
    const auto parts = split(triplet, ':');
    if (parts.size() != 3) {
      throw FormatError("malformed channel spec '" + std::string(triplet) +
                        "' in " + path.string());
    }
    ChannelSpec ch;
    ch.kind = channel_kind_from_string(parts[0]);
    ch.placement = std::string(parts[1]);
    ch.name = std::string(parts[2]);
    rec.channels.push_back(std::move(ch));
  }

  const int n = rec.channel_count();
  std::vector<double> flat;
  Eigen::Index timesteps = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto parts = split(line, ',');
    if (static_cast<int>(parts.size()) != n) {
      throw DataError("timestep " + std::to_string(timesteps) + " in " +
                      path.string() + " has " + std::to_string(parts.size()) +
                      " values, expected " + std::to_string(n));
    }
    for (int c = 0; c < n; ++c) {
      const double v = parse_double(parts[c], "sample value");
      if (!std::isfinite(v)) {
        throw DataError("non-finite value at channel " + std::to_string(c) +
                        ", timestep " + std::to_string(timesteps) + " in " +
                        path.string());
      }
      flat.push_back(v);
    }
    ++timesteps;
  }
  if (timesteps == 0) throw DataError("no samples in " + path.string());

  rec.values.resize(n, timesteps);
  for (Eigen::Index t = 0; t < timesteps; ++t) {
    for (int c = 0; c < n; ++c) rec.values(c, t) = flat[t * n + c];
  }
  rec.check();
  return rec;
}

void save_recording(const Recording& rec, const std::filesystem::path& path) {
  rec.check();
  check_field_text(rec.id, "recording id");
  check_field_text(rec.subject_id, "subject id");
  for (const ChannelSpec& ch : rec.channels) {
    check_field_text(ch.name, "channel name");
    check_field_text(ch.placement, "channel placement");
  }

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write recording file " + path.string());
  out << "id=" << rec.id << '\n';
  out << "subject=" << rec.subject_id << '\n';
  out << "pain_score=" << rec.pain_score << '\n';
  out << "sample_period_ms=" << format_double(rec.sample_period_ms) << '\n';
  for (std::size_t i = 0; i < rec.channels.size(); ++i) {
    const ChannelSpec& ch = rec.channels[i];
    if (i) out << ',';
    out << to_string(ch.kind) << ':' << ch.placement << ':' << ch.name;
  }
  out << '\n';
  for (Eigen::Index t = 0; t < rec.values.cols(); ++t) {
    for (Eigen::Index c = 0; c < rec.values.rows(); ++c) {
      if (c) out << ',';
      out << format_double(rec.values(c, t));
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.dataset_name = expect_kv(in, "dataset", path);
  const std::string cats = expect_kv(in, "categories", path);
  for (std::string_view part : split(cats, ',')) {
    m.category_values.push_back(parse_int(part, "category value"));
  }
  if (m.category_values.empty()) {
    throw ManifestError("manifest " + path.string() + " lists no categories");
  }
  if (!std::is_sorted(m.category_values.begin(), m.category_values.end()) ||
      std::adjacent_find(m.category_values.begin(), m.category_values.end()) !=
          m.category_values.end()) {
    throw ManifestError("manifest " + path.string() +
                        ": categories must be strictly ascending");
  }
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    m.recording_entries.push_back({std::filesystem::path(line), ""});
  }
  m.base_dir = path.parent_path();
  return m;
}

void save_manifest(const DatasetManifest& manifest,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << "dataset=" << manifest.dataset_name << '\n';
  out << "categories=";
  for (std::size_t i = 0; i < manifest.category_values.size(); ++i) {
    if (i) out << ',';
    out << manifest.category_values[i];
  }
  out << '\n';
  for (const auto& entry : manifest.recording_entries) {
    out << entry.path.string() << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::string> validate_manifest(const DatasetManifest& manifest) {
  std::vector<std::string> issues;
  for (const auto& entry : manifest.recording_entries) {
    const std::filesystem::path full = manifest.resolve(entry);
    std::error_code ec;
    if (!std::filesystem::exists(full, ec)) {
      issues.push_back("missing recording file: " + full.string());
      continue;
    }
    try {
      const Recording rec = load_recording(full);
      if (manifest.category_index(rec.pain_score) < 0) {
        issues.push_back("recording '" + rec.id + "' (" + full.string() +
                         ") has pain score " + std::to_string(rec.pain_score) +
                         " outside the manifest categories");
      }
    } catch (const Error& e) {
      issues.push_back(full.string() + ": " + e.what());
    }
  }
  return issues;
}

}  // namespace painmeter

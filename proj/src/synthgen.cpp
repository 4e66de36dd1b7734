#include "painmeter/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "painmeter/errors.hpp"
#include "painmeter/rng.hpp"

namespace painmeter {

void SynthSpec::check() const {
  if (num_recordings < 1) throw UsageError("synth: need >= 1 recording");
  if (num_subjects < 1 || num_subjects > num_recordings) {
    throw UsageError("synth: subject count must lie in [1, recordings]");
  }
  if (category_values.size() < 2) throw UsageError("synth: need >= 2 categories");
  if (category_weights.size() != category_values.size()) {
    throw UsageError("synth: weights/categories size mismatch");
  }
  for (double w : category_weights) {
    if (!(w >= 0.0)) throw UsageError("synth: negative category weight");
  }
  if (!(duration_minutes >= 10.0)) {
    throw UsageError("synth: recordings must cover at least 10 minutes");
  }
  const EffectSizes& e = effects;
  if (e.hr_slope_bpm < 0 || e.burst_rate_per_min_per_unit < 0 ||
      e.noise_sd < 0 || e.subject_hr_sd_bpm < 0) {
    throw UsageError("synth: effect sizes must be nonnegative");
  }
}

std::vector<ChannelSpec> painmeter1_channels() {
  std::vector<ChannelSpec> channels;
  const std::vector<std::pair<std::string, std::string>> pulse_sites = {
      {"pulse_temple_left", "left temple"},
      {"pulse_temple_right", "right temple"},
      {"pulse_neck_left", "left neck artery"},
      {"pulse_neck_center", "center neck artery"},
      {"pulse_neck_right", "right neck artery"},
      {"pulse_fingertip", "fingertip"},
      {"pulse_palm_wrist", "palm near wrist"},
  };
  for (const auto& [name, place] : pulse_sites) {
    channels.push_back({name, ChannelKind::kPulse, place});
  }
  for (const auto& [name, place] : pulse_sites) {
    channels.push_back({"temp_" + name.substr(6), ChannelKind::kTemperature,
                        place});
  }
  channels.push_back({"gsr_palm", ChannelKind::kGsr, "palm block"});
  return channels;
}

std::vector<ChannelSpec> painmeter2_channels() {
  std::vector<ChannelSpec> channels;
  channels.push_back({"pulse_headband_left", ChannelKind::kPulse, "left headband"});
  channels.push_back({"pulse_headband_right", ChannelKind::kPulse, "right headband"});
  channels.push_back({"pulse_neckband_left", ChannelKind::kPulse, "left neckband"});
  channels.push_back({"pulse_neckband_center", ChannelKind::kPulse, "center neckband"});
  channels.push_back({"pulse_neckband_right", ChannelKind::kPulse, "right neckband"});
  channels.push_back({"pulse_fingertip", ChannelKind::kPulse, "fingertip"});
  channels.push_back({"temp_neck", ChannelKind::kTemperature, "neck"});
  channels.push_back({"temp_fingertip", ChannelKind::kTemperature, "fingertip"});
  for (const char* axis : {"x", "y", "z"}) {
    channels.push_back({std::string("accel_head_") + axis, ChannelKind::kAccel,
                        "headband"});
  }
  for (const char* axis : {"x", "y", "z"}) {
    channels.push_back({std::string("accel_wrist_") + axis,
                        ChannelKind::kAccel, "wrist band"});
  }
  for (const char* axis : {"x", "y", "z"}) {
    channels.push_back({std::string("gyro_head_") + axis, ChannelKind::kGyro,
                        "headband"});
  }
  for (const char* axis : {"x", "y", "z"}) {
    channels.push_back({std::string("gyro_wrist_") + axis, ChannelKind::kGyro,
                        "wrist band"});
  }
  channels.push_back({"force_forehead", ChannelKind::kForce, "forehead"});
  channels.push_back({"force_neck_back", ChannelKind::kForce, "back of neck"});
  channels.push_back({"force_neck_side", ChannelKind::kForce, "side of neck"});
  channels.push_back({"force_wrist", ChannelKind::kForce, "wrist band"});
  channels.push_back({"gsr_fingers", ChannelKind::kGsr,
                      "between middle and ring fingers"});
  return channels;
}

namespace {

/// Pulse waveform over one period: systolic peak plus dicrotic bump.
double pulse_wave(double phase) {
  const double d1 = phase - 0.20;
  const double d2 = phase - 0.55;
  return std::exp(-d1 * d1 / (2.0 * 0.07 * 0.07)) +
         0.45 * std::exp(-d2 * d2 / (2.0 * 0.10 * 0.10));
}

/// Damped oscillation used for motion bursts.
double burst_wave(double dt, double width, double freq) {
  const double env = std::exp(-dt * dt / (2.0 * width * width));
  return env * std::sin(2.0 * M_PI * freq * dt);
}

/// Skin-conductance event: alpha-shaped rise and decay, peak at tau.
double gsr_bump(double dt, double tau) {
  if (dt <= 0.0) return 0.0;
  return (dt / tau) * std::exp(1.0 - dt / tau);
}

struct Burst {
  double time_s = 0.0;
  double width_s = 0.3;
  double freq_hz = 4.0;
  double amp = 1.0;
};

/// Adds `scale * burst` to a channel row around the burst center.
void add_burst(Eigen::MatrixXd& values, int channel, const Burst& burst,
               double scale, double dt_s, bool oscillate) {
  if (scale == 0.0) return;
  const int t0 = std::max(
      0, static_cast<int>((burst.time_s - 4.0 * burst.width_s) / dt_s));
  const int t1 = std::min(
      static_cast<int>(values.cols()) - 1,
      static_cast<int>((burst.time_s + 4.0 * burst.width_s) / dt_s));
  for (int t = t0; t <= t1; ++t) {
    const double dt = t * dt_s - burst.time_s;
    const double w =
        oscillate ? burst_wave(dt, burst.width_s, burst.freq_hz)
                  : std::exp(-dt * dt / (2.0 * burst.width_s * burst.width_s));
    values(channel, t) += scale * burst.amp * w;
  }
}

struct LabelPlan {
  std::vector<int> scores;       // per recording
  std::vector<int> subject_of;   // per recording
};

/// Deterministic label counts via largest-remainder rounding of the weights,
/// shuffled across recordings, with subjects assigned round-robin.
LabelPlan plan_labels(const SynthSpec& spec) {
  const int n = spec.num_recordings;
  const int c = static_cast<int>(spec.category_values.size());
  const double total_weight = std::accumulate(
      spec.category_weights.begin(), spec.category_weights.end(), 0.0);
  if (!(total_weight > 0.0)) throw UsageError("synth: zero total weight");

  std::vector<int> counts(c, 0);
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (int i = 0; i < c; ++i) {
    const double exact = n * spec.category_weights[i] / total_weight;
    counts[i] = static_cast<int>(exact);
    assigned += counts[i];
    remainders.push_back({exact - counts[i], i});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (int k = 0; assigned < n; ++k, ++assigned) {
    ++counts[remainders[k % c].second];
  }

  LabelPlan plan;
  for (int i = 0; i < c; ++i) {
    for (int k = 0; k < counts[i]; ++k) {
      plan.scores.push_back(spec.category_values[i]);
    }
  }
  Rng rng(derive_seed(spec.seed, "label-shuffle"));
  for (int i = n - 1; i > 0; --i) {
    std::swap(plan.scores[i], plan.scores[rng.uniform_int(0, i)]);
  }
  plan.subject_of.resize(n);
  for (int r = 0; r < n; ++r) plan.subject_of[r] = r % spec.num_subjects;
  return plan;
}

}  // namespace

void save_ground_truth(const GroundTruthLog& log,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write ground truth " + path.string());
  out << "recording\tsubject\tpain_score\theart_rate_bpm\tsubject_offset_bpm"
         "\tgsr_events\tburst_times_s\n";
  for (const PlantedRecord& row : log.rows) {
    out << row.recording_id << '\t' << row.subject_id << '\t'
        << row.pain_score << '\t' << row.heart_rate_bpm << '\t'
        << row.subject_offset_bpm << '\t' << row.gsr_event_count << '\t';
    for (std::size_t i = 0; i < row.burst_times_s.size(); ++i) {
      if (i) out << ';';
      out << row.burst_times_s[i];
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

SynthResult generate(const SynthSpec& spec,
                     const std::filesystem::path& out_dir) {
  spec.check();
  std::filesystem::create_directories(out_dir);

  const std::vector<ChannelSpec> channels =
      spec.layout == SynthSpec::Layout::kPainMeter15 ? painmeter1_channels()
                                                     : painmeter2_channels();
  const int n_channels = static_cast<int>(channels.size());
  const double dt_s = spec.sample_period_ms / 1000.0;
  const int timesteps = static_cast<int>(
      std::llround(spec.duration_minutes * 60.0 / dt_s));
  const double duration_s = timesteps * dt_s;
  const EffectSizes& fx = spec.effects;

  const LabelPlan labels = plan_labels(spec);

  std::vector<double> subject_offset(spec.num_subjects);
  for (int s = 0; s < spec.num_subjects; ++s) {
    Rng rng(derive_seed(spec.seed, "subject", s));
    subject_offset[s] = rng.normal(0.0, fx.subject_hr_sd_bpm);
  }

  SynthResult result;
  result.manifest.dataset_name = spec.name;
  result.manifest.category_values = spec.category_values;
  result.manifest.base_dir = out_dir;

  for (int r = 0; r < spec.num_recordings; ++r) {
    Rng rng(derive_seed(spec.seed, "recording", r));
    const int score = labels.scores[r];
    const int subject = labels.subject_of[r];

    Recording rec;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "rec_%03d", r);
    rec.id = idbuf;
    std::snprintf(idbuf, sizeof(idbuf), "subj_%02d", subject);
    rec.subject_id = idbuf;
    rec.pain_score = score;
    rec.sample_period_ms = spec.sample_period_ms;
    rec.channels = channels;
    rec.values.setZero(n_channels, timesteps);

    const double heart_rate =
        std::clamp(fx.hr_base_bpm + fx.hr_slope_bpm * score +
                       subject_offset[subject] +
                       rng.normal(0.0, fx.recording_hr_sd_bpm),
                   40.0, 160.0);
    const double period_s = 60.0 / heart_rate;
    const double base_phase = rng.uniform();

    // event processes start before t=0 so the first minutes are not
    // distributionally distinct from the rest of the recording
    const double burn_in_s = 30.0;

    // motion events; rate grows with the pain score
    const double burst_rate_per_s =
        (fx.burst_rate_base_per_min +
         fx.burst_rate_per_min_per_unit * score) /
        60.0;
    std::vector<Burst> bursts;
    for (double t : rng.poisson_times(burst_rate_per_s,
                                      duration_s + burn_in_s)) {
      Burst b;
      b.time_s = t - burn_in_s;
      b.width_s = rng.uniform(0.15, 0.4);
      b.freq_hz = rng.uniform(2.0, 6.0);
      b.amp = fx.burst_amp * rng.uniform(0.7, 1.4);
      if (b.time_s > -2.0) bursts.push_back(b);
    }

    // skin-conductance events; count grows with the pain score
    const double gsr_rate_per_s =
        (fx.gsr_fluct_base_per_min + fx.gsr_fluct_per_min_per_unit * score) /
        60.0;
    std::vector<double> gsr_events;
    for (double t : rng.poisson_times(gsr_rate_per_s,
                                      duration_s + burn_in_s)) {
      gsr_events.push_back(t - burn_in_s);
    }

    int temp_ordinal = 0;
    for (int c = 0; c < n_channels; ++c) {
      const ChannelSpec& ch = channels[c];
      switch (ch.kind) {
        case ChannelKind::kPulse: {
          const bool erratic = rng.uniform() < fx.pulse_degrade_prob;
          const double amp = (erratic ? 0.2 : 1.0) *
                             rng.uniform(0.85, 1.15) *
                             (1.0 + fx.pulse_amp_slope * score);
          const double noise = fx.noise_sd * (erratic ? 3.0 : 1.0);
          const double baseline = rng.uniform(1.95, 2.05);
          const double lag = rng.uniform(0.0, 0.05);
          for (int t = 0; t < timesteps; ++t) {
            const double phase =
                std::fmod(t * dt_s / period_s + base_phase + lag, 1.0);
            rec.values(c, t) =
                baseline + amp * pulse_wave(phase) + noise * rng.normal();
          }
          // hand-adjacent pulse sensors pick up the motion directly
          const bool near_hand = ch.placement == "fingertip" ||
                                 ch.placement == "palm near wrist";
          for (const Burst& b : bursts) {
            add_burst(rec.values, c, b, near_hand ? 1.0 : 0.15, dt_s, true);
          }
          break;
        }
        case ChannelKind::kTemperature: {
          // same baseline across recordings; drift carries no label signal
          const double baseline = 2.0 + 0.1 * temp_ordinal++;
          const double tau_s = 20.0;
          const double decay = std::exp(-dt_s / tau_s);
          const double kick =
              fx.temp_drift_sd * std::sqrt(1.0 - decay * decay);
          double drift = rng.normal(0.0, fx.temp_drift_sd);
          for (int t = 0; t < timesteps; ++t) {
            drift = drift * decay + kick * rng.normal();
            rec.values(c, t) =
                baseline + drift + 0.01 * rng.normal();
          }
          break;
        }
        case ChannelKind::kGsr: {
          const double baseline = rng.uniform(0.9, 1.1);
          for (int t = 0; t < timesteps; ++t) {
            rec.values(c, t) = baseline + 0.02 * rng.normal();
          }
          for (double event : gsr_events) {
            const double amp = rng.uniform(0.25, 0.5);
            const int t0 = static_cast<int>(event / dt_s);
            const int t1 =
                std::min(timesteps - 1, t0 + static_cast<int>(20.0 / dt_s));
            for (int t = std::max(0, t0); t <= t1; ++t) {
              rec.values(c, t) += amp * gsr_bump(t * dt_s - event, 1.5);
            }
          }
          break;
        }
        case ChannelKind::kAccel:
        case ChannelKind::kGyro: {
          const double scale = ch.kind == ChannelKind::kAccel ? 1.0 : 0.8;
          for (int t = 0; t < timesteps; ++t) {
            rec.values(c, t) = fx.noise_sd * rng.normal();
          }
          for (const Burst& b : bursts) {
            add_burst(rec.values, c, b, scale * rng.uniform(0.6, 1.0), dt_s,
                      true);
          }
          break;
        }
        case ChannelKind::kForce: {
          const double baseline = rng.uniform(0.5, 1.5);
          const double tau_s = 30.0;
          const double decay = std::exp(-dt_s / tau_s);
          const double kick = 0.1 * std::sqrt(1.0 - decay * decay);
          double drift = rng.normal(0.0, 0.1);
          for (int t = 0; t < timesteps; ++t) {
            drift = drift * decay + kick * rng.normal();
            rec.values(c, t) = baseline + drift + 0.02 * rng.normal();
          }
          for (const Burst& b : bursts) {
            add_burst(rec.values, c, b, 0.6 * rng.uniform(0.6, 1.0), dt_s,
                      false);
          }
          break;
        }
      }
    }

    char filebuf[32];
    std::snprintf(filebuf, sizeof(filebuf), "rec_%03d.txt", r);
    save_recording(rec, out_dir / filebuf);
    result.manifest.recording_entries.push_back({filebuf, rec.id});

    PlantedRecord planted;
    planted.recording_id = rec.id;
    planted.subject_id = rec.subject_id;
    planted.pain_score = score;
    planted.heart_rate_bpm = heart_rate;
    planted.subject_offset_bpm = subject_offset[subject];
    for (const Burst& b : bursts) {
      if (b.time_s >= 0.0) planted.burst_times_s.push_back(b.time_s);
    }
    for (double t : gsr_events) planted.gsr_event_count += t >= 0.0;
    result.log.rows.push_back(std::move(planted));
  }

  save_manifest(result.manifest, out_dir / "manifest.txt");
  save_ground_truth(result.log, out_dir / "ground_truth.tsv");
  return result;
}

SynthSpec dataset1_preset() {
  SynthSpec spec;
  spec.name = "synthetic-painmeter1";
  spec.num_recordings = 4;
  spec.num_subjects = 1;
  spec.category_values = {1, 2};
  spec.category_weights = {1.0, 1.0};
  spec.layout = SynthSpec::Layout::kPainMeter15;
  spec.seed = 101;
  return spec;
}

SynthSpec dataset2_preset() {
  SynthSpec spec;
  spec.name = "synthetic-painmeter2";
  spec.num_recordings = 62;
  spec.num_subjects = 20;
  spec.category_values = {0, 1, 2, 3, 4, 5, 6};
  spec.category_weights = {0.06, 0.14, 0.34, 0.16, 0.12, 0.10, 0.08};
  spec.layout = SynthSpec::Layout::kPainMeter25;
  spec.seed = 202;
  return spec;
}

}  // namespace painmeter

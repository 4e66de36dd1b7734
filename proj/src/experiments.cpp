#include "painmeter/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include "painmeter/errors.hpp"
#include "painmeter/rng.hpp"

namespace painmeter {

LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
  LoadedDataset data;
  data.manifest = load_manifest(manifest_path);
  data.recordings.reserve(data.manifest.recording_entries.size());
  data.minutes.reserve(data.manifest.recording_entries.size());
  for (std::size_t r = 0; r < data.manifest.recording_entries.size(); ++r) {
    auto& entry = data.manifest.recording_entries[r];
    const Recording rec = load_recording(data.manifest.resolve(entry));
    entry.recording_id = rec.id;
    if (data.manifest.category_index(rec.pain_score) < 0) {
      throw ManifestError("recording '" + rec.id + "' has pain score " +
                          std::to_string(rec.pain_score) +
                          " outside the manifest categories");
    }
    if (r == 0) {
      data.channel_specs = rec.channels;
    } else if (rec.channels.size() != data.channel_specs.size()) {
      throw ManifestError("recording '" + rec.id +
                          "' has an inconsistent channel count");
    }
    data.recordings.push_back({rec.id, rec.subject_id, rec.pain_score});
    data.minutes.push_back(split_minutes(rec, static_cast<int>(r)));
  }
  if (data.recordings.empty()) throw ManifestError("dataset has no recordings");
  return data;
}

LoadedDataset single_channel_view(const LoadedDataset& data, int channel) {
  if (channel < 0 || channel >= data.channel_count()) {
    throw UsageError("single_channel_view: channel out of range");
  }
  LoadedDataset view;
  view.manifest = data.manifest;
  view.recordings = data.recordings;
  view.channel_specs = {data.channel_specs[channel]};
  view.minutes.reserve(data.minutes.size());
  for (const auto& minutes : data.minutes) {
    std::vector<MinuteSample> rows;
    rows.reserve(minutes.size());
    for (const MinuteSample& m : minutes) {
      MinuteSample single = m;
      single.values = m.values.row(channel);
      rows.push_back(std::move(single));
    }
    view.minutes.push_back(std::move(rows));
  }
  return view;
}

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kCnn: return "cnn";
    case ModelKind::kMlp: return "mlp";
    case ModelKind::kLogistic: return "lr";
  }
  throw UsageError("invalid model kind");
}

ModelKind model_kind_from_string(std::string_view text) {
  if (text == "cnn") return ModelKind::kCnn;
  if (text == "mlp") return ModelKind::kMlp;
  if (text == "lr" || text == "logistic") return ModelKind::kLogistic;
  throw UsageError("unknown model kind '" + std::string(text) +
                   "' (expected cnn, mlp or lr)");
}

FoldData materialize_fold(const LoadedDataset& data, const FoldPlan& plan,
                          int fold, double seq_length_s,
                          double validation_fraction, std::uint64_t seed,
                          ConsensusGranularity granularity) {
  if (fold < 0 || fold >= plan.num_folds) {
    throw UsageError("materialize_fold: fold out of range");
  }
  FoldData out;

  std::vector<const MinuteSample*> train_minutes;
  for (std::size_t r = 0; r < data.minutes.size(); ++r) {
    ConsensusUnit recording_unit;
    for (int m = 0; m < kMinutesPerRecording; ++m) {
      const MinuteSample* minute = &data.minutes[r][m];
      if (plan.is_test(static_cast<int>(r), m, fold)) {
        if (granularity == ConsensusGranularity::kMinute) {
          out.test_units.push_back({minute});
          out.unit_truths.push_back(category_index_checked(
              data.categories(), minute->label));
        } else {
          recording_unit.push_back(minute);
        }
        for (SliceTensor& s : extract_slices_tiled(*minute, seq_length_s)) {
          out.test.push_back(std::move(s));
        }
      } else {
        train_minutes.push_back(minute);
      }
    }
    if (!recording_unit.empty()) {
      out.test_units.push_back(recording_unit);
      out.unit_truths.push_back(category_index_checked(
          data.categories(), recording_unit.front()->label));
    }
  }
  if (train_minutes.empty() || out.test.empty()) {
    throw UsageError("materialize_fold: fold has an empty split");
  }

  // hold out validation minutes from the training portion, stratified by
  // category so small validation sets still cover the label space
  Rng rng(derive_seed(seed, "validation-split", fold));
  std::map<int, std::vector<const MinuteSample*>> by_label;
  for (const MinuteSample* minute : train_minutes) {
    by_label[minute->label].push_back(minute);
  }
  std::vector<const MinuteSample*> val_minutes, kept_minutes;
  for (auto& [label, group] : by_label) {
    for (int i = static_cast<int>(group.size()) - 1; i > 0; --i) {
      std::swap(group[i], group[rng.uniform_int(0, i)]);
    }
    int val_count = static_cast<int>(
        std::ceil(validation_fraction * static_cast<double>(group.size())));
    val_count = std::clamp(val_count, group.size() > 1 ? 1 : 0,
                           static_cast<int>(group.size()) - 1);
    for (std::size_t i = 0; i < group.size(); ++i) {
      (static_cast<int>(i) < val_count ? val_minutes : kept_minutes)
          .push_back(group[i]);
    }
  }
  if (val_minutes.empty()) {
    // all groups are singletons; sacrifice one training minute
    val_minutes.push_back(kept_minutes.back());
    kept_minutes.pop_back();
  }
  if (kept_minutes.empty()) {
    throw UsageError("materialize_fold: no training minutes left");
  }
  for (const MinuteSample* minute : kept_minutes) {
    for (SliceTensor& s : extract_slices_tiled(*minute, seq_length_s)) {
      out.train.push_back(std::move(s));
    }
  }
  for (const MinuteSample* minute : val_minutes) {
    for (SliceTensor& s : extract_slices_tiled(*minute, seq_length_s)) {
      out.val.push_back(std::move(s));
    }
  }

  out.normalizer = fit_normalizer(out.train);
  for (auto* group : {&out.train, &out.val, &out.test}) {
    for (SliceTensor& slice : *group) {
      out.normalizer.apply_in_place(slice.values);
    }
  }
  return out;
}

namespace {

Architecture build_cnn_architecture(const LoadedDataset& data,
                                    const RunOptions& options) {
  if (options.conv_spec.empty()) {
    Architecture arch = default_cnn_architecture(
        data.channel_count(),
        static_cast<int>(data.categories().size()));
    arch.hidden = options.hidden;
    arch.check();
    return arch;
  }
  Architecture arch;
  arch.input_channels = data.channel_count();
  arch.categories = static_cast<int>(data.categories().size());
  arch.conv = options.conv_spec;
  if (!arch.conv.empty()) {
    arch.conv.front().window_rows =
        std::min(arch.conv.front().window_rows, arch.input_channels);
  }
  arch.hidden = options.hidden;
  arch.check();
  return arch;
}

FoldOutcome run_fold_network(const LoadedDataset& data, const FoldData& fold,
                             int fold_index, const RunOptions& options) {
  const std::vector<int>& categories = data.categories();
  ModelParams initial;
  if (options.model == ModelKind::kCnn) {
    initial = init_model(build_cnn_architecture(data, options),
                         derive_seed(options.config.seed, "init", fold_index));
  } else {
    const int flat = static_cast<int>(fold.train.front().values.size());
    initial = mlp_build(flat, static_cast<int>(categories.size()),
                        derive_seed(options.config.seed, "init", fold_index),
                        options.mlp_hidden);
  }

  TrainResult trained =
      train(initial, fold.train, fold.val, categories, options.config);

  FoldOutcome outcome;
  outcome.fold = fold_index;
  outcome.train_report = std::move(trained.report);
  outcome.test_eval = evaluate(trained.best, fold.test, categories,
                               options.config.workers);
  outcome.slice_accuracy = outcome.test_eval.accuracy;

  for (std::size_t u = 0; u < fold.test_units.size(); ++u) {
    const ConsensusResult consensus = consensus_predict(
        trained.best, fold.test_units[u], fold.normalizer,
        options.config.seq_length_s, options.consensus_k,
        derive_seed(options.eval_seed, "consensus",
                    static_cast<std::uint64_t>(fold_index) * 100000 + u));
    outcome.consensus_predictions.push_back(consensus.predicted_index);
    outcome.consensus_truths.push_back(fold.unit_truths[u]);
    outcome.consensus_vote_fractions.push_back(
        consensus.tally.counts.cast<double>() /
        static_cast<double>(consensus.tally.total));
  }
  long correct = 0;
  for (std::size_t u = 0; u < outcome.consensus_predictions.size(); ++u) {
    correct += outcome.consensus_predictions[u] == outcome.consensus_truths[u];
  }
  outcome.consensus_accuracy =
      outcome.consensus_predictions.empty()
          ? 0.0
          : static_cast<double>(correct) /
                static_cast<double>(outcome.consensus_predictions.size());
  outcome.checkpoint = Checkpoint{std::move(trained.best), fold.normalizer};
  return outcome;
}

FoldOutcome run_fold_logistic(const LoadedDataset& data, const FoldData& fold,
                              int fold_index, const RunOptions& options) {
  const std::vector<int>& categories = data.categories();
  const int c = static_cast<int>(categories.size());

  // validation is unused by the convex fit; fold it into training
  std::vector<SliceTensor> train_slices(fold.train.begin(), fold.train.end());
  train_slices.insert(train_slices.end(), fold.val.begin(), fold.val.end());

  const Eigen::MatrixXd train_raw =
      feature_matrix(train_slices, options.fft_bins);
  const FeatureScaler scaler = fit_feature_scaler(train_raw);
  const Eigen::MatrixXd train_X = scaler.apply(train_raw);
  std::vector<int> train_y(train_slices.size());
  for (std::size_t i = 0; i < train_slices.size(); ++i) {
    train_y[i] = category_index_checked(categories, train_slices[i].label);
  }
  const LogisticParams params =
      logistic_train(train_X, train_y, c, options.logistic_l2);

  const Eigen::MatrixXd test_X =
      scaler.apply(feature_matrix(fold.test, options.fft_bins));
  const Eigen::MatrixXd probs = logistic_predict_proba(params, test_X);

  FoldOutcome outcome;
  outcome.fold = fold_index;
  outcome.test_eval.predictions.resize(fold.test.size());
  outcome.test_eval.truth_indices.resize(fold.test.size());
  outcome.test_eval.probs.resize(fold.test.size());
  long correct = 0;
  for (std::size_t i = 0; i < fold.test.size(); ++i) {
    outcome.test_eval.probs[i] = probs.row(static_cast<Eigen::Index>(i));
    outcome.test_eval.predictions[i] =
        argmax_index(outcome.test_eval.probs[i]);
    outcome.test_eval.truth_indices[i] =
        category_index_checked(categories, fold.test[i].label);
    correct += outcome.test_eval.predictions[i] ==
               outcome.test_eval.truth_indices[i];
  }
  outcome.test_eval.accuracy =
      static_cast<double>(correct) / static_cast<double>(fold.test.size());
  outcome.slice_accuracy = outcome.test_eval.accuracy;
  return outcome;
}

void pool_results(ProtocolResult& result, int categories) {
  std::vector<int> slice_preds, slice_truths;
  std::vector<int> cons_preds, cons_truths;
  std::vector<ProbVector> cons_fractions;
  for (const FoldOutcome& fold : result.folds) {
    slice_preds.insert(slice_preds.end(), fold.test_eval.predictions.begin(),
                       fold.test_eval.predictions.end());
    slice_truths.insert(slice_truths.end(),
                        fold.test_eval.truth_indices.begin(),
                        fold.test_eval.truth_indices.end());
    cons_preds.insert(cons_preds.end(), fold.consensus_predictions.begin(),
                      fold.consensus_predictions.end());
    cons_truths.insert(cons_truths.end(), fold.consensus_truths.begin(),
                       fold.consensus_truths.end());
    cons_fractions.insert(cons_fractions.end(),
                          fold.consensus_vote_fractions.begin(),
                          fold.consensus_vote_fractions.end());
  }
  result.slice_confusion = confusion(slice_preds, slice_truths, categories);
  result.slice_ape = ape_histogram(slice_preds, slice_truths, categories);
  result.slice_accuracy = result.slice_confusion.accuracy();
  if (!cons_preds.empty()) {
    result.consensus_confusion = confusion(cons_preds, cons_truths, categories);
    result.consensus_accuracy = result.consensus_confusion.accuracy();
  }
}

void write_fold_artifacts(const FoldOutcome& outcome,
                          const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  if (outcome.checkpoint) {
    save_checkpoint(*outcome.checkpoint, dir / "checkpoint.bin");
    save_train_report(outcome.train_report, dir / "train_report");
  }
  std::ofstream out(dir / "fold_metrics.tsv", std::ios::trunc);
  out << "slice_accuracy\t" << outcome.slice_accuracy << '\n';
  out << "consensus_accuracy\t" << outcome.consensus_accuracy << '\n';
}

}  // namespace

ProtocolResult run_protocol(const LoadedDataset& data,
                            const RunOptions& options) {
  options.config.check();
  const FoldPlan plan = make_folds(data.manifest, options.protocol);
  std::vector<int> folds = options.fold_subset;
  if (folds.empty()) {
    folds.resize(plan.num_folds);
    std::iota(folds.begin(), folds.end(), 0);
  }

  ProtocolResult result;
  result.protocol = options.protocol;
  result.model = options.model;

  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    save_fold_plan(plan, options.out_dir / "fold_plan.tsv");
  }

  for (int fold_index : folds) {
    const FoldData fold = materialize_fold(
        data, plan, fold_index, options.config.seq_length_s,
        options.validation_fraction, options.config.seed, options.granularity);
    FoldOutcome outcome =
        options.model == ModelKind::kLogistic
            ? run_fold_logistic(data, fold, fold_index, options)
            : run_fold_network(data, fold, fold_index, options);
    if (!options.out_dir.empty()) {
      write_fold_artifacts(outcome,
                           options.out_dir /
                               ("fold_" + std::to_string(fold_index)));
    }
    result.folds.push_back(std::move(outcome));
  }

  pool_results(result, static_cast<int>(data.categories().size()));
  std::vector<ProbVector> fractions;
  std::vector<int> unit_truths;
  for (const FoldOutcome& fold : result.folds) {
    fractions.insert(fractions.end(), fold.consensus_vote_fractions.begin(),
                     fold.consensus_vote_fractions.end());
    unit_truths.insert(unit_truths.end(), fold.consensus_truths.begin(),
                       fold.consensus_truths.end());
  }
  if (!fractions.empty()) {
    result.consensus_fit =
        expected_score_r2(fractions, unit_truths, data.categories());
  }

  if (!options.out_dir.empty()) {
    save_metrics_report(metrics_from_result(result), options.out_dir);
  }
  return result;
}

MetricsReport metrics_from_result(const ProtocolResult& result) {
  MetricsReport report;
  report.slice_accuracy = result.slice_accuracy;
  report.slice_confusion = result.slice_confusion;
  report.ape = result.slice_ape;
  report.has_consensus = result.consensus_confusion.counts.size() > 0;
  report.consensus_accuracy = result.consensus_accuracy;
  report.consensus_confusion = result.consensus_confusion;
  report.consensus_fit = result.consensus_fit;
  return report;
}

void save_metrics_report(const MetricsReport& report,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_confusion(report.slice_confusion, dir / "slice_confusion.tsv");
  save_ape_histogram(report.ape, dir / "ape_histogram.tsv");
  if (report.has_consensus) {
    save_confusion(report.consensus_confusion, dir / "consensus_confusion.tsv");
    save_expected_scores(report.consensus_fit, dir / "expected_scores.tsv");
  }
  std::ofstream out(dir / "metrics.tsv", std::ios::trunc);
  if (!out) throw IoError("cannot write metrics report");
  out << "slice_accuracy\t" << report.slice_accuracy << '\n';
  if (report.has_consensus) {
    out << "consensus_accuracy\t" << report.consensus_accuracy << '\n';
    if (report.consensus_fit.defined) {
      out << "expected_score_r2\t" << report.consensus_fit.r2 << '\n';
    }
  }
}

MetricsReport evaluate_checkpoint(const LoadedDataset& data,
                                  const Checkpoint& checkpoint,
                                  double seq_length_s, int consensus_k,
                                  std::uint64_t eval_seed, int workers) {
  std::vector<SliceTensor> slices;
  for (const auto& minutes : data.minutes) {
    for (const MinuteSample& minute : minutes) {
      for (SliceTensor& s : extract_slices_tiled(minute, seq_length_s)) {
        checkpoint.normalizer.apply_in_place(s.values);
        slices.push_back(std::move(s));
      }
    }
  }
  const EvalResult eval =
      evaluate(checkpoint.model, slices, data.categories(), workers);

  MetricsReport report;
  report.slice_accuracy = eval.accuracy;
  report.slice_confusion =
      confusion(eval.predictions, eval.truth_indices,
                static_cast<int>(data.categories().size()));
  report.ape = ape_histogram(eval.predictions, eval.truth_indices,
                             static_cast<int>(data.categories().size()));

  if (consensus_k > 0) {
    std::vector<int> preds, truths;
    std::vector<ProbVector> fractions;
    for (std::size_t r = 0; r < data.minutes.size(); ++r) {
      ConsensusUnit unit;
      for (const MinuteSample& minute : data.minutes[r]) unit.push_back(&minute);
      const ConsensusResult consensus = consensus_predict(
          checkpoint.model, unit, checkpoint.normalizer, seq_length_s,
          consensus_k, derive_seed(eval_seed, "consensus", r));
      preds.push_back(consensus.predicted_index);
      truths.push_back(category_index_checked(data.categories(),
                                              data.recordings[r].pain_score));
      fractions.push_back(consensus.tally.counts.cast<double>() /
                          static_cast<double>(consensus.tally.total));
    }
    report.has_consensus = true;
    report.consensus_confusion =
        confusion(preds, truths, static_cast<int>(data.categories().size()));
    report.consensus_accuracy = report.consensus_confusion.accuracy();
    report.consensus_fit =
        expected_score_r2(fractions, truths, data.categories());
  }
  return report;
}

std::vector<AblationRow> sensor_ablation(const LoadedDataset& data,
                                         const RunOptions& base) {
  std::vector<AblationRow> rows;
  for (int c = 0; c < data.channel_count(); ++c) {
    const LoadedDataset view = single_channel_view(data, c);
    RunOptions options = base;
    options.out_dir.clear();
    const ProtocolResult result = run_protocol(view, options);
    rows.push_back({c, data.channel_specs[c].name, data.channel_specs[c].kind,
                    result.slice_accuracy});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const AblationRow& a, const AblationRow& b) {
                     return a.accuracy > b.accuracy;
                   });
  return rows;
}

void save_ablation(std::span<const AblationRow> rows,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write ablation table " + path.string());
  out << "channel\tname\tkind\taccuracy\n";
  for (const AblationRow& row : rows) {
    out << row.channel << '\t' << row.name << '\t' << to_string(row.kind)
        << '\t' << row.accuracy << '\n';
  }
}

std::vector<SweepPoint> seqlen_sweep(const LoadedDataset& data,
                                     const RunOptions& base,
                                     std::span<const double> lengths) {
  std::vector<SweepPoint> points;
  for (double length : lengths) {
    RunOptions options = base;
    options.out_dir.clear();
    options.config.seq_length_s = length;
    const ProtocolResult result = run_protocol(data, options);
    points.push_back({length, result.slice_accuracy,
                      result.consensus_accuracy});
  }
  return points;
}

void save_sweep(std::span<const SweepPoint> points,
                const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write sweep table " + path.string());
  out << "seq_length_s\tslice_accuracy\tconsensus_accuracy\n";
  for (const SweepPoint& p : points) {
    out << p.seq_length_s << '\t' << p.slice_accuracy << '\t'
        << p.consensus_accuracy << '\n';
  }
}

}  // namespace painmeter

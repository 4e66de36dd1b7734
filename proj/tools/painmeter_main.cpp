// Command-line front end: synthesize datasets, train and evaluate models,
// vote with consensus, run ablations and slice-length sweeps.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "painmeter/checkpoint.hpp"
#include "painmeter/errors.hpp"
#include "painmeter/experiments.hpp"
#include "painmeter/synthgen.hpp"

namespace fs = std::filesystem;
using namespace painmeter;

namespace {

fs::path resolve_manifest(const std::string& data) {
  fs::path p(data);
  if (fs::is_directory(p)) p /= "manifest.txt";
  if (!fs::exists(p)) {
    throw IoError("no manifest at " + p.string());
  }
  return p;
}

/// Every run logs its full resolved configuration so it can be replayed.
void log_run(const fs::path& out_dir, const std::string& command,
             const std::vector<std::pair<std::string, std::string>>& entries) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "run_config.txt", std::ios::trunc);
  out << "command=" << command << '\n';
  for (const auto& [key, value] : entries) out << key << '=' << value << '\n';
}

std::string config_to_lines(const TrainConfig& config) {
  std::ostringstream os;
  os << "batch_size=" << config.batch_size << " max_epochs=" << config.max_epochs
     << " dropout_rate=" << config.dropout_rate
     << " seq_length_s=" << config.seq_length_s
     << " learning_rate=" << config.learning_rate
     << " patience_validations=" << config.patience_validations
     << " validation_every_steps=" << config.validation_every_steps
     << " seed=" << config.seed << " workers=" << config.workers;
  return os.str();
}

struct TrainFlags {
  std::string config_file;
  std::vector<std::string> overrides;
  int batch_size = -1;
  int max_epochs = -1;
  double dropout = -1.0;
  double seq_length = -1.0;
  double learning_rate = -1.0;
  int patience = -1;
  int val_every = -1;
  std::int64_t seed = -1;
  int workers = -1;
  int filters = 16;
  int conv_layers = 2;
  int window1 = 25;
  int deep_window = 9;
  int sensor_window = 3;
  bool arch_override = false;

  void add_options(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key=value config file");
    cmd->add_option("--set", overrides,
                    "config override key=value (repeatable, wins over file)");
    cmd->add_option("--batch-size", batch_size, "mini-batch size");
    cmd->add_option("--epochs", max_epochs, "maximum epochs");
    cmd->add_option("--dropout", dropout, "dropout rate");
    cmd->add_option("--seq-length", seq_length, "slice length in seconds");
    cmd->add_option("--learning-rate", learning_rate, "Adam learning rate");
    cmd->add_option("--patience", patience, "early-stopping patience");
    cmd->add_option("--val-every", val_every, "validation cadence (steps)");
    cmd->add_option("--seed", seed, "master seed");
    cmd->add_option("--workers", workers, "gradient workers");
    auto* f = cmd->add_option("--filters", filters, "filters per conv layer");
    auto* l = cmd->add_option("--conv-layers", conv_layers,
                              "conv layer count (2..5)");
    auto* w1 = cmd->add_option("--window1", window1,
                               "time window of the first conv layer");
    auto* wd = cmd->add_option("--deep-window", deep_window,
                               "time window of the deeper conv layers");
    auto* sw = cmd->add_option("--sensor-window", sensor_window,
                               "sensor rows of the first conv window");
    for (auto* opt : {f, l, w1, wd, sw}) {
      opt->each([this](const std::string&) { arch_override = true; });
    }
  }

  std::vector<ConvLayerSpec> conv_spec() const {
    if (!arch_override) return {};
    std::vector<ConvLayerSpec> spec;
    for (int i = 0; i < conv_layers; ++i) {
      const bool last = i == conv_layers - 1;
      spec.push_back({filters, i == 0 ? sensor_window : 1,
                      i == 0 ? window1 : deep_window, last ? 1 : 4,
                      last ? 1 : 4});
    }
    return spec;
  }

  TrainConfig resolve() const {
    TrainConfig config;
    if (!config_file.empty()) config = load_train_config(config_file);
    for (const std::string& assignment : overrides) {
      apply_config_override(config, assignment);
    }
    if (batch_size > 0) config.batch_size = batch_size;
    if (max_epochs > 0) config.max_epochs = max_epochs;
    if (dropout >= 0.0) config.dropout_rate = dropout;
    if (seq_length > 0.0) config.seq_length_s = seq_length;
    if (learning_rate >= 0.0) config.learning_rate = learning_rate;
    if (patience > 0) config.patience_validations = patience;
    if (val_every > 0) config.validation_every_steps = val_every;
    if (seed >= 0) config.seed = static_cast<std::uint64_t>(seed);
    if (workers > 0) config.workers = workers;
    config.check();
    return config;
  }
};

int cmd_synth(const std::string& preset, std::int64_t seed,
              const std::string& out) {
  SynthSpec spec;
  if (preset == "dataset1") {
    spec = dataset1_preset();
  } else if (preset == "dataset2") {
    spec = dataset2_preset();
  } else {
    throw UsageError("unknown preset '" + preset +
                     "' (expected dataset1 or dataset2)");
  }
  if (seed >= 0) spec.seed = static_cast<std::uint64_t>(seed);
  const SynthResult result = generate(spec, out);
  log_run(out, "synth",
          {{"preset", preset},
           {"seed", std::to_string(spec.seed)},
           {"recordings", std::to_string(result.manifest.recording_entries.size())}});
  std::cout << "wrote " << result.manifest.recording_entries.size()
            << " recordings to " << out << '\n';
  return 0;
}

int cmd_train(const std::string& data, const std::string& model,
              const std::string& folds, const TrainFlags& flags,
              const std::string& out, std::vector<int> fold_subset) {
  const LoadedDataset dataset = load_dataset(resolve_manifest(data));
  RunOptions options;
  options.model = model_kind_from_string(model);
  options.protocol = protocol_from_string(folds);
  options.config = flags.resolve();
  options.conv_spec = flags.conv_spec();
  options.fold_subset = std::move(fold_subset);
  options.out_dir = out;
  const ProtocolResult result = run_protocol(dataset, options);
  log_run(out, "train",
          {{"data", data},
           {"model", model},
           {"folds", folds},
           {"config", config_to_lines(options.config)}});
  std::cout << "slice accuracy " << result.slice_accuracy;
  if (options.model != ModelKind::kLogistic) {
    std::cout << ", consensus accuracy " << result.consensus_accuracy;
  }
  std::cout << " (" << result.folds.size() << " folds)\n";
  return 0;
}

int cmd_eval(const std::string& data, const std::string& checkpoint_path,
             int consensus_k, std::int64_t seed, double seq_length,
             const std::string& out) {
  const LoadedDataset dataset = load_dataset(resolve_manifest(data));
  const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
  const std::uint64_t eval_seed = seed >= 0 ? seed : 7;
  const MetricsReport report = evaluate_checkpoint(
      dataset, checkpoint, seq_length, consensus_k, eval_seed);
  save_metrics_report(report, out);
  log_run(out, "eval",
          {{"data", data},
           {"checkpoint", checkpoint_path},
           {"consensus", std::to_string(consensus_k)},
           {"seq_length", std::to_string(seq_length)},
           {"seed", std::to_string(eval_seed)}});
  std::cout << "slice accuracy " << report.slice_accuracy << '\n';
  if (report.has_consensus) {
    std::cout << "consensus accuracy " << report.consensus_accuracy << '\n';
  }
  return 0;
}

int cmd_consensus(const std::string& data, const std::string& checkpoint_path,
                  const std::vector<int>& ks, const std::string& granularity,
                  std::int64_t seed, double seq_length,
                  const std::string& out) {
  const LoadedDataset dataset = load_dataset(resolve_manifest(data));
  const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
  const std::uint64_t base_seed = seed >= 0 ? seed : 7;

  std::vector<ConsensusUnit> units;
  std::vector<int> truths;
  for (std::size_t r = 0; r < dataset.minutes.size(); ++r) {
    if (granularity == "minute") {
      for (const MinuteSample& minute : dataset.minutes[r]) {
        units.push_back({&minute});
        truths.push_back(category_index_checked(dataset.categories(),
                                                minute.label));
      }
    } else {
      ConsensusUnit unit;
      for (const MinuteSample& minute : dataset.minutes[r]) {
        unit.push_back(&minute);
      }
      units.push_back(std::move(unit));
      truths.push_back(category_index_checked(
          dataset.categories(), dataset.recordings[r].pain_score));
    }
  }
  std::vector<int> sorted_ks = ks;
  std::sort(sorted_ks.begin(), sorted_ks.end());
  const auto curve = consensus_curve(checkpoint.model, units, truths,
                                     checkpoint.normalizer, seq_length,
                                     sorted_ks, base_seed);
  fs::create_directories(out);
  save_consensus_curve(curve, fs::path(out) / "consensus_curve.tsv");
  log_run(out, "consensus",
          {{"data", data},
           {"checkpoint", checkpoint_path},
           {"granularity", granularity},
           {"seed", std::to_string(base_seed)}});
  for (const auto& point : curve) {
    std::cout << "k=" << point.k << " accuracy=" << point.accuracy << '\n';
  }
  return 0;
}

int cmd_ablate(const std::string& data, const TrainFlags& flags,
               const std::string& out) {
  const LoadedDataset dataset = load_dataset(resolve_manifest(data));
  RunOptions options;
  options.config = flags.resolve();
  const auto rows = sensor_ablation(dataset, options);
  fs::create_directories(out);
  save_ablation(rows, fs::path(out) / "ablation.tsv");
  log_run(out, "ablate",
          {{"data", data}, {"config", config_to_lines(options.config)}});
  for (const auto& row : rows) {
    std::cout << row.name << " (" << to_string(row.kind) << ") "
              << row.accuracy << '\n';
  }
  return 0;
}

int cmd_sweep(const std::string& data, const std::vector<double>& lengths,
              const TrainFlags& flags, const std::string& out) {
  const LoadedDataset dataset = load_dataset(resolve_manifest(data));
  RunOptions options;
  options.config = flags.resolve();
  const auto points = seqlen_sweep(dataset, options, lengths);
  fs::create_directories(out);
  save_sweep(points, fs::path(out) / "seqlen_sweep.tsv");
  log_run(out, "sweep-seqlen",
          {{"data", data}, {"config", config_to_lines(options.config)}});
  for (const auto& p : points) {
    std::cout << "seq_length=" << p.seq_length_s
              << " slice_accuracy=" << p.slice_accuracy << '\n';
  }
  return 0;
}

int cmd_report(const std::string& run_dir) {
  const fs::path dir(run_dir);
  bool printed = false;
  for (const char* name : {"run_config.txt", "metrics.tsv"}) {
    const fs::path p = dir / name;
    if (fs::exists(p)) {
      std::cout << "== " << name << " ==\n";
      std::ifstream in(p);
      std::cout << in.rdbuf() << '\n';
      printed = true;
    }
  }
  if (fs::exists(dir)) {
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_directory() &&
          fs::exists(entry.path() / "fold_metrics.tsv")) {
        std::cout << "== " << entry.path().filename().string() << " ==\n";
        std::ifstream in(entry.path() / "fold_metrics.tsv");
        std::cout << in.rdbuf();
        printed = true;
      }
    }
  }
  if (!printed) {
    std::cerr << "no run artifacts found under " << run_dir << '\n';
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ordinal pain-score classification over multichannel "
               "physiological recordings"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  std::string synth_preset = "dataset1";
  std::int64_t synth_seed = -1;
  std::string synth_out;
  synth->add_option("--preset", synth_preset, "dataset1 or dataset2");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output directory")->required();

  // train
  auto* train_cmd = app.add_subcommand("train", "cross-validated training");
  std::string train_data, train_model = "cnn", train_folds = "fivefold";
  std::string train_out;
  std::vector<int> train_fold_subset;
  TrainFlags train_flags;
  train_cmd->add_option("--data", train_data, "dataset directory or manifest")
      ->required();
  train_cmd->add_option("--model", train_model, "cnn, mlp or lr");
  train_cmd->add_option("--folds", train_folds, "fivefold or loro");
  train_cmd->add_option("--fold", train_fold_subset,
                        "run only these folds (repeatable)");
  train_cmd->add_option("--out", train_out, "output directory")->required();
  train_flags.add_options(train_cmd);

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score a saved checkpoint");
  std::string eval_data, eval_checkpoint, eval_out;
  int eval_consensus = 100;
  std::int64_t eval_seed = -1;
  double eval_seq_length = 15.0;
  eval_cmd->add_option("--data", eval_data, "dataset directory or manifest")
      ->required();
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "model checkpoint")
      ->required();
  eval_cmd->add_option("--consensus", eval_consensus,
                       "slices per recording vote (0 disables)");
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
  eval_cmd->add_option("--seq-length", eval_seq_length,
                       "slice length in seconds");
  eval_cmd->add_option("--out", eval_out, "output directory")->required();

  // consensus
  auto* cons_cmd = app.add_subcommand("consensus", "consensus accuracy curve");
  std::string cons_data, cons_checkpoint, cons_out;
  std::string cons_granularity = "recording";
  std::vector<int> cons_ks = {1, 5, 25, 50, 100};
  std::int64_t cons_seed = -1;
  double cons_seq_length = 15.0;
  cons_cmd->add_option("--data", cons_data, "dataset directory or manifest")
      ->required();
  cons_cmd->add_option("--checkpoint", cons_checkpoint, "model checkpoint")
      ->required();
  cons_cmd->add_option("--k", cons_ks, "slice counts (repeatable)");
  cons_cmd->add_option("--granularity", cons_granularity,
                       "recording or minute");
  cons_cmd->add_option("--seed", cons_seed, "vote seed");
  cons_cmd->add_option("--seq-length", cons_seq_length,
                       "slice length in seconds");
  cons_cmd->add_option("--out", cons_out, "output directory")->required();

  // ablate
  auto* ablate_cmd =
      app.add_subcommand("ablate", "per-channel retrain and score");
  std::string ablate_data, ablate_out;
  TrainFlags ablate_flags;
  ablate_cmd->add_option("--data", ablate_data, "dataset directory or manifest")
      ->required();
  ablate_cmd->add_option("--out", ablate_out, "output directory")->required();
  ablate_flags.add_options(ablate_cmd);

  // sweep-seqlen
  auto* sweep_cmd =
      app.add_subcommand("sweep-seqlen", "accuracy per slice length");
  std::string sweep_data, sweep_out;
  std::vector<double> sweep_lengths = {5.0, 15.0, 30.0, 60.0};
  TrainFlags sweep_flags;
  sweep_cmd->add_option("--data", sweep_data, "dataset directory or manifest")
      ->required();
  sweep_cmd->add_option("--lengths", sweep_lengths,
                        "slice lengths in seconds (repeatable)");
  sweep_cmd->add_option("--out", sweep_out, "output directory")->required();
  sweep_flags.add_options(sweep_cmd);

  // report
  auto* report_cmd = app.add_subcommand("report", "print run artifacts");
  std::string report_run;
  report_cmd->add_option("--run", report_run, "run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return cmd_synth(synth_preset, synth_seed, synth_out);
    if (*train_cmd) {
      return cmd_train(train_data, train_model, train_folds, train_flags,
                       train_out, train_fold_subset);
    }
    if (*eval_cmd) {
      return cmd_eval(eval_data, eval_checkpoint, eval_consensus, eval_seed,
                      eval_seq_length, eval_out);
    }
    if (*cons_cmd) {
      return cmd_consensus(cons_data, cons_checkpoint, cons_ks,
                           cons_granularity, cons_seed, cons_seq_length,
                           cons_out);
    }
    if (*ablate_cmd) return cmd_ablate(ablate_data, ablate_flags, ablate_out);
    if (*sweep_cmd) {
      return cmd_sweep(sweep_data, sweep_lengths, sweep_flags, sweep_out);
    }
    if (*report_cmd) return cmd_report(report_run);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

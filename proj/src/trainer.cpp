#include "painmeter/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <thread>

#include "painmeter/errors.hpp"

namespace painmeter {

void TrainConfig::check() const {
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (workers < 1) throw UsageError("workers must be >= 1");
  if (batch_size % workers != 0) {
    throw UsageError("batch_size must be divisible by workers");
  }
  if (patience_validations < 1) throw UsageError("patience must be >= 1");
  if (validation_every_steps < 1) {
    throw UsageError("validation cadence must be >= 1");
  }
  if (max_epochs < 1) throw UsageError("max_epochs must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw UsageError("dropout_rate must lie in [0, 1)");
  }
  if (!(seq_length_s > 0.0)) throw UsageError("seq_length must be positive");
  if (!(learning_rate >= 0.0)) {
    throw UsageError("learning_rate must be nonnegative");
  }
}

TrainConfig aggressive_train_config() {
  TrainConfig config;
  config.learning_rate = 0.5;
  config.max_epochs = 2000;
  return config;
}

namespace {

const char* kConfigKeys =
    "batch_size, max_epochs, dropout_rate, seq_length_s, learning_rate, "
    "patience_validations, validation_every_steps, seed, workers";

void set_config_key(TrainConfig& config, const std::string& key,
                    const std::string& value) {
  try {
    if (key == "batch_size") config.batch_size = std::stoi(value);
    else if (key == "max_epochs") config.max_epochs = std::stoi(value);
    else if (key == "dropout_rate") config.dropout_rate = std::stod(value);
    else if (key == "seq_length_s") config.seq_length_s = std::stod(value);
    else if (key == "learning_rate") config.learning_rate = std::stod(value);
    else if (key == "patience_validations")
      config.patience_validations = std::stoi(value);
    else if (key == "validation_every_steps")
      config.validation_every_steps = std::stoi(value);
    else if (key == "seed") config.seed = std::stoull(value);
    else if (key == "workers") config.workers = std::stoi(value);
    else
      throw UsageError("unknown config key '" + key + "' (known keys: " +
                       kConfigKeys + ")");
  } catch (const std::invalid_argument&) {
    throw FormatError("bad value '" + value + "' for config key '" + key +
                      "'");
  } catch (const std::out_of_range&) {
    throw FormatError("value out of range for config key '" + key + "'");
  }
}

}  // namespace

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  TrainConfig config;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config line without '=': " + line);
    }
    set_config_key(config, line.substr(0, eq), line.substr(eq + 1));
  }
  config.check();
  return config;
}

void save_train_config(const TrainConfig& config,
                       const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write config " + path.string());
  out << "batch_size=" << config.batch_size << '\n'
      << "max_epochs=" << config.max_epochs << '\n'
      << "dropout_rate=" << config.dropout_rate << '\n'
      << "seq_length_s=" << config.seq_length_s << '\n'
      << "learning_rate=" << config.learning_rate << '\n'
      << "patience_validations=" << config.patience_validations << '\n'
      << "validation_every_steps=" << config.validation_every_steps << '\n'
      << "seed=" << config.seed << '\n'
      << "workers=" << config.workers << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

void apply_config_override(TrainConfig& config,
                           const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw UsageError("config override must look like key=value, got '" +
                     assignment + "'");
  }
  set_config_key(config, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::string_view to_string(TrainReport::StopReason reason) {
  switch (reason) {
    case TrainReport::StopReason::kEarlyStop: return "early_stop";
    case TrainReport::StopReason::kMaxEpochs: return "max_epochs";
  }
  throw UsageError("invalid stop reason");
}

void save_train_report(const TrainReport& report,
                       const std::filesystem::path& base) {
  {
    std::ofstream out(base.string() + "_loss.tsv", std::ios::trunc);
    if (!out) throw IoError("cannot write loss curve");
    out << "step\tloss\n";
    for (const auto& [step, loss] : report.loss_curve) {
      out << step << '\t' << loss << '\n';
    }
  }
  {
    std::ofstream out(base.string() + "_validation.tsv", std::ios::trunc);
    if (!out) throw IoError("cannot write validation curve");
    out << "validation\taccuracy\n";
    for (std::size_t i = 0; i < report.validation_curve.size(); ++i) {
      out << i << '\t' << report.validation_curve[i] << '\n';
    }
  }
  {
    std::ofstream out(base.string() + "_summary.txt", std::ios::trunc);
    if (!out) throw IoError("cannot write training summary");
    out << "stop_step=" << report.stop_step << '\n'
        << "reason=" << to_string(report.reason) << '\n'
        << "best_validation_index=" << report.best_validation_index << '\n'
        << "best_validation_accuracy=" << report.best_validation_accuracy
        << '\n';
  }
}

int category_index_checked(const std::vector<int>& category_values,
                           int score) {
  const auto it =
      std::find(category_values.begin(), category_values.end(), score);
  if (it == category_values.end()) {
    throw ManifestError("pain score " + std::to_string(score) +
                        " is not part of the category space");
  }
  return static_cast<int>(it - category_values.begin());
}

ModelGrads parallel_gradient_step(const ModelParams& params,
                                  std::span<const Grid2D> xs,
                                  std::span<const OrdinalTarget> targets,
                                  int workers, double dropout_rate,
                                  std::uint64_t dropout_seed_base,
                                  double* batch_loss,
                                  std::vector<BatchNormStats>* stats_out,
                                  BatchForwardResult* workspace) {
  if (xs.empty() || xs.size() != targets.size()) {
    throw UsageError("parallel_gradient_step: batch/target size mismatch");
  }
  if (workers < 1) throw UsageError("parallel_gradient_step: workers < 1");
  const int n = static_cast<int>(xs.size());
  if (n % workers != 0) {
    throw UsageError("parallel_gradient_step: batch of " + std::to_string(n) +
                     " is not divisible by " + std::to_string(workers) +
                     " workers");
  }

  std::vector<std::uint64_t> seeds;
  if (dropout_rate > 0.0) {
    seeds.reserve(n);
    for (int e = 0; e < n; ++e) {
      seeds.push_back(derive_seed(dropout_seed_base, "dropout", e));
    }
  }

  BatchForwardResult local;
  BatchForwardResult& fwd = workspace ? *workspace : local;
  model_forward_batch(xs, params, Mode::kTrain, dropout_rate, seeds, workers,
                      fwd);
  if (stats_out) *stats_out = fwd.stats;

  std::vector<Eigen::VectorXd> dlogits(n);
  double loss = 0.0;
  for (int e = 0; e < n; ++e) {
    loss += ordinal_loss(fwd.tapes[e].probs, targets[e]);
    dlogits[e] = ordinal_loss_logit_gradient(fwd.tapes[e].probs, targets[e]);
  }
  loss /= n;
  if (batch_loss) *batch_loss = loss;

  ModelGrads grads = model_backward_batch(fwd.tapes, params, dlogits, workers);
  grads.scale(1.0 / n);
  return grads;
}

EvalResult evaluate(const ModelParams& params,
                    std::span<const SliceTensor> slices,
                    const std::vector<int>& category_values, int workers) {
  if (slices.empty()) throw UsageError("evaluate: no slices");
  const int n = static_cast<int>(slices.size());
  EvalResult result;
  result.predictions.resize(n);
  result.truth_indices.resize(n);
  result.probs.resize(n);

  const auto run = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      const ProbVector p =
          model_forward(slices[i].values, params, Mode::kInfer);
      result.probs[i] = p;
      result.predictions[i] = argmax_index(p);
      result.truth_indices[i] =
          category_index_checked(category_values, slices[i].label);
    }
  };
  const int threads = std::max(1, std::min(workers, n));
  if (threads == 1) {
    run(0, n);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      const int begin = static_cast<int>(static_cast<long>(n) * w / threads);
      const int end =
          static_cast<int>(static_cast<long>(n) * (w + 1) / threads);
      pool.emplace_back(run, begin, end);
    }
    for (auto& t : pool) t.join();
  }

  long correct = 0;
  for (int i = 0; i < n; ++i) {
    correct += result.predictions[i] == result.truth_indices[i];
  }
  result.accuracy = static_cast<double>(correct) / n;
  return result;
}

namespace {

/// Largest worker count <= requested that evenly divides the batch.
int effective_workers(int requested, int batch) {
  for (int p = std::min(requested, batch); p > 1; --p) {
    if (batch % p == 0) return p;
  }
  return 1;
}

void fisher_yates(std::vector<int>& order, Rng& rng) {
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
    std::swap(order[i], order[rng.uniform_int(0, i)]);
  }
}

}  // namespace

TrainResult train(const ModelParams& initial,
                  std::span<const SliceTensor> train_slices,
                  std::span<const SliceTensor> val_slices,
                  const std::vector<int>& category_values,
                  const TrainConfig& config) {
  config.check();
  if (train_slices.empty()) throw UsageError("train: no training slices");
  if (val_slices.empty()) throw UsageError("train: no validation slices");

  const int n = static_cast<int>(train_slices.size());
  std::vector<OrdinalTarget> targets(n);
  for (int i = 0; i < n; ++i) {
    targets[i] = {category_index_checked(category_values,
                                         train_slices[i].label),
                  static_cast<int>(category_values.size())};
  }

  ModelParams params = initial;
  AdamConfig adam_config;
  adam_config.learning_rate = config.learning_rate;
  AdamState adam = AdamState::init(params, adam_config);

  TrainResult result;
  result.best = params;
  TrainReport& report = result.report;

  const int batch = std::min(config.batch_size, n);
  const int steps_per_epoch = n / batch;
  double best_acc = -std::numeric_limits<double>::infinity();
  double best_loss = std::numeric_limits<double>::infinity();
  int validations_since_best = 0;
  long global_step = 0;
  bool stopped_early = false;

  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  std::vector<Grid2D> batch_x(batch);
  std::vector<OrdinalTarget> batch_y(batch);
  BatchForwardResult workspace;

  for (int epoch = 0; epoch < config.max_epochs && !stopped_early; ++epoch) {
    Rng shuffle_rng(derive_seed(config.seed, "shuffle", epoch));
    fisher_yates(order, shuffle_rng);
    for (int s = 0; s < steps_per_epoch && !stopped_early; ++s) {
      for (int b = 0; b < batch; ++b) {
        const int idx = order[s * batch + b];
        batch_x[b] = train_slices[idx].values;
        batch_y[b] = targets[idx];
      }
      double loss = 0.0;
      std::vector<BatchNormStats> stats;
      const ModelGrads grads = parallel_gradient_step(
          params, batch_x, batch_y, effective_workers(config.workers, batch),
          config.dropout_rate,
          derive_seed(config.seed, "dropout-step", global_step), &loss,
          &stats, &workspace);
      if (!std::isfinite(loss)) {
        throw TrainError("training diverged: non-finite loss at step " +
                         std::to_string(global_step));
      }
      adam_step(params, grads, adam);
      if (!params.arch.dense_only()) update_running_stats(params, stats);
      report.loss_curve.emplace_back(global_step, loss);
      ++global_step;

      if (global_step % config.validation_every_steps == 0) {
        const EvalResult val = evaluate(params, val_slices, category_values,
                                        config.workers);
        report.validation_curve.push_back(val.accuracy);
        double val_loss = 0.0;
        for (std::size_t i = 0; i < val.probs.size(); ++i) {
          val_loss += ordinal_loss(
              val.probs[i],
              {val.truth_indices[i],
               static_cast<int>(category_values.size())});
        }
        val_loss /= static_cast<double>(val.probs.size());
        // the snapshot refines on equal accuracy with lower loss, but only
        // a strictly better accuracy resets the patience counter
        if (val.accuracy > best_acc ||
            (val.accuracy == best_acc && val_loss < best_loss)) {
          result.best = params;
          report.best_validation_index =
              static_cast<int>(report.validation_curve.size()) - 1;
          report.best_validation_accuracy = val.accuracy;
          best_loss = val_loss;
        }
        if (val.accuracy > best_acc) {
          best_acc = val.accuracy;
          validations_since_best = 0;
        } else if (++validations_since_best >=
                   config.patience_validations) {
          stopped_early = true;
        }
      }
    }
  }

  if (report.validation_curve.empty()) {
    // never reached the validation cadence: score the final parameters once
    const EvalResult val =
        evaluate(params, val_slices, category_values, config.workers);
    report.validation_curve.push_back(val.accuracy);
    report.best_validation_index = 0;
    report.best_validation_accuracy = val.accuracy;
    result.best = params;
  }

  report.stop_step = global_step;
  report.reason = stopped_early ? TrainReport::StopReason::kEarlyStop
                                : TrainReport::StopReason::kMaxEpochs;
  return result;
}

}  // namespace painmeter

#include <doctest.h>

#include <filesystem>

#include "oracles.hpp"
#include "painmeter/errors.hpp"
#include "painmeter/ordinal.hpp"
#include "painmeter/trainer.hpp"

using namespace painmeter;
using painmeter::testing::random_grid;

namespace {

/// Linearly separable toy: two channels, category shifts the channel means.
std::vector<SliceTensor> toy_slices(int per_class, int cols, double shift,
                                    std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SliceTensor> slices;
  for (int i = 0; i < 2 * per_class; ++i) {
    const int label = i % 2;
    SliceTensor s;
    s.values = random_grid(2, cols, rng) * 0.3;
    s.values.array() += (label == 0 ? -shift : shift);
    s.label = label + 1;  // pain scores {1, 2}
    s.source_id = "toy/" + std::to_string(i);
    slices.push_back(std::move(s));
  }
  return slices;
}

Architecture tiny_cnn(int channels, int categories) {
  Architecture arch;
  arch.input_channels = channels;
  arch.categories = categories;
  arch.conv = {{4, 2, 5, 2, 2}, {4, 1, 3, 1, 1}};
  arch.hidden = {8};
  arch.check();
  return arch;
}

}  // namespace

TEST_CASE("train reaches perfect accuracy on a separable toy problem") {
  const std::vector<int> categories = {1, 2};
  const auto train_slices = toy_slices(24, 40, 1.0, 5);
  const auto val_slices = toy_slices(8, 40, 1.0, 6);

  TrainConfig config;
  config.batch_size = 16;
  config.max_epochs = 80;
  config.dropout_rate = 0.0;
  config.learning_rate = 3e-3;
  config.validation_every_steps = 5;
  config.patience_validations = 200;
  config.seed = 3;

  const ModelParams initial = init_model(tiny_cnn(2, 2), 17);
  const TrainResult result =
      train(initial, train_slices, val_slices, categories, config);
  CHECK(result.report.best_validation_accuracy == doctest::Approx(1.0));
  CHECK(result.report.stop_step <= 240);
}

TEST_CASE("training loss on a memorizable toy set goes below 0.01") {
  const std::vector<int> categories = {1, 2};
  const auto slices = toy_slices(10, 40, 0.6, 11);

  TrainConfig config;
  config.batch_size = 20;
  config.max_epochs = 2000;
  config.dropout_rate = 0.0;
  config.learning_rate = 5e-3;
  config.validation_every_steps = 50;
  config.patience_validations = 10000;
  config.seed = 4;

  const ModelParams initial = init_model(tiny_cnn(2, 2), 23);
  const TrainResult result =
      train(initial, slices, slices, categories, config);
  double min_loss = 1e9;
  for (const auto& [step, loss] : result.report.loss_curve) {
    min_loss = std::min(min_loss, loss);
    if (min_loss < 0.01) break;
  }
  CHECK(min_loss < 0.01);
}

TEST_CASE("early stopping: patience 1, cadence 1, frozen rate stops after 2 validations") {
  const std::vector<int> categories = {1, 2};
  const auto slices = toy_slices(12, 30, 0.5, 21);

  TrainConfig config;
  config.batch_size = 8;
  config.max_epochs = 50;
  config.dropout_rate = 0.0;
  config.learning_rate = 0.0;  // frozen: no improvement possible
  config.validation_every_steps = 1;
  config.patience_validations = 1;
  config.seed = 9;

  const TrainResult result = train(init_model(tiny_cnn(2, 2), 31), slices,
                                   slices, categories, config);
  CHECK(result.report.validation_curve.size() == 2);
  CHECK(result.report.reason == TrainReport::StopReason::kEarlyStop);
  CHECK(result.report.stop_step == 2);
}

TEST_CASE("identical seeds give identical training runs") {
  const std::vector<int> categories = {1, 2};
  const auto train_slices = toy_slices(12, 30, 0.4, 41);
  const auto val_slices = toy_slices(4, 30, 0.4, 42);

  TrainConfig config;
  config.batch_size = 8;
  config.max_epochs = 4;
  config.dropout_rate = 0.5;
  config.learning_rate = 1e-3;
  config.validation_every_steps = 3;
  config.patience_validations = 100;
  config.seed = 77;

  const auto run = [&] {
    return train(init_model(tiny_cnn(2, 2), 55), train_slices, val_slices,
                 categories, config);
  };
  const TrainResult a = run();
  const TrainResult b = run();
  REQUIRE(a.report.loss_curve.size() == b.report.loss_curve.size());
  for (std::size_t i = 0; i < a.report.loss_curve.size(); ++i) {
    CHECK(a.report.loss_curve[i].second == b.report.loss_curve[i].second);
  }
  CHECK((flatten_parameters(a.best) - flatten_parameters(b.best))
            .lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("parallel gradient aggregation is invariant in the worker count") {
  Rng rng(600);
  Architecture arch = tiny_cnn(3, 2);
  arch.input_channels = 3;
  ModelParams params = init_model(arch, 61);
  for (auto& layer : params.dense) {
    layer.weight = layer.weight.unaryExpr(
        [&rng](double w) { return w + 0.2 * rng.uniform(-1.0, 1.0); });
  }

  std::vector<Grid2D> xs;
  std::vector<OrdinalTarget> targets;
  for (int e = 0; e < 24; ++e) {
    xs.push_back(random_grid(3, 40, rng));
    targets.push_back({e % 2, 2});
  }

  const ModelGrads reference =
      parallel_gradient_step(params, xs, targets, 1, 0.5, 99);
  const Eigen::VectorXd ref = flatten_gradients(reference);
  const double scale = ref.lpNorm<Eigen::Infinity>();
  for (int workers : {2, 3, 4, 8, 24}) {
    const ModelGrads grads =
        parallel_gradient_step(params, xs, targets, workers, 0.5, 99);
    const double diff =
        (flatten_gradients(grads) - ref).lpNorm<Eigen::Infinity>();
    CAPTURE(workers);
    CHECK(diff <= 1e-10 * std::max(scale, 1.0));
  }
}

TEST_CASE("parallel gradient step: sub-batches must divide evenly") {
  Rng rng(601);
  const ModelParams params = init_model(tiny_cnn(2, 2), 3);
  std::vector<Grid2D> xs;
  std::vector<OrdinalTarget> targets;
  for (int e = 0; e < 10; ++e) {
    xs.push_back(random_grid(2, 30, rng));
    targets.push_back({e % 2, 2});
  }
  CHECK_THROWS_AS(parallel_gradient_step(params, xs, targets, 3),
                  UsageError);
  // P = batch size averages per-example gradients
  const Eigen::VectorXd a =
      flatten_gradients(parallel_gradient_step(params, xs, targets, 10));
  const Eigen::VectorXd b =
      flatten_gradients(parallel_gradient_step(params, xs, targets, 1));
  CHECK((a - b).lpNorm<Eigen::Infinity>() <=
        1e-10 * std::max(1.0, b.lpNorm<Eigen::Infinity>()));
}

TEST_CASE("evaluate: accuracy equals a recount of the prediction list") {
  Rng rng(602);
  const std::vector<int> categories = {0, 1, 2};
  std::vector<SliceTensor> slices;
  for (int i = 0; i < 30; ++i) {
    SliceTensor s;
    s.values = random_grid(2, 30, rng);
    s.label = i % 3;
    slices.push_back(std::move(s));
  }
  const ModelParams params = init_model(tiny_cnn(2, 3), 71);
  const EvalResult eval = evaluate(params, slices, categories);
  long correct = 0;
  for (std::size_t i = 0; i < slices.size(); ++i) {
    correct += eval.predictions[i] == eval.truth_indices[i];
  }
  CHECK(eval.accuracy ==
        doctest::Approx(static_cast<double>(correct) / slices.size()));
}

TEST_CASE("evaluate: uniform-output model predicts the lowest index everywhere") {
  Rng rng(603);
  const std::vector<int> categories = {0, 1};
  std::vector<SliceTensor> slices;
  for (int i = 0; i < 40; ++i) {
    SliceTensor s;
    s.values = random_grid(2, 30, rng);
    s.label = i % 2;
    slices.push_back(std::move(s));
  }
  // freshly initialized model has a zero softmax head: uniform output
  ModelParams params = init_model(tiny_cnn(2, 2), 5);
  const EvalResult eval = evaluate(params, slices, categories);
  for (int p : eval.predictions) CHECK(p == 0);
  CHECK(eval.accuracy == doctest::Approx(0.5));  // balanced labels
}

TEST_CASE("train config round-trips through file and overrides") {
  TrainConfig config;
  config.batch_size = 12;
  config.learning_rate = 0.25;
  config.seed = 999;
  const auto path = std::filesystem::temp_directory_path() / "pm_config.txt";
  save_train_config(config, path);
  TrainConfig loaded = load_train_config(path);
  CHECK(loaded.batch_size == 12);
  CHECK(loaded.learning_rate == doctest::Approx(0.25));
  CHECK(loaded.seed == 999);
  apply_config_override(loaded, "batch_size=6");
  CHECK(loaded.batch_size == 6);
  CHECK_THROWS_AS(apply_config_override(loaded, "nonsense=1"), UsageError);
  std::filesystem::remove(path);
}

TEST_CASE("aggressive preset keeps the 0.5 rate and 2000 epochs") {
  const TrainConfig config = aggressive_train_config();
  CHECK(config.learning_rate == doctest::Approx(0.5));
  CHECK(config.max_epochs == 2000);
  CHECK(config.batch_size == 24);
  CHECK(config.dropout_rate == doctest::Approx(0.5));
  CHECK(config.seq_length_s == doctest::Approx(15.0));
}

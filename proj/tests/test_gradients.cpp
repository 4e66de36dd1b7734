#include <doctest.h>

#include <Eigen/Dense>

#include "oracles.hpp"
#include "painmeter/baselines.hpp"
#include "painmeter/nn.hpp"
#include "painmeter/ordinal.hpp"
#include "painmeter/rng.hpp"

using namespace painmeter;
using painmeter::testing::check_gradient;
using painmeter::testing::random_grid;

namespace {

constexpr double kTol = 1e-4;

Eigen::VectorXd grid_to_vec(const Grid2D& g) {
  Eigen::VectorXd v(g.size());
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) v[k++] = g(r, c);
  }
  return v;
}

Grid2D vec_to_grid(const Eigen::VectorXd& v, Eigen::Index rows,
                   Eigen::Index cols) {
  Grid2D g(rows, cols);
  Eigen::Index k = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) g(r, c) = v[k++];
  }
  return g;
}

}  // namespace

TEST_CASE("conv_forward gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(derive_seed(900, "conv-fd", seed));
    const int n = 5, l = 12, s = 2, t = 4;
    const Grid2D x = random_grid(n, l, rng);
    ConvFilter filter;
    filter.weights = random_grid(s, t, rng);
    filter.bias = rng.uniform(-0.5, 0.5);
    const Grid2D dout = random_grid(n - s + 1, l - t + 1, rng);

    const ConvGrads grads = conv_backward(x, filter, dout);

    Eigen::VectorXd theta(s * t + 1 + n * l);
    theta << grid_to_vec(filter.weights), filter.bias, grid_to_vec(x);
    Eigen::VectorXd analytic(theta.size());
    analytic << grid_to_vec(grads.dweights), grads.dbias,
        grid_to_vec(grads.dinput);

    const auto loss = [&](const Eigen::VectorXd& v) {
      ConvFilter f2;
      f2.weights = vec_to_grid(v.head(s * t), s, t);
      f2.bias = v[s * t];
      const Grid2D x2 = vec_to_grid(v.tail(n * l), n, l);
      return (conv_forward(x2, f2).array() * dout.array()).sum();
    };
    const auto report = check_gradient(theta, analytic, loss);
    CAPTURE(seed);
    CAPTURE(report.worst_index);
    CHECK(report.max_rel_error < kTol);
  }
}

TEST_CASE("dense_forward gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(derive_seed(901, "dense-fd", seed));
    const int in = 7, out = 4;
    const Eigen::VectorXd v = grid_to_vec(random_grid(in, 1, rng));
    const Eigen::MatrixXd w = random_grid(out, in, rng);
    const Eigen::VectorXd b = grid_to_vec(random_grid(out, 1, rng));
    const Eigen::VectorXd dout = grid_to_vec(random_grid(out, 1, rng));
    const Activation act = seed % 2 ? Activation::kRelu : Activation::kNone;

    const DenseGrads grads = dense_backward(v, w, b, act, dout);
    Eigen::VectorXd theta(out * in + out + in);
    theta << grid_to_vec(w), b, v;
    Eigen::VectorXd analytic(theta.size());
    analytic << grid_to_vec(grads.dweights), grads.dbias, grads.dinput;

    const auto loss = [&](const Eigen::VectorXd& th) {
      const Eigen::MatrixXd w2 = vec_to_grid(th.head(out * in), out, in);
      const Eigen::VectorXd b2 = th.segment(out * in, out);
      const Eigen::VectorXd v2 = th.tail(in);
      return dense_forward(v2, w2, b2, act).dot(dout);
    };
    const auto report = check_gradient(theta, analytic, loss);
    CAPTURE(seed);
    CHECK(report.max_rel_error < kTol);
  }
}

TEST_CASE("batch-norm gradients (full coupled backward) match finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(derive_seed(902, "bn-fd", seed));
    const int features = 3, cols = 5, batch = 3;
    std::vector<Grid2D> xs, douts;
    for (int n = 0; n < batch; ++n) {
      xs.push_back(random_grid(features, cols, rng));
      douts.push_back(random_grid(features, cols, rng));
    }
    Eigen::VectorXd gamma = grid_to_vec(random_grid(features, 1, rng));
    Eigen::VectorXd beta = grid_to_vec(random_grid(features, 1, rng));

    const auto forward_loss = [&](const std::vector<Grid2D>& inputs,
                                  const Eigen::VectorXd& g,
                                  const Eigen::VectorXd& b) {
      Eigen::VectorXd rm = Eigen::VectorXd::Zero(features);
      Eigen::VectorXd rv = Eigen::VectorXd::Ones(features);
      const auto out = batchnorm_forward(inputs, g, b, Mode::kTrain, rm, rv);
      double loss = 0.0;
      for (int n = 0; n < batch; ++n) {
        loss += (out[n].array() * douts[n].array()).sum();
      }
      return loss;
    };

    Eigen::VectorXd rm = Eigen::VectorXd::Zero(features);
    Eigen::VectorXd rv = Eigen::VectorXd::Ones(features);
    BatchNormStats stats;
    batchnorm_forward(xs, gamma, beta, Mode::kTrain, rm, rv, &stats);
    const BatchNormGrads grads = batchnorm_backward(xs, gamma, stats, douts);

    const int per = features * cols;
    Eigen::VectorXd theta(batch * per + 2 * features);
    Eigen::VectorXd analytic(theta.size());
    for (int n = 0; n < batch; ++n) {
      theta.segment(n * per, per) = grid_to_vec(xs[n]);
      analytic.segment(n * per, per) = grid_to_vec(grads.dinput[n]);
    }
    theta.segment(batch * per, features) = gamma;
    theta.tail(features) = beta;
    analytic.segment(batch * per, features) = grads.dgamma;
    analytic.tail(features) = grads.dbeta;

    const auto loss = [&](const Eigen::VectorXd& th) {
      std::vector<Grid2D> inputs;
      for (int n = 0; n < batch; ++n) {
        inputs.push_back(
            vec_to_grid(th.segment(n * per, per), features, cols));
      }
      return forward_loss(inputs, th.segment(batch * per, features),
                          th.tail(features));
    };
    const auto report = check_gradient(theta, analytic, loss);
    CAPTURE(seed);
    CHECK(report.max_rel_error < kTol);
  }
}

TEST_CASE("softmax + ordinal loss composite gradient matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng rng(derive_seed(903, "composite-fd", seed));
    const int c = 2 + static_cast<int>(seed % 5);
    Eigen::VectorXd logits = grid_to_vec(random_grid(c, 1, rng)) * 2.0;
    // keep a clear argmax margin so perturbations stay on one loss branch
    logits[rng.uniform_int(0, c - 1)] += 1.0;
    const OrdinalTarget target{rng.uniform_int(0, c - 1), c};

    const ProbVector p = softmax(logits);
    const Eigen::VectorXd analytic = ordinal_loss_logit_gradient(p, target);
    const auto loss = [&](const Eigen::VectorXd& th) {
      return ordinal_loss(softmax(th), target);
    };
    const auto report = check_gradient(logits, analytic, loss);
    CAPTURE(seed);
    CHECK(report.max_rel_error < kTol);
  }
}

namespace {

/// Mean batch ordinal loss with normalization statistics and per-example
/// distance weights frozen at the base parameters, matching the
/// backward-pass semantics (both are stopped constants in the gradient).
double model_batch_loss(const ModelParams& params,
                        const std::vector<Grid2D>& xs,
                        const std::vector<OrdinalTarget>& targets,
                        const std::vector<double>& frozen_weights,
                        const std::vector<BatchNormStats>* stats) {
  double loss = 0.0;
  for (std::size_t e = 0; e < xs.size(); ++e) {
    ForwardOptions opt;
    opt.mode = Mode::kTrain;
    opt.norm_stats = stats;
    const ProbVector p = model_forward(xs[e], params, opt);
    const double p_true = std::max(p[targets[e].true_index], 1e-12);
    loss += frozen_weights[e] / targets[e].categories * (-std::log(p_true));
  }
  return loss / static_cast<double>(xs.size());
}

/// Central differences step over a ReLU kink when a pre-activation sits
/// within h of zero; such base points make the check meaningless, so the
/// probe batch is redrawn until every rectifier has margin.
bool relu_margin_ok(const std::vector<ModelTape>& tapes,
                    const ModelParams& params, double margin) {
  for (const ModelTape& tape : tapes) {
    for (std::size_t l = 0; l < tape.conv.size(); ++l) {
      const ConvLayerTape& lt = tape.conv[l];
      for (Eigen::Index f = 0; f < lt.preact.rows(); ++f) {
        const double inv_std =
            1.0 / std::sqrt(lt.stats.var[f] + kBatchNormEpsilon);
        const auto normed =
            ((lt.preact.row(f).array() - lt.stats.mean[f]) * inv_std *
             params.conv[l].gamma[f] +
             params.conv[l].beta[f])
                .abs();
        if ((normed < margin).any()) return false;
      }
    }
    for (std::size_t d = 0; d + 1 < tape.dense.size(); ++d) {
      if ((tape.dense[d].preact.array().abs() < margin).any()) return false;
    }
  }
  return true;
}

void check_model_gradients(const Architecture& arch, std::uint64_t seed,
                           int batch, int rows, int cols) {
  Rng rng(derive_seed(904, "model-fd", seed));
  ModelParams params = init_model(arch, seed);
  // move off the zero-init head so every layer sees gradient
  for (auto& layer : params.dense) {
    layer.weight = layer.weight.unaryExpr(
        [&rng](double w) { return w + 0.3 * rng.uniform(-1.0, 1.0); });
  }

  std::vector<Grid2D> xs;
  std::vector<OrdinalTarget> targets;
  BatchForwardResult fwd;
  bool margin_ok = false;
  for (int attempt = 0; attempt < 20 && !margin_ok; ++attempt) {
    xs.clear();
    targets.clear();
    for (int e = 0; e < batch; ++e) {
      xs.push_back(random_grid(rows, cols, rng));
      targets.push_back(
          {rng.uniform_int(0, arch.categories - 1), arch.categories});
    }
    fwd = model_forward_batch(xs, params, Mode::kTrain, 0.0, {}, 1);
    margin_ok = relu_margin_ok(fwd.tapes, params, 5e-5);
  }
  REQUIRE(margin_ok);
  std::vector<Eigen::VectorXd> dlogits(batch);
  std::vector<double> frozen_weights(batch);
  for (int e = 0; e < batch; ++e) {
    dlogits[e] = ordinal_loss_logit_gradient(fwd.tapes[e].probs, targets[e]);
    frozen_weights[e] = ordinal_weight(fwd.tapes[e].probs, targets[e]);
  }
  ModelGrads grads = model_backward_batch(fwd.tapes, params, dlogits, 1);
  grads.scale(1.0 / batch);

  const Eigen::VectorXd theta = flatten_parameters(params);
  const Eigen::VectorXd analytic = flatten_gradients(grads);
  ModelParams probe = params;
  const auto loss = [&](const Eigen::VectorXd& th) {
    unflatten_parameters(th, probe);
    return model_batch_loss(probe, xs, targets, frozen_weights,
                            arch.dense_only() ? nullptr : &fwd.stats);
  };
  const auto report = check_gradient(theta, analytic, loss);
  CAPTURE(seed);
  CAPTURE(report.worst_index);
  CHECK(report.max_rel_error < kTol);
}

}  // namespace

TEST_CASE("full CNN gradients match finite differences") {
  Architecture arch;
  arch.input_channels = 4;
  arch.categories = 3;
  arch.conv = {{3, 2, 5, 2, 2}, {2, 1, 3, 1, 1}};
  arch.hidden = {5};
  arch.check();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    check_model_gradients(arch, seed, 3, 4, 30);
  }
}

TEST_CASE("full MLP gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const ModelParams mlp = mlp_build(12, 3, seed, {6, 5, 4});
    check_model_gradients(mlp.arch, seed, 3, 3, 4);
  }
}

TEST_CASE("zero output-gradient gives zero parameter gradients") {
  Rng rng(42);
  const ModelParams params = mlp_build(6, 2, 7, {4, 3, 3});
  const Grid2D x = random_grid(2, 3, rng);
  ModelTape tape;
  ForwardOptions opt;
  opt.mode = Mode::kInfer;
  model_forward(x, params, opt, &tape);
  const ModelGrads grads =
      model_backward(tape, params, Eigen::VectorXd::Zero(2));
  CHECK(grads.max_abs() == 0.0);
}

TEST_CASE("batch gradient equals the sum of per-example gradients") {
  Architecture arch;
  arch.input_channels = 3;
  arch.categories = 2;
  arch.conv = {{2, 2, 4, 2, 2}, {2, 1, 3, 1, 1}};
  arch.hidden = {4};
  ModelParams params = init_model(arch, 11);
  Rng rng(57);
  for (auto& layer : params.dense) {
    layer.weight = layer.weight.unaryExpr(
        [&rng](double w) { return w + 0.2 * rng.uniform(-1.0, 1.0); });
  }

  std::vector<Grid2D> xs;
  std::vector<OrdinalTarget> targets;
  for (int e = 0; e < 3; ++e) {
    xs.push_back(random_grid(3, 24, rng));
    targets.push_back({e % 2, 2});
  }
  const BatchForwardResult fwd =
      model_forward_batch(xs, params, Mode::kTrain, 0.0, {}, 1);
  std::vector<Eigen::VectorXd> dlogits;
  for (int e = 0; e < 3; ++e) {
    dlogits.push_back(
        ordinal_loss_logit_gradient(fwd.tapes[e].probs, targets[e]));
  }
  const ModelGrads batch = model_backward_batch(fwd.tapes, params, dlogits, 1);

  ModelGrads summed = ModelGrads::zeros_like(params);
  for (int e = 0; e < 3; ++e) {
    model_backward(fwd.tapes[e], params, dlogits[e], summed);
  }
  const Eigen::VectorXd a = flatten_gradients(batch);
  const Eigen::VectorXd b = flatten_gradients(summed);
  CHECK((a - b).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("Adam: zero gradient leaves parameters unchanged") {
  const ModelParams params = mlp_build(5, 2, 3, {4});
  ModelParams updated = params;
  AdamState state = AdamState::init(params, {});
  adam_step(updated, ModelGrads::zeros_like(params), state);
  CHECK(state.step == 1);
  CHECK((flatten_parameters(updated) - flatten_parameters(params))
            .lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("Adam: first step moves each parameter by about the learning rate") {
  ModelParams params = mlp_build(4, 2, 5, {3});
  Rng rng(9);
  ModelGrads grads = ModelGrads::zeros_like(params);
  for (auto& layer : grads.dense) {
    layer.weight = layer.weight.unaryExpr(
        [&rng](double) { return rng.uniform(0.5, 2.0) *
                                (rng.uniform() < 0.5 ? -1.0 : 1.0); });
    layer.bias = layer.bias.unaryExpr(
        [&rng](double) { return rng.uniform(0.5, 2.0) *
                                (rng.uniform() < 0.5 ? -1.0 : 1.0); });
  }
  AdamConfig config;
  config.learning_rate = 1e-2;
  AdamState state = AdamState::init(params, config);
  const Eigen::VectorXd before = flatten_parameters(params);
  adam_step(params, grads, state);
  const Eigen::VectorXd after = flatten_parameters(params);
  const Eigen::VectorXd g = flatten_gradients(grads);
  for (Eigen::Index i = 0; i < before.size(); ++i) {
    const double delta = after[i] - before[i];
    // bias-corrected first step: delta ~= -lr * sign(g)
    CHECK(delta * g[i] < 0.0);
    CHECK(std::abs(delta) == doctest::Approx(config.learning_rate)
                                 .epsilon(1e-6));
  }
}

TEST_CASE("Adam: identical runs produce bit-identical trajectories") {
  const auto run = [] {
    ModelParams params = mlp_build(6, 3, 21, {5});
    AdamState state = AdamState::init(params, {});
    Rng rng(33);
    for (int step = 0; step < 25; ++step) {
      ModelGrads grads = ModelGrads::zeros_like(params);
      for (auto& layer : grads.dense) {
        layer.weight = layer.weight.unaryExpr(
            [&rng](double) { return rng.uniform(-1.0, 1.0); });
        layer.bias = layer.bias.unaryExpr(
            [&rng](double) { return rng.uniform(-1.0, 1.0); });
      }
      adam_step(params, grads, state);
    }
    return flatten_parameters(params);
  };
  const Eigen::VectorXd a = run();
  const Eigen::VectorXd b = run();
  CHECK((a - b).lpNorm<Eigen::Infinity>() == 0.0);
}

#include "painmeter/consensus.hpp"

#include <algorithm>
#include <fstream>
#include <thread>

#include "painmeter/errors.hpp"
#include "painmeter/rng.hpp"

namespace painmeter {

void VoteTally::check() const {
  int sum = 0;
  for (Eigen::Index i = 0; i < counts.size(); ++i) {
    if (counts[i] < 0) throw UsageError("vote tally has a negative count");
    sum += counts[i];
  }
  if (sum != total) throw UsageError("vote tally total mismatch");
}

int plurality(const VoteTally& tally) {
  if (tally.counts.size() < 1) throw UsageError("plurality: empty tally");
  int best = 0;
  for (int i = 1; i < tally.counts.size(); ++i) {
    if (tally.counts[i] > tally.counts[best]) best = i;
  }
  return best;
}

namespace {

/// Per-unit slice votes: k classifications at random (minute, offset) draws.
std::vector<int> unit_votes(const ModelParams& params,
                            const ConsensusUnit& unit,
                            const Normalizer& normalizer, double seq_length_s,
                            int k, std::uint64_t seed) {
  if (unit.empty()) throw UsageError("consensus unit has no minute samples");
  if (k < 1) throw UsageError("consensus requires k >= 1");
  const MinuteSample& first = *unit.front();
  const int length = slice_timesteps(seq_length_s, first.sample_period_ms);
  for (const MinuteSample* m : unit) {
    if (m->values.cols() < length) {
      throw LengthError("consensus unit minute of " +
                        std::to_string(m->values.cols()) +
                        " timesteps is shorter than the slice length " +
                        std::to_string(length));
    }
  }
  Rng rng(seed);
  std::vector<int> votes;
  votes.reserve(k);
  for (int i = 0; i < k; ++i) {
    const MinuteSample& minute =
        *unit[unit.size() == 1 ? 0
                               : rng.uniform_int(
                                     0, static_cast<int>(unit.size()) - 1)];
    const int max_offset = static_cast<int>(minute.values.cols()) - length;
    const int offset = max_offset == 0 ? 0 : rng.uniform_int(0, max_offset);
    const Eigen::MatrixXd slice =
        normalizer.apply(minute.values.middleCols(offset, length));
    votes.push_back(argmax_index(model_forward(slice, params, Mode::kInfer)));
  }
  return votes;
}

}  // namespace

ConsensusResult consensus_predict(const ModelParams& params,
                                  const ConsensusUnit& unit,
                                  const Normalizer& normalizer,
                                  double seq_length_s, int k,
                                  std::uint64_t seed) {
  const std::vector<int> votes =
      unit_votes(params, unit, normalizer, seq_length_s, k, seed);
  ConsensusResult result;
  result.tally.counts = Eigen::VectorXi::Zero(params.arch.categories);
  for (int v : votes) ++result.tally.counts[v];
  result.tally.total = k;
  result.predicted_index = plurality(result.tally);
  return result;
}

std::vector<ConsensusCurvePoint> consensus_curve(
    const ModelParams& params, std::span<const ConsensusUnit> units,
    std::span<const int> truth_indices, const Normalizer& normalizer,
    double seq_length_s, std::span<const int> k_values,
    std::uint64_t base_seed, int workers) {
  if (units.empty()) throw UsageError("consensus_curve: no units");
  if (units.size() != truth_indices.size()) {
    throw UsageError("consensus_curve: unit/truth size mismatch");
  }
  if (k_values.empty()) throw UsageError("consensus_curve: no k values");
  if (!std::is_sorted(k_values.begin(), k_values.end())) {
    throw UsageError("consensus_curve: k values must ascend");
  }
  const int max_k = k_values.back();
  const int n = static_cast<int>(units.size());
  const int categories = params.arch.categories;

  // votes[u] holds max_k slice votes for unit u
  std::vector<std::vector<int>> votes(n);
  const auto run = [&](int begin, int end) {
    for (int u = begin; u < end; ++u) {
      votes[u] = unit_votes(params, units[u], normalizer, seq_length_s, max_k,
                            derive_seed(base_seed, "consensus-unit", u));
    }
  };
  const int threads = std::max(1, std::min(workers, n));
  if (threads == 1) {
    run(0, n);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back(run, static_cast<int>(static_cast<long>(n) * w / threads),
                        static_cast<int>(static_cast<long>(n) * (w + 1) / threads));
    }
    for (auto& t : pool) t.join();
  }

  std::vector<ConsensusCurvePoint> curve;
  curve.reserve(k_values.size());
  for (int k : k_values) {
    if (k < 1 || k > max_k) throw UsageError("consensus_curve: bad k");
    long correct = 0;
    for (int u = 0; u < n; ++u) {
      VoteTally tally;
      tally.counts = Eigen::VectorXi::Zero(categories);
      for (int i = 0; i < k; ++i) ++tally.counts[votes[u][i]];
      tally.total = k;
      correct += plurality(tally) == truth_indices[u];
    }
    curve.push_back({k, static_cast<double>(correct) / n});
  }
  return curve;
}

void save_consensus_curve(std::span<const ConsensusCurvePoint> curve,
                          const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write consensus curve " + path.string());
  out << "k\taccuracy\n";
  for (const auto& point : curve) {
    out << point.k << '\t' << point.accuracy << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace painmeter

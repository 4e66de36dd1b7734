#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "painmeter/nn.hpp"
#include "painmeter/pipeline.hpp"

namespace painmeter {

/// Vote counts over the category space from classifying k random slices.
struct VoteTally {
  Eigen::VectorXi counts;
  int total = 0;

  void check() const;  // counts >= 0 and summing to total
};

/// Category index with the maximal count; ties break toward the lowest
/// index (the conservative, lower pain score).
int plurality(const VoteTally& tally);

/// A unit to vote over: one or more minute samples of the same recording
/// (a single minute, a fold's test span, or the whole recording).
using ConsensusUnit = std::vector<const MinuteSample*>;

struct ConsensusResult {
  int predicted_index = 0;
  VoteTally tally;
};

/// Draws k slices at uniformly random (minute, offset) positions within the
/// unit, classifies each in inference mode after normalization, and returns
/// the plurality vote.
ConsensusResult consensus_predict(const ModelParams& params,
                                  const ConsensusUnit& unit,
                                  const Normalizer& normalizer,
                                  double seq_length_s, int k,
                                  std::uint64_t seed);

struct ConsensusCurvePoint {
  int k = 0;
  double accuracy = 0.0;
};

/// Consensus accuracy over all units for each requested slice count. Each
/// unit draws max(k_values) slice votes from a seed derived from `base_seed`
/// and its position; the accuracy at k uses the first k votes, so points of
/// the curve share their slice draws.
std::vector<ConsensusCurvePoint> consensus_curve(
    const ModelParams& params, std::span<const ConsensusUnit> units,
    std::span<const int> truth_indices, const Normalizer& normalizer,
    double seq_length_s, std::span<const int> k_values,
    std::uint64_t base_seed, int workers = 1);

/// Two-column "k<TAB>accuracy" text for external plotting.
void save_consensus_curve(std::span<const ConsensusCurvePoint> curve,
                          const std::filesystem::path& path);

}  // namespace painmeter

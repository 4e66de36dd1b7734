#pragma once

#include <filesystem>

#include "painmeter/nn.hpp"
#include "painmeter/pipeline.hpp"

namespace painmeter {

/// Everything needed to classify raw slices: the model plus the per-channel
/// normalization fitted on its training fold.
struct Checkpoint {
  ModelParams model;
  Normalizer normalizer;
};

/// Single-file binary format, little-endian, documented in
/// docs/checkpoint_format.md. Round-trips are bit-exact.
void save_checkpoint(const Checkpoint& checkpoint,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace painmeter
